// prpo_stub_server: serves a toy policy over the inference HTTP protocol so
// that the remote client path can be exercised without a language model.

#include <chrono>
#include <csignal>
#include <iostream>
#include <memory>
#include <string>
#include <thread>

#include <CLI11.hpp>

#include "prpo/dataset.hpp"
#include "prpo/error.hpp"
#include "prpo/remote.hpp"
#include "prpo/toy_policy.hpp"

namespace {

volatile std::sig_atomic_t g_stop = 0;

void on_signal(int) { g_stop = 1; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Toy inference server speaking the PRPO rollout protocol"};
  std::string dataset, manifest, params, host = "127.0.0.1";
  int port = 8080;
  double init_scale = 0.0;
  std::uint64_t init_seed = 0;
  app.add_option("--params", params, "Toy policy parameters written by 'prpo train'");
  app.add_option("--dataset", dataset, "CSV used to build a fresh toy policy");
  app.add_option("--manifest", manifest, "Manifest for --dataset");
  app.add_option("--init-scale", init_scale, "Stddev of random initial logits for a fresh policy")
      ->capture_default_str();
  app.add_option("--init-seed", init_seed, "Seed of the random initial logits")->capture_default_str();
  app.add_option("--host", host, "Bind address")->capture_default_str();
  app.add_option("--port", port, "Port; 0 picks a free one")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  try {
    std::unique_ptr<prpo::ToyPolicy> policy;
    if (!params.empty()) {
      policy = std::make_unique<prpo::ToyPolicy>(prpo::ToyPolicy::load(params));
    } else if (!dataset.empty() && !manifest.empty()) {
      prpo::LoadedDataset data = prpo::load_dataset(dataset, manifest);
      if (data.manifest.task == prpo::TaskKind::kRegression) prpo::resolve_label_range(data.manifest, data.examples);
      prpo::ToyOptions o;
      o.init_scale = init_scale;
      o.init_seed = init_seed;
      policy = std::make_unique<prpo::ToyPolicy>(prpo::ToyPolicy::build(data.manifest, data.examples, o));
    } else {
      std::cerr << "prpo_stub_server: pass --params, or --dataset together with --manifest\n";
      return 2;
    }
    prpo::StubServer server(std::move(policy), host, port);
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    std::cout << server.endpoint() << std::endl;
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    server.stop();
  } catch (const prpo::Error& e) {
    std::cerr << "prpo_stub_server: error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
