// prpo: prepare prompts, train, evaluate and run the PRPO/GRPO ablation on
// tabular prediction tasks.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "prpo/ablation.hpp"
#include "prpo/dataset.hpp"
#include "prpo/error.hpp"
#include "prpo/eval.hpp"
#include "prpo/permute.hpp"
#include "prpo/remote.hpp"
#include "prpo/serialize.hpp"
#include "prpo/toy_policy.hpp"
#include "prpo/trainer.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitNonFinite = 3;
constexpr int kExitRemote = 4;
constexpr int kExitProtocol = 5;
constexpr int kExitInternal = 70;

void log(const std::string& msg) { std::cerr << "[prpo] " << msg << "\n"; }

struct DataArgs {
  std::string dataset;
  std::string manifest;
  std::string tmpl;
  double test_fraction = 0.2;
  std::uint64_t split_seed = 42;
};

struct TrainArgs {
  std::string mode = "prpo";
  prpo::TrainConfig cfg;
  std::string endpoint;
};

void add_data_options(CLI::App* cmd, DataArgs& d, bool with_split = true) {
  cmd->add_option("--dataset", d.dataset, "CSV file with a header row")->required()->check(CLI::ExistingFile);
  cmd->add_option("--manifest", d.manifest, "Task manifest (JSON)")->required();
  cmd->add_option("--template", d.tmpl, "Prompt template (JSON); defaults to the built-in template");
  if (with_split) {
    cmd->add_option("--test-fraction", d.test_fraction, "Fraction of rows held out for testing")
        ->capture_default_str();
    cmd->add_option("--split-seed", d.split_seed, "Seed of the train/test split")->capture_default_str();
  }
}

void add_train_options(CLI::App* cmd, TrainArgs& t) {
  auto& c = t.cfg;
  cmd->add_option("--mode", t.mode, "prpo or grpo")
      ->check(CLI::IsMember({"prpo", "grpo"}))
      ->capture_default_str();
  cmd->add_option("--m", c.m, "Column permutations per example")->capture_default_str();
  cmd->add_option("--G", c.G, "Completions per prompt")->capture_default_str();
  cmd->add_option("--alpha", c.alpha, "Weight of the intra-permutation advantage")->capture_default_str();
  cmd->add_option("--gamma", c.gamma, "Weight of the inter-permutation advantage")->capture_default_str();
  cmd->add_option("--beta-kl", c.beta_kl, "KL penalty coefficient")->capture_default_str();
  cmd->add_option("--clip-eps", c.clip_eps, "Ratio clip half-width")->capture_default_str();
  cmd->add_option("--lr", c.learning_rate, "Learning rate")->capture_default_str();
  cmd->add_option("--batch-size", c.batch_size, "Examples per step")->capture_default_str();
  cmd->add_option("--mini-batch", c.mini_batch, "Examples per gradient update")->capture_default_str();
  cmd->add_option("--epochs", c.epochs, "Epochs when --steps is 0")->capture_default_str();
  cmd->add_option("--steps", c.max_steps, "Total steps (0: epochs x steps per epoch)")->capture_default_str();
  cmd->add_option("--temperature", c.temperature, "Sampling temperature")->capture_default_str();
  cmd->add_option("--seed", c.seed, "Training seed")->capture_default_str();
  cmd->add_option("--jobs", c.jobs, "Worker threads for rollouts and scoring")->capture_default_str();
  cmd->add_option("--endpoint", t.endpoint, "Inference server URL; the built-in toy policy is used when empty")
      ->envname("PRPO_ENDPOINT");
}

struct Loaded {
  prpo::LoadedDataset data;
  prpo::DatasetSplit split;
  prpo::PromptTemplate tmpl;
};

Loaded load_task(const DataArgs& d, bool do_split = true) {
  Loaded out;
  out.tmpl = d.tmpl.empty() ? prpo::default_template() : prpo::load_template(d.tmpl);
  out.data = prpo::load_dataset(d.dataset, d.manifest);
  if (out.data.dropped_rows > 0) log("dropped " + std::to_string(out.data.dropped_rows) + " rows with missing values");
  if (do_split) {
    out.split = prpo::split(out.data.examples, d.test_fraction, d.split_seed);
    if (out.split.warning) log(*out.split.warning);
    if (out.data.manifest.task == prpo::TaskKind::kRegression) {
      prpo::resolve_label_range(out.data.manifest, out.split.train);
    }
  }
  return out;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) prpo::fail(prpo::ErrorCode::kIo, "cannot write " + path.string());
  return out;
}

// Runs without --out get their own directory named after the UTC start time.
std::string default_out_dir(const std::string& command) {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm utc{};
  gmtime_r(&now, &utc);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", &utc);
  fs::path dir = fs::path("runs") / (std::string(stamp) + "-" + command);
  for (int n = 2; fs::exists(dir); ++n) dir = fs::path("runs") / (std::string(stamp) + "-" + command + "-" + std::to_string(n));
  return dir.string();
}

fs::path prepare_out_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) prpo::fail(prpo::ErrorCode::kIo, "cannot create output directory " + dir + ": " + ec.message());
  return fs::path(dir);
}

void finalize_mode(TrainArgs& t) {
  t.cfg.mode = t.mode == "grpo" ? prpo::TrainMode::kGrpo : prpo::TrainMode::kPrpo;
  if (t.cfg.mode == prpo::TrainMode::kGrpo && t.cfg.m != 1) {
    log("mode grpo: m coerced from " + std::to_string(t.cfg.m) + " to 1");
    t.cfg.m = 1;
  }
}

nlohmann::json config_json(const prpo::TrainConfig& c, const std::string& endpoint) {
  nlohmann::json j{{"mode", std::string(prpo::to_string(c.mode))},
                   {"m", c.m},
                   {"G", c.G},
                   {"alpha", c.alpha},
                   {"gamma", c.gamma},
                   {"beta_kl", c.beta_kl},
                   {"clip_eps", c.clip_eps},
                   {"learning_rate", c.learning_rate},
                   {"batch_size", c.batch_size},
                   {"mini_batch", c.mini_batch},
                   {"epochs", c.epochs},
                   {"max_steps", c.max_steps},
                   {"temperature", c.temperature},
                   {"seed", c.seed}};
  if (!endpoint.empty()) j["endpoint"] = endpoint;
  return j;
}

prpo::ToyPolicy make_toy(const Loaded& t) {
  prpo::ToyOptions o;
  o.tmpl = t.tmpl;
  return prpo::ToyPolicy::build(t.data.manifest, t.split.train, o);
}

// ---------------------------------------------------------------------------

int cmd_prepare(const DataArgs& d, std::size_t m, std::uint64_t seed, const std::string& out_dir) {
  const Loaded t = load_task(d, false);
  const fs::path dir = prepare_out_dir(out_dir);
  auto out = open_out(dir / "prompts.jsonl");
  std::size_t records = 0;
  for (const auto& ex : t.data.examples) {
    const auto perms = prpo::sample_permutations(ex.size(), m, prpo::permutation_seed(seed, 0, ex.row_id)).perms;
    for (std::size_t k = 0; k < perms.size(); ++k) {
      const auto variant = prpo::apply_permutation(ex, perms[k]);
      const auto prompt = prpo::build_prompt(prpo::serialize_row(variant, t.tmpl), t.data.manifest, t.tmpl, {},
                                             {ex.row_id, k, ex.size()});
      out << nlohmann::json{{"example_id", ex.row_id},
                            {"permutation_id", k},
                            {"order", perms[k].order},
                            {"prompt", prompt.text},
                            {"label", ex.label}}
                 .dump()
          << "\n";
      ++records;
    }
  }
  log("wrote " + std::to_string(records) + " prompt records to " + (dir / "prompts.jsonl").string());
  return kExitOk;
}

int cmd_train(const DataArgs& d, TrainArgs t, const std::string& out_dir) {
  finalize_mode(t);
  Loaded task = load_task(d);
  t.cfg.tmpl = task.tmpl;
  const fs::path dir = prepare_out_dir(out_dir);
  open_out(dir / "config.json") << config_json(t.cfg, t.endpoint).dump(2) << "\n";

  std::unique_ptr<prpo::Policy> policy;
  prpo::ToyPolicy* toy = nullptr;
  if (t.endpoint.empty()) {
    auto p = std::make_unique<prpo::ToyPolicy>(make_toy(task));
    toy = p.get();
    policy = std::move(p);
  } else {
    policy = std::make_unique<prpo::RemotePolicy>(t.endpoint);
    log("training against " + t.endpoint);
  }

  auto metrics = open_out(dir / "metrics.jsonl");
  prpo::TrainHooks hooks;
  hooks.on_step = [&](const prpo::StepMetrics& s) {
    metrics << prpo::to_json(s).dump() << "\n";
    metrics.flush();
  };
  const auto result = prpo::train(task.split, task.data.manifest, t.cfg, *policy, hooks);
  log("completed " + std::to_string(result.total_steps) + " steps (" + std::to_string(result.steps_per_epoch) +
      " per epoch)");
  if (toy) toy->save(dir / "params.json");

  prpo::EvalOptions eo;
  eo.tmpl = task.tmpl;
  eo.seed = t.cfg.seed;
  const auto test = prpo::evaluate_policy(*policy, task.split.test, task.data.manifest, eo);
  std::ostringstream msg;
  msg << "test " << prpo::to_string(test.report.metric_name) << " = " << test.report.value << " on "
      << test.report.n_examples << " rows";
  log(msg.str());
  return kExitOk;
}

int cmd_eval(const DataArgs& d, const std::vector<std::string>& methods, const std::vector<std::string>& includes,
             std::uint64_t seed, const std::string& endpoint, const std::string& out_dir) {
  Loaded task = load_task(d);
  const fs::path dir = prepare_out_dir(out_dir);

  std::vector<std::pair<std::string, std::string>> specs;
  for (const auto& m : methods) {
    const auto eq = m.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == m.size()) {
      prpo::fail(prpo::ErrorCode::kInvalidArgument, "--method expects NAME=PARAMS_FILE or NAME=URL, got '" + m + "'");
    }
    specs.emplace_back(m.substr(0, eq), m.substr(eq + 1));
  }
  if (specs.empty()) {
    if (endpoint.empty()) prpo::fail(prpo::ErrorCode::kInvalidArgument, "eval needs --method or --endpoint");
    specs.emplace_back("remote", endpoint);
  }

  std::map<std::string, std::vector<prpo::EvalReport>> by_method;
  auto reports = open_out(dir / "eval.jsonl");
  for (const auto& [name, source] : specs) {
    std::unique_ptr<prpo::Policy> policy;
    if (source.rfind("http://", 0) == 0 || source.rfind("https://", 0) == 0) {
      policy = std::make_unique<prpo::RemotePolicy>(source);
    } else {
      policy = std::make_unique<prpo::ToyPolicy>(prpo::ToyPolicy::load(source));
    }
    prpo::EvalOptions eo;
    eo.tmpl = task.tmpl;
    eo.seed = seed;
    eo.method = name;
    const auto outcome = prpo::evaluate_policy(*policy, task.split.test, task.data.manifest, eo);
    reports << prpo::to_json(outcome.report).dump() << "\n";
    by_method[name].push_back(outcome.report);
    std::ostringstream msg;
    msg << name << ": " << prpo::to_string(outcome.report.metric_name) << " = " << outcome.report.value;
    log(msg.str());
  }
  for (const auto& file : includes) {
    std::istringstream lines(prpo::read_file(file));
    std::string line;
    while (std::getline(lines, line)) {
      if (prpo::trim(line).empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        prpo::fail(prpo::ErrorCode::kInvalidArgument, file + ": " + e.what());
      }
      const auto r = prpo::report_from_json(j);
      by_method[r.method].push_back(r);
    }
  }
  const auto agg = prpo::aggregate(by_method);
  auto summary = open_out(dir / "summary.csv");
  prpo::write_summary_csv(summary, by_method, agg);
  return kExitOk;
}

int cmd_ablate(const DataArgs& d, TrainArgs t, const std::vector<std::uint64_t>& seeds, std::size_t cadence,
               bool on_test, const std::string& out_dir) {
  if (t.mode != "prpo") log("ablate always pairs prpo with grpo; --mode is ignored");
  t.cfg.mode = prpo::TrainMode::kPrpo;
  if (!t.endpoint.empty()) {
    prpo::fail(prpo::ErrorCode::kInvalidArgument,
               "ablate trains fresh policies per seed and mode; it runs with the built-in toy policy only");
  }
  Loaded task = load_task(d);
  t.cfg.tmpl = task.tmpl;
  const fs::path dir = prepare_out_dir(out_dir);

  prpo::AblationOptions opts;
  opts.seeds = seeds;
  opts.cadence = cadence;
  opts.evaluate_on_test = on_test;
  opts.eval.tmpl = task.tmpl;
  const auto result = prpo::run_ablation(task.split, task.data.manifest, t.cfg, [&] {
    return std::make_unique<prpo::ToyPolicy>(make_toy(task));
  }, opts);

  auto table = open_out(dir / "ablation.csv");
  table << "seed,auc_prpo,auc_grpo,delta\n";
  nlohmann::json summary{{"config", config_json(t.cfg, "")}, {"cadence", cadence}, {"seeds", nlohmann::json::array()}};
  for (const auto& s : result.seeds) {
    for (const prpo::Curve* c : {&s.prpo, &s.grpo}) {
      const std::string name = "curve_" + std::string(prpo::to_string(c->mode)) + "_seed" + std::to_string(s.seed);
      open_out(dir / (name + ".json")) << prpo::to_json(*c).dump(2) << "\n";
      auto m = open_out(dir / (name + "_metrics.jsonl"));
      for (const auto& step : c->metrics) m << prpo::to_json(step).dump() << "\n";
    }
    table << s.seed << "," << prpo::render_number(s.auc_prpo) << "," << prpo::render_number(s.auc_grpo) << ","
          << prpo::render_number(s.delta()) << "\n";
    summary["seeds"].push_back(
        {{"seed", s.seed}, {"auc_prpo", s.auc_prpo}, {"auc_grpo", s.auc_grpo}, {"delta", s.delta()}});
    std::ostringstream msg;
    msg << "seed " << s.seed << ": AUC(PRPO) - AUC(GRPO) = " << s.delta();
    log(msg.str());
  }
  summary["prpo_wins"] = result.prpo_wins();
  open_out(dir / "ablation.json") << summary.dump(2) << "\n";
  log("PRPO wins " + std::to_string(result.prpo_wins()) + " of " + std::to_string(result.seeds.size()) + " seeds");
  return kExitOk;
}

int exit_code_for(prpo::ErrorCode code) {
  switch (code) {
    case prpo::ErrorCode::kNonFiniteLoss:
      return kExitNonFinite;
    case prpo::ErrorCode::kRemoteUnavailable:
      return kExitRemote;
    case prpo::ErrorCode::kProtocolViolation:
      return kExitProtocol;
    default:
      return kExitValidation;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PRPO: permutation relative policy optimization for tabular prediction"};
  app.set_config("--config", "", "INI or TOML file supplying option defaults");
  app.require_subcommand(1);

  DataArgs data;
  TrainArgs train_args;
  std::string out_dir;
  std::size_t m = 4;
  std::uint64_t seed = 0;

  auto* prepare = app.add_subcommand("prepare", "Write the permuted prompt set as JSON lines");
  add_data_options(prepare, data, false);
  prepare->add_option("--m", m, "Column permutations per example")->capture_default_str();
  prepare->add_option("--seed", seed, "Permutation seed")->capture_default_str();
  prepare->add_option("--out", out_dir, "Output directory (default: runs/<UTC timestamp>-<command>)");

  auto* train = app.add_subcommand("train", "Train a policy and write per-step metrics");
  add_data_options(train, data);
  add_train_options(train, train_args);
  train->add_option("--out", out_dir, "Output directory (default: runs/<UTC timestamp>-<command>)");

  std::vector<std::string> methods, includes;
  std::string eval_endpoint;
  auto* eval = app.add_subcommand("eval", "Evaluate one or more policies on the test split");
  add_data_options(eval, data);
  eval->add_option("--method", methods, "NAME=PARAMS_FILE or NAME=URL; repeatable");
  eval->add_option("--include", includes, "Extra eval.jsonl reports to aggregate with; repeatable")
      ->check(CLI::ExistingFile);
  eval->add_option("--endpoint", eval_endpoint, "Inference server URL evaluated as method 'remote'")
      ->envname("PRPO_ENDPOINT");
  eval->add_option("--seed", seed, "Decoding seed")->capture_default_str();
  eval->add_option("--jobs", train_args.cfg.jobs, "Accepted for symmetry; evaluation is sequential");
  eval->add_option("--out", out_dir, "Output directory (default: runs/<UTC timestamp>-<command>)");

  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::size_t cadence = 50;
  bool on_test = false;
  auto* ablate = app.add_subcommand("ablate", "Compare PRPO against budget-matched GRPO across seeds");
  add_data_options(ablate, data);
  add_train_options(ablate, train_args);
  ablate->add_option("--seeds", seeds, "Training seeds")->delimiter(',')->capture_default_str();
  ablate->add_option("--cadence", cadence, "Steps between curve checkpoints")->capture_default_str();
  ablate->add_flag("--on-test", on_test, "Score checkpoints on the test split instead of the train rows");
  ablate->add_option("--out", out_dir, "Output directory (default: runs/<UTC timestamp>-<command>)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  for (const auto* sub : app.get_subcommands()) {
    if (out_dir.empty()) out_dir = default_out_dir(sub->get_name());
  }

  try {
    if (*prepare) return cmd_prepare(data, m, seed, out_dir);
    if (*train) return cmd_train(data, train_args, out_dir);
    if (*eval) return cmd_eval(data, methods, includes, seed, eval_endpoint, out_dir);
    if (*ablate) return cmd_ablate(data, train_args, seeds, cadence, on_test, out_dir);
  } catch (const prpo::Error& e) {
    std::cerr << "prpo: error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "prpo: internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitValidation;
}
