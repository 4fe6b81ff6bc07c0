#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "prpo/error.hpp"
#include "prpo/policy.hpp"
#include "prpo/serialize.hpp"

namespace prpo {

// Wire protocol (JSON over HTTP, UTF-8):
//   POST /rollout  {prompt, n, temperature, seed}
//               -> {completions: [{text, token_ids, logprobs}]}
//   POST /logprob  {prompt, token_ids, params_tag: "current"|"reference", temperature}
//               -> {logprobs}
//   POST /snapshot {step} -> {ok}
//   POST /update   {learning_rate, items: [{prompt, token_ids, weights, temperature}]} -> {ok}
// /snapshot and /update are needed only when training against the server.

struct RemoteOptions {
  int attempts = 3;
  std::chrono::milliseconds backoff{100};  // doubled after each failed attempt
  std::chrono::seconds timeout{60};
};

class RemotePolicy final : public Policy {
 public:
  explicit RemotePolicy(std::string endpoint, RemoteOptions opts = {})
      : endpoint_(std::move(endpoint)), opts_(opts) {
    require(opts_.attempts >= 1, ErrorCode::kInvalidArgument, "attempts must be >= 1");
  }

  const std::string& endpoint() const { return endpoint_; }

  std::vector<Completion> rollout(const Prompt& prompt, std::size_t n, double temperature,
                                  std::uint64_t seed) const override {
    require(n >= 1, ErrorCode::kInvalidArgument, "rollout needs n >= 1");
    require(temperature > 0.0, ErrorCode::kInvalidArgument, "temperature must be positive");
    const nlohmann::json reply =
        post("/rollout", {{"prompt", prompt.text}, {"n", n}, {"temperature", temperature}, {"seed", seed}});
    std::vector<Completion> out;
    try {
      const auto& list = reply.at("completions");
      if (!list.is_array() || list.size() != n) {
        violation("/rollout returned " + std::to_string(list.size()) + " completions, expected " + std::to_string(n));
      }
      for (const auto& item : list) {
        Completion c;
        c.text = item.at("text").get<std::string>();
        c.token_ids = item.at("token_ids").get<std::vector<std::int64_t>>();
        c.logprobs_current = item.at("logprobs").get<std::vector<double>>();
        c.temperature = temperature;
        check_logprobs(c.logprobs_current, c.token_ids.size(), "/rollout");
        out.push_back(std::move(c));
      }
    } catch (const nlohmann::json::exception& e) {
      violation(std::string("/rollout schema: ") + e.what());
    }
    return out;
  }

  std::vector<double> logprob(const Completion& completion, const Prompt& prompt, ParamsTag tag) const override {
    const nlohmann::json reply = post("/logprob", {{"prompt", prompt.text},
                                                   {"token_ids", completion.token_ids},
                                                   {"params_tag", to_string(tag)},
                                                   {"temperature", completion.temperature}});
    std::vector<double> lp;
    try {
      lp = reply.at("logprobs").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      violation(std::string("/logprob schema: ") + e.what());
    }
    check_logprobs(lp, completion.token_ids.size(), "/logprob");
    return lp;
  }

  void snapshot_reference(std::int64_t step) override { (void)post("/snapshot", {{"step", step}}); }

  void apply_update(std::span<const UpdateItem> items, double learning_rate) override {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& item : items) {
      list.push_back({{"prompt", item.prompt->text},
                      {"token_ids", item.completion->token_ids},
                      {"weights", item.weights},
                      {"temperature", item.completion->temperature}});
    }
    (void)post("/update", {{"learning_rate", learning_rate}, {"items", list}});
  }

 private:
  [[noreturn]] static void violation(const std::string& what) { fail(ErrorCode::kProtocolViolation, what); }

  static void check_logprobs(const std::vector<double>& lp, std::size_t tokens, const char* where) {
    if (tokens == 0) violation(std::string(where) + ": completion without tokens");
    if (lp.size() != tokens) {
      violation(std::string(where) + ": " + std::to_string(lp.size()) + " logprobs for " + std::to_string(tokens) +
                " tokens");
    }
    for (double v : lp) {
      if (!std::isfinite(v) || v > 1e-9) violation(std::string(where) + ": logprob outside (-inf, 0]");
    }
  }

  // Connection failures and 5xx responses are retried with exponential
  // backoff; other non-200 statuses and malformed bodies are protocol errors.
  nlohmann::json post(const std::string& path, const nlohmann::json& body) const {
    const std::string payload = body.dump();
    std::string last_error = "no attempt made";
    auto delay = opts_.backoff;
    for (int attempt = 0; attempt < opts_.attempts; ++attempt) {
      if (attempt > 0) {
        std::this_thread::sleep_for(delay);
        delay *= 2;
      }
      httplib::Client client(endpoint_);
      if (!client.is_valid()) fail(ErrorCode::kRemoteUnavailable, "invalid endpoint '" + endpoint_ + "'");
      client.set_connection_timeout(opts_.timeout);
      client.set_read_timeout(opts_.timeout);
      client.set_write_timeout(opts_.timeout);
      const auto res = client.Post(path, payload, "application/json");
      if (!res) {
        last_error = httplib::to_string(res.error());
        continue;
      }
      if (res->status >= 500) {
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) violation(path + " returned HTTP " + std::to_string(res->status) + ": " + res->body);
      try {
        return nlohmann::json::parse(res->body);
      } catch (const nlohmann::json::parse_error& e) {
        violation(path + " returned invalid JSON: " + e.what());
      }
    }
    fail(ErrorCode::kRemoteUnavailable, endpoint_ + path + " failed after " + std::to_string(opts_.attempts) +
                                            " attempts: " + last_error);
  }

  std::string endpoint_;
  RemoteOptions opts_;
};

// ---------------------------------------------------------------------------
// Stub server: serves any Policy over the wire protocol, with fault
// injection for exercising client error paths.

struct StubFaults {
  std::size_t fail_requests = 0;         // next N requests answer 503
  bool mismatched_lengths = false;       // /rollout logprobs one longer than token_ids
  bool missing_completions = false;      // /rollout omits the completions field
  std::optional<std::string> fixed_text; // replaces every completion text
};

class StubServer {
 public:
  explicit StubServer(std::unique_ptr<Policy> policy, std::string host = "127.0.0.1", int port = 0)
      : policy_(std::move(policy)), host_(std::move(host)) {
    install_routes();
    port_ = port == 0 ? server_.bind_to_any_port(host_) : (server_.bind_to_port(host_, port) ? port : -1);
    require(port_ > 0, ErrorCode::kIo, "stub server could not bind " + host_);
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  StubServer(const StubServer&) = delete;
  StubServer& operator=(const StubServer&) = delete;

  ~StubServer() { stop(); }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const { return port_; }
  std::string endpoint() const { return "http://" + host_ + ":" + std::to_string(port_); }

  void set_faults(StubFaults f) {
    std::lock_guard<std::mutex> lock(fault_mu_);
    faults_ = std::move(f);
  }

  std::size_t requests() const {
    std::lock_guard<std::mutex> lock(fault_mu_);
    return requests_;
  }

  // Blocks the calling thread until stop() is called from elsewhere.
  void wait() {
    if (thread_.joinable()) thread_.join();
  }

 private:
  using Handler = std::function<nlohmann::json(const nlohmann::json&, const StubFaults&)>;

  void route(const std::string& path, Handler handler) {
    server_.Post(path, [this, handler](const httplib::Request& req, httplib::Response& res) {
      StubFaults faults;
      {
        std::lock_guard<std::mutex> lock(fault_mu_);
        ++requests_;
        if (faults_.fail_requests > 0) {
          --faults_.fail_requests;
          res.status = 503;
          res.set_content(R"({"error":"injected failure"})", "application/json");
          return;
        }
        faults = faults_;
      }
      try {
        const nlohmann::json body = nlohmann::json::parse(req.body);
        res.set_content(handler(body, faults).dump(), "application/json");
      } catch (const nlohmann::json::exception& e) {
        res.status = 400;
        res.set_content(nlohmann::json{{"error", e.what()}}.dump(), "application/json");
      } catch (const Error& e) {
        res.status = 422;
        res.set_content(nlohmann::json{{"error", e.what()}}.dump(), "application/json");
      }
    });
  }

  static Prompt prompt_of(const nlohmann::json& body) {
    Prompt p;
    p.text = body.at("prompt").get<std::string>();
    return p;
  }

  void install_routes() {
    route("/rollout", [this](const nlohmann::json& body, const StubFaults& faults) {
      const Prompt prompt = prompt_of(body);
      std::vector<Completion> cs;
      {
        std::shared_lock lock(policy_mu_);
        cs = policy_->rollout(prompt, body.at("n").get<std::size_t>(), body.at("temperature").get<double>(),
                              body.at("seed").get<std::uint64_t>());
      }
      if (faults.missing_completions) return nlohmann::json{{"result", "ok"}};
      nlohmann::json list = nlohmann::json::array();
      for (auto& c : cs) {
        if (faults.fixed_text) c.text = *faults.fixed_text;
        if (faults.mismatched_lengths) c.logprobs_current.push_back(-1.0);
        list.push_back({{"text", c.text}, {"token_ids", c.token_ids}, {"logprobs", c.logprobs_current}});
      }
      return nlohmann::json{{"completions", list}};
    });
    route("/logprob", [this](const nlohmann::json& body, const StubFaults&) {
      const Prompt prompt = prompt_of(body);
      Completion c;
      c.token_ids = body.at("token_ids").get<std::vector<std::int64_t>>();
      c.temperature = body.value("temperature", 1.0);
      const std::string tag = body.at("params_tag").get<std::string>();
      if (tag != "current" && tag != "reference") fail(ErrorCode::kInvalidArgument, "unknown params_tag " + tag);
      std::shared_lock lock(policy_mu_);
      return nlohmann::json{
          {"logprobs", policy_->logprob(c, prompt, tag == "current" ? ParamsTag::kCurrent : ParamsTag::kReference)}};
    });
    route("/snapshot", [this](const nlohmann::json& body, const StubFaults&) {
      std::unique_lock lock(policy_mu_);
      policy_->snapshot_reference(body.value("step", std::int64_t{0}));
      return nlohmann::json{{"ok", true}};
    });
    route("/update", [this](const nlohmann::json& body, const StubFaults&) {
      const auto& list = body.at("items");
      std::vector<Prompt> prompts(list.size());
      std::vector<Completion> completions(list.size());
      std::vector<UpdateItem> items(list.size());
      for (std::size_t i = 0; i < list.size(); ++i) {
        prompts[i] = prompt_of(list[i]);
        completions[i].token_ids = list[i].at("token_ids").get<std::vector<std::int64_t>>();
        completions[i].temperature = list[i].value("temperature", 1.0);
        items[i] = UpdateItem{&prompts[i], &completions[i], list[i].at("weights").get<std::vector<double>>()};
      }
      std::unique_lock lock(policy_mu_);
      policy_->apply_update(items, body.at("learning_rate").get<double>());
      return nlohmann::json{{"ok", true}};
    });
  }

  std::unique_ptr<Policy> policy_;
  std::shared_mutex policy_mu_;
  std::string host_;
  int port_ = -1;
  httplib::Server server_;
  std::thread thread_;
  mutable std::mutex fault_mu_;
  StubFaults faults_;
  std::size_t requests_ = 0;
};

}  // namespace prpo
