#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "prpo/dataset.hpp"
#include "prpo/error.hpp"
#include "prpo/policy.hpp"
#include "prpo/rng.hpp"
#include "prpo/serialize.hpp"
#include "prpo/text.hpp"

namespace prpo {

using LogitTable = std::map<std::string, std::vector<double>>;

// Linear softmax head: logits(prompt) = sum over active keys of act(key) * logits[key].
struct PolicyParams {
  std::vector<std::string> answer_vocab;
  LogitTable logits;

  friend bool operator==(const PolicyParams&, const PolicyParams&) = default;
};

// Immutable once taken; shared between the policy and anyone holding it.
struct ReferenceSnapshot {
  std::shared_ptr<const PolicyParams> params;
  std::int64_t snapshot_step = 0;
};

// Turns a serialized row into active (key, activation) pairs. Keys are tagged
// with the sentence position, so the same feature seen at a different column
// position hits different parameters: the toy head is deliberately
// order-sensitive.
struct FeatureEncoder {
  std::vector<std::string> feature_names;
  std::map<std::string, std::pair<double, double>> numeric;  // name -> (center, scale)
  PromptTemplate tmpl;

  static std::string bias_key() { return "bias"; }
  static std::string numeric_key(std::size_t pos, const std::string& name) {
    return "p" + std::to_string(pos) + ":" + name;
  }
  static std::string categorical_key(std::size_t pos, const std::string& name, const std::string& value) {
    return "p" + std::to_string(pos) + ":" + name + "=" + value;
  }

  std::vector<std::pair<std::string, double>> encode(std::string_view prompt_text) const {
    const auto row = locate_target_row(prompt_text, tmpl);
    if (!row) fail(ErrorCode::kInvalidArgument, "toy policy: no target row in prompt");
    const auto pairs = parse_row(*row, feature_names, tmpl);
    if (!pairs) fail(ErrorCode::kInvalidArgument, "toy policy: cannot parse row '" + std::string(*row) + "'");
    std::vector<std::pair<std::string, double>> active;
    active.reserve(pairs->size() + 1);
    active.emplace_back(bias_key(), 1.0);
    for (std::size_t pos = 0; pos < pairs->size(); ++pos) {
      const auto& [name, value] = (*pairs)[pos];
      if (const auto it = numeric.find(name); it != numeric.end()) {
        if (const auto x = parse_number(value)) {
          active.emplace_back(numeric_key(pos, name), (*x - it->second.first) / it->second.second);
        }
        continue;
      }
      active.emplace_back(categorical_key(pos, name, value), 1.0);
    }
    return active;
  }
};

struct ToyOptions {
  PromptTemplate tmpl = default_template();
  std::size_t regression_bins = 16;
  double init_scale = 0.0;  // stddev of random initial logits; 0 gives a uniform policy
  std::uint64_t init_seed = 0;
  std::string think_text = "Weighing each listed feature against the question.";
};

// Built-in desk-scale policy. Each completion carries a single answer token:
// a label index (classification) or a bin index over the train label range
// (regression; the emitted answer is the bin midpoint).
class ToyPolicy final : public Policy {
 public:
  static ToyPolicy build(const TaskManifest& manifest, const std::vector<TabularExample>& train,
                         const ToyOptions& opts = {}) {
    require(!train.empty(), ErrorCode::kEmptyDataset, "toy policy needs training rows");
    ToyPolicy p;
    p.task_ = manifest.task;
    p.think_text_ = opts.think_text;
    p.encoder_.tmpl = opts.tmpl;

    const auto& first = train.front().features;
    for (const auto& f : first) p.encoder_.feature_names.push_back(f.name);
    const std::size_t n = first.size();

    if (manifest.task == TaskKind::kClassification) {
      p.params_.answer_vocab = manifest.label_values;
    } else {
      require(manifest.label_range.has_value(), ErrorCode::kDegenerateRange, "toy regression policy needs label range");
      require(opts.regression_bins >= 2, ErrorCode::kInvalidArgument, "need at least two regression bins");
      p.label_range_ = *manifest.label_range;
      const double width = p.label_range_->width() / static_cast<double>(opts.regression_bins);
      for (std::size_t b = 0; b < opts.regression_bins; ++b) {
        p.params_.answer_vocab.push_back(
            render_number(p.label_range_->min + (static_cast<double>(b) + 0.5) * width));
      }
    }
    require(!p.params_.answer_vocab.empty(), ErrorCode::kInvalidArgument, "empty answer vocabulary");
    {
      std::set<std::string> uniq(p.params_.answer_vocab.begin(), p.params_.answer_vocab.end());
      require(uniq.size() == p.params_.answer_vocab.size(), ErrorCode::kInvalidArgument,
              "answer vocabulary has duplicates");
    }

    std::map<std::string, std::set<std::string>> categories;
    for (std::size_t j = 0; j < n; ++j) {
      const std::string& name = first[j].name;
      bool numeric = true;
      double sum = 0.0, sumsq = 0.0;
      for (const auto& ex : train) {
        require(ex.features.size() == n && ex.features[j].name == name, ErrorCode::kArityMismatch,
                "training rows disagree on feature columns");
        if (!ex.features[j].numeric) numeric = false;
        categories[name].insert(ex.features[j].value);
        if (numeric) {
          sum += *ex.features[j].numeric;
          sumsq += *ex.features[j].numeric * *ex.features[j].numeric;
        }
      }
      if (numeric) {
        const double count = static_cast<double>(train.size());
        const double mean = sum / count;
        const double var = std::max(0.0, sumsq / count - mean * mean);
        const double sd = std::sqrt(var);
        p.encoder_.numeric[name] = {mean, sd > 1e-12 ? sd : 1.0};
      }
    }

    const std::size_t v = p.params_.answer_vocab.size();
    Rng rng(opts.init_seed);
    const auto init = [&] {
      std::vector<double> w(v, 0.0);
      if (opts.init_scale > 0.0) {
        for (double& x : w) x = opts.init_scale * rng.normal();
      }
      return w;
    };
    p.params_.logits[FeatureEncoder::bias_key()] = init();
    for (std::size_t pos = 0; pos < n; ++pos) {
      for (const auto& name : p.encoder_.feature_names) {
        if (p.encoder_.numeric.count(name)) {
          p.params_.logits[FeatureEncoder::numeric_key(pos, name)] = init();
        } else {
          for (const auto& value : categories[name]) {
            p.params_.logits[FeatureEncoder::categorical_key(pos, name, value)] = init();
          }
        }
      }
    }
    p.snapshot_reference(0);
    return p;
  }

  // -- Policy ---------------------------------------------------------------

  std::vector<Completion> rollout(const Prompt& prompt, std::size_t n, double temperature,
                                  std::uint64_t seed) const override {
    require(n >= 1, ErrorCode::kInvalidArgument, "rollout needs n >= 1");
    require(temperature > 0.0 && std::isfinite(temperature), ErrorCode::kInvalidArgument,
            "temperature must be positive");
    const auto active = encoder_.encode(prompt.text);
    const auto logp = log_softmax(params_, active, temperature);
    Rng rng(seed);
    std::vector<Completion> out;
    out.reserve(n);
    for (std::size_t g = 0; g < n; ++g) {
      const double u = rng.uniform();
      std::size_t idx = 0;
      double cdf = 0.0;
      for (; idx + 1 < logp.size(); ++idx) {
        cdf += std::exp(logp[idx]);
        if (u < cdf) break;
      }
      Completion c;
      c.text = format_completion(think_text_, params_.answer_vocab[idx], encoder_.tmpl);
      c.token_ids = {static_cast<std::int64_t>(idx)};
      c.logprobs_current = {logp[idx]};
      c.temperature = temperature;
      out.push_back(std::move(c));
    }
    return out;
  }

  std::vector<double> logprob(const Completion& completion, const Prompt& prompt, ParamsTag tag) const override {
    return logprob_under(tag == ParamsTag::kCurrent ? params_ : *reference_.params, completion, prompt);
  }

  void snapshot_reference(std::int64_t step) override {
    reference_ = ReferenceSnapshot{std::make_shared<const PolicyParams>(params_), step};
  }

  void apply_update(std::span<const UpdateItem> items, double learning_rate) override {
    const LogitTable grad = loss_gradient(params_, items);
    for (const auto& [key, g] : grad) {
      auto& w = params_.logits.at(key);
      for (std::size_t j = 0; j < w.size(); ++j) w[j] -= learning_rate * g[j];
    }
  }

  // -- Explicit-parameter forms ---------------------------------------------

  std::vector<double> logprob_under(const PolicyParams& params, const Completion& completion,
                                    const Prompt& prompt) const {
    const std::size_t idx = token_index(params, completion);
    const auto logp = log_softmax(params, encoder_.encode(prompt.text), completion.temperature);
    return {logp[idx]};
  }

  // d log pi(token) / d logits[key][j] = act(key) * (onehot_j - p_j) / T.
  LogitTable grad_logprob(const PolicyParams& params, const Completion& completion, const Prompt& prompt) const {
    const std::size_t idx = token_index(params, completion);
    const auto active = encoder_.encode(prompt.text);
    const auto logp = log_softmax(params, active, completion.temperature);
    LogitTable grad;
    for (const auto& [key, act] : active) {
      if (!params.logits.count(key)) continue;
      auto& g = grad[key];
      g.assign(logp.size(), 0.0);
      for (std::size_t j = 0; j < logp.size(); ++j) {
        g[j] = act * ((j == idx ? 1.0 : 0.0) - std::exp(logp[j])) / completion.temperature;
      }
    }
    return grad;
  }

  // sum over items and tokens of weight_t * grad log pi(token_t).
  LogitTable loss_gradient(const PolicyParams& params, std::span<const UpdateItem> items) const {
    LogitTable total;
    for (const auto& item : items) {
      require(item.weights.size() == item.completion->length(), ErrorCode::kLengthMismatch,
              "update weights do not match completion length");
      const LogitTable g = grad_logprob(params, *item.completion, *item.prompt);
      for (const auto& [key, vec] : g) {
        auto& acc = total[key];
        if (acc.empty()) acc.assign(vec.size(), 0.0);
        for (std::size_t j = 0; j < vec.size(); ++j) acc[j] += item.weights[0] * vec[j];
      }
    }
    return total;
  }

  // Full next-token distribution for a prompt (log space).
  std::vector<double> answer_logprobs(const Prompt& prompt, double temperature = 1.0) const {
    return log_softmax(params_, encoder_.encode(prompt.text), temperature);
  }

  std::size_t greedy_index(const Prompt& prompt) const {
    const auto logp = answer_logprobs(prompt);
    return static_cast<std::size_t>(std::max_element(logp.begin(), logp.end()) - logp.begin());
  }

  const PolicyParams& params() const { return params_; }
  PolicyParams& mutable_params() { return params_; }
  const ReferenceSnapshot& reference() const { return reference_; }
  const FeatureEncoder& encoder() const { return encoder_; }
  TaskKind task() const { return task_; }

  // -- Persistence ------------------------------------------------------------

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["kind"] = "toy";
    j["task"] = std::string(to_string(task_));
    j["answer_vocab"] = params_.answer_vocab;
    j["feature_names"] = encoder_.feature_names;
    nlohmann::json numeric = nlohmann::json::object();
    for (const auto& [name, cs] : encoder_.numeric) numeric[name] = {cs.first, cs.second};
    j["numeric"] = numeric;
    if (label_range_) j["label_range"] = {label_range_->min, label_range_->max};
    j["think_text"] = think_text_;
    j["template"] = template_to_json(encoder_.tmpl);
    nlohmann::json logits = nlohmann::json::object();
    for (const auto& [key, w] : params_.logits) logits[key] = w;
    j["logits"] = logits;
    return j;
  }

  static ToyPolicy from_json(const nlohmann::json& j) {
    ToyPolicy p;
    try {
      require(j.at("kind").get<std::string>() == "toy", ErrorCode::kInvalidArgument, "not a toy policy file");
      p.task_ = j.at("task").get<std::string>() == "regression" ? TaskKind::kRegression : TaskKind::kClassification;
      p.params_.answer_vocab = j.at("answer_vocab").get<std::vector<std::string>>();
      p.encoder_.feature_names = j.at("feature_names").get<std::vector<std::string>>();
      for (const auto& [name, cs] : j.at("numeric").items()) {
        p.encoder_.numeric[name] = {cs.at(0).get<double>(), cs.at(1).get<double>()};
      }
      if (j.contains("label_range")) {
        p.label_range_ = LabelRange{j["label_range"].at(0).get<double>(), j["label_range"].at(1).get<double>()};
      }
      p.think_text_ = j.value("think_text", p.think_text_);
      if (j.contains("template")) p.encoder_.tmpl = template_from_json(j.at("template"));
      for (const auto& [key, w] : j.at("logits").items()) {
        auto vec = w.get<std::vector<double>>();
        require(vec.size() == p.params_.answer_vocab.size(), ErrorCode::kShapeMismatch,
                "logit vector '" + key + "' has wrong width");
        for (double x : vec) require(std::isfinite(x), ErrorCode::kInvalidArgument, "non-finite logit");
        p.params_.logits[key] = std::move(vec);
      }
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::kInvalidArgument, std::string("bad toy policy file: ") + e.what());
    }
    p.snapshot_reference(0);
    return p;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
    out << to_json().dump(1) << "\n";
  }

  static ToyPolicy load(const std::filesystem::path& path) { return from_json(nlohmann::json::parse(read_file(path))); }

 private:
  ToyPolicy() = default;

  static std::size_t token_index(const PolicyParams& params, const Completion& c) {
    require(c.token_ids.size() == 1, ErrorCode::kUnknownToken, "toy completions carry exactly one answer token");
    const auto id = c.token_ids.front();
    require(id >= 0 && static_cast<std::size_t>(id) < params.answer_vocab.size(), ErrorCode::kUnknownToken,
            "token id " + std::to_string(id) + " outside answer vocabulary");
    return static_cast<std::size_t>(id);
  }

  static std::vector<double> log_softmax(const PolicyParams& params,
                                         const std::vector<std::pair<std::string, double>>& active,
                                         double temperature) {
    std::vector<double> z(params.answer_vocab.size(), 0.0);
    for (const auto& [key, act] : active) {
      const auto it = params.logits.find(key);
      if (it == params.logits.end()) continue;  // unseen category
      for (std::size_t j = 0; j < z.size(); ++j) z[j] += act * it->second[j];
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (double& x : z) {
      x /= temperature;
      mx = std::max(mx, x);
    }
    double s = 0.0;
    for (double x : z) s += std::exp(x - mx);
    const double lse = mx + std::log(s);
    for (double& x : z) x -= lse;
    return z;
  }

  TaskKind task_ = TaskKind::kClassification;
  PolicyParams params_;
  ReferenceSnapshot reference_;
  FeatureEncoder encoder_;
  std::optional<LabelRange> label_range_;
  std::string think_text_ = ToyOptions{}.think_text;
};

}  // namespace prpo
