#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "prpo/dataset.hpp"
#include "prpo/error.hpp"
#include "prpo/permute.hpp"
#include "prpo/policy.hpp"
#include "prpo/reward.hpp"
#include "prpo/rng.hpp"
#include "prpo/serialize.hpp"
#include "prpo/text.hpp"

namespace prpo {

enum class MetricName { kAccuracy, kNmae };

inline std::string_view to_string(MetricName m) { return m == MetricName::kAccuracy ? "accuracy" : "nmae"; }
inline bool higher_is_better(MetricName m) { return m == MetricName::kAccuracy; }

struct EvalReport {
  std::string dataset_id;
  std::string method;
  TaskKind task = TaskKind::kClassification;
  MetricName metric_name = MetricName::kAccuracy;
  double value = 0.0;
  std::size_t n_examples = 0;
  std::size_t malformed_count = 0;
  std::optional<double> imputed_nmae;  // regression: value used for malformed rows
};

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j{{"dataset_id", r.dataset_id},
                   {"method", r.method},
                   {"task", std::string(to_string(r.task))},
                   {"metric_name", std::string(to_string(r.metric_name))},
                   {"value", r.value},
                   {"n_examples", r.n_examples},
                   {"malformed_count", r.malformed_count}};
  if (r.imputed_nmae) j["imputed_nmae"] = *r.imputed_nmae;
  return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    r.dataset_id = j.at("dataset_id").get<std::string>();
    r.method = j.at("method").get<std::string>();
    r.task = j.at("task").get<std::string>() == "regression" ? TaskKind::kRegression : TaskKind::kClassification;
    r.metric_name = j.at("metric_name").get<std::string>() == "nmae" ? MetricName::kNmae : MetricName::kAccuracy;
    r.value = j.at("value").get<double>();
    r.n_examples = j.at("n_examples").get<std::size_t>();
    r.malformed_count = j.at("malformed_count").get<std::size_t>();
    if (j.contains("imputed_nmae")) r.imputed_nmae = j.at("imputed_nmae").get<double>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kInvalidArgument, std::string("bad eval report: ") + e.what());
  }
  return r;
}

inline bool is_malformed(const ExtractedAnswer& a) { return !a.well_formatted || a.kind == AnswerKind::kMalformed; }

inline bool is_correct(const ExtractedAnswer& a, std::string_view label) {
  return a.well_formatted && a.kind == AnswerKind::kClassLabel && !a.off_list && fold(a.label) == fold(label);
}

inline double accuracy(const std::vector<ExtractedAnswer>& predictions, const std::vector<std::string>& labels) {
  require(predictions.size() == labels.size() && !predictions.empty(), ErrorCode::kLengthMismatch,
          "accuracy needs equal, nonempty prediction and label lists");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += is_correct(predictions[i], labels[i]);
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

struct NmaeResult {
  double value = 0.0;
  std::size_t malformed = 0;
  std::optional<double> imputed;
};

// Mean per-example nmae. Rows without a numeric answer are charged the worst
// nmae observed among the valid rows (1.0 when no row is valid).
inline NmaeResult nmae_detail(const std::vector<ExtractedAnswer>& predictions, const std::vector<double>& labels,
                              const LabelRange& range) {
  require(predictions.size() == labels.size() && !predictions.empty(), ErrorCode::kLengthMismatch,
          "nmae needs equal, nonempty prediction and label lists");
  require(range.min < range.max, ErrorCode::kDegenerateRange, "nmae needs min < max");
  std::vector<std::optional<double>> per(labels.size());
  std::optional<double> worst;
  NmaeResult out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (predictions[i].kind != AnswerKind::kNumber || !predictions[i].well_formatted) {
      ++out.malformed;
      continue;
    }
    per[i] = nmae(labels[i], predictions[i].number, range);
    worst = std::max(worst.value_or(0.0), *per[i]);
  }
  if (out.malformed > 0) out.imputed = worst.value_or(1.0);
  double sum = 0.0;
  for (const auto& e : per) sum += e.value_or(out.imputed.value_or(0.0));
  out.value = sum / static_cast<double>(labels.size());
  return out;
}

inline double nmae_metric(const std::vector<ExtractedAnswer>& predictions, const std::vector<double>& labels,
                          const LabelRange& range) {
  return nmae_detail(predictions, labels, range).value;
}

// ---------------------------------------------------------------------------
// Cross-dataset aggregation

inline constexpr double kTieThreshold = 1e-4;

struct WinTieLoss {
  std::string method;
  std::string opponent;
  std::size_t wins = 0;
  std::size_t ties = 0;
  std::size_t losses = 0;
};

struct Aggregate {
  std::map<std::string, double> mean;
  std::map<std::string, double> mean_rank;
  std::vector<WinTieLoss> win_tie_loss;  // every ordered pair of distinct methods
  std::vector<std::string> datasets;
};

// Ranks 1 = best per dataset; methods within kTieThreshold of one another
// share the average of the ranks they span.
inline Aggregate aggregate(const std::map<std::string, std::vector<EvalReport>>& by_method) {
  require(!by_method.empty(), ErrorCode::kCoverageMismatch, "no methods to aggregate");
  using Table = std::map<std::string, const EvalReport*>;
  std::map<std::string, Table> tables;
  for (const auto& [method, reports] : by_method) {
    auto& t = tables[method];
    for (const auto& r : reports) {
      require(t.emplace(r.dataset_id, &r).second, ErrorCode::kCoverageMismatch,
              "method '" + method + "' reports dataset '" + r.dataset_id + "' twice");
    }
  }
  const Table& first = tables.begin()->second;
  require(!first.empty(), ErrorCode::kCoverageMismatch, "no datasets to aggregate");
  for (const auto& [method, t] : tables) {
    require(t.size() == first.size(), ErrorCode::kCoverageMismatch, "method '" + method + "' covers a different dataset set");
    for (const auto& [ds, r] : first) {
      const auto it = t.find(ds);
      require(it != t.end(), ErrorCode::kCoverageMismatch, "method '" + method + "' lacks dataset '" + ds + "'");
      require(it->second->metric_name == r->metric_name, ErrorCode::kCoverageMismatch,
              "dataset '" + ds + "' reported with different metrics");
    }
  }

  Aggregate out;
  std::vector<std::string> methods;
  for (const auto& [method, t] : tables) methods.push_back(method);
  for (const auto& [ds, r] : first) out.datasets.push_back(ds);
  const double d = static_cast<double>(out.datasets.size());

  for (const auto& method : methods) {
    double s = 0.0;
    for (const auto& [ds, r] : tables[method]) s += r->value;
    out.mean[method] = s / d;
    out.mean_rank[method] = 0.0;
  }

  // Signed score where larger is better.
  const auto score = [&](const std::string& method, const std::string& ds) {
    const EvalReport* r = tables[method].at(ds);
    return higher_is_better(r->metric_name) ? r->value : -r->value;
  };

  for (const auto& ds : out.datasets) {
    std::vector<std::string> sorted = methods;
    std::stable_sort(sorted.begin(), sorted.end(),
                     [&](const std::string& a, const std::string& b) { return score(a, ds) > score(b, ds); });
    std::size_t i = 0;
    while (i < sorted.size()) {
      std::size_t j = i + 1;
      while (j < sorted.size() && std::abs(score(sorted[i], ds) - score(sorted[j], ds)) < kTieThreshold) ++j;
      const double avg = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
      for (std::size_t t = i; t < j; ++t) out.mean_rank[sorted[t]] += avg;
      i = j;
    }
  }
  for (auto& [method, rank] : out.mean_rank) rank /= d;

  for (const auto& a : methods) {
    for (const auto& b : methods) {
      if (a == b) continue;
      WinTieLoss w{a, b};
      for (const auto& ds : out.datasets) {
        const double delta = score(a, ds) - score(b, ds);
        if (std::abs(delta) < kTieThreshold) {
          ++w.ties;
        } else if (delta > 0) {
          ++w.wins;
        } else {
          ++w.losses;
        }
      }
      out.win_tie_loss.push_back(w);
    }
  }
  return out;
}

inline void write_summary_csv(std::ostream& out, const std::map<std::string, std::vector<EvalReport>>& by_method,
                              const Aggregate& agg) {
  out << "section,method,opponent,dataset_id,metric,value\n";
  for (const auto& [method, reports] : by_method) {
    for (const auto& r : reports) {
      out << "report," << csv_escape(method) << ",," << csv_escape(r.dataset_id) << "," << to_string(r.metric_name)
          << "," << render_number(r.value) << "\n";
    }
  }
  for (const auto& [method, v] : agg.mean) out << "mean," << csv_escape(method) << ",,,," << render_number(v) << "\n";
  for (const auto& [method, v] : agg.mean_rank) {
    out << "mean_rank," << csv_escape(method) << ",,,," << render_number(v) << "\n";
  }
  for (const auto& w : agg.win_tie_loss) {
    out << "win_tie_loss," << csv_escape(w.method) << "," << csv_escape(w.opponent) << ",,"
        << "wins/ties/losses," << w.wins << "/" << w.ties << "/" << w.losses << "\n";
  }
}

// ---------------------------------------------------------------------------
// Running a policy over examples

struct EvalOptions {
  PromptTemplate tmpl = default_template();
  double temperature = 1e-3;  // near-greedy decoding
  std::uint64_t seed = 0;
  // When set, each example is shown under a random column order drawn from
  // this seed instead of its original order.
  std::optional<std::uint64_t> permutation_seed;
  std::string method = "policy";
};

struct EvalOutcome {
  EvalReport report;
  std::vector<ExtractedAnswer> predictions;
  double mean_reward = 0.0;  // verifiable reward of the decoded answers
};

inline Permutation eval_permutation(std::size_t n, std::uint64_t seed, std::size_t example_id) {
  Permutation p = Permutation::identity(n);
  Rng rng(derive_seed(seed, {example_id, 0x4556414CULL}));
  rng.shuffle(std::span<std::size_t>(p.order));
  return p;
}

inline EvalOutcome evaluate_policy(const Policy& policy, const std::vector<TabularExample>& examples,
                                   const TaskManifest& manifest, const EvalOptions& opts = {}) {
  require(!examples.empty(), ErrorCode::kEmptyDataset, "nothing to evaluate");
  EvalOutcome out;
  double reward_sum = 0.0;
  std::vector<std::string> labels;
  std::vector<double> values;
  for (const auto& ex : examples) {
    const TabularExample shown =
        opts.permutation_seed ? apply_permutation(ex, eval_permutation(ex.size(), *opts.permutation_seed, ex.row_id))
                              : ex;
    const Prompt prompt =
        build_prompt(serialize_row(shown, opts.tmpl), manifest, opts.tmpl, {}, {ex.row_id, 0, ex.size()});
    const auto completions = policy.rollout(prompt, 1, opts.temperature, derive_seed(opts.seed, {ex.row_id}));
    out.predictions.push_back(extract_answer(completions.front().text, manifest, opts.tmpl));
    reward_sum += reward_for(out.predictions.back(), ex, manifest).value;
    labels.push_back(ex.label);
    if (ex.label_value) values.push_back(*ex.label_value);
  }

  EvalReport& r = out.report;
  r.dataset_id = manifest.dataset_id;
  r.method = opts.method;
  r.task = manifest.task;
  r.n_examples = examples.size();
  if (manifest.task == TaskKind::kClassification) {
    r.metric_name = MetricName::kAccuracy;
    r.value = accuracy(out.predictions, labels);
    for (const auto& p : out.predictions) r.malformed_count += is_malformed(p);
  } else {
    r.metric_name = MetricName::kNmae;
    const NmaeResult n = nmae_detail(out.predictions, values, *manifest.label_range);
    r.value = n.value;
    r.malformed_count = n.malformed;
    r.imputed_nmae = n.imputed;
  }
  out.mean_reward = reward_sum / static_cast<double>(examples.size());
  return out;
}

}  // namespace prpo
