#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include <json.hpp>

#include "prpo/dataset.hpp"
#include "prpo/error.hpp"
#include "prpo/eval.hpp"
#include "prpo/policy.hpp"
#include "prpo/trainer.hpp"

namespace prpo {

struct CurvePoint {
  std::int64_t step = 0;
  double shuffled_reward = 0.0;  // mean reward with columns in random order
  double original_reward = 0.0;  // mean reward with columns in CSV order
};

struct Curve {
  TrainMode mode = TrainMode::kPrpo;
  std::uint64_t seed = 0;
  std::size_t m = 0;
  std::size_t G = 0;
  std::vector<CurvePoint> points;
  std::vector<StepMetrics> metrics;
};

struct SeedComparison {
  std::uint64_t seed = 0;
  Curve prpo;
  Curve grpo;
  double auc_prpo = 0.0;
  double auc_grpo = 0.0;
  double delta() const { return auc_prpo - auc_grpo; }
};

struct AblationOptions {
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::size_t cadence = 50;
  bool evaluate_on_test = false;  // default: the train rows under shuffled columns
  EvalOptions eval;
};

struct AblationResult {
  std::vector<SeedComparison> seeds;
  std::size_t prpo_wins() const {
    std::size_t w = 0;
    for (const auto& s : seeds) w += s.delta() > 0.0;
    return w;
  }
};

// Trapezoidal area under the shuffled-order reward curve, normalized by the
// step span so a constant curve at r has area r.
inline double curve_auc(const std::vector<CurvePoint>& points) {
  require(points.size() >= 2, ErrorCode::kInvalidArgument, "AUC needs at least two checkpoints");
  double area = 0.0;
  for (std::size_t i = 1; i < points.size(); ++i) {
    area += 0.5 * (points[i - 1].shuffled_reward + points[i].shuffled_reward) *
            static_cast<double>(points[i].step - points[i - 1].step);
  }
  return area / static_cast<double>(points.back().step - points.front().step);
}

using PolicyFactory = std::function<std::unique_ptr<Policy>()>;

inline Curve run_curve(const DatasetSplit& data, const TaskManifest& manifest, const TrainConfig& cfg,
                       const PolicyFactory& make_policy, const AblationOptions& opts) {
  Curve curve;
  curve.mode = cfg.mode;
  curve.seed = cfg.seed;
  curve.m = cfg.permutations();
  curve.G = cfg.G;
  const auto& eval_rows = opts.evaluate_on_test ? data.test : data.train;
  EvalOptions shuffled = opts.eval;
  shuffled.tmpl = cfg.tmpl;
  shuffled.seed = derive_seed(cfg.seed, {0x4556ULL});
  shuffled.permutation_seed = derive_seed(cfg.seed, {0x53485546ULL});
  EvalOptions original = shuffled;
  original.permutation_seed.reset();

  TrainHooks hooks;
  hooks.checkpoint_every = opts.cadence;
  hooks.on_checkpoint = [&](std::int64_t step, Policy& policy) {
    curve.points.push_back({step, evaluate_policy(policy, eval_rows, manifest, shuffled).mean_reward,
                            evaluate_policy(policy, eval_rows, manifest, original).mean_reward});
  };
  auto policy = make_policy();
  curve.metrics = train(data, manifest, cfg, *policy, hooks).metrics;
  return curve;
}

// PRPO (m permutations x G rollouts) against GRPO with m*G rollouts of the
// original order, so both see the same number of completions per example.
// Both modes share per-seed batch order and rollout seeds.
inline AblationResult run_ablation(const DatasetSplit& data, const TaskManifest& manifest, const TrainConfig& base,
                                   const PolicyFactory& make_policy, const AblationOptions& opts = {}) {
  require(opts.cadence >= 1, ErrorCode::kInvalidArgument, "checkpoint cadence must be >= 1");
  AblationResult result;
  for (std::uint64_t seed : opts.seeds) {
    SeedComparison cmp;
    cmp.seed = seed;
    TrainConfig prpo_cfg = base;
    prpo_cfg.mode = TrainMode::kPrpo;
    prpo_cfg.seed = seed;
    TrainConfig grpo_cfg = prpo_cfg;
    grpo_cfg.mode = TrainMode::kGrpo;
    grpo_cfg.G = base.m * base.G;
    cmp.prpo = run_curve(data, manifest, prpo_cfg, make_policy, opts);
    cmp.grpo = run_curve(data, manifest, grpo_cfg, make_policy, opts);
    cmp.auc_prpo = curve_auc(cmp.prpo.points);
    cmp.auc_grpo = curve_auc(cmp.grpo.points);
    result.seeds.push_back(std::move(cmp));
  }
  return result;
}

inline nlohmann::json to_json(const Curve& c) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : c.points) {
    pts.push_back({{"step", p.step}, {"shuffled_reward", p.shuffled_reward}, {"original_reward", p.original_reward}});
  }
  return {{"mode", std::string(to_string(c.mode))}, {"seed", c.seed}, {"m", c.m}, {"G", c.G}, {"checkpoints", pts}};
}

}  // namespace prpo
