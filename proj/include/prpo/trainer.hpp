#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "prpo/advantage.hpp"
#include "prpo/dataset.hpp"
#include "prpo/error.hpp"
#include "prpo/permute.hpp"
#include "prpo/policy.hpp"
#include "prpo/reward.hpp"
#include "prpo/rng.hpp"
#include "prpo/serialize.hpp"

namespace prpo {

enum class TrainMode { kPrpo, kGrpo };

inline std::string_view to_string(TrainMode m) { return m == TrainMode::kPrpo ? "prpo" : "grpo"; }

struct TrainConfig {
  std::size_t m = 4;
  std::size_t G = 5;
  double alpha = 0.1;
  double gamma = 0.9;
  double beta_kl = 0.001;
  double clip_eps = 0.2;
  double learning_rate = 1e-2;  // toy scale; LLM runs use 1e-6
  std::size_t batch_size = 128;
  std::size_t mini_batch = 32;
  std::size_t epochs = 30;
  std::size_t max_steps = 0;  // 0: epochs * ceil(|train| / batch_size)
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::kPrpo;
  double sigma_floor = kDefaultSigmaFloor;
  double temperature = 1.0;
  std::size_t jobs = 1;
  PromptTemplate tmpl = default_template();

  // GRPO samples only the original column order.
  std::size_t permutations() const { return mode == TrainMode::kGrpo ? 1 : m; }

  void validate() const {
    require(m >= 1 && G >= 2 && batch_size >= 1 && mini_batch >= 1 && epochs >= 1 && jobs >= 1,
            ErrorCode::kInvalidArgument, "counts must be >= 1 (G >= 2)");
    require(clip_eps > 0.0 && clip_eps < 1.0, ErrorCode::kInvalidArgument, "clip_eps must lie in (0, 1)");
    require(beta_kl >= 0.0, ErrorCode::kInvalidArgument, "beta_kl must be >= 0");
    require(alpha >= 0.0 && gamma >= 0.0, ErrorCode::kInvalidArgument, "alpha and gamma must be >= 0");
    require(learning_rate > 0.0 && temperature > 0.0, ErrorCode::kInvalidArgument,
            "learning_rate and temperature must be positive");
    require(sigma_floor >= 0.0, ErrorCode::kInvalidArgument, "sigma_floor must be >= 0");
  }
};

struct StepMetrics {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  double mean_reward = 0.0;
  double loss = 0.0;
  double kl = 0.0;
  double clip_fraction = 0.0;
  double nonzero_advantage_fraction = 0.0;
};

inline nlohmann::json to_json(const StepMetrics& s) {
  return nlohmann::json{{"step", s.step},
                        {"epoch", s.epoch},
                        {"mean_reward", s.mean_reward},
                        {"loss", s.loss},
                        {"kl", s.kl},
                        {"clip_fraction", s.clip_fraction},
                        {"nonzero_advantage_fraction", s.nonzero_advantage_fraction}};
}

// ---------------------------------------------------------------------------
// Objective pieces

inline double clip(double x, double lo, double hi) { return std::min(std::max(x, lo), hi); }

inline double ppo_term(double ratio, double advantage, double clip_eps) {
  return std::min(ratio * advantage, clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantage);
}

// d ppo_term / d log pi_theta. Zero when the clipped branch is the minimum.
inline double ppo_term_dlogp(double ratio, double advantage, double clip_eps) {
  const double unclipped = ratio * advantage;
  const double clipped = clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantage;
  const bool in_band = ratio >= 1.0 - clip_eps && ratio <= 1.0 + clip_eps;
  return in_band || unclipped <= clipped ? unclipped : 0.0;
}

inline bool outside_band(double ratio, double clip_eps) { return ratio < 1.0 - clip_eps || ratio > 1.0 + clip_eps; }

// Per-token k3 estimator exp(d) - d - 1 with d = logp_ref - logp_cur.
inline double kl_token(double logp_current, double logp_reference) {
  const double d = logp_reference - logp_current;
  return std::expm1(d) - d;
}

inline double kl_penalty(std::span<const double> logp_current, std::span<const double> logp_reference) {
  require(logp_current.size() == logp_reference.size(), ErrorCode::kLengthMismatch, "KL inputs differ in length");
  require(!logp_current.empty(), ErrorCode::kLengthMismatch, "KL of an empty sequence");
  double s = 0.0;
  for (std::size_t t = 0; t < logp_current.size(); ++t) s += kl_token(logp_current[t], logp_reference[t]);
  return s / static_cast<double>(logp_current.size());
}

// ---------------------------------------------------------------------------
// Rollout containers

struct RolloutGroup {
  Prompt prompt;
  std::vector<Completion> completions;
  std::vector<ExtractedAnswer> answers;
  std::vector<RewardRecord> rewards;
};

// Everything sampled for one training example: m groups of G completions
// and the advantages the loss uses (combined PRPO or plain GRPO).
struct ExampleRollouts {
  std::size_t example_id = 0;
  std::vector<RolloutGroup> groups;
  Grid<double> advantages;
  std::optional<AdvantageBundle> bundle;

  GroupRewards rewards() const {
    const std::size_t g = groups.empty() ? 0 : groups.front().rewards.size();
    GroupRewards r(groups.size(), g);
    for (std::size_t k = 0; k < groups.size(); ++k) {
      require(groups[k].rewards.size() == g, ErrorCode::kShapeMismatch, "ragged rollout groups");
      for (std::size_t i = 0; i < g; ++i) r(k, i) = groups[k].rewards[i].value;
    }
    return r;
  }
};

inline void assign_advantages(ExampleRollouts& ex, const TrainConfig& cfg) {
  const GroupRewards r = ex.rewards();
  if (cfg.mode == TrainMode::kGrpo) {
    require(r.rows() == 1, ErrorCode::kShapeMismatch, "GRPO expects a single group per example");
    const auto a = grpo_advantages(r.row(0), cfg.sigma_floor);
    ex.advantages = Grid<double>::from_rows({a});
    ex.bundle.reset();
  } else {
    ex.bundle = prpo_advantages(r, cfg.alpha, cfg.gamma, cfg.sigma_floor);
    ex.advantages = ex.bundle->combined;
  }
}

struct LossResult {
  double loss = 0.0;       // minimized; -surrogate + beta * kl
  double surrogate = 0.0;  // token mean of ppo_term
  double kl = 0.0;         // token mean of the KL estimator
  double clip_fraction = 0.0;
  std::size_t tokens = 0;
  std::vector<UpdateItem> items;  // dL/dlog pi per token, for the policy update
};

// Token-mean clipped surrogate over every (k, i) completion of every example,
// each token sharing its sequence's advantage, minus the KL penalty:
//   loss = -(1/N) sum_t min(r_t A, clip(r_t) A) + beta (1/N) sum_t kl_t
// with r_t = exp(logp_current_t - logp_reference_t).
inline LossResult prpo_loss(std::span<const ExampleRollouts> batch, const TrainConfig& cfg) {
  LossResult out;
  for (const auto& ex : batch) {
    require(ex.advantages.rows() == ex.groups.size(), ErrorCode::kShapeMismatch, "advantage rows != groups");
    for (std::size_t k = 0; k < ex.groups.size(); ++k) {
      require(ex.advantages.cols() == ex.groups[k].completions.size(), ErrorCode::kShapeMismatch,
              "advantage cols != completions");
      for (const auto& c : ex.groups[k].completions) {
        require(c.logprobs_current.size() == c.length() && c.logprobs_reference.size() == c.length() &&
                    c.length() >= 1,
                ErrorCode::kShapeMismatch, "completion log-prob lists misaligned");
        out.tokens += c.length();
      }
    }
  }
  require(out.tokens > 0, ErrorCode::kShapeMismatch, "empty batch");
  const double inv_n = 1.0 / static_cast<double>(out.tokens);

  std::size_t clipped = 0;
  for (const auto& ex : batch) {
    for (std::size_t k = 0; k < ex.groups.size(); ++k) {
      const auto& group = ex.groups[k];
      for (std::size_t i = 0; i < group.completions.size(); ++i) {
        const Completion& c = group.completions[i];
        const double a = ex.advantages(k, i);
        UpdateItem item{&group.prompt, &c, std::vector<double>(c.length())};
        for (std::size_t t = 0; t < c.length(); ++t) {
          const double lp = c.logprobs_current[t];
          const double lref = c.logprobs_reference[t];
          const double ratio = std::exp(lp - lref);
          out.surrogate += ppo_term(ratio, a, cfg.clip_eps);
          out.kl += kl_token(lp, lref);
          clipped += outside_band(ratio, cfg.clip_eps);
          const double dkl = -std::expm1(lref - lp);
          item.weights[t] = (-ppo_term_dlogp(ratio, a, cfg.clip_eps) + cfg.beta_kl * dkl) * inv_n;
        }
        out.items.push_back(std::move(item));
      }
    }
  }
  out.surrogate *= inv_n;
  out.kl *= inv_n;
  out.clip_fraction = static_cast<double>(clipped) * inv_n;
  out.loss = -out.surrogate + cfg.beta_kl * out.kl;
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

namespace detail {

// Runs fn(i) for i in [0, n) on up to `jobs` threads; results must be written
// to per-index slots so the outcome does not depend on scheduling.
inline void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> threads;
  const std::size_t workers = std::min(jobs, n);
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace detail

inline std::uint64_t permutation_seed(std::uint64_t seed, std::int64_t step, std::size_t example_id) {
  return derive_seed(seed, {static_cast<std::uint64_t>(step), example_id, 0x5045524DULL});
}

// Shared by both modes: group k = 0 (the identity order) draws the same
// stream under PRPO and GRPO for a given (seed, step, example).
inline std::uint64_t rollout_seed(std::uint64_t seed, std::int64_t step, std::size_t example_id, std::size_t k) {
  return derive_seed(seed, {static_cast<std::uint64_t>(step), example_id, k, 0x524F4C4CULL});
}

// Samples m permuted prompts x G completions for one example and scores them.
inline ExampleRollouts collect_rollouts(const TabularExample& example, const TaskManifest& manifest,
                                        const TrainConfig& cfg, const Policy& policy, std::int64_t step) {
  ExampleRollouts ex;
  ex.example_id = example.row_id;
  const std::size_t m = cfg.permutations();
  const PermutationSet perms = sample_permutations(example.size(), m, permutation_seed(cfg.seed, step, example.row_id));
  ex.groups.resize(m);
  for (std::size_t k = 0; k < m; ++k) {
    RolloutGroup& g = ex.groups[k];
    const TabularExample variant = apply_permutation(example, perms[k]);
    PromptMeta meta{example.row_id, k, example.size()};
    g.prompt = build_prompt(serialize_row(variant, cfg.tmpl), manifest, cfg.tmpl, {}, meta);
    g.completions = policy.rollout(g.prompt, cfg.G, cfg.temperature, rollout_seed(cfg.seed, step, example.row_id, k));
    for (auto& c : g.completions) {
      c.logprobs_reference = policy.logprob(c, g.prompt, ParamsTag::kReference);
      g.answers.push_back(extract_answer(c.text, manifest, cfg.tmpl));
      g.rewards.push_back(reward_for(g.answers.back(), example, manifest));
    }
  }
  assign_advantages(ex, cfg);
  return ex;
}

struct TrainHooks {
  std::function<void(const StepMetrics&)> on_step;
  // Called before step 0 with step=0 and after every `checkpoint_every`-th
  // step with the number of completed steps.
  std::function<void(std::int64_t, Policy&)> on_checkpoint;
  std::size_t checkpoint_every = 0;
};

struct TrainResult {
  std::vector<StepMetrics> metrics;
  std::size_t steps_per_epoch = 0;
  std::size_t total_steps = 0;
};

inline std::size_t steps_per_epoch(std::size_t train_size, std::size_t batch_size) {
  return (train_size + batch_size - 1) / batch_size;
}

// Algorithm: per step take a batch of examples, build m column-permuted
// prompts per example, sample G completions per prompt, reward them, form
// intra/inter advantages and their weighted combination, then take one
// gradient step per mini-batch on the clipped objective. The reference
// policy is re-snapshotted at the start of every epoch.
inline TrainResult train(const DatasetSplit& data, const TaskManifest& manifest, const TrainConfig& cfg,
                         Policy& policy, const TrainHooks& hooks = {}) {
  cfg.validate();
  require(!data.train.empty(), ErrorCode::kEmptyDataset, "train split is empty");
  if (manifest.task == TaskKind::kRegression) {
    require(manifest.label_range.has_value(), ErrorCode::kDegenerateRange, "regression manifest without label range");
  }

  TrainResult result;
  const std::size_t n_train = data.train.size();
  result.steps_per_epoch = steps_per_epoch(n_train, cfg.batch_size);
  result.total_steps = cfg.max_steps > 0 ? cfg.max_steps : cfg.epochs * result.steps_per_epoch;

  std::vector<std::size_t> order(n_train);
  policy.snapshot_reference(0);
  if (hooks.on_checkpoint) hooks.on_checkpoint(0, policy);

  for (std::size_t step = 0; step < result.total_steps; ++step) {
    const std::size_t epoch = step / result.steps_per_epoch;
    const std::size_t slot = step % result.steps_per_epoch;
    if (slot == 0) {
      if (step > 0) policy.snapshot_reference(static_cast<std::int64_t>(step));
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng(derive_seed(cfg.seed, {epoch, 0x45504F43ULL})).shuffle(std::span<std::size_t>(order));
    }
    const std::size_t begin = slot * cfg.batch_size;
    const std::size_t end = std::min(begin + cfg.batch_size, n_train);
    const std::size_t batch_n = end - begin;

    std::vector<ExampleRollouts> batch(batch_n);
    detail::parallel_for(batch_n, cfg.jobs, [&](std::size_t b) {
      batch[b] = collect_rollouts(data.train[order[begin + b]], manifest, cfg, policy,
                                  static_cast<std::int64_t>(step));
    });

    StepMetrics metrics;
    metrics.step = static_cast<std::int64_t>(step);
    metrics.epoch = static_cast<std::int64_t>(epoch);
    std::size_t completions = 0, nonzero = 0;
    double reward_sum = 0.0;
    for (const auto& ex : batch) {
      for (const auto& g : ex.groups) {
        for (const auto& r : g.rewards) reward_sum += r.value;
        completions += g.rewards.size();
      }
      nonzero += count_nonzero(ex.advantages);
    }
    metrics.mean_reward = reward_sum / static_cast<double>(completions);
    metrics.nonzero_advantage_fraction = static_cast<double>(nonzero) / static_cast<double>(completions);

    std::size_t updates = 0;
    for (std::size_t mb = 0; mb < batch_n; mb += cfg.mini_batch) {
      const std::size_t mb_end = std::min(mb + cfg.mini_batch, batch_n);
      std::span<ExampleRollouts> chunk(batch.data() + mb, mb_end - mb);
      detail::parallel_for(chunk.size(), cfg.jobs, [&](std::size_t e) {
        for (auto& g : chunk[e].groups) {
          for (auto& c : g.completions) c.logprobs_current = policy.logprob(c, g.prompt, ParamsTag::kCurrent);
        }
      });
      LossResult lr = prpo_loss(chunk, cfg);
      if (!std::isfinite(lr.loss)) {
        std::ostringstream msg;
        msg << "step " << step << " mini-batch " << mb / cfg.mini_batch << ": loss=" << lr.loss
            << " surrogate=" << lr.surrogate << " kl=" << lr.kl;
        fail(ErrorCode::kNonFiniteLoss, msg.str());
      }
      metrics.loss += lr.loss;
      metrics.kl += lr.kl;
      metrics.clip_fraction += lr.clip_fraction;
      ++updates;
      policy.apply_update(lr.items, cfg.learning_rate);
    }
    metrics.loss /= static_cast<double>(updates);
    metrics.kl /= static_cast<double>(updates);
    metrics.clip_fraction /= static_cast<double>(updates);

    result.metrics.push_back(metrics);
    if (hooks.on_step) hooks.on_step(metrics);
    if (hooks.on_checkpoint && hooks.checkpoint_every > 0 && (step + 1) % hooks.checkpoint_every == 0) {
      hooks.on_checkpoint(static_cast<std::int64_t>(step + 1), policy);
    }
  }
  return result;
}

}  // namespace prpo
