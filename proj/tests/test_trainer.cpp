#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "gradcheck.hpp"
#include "helpers.hpp"
#include "oracles.hpp"
#include "prpo/eval.hpp"
#include "prpo/error.hpp"
#include "prpo/synthetic.hpp"
#include "prpo/toy_policy.hpp"
#include "prpo/trainer.hpp"

using namespace prpo;

namespace {

struct Task {
  LoadedDataset data = make_separable();
  DatasetSplit split_ = split(data.examples, 0.2, 42);
};

const Task& task() {
  static const Task t;
  return t;
}

ToyPolicy fresh_policy() { return ToyPolicy::build(task().data.manifest, task().split_.train); }

TrainConfig quick_config() {
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.mini_batch = 4;
  cfg.max_steps = 10;
  cfg.seed = 3;
  return cfg;
}

std::string metrics_jsonl(const std::vector<StepMetrics>& ms) {
  std::ostringstream out;
  for (const auto& m : ms) out << to_json(m).dump() << "\n";
  return out.str();
}

// Wraps a policy and records calls; optionally corrupts log-probs.
class Spy final : public Policy {
 public:
  explicit Spy(Policy& inner) : inner_(inner) {}
  std::vector<Completion> rollout(const Prompt& p, std::size_t n, double t, std::uint64_t seed) const override {
    return inner_.rollout(p, n, t, seed);
  }
  std::vector<double> logprob(const Completion& c, const Prompt& p, ParamsTag tag) const override {
    auto lp = inner_.logprob(c, p, tag);
    if (poison && tag == ParamsTag::kCurrent) lp[0] = std::numeric_limits<double>::quiet_NaN();
    return lp;
  }
  void snapshot_reference(std::int64_t step) override {
    snapshots.push_back(step);
    inner_.snapshot_reference(step);
  }
  void apply_update(std::span<const UpdateItem> items, double lr) override {
    ++updates;
    inner_.apply_update(items, lr);
  }
  bool poison = false;
  std::vector<std::int64_t> snapshots;
  std::size_t updates = 0;

 private:
  Policy& inner_;
};

}  // namespace

TEST(PpoTerm, WorkedValues) {
  EXPECT_DOUBLE_EQ(ppo_term(1.5, 2.0, 0.2), 2.4);
  EXPECT_DOUBLE_EQ(ppo_term(0.5, -1.0, 0.2), -0.8);
  for (double a : {-3.0, -0.5, 0.0, 0.7, 2.0}) EXPECT_EQ(ppo_term(1.0, a, 0.2), a);
}

TEST(PpoTerm, DerivativeMatchesFiniteDifference) {
  Rng rng(4);
  for (int t = 0; t < 2000; ++t) {
    const double eps = 0.05 + 0.4 * rng.uniform();
    const double lp = std::log(0.05 + 0.9 * rng.uniform());
    const double lref = lp + 0.8 * (rng.uniform() - 0.5);
    const double a = 4.0 * (rng.uniform() - 0.5);
    const double r = std::exp(lp - lref);
    if (std::fabs(r - 1 + eps) < 1e-4 || std::fabs(r - 1 - eps) < 1e-4) continue;
    const auto f = [&](const std::vector<double>& x) { return ppo_term(std::exp(x[0] - lref), a, eps); };
    EXPECT_NEAR(ppo_term_dlogp(r, a, eps), oracle::central_difference(f, {lp}, 0, 1e-6), 1e-6);
  }
}

TEST(Kl, WorkedValuesAndNonNegativity) {
  const std::vector<double> a{-0.2, -1.5};
  EXPECT_EQ(kl_penalty(a, a), 0.0);
  const std::vector<double> cur{std::log(0.25)}, ref{std::log(0.5)};
  EXPECT_NEAR(kl_penalty(cur, ref), 0.3069, 1e-4);
  EXPECT_NEAR(kl_penalty(cur, ref), 2.0 - std::log(2.0) - 1.0, 1e-12);
  Rng rng(8);
  for (int t = 0; t < 1000; ++t) {
    const double x = -10.0 * rng.uniform(), y = -10.0 * rng.uniform();
    EXPECT_GE(kl_token(x, y), 0.0);
  }
  EXPECT_THROW(kl_penalty(std::vector<double>{1.0}, std::vector<double>{}), Error);
}

TEST(PrpoLoss, RatioOneWithoutKlIsNegativeMeanAdvantage) {
  TrainConfig cfg = quick_config();
  cfg.beta_kl = 0.0;
  ToyPolicy p = ToyPolicy::build(task().data.manifest, task().split_.train, {default_template(), 16, 0.5, 3});
  std::vector<ExampleRollouts> batch;
  for (std::size_t i = 0; i < 4; ++i) {
    batch.push_back(collect_rollouts(task().split_.train[i], task().data.manifest, cfg, p, 0));
  }
  double sum = 0.0;
  std::size_t n = 0;
  for (auto& ex : batch) {
    for (auto& g : ex.groups) {
      for (auto& c : g.completions) c.logprobs_current = p.logprob(c, g.prompt, ParamsTag::kCurrent);
    }
    for (double a : ex.advantages.flat()) {
      sum += a;
      ++n;
    }
  }
  const LossResult lr = prpo_loss(batch, cfg);
  EXPECT_NEAR(lr.loss, -sum / static_cast<double>(n), 1e-15);
  EXPECT_EQ(lr.kl, 0.0);
  EXPECT_EQ(lr.clip_fraction, 0.0);
  EXPECT_EQ(lr.tokens, n);
}

TEST(PrpoLoss, ZeroAdvantagesLeaveOnlyKl) {
  TrainConfig cfg = quick_config();
  cfg.beta_kl = 0.3;
  ToyPolicy p = ToyPolicy::build(task().data.manifest, task().split_.train, {default_template(), 16, 0.5, 3});
  ExampleRollouts ex = collect_rollouts(task().split_.train[0], task().data.manifest, cfg, p, 0);
  for (double& a : ex.advantages.flat()) a = 0.0;
  p.mutable_params().logits["bias"][0] += 0.7;
  for (auto& g : ex.groups) {
    for (auto& c : g.completions) c.logprobs_current = p.logprob(c, g.prompt, ParamsTag::kCurrent);
  }
  const LossResult lr = prpo_loss(std::span<const ExampleRollouts>(&ex, 1), cfg);
  EXPECT_GT(lr.kl, 0.0);
  EXPECT_DOUBLE_EQ(lr.loss, cfg.beta_kl * lr.kl);
}

TEST(PrpoLoss, SinglePermutationEqualsGrpoBitwise) {
  Rng rng(12);
  for (int t = 0; t < 50; ++t) {
    TrainConfig prpo_cfg = quick_config();
    prpo_cfg.m = 1;
    prpo_cfg.alpha = rng.uniform();
    prpo_cfg.gamma = 1.0 - prpo_cfg.alpha;
    prpo_cfg.G = 2 + rng.below(10);
    prpo_cfg.seed = rng.next();
    TrainConfig grpo_cfg = prpo_cfg;
    grpo_cfg.mode = TrainMode::kGrpo;
    ToyPolicy p = ToyPolicy::build(task().data.manifest, task().split_.train, {default_template(), 16, 0.5, static_cast<std::uint64_t>(t)});
    ExampleRollouts a = collect_rollouts(task().split_.train[t], task().data.manifest, prpo_cfg, p, 0);
    p.mutable_params().logits["bias"][1] += 0.3;
    for (auto& g : a.groups) {
      for (auto& c : g.completions) c.logprobs_current = p.logprob(c, g.prompt, ParamsTag::kCurrent);
    }
    ExampleRollouts b = a;
    assign_advantages(b, grpo_cfg);
    EXPECT_EQ(a.advantages, b.advantages);
    const LossResult la = prpo_loss(std::span<const ExampleRollouts>(&a, 1), prpo_cfg);
    const LossResult lb = prpo_loss(std::span<const ExampleRollouts>(&b, 1), grpo_cfg);
    EXPECT_EQ(la.loss, lb.loss);
  }
}

TEST(PrpoLoss, ShapeChecks) {
  TrainConfig cfg = quick_config();
  ToyPolicy p = fresh_policy();
  ExampleRollouts ex = collect_rollouts(task().split_.train[0], task().data.manifest, cfg, p, 0);
  ex.groups[0].completions[0].logprobs_current.clear();
  EXPECT_THROW(prpo_loss(std::span<const ExampleRollouts>(&ex, 1), cfg), Error);
  EXPECT_THROW(prpo_loss(std::span<const ExampleRollouts>(), cfg), Error);
}

TEST(PrpoLoss, GradientMatchesFiniteDifferences) {
  Rng rng(2025);
  for (int t = 0; t < 10; ++t) {
    const auto out = gradcheck::run(rng.next(), gradcheck::random_config(rng));
    EXPECT_LT(out.max_rel_error, 1e-5);
    EXPECT_GT(out.coordinates, 0u);
  }
}

TEST(CollectRollouts, ShapesAndIdentityFirst) {
  TrainConfig cfg = quick_config();
  ToyPolicy p = fresh_policy();
  const auto& ex = task().split_.train[5];
  const ExampleRollouts r = collect_rollouts(ex, task().data.manifest, cfg, p, 7);
  ASSERT_EQ(r.groups.size(), cfg.m);
  EXPECT_EQ(r.advantages.rows(), cfg.m);
  EXPECT_EQ(r.advantages.cols(), cfg.G);
  EXPECT_EQ(locate_target_row(r.groups[0].prompt.text, cfg.tmpl), serialize_row(ex));
  for (std::size_t k = 0; k < cfg.m; ++k) {
    EXPECT_EQ(r.groups[k].prompt.permutation_id, k);
    EXPECT_EQ(r.groups[k].completions.size(), cfg.G);
  }
  ASSERT_TRUE(r.bundle.has_value());

  TrainConfig g = cfg;
  g.mode = TrainMode::kGrpo;
  g.G = cfg.m * cfg.G;
  const ExampleRollouts rg = collect_rollouts(ex, task().data.manifest, g, p, 7);
  EXPECT_EQ(rg.groups.size(), 1u);
  EXPECT_FALSE(rg.bundle.has_value());
  // Both modes draw the identity group from the same stream.
  for (std::size_t i = 0; i < cfg.G; ++i) {
    EXPECT_EQ(rg.groups[0].completions[i].token_ids, r.groups[0].completions[i].token_ids);
  }
}

TEST(Train, StepCountsAndReferenceRefresh) {
  TrainConfig cfg = quick_config();
  cfg.max_steps = 0;
  cfg.epochs = 3;
  cfg.batch_size = 64;
  cfg.mini_batch = 32;
  ToyPolicy inner = fresh_policy();
  Spy spy(inner);
  std::vector<std::int64_t> checkpoints;
  TrainHooks hooks;
  hooks.checkpoint_every = 2;
  hooks.on_checkpoint = [&](std::int64_t step, Policy&) { checkpoints.push_back(step); };
  const TrainResult r = train(task().split_, task().data.manifest, cfg, spy, hooks);
  EXPECT_EQ(r.steps_per_epoch, 3u);  // ceil(160 / 64)
  EXPECT_EQ(r.total_steps, 9u);
  EXPECT_EQ(r.metrics.size(), 9u);
  EXPECT_EQ(spy.snapshots, (std::vector<std::int64_t>{0, 3, 6}));
  EXPECT_EQ(spy.updates, 3u * (2 + 2 + 1));  // batches of 64, 64, 32 in mini-batches of 32
  EXPECT_EQ(checkpoints, (std::vector<std::int64_t>{0, 2, 4, 6, 8}));
  for (std::size_t i = 0; i < r.metrics.size(); ++i) {
    EXPECT_EQ(r.metrics[i].step, static_cast<std::int64_t>(i));
    EXPECT_EQ(r.metrics[i].epoch, static_cast<std::int64_t>(i / 3));
  }
}

TEST(Train, NonFiniteLossCarriesDiagnostics) {
  ToyPolicy inner = fresh_policy();
  Spy spy(inner);
  spy.poison = true;
  try {
    train(task().split_, task().data.manifest, quick_config(), spy);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNonFiniteLoss);
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
  }
}

TEST(Train, RejectsBadConfig) {
  ToyPolicy p = fresh_policy();
  TrainConfig cfg = quick_config();
  cfg.G = 1;
  EXPECT_THROW(train(task().split_, task().data.manifest, cfg, p), Error);
  cfg = quick_config();
  cfg.clip_eps = 0.0;
  EXPECT_THROW(train(task().split_, task().data.manifest, cfg, p), Error);
}

TEST(Train, DeterministicAndJobIndependent) {
  TrainConfig cfg = quick_config();
  ToyPolicy a = fresh_policy(), b = fresh_policy(), c = fresh_policy();
  const auto ma = metrics_jsonl(train(task().split_, task().data.manifest, cfg, a).metrics);
  const auto mb = metrics_jsonl(train(task().split_, task().data.manifest, cfg, b).metrics);
  cfg.jobs = 3;
  const auto mc = metrics_jsonl(train(task().split_, task().data.manifest, cfg, c).metrics);
  EXPECT_EQ(ma, mb);
  EXPECT_EQ(ma, mc);
  EXPECT_EQ(a.params(), c.params());
}

TEST(Train, GrpoModeRunsWithSinglePermutation) {
  TrainConfig cfg = quick_config();
  cfg.mode = TrainMode::kGrpo;
  EXPECT_EQ(cfg.permutations(), 1u);
  ToyPolicy p = fresh_policy();
  const TrainResult r = train(task().split_, task().data.manifest, cfg, p);
  EXPECT_EQ(r.metrics.size(), 10u);
  for (const auto& m : r.metrics) EXPECT_TRUE(std::isfinite(m.loss));
}

TEST(Train, LearnsSeparableTask) {
  // The table is separable by construction; confirm with a perceptron.
  std::vector<std::vector<double>> xs;
  std::vector<int> ys;
  for (const auto& ex : task().data.examples) {
    std::vector<double> x;
    for (const auto& f : ex.features) x.push_back(*f.numeric);
    xs.push_back(x);
    ys.push_back(ex.label == "yes" ? 1 : -1);
  }
  ASSERT_TRUE(oracle::linearly_separable(xs, ys));

  TrainConfig cfg;
  cfg.max_steps = 300;
  cfg.seed = 42;
  ToyPolicy p = fresh_policy();
  const TrainResult r = train(task().split_, task().data.manifest, cfg, p);
  ASSERT_EQ(r.metrics.size(), 300u);
  double prev = -1.0;
  for (std::size_t w = 0; w < 6; ++w) {
    double s = 0.0;
    for (std::size_t i = 50 * w; i < 50 * (w + 1); ++i) s += r.metrics[i].mean_reward;
    EXPECT_GT(s / 50.0, prev) << "window " << w;
    prev = s / 50.0;
  }
  EvalOptions eo;
  EXPECT_GE(evaluate_policy(p, task().split_.train, task().data.manifest, eo).report.value, 0.95);
}

TEST(Train, StrongKlKeepsPolicyNearReference) {
  TrainConfig cfg = quick_config();
  cfg.beta_kl = 10.0;
  cfg.max_steps = 40;
  ToyPolicy p = fresh_policy();
  train(task().split_, task().data.manifest, cfg, p);
  // Exact KL(ref || current) of the answer distribution, averaged over train prompts.
  double kl = 0.0;
  for (const auto& ex : task().split_.train) {
    const Prompt pr = build_prompt(serialize_row(ex), task().data.manifest);
    const auto cur = p.answer_logprobs(pr);
    std::vector<double> ref;
    for (std::int64_t t = 0; t < 2; ++t) {
      Completion c;
      c.token_ids = {t};
      ref.push_back(p.logprob(c, pr, ParamsTag::kReference)[0]);
    }
    for (std::size_t j = 0; j < 2; ++j) kl += std::exp(ref[j]) * (ref[j] - cur[j]);
  }
  kl /= static_cast<double>(task().split_.train.size());
  EXPECT_LT(kl, 0.01);
}
