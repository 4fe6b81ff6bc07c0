#include <gtest/gtest.h>

#include <sstream>

#include "helpers.hpp"
#include "prpo/ablation.hpp"
#include "prpo/error.hpp"
#include "prpo/eval.hpp"
#include "prpo/synthetic.hpp"
#include "prpo/toy_policy.hpp"

using namespace prpo;

namespace {

ExtractedAnswer cls(const std::string& a) {
  return extract_answer(format_completion("t", a), testing_support::yes_no_manifest());
}
ExtractedAnswer num(const std::string& a) {
  return extract_answer(format_completion("t", a), testing_support::regression_manifest(0, 10));
}
ExtractedAnswer junk() { return extract_answer("no tags", testing_support::yes_no_manifest()); }

EvalReport report(const std::string& ds, const std::string& method, double v, MetricName m = MetricName::kAccuracy) {
  EvalReport r;
  r.dataset_id = ds;
  r.method = method;
  r.metric_name = m;
  r.task = m == MetricName::kAccuracy ? TaskKind::kClassification : TaskKind::kRegression;
  r.value = v;
  r.n_examples = 10;
  return r;
}

}  // namespace

TEST(Accuracy, Counting) {
  EXPECT_DOUBLE_EQ(accuracy({cls("yes"), cls("no"), cls("yes"), cls("yes")}, {"yes", "no", "yes", "no"}), 0.75);
  EXPECT_EQ(accuracy({junk(), junk()}, {"yes", "no"}), 0.0);
  EXPECT_EQ(accuracy({cls("YES"), cls("no")}, {"yes", "no"}), 1.0);
  EXPECT_EQ(accuracy({cls("maybe")}, {"maybe"}), 0.0);  // off-list never counts
  EXPECT_THROW(accuracy({}, {}), Error);
}

TEST(Nmae, PerfectHalfAndImputed) {
  const LabelRange r{0, 10};
  EXPECT_EQ(nmae_metric({num("3"), num("7")}, {3, 7}, r), 0.0);
  EXPECT_DOUBLE_EQ(nmae_metric({num("5")}, {0}, r), 0.5);
  // One malformed row among perfect ones: charged the worst valid nmae (0 here).
  const auto d = nmae_detail({num("3"), extract_answer("x", testing_support::regression_manifest(0, 10))}, {3, 4}, r);
  EXPECT_EQ(d.malformed, 1u);
  ASSERT_TRUE(d.imputed.has_value());
  EXPECT_EQ(*d.imputed, 0.0);
  EXPECT_DOUBLE_EQ(d.value, *d.imputed / 2.0);
  // With a nonzero worst case.
  const auto e = nmae_detail({num("3"), num("6"), num("oops"), num("1")}, {3, 4, 5, 1}, r);
  EXPECT_DOUBLE_EQ(*e.imputed, 0.2);
  EXPECT_DOUBLE_EQ(e.value, (0.0 + 0.2 + 0.2 + 0.0) / 4.0);
  // Nothing valid: imputed as 1.
  const auto f = nmae_detail({num("a"), num("b")}, {1, 2}, r);
  EXPECT_EQ(f.value, 1.0);
}

TEST(Aggregate, WinTieLossCounting) {
  std::map<std::string, std::vector<EvalReport>> by;
  for (int d = 0; d < 4; ++d) {
    const std::string ds = "d" + std::to_string(d);
    by["A"].push_back(report(ds, "A", d < 3 ? 0.9 : 0.5));
    by["B"].push_back(report(ds, "B", d < 3 ? 0.7 : 0.5 + 5e-5));
  }
  const Aggregate agg = aggregate(by);
  ASSERT_EQ(agg.win_tie_loss.size(), 2u);
  const auto& ab = agg.win_tie_loss[0];
  EXPECT_EQ(ab.method, "A");
  EXPECT_EQ(ab.wins, 3u);
  EXPECT_EQ(ab.ties, 1u);
  EXPECT_EQ(ab.losses, 0u);
  EXPECT_EQ(agg.win_tie_loss[1].losses, 3u);
  EXPECT_DOUBLE_EQ(agg.mean_rank.at("A"), (1 + 1 + 1 + 1.5) / 4.0);
}

TEST(Aggregate, IdenticalReportsTie) {
  std::map<std::string, std::vector<EvalReport>> by;
  for (const char* m : {"A", "B", "C"}) {
    for (int d = 0; d < 3; ++d) by[m].push_back(report("d" + std::to_string(d), m, 0.8));
  }
  const Aggregate agg = aggregate(by);
  for (const auto& [m, r] : agg.mean_rank) EXPECT_DOUBLE_EQ(r, 2.0);
  for (const auto& w : agg.win_tie_loss) {
    EXPECT_EQ(w.ties, 3u);
    EXPECT_EQ(w.wins + w.losses, 0u);
  }
}

TEST(Aggregate, StrictOrderGivesIntegerRanks) {
  std::map<std::string, std::vector<EvalReport>> by;
  for (int d = 0; d < 3; ++d) {
    const std::string ds = "d" + std::to_string(d);
    by["best"].push_back(report(ds, "best", 0.9));
    by["mid"].push_back(report(ds, "mid", 0.8));
    by["worst"].push_back(report(ds, "worst", 0.7));
  }
  const Aggregate agg = aggregate(by);
  EXPECT_EQ(agg.mean_rank.at("best"), 1.0);
  EXPECT_EQ(agg.mean_rank.at("mid"), 2.0);
  EXPECT_EQ(agg.mean_rank.at("worst"), 3.0);
}

TEST(Aggregate, LowerNmaeRanksHigher) {
  std::map<std::string, std::vector<EvalReport>> by;
  by["A"].push_back(report("r", "A", 0.1, MetricName::kNmae));
  by["B"].push_back(report("r", "B", 0.3, MetricName::kNmae));
  const Aggregate agg = aggregate(by);
  EXPECT_EQ(agg.mean_rank.at("A"), 1.0);
  EXPECT_EQ(agg.win_tie_loss[0].wins, 1u);
}

TEST(Aggregate, CoverageMismatch) {
  std::map<std::string, std::vector<EvalReport>> by;
  by["A"] = {report("d0", "A", 0.9), report("d1", "A", 0.5)};
  by["B"] = {report("d0", "B", 0.9)};
  try {
    aggregate(by);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kCoverageMismatch);
  }
  by["B"] = {report("d0", "B", 0.9), report("d2", "B", 0.5)};
  EXPECT_THROW(aggregate(by), Error);
  by["B"] = {report("d0", "B", 0.9), report("d1", "B", 0.5, MetricName::kNmae)};
  EXPECT_THROW(aggregate(by), Error);
}

TEST(Summary, CsvHasAllSections) {
  std::map<std::string, std::vector<EvalReport>> by;
  by["A"] = {report("d0", "A", 0.9)};
  by["B"] = {report("d0", "B", 0.8)};
  std::ostringstream out;
  write_summary_csv(out, by, aggregate(by));
  const std::string s = out.str();
  EXPECT_NE(s.find("report,A,,d0,accuracy,0.9"), std::string::npos);
  EXPECT_NE(s.find("mean_rank,A"), std::string::npos);
  EXPECT_NE(s.find("win_tie_loss,A,B,,wins/ties/losses,1/0/0"), std::string::npos);
}

TEST(Report, JsonRoundTrip) {
  EvalReport r = report("d", "m", 0.25, MetricName::kNmae);
  r.imputed_nmae = 0.5;
  r.malformed_count = 2;
  const EvalReport back = report_from_json(to_json(r));
  EXPECT_EQ(to_json(back), to_json(r));
  EXPECT_THROW(report_from_json(nlohmann::json{{"dataset_id", "x"}}), Error);
}

TEST(EvaluatePolicy, UniformToyPolicyIsNearChance) {
  const LoadedDataset data = make_separable();
  const ToyPolicy p = ToyPolicy::build(data.manifest, data.examples);
  EvalOptions eo;
  eo.temperature = 1.0;
  const EvalOutcome o = evaluate_policy(p, data.examples, data.manifest, eo);
  EXPECT_EQ(o.report.metric_name, MetricName::kAccuracy);
  EXPECT_EQ(o.report.n_examples, 200u);
  EXPECT_EQ(o.report.malformed_count, 0u);
  EXPECT_NEAR(o.report.value, 0.5, 0.15);
  EXPECT_EQ(o.report.dataset_id, "separable");
}

TEST(EvaluatePolicy, RegressionReportsNmae) {
  auto m = testing_support::regression_manifest(0, 16);
  std::vector<TabularExample> rows;
  for (int i = 0; i < 8; ++i) {
    rows.push_back(testing_support::make_example(i, {{"x", std::to_string(i)}}, std::to_string(2 * i)));
  }
  const ToyPolicy p = ToyPolicy::build(m, rows);
  const EvalOutcome o = evaluate_policy(p, rows, m);
  EXPECT_EQ(o.report.metric_name, MetricName::kNmae);
  EXPECT_GE(o.report.value, 0.0);
  EXPECT_EQ(o.report.malformed_count, 0u);
}

TEST(EvaluatePolicy, ShuffledColumnsUseSeededOrders) {
  const auto a = eval_permutation(5, 1, 3), b = eval_permutation(5, 1, 3), c = eval_permutation(5, 2, 3);
  EXPECT_EQ(a, b);
  EXPECT_TRUE(a.is_valid());
  EXPECT_NE(a, c);
}

TEST(Ablation, CurveAuc) {
  EXPECT_DOUBLE_EQ(curve_auc({{0, 0.5, 0}, {100, 0.5, 0}}), 0.5);
  EXPECT_DOUBLE_EQ(curve_auc({{0, 0.0, 0}, {50, 1.0, 0}, {100, 1.0, 0}}), 0.75);
  EXPECT_THROW(curve_auc({{0, 1.0, 0}}), Error);
}

TEST(Ablation, PairedRunsShareSeedsAndCheckpointCadence) {
  const LoadedDataset data = make_separable();
  const DatasetSplit sp = split(data.examples, 0.2, 42);
  TrainConfig base;
  base.batch_size = 16;
  base.mini_batch = 4;
  base.max_steps = 20;
  AblationOptions opts;
  opts.seeds = {1, 2};
  opts.cadence = 5;
  const AblationResult r = run_ablation(sp, data.manifest, base, [&] {
    return std::make_unique<ToyPolicy>(ToyPolicy::build(data.manifest, sp.train));
  }, opts);
  ASSERT_EQ(r.seeds.size(), 2u);
  for (const auto& s : r.seeds) {
    EXPECT_EQ(s.prpo.points.size(), 5u);
    EXPECT_EQ(s.grpo.points.size(), 5u);
    EXPECT_EQ(s.prpo.m, 4u);
    EXPECT_EQ(s.prpo.G, 5u);
    EXPECT_EQ(s.grpo.m, 1u);
    EXPECT_EQ(s.grpo.G, 20u);
    // Same initial policy and evaluation protocol give the same first point.
    EXPECT_EQ(s.prpo.points[0].shuffled_reward, s.grpo.points[0].shuffled_reward);
    EXPECT_DOUBLE_EQ(s.delta(), s.auc_prpo - s.auc_grpo);
  }
}
