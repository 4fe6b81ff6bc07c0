#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "prpo/advantage.hpp"
#include "prpo/error.hpp"
#include "prpo/rng.hpp"

using namespace prpo;

namespace {

std::vector<double> to_vec(std::span<const double> s) { return {s.begin(), s.end()}; }

void expect_near(const std::vector<double>& got, const std::vector<double>& want, double tol) {
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], tol) << "index " << i;
}

// Rewards drawn from the three values a verifiable reward can take.
GroupRewards random_block(Rng& rng, std::size_t m, std::size_t g) {
  static const double levels[] = {0.0, 0.1, 1.0};
  GroupRewards r(m, g);
  for (double& v : r.flat()) v = levels[rng.below(3)];
  return r;
}

}  // namespace

TEST(IntraAdvantages, WorkedRow) {
  const std::vector<double> row{1.0, 0.1, 0.1, 1.0, 0.1};
  const auto got = to_vec(intra_advantages(GroupRewards::from_rows({row})).row(0));
  expect_near(got, {1.2247, -0.8165, -0.8165, 1.2247, -0.8165}, 1e-4);
  expect_near(got, oracle::zscores(row), 1e-12);
}

TEST(IntraAdvantages, ConstantRowIsZero) {
  const auto got = intra_advantages(GroupRewards::from_rows({{0.1, 0.1, 0.1, 0.1, 0.1}}));
  for (double v : got.flat()) EXPECT_EQ(v, 0.0);
}

TEST(IntraAdvantages, TwoPoint) {
  expect_near(to_vec(intra_advantages(GroupRewards::from_rows({{1.0, 0.0}})).row(0)), {1.0, -1.0}, 1e-12);
}

TEST(IntraAdvantages, RowsAreIndependent) {
  const GroupRewards r = GroupRewards::from_rows({{1.0, 0.0, 0.0}, {0.1, 0.1, 0.1}, {0.0, 1.0, 0.1}});
  const auto a = intra_advantages(r);
  for (std::size_t k = 0; k < 3; ++k) expect_near(to_vec(a.row(k)), oracle::zscores(to_vec(r.row(k))), 1e-12);
}

TEST(IntraAdvantages, GroupTooSmall) {
  try {
    intra_advantages(GroupRewards::from_rows({{1.0}, {0.0}}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kGroupTooSmall);
  }
}

TEST(InterAdvantages, PooledWorkedExample) {
  const GroupRewards r = GroupRewards::from_rows({{1.0, 0.1}, {0.1, 0.1}});
  const auto a = inter_advantages(r);
  expect_near(to_vec(a.flat()), {1.7321, -0.5774, -0.5774, -0.5774}, 1e-4);
  expect_near(to_vec(a.flat()), oracle::zscores({1.0, 0.1, 0.1, 0.1}), 1e-12);
}

TEST(InterAdvantages, AllEqualIsZero) {
  const auto a = inter_advantages(GroupRewards(3, 4, 1.0));
  for (double v : a.flat()) EXPECT_EQ(v, 0.0);
}

TEST(InterAdvantages, SingleRowEqualsIntra) {
  const GroupRewards r = GroupRewards::from_rows({{1.0, 0.1, 0.0, 1.0}});
  EXPECT_EQ(inter_advantages(r), intra_advantages(r));
}

TEST(InterAdvantages, PooledIsNonzeroWhenRowsAreConstant) {
  // Each permutation agrees internally but they disagree with each other:
  // intra carries no signal, inter does.
  const GroupRewards r = GroupRewards::from_rows({{1.0, 1.0}, {0.1, 0.1}});
  EXPECT_EQ(count_nonzero(intra_advantages(r)), 0u);
  EXPECT_EQ(count_nonzero(inter_advantages(r)), 4u);
  EXPECT_THROW(inter_advantages(GroupRewards::from_rows({{1.0}})), Error);
}

TEST(Combine, Arithmetic) {
  const Grid<double> intra = Grid<double>::from_rows({{1.0}});
  const Grid<double> inter = Grid<double>::from_rows({{-1.0}});
  EXPECT_NEAR(combine(intra, inter, 0.1, 0.9)(0, 0), -0.8, 1e-15);
}

TEST(Combine, ProjectionAndConvexity) {
  Rng rng(3);
  for (int t = 0; t < 100; ++t) {
    const GroupRewards r = random_block(rng, 1 + rng.below(4), 2 + rng.below(5));
    const auto b = prpo_advantages(r, 1.0, 0.0);
    for (std::size_t i = 0; i < b.intra.size(); ++i) EXPECT_NEAR(b.combined.flat()[i], b.intra.flat()[i], 1e-15);
    const auto intra = intra_advantages(r);
    EXPECT_EQ(combine(intra, intra, 0.5, 0.5), intra);
  }
}

TEST(Combine, ShapeMismatchAndNegativeWeights) {
  EXPECT_THROW(combine(Grid<double>(1, 2), Grid<double>(2, 1), 0.1, 0.9), Error);
  EXPECT_THROW(combine(Grid<double>(1, 2), Grid<double>(1, 2), -0.1, 0.9), Error);
}

TEST(GrpoAdvantages, MatchesIntraRow) {
  const std::vector<double> row{1.0, 0.1, 0.1, 1.0, 0.1};
  EXPECT_EQ(grpo_advantages(row), to_vec(intra_advantages(GroupRewards::from_rows({row})).row(0)));
  for (double v : grpo_advantages(std::vector<double>(6, 0.1))) EXPECT_EQ(v, 0.0);
}

TEST(GrpoAdvantages, ReductionIsBitwise) {
  Rng rng(11);
  for (int t = 0; t < 1000; ++t) {
    const GroupRewards r = random_block(rng, 1, 2 + rng.below(15));
    const double alpha = rng.uniform();
    const double gamma = 1.0 - alpha;
    const auto b = prpo_advantages(r, alpha, gamma);
    const auto g = grpo_advantages(r.row(0));
    ASSERT_EQ(to_vec(b.combined.row(0)), g) << "alpha=" << alpha;
  }
}

TEST(Normalization, RandomBlocksHaveUnitMoments) {
  Rng rng(99);
  for (int t = 0; t < 300; ++t) {
    const std::size_t m = 1 + rng.below(8), g = 2 + rng.below(15);
    const GroupRewards r = random_block(rng, m, g);
    const auto b = prpo_advantages(r, 0.1, 0.9);
    for (std::size_t k = 0; k < m; ++k) {
      const auto row = to_vec(b.intra.row(k));
      if (oracle::pop_std(to_vec(r.row(k))) < kDefaultSigmaFloor) {
        for (double v : row) EXPECT_EQ(v, 0.0);
        continue;
      }
      EXPECT_LT(std::fabs(oracle::mean(row)), 1e-9);
      EXPECT_LT(std::fabs(oracle::pop_std(row) - 1.0), 1e-9);
    }
    const auto pooled = to_vec(b.inter.flat());
    if (oracle::pop_std(to_vec(r.flat())) >= kDefaultSigmaFloor) {
      EXPECT_LT(std::fabs(oracle::mean(pooled)), 1e-9);
      EXPECT_LT(std::fabs(oracle::pop_std(pooled) - 1.0), 1e-9);
    }
  }
}

TEST(Normalization, SigmaFloorControlsDegeneracy) {
  const GroupRewards r = GroupRewards::from_rows({{1.0, 1.0 + 1e-12}});
  EXPECT_EQ(count_nonzero(intra_advantages(r)), 0u);
  EXPECT_EQ(count_nonzero(intra_advantages(r, 0.0)), 2u);
}
