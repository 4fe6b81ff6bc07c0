#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "prpo/error.hpp"

namespace prpo {

// Dense row-major matrix; rows index permutations k, columns rollouts i.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(std::size_t rows, std::size_t cols, T fill = T{}) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Grid from_rows(const std::vector<std::vector<T>>& rows) {
    Grid g(rows.size(), rows.empty() ? 0 : rows.front().size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      require(rows[r].size() == g.cols_, ErrorCode::kShapeMismatch, "ragged reward rows");
      for (std::size_t c = 0; c < g.cols_; ++c) g(r, c) = rows[r][c];
    }
    return g;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool same_shape(const Grid& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::span<T> flat() { return data_; }
  std::span<const T> flat() const { return data_; }

  friend bool operator==(const Grid&, const Grid&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using GroupRewards = Grid<double>;

inline constexpr double kDefaultSigmaFloor = 1e-8;

// z-score with population moments; a group whose std falls below
// sigma_floor carries no signal and gets all-zero advantages.
inline void zscore(std::span<const double> values, std::span<double> out, double sigma_floor) {
  const auto n = static_cast<double>(values.size());
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  const double sigma = std::sqrt(var / n);
  for (std::size_t i = 0; i < values.size(); ++i) {
    out[i] = sigma < sigma_floor ? 0.0 : (values[i] - mean) / sigma;
  }
}

inline std::vector<double> grpo_advantages(std::span<const double> rewards, double sigma_floor = kDefaultSigmaFloor) {
  require(rewards.size() >= 2, ErrorCode::kGroupTooSmall, "GRPO group needs G >= 2");
  std::vector<double> out(rewards.size());
  zscore(rewards, out, sigma_floor);
  return out;
}

inline Grid<double> intra_advantages(const GroupRewards& rewards, double sigma_floor = kDefaultSigmaFloor) {
  require(rewards.cols() >= 2, ErrorCode::kGroupTooSmall, "intra-permutation groups need G >= 2");
  Grid<double> out(rewards.rows(), rewards.cols());
  for (std::size_t k = 0; k < rewards.rows(); ++k) zscore(rewards.row(k), out.row(k), sigma_floor);
  return out;
}

// All m*G rewards of one example pooled into a single group.
inline Grid<double> inter_advantages(const GroupRewards& rewards, double sigma_floor = kDefaultSigmaFloor) {
  require(rewards.size() >= 2, ErrorCode::kGroupTooSmall, "inter-permutation pool needs m*G >= 2");
  Grid<double> out(rewards.rows(), rewards.cols());
  zscore(rewards.flat(), out.flat(), sigma_floor);
  return out;
}

// alpha*intra + gamma*inter, evaluated as alpha*(intra - inter) + (alpha + gamma)*inter.
// The rearrangement is exact when intra == inter and alpha + gamma == 1,
// so the single-permutation case reproduces GRPO bit for bit.
inline Grid<double> combine(const Grid<double>& intra, const Grid<double>& inter, double alpha, double gamma) {
  require(intra.same_shape(inter), ErrorCode::kShapeMismatch, "intra/inter advantage shapes differ");
  require(alpha >= 0.0 && gamma >= 0.0, ErrorCode::kInvalidArgument, "alpha and gamma must be non-negative");
  Grid<double> out(intra.rows(), intra.cols());
  const double total = alpha + gamma;
  for (std::size_t r = 0; r < intra.rows(); ++r) {
    for (std::size_t c = 0; c < intra.cols(); ++c) {
      out(r, c) = alpha * (intra(r, c) - inter(r, c)) + total * inter(r, c);
    }
  }
  return out;
}

struct AdvantageBundle {
  Grid<double> intra;
  Grid<double> inter;
  Grid<double> combined;
  double alpha = 0.1;
  double gamma = 0.9;
  double sigma_floor = kDefaultSigmaFloor;
};

inline AdvantageBundle prpo_advantages(const GroupRewards& rewards, double alpha, double gamma,
                                       double sigma_floor = kDefaultSigmaFloor) {
  AdvantageBundle b;
  b.intra = intra_advantages(rewards, sigma_floor);
  b.inter = inter_advantages(rewards, sigma_floor);
  b.combined = combine(b.intra, b.inter, alpha, gamma);
  b.alpha = alpha;
  b.gamma = gamma;
  b.sigma_floor = sigma_floor;
  return b;
}

inline std::size_t count_nonzero(const Grid<double>& g) {
  std::size_t n = 0;
  for (double v : g.flat()) n += v != 0.0;
  return n;
}

}  // namespace prpo
