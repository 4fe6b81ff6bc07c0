#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <set>
#include <span>
#include <vector>

#include "prpo/dataset.hpp"
#include "prpo/error.hpp"
#include "prpo/rng.hpp"

namespace prpo {

// A column reordering. order[j] is the source index of the feature placed at
// position j, so applying it maps features f to (f[order[0]], ..., f[order[n-1]]).
struct Permutation {
  std::vector<std::size_t> order;

  static Permutation identity(std::size_t n) {
    Permutation p;
    p.order.resize(n);
    std::iota(p.order.begin(), p.order.end(), std::size_t{0});
    return p;
  }

  std::size_t size() const { return order.size(); }

  bool is_identity() const {
    for (std::size_t j = 0; j < order.size(); ++j) {
      if (order[j] != j) return false;
    }
    return true;
  }

  bool is_valid() const {
    std::vector<char> seen(order.size(), 0);
    for (std::size_t v : order) {
      if (v >= order.size() || seen[v]) return false;
      seen[v] = 1;
    }
    return true;
  }

  Permutation inverse() const {
    Permutation inv;
    inv.order.resize(order.size());
    for (std::size_t j = 0; j < order.size(); ++j) inv.order[order[j]] = j;
    return inv;
  }

  friend bool operator==(const Permutation&, const Permutation&) = default;
  friend auto operator<=>(const Permutation&, const Permutation&) = default;
};

// Composition matching sequential application: applying `inner` and then
// `outer` equals applying compose(outer, inner) once.
inline Permutation compose(const Permutation& outer, const Permutation& inner) {
  require(outer.size() == inner.size(), ErrorCode::kArityMismatch, "composing permutations of different sizes");
  Permutation r;
  r.order.resize(outer.size());
  for (std::size_t j = 0; j < outer.size(); ++j) r.order[j] = inner.order[outer.order[j]];
  return r;
}

struct PermutationSet {
  std::vector<Permutation> perms;
  bool includes_identity = true;
  std::uint64_t seed = 0;

  std::size_t size() const { return perms.size(); }
  const Permutation& operator[](std::size_t k) const { return perms[k]; }
};

namespace detail {

// n! saturated at `cap`.
inline std::uint64_t factorial_capped(std::size_t n, std::uint64_t cap) {
  std::uint64_t f = 1;
  for (std::size_t i = 2; i <= n; ++i) {
    if (f > cap / i) return cap;
    f *= i;
  }
  return std::min(f, cap);
}

inline constexpr std::size_t kEnumerateLimit = 7;  // 7! = 5040

}  // namespace detail

// First member is always the identity. The remaining m-1 are drawn uniformly
// without replacement from the non-identity permutations while any remain;
// once exhausted (n! < m) further members repeat draws from that pool.
inline PermutationSet sample_permutations(std::size_t n, std::size_t m, std::uint64_t seed) {
  require(n >= 1, ErrorCode::kInvalidArgument, "sample_permutations needs n >= 1");
  require(m >= 1, ErrorCode::kInvalidArgument, "sample_permutations needs m >= 1");

  PermutationSet set;
  set.seed = seed;
  set.perms.reserve(m);
  set.perms.push_back(Permutation::identity(n));
  if (m == 1) return set;
  if (n == 1) {
    set.perms.resize(m, Permutation::identity(1));
    return set;
  }

  Rng rng(seed);
  const std::size_t wanted = m - 1;
  const std::uint64_t pool = detail::factorial_capped(n, std::numeric_limits<std::uint64_t>::max()) - 1;

  if (n <= detail::kEnumerateLimit) {
    std::vector<Permutation> all;
    Permutation p = Permutation::identity(n);
    while (std::next_permutation(p.order.begin(), p.order.end())) all.push_back(p);
    // Partial Fisher-Yates gives the distinct prefix; repeats are uniform.
    const std::size_t distinct = std::min<std::size_t>(wanted, all.size());
    for (std::size_t i = 0; i < distinct; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(all.size() - i));
      std::swap(all[i], all[j]);
      set.perms.push_back(all[i]);
    }
    while (set.perms.size() < m) set.perms.push_back(all[rng.below(all.size())]);
    return set;
  }

  // n >= 8: pool >= 40319, rejection of duplicates is cheap for realistic m.
  require(wanted <= pool, ErrorCode::kInvalidArgument, "m exceeds the number of permutations");
  std::set<std::vector<std::size_t>> seen{set.perms.front().order};
  while (set.perms.size() < m) {
    Permutation p = Permutation::identity(n);
    rng.shuffle(std::span<std::size_t>(p.order));
    if (seen.insert(p.order).second) set.perms.push_back(std::move(p));
  }
  return set;
}

// Reorders features; label and row identity are untouched.
inline TabularExample apply_permutation(const TabularExample& example, const Permutation& perm) {
  require(perm.size() == example.size(), ErrorCode::kArityMismatch,
          "permutation of size " + std::to_string(perm.size()) + " applied to " + std::to_string(example.size()) +
              " features");
  TabularExample out;
  out.row_id = example.row_id;
  out.label = example.label;
  out.label_value = example.label_value;
  out.features.reserve(example.size());
  for (std::size_t src : perm.order) out.features.push_back(example.features.at(src));
  return out;
}

}  // namespace prpo
