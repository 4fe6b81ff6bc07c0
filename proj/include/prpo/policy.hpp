#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "prpo/serialize.hpp"

namespace prpo {

// One sampled output o_{k,i}. The three per-token lists are aligned.
struct Completion {
  std::string text;
  std::vector<std::int64_t> token_ids;
  std::vector<double> logprobs_current;    // under the sampling policy
  std::vector<double> logprobs_reference;  // filled by the trainer
  double temperature = 1.0;

  std::size_t length() const { return token_ids.size(); }
};

enum class ParamsTag { kCurrent, kReference };

inline const char* to_string(ParamsTag t) { return t == ParamsTag::kCurrent ? "current" : "reference"; }

// Per-token loss sensitivities dL/dlog pi(token) for one completion. A policy
// update moves parameters by -lr * sum_t weight_t * grad log pi(token_t).
struct UpdateItem {
  const Prompt* prompt = nullptr;
  const Completion* completion = nullptr;
  std::vector<double> weights;
};

// Sampling and scoring must be safe to call concurrently; snapshot_reference
// and apply_update require exclusive access.
class Policy {
 public:
  virtual ~Policy() = default;

  virtual std::vector<Completion> rollout(const Prompt& prompt, std::size_t n, double temperature,
                                          std::uint64_t seed) const = 0;

  // Per-token log-probabilities of the completion's tokens under the current
  // parameters or the frozen reference snapshot, at the completion's temperature.
  virtual std::vector<double> logprob(const Completion& completion, const Prompt& prompt, ParamsTag tag) const = 0;

  virtual void snapshot_reference(std::int64_t step) = 0;

  virtual void apply_update(std::span<const UpdateItem> items, double learning_rate) = 0;
};

}  // namespace prpo
