#ifndef IOP_GRAFTING_HPP
#define IOP_GRAFTING_HPP

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "iop/alignment.hpp"
#include "iop/policy_model.hpp"
#include "iop/task_env.hpp"

namespace iop {

// Produces the continuation of a grafted prefix: given the prompt, the
// prefix tokens, and a cap on new tokens, returns the generated suffix.
// Backed by the policy during training; tests may script it.
using ContinuationFn = std::function<std::vector<int>(
    std::span<const int> prompt, std::span<const int> prefix, int max_new)>;

ContinuationFn greedy_continuation(const Params& params);
ContinuationFn sampled_continuation(const Params& params, double temperature,
                                    uint64_t seed);

struct GraftResult {
  std::vector<int> tokens;  // edited prefix plus regenerated suffix
  int r_task = 0;
  int k = 0;
  int suffix_start = 0;  // index where the regenerated suffix begins
  int generated = 0;     // suffix tokens charged to the compute budget
};

// Apply the first min(k, distance) edits of the path to y and let the policy
// regenerate everything past the edit frontier, then verify. distance == 0
// degenerates to y unchanged.
GraftResult graft(const Problem& x, std::span<const int> y, std::span<const int> repair,
                  const Alignment& aln, int k, int max_len, const ContinuationFn& cont);

struct AdaptiveKResult {
  enum class Level { AtK, At2K, Full };
  int k_star = 0;
  Level level = Level::AtK;
  long graft_tokens = 0;
};

// Verified window selection: K if the graft at K passes the verifier, else
// 2K if that passes, else the full edit count. fixed_truncation pins the
// window at K without any verification.
AdaptiveKResult adaptive_k(const Problem& x, std::span<const int> y,
                           std::span<const int> repair, const Alignment& aln, int k,
                           int max_len, const ContinuationFn& cont,
                           bool fixed_truncation = false);

}  // namespace iop

#endif  // IOP_GRAFTING_HPP
