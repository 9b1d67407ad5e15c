#include "iop/grafting.hpp"

#include <algorithm>

namespace iop {

namespace {

std::vector<int> run_model_continuation(const Params& params, std::span<const int> prompt,
                                        std::span<const int> prefix, int max_new,
                                        double temperature, bool greedy_mode,
                                        uint64_t seed) {
  if (max_new <= 0) return {};
  State s = initial_state(params.arch);
  advance(params, s, prompt);
  advance(params, s, prefix);
  int consumed = static_cast<int>(prompt.size() + prefix.size());
  SampleOut out = greedy_mode
                      ? greedy_from_state(params, s, consumed, max_new)
                      : sample_from_state(params, s, consumed, temperature, max_new, seed);
  return out.tokens;
}

}  // namespace

ContinuationFn greedy_continuation(const Params& params) {
  return [&params](std::span<const int> prompt, std::span<const int> prefix, int max_new) {
    return run_model_continuation(params, prompt, prefix, max_new, 1.0, true, 0);
  };
}

ContinuationFn sampled_continuation(const Params& params, double temperature,
                                    uint64_t seed) {
  return [&params, temperature, seed](std::span<const int> prompt,
                                      std::span<const int> prefix, int max_new) {
    return run_model_continuation(params, prompt, prefix, max_new, temperature, false, seed);
  };
}

GraftResult graft(const Problem& x, std::span<const int> y, std::span<const int> repair,
                  const Alignment& aln, int k, int max_len, const ContinuationFn& cont) {
  GraftResult res;
  res.k = k;
  if (aln.distance == 0) {
    res.tokens.assign(y.begin(), y.end());
    res.suffix_start = static_cast<int>(y.size());
    res.r_task = verify(x, res.tokens);
    return res;
  }
  std::vector<int> prefix = edited_prefix(y, repair, aln, k);
  res.suffix_start = static_cast<int>(prefix.size());
  int max_new = std::max(0, max_len - static_cast<int>(prefix.size()));
  std::vector<int> suffix = cont(x.prompt, prefix, max_new);
  if (static_cast<int>(suffix.size()) > max_new) suffix.resize(static_cast<size_t>(max_new));
  res.generated = static_cast<int>(suffix.size());
  res.tokens = std::move(prefix);
  res.tokens.insert(res.tokens.end(), suffix.begin(), suffix.end());
  res.r_task = verify(x, res.tokens);
  return res;
}

AdaptiveKResult adaptive_k(const Problem& x, std::span<const int> y,
                           std::span<const int> repair, const Alignment& aln, int k,
                           int max_len, const ContinuationFn& cont, bool fixed_truncation) {
  AdaptiveKResult res;
  if (fixed_truncation) {
    res.k_star = k;
    res.level = AdaptiveKResult::Level::AtK;
    return res;
  }
  GraftResult g1 = graft(x, y, repair, aln, k, max_len, cont);
  res.graft_tokens += g1.generated;
  if (g1.r_task == 1) {
    res.k_star = k;
    res.level = AdaptiveKResult::Level::AtK;
    return res;
  }
  GraftResult g2 = graft(x, y, repair, aln, 2 * k, max_len, cont);
  res.graft_tokens += g2.generated;
  if (g2.r_task == 1) {
    res.k_star = 2 * k;
    res.level = AdaptiveKResult::Level::At2K;
    return res;
  }
  res.k_star = aln.distance;
  res.level = AdaptiveKResult::Level::Full;
  return res;
}

}  // namespace iop
