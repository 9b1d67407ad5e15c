#include <benchmark/benchmark.h>

#include "iop/policy_model.hpp"
#include "iop/task_env.hpp"

namespace {

iop::Arch desk_arch() {
  iop::Arch a;
  a.vocab_size = iop::vocab().size;
  a.context_len = 160;
  a.hidden = 48;
  a.heads = 4;
  a.layers = 1;
  return a;
}

void BM_AdvanceToken(benchmark::State& state) {
  iop::Params p = iop::init_params(1, desk_arch());
  iop::Problem prob = iop::generate_problem(3, 6);
  int64_t tokens = 0;
  for (auto _ : state) {
    iop::State s = iop::initial_state(p.arch);
    iop::advance(p, s, prob.prompt);
    tokens += static_cast<int64_t>(prob.prompt.size());
    benchmark::DoNotOptimize(s.cur.data());
  }
  state.SetItemsProcessed(tokens);
}
BENCHMARK(BM_AdvanceToken);

void BM_Sample(benchmark::State& state) {
  iop::Params p = iop::init_params(1, desk_arch());
  iop::Problem prob = iop::generate_problem(3, 6);
  iop::State ctx = iop::initial_state(p.arch);
  iop::advance(p, ctx, prob.prompt);
  uint64_t seed = 1;
  for (auto _ : state) {
    auto out = iop::sample_from_state(p, ctx, static_cast<int>(prob.prompt.size()), 1.0, 24,
                                      ++seed);
    benchmark::DoNotOptimize(out.tokens.data());
  }
}
BENCHMARK(BM_Sample);

void BM_PerTokenLogprobs(benchmark::State& state) {
  iop::Params p = iop::init_params(1, desk_arch());
  iop::Problem prob = iop::generate_problem(3, 6);
  iop::Trajectory sol = iop::render_solution(prob);
  for (auto _ : state) {
    benchmark::DoNotOptimize(iop::per_token_logprobs(p, prob.prompt, sol.tokens));
  }
}
BENCHMARK(BM_PerTokenLogprobs);

}  // namespace
