#include <benchmark/benchmark.h>

#include "iop/objective.hpp"
#include "iop/repair.hpp"
#include "iop/rng.hpp"

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

iop::PairGroup make_pair(const iop::Params& old_params, uint64_t seed) {
  iop::Problem p = iop::generate_problem(seed, 5);
  iop::Trajectory sol = iop::render_solution(p);
  iop::Trajectory failed = iop::corrupt(p, sol, seed);
  failed.logprobs = iop::per_token_logprobs(old_params, p.prompt, failed.tokens);
  iop::RepairCandidate best;
  best.tokens = sol.tokens;
  best.r_task = 1;
  best.audit = 1;
  iop::Alignment aln = iop::align(failed.tokens, sol.tokens);
  return iop::build_pair_group(old_params, p, failed, best, 4, aln);
}

void BM_JointObjectiveGradient(benchmark::State& state) {
  iop::Params old_params = iop::init_params(1, desk_arch());
  std::vector<iop::PairGroup> pairs;
  for (uint64_t s = 0; s < 8; ++s) pairs.push_back(make_pair(old_params, 100 + s));
  std::vector<iop::RepairGroup> groups;
  iop::RepairScoreConfig sc;
  for (uint64_t s = 0; s < 8; ++s) {
    iop::Problem p = iop::generate_problem(200 + s, 5);
    iop::Trajectory sol = iop::render_solution(p);
    iop::Trajectory failed = iop::corrupt(p, sol, s);
    groups.push_back(iop::generate_candidates(
        old_params, p, failed, sol, 4, 1.0, 24,
        [](const iop::Problem& pr, std::span<const int> y, std::span<const int> c,
           std::span<const int> a) { return iop::rule_audit(pr, y, c, a); },
        sc, 300 + s));
  }
  iop::ClipConfig cc;
  for (auto _ : state) {
    iop::GradientVector g;
    auto rep = iop::joint_objective(old_params, old_params, pairs, groups, cc, &g);
    benchmark::DoNotOptimize(rep.total);
    benchmark::DoNotOptimize(g.data());
  }
}
BENCHMARK(BM_JointObjectiveGradient);

}  // namespace
