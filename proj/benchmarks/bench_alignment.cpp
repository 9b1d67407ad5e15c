#include <benchmark/benchmark.h>

#include "iop/alignment.hpp"
#include "iop/rng.hpp"

namespace {

std::vector<int> random_seq(iop::Rng& rng, int len, int vocab) {
  std::vector<int> s(static_cast<size_t>(len));
  for (auto& t : s) t = static_cast<int>(rng.next_below(static_cast<uint64_t>(vocab)));
  return s;
}

void BM_Align(benchmark::State& state) {
  iop::Rng rng(7);
  const int len = static_cast<int>(state.range(0));
  auto y = random_seq(rng, len, 12);
  auto r = random_seq(rng, len, 12);
  for (auto _ : state) {
    benchmark::DoNotOptimize(iop::align(y, r));
  }
}
BENCHMARK(BM_Align)->Arg(16)->Arg(64)->Arg(256);

void BM_TruncateGate(benchmark::State& state) {
  iop::Rng rng(7);
  auto y = random_seq(rng, 64, 12);
  auto r = random_seq(rng, 64, 12);
  iop::Alignment a = iop::align(y, r);
  for (auto _ : state) {
    benchmark::DoNotOptimize(iop::truncate_gate(a, 8));
  }
}
BENCHMARK(BM_TruncateGate);

}  // namespace
