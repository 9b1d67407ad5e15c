#ifndef IOP_TASK_ENV_HPP
#define IOP_TASK_ENV_HPP

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "iop/vocab.hpp"

namespace iop {

// One link of the arithmetic chain: (+ d) or (* d), evaluated mod 10.
struct ChainOp {
  bool is_mul = false;
  int operand = 0;
};

// A chain-arithmetic problem. The prompt renders as
//   BOS d(v0) op1 d1 op2 d2 ... opL dL SEP
// and values[k] = (values[k-1] op_k d_k) mod 10.
struct Problem {
  std::vector<int> prompt;
  std::vector<int> values;   // v_0 .. v_L
  std::vector<ChainOp> ops;  // op_1 .. op_L
  int chain_len = 0;

  int answer() const { return values.back(); }
};

// A generated solution attempt: tokens plus the log-probabilities they were
// sampled with and the verifier reward. Synthetic trajectories (rendered or
// corrupted fixtures) carry zero log-probs.
struct Trajectory {
  std::vector<int> tokens;
  std::vector<double> logprobs;
  int reward = 0;
};

struct ColdStartExample {
  Problem problem;
  std::vector<int> failed;     // y,  verify = 0
  std::vector<int> reference;  // a,  verify = 1
  std::vector<int> target;     // y*, verify = 1
};

Problem generate_problem(uint64_t seed, int chain_len);

// Parse a prompt back into (start digit, op list); used to check the
// prompt-roundtrip invariant and by the auditor.
bool parse_prompt(std::span<const int> prompt, int* start, std::vector<ChainOp>* ops);

// Reference solution: STEP v_1 ... STEP v_L ANS v_L EOS.
Trajectory render_solution(const Problem& p);

// Outcome verifier: 1 iff the sequence contains a well-formed ANS digit equal
// to the chain answer before any EOS. Malformed input scores 0, never throws.
int verify(const Problem& p, std::span<const int> tokens);

// Corrupt a verifying trajectory: alter one intermediate step value and
// propagate the change through later steps and the answer. Falls back to
// corrupting the answer digit when no intermediate site can flip the answer
// (chain_len 1, or absorbing ops downstream of every site).
Trajectory corrupt(const Problem& p, const Trajectory& t, uint64_t seed);

// Honesty gate: 1 iff the candidate is exactly (STEP digit)^L ANS digit EOS
// with every step value matching the true chain. The answer digit itself is
// not checked — correctness is the verifier's job; this gate exists to
// reject candidates that fix the answer without fixing the work.
int rule_audit(const Problem& p, std::span<const int> failed,
               std::span<const int> candidate, std::span<const int> reference);

// h == 1 gate for the audit-off ablation.
int always_pass_audit(const Problem& p, std::span<const int> failed,
                      std::span<const int> candidate, std::span<const int> reference);

// Repair-mode conditioning: BOS REPAIR_INSTR x[1:] y SEP a SEP.
// x keeps its trailing SEP, so the failed trajectory follows it directly.
std::vector<int> build_repair_context(const Problem& p, std::span<const int> failed,
                                      std::span<const int> reference);

std::vector<ColdStartExample> gen_coldstart(uint64_t seed, int n,
                                            int chain_min = 4, int chain_max = 8);

// JSONL round-trip, one example per line with integer token arrays under
// keys x, y, a, y_star.
void write_coldstart_jsonl(const std::string& path,
                           const std::vector<ColdStartExample>& data);
std::vector<ColdStartExample> read_coldstart_jsonl(const std::string& path);

}  // namespace iop

#endif  // IOP_TASK_ENV_HPP
