#ifndef IOP_REPAIR_HPP
#define IOP_REPAIR_HPP

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "iop/alignment.hpp"
#include "iop/policy_model.hpp"
#include "iop/task_env.hpp"

namespace iop {

// Honesty gate contract. Arguments: problem, failed trajectory, candidate
// repair, reference anchor.
using AuditFn = std::function<int(const Problem&, std::span<const int>,
                                  std::span<const int>, std::span<const int>)>;

struct RepairScoreConfig {
  double lambda_edit = 0.3;
  double edit_floor = 0.05;
};

// One sampled repair with its annotations. old_logprobs are repair-mode
// log-probs recorded at sampling time (the ratio denominators).
struct RepairCandidate {
  std::vector<int> tokens;
  std::vector<double> old_logprobs;
  int audit = 0;
  int r_task = 0;
  double edit_dist = 0.0;   // normalized, vs the failed trajectory
  double score = 0.0;
  bool malformed = false;
};

// All candidates for one failed trajectory, plus the conditioning they were
// sampled under. This is the unit written to the repair mini-batch.
struct RepairGroup {
  Problem problem;
  std::vector<int> context;  // repair-mode conditioning tokens
  std::vector<int> failed;   // the y being repaired
  std::vector<RepairCandidate> candidates;
};

// A (failed, repaired) two-element group with bilateral truncated gates and
// within-pair advantages. The unit of the policy mini-batch.
struct PairGroup {
  Problem problem;
  std::vector<int> y_tokens;
  std::vector<double> y_old_logprobs;  // policy-mode, captured under the rollout snapshot
  std::vector<int> rep_tokens;
  std::vector<double> rep_old_logprobs;  // policy-mode, scored under the same snapshot
  std::vector<int> gate_err;
  std::vector<int> gate_rep;
  double adv_y = 0.0;
  double adv_rep = 0.0;
  int k_star = 0;
};

// s = h * (r - lambda_edit * penalty), penalty waived below the floor.
double score_candidate(int audit, int r_task, double edit_dist,
                       const RepairScoreConfig& cfg);

// argmax score; ties prefer r_task = 1, then smaller edit distance, then
// lower index. Returns -1 to signal deferral when the best candidate is not
// correct. A correct-but-audit-failed best also defers: only honest correct
// repairs are usable downstream.
int select_best(const RepairGroup& group);

// Sample G_rep candidates from the repair mode and annotate them. Context
// overflow yields a malformed candidate (audit 0, r_task 0) rather than an
// error.
RepairGroup generate_candidates(const Params& snapshot, const Problem& x,
                                const Trajectory& failed, const Trajectory& anchor,
                                int g_rep, double temperature, int max_len,
                                const AuditFn& audit, const RepairScoreConfig& cfg,
                                uint64_t seed);

// Assemble the pair group: bilateral gates truncated at k_star, within-pair
// advantages, and policy-mode old log-probs for the repair side (scored under
// the same frozen snapshot the failed side was sampled from). Throws when the
// alignment distance is zero: an identical repair cannot flip the reward.
PairGroup build_pair_group(const Params& snapshot, const Problem& x,
                           const Trajectory& failed, const RepairCandidate& best,
                           int k_star, const Alignment& aln);

}  // namespace iop

#endif  // IOP_REPAIR_HPP
