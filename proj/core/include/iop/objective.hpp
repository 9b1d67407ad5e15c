#ifndef IOP_OBJECTIVE_HPP
#define IOP_OBJECTIVE_HPP

#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "iop/model_diff.hpp"
#include "iop/policy_model.hpp"
#include "iop/repair.hpp"
#include "iop/task_env.hpp"

namespace iop {

struct ClipConfig {
  double eps = 0.2;
  double beta_kl = 0.002;
  double lambda_rep = 0.2;
  // Charge the KL term inside both the policy and the repair objective when
  // combining them (the literal two-term reading); off charges it once.
  bool kl_double = false;
  // Treat every gate as open (full-token updates).
  bool no_gating = false;
};

// Scalar objective value with its component breakdown. The invariant
// total = policy_term + lambda_rep * repair_term always holds; each term
// already carries whatever KL share the configuration assigns to it.
struct ObjectiveReport {
  double total = 0.0;
  double policy_term = 0.0;
  double repair_term = 0.0;
  double kl_policy = 0.0;  // raw mean KL over policy-batch positions
  double kl_repair = 0.0;  // raw mean KL over repair-batch positions
  int pairs_used = 0;
  int pairs_excluded = 0;  // a side had no active gate
  int groups_used = 0;
  int groups_skipped = 0;
  double active_fraction = 0.0;  // mean over used pair members of sum(g)/T
  bool empty = false;
};

// A rollout group for the plain-GSPO reference objective (and the
// include-correct ablation): G' trajectories for one prompt with rewards and
// sampling-time log-probs.
struct RolloutGroup {
  Problem problem;
  std::vector<Trajectory> samples;
};

// Within-group advantage normalization: (r - mean) / (population std + 1e-8).
std::vector<double> group_normalize(std::span<const double> rewards);

// Two-element special case. (0,1) -> (-1, +1) up to the 1e-8 stabilizer.
std::pair<double, double> pair_advantage(int r_fail, int r_repair);

// Mean negative log-likelihood per target token of y* given the repair
// context. Examples whose context exceeds the window are skipped (counted in
// skipped_out). grad_out, when non-null, receives d(loss)/d(theta).
double sft_loss(const Params& theta, std::span<const ColdStartExample> batch,
                GradientVector* grad_out = nullptr, int* skipped_out = nullptr);

// Mean NLL per token of the reference solution given the bare prompt. The
// solution-cloning term of stage 1 (stands in for base-model competence).
double solution_nll(const Params& theta, std::span<const ColdStartExample> batch,
                    GradientVector* grad_out = nullptr);

// Gate-masked length-normalized sequence ratio
//   exp( sum_t g_t (lp_t - old_t) / sum_t g_t ).
// nullopt when no gate is active (the excluded-pair signal).
std::optional<double> gated_seq_ratio(const Params& theta, std::span<const int> context,
                                      std::span<const int> tokens,
                                      std::span<const double> old_logprobs,
                                      std::span<const int> gates);

// Value of the gated clipped pair loss (mean over the two members).
double gated_clip_loss(const Params& theta, const PairGroup& pair, const ClipConfig& cfg);

ObjectiveReport policy_objective(const Params& theta, const Params& ref,
                                 std::span<const PairGroup> pairs, const ClipConfig& cfg,
                                 GradientVector* grad_out = nullptr, SgLog* sg = nullptr);

ObjectiveReport repair_objective(const Params& theta, const Params& ref,
                                 std::span<const RepairGroup> groups, const ClipConfig& cfg,
                                 GradientVector* grad_out = nullptr, SgLog* sg = nullptr);

ObjectiveReport joint_objective(const Params& theta, const Params& ref,
                                std::span<const PairGroup> pairs,
                                std::span<const RepairGroup> groups, const ClipConfig& cfg,
                                GradientVector* grad_out = nullptr, SgLog* sg = nullptr);

// Reference objective: group-normalized advantages, length-normalized
// sequence ratios over every token. Groups without reward variance are
// skipped. Also serves as the degeneration target for the gated objective
// with all gates open.
ObjectiveReport gspo_objective(const Params& theta, const Params& ref,
                               std::span<const RolloutGroup> groups, const ClipConfig& cfg,
                               GradientVector* grad_out = nullptr, SgLog* sg = nullptr);

}  // namespace iop

#endif  // IOP_OBJECTIVE_HPP
