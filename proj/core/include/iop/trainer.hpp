#ifndef IOP_TRAINER_HPP
#define IOP_TRAINER_HPP

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "iop/checkpoint.hpp"
#include "iop/config.hpp"
#include "iop/grafting.hpp"
#include "iop/metrics.hpp"
#include "iop/objective.hpp"
#include "iop/repair.hpp"
#include "iop/task_env.hpp"

namespace iop {

// A prompt is identified by the seed it was generated from, which keeps the
// deferral queue serializable and runs replayable.
struct PromptSpec {
  uint64_t seed = 0;
  int chain_len = 0;
};

struct RolloutSet {
  PromptSpec spec;
  Problem problem;
  std::vector<Trajectory> samples;
};

struct GroupPartition {
  enum class Status { Ok, Skip, Defer };
  Status status = Status::Skip;
  std::vector<int> correct;
  std::vector<int> errors;
  int anchor = -1;
};

struct DeferEntry {
  PromptSpec spec;
  int retries = 0;
  int due_step = 0;
  std::string reason;  // no-correct-sample | no-correct-repair
};

struct DualBatches {
  std::vector<PairGroup> pairs;
  std::vector<RepairGroup> groups;
  int64_t repair_tokens = 0;
  int64_t graft_tokens = 0;
  int kstar_k = 0, kstar_2k = 0, kstar_full = 0;
  int hacked_admitted = 0;
  int repair_attempts = 0;
  int repair_successes = 0;
  std::vector<int> deferred_prompts;  // indices with failed samples but no usable repair
};

struct RunResult {
  std::vector<MetricsRecord> metrics;
  double final_acc = 0.0;  // avg@final_eval_samples on the held-out problems
  int64_t tokens_used = 0;
  int steps = 0;
  Params params;
};

Arch arch_from_config(const TrainConfig& cfg);

// Reads coldstart_path when set, otherwise generates coldstart_n examples
// from the run seed.
std::vector<ColdStartExample> gather_coldstart(const TrainConfig& cfg);

// Stage 1: repair-mode SFT plus a weighted solution-cloning term that stands
// in for base-model competence at this scale. Throws NumericalError on NaN
// loss.
Params stage1_sft(const TrainConfig& cfg, std::span<const ColdStartExample> data,
                  std::vector<double>* loss_curve = nullptr);

std::vector<RolloutSet> collect_rollouts(const Params& snapshot,
                                         std::span<const PromptSpec> prompts,
                                         const TrainConfig& cfg, int step,
                                         int64_t* policy_tokens);

// Reward-threshold split plus uniform anchor choice. Skip when nothing
// failed, defer when nothing succeeded.
GroupPartition partition_and_anchor(const RolloutSet& rollout, double tau_r,
                                    uint64_t seed);

DualBatches build_dual_batches(const Params& snapshot, std::span<const RolloutSet> rollouts,
                               std::span<const GroupPartition> partitions,
                               const TrainConfig& cfg, int step);

// Mean verifier reward over n_problems x samples_per seeded samples from the
// fixed held-out problem stream.
double evaluate(const Params& params, int n_problems, int samples_per,
                const TrainConfig& cfg, uint64_t seed);

// Per-problem mean rewards over the same stream (for bootstrap intervals).
std::vector<double> evaluate_per_problem(const Params& params, int n_problems,
                                         int samples_per, const TrainConfig& cfg,
                                         uint64_t seed);

struct RunIo {
  std::string out_dir;  // empty: keep everything in memory
  bool verbose = false;
};

// Full pipeline: stage 1 (unless resuming or seeded from init_ckpt), then the
// stage-2 loop until the token budget is spent. resume_ckpt continues an
// interrupted run bit-exactly; init_ckpt skips SFT and uses the checkpoint as
// both the starting point and the KL reference.
RunResult run_training(const TrainConfig& cfg, const RunIo& io = {},
                       const std::string& resume_ckpt = "",
                       const std::string& init_ckpt = "");

}  // namespace iop

#endif  // IOP_TRAINER_HPP
