#include "iop/repair.hpp"

#include <stdexcept>

#include "iop/objective.hpp"
#include "iop/rng.hpp"

namespace iop {

double score_candidate(int audit, int r_task, double edit_dist,
                       const RepairScoreConfig& cfg) {
  if (cfg.lambda_edit < 0.0) throw std::invalid_argument("lambda_edit must be >= 0");
  double penalty = edit_dist >= cfg.edit_floor ? edit_dist : 0.0;
  return audit * (r_task - cfg.lambda_edit * penalty);
}

int select_best(const RepairGroup& group) {
  if (group.candidates.empty()) throw std::invalid_argument("select_best: empty group");
  int best = 0;
  for (int j = 1; j < static_cast<int>(group.candidates.size()); ++j) {
    const auto& cand = group.candidates[static_cast<size_t>(j)];
    const auto& cur = group.candidates[static_cast<size_t>(best)];
    if (cand.score > cur.score) {
      best = j;
    } else if (cand.score == cur.score) {
      if (cand.r_task > cur.r_task ||
          (cand.r_task == cur.r_task && cand.edit_dist < cur.edit_dist)) {
        best = j;
      }
    }
  }
  const auto& b = group.candidates[static_cast<size_t>(best)];
  if (b.r_task != 1 || b.audit != 1) return -1;
  return best;
}

RepairGroup generate_candidates(const Params& snapshot, const Problem& x,
                                const Trajectory& failed, const Trajectory& anchor,
                                int g_rep, double temperature, int max_len,
                                const AuditFn& audit, const RepairScoreConfig& cfg,
                                uint64_t seed) {
  RepairGroup group;
  group.problem = x;
  group.failed = failed.tokens;
  group.context = build_repair_context(x, failed.tokens, anchor.tokens);

  bool overflow = static_cast<int>(group.context.size()) + 1 > snapshot.arch.context_len;
  State ctx_state;
  if (!overflow) {
    ctx_state = initial_state(snapshot.arch);
    advance(snapshot, ctx_state, group.context);
  }

  group.candidates.reserve(static_cast<size_t>(g_rep));
  for (int j = 0; j < g_rep; ++j) {
    RepairCandidate cand;
    if (overflow) {
      cand.malformed = true;
    } else {
      SampleOut s = sample_from_state(snapshot, ctx_state,
                                      static_cast<int>(group.context.size()), temperature,
                                      max_len, derive_seed(seed, kSeedRepair, static_cast<uint64_t>(j)));
      cand.tokens = std::move(s.tokens);
      cand.old_logprobs = std::move(s.logprobs);
      cand.r_task = verify(x, cand.tokens);
      cand.audit = audit(x, failed.tokens, cand.tokens, anchor.tokens);
      cand.edit_dist = normalized_edit_distance(failed.tokens, cand.tokens);
    }
    cand.score = score_candidate(cand.audit, cand.r_task, cand.edit_dist, cfg);
    group.candidates.push_back(std::move(cand));
  }
  return group;
}

PairGroup build_pair_group(const Params& snapshot, const Problem& x,
                           const Trajectory& failed, const RepairCandidate& best,
                           int k_star, const Alignment& aln) {
  if (best.r_task != 1)
    throw std::invalid_argument("build_pair_group: best repair must be correct");
  if (aln.distance == 0)
    throw std::logic_error(
        "build_pair_group: zero-distance alignment with flipped reward");

  PairGroup pair;
  pair.problem = x;
  pair.y_tokens = failed.tokens;
  pair.y_old_logprobs = failed.logprobs;
  pair.rep_tokens = best.tokens;
  // The pair enters the policy objective, so the repair side needs
  // policy-mode denominators under the rollout snapshot (its sampling
  // log-probs are repair-mode and belong to the repair objective).
  pair.rep_old_logprobs = per_token_logprobs(snapshot, x.prompt, best.tokens);
  TruncatedGate g = truncate_gate(aln, k_star);
  pair.gate_err = std::move(g.err_mask);
  pair.gate_rep = std::move(g.rep_mask);
  std::tie(pair.adv_y, pair.adv_rep) = pair_advantage(0, 1);
  pair.k_star = k_star;
  return pair;
}

}  // namespace iop
