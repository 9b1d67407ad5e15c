#include "iop/objective.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

namespace iop {

std::vector<double> group_normalize(std::span<const double> rewards) {
  const size_t n = rewards.size();
  std::vector<double> adv(n, 0.0);
  if (n == 0) return adv;
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= static_cast<double>(n);
  double denom = std::sqrt(var) + 1e-8;
  for (size_t i = 0; i < n; ++i) adv[i] = (rewards[i] - mean) / denom;
  return adv;
}

std::pair<double, double> pair_advantage(int r_fail, int r_repair) {
  double rw[2] = {static_cast<double>(r_fail), static_cast<double>(r_repair)};
  auto adv = group_normalize(rw);
  return {adv[0], adv[1]};
}

namespace {

int active_count(std::span<const int> gates) {
  int n = 0;
  for (int g : gates) n += g;
  return n;
}

// Gated clipped loss for one trajectory on the tape:
//   w      = exp( sum_active (lp - old) / n_active )
//   s_t    = sg[w] * exp(lp_t - sg[lp_t])          (value w, gradient local)
//   L      = (1/n_active) sum_active min(s_t A, clip(s_t) A)
// Caller guarantees at least one active gate.
Tape::Id member_clip_term(ObjectiveCtx& ctx, int branch, std::span<const double> old_lp,
                          std::span<const int> gates, double advantage, double eps) {
  Tape& tp = ctx.tape();
  const int T = static_cast<int>(old_lp.size());
  Tape::Id sum_lr = -1;
  int n_active = 0;
  for (int t = 0; t < T; ++t) {
    if (!gates[static_cast<size_t>(t)]) continue;
    Tape::Id lr = tp.add_const(ctx.logprob(branch, t), -old_lp[static_cast<size_t>(t)]);
    sum_lr = (sum_lr < 0) ? lr : tp.add(sum_lr, lr);
    ++n_active;
  }
  Tape::Id w = tp.exp_(tp.scale(sum_lr, 1.0 / n_active));
  Tape::Id sgw = tp.stop_grad(w);
  Tape::Id sum_terms = -1;
  for (int t = 0; t < T; ++t) {
    if (!gates[static_cast<size_t>(t)]) continue;
    Tape::Id lp = ctx.logprob(branch, t);
    Tape::Id s = tp.mul(sgw, tp.exp_(tp.sub(lp, tp.stop_grad(lp))));
    Tape::Id lhs = tp.scale(s, advantage);
    Tape::Id rhs = tp.scale(tp.clip(s, 1.0 - eps, 1.0 + eps), advantage);
    Tape::Id term = tp.min_(lhs, rhs);
    sum_terms = (sum_terms < 0) ? term : tp.add(sum_terms, term);
  }
  return tp.scale(sum_terms, 1.0 / n_active);
}

// Sequence-level clipped term for one repair candidate:
//   u = exp( (1/T) sum_t (lp - old) ),  min(u A, clip(u) A).
Tape::Id sequence_clip_term(ObjectiveCtx& ctx, int branch, std::span<const double> old_lp,
                            double advantage, double eps) {
  Tape& tp = ctx.tape();
  const int T = static_cast<int>(old_lp.size());
  Tape::Id sum_lr = -1;
  for (int t = 0; t < T; ++t) {
    Tape::Id lr = tp.add_const(ctx.logprob(branch, t), -old_lp[static_cast<size_t>(t)]);
    sum_lr = (sum_lr < 0) ? lr : tp.add(sum_lr, lr);
  }
  Tape::Id u = tp.exp_(tp.scale(sum_lr, 1.0 / T));
  Tape::Id lhs = tp.scale(u, advantage);
  Tape::Id rhs = tp.scale(tp.clip(u, 1.0 - eps, 1.0 + eps), advantage);
  return tp.min_(lhs, rhs);
}

// Mean of KL leaves over a list of (branch, length) pairs.
struct KlAccum {
  Tape::Id sum = -1;
  long count = 0;

  void add_branch(ObjectiveCtx& ctx, int branch, int len) {
    Tape& tp = ctx.tape();
    for (int t = 0; t < len; ++t) {
      Tape::Id k = ctx.kl(branch, t);
      sum = (sum < 0) ? k : tp.add(sum, k);
      ++count;
    }
  }
  Tape::Id mean(Tape& tp) const {
    if (count == 0) return tp.constant(0.0);
    return tp.scale(sum, 1.0 / static_cast<double>(count));
  }
};

enum class Mode { PolicyOnly, RepairOnly, Joint };

struct Builder : ScalarObjective {
  std::span<const PairGroup> pairs;
  std::span<const RepairGroup> groups;
  ClipConfig cfg;
  Mode mode = Mode::Joint;
  mutable ObjectiveReport report;

  Tape::Id build(ObjectiveCtx& ctx) const override {
    report = ObjectiveReport{};
    Tape& tp = ctx.tape();
    const bool want_kl = cfg.beta_kl != 0.0;

    // ---- policy side --------------------------------------------------
    Tape::Id pol_sum = -1;
    KlAccum kl_pol;
    double active_sum = 0.0;
    std::map<std::vector<int>, int> ctx_cache;
    if (mode != Mode::RepairOnly) {
      for (const PairGroup& pair : pairs) {
        std::vector<int> gy = pair.gate_err, gr = pair.gate_rep;
        if (cfg.no_gating) {
          gy.assign(pair.y_tokens.size(), 1);
          gr.assign(pair.rep_tokens.size(), 1);
        }
        if (active_count(gy) == 0 || active_count(gr) == 0) {
          ++report.pairs_excluded;
          continue;
        }
        auto it = ctx_cache.find(pair.problem.prompt);
        int c;
        if (it == ctx_cache.end()) {
          c = ctx.add_context(pair.problem.prompt);
          ctx_cache.emplace(pair.problem.prompt, c);
        } else {
          c = it->second;
        }
        int by = ctx.add_branch(c, pair.y_tokens);
        int br = ctx.add_branch(c, pair.rep_tokens);
        Tape::Id ly = member_clip_term(ctx, by, pair.y_old_logprobs, gy, pair.adv_y, cfg.eps);
        Tape::Id lr = member_clip_term(ctx, br, pair.rep_old_logprobs, gr, pair.adv_rep, cfg.eps);
        Tape::Id pair_term = tp.scale(tp.add(ly, lr), 0.5);
        pol_sum = (pol_sum < 0) ? pair_term : tp.add(pol_sum, pair_term);
        ++report.pairs_used;
        if (want_kl) {
          kl_pol.add_branch(ctx, by, static_cast<int>(pair.y_tokens.size()));
          kl_pol.add_branch(ctx, br, static_cast<int>(pair.rep_tokens.size()));
        }
        active_sum += 0.5 * (static_cast<double>(active_count(gy)) / pair.y_tokens.size() +
                             static_cast<double>(active_count(gr)) / pair.rep_tokens.size());
      }
    }

    // ---- repair side ---------------------------------------------------
    Tape::Id rep_sum = -1;
    KlAccum kl_rep;
    if (mode != Mode::PolicyOnly) {
      for (const RepairGroup& g : groups) {
        if (g.candidates.empty()) {
          ++report.groups_skipped;
          continue;
        }
        std::vector<double> scores;
        scores.reserve(g.candidates.size());
        for (const auto& c : g.candidates) scores.push_back(c.score);
        std::vector<double> adv = group_normalize(scores);

        int c = ctx.add_context(g.context);
        Tape::Id gsum = -1;
        for (size_t j = 0; j < g.candidates.size(); ++j) {
          const RepairCandidate& cand = g.candidates[j];
          if (cand.tokens.empty()) continue;
          int b = ctx.add_branch(c, cand.tokens);
          if (want_kl) kl_rep.add_branch(ctx, b, static_cast<int>(cand.tokens.size()));
          if (adv[j] == 0.0) continue;  // no contribution, skip the ratio term
          Tape::Id term = sequence_clip_term(ctx, b, cand.old_logprobs, adv[j], cfg.eps);
          gsum = (gsum < 0) ? term : tp.add(gsum, term);
        }
        Tape::Id group_term = (gsum < 0)
                                  ? tp.constant(0.0)
                                  : tp.scale(gsum, 1.0 / static_cast<double>(g.candidates.size()));
        rep_sum = (rep_sum < 0) ? group_term : tp.add(rep_sum, group_term);
        ++report.groups_used;
      }
    }

    // ---- assembly -------------------------------------------------------
    const bool have_pol = report.pairs_used > 0;
    const bool have_rep = report.groups_used > 0;
    report.empty = !have_pol && !have_rep;
    report.active_fraction = have_pol ? active_sum / report.pairs_used : 0.0;

    Tape::Id pol_clip =
        have_pol ? tp.scale(pol_sum, 1.0 / report.pairs_used) : tp.constant(0.0);
    Tape::Id rep_clip =
        have_rep ? tp.scale(rep_sum, 1.0 / report.groups_used) : tp.constant(0.0);
    Tape::Id kl_pol_mean = kl_pol.mean(tp);
    Tape::Id kl_rep_mean = kl_rep.mean(tp);
    report.kl_policy = tp.val(kl_pol_mean);
    report.kl_repair = tp.val(kl_rep_mean);

    Tape::Id pol_term = pol_clip;
    Tape::Id rep_term = rep_clip;
    switch (mode) {
      case Mode::PolicyOnly:
        pol_term = tp.sub(pol_clip, tp.scale(kl_pol_mean, cfg.beta_kl));
        break;
      case Mode::RepairOnly:
        rep_term = tp.sub(rep_clip, tp.scale(kl_rep_mean, cfg.beta_kl));
        break;
      case Mode::Joint:
        if (cfg.kl_double) {
          pol_term = tp.sub(pol_clip, tp.scale(kl_pol_mean, cfg.beta_kl));
          rep_term = tp.sub(rep_clip, tp.scale(kl_rep_mean, cfg.beta_kl));
        } else if (have_pol) {
          // KL charged once, on the policy side.
          pol_term = tp.sub(pol_clip, tp.scale(kl_pol_mean, cfg.beta_kl));
        } else {
          rep_term = tp.sub(rep_clip, tp.scale(kl_rep_mean, cfg.beta_kl));
        }
        break;
    }

    Tape::Id total;
    switch (mode) {
      case Mode::PolicyOnly:
        total = pol_term;
        break;
      case Mode::RepairOnly:
        total = rep_term;
        break;
      case Mode::Joint:
      default:
        total = tp.add(pol_term, tp.scale(rep_term, cfg.lambda_rep));
        break;
    }
    report.policy_term = tp.val(pol_term);
    report.repair_term = tp.val(rep_term);
    report.total = tp.val(total);
    return total;
  }
};

struct GspoBuilder : ScalarObjective {
  std::span<const RolloutGroup> groups;
  ClipConfig cfg;
  mutable ObjectiveReport report;

  Tape::Id build(ObjectiveCtx& ctx) const override {
    report = ObjectiveReport{};
    Tape& tp = ctx.tape();
    Tape::Id sum = -1;
    KlAccum kl;
    for (const RolloutGroup& g : groups) {
      if (g.samples.size() < 2) {
        ++report.groups_skipped;
        continue;
      }
      std::vector<double> rewards;
      rewards.reserve(g.samples.size());
      for (const auto& s : g.samples) rewards.push_back(static_cast<double>(s.reward));
      bool varied = false;
      for (double r : rewards)
        if (r != rewards[0]) {
          varied = true;
          break;
        }
      if (!varied) {
        ++report.groups_skipped;
        continue;
      }
      std::vector<double> adv = group_normalize(rewards);
      int c = ctx.add_context(g.problem.prompt);
      Tape::Id gsum = -1;
      std::vector<int> gates;
      for (size_t i = 0; i < g.samples.size(); ++i) {
        const Trajectory& tr = g.samples[i];
        gates.assign(tr.tokens.size(), 1);
        int b = ctx.add_branch(c, tr.tokens);
        if (cfg.beta_kl != 0.0) kl.add_branch(ctx, b, static_cast<int>(tr.tokens.size()));
        Tape::Id term = member_clip_term(ctx, b, tr.logprobs, gates, adv[i], cfg.eps);
        gsum = (gsum < 0) ? term : tp.add(gsum, term);
      }
      Tape::Id group_term = tp.scale(gsum, 1.0 / static_cast<double>(g.samples.size()));
      sum = (sum < 0) ? group_term : tp.add(sum, group_term);
      ++report.groups_used;
    }
    report.empty = report.groups_used == 0;
    Tape::Id clip_mean =
        report.groups_used > 0 ? tp.scale(sum, 1.0 / report.groups_used) : tp.constant(0.0);
    Tape::Id kl_mean = kl.mean(tp);
    report.kl_policy = tp.val(kl_mean);
    Tape::Id total = tp.sub(clip_mean, tp.scale(kl_mean, cfg.beta_kl));
    report.policy_term = tp.val(total);
    report.total = tp.val(total);
    return total;
  }
};

ObjectiveReport run_builder(const ScalarObjective& b, const ObjectiveReport& rep,
                            const Params& theta, const Params& ref,
                            GradientVector* grad_out, SgLog* sg) {
  if (grad_out) {
    ObjectiveCtx ctx(theta, &ref, true, sg);
    Tape::Id root = b.build(ctx);
    *grad_out = ctx.gradient(root);
  } else {
    ObjectiveCtx ctx(theta, &ref, false, sg);
    b.build(ctx);
  }
  return rep;
}

}  // namespace

double sft_loss(const Params& theta, std::span<const ColdStartExample> batch,
                GradientVector* grad_out, int* skipped_out) {
  if (batch.empty()) throw std::invalid_argument("sft_loss: empty batch");

  struct SftBuilder : ScalarObjective {
    std::span<const ColdStartExample> batch;
    const Arch* arch;
    mutable int skipped = 0;

    Tape::Id build(ObjectiveCtx& ctx) const override {
      skipped = 0;
      Tape& tp = ctx.tape();
      Tape::Id sum = -1;
      long count = 0;
      for (const auto& ex : batch) {
        std::vector<int> c = build_repair_context(ex.problem, ex.failed, ex.reference);
        if (static_cast<int>(c.size() + ex.target.size()) > arch->context_len) {
          ++skipped;
          continue;
        }
        int ch = ctx.add_context(c);
        int b = ctx.add_branch(ch, ex.target);
        for (int t = 0; t < static_cast<int>(ex.target.size()); ++t) {
          Tape::Id lp = ctx.logprob(b, t);
          sum = (sum < 0) ? lp : tp.add(sum, lp);
          ++count;
        }
      }
      if (count == 0) return tp.constant(0.0);
      return tp.neg(tp.scale(sum, 1.0 / static_cast<double>(count)));
    }
  } builder;
  builder.batch = batch;
  builder.arch = &theta.arch;

  double value = 0.0;
  if (grad_out) {
    ObjectiveCtx ctx(theta, nullptr, true);
    Tape::Id root = builder.build(ctx);
    value = ctx.value(root);
    *grad_out = ctx.gradient(root);
  } else {
    ObjectiveCtx ctx(theta, nullptr, false);
    Tape::Id root = builder.build(ctx);
    value = ctx.value(root);
  }
  if (skipped_out) *skipped_out = builder.skipped;
  return value;
}

double solution_nll(const Params& theta, std::span<const ColdStartExample> batch,
                    GradientVector* grad_out) {
  if (batch.empty()) throw std::invalid_argument("solution_nll: empty batch");

  struct CloneBuilder : ScalarObjective {
    std::span<const ColdStartExample> batch;

    Tape::Id build(ObjectiveCtx& ctx) const override {
      Tape& tp = ctx.tape();
      Tape::Id sum = -1;
      long count = 0;
      for (const auto& ex : batch) {
        int ch = ctx.add_context(ex.problem.prompt);
        int b = ctx.add_branch(ch, ex.reference);
        for (int t = 0; t < static_cast<int>(ex.reference.size()); ++t) {
          Tape::Id lp = ctx.logprob(b, t);
          sum = (sum < 0) ? lp : tp.add(sum, lp);
          ++count;
        }
      }
      return tp.neg(tp.scale(sum, 1.0 / static_cast<double>(count)));
    }
  } builder;
  builder.batch = batch;

  if (grad_out) {
    ObjectiveCtx ctx(theta, nullptr, true);
    Tape::Id root = builder.build(ctx);
    double v = ctx.value(root);
    *grad_out = ctx.gradient(root);
    return v;
  }
  ObjectiveCtx ctx(theta, nullptr, false);
  return ctx.value(builder.build(ctx));
}

std::optional<double> gated_seq_ratio(const Params& theta, std::span<const int> context,
                                      std::span<const int> tokens,
                                      std::span<const double> old_logprobs,
                                      std::span<const int> gates) {
  int n = active_count(gates);
  if (n == 0) return std::nullopt;
  std::vector<double> lp = per_token_logprobs(theta, context, tokens);
  double s = 0.0;
  for (size_t t = 0; t < tokens.size(); ++t)
    if (gates[t]) s += lp[t] - old_logprobs[t];
  return std::exp(s / n);
}

double gated_clip_loss(const Params& theta, const PairGroup& pair, const ClipConfig& cfg) {
  Builder b;
  b.pairs = std::span<const PairGroup>(&pair, 1);
  b.cfg = cfg;
  b.cfg.beta_kl = 0.0;
  b.mode = Mode::PolicyOnly;
  ObjectiveCtx ctx(theta, nullptr, false);
  Tape::Id root = b.build(ctx);
  return ctx.value(root);
}

ObjectiveReport policy_objective(const Params& theta, const Params& ref,
                                 std::span<const PairGroup> pairs, const ClipConfig& cfg,
                                 GradientVector* grad_out, SgLog* sg) {
  Builder b;
  b.pairs = pairs;
  b.cfg = cfg;
  b.mode = Mode::PolicyOnly;
  return run_builder(b, b.report, theta, ref, grad_out, sg);
}

ObjectiveReport repair_objective(const Params& theta, const Params& ref,
                                 std::span<const RepairGroup> groups, const ClipConfig& cfg,
                                 GradientVector* grad_out, SgLog* sg) {
  Builder b;
  b.groups = groups;
  b.cfg = cfg;
  b.mode = Mode::RepairOnly;
  return run_builder(b, b.report, theta, ref, grad_out, sg);
}

ObjectiveReport joint_objective(const Params& theta, const Params& ref,
                                std::span<const PairGroup> pairs,
                                std::span<const RepairGroup> groups, const ClipConfig& cfg,
                                GradientVector* grad_out, SgLog* sg) {
  Builder b;
  b.pairs = pairs;
  b.groups = groups;
  b.cfg = cfg;
  b.mode = Mode::Joint;
  return run_builder(b, b.report, theta, ref, grad_out, sg);
}

ObjectiveReport gspo_objective(const Params& theta, const Params& ref,
                               std::span<const RolloutGroup> groups, const ClipConfig& cfg,
                               GradientVector* grad_out, SgLog* sg) {
  GspoBuilder b;
  b.groups = groups;
  b.cfg = cfg;
  return run_builder(b, b.report, theta, ref, grad_out, sg);
}

}  // namespace iop
