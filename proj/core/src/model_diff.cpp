#include "iop/model_diff.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace iop {

ObjectiveCtx::ObjectiveCtx(const Params& theta, const Params* ref, bool need_grad,
                           SgLog* sg)
    : theta_(theta), ref_(ref), need_grad_(need_grad) {
  tape_.set_sg_log(sg);
}

int ObjectiveCtx::add_context(std::span<const int> tokens) {
  if (static_cast<int>(tokens.size()) > theta_.arch.context_len)
    throw ContextOverflowError("add_context: context window exceeded");
  CtxRec c;
  c.tokens.assign(tokens.begin(), tokens.end());
  if (need_grad_) {
    c.trace = advance_traced(theta_, initial_state(theta_.arch), tokens);
    c.final_state = trace_final_state(c.trace, theta_.arch);
  } else {
    c.final_state = initial_state(theta_.arch);
    advance(theta_, c.final_state, tokens);
  }
  if (ref_) {
    c.ref_final = initial_state(ref_->arch);
    advance(*ref_, c.ref_final, tokens);
  }
  ctxs_.push_back(std::move(c));
  return static_cast<int>(ctxs_.size()) - 1;
}

const double* ObjectiveCtx::htop_for(const BranchRec& b, int t) const {
  if (t == 0) return ctxs_[static_cast<size_t>(b.ctx)].final_state.cur.data();
  return trace_head_input(b.trace, theta_.arch, t - 1);
}

int ObjectiveCtx::add_branch(int ctx_handle, std::span<const int> targets) {
  const CtxRec& c = ctxs_.at(static_cast<size_t>(ctx_handle));
  if (static_cast<int>(c.tokens.size() + targets.size()) > theta_.arch.context_len)
    throw ContextOverflowError("add_branch: context window exceeded");
  if (targets.empty()) throw std::invalid_argument("add_branch: empty target sequence");

  BranchRec b;
  b.ctx = ctx_handle;
  b.targets.assign(targets.begin(), targets.end());
  const int T = static_cast<int>(targets.size());
  std::span<const int> inputs = targets.subspan(0, static_cast<size_t>(T - 1));

  std::vector<double> logits;
  if (need_grad_) {
    b.trace = advance_traced(theta_, c.final_state, inputs);
    b.pos.resize(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) {
      PosRec& pr = b.pos[static_cast<size_t>(t)];
      pr.target = targets[static_cast<size_t>(t)];
      logits_from_htop(theta_, htop_for(b, t), logits);
      log_softmax(logits);
      pr.logp = logits;
    }
  } else {
    State s = c.final_state;
    b.pos.resize(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) {
      PosRec& pr = b.pos[static_cast<size_t>(t)];
      pr.target = targets[static_cast<size_t>(t)];
      state_logits(theta_, s, logits);
      log_softmax(logits);
      pr.logp = logits;
      if (t + 1 < T) advance_one(theta_, s, targets[static_cast<size_t>(t)]);
    }
  }
  if (ref_) {
    State s = c.ref_final;
    for (int t = 0; t < T; ++t) {
      PosRec& pr = b.pos[static_cast<size_t>(t)];
      state_logits(*ref_, s, logits);
      log_softmax(logits);
      pr.logq = logits;
      double kl = 0.0;
      for (int v = 0; v < theta_.arch.vocab_size; ++v)
        kl += std::exp(pr.logp[static_cast<size_t>(v)]) *
              (pr.logp[static_cast<size_t>(v)] - pr.logq[static_cast<size_t>(v)]);
      pr.kl = kl;
      if (t + 1 < T) advance_one(*ref_, s, targets[static_cast<size_t>(t)]);
    }
  }
  branches_.push_back(std::move(b));
  return static_cast<int>(branches_.size()) - 1;
}

Tape::Id ObjectiveCtx::logprob(int branch, int t) {
  PosRec& pr = branches_.at(static_cast<size_t>(branch)).pos.at(static_cast<size_t>(t));
  if (pr.lp_node < 0) pr.lp_node = tape_.leaf(pr.logp[static_cast<size_t>(pr.target)]);
  return pr.lp_node;
}

Tape::Id ObjectiveCtx::kl(int branch, int t) {
  if (!ref_) throw std::logic_error("kl leaf requested without a reference model");
  PosRec& pr = branches_.at(static_cast<size_t>(branch)).pos.at(static_cast<size_t>(t));
  if (pr.kl_node < 0) pr.kl_node = tape_.leaf(pr.kl);
  return pr.kl_node;
}

double ObjectiveCtx::logprob_value(int branch, int t) const {
  const PosRec& pr = branches_.at(static_cast<size_t>(branch)).pos.at(static_cast<size_t>(t));
  return pr.logp[static_cast<size_t>(pr.target)];
}

double ObjectiveCtx::kl_value(int branch, int t) const {
  return branches_.at(static_cast<size_t>(branch)).pos.at(static_cast<size_t>(t)).kl;
}

int ObjectiveCtx::branch_size(int branch) const {
  return static_cast<int>(branches_.at(static_cast<size_t>(branch)).targets.size());
}

GradientVector ObjectiveCtx::gradient(Tape::Id root) {
  if (!need_grad_) throw std::logic_error("gradient on a value-only context");
  tape_.backward(root);

  const Arch& a = theta_.arch;
  const int H = a.hidden, V = a.vocab_size;
  GradientVector grad(theta_.w.size(), 0.0);

  // Per-context accumulation: head gradients at the context's last step and
  // kv-cache gradients flowing back from branches.
  std::vector<std::vector<double>> ctx_dhead(ctxs_.size());
  std::vector<std::vector<double>> ctx_dkv(ctxs_.size());

  std::vector<double> dlogits(static_cast<size_t>(V));
  const ParamLayout lay(a);
  for (const BranchRec& b : branches_) {
    const int T = static_cast<int>(b.targets.size());
    std::vector<double> dhead(static_cast<size_t>(b.trace.steps) * H, 0.0);
    bool any = false;
    for (int t = 0; t < T; ++t) {
      const PosRec& pr = b.pos[static_cast<size_t>(t)];
      double g_lp = pr.lp_node >= 0 ? tape_.adjoint(pr.lp_node) : 0.0;
      double g_kl = pr.kl_node >= 0 ? tape_.adjoint(pr.kl_node) : 0.0;
      if (g_lp == 0.0 && g_kl == 0.0) continue;
      any = true;
      for (int v = 0; v < V; ++v) {
        double pv = std::exp(pr.logp[static_cast<size_t>(v)]);
        double d = -g_lp * pv;
        if (v == pr.target) d += g_lp;
        if (g_kl != 0.0)
          d += g_kl * pv *
               (pr.logp[static_cast<size_t>(v)] - pr.logq[static_cast<size_t>(v)] - pr.kl);
        dlogits[static_cast<size_t>(v)] = d;
      }
      double* dh_slot;
      if (t == 0) {
        auto& cdh = ctx_dhead[static_cast<size_t>(b.ctx)];
        const CtxRec& c = ctxs_[static_cast<size_t>(b.ctx)];
        if (cdh.empty()) cdh.assign(static_cast<size_t>(c.trace.steps) * H, 0.0);
        dh_slot = cdh.data() + static_cast<size_t>(c.trace.steps - 1) * H;
      } else {
        dh_slot = dhead.data() + static_cast<size_t>(t - 1) * H;
      }
      head_backward(theta_, htop_for(b, t), dlogits, grad, dh_slot);
    }
    if (!any) continue;
    std::vector<double> dkv0;
    trace_backward(theta_, b.trace, dhead, dkv0, grad);
    auto& acc = ctx_dkv[static_cast<size_t>(b.ctx)];
    if (acc.empty()) {
      acc = std::move(dkv0);
    } else {
      for (size_t i = 0; i < acc.size(); ++i) acc[i] += dkv0[i];
    }
  }
  for (size_t ci = 0; ci < ctxs_.size(); ++ci) {
    bool has_kv = false;
    for (double v : ctx_dkv[ci])
      if (v != 0.0) {
        has_kv = true;
        break;
      }
    if (ctx_dhead[ci].empty() && !has_kv) continue;
    // The context starts from the empty state, so the branch kv-gradients
    // cover exactly its own positions; backward consumes them in place.
    std::vector<double> dkv_in = std::move(ctx_dkv[ci]);
    trace_backward(theta_, ctxs_[ci].trace, ctx_dhead[ci], dkv_in, grad);
  }
  for (size_t i = 0; i < grad.size(); ++i)
    if (!std::isfinite(grad[i]))
      throw std::runtime_error("non-finite gradient at parameter index " + std::to_string(i));
  return grad;
}

double objective_value(const Params& theta, const Params* ref, const ScalarObjective& obj,
                       SgLog* sg) {
  ObjectiveCtx ctx(theta, ref, false, sg);
  Tape::Id root = obj.build(ctx);
  return ctx.value(root);
}

GradientVector objective_gradient(const Params& theta, const Params* ref,
                                  const ScalarObjective& obj, double* value_out, SgLog* sg) {
  ObjectiveCtx ctx(theta, ref, true, sg);
  Tape::Id root = obj.build(ctx);
  if (value_out) *value_out = ctx.value(root);
  return ctx.gradient(root);
}

GradientVector fd_gradient(const Params& theta, const Params* ref,
                           const ScalarObjective& obj, double step) {
  // Record stop-gradient values once at the center point, then hold them
  // fixed while each coordinate moves.
  SgLog log;
  objective_value(theta, ref, obj, &log);
  log.replay = true;

  GradientVector g(theta.w.size(), 0.0);
  Params probe = theta;
  for (size_t i = 0; i < theta.w.size(); ++i) {
    probe.w[i] = theta.w[i] + step;
    log.rewind();
    double up = objective_value(probe, ref, obj, &log);
    probe.w[i] = theta.w[i] - step;
    log.rewind();
    double dn = objective_value(probe, ref, obj, &log);
    probe.w[i] = theta.w[i];
    g[i] = (up - dn) / (2.0 * step);
  }
  return g;
}

}  // namespace iop
