#ifndef IOP_MODEL_DIFF_HPP
#define IOP_MODEL_DIFF_HPP

#include <span>
#include <vector>

#include "iop/policy_model.hpp"
#include "iop/tape.hpp"

namespace iop {

// Differentiation context tying the scalar tape to the sequence model.
//
// Sequences are registered as a shared context plus branches scored against
// it; per-token log-probabilities and per-position KL-to-reference terms
// become tape leaves. After an objective expression is built on the tape,
// gradient() backpropagates the tape adjoints into per-position logits
// gradients and then through the recorded traces to the flat parameter
// vector.
class ObjectiveCtx {
 public:
  // ref may be null when no KL leaves are needed. sg (optional) records or
  // replays stop-gradient values, see SgLog.
  ObjectiveCtx(const Params& theta, const Params* ref, bool need_grad,
               SgLog* sg = nullptr);

  int add_context(std::span<const int> tokens);
  int add_branch(int ctx_handle, std::span<const int> targets);

  // Tape leaf: log p_theta(targets[t] | context, targets[<t]).
  Tape::Id logprob(int branch, int t);
  // Tape leaf: KL(p_theta || p_ref) at the position predicting targets[t].
  Tape::Id kl(int branch, int t);

  double logprob_value(int branch, int t) const;
  double kl_value(int branch, int t) const;
  int branch_size(int branch) const;

  Tape& tape() { return tape_; }
  double value(Tape::Id id) const { return tape_.val(id); }

  // d(root)/d(theta). Only valid when constructed with need_grad = true.
  // Throws on non-finite gradient entries.
  GradientVector gradient(Tape::Id root);

 private:
  struct CtxRec {
    std::vector<int> tokens;
    Trace trace;       // recorded iff need_grad
    State final_state;
    State ref_final;
  };
  struct PosRec {
    int target;
    std::vector<double> logp;
    std::vector<double> logq;
    double kl = 0.0;
    Tape::Id lp_node = -1;
    Tape::Id kl_node = -1;
  };
  struct BranchRec {
    int ctx;
    std::vector<int> targets;
    Trace trace;  // over targets[0..T-2], recorded iff need_grad
    std::vector<PosRec> pos;
  };

  const double* htop_for(const BranchRec& b, int t) const;

  const Params& theta_;
  const Params* ref_;
  bool need_grad_;
  Tape tape_;
  std::vector<CtxRec> ctxs_;
  std::vector<BranchRec> branches_;
};

// An objective expressed against the differentiation context. The spec-level
// contract: a scalar composed of log-prob leaves, stop-gradient values and
// constants.
struct ScalarObjective {
  virtual ~ScalarObjective() = default;
  virtual Tape::Id build(ObjectiveCtx& ctx) const = 0;
};

double objective_value(const Params& theta, const Params* ref, const ScalarObjective& obj,
                       SgLog* sg = nullptr);
GradientVector objective_gradient(const Params& theta, const Params* ref,
                                  const ScalarObjective& obj, double* value_out = nullptr,
                                  SgLog* sg = nullptr);

// Central finite-difference gradient of the same objective, with the
// stop-gradient values pinned at the evaluation point. The independent
// oracle for gradient checks.
GradientVector fd_gradient(const Params& theta, const Params* ref,
                           const ScalarObjective& obj, double step = 1e-4);

}  // namespace iop

#endif  // IOP_MODEL_DIFF_HPP
