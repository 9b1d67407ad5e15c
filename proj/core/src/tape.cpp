#include "iop/tape.hpp"

#include <cmath>
#include <stdexcept>

namespace iop {

Tape::Id Tape::exp_(Id a) { return push(Op::Exp, std::exp(val(a)), a, -1); }

Tape::Id Tape::log_(Id a) { return push(Op::Log, std::log(val(a)), a, -1); }

Tape::Id Tape::clip(Id a, double lo, double hi) {
  double v = val(a);
  double c = v < lo ? lo : (v > hi ? hi : v);
  return push(Op::Clip, c, a, -1, lo, hi);
}

Tape::Id Tape::stop_grad(Id a) {
  double v = val(a);
  if (sg_log_) {
    if (sg_log_->replay) {
      if (sg_log_->cursor >= sg_log_->values.size())
        throw std::runtime_error("SgLog replay exhausted: expression shape changed");
      v = sg_log_->values[sg_log_->cursor++];
    } else {
      sg_log_->values.push_back(v);
    }
  }
  return push(Op::Sg, v, a, -1);
}

void Tape::backward(Id root) {
  adj_.assign(nodes_.size(), 0.0);
  adj_[static_cast<size_t>(root)] = 1.0;
  for (Id i = static_cast<Id>(nodes_.size()) - 1; i >= 0; --i) {
    const Node& n = nodes_[static_cast<size_t>(i)];
    const double g = adj_[static_cast<size_t>(i)];
    if (g == 0.0) continue;
    switch (n.op) {
      case Op::Const:
      case Op::Leaf:
      case Op::Sg:
        break;
      case Op::Add:
        adj_[static_cast<size_t>(n.a)] += g;
        adj_[static_cast<size_t>(n.b)] += g;
        break;
      case Op::Sub:
        adj_[static_cast<size_t>(n.a)] += g;
        adj_[static_cast<size_t>(n.b)] -= g;
        break;
      case Op::Mul:
        adj_[static_cast<size_t>(n.a)] += g * nodes_[static_cast<size_t>(n.b)].val;
        adj_[static_cast<size_t>(n.b)] += g * nodes_[static_cast<size_t>(n.a)].val;
        break;
      case Op::Div: {
        double vb = nodes_[static_cast<size_t>(n.b)].val;
        adj_[static_cast<size_t>(n.a)] += g / vb;
        adj_[static_cast<size_t>(n.b)] -= g * nodes_[static_cast<size_t>(n.a)].val / (vb * vb);
        break;
      }
      case Op::Neg:
        adj_[static_cast<size_t>(n.a)] -= g;
        break;
      case Op::Exp:
        adj_[static_cast<size_t>(n.a)] += g * n.val;
        break;
      case Op::Log:
        adj_[static_cast<size_t>(n.a)] += g / nodes_[static_cast<size_t>(n.a)].val;
        break;
      case Op::Min:
        adj_[static_cast<size_t>(nodes_[static_cast<size_t>(n.a)].val <= nodes_[static_cast<size_t>(n.b)].val ? n.a : n.b)] += g;
        break;
      case Op::Max:
        adj_[static_cast<size_t>(nodes_[static_cast<size_t>(n.a)].val >= nodes_[static_cast<size_t>(n.b)].val ? n.a : n.b)] += g;
        break;
      case Op::Clip: {
        double va = nodes_[static_cast<size_t>(n.a)].val;
        if (va > n.c0 && va < n.c1) adj_[static_cast<size_t>(n.a)] += g;
        break;
      }
      case Op::Scale:
        adj_[static_cast<size_t>(n.a)] += g * n.c0;
        break;
      case Op::Scale0:
        adj_[static_cast<size_t>(n.a)] += g;
        break;
    }
  }
}

}  // namespace iop
