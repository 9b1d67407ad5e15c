#ifndef IOP_TAPE_HPP
#define IOP_TAPE_HPP

#include <cstddef>
#include <vector>

namespace iop {

// Records stop-gradient values in tape construction order. One evaluation
// records; later evaluations of the same expression (same construction
// order) can replay the recorded values, which is how finite-difference
// checks hold sg factors fixed while parameters move.
struct SgLog {
  std::vector<double> values;
  size_t cursor = 0;
  bool replay = false;

  void rewind() { cursor = 0; }
};

// Minimal eager reverse-mode tape over scalars. Leaves are externally
// supplied values (per-token log-probabilities, per-position KL terms);
// everything else is composed from them. Values are computed at
// construction; backward() fills adjoints.
class Tape {
 public:
  using Id = int;

  Id constant(double v) { return push(Op::Const, v, -1, -1); }
  Id leaf(double v) { return push(Op::Leaf, v, -1, -1); }

  Id add(Id a, Id b) { return push(Op::Add, val(a) + val(b), a, b); }
  Id sub(Id a, Id b) { return push(Op::Sub, val(a) - val(b), a, b); }
  Id mul(Id a, Id b) { return push(Op::Mul, val(a) * val(b), a, b); }
  Id div(Id a, Id b) { return push(Op::Div, val(a) / val(b), a, b); }
  Id neg(Id a) { return push(Op::Neg, -val(a), a, -1); }
  Id exp_(Id a);
  Id log_(Id a);
  Id min_(Id a, Id b) { return push(Op::Min, val(a) <= val(b) ? val(a) : val(b), a, b); }
  Id max_(Id a, Id b) { return push(Op::Max, val(a) >= val(b) ? val(a) : val(b), a, b); }
  Id clip(Id a, double lo, double hi);

  // Value passes through (possibly replayed from the SgLog); gradient stops.
  Id stop_grad(Id a);

  Id scale(Id a, double c) { return push(Op::Scale, val(a) * c, a, -1, c); }
  Id add_const(Id a, double c) { return push(Op::Scale0, val(a) + c, a, -1, c); }

  double val(Id i) const { return nodes_[static_cast<size_t>(i)].val; }

  void set_sg_log(SgLog* log) { sg_log_ = log; }

  // d(root)/d(node) for every node; valid until the next mutation.
  void backward(Id root);
  double adjoint(Id i) const { return adj_[static_cast<size_t>(i)]; }

  size_t size() const { return nodes_.size(); }

 private:
  enum class Op { Const, Leaf, Add, Sub, Mul, Div, Neg, Exp, Log, Min, Max, Clip, Sg, Scale, Scale0 };
  struct Node {
    Op op;
    double val;
    Id a, b;
    double c0 = 0.0, c1 = 0.0;
  };

  Id push(Op op, double v, Id a, Id b, double c0 = 0.0, double c1 = 0.0) {
    nodes_.push_back({op, v, a, b, c0, c1});
    return static_cast<Id>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
  std::vector<double> adj_;
  SgLog* sg_log_ = nullptr;
};

}  // namespace iop

#endif  // IOP_TAPE_HPP
