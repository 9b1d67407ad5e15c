#ifndef IOP_POLICY_MODEL_HPP
#define IOP_POLICY_MODEL_HPP

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace iop {

struct ContextOverflowError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Architecture descriptor for the shared-parameter sequence model: a small
// causal self-attention decoder (learned positional table, `layers` blocks of
// multi-head attention + SiLU MLP with RMS norms, linear head). The same
// parameters serve the policy mode and the repair mode; the two differ only
// in the context layout fed to them.
struct Arch {
  int vocab_size = 18;
  int context_len = 160;
  int hidden = 48;
  int heads = 4;
  int layers = 1;

  int head_dim() const { return hidden / heads; }
  int mlp_dim() const { return 4 * hidden; }

  int64_t param_count() const {
    const int64_t h = hidden, v = vocab_size, c = context_len, m = mlp_dim();
    return v * h + c * h + layers * (4 * h * h + 2 * m * h + 2 * h) + h + v * h + v;
  }
};

// Flat double-precision parameter vector plus its architecture.
struct Params {
  Arch arch;
  std::vector<double> w;
};

using GradientVector = std::vector<double>;

// Offsets into the flat vector, derived from the arch.
struct ParamLayout {
  struct Block {
    int64_t wq, wk, wv, wo, w1, w2, g1, g2;
  };

  int64_t emb = 0;
  int64_t pos = 0;
  int64_t block0 = 0;
  int64_t block_stride = 0;
  int64_t g3 = 0;
  int64_t head_w = 0;
  int64_t head_b = 0;
  int64_t total = 0;
  int hidden = 0;
  int mlp = 0;

  explicit ParamLayout(const Arch& a);

  Block block(int l) const {
    const int64_t h = hidden, m = mlp;
    int64_t base = block0 + block_stride * l;
    Block b;
    b.wq = base;
    b.wk = b.wq + h * h;
    b.wv = b.wk + h * h;
    b.wo = b.wv + h * h;
    b.w1 = b.wo + h * h;
    b.w2 = b.w1 + m * h;
    b.g1 = b.w2 + h * m;
    b.g2 = b.g1 + h;
    return b;
  }
};

Params init_params(uint64_t seed, const Arch& arch);

// Decoding state: per-position key/value cache for every block, plus the
// normed output of the newest position (the head input).
struct State {
  std::vector<double> kv;   // len * layers * 2H, position-major
  std::vector<double> cur;  // head input at the last position (H); empty at len 0
  int len = 0;
};

State initial_state(const Arch& a);

// Per-step activations recorded for backpropagation.
struct Trace {
  std::vector<int> inputs;
  State state0;
  std::vector<double> cells;   // fixed-stride tensors per position
  std::vector<double> probs;   // attention weights, ragged, with offsets
  std::vector<int64_t> probs_off;
  int steps = 0;
};

// Advance the state over `tokens`; no recording. Throws ContextOverflowError
// past arch.context_len positions.
void advance(const Params& p, State& state, std::span<const int> tokens);
void advance_one(const Params& p, State& state, int token);

// Advance while recording activations for a later backward pass.
Trace advance_traced(const Params& p, const State& state0, std::span<const int> tokens);

State trace_final_state(const Trace& t, const Arch& a);

// Head-input vector recorded at a trace step.
const double* trace_head_input(const Trace& t, const Arch& a, int step);

// Next-token logits from a state (head applied to the newest position).
void state_logits(const Params& p, const State& state, std::vector<double>& logits_out);

// Head applied to a raw head-input vector.
void logits_from_htop(const Params& p, const double* htop, std::vector<double>& logits_out);

// In-place logits -> log-probabilities.
void log_softmax(std::vector<double>& v);

// Exact per-token conditional log-probabilities of `tokens` given `context`.
std::vector<double> per_token_logprobs(const Params& p, std::span<const int> context,
                                       std::span<const int> tokens);

struct SampleOut {
  std::vector<int> tokens;
  std::vector<double> logprobs;  // untempered model log-probs of the sampled tokens
};

// Seeded autoregressive sampling until EOS or max_len generated tokens.
// temperature shapes the sampling distribution only; the returned log-probs
// are those of the untempered model, which is what importance ratios use.
SampleOut sample(const Params& p, std::span<const int> context, double temperature,
                 int max_len, uint64_t seed);
SampleOut sample_from_state(const Params& p, const State& ctx_state, int ctx_len,
                            double temperature, int max_len, uint64_t seed);

// Greedy (argmax) decoding, the temperature -> 0 limit.
SampleOut greedy(const Params& p, std::span<const int> context, int max_len);
SampleOut greedy_from_state(const Params& p, const State& ctx_state, int ctx_len,
                            int max_len);

// Mean over scoring positions of exact categorical KL(p_theta || p_ref).
double token_kl(const Params& p, const Params& ref, std::span<const int> context,
                std::span<const int> tokens);

// Backpropagation through a recorded trace.
//   dhead_by_step: gradient at the head input after each step
//                  (steps * hidden; empty means none);
//   dkv_inout:     in: downstream gradients w.r.t. the kv cache, either empty
//                  (all zero), prefix-sized (state0 positions only) or
//                  full-span-sized; out: gradient w.r.t. the state0 prefix
//                  cache, for chaining into an upstream shared context.
// Parameter gradients accumulate into grad.
void trace_backward(const Params& p, const Trace& t,
                    std::span<const double> dhead_by_step,
                    std::vector<double>& dkv_inout, GradientVector& grad);

// Head backward at one scored position: dlogits -> head params + d(head input).
void head_backward(const Params& p, const double* htop, std::span<const double> dlogits,
                   GradientVector& grad, double* dhtop);

// AdamW with linear warmup.
struct OptConfig {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  int warmup_steps = 20;
};

struct AdamState {
  std::vector<double> m, v;
  int64_t t = 0;
};

// One optimizer step. Returns false and leaves params and moments untouched
// when the gradient contains a non-finite value.
bool apply_update(Params& p, const GradientVector& grad, AdamState& opt,
                  const OptConfig& cfg);

}  // namespace iop

#endif  // IOP_POLICY_MODEL_HPP
