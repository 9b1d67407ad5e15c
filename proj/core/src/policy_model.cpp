#include "iop/policy_model.hpp"

#include <algorithm>
#include <cmath>

#include "iop/rng.hpp"
#include "iop/vocab.hpp"

namespace iop {

namespace {

inline void matvec(const double* w, const double* x, int rows, int cols, double* y) {
  for (int i = 0; i < rows; ++i) {
    const double* row = w + static_cast<int64_t>(i) * cols;
    double acc = 0.0;
    for (int j = 0; j < cols; ++j) acc += row[j] * x[j];
    y[i] = acc;
  }
}

inline void matvec_t_acc(const double* w, const double* dy, int rows, int cols, double* dx) {
  for (int i = 0; i < rows; ++i) {
    const double g = dy[i];
    const double* row = w + static_cast<int64_t>(i) * cols;
    for (int j = 0; j < cols; ++j) dx[j] += g * row[j];
  }
}

inline void outer_acc(double* dw, const double* dy, const double* x, int rows, int cols) {
  for (int i = 0; i < rows; ++i) {
    const double g = dy[i];
    double* row = dw + static_cast<int64_t>(i) * cols;
    for (int j = 0; j < cols; ++j) row[j] += g * x[j];
  }
}

constexpr double kRmsEps = 1e-8;

inline double rms_of(const double* x, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += x[i] * x[i];
  return std::sqrt(s / n + kRmsEps);
}

// n = (x / r) * g: accumulate the gain gradient and add the input gradient.
inline void rms_backward(const double* x, double r, const double* g, const double* dn,
                         int n, double* dgain, double* dx) {
  double dot = 0.0;
  for (int i = 0; i < n; ++i) {
    dgain[i] += dn[i] * x[i] / r;
    dot += dn[i] * g[i] * x[i];
  }
  const double c = dot / (n * r * r * r);
  for (int i = 0; i < n; ++i) dx[i] += dn[i] * g[i] / r - x[i] * c;
}

inline double silu(double u) { return u / (1.0 + std::exp(-u)); }
inline double silu_prime(double u) {
  double s = 1.0 / (1.0 + std::exp(-u));
  return s * (1.0 + u * (1.0 - s));
}

// Shared log-normalizer so sampling-time and scoring-time log-probs are
// bit-identical for the same parameters and prefix.
inline double logz(const std::vector<double>& logits) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : logits) s += std::exp(v - mx);
  return mx + std::log(s);
}

// Per-position cell layout: per block [x_in a q k v ctxv x_mid b](H each),
// u(M), r1, r2; then y(H), r3, n3(H) at the tail.
struct CellLayout {
  int h, m, layers;
  int64_t per_block;
  int64_t stride;

  explicit CellLayout(const Arch& a) : h(a.hidden), m(a.mlp_dim()), layers(a.layers) {
    per_block = 8 * static_cast<int64_t>(h) + m + 2;
    stride = layers * per_block + 2 * static_cast<int64_t>(h) + 1;
  }
  const double* x_in(const double* c, int l) const { return c + l * per_block; }
  const double* a(const double* c, int l) const { return c + l * per_block + h; }
  const double* q(const double* c, int l) const { return c + l * per_block + 2 * h; }
  const double* k(const double* c, int l) const { return c + l * per_block + 3 * h; }
  const double* v(const double* c, int l) const { return c + l * per_block + 4 * h; }
  const double* ctxv(const double* c, int l) const { return c + l * per_block + 5 * h; }
  const double* x_mid(const double* c, int l) const { return c + l * per_block + 6 * h; }
  const double* b(const double* c, int l) const { return c + l * per_block + 7 * h; }
  const double* u(const double* c, int l) const { return c + l * per_block + 8 * h; }
  const double* r1(const double* c, int l) const { return c + l * per_block + 8 * h + m; }
  const double* r2(const double* c, int l) const { return c + l * per_block + 8 * h + m + 1; }
  const double* y(const double* c) const { return c + layers * per_block; }
  const double* r3(const double* c) const { return c + layers * per_block + h; }
  const double* n3(const double* c) const { return c + layers * per_block + h + 1; }

  double* x_in(double* c, int l) const { return c + l * per_block; }
  double* a(double* c, int l) const { return c + l * per_block + h; }
  double* q(double* c, int l) const { return c + l * per_block + 2 * h; }
  double* k(double* c, int l) const { return c + l * per_block + 3 * h; }
  double* v(double* c, int l) const { return c + l * per_block + 4 * h; }
  double* ctxv(double* c, int l) const { return c + l * per_block + 5 * h; }
  double* x_mid(double* c, int l) const { return c + l * per_block + 6 * h; }
  double* b(double* c, int l) const { return c + l * per_block + 7 * h; }
  double* u(double* c, int l) const { return c + l * per_block + 8 * h; }
  double* r1(double* c, int l) const { return c + l * per_block + 8 * h + m; }
  double* r2(double* c, int l) const { return c + l * per_block + 8 * h + m + 1; }
  double* y(double* c) const { return c + layers * per_block; }
  double* r3(double* c) const { return c + layers * per_block + h; }
  double* n3(double* c) const { return c + layers * per_block + h + 1; }
};

struct Scratch {
  std::vector<double> x, a, q, k, v, ctxv, xm, b, u;
  void resize(const Arch& arch) {
    size_t h = static_cast<size_t>(arch.hidden);
    x.resize(h);
    a.resize(h);
    q.resize(h);
    k.resize(h);
    v.resize(h);
    ctxv.resize(h);
    xm.resize(h);
    b.resize(h);
    u.resize(static_cast<size_t>(arch.mlp_dim()));
  }
};

thread_local Scratch g_scratch;
thread_local std::vector<double> g_probs;

// Append one token to the state. When recording, `cells` receives the
// per-position tensors and `probs_out` the attention rows (per block, per
// head, prefix length pos+1 each).
void attend_token(const Params& p, const ParamLayout& lay, int token, State& st,
                  double* cells, double* probs_out) {
  const Arch& A = p.arch;
  const int H = A.hidden, D = A.head_dim(), NH = A.heads, M = A.mlp_dim();
  if (st.len >= A.context_len)
    throw ContextOverflowError("attend_token: context window exceeded");
  const int pos = st.len;
  const int64_t kv_stride = static_cast<int64_t>(A.layers) * 2 * H;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D));

  Scratch& s = g_scratch;
  s.resize(A);
  g_probs.resize(static_cast<size_t>(pos) + 1);
  CellLayout cl(A);

  const double* emb = p.w.data() + lay.emb + static_cast<int64_t>(token) * H;
  const double* pe = p.w.data() + lay.pos + static_cast<int64_t>(pos) * H;
  for (int i = 0; i < H; ++i) s.x[static_cast<size_t>(i)] = emb[i] + pe[i];

  st.kv.resize(static_cast<size_t>(pos + 1) * kv_stride);
  double* kv_here = st.kv.data() + static_cast<int64_t>(pos) * kv_stride;

  double* probs_cursor = probs_out;
  for (int l = 0; l < A.layers; ++l) {
    const auto B = lay.block(l);
    const double* g1 = p.w.data() + B.g1;
    const double* g2 = p.w.data() + B.g2;

    double r1 = rms_of(s.x.data(), H);
    for (int i = 0; i < H; ++i)
      s.a[static_cast<size_t>(i)] = s.x[static_cast<size_t>(i)] / r1 * g1[i];
    matvec(p.w.data() + B.wq, s.a.data(), H, H, s.q.data());
    matvec(p.w.data() + B.wk, s.a.data(), H, H, s.k.data());
    matvec(p.w.data() + B.wv, s.a.data(), H, H, s.v.data());
    std::copy(s.k.begin(), s.k.end(), kv_here + static_cast<int64_t>(l) * 2 * H);
    std::copy(s.v.begin(), s.v.end(), kv_here + static_cast<int64_t>(l) * 2 * H + H);

    for (int h = 0; h < NH; ++h) {
      const double* qh = s.q.data() + h * D;
      double mx = -1e300;
      for (int j = 0; j <= pos; ++j) {
        const double* kj = st.kv.data() + static_cast<int64_t>(j) * kv_stride +
                           static_cast<int64_t>(l) * 2 * H + h * D;
        double dot = 0.0;
        for (int d = 0; d < D; ++d) dot += qh[d] * kj[d];
        g_probs[static_cast<size_t>(j)] = dot * inv_sqrt_d;
        mx = std::max(mx, g_probs[static_cast<size_t>(j)]);
      }
      double z = 0.0;
      for (int j = 0; j <= pos; ++j) {
        g_probs[static_cast<size_t>(j)] = std::exp(g_probs[static_cast<size_t>(j)] - mx);
        z += g_probs[static_cast<size_t>(j)];
      }
      double* ch = s.ctxv.data() + h * D;
      std::fill(ch, ch + D, 0.0);
      for (int j = 0; j <= pos; ++j) {
        double pj = g_probs[static_cast<size_t>(j)] / z;
        if (probs_cursor) probs_cursor[j] = pj;
        const double* vj = st.kv.data() + static_cast<int64_t>(j) * kv_stride +
                           static_cast<int64_t>(l) * 2 * H + H + h * D;
        for (int d = 0; d < D; ++d) ch[d] += pj * vj[d];
      }
      if (probs_cursor) probs_cursor += pos + 1;
    }

    matvec(p.w.data() + B.wo, s.ctxv.data(), H, H, s.xm.data());
    for (int i = 0; i < H; ++i) s.xm[static_cast<size_t>(i)] += s.x[static_cast<size_t>(i)];
    double r2 = rms_of(s.xm.data(), H);
    for (int i = 0; i < H; ++i)
      s.b[static_cast<size_t>(i)] = s.xm[static_cast<size_t>(i)] / r2 * g2[i];
    matvec(p.w.data() + B.w1, s.b.data(), M, H, s.u.data());

    if (cells) {
      std::copy(s.x.begin(), s.x.end(), cl.x_in(cells, l));
      std::copy(s.a.begin(), s.a.end(), cl.a(cells, l));
      std::copy(s.q.begin(), s.q.end(), cl.q(cells, l));
      std::copy(s.k.begin(), s.k.end(), cl.k(cells, l));
      std::copy(s.v.begin(), s.v.end(), cl.v(cells, l));
      std::copy(s.ctxv.begin(), s.ctxv.end(), cl.ctxv(cells, l));
      std::copy(s.xm.begin(), s.xm.end(), cl.x_mid(cells, l));
      std::copy(s.b.begin(), s.b.end(), cl.b(cells, l));
      std::copy(s.u.begin(), s.u.end(), cl.u(cells, l));
      *cl.r1(cells, l) = r1;
      *cl.r2(cells, l) = r2;
    }

    for (int i = 0; i < M; ++i) s.u[static_cast<size_t>(i)] = silu(s.u[static_cast<size_t>(i)]);
    matvec(p.w.data() + B.w2, s.u.data(), H, M, s.x.data());
    for (int i = 0; i < H; ++i) s.x[static_cast<size_t>(i)] += s.xm[static_cast<size_t>(i)];
  }

  double r3 = rms_of(s.x.data(), H);
  const double* g3 = p.w.data() + lay.g3;
  st.cur.resize(static_cast<size_t>(H));
  for (int i = 0; i < H; ++i)
    st.cur[static_cast<size_t>(i)] = s.x[static_cast<size_t>(i)] / r3 * g3[i];
  if (cells) {
    std::copy(s.x.begin(), s.x.end(), cl.y(cells));
    *cl.r3(cells) = r3;
    std::copy(st.cur.begin(), st.cur.end(), cl.n3(cells));
  }
  st.len = pos + 1;
}

}  // namespace

ParamLayout::ParamLayout(const Arch& a) {
  const int64_t h = a.hidden, v = a.vocab_size, c = a.context_len, m = a.mlp_dim();
  hidden = a.hidden;
  mlp = static_cast<int>(m);
  emb = 0;
  pos = v * h;
  block0 = pos + c * h;
  block_stride = 4 * h * h + 2 * m * h + 2 * h;
  g3 = block0 + block_stride * a.layers;
  head_w = g3 + h;
  head_b = head_w + v * h;
  total = head_b + v;
}

Params init_params(uint64_t seed, const Arch& arch) {
  if (arch.hidden % arch.heads != 0)
    throw std::invalid_argument("init_params: hidden must be divisible by heads");
  Params p;
  p.arch = arch;
  p.w.resize(static_cast<size_t>(arch.param_count()));
  Rng rng(derive_seed(seed, kSeedInit));
  constexpr double kScale = 0.08;
  for (auto& w : p.w) {
    double u1 = 1.0 - rng.next_double();
    double u2 = rng.next_double();
    w = kScale * std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }
  // norm gains start at identity
  ParamLayout lay(arch);
  for (int l = 0; l < arch.layers; ++l) {
    auto B = lay.block(l);
    for (int i = 0; i < arch.hidden; ++i) {
      p.w[static_cast<size_t>(B.g1 + i)] = 1.0;
      p.w[static_cast<size_t>(B.g2 + i)] = 1.0;
    }
  }
  for (int i = 0; i < arch.hidden; ++i) p.w[static_cast<size_t>(lay.g3 + i)] = 1.0;
  return p;
}

State initial_state(const Arch&) { return State{}; }

void advance_one(const Params& p, State& state, int token) {
  ParamLayout lay(p.arch);
  attend_token(p, lay, token, state, nullptr, nullptr);
}

void advance(const Params& p, State& state, std::span<const int> tokens) {
  ParamLayout lay(p.arch);
  for (int t : tokens) attend_token(p, lay, t, state, nullptr, nullptr);
}

Trace advance_traced(const Params& p, const State& state0, std::span<const int> tokens) {
  ParamLayout lay(p.arch);
  CellLayout cl(p.arch);
  Trace tr;
  tr.state0 = state0;
  tr.inputs.assign(tokens.begin(), tokens.end());
  tr.steps = static_cast<int>(tokens.size());
  tr.cells.resize(static_cast<size_t>(cl.stride) * tr.steps);
  const int base = state0.len;
  tr.probs_off.resize(static_cast<size_t>(tr.steps) + 1);
  tr.probs_off[0] = 0;
  for (int i = 0; i < tr.steps; ++i)
    tr.probs_off[static_cast<size_t>(i) + 1] =
        tr.probs_off[static_cast<size_t>(i)] +
        static_cast<int64_t>(p.arch.layers) * p.arch.heads * (base + i + 1);
  tr.probs.resize(static_cast<size_t>(tr.probs_off[static_cast<size_t>(tr.steps)]));

  State st = state0;
  for (int i = 0; i < tr.steps; ++i)
    attend_token(p, lay, tr.inputs[static_cast<size_t>(i)], st,
                 tr.cells.data() + cl.stride * i,
                 tr.probs.data() + tr.probs_off[static_cast<size_t>(i)]);
  return tr;
}

State trace_final_state(const Trace& t, const Arch& a) {
  if (t.steps == 0) return t.state0;
  CellLayout cl(a);
  const int H = a.hidden;
  const int64_t kv_stride = static_cast<int64_t>(a.layers) * 2 * H;
  State st = t.state0;
  st.kv.resize(static_cast<size_t>(t.state0.len + t.steps) * kv_stride);
  for (int i = 0; i < t.steps; ++i) {
    const double* cells = t.cells.data() + cl.stride * i;
    double* dst = st.kv.data() + (static_cast<int64_t>(t.state0.len) + i) * kv_stride;
    for (int l = 0; l < a.layers; ++l) {
      std::copy(cl.k(cells, l), cl.k(cells, l) + H, dst + static_cast<int64_t>(l) * 2 * H);
      std::copy(cl.v(cells, l), cl.v(cells, l) + H, dst + static_cast<int64_t>(l) * 2 * H + H);
    }
  }
  const double* last = t.cells.data() + cl.stride * (t.steps - 1);
  st.cur.assign(cl.n3(last), cl.n3(last) + H);
  st.len = t.state0.len + t.steps;
  return st;
}

const double* trace_head_input(const Trace& t, const Arch& a, int step) {
  CellLayout cl(a);
  return cl.n3(t.cells.data() + cl.stride * step);
}

void logits_from_htop(const Params& p, const double* htop, std::vector<double>& logits) {
  const int H = p.arch.hidden, V = p.arch.vocab_size;
  ParamLayout lay(p.arch);
  logits.resize(static_cast<size_t>(V));
  matvec(p.w.data() + lay.head_w, htop, V, H, logits.data());
  for (int i = 0; i < V; ++i) logits[static_cast<size_t>(i)] += p.w[lay.head_b + i];
}

void state_logits(const Params& p, const State& state, std::vector<double>& logits) {
  if (state.len == 0) throw std::logic_error("state_logits: empty state");
  logits_from_htop(p, state.cur.data(), logits);
}

void log_softmax(std::vector<double>& v) {
  double z = logz(v);
  for (auto& x : v) x -= z;
}

std::vector<double> per_token_logprobs(const Params& p, std::span<const int> context,
                                       std::span<const int> tokens) {
  if (static_cast<int>(context.size() + tokens.size()) > p.arch.context_len)
    throw ContextOverflowError("per_token_logprobs: context window exceeded");
  State state = initial_state(p.arch);
  advance(p, state, context);
  std::vector<double> out;
  out.reserve(tokens.size());
  std::vector<double> logits;
  for (size_t i = 0; i < tokens.size(); ++i) {
    state_logits(p, state, logits);
    out.push_back(logits[static_cast<size_t>(tokens[i])] - logz(logits));
    if (i + 1 < tokens.size()) advance_one(p, state, tokens[i]);
  }
  return out;
}

namespace {

SampleOut decode(const Params& p, State state, double temperature, int max_len,
                 uint64_t seed, bool greedy_mode) {
  const int room = p.arch.context_len - state.len;
  if (room <= 0) throw ContextOverflowError("sample: no room left in context window");
  const int limit = std::min(max_len, room);
  Rng rng(seed);
  SampleOut out;
  std::vector<double> logits;
  const int eos = vocab().eos;
  for (int n = 0; n < limit; ++n) {
    state_logits(p, state, logits);
    int tok;
    if (greedy_mode) {
      tok = 0;
      for (int i = 1; i < p.arch.vocab_size; ++i)
        if (logits[static_cast<size_t>(i)] > logits[static_cast<size_t>(tok)]) tok = i;
    } else {
      // Draw from the tempered distribution; record untempered log-prob.
      std::vector<double> t(logits);
      for (auto& x : t) x /= temperature;
      double z = logz(t);
      double u = rng.next_double();
      double cum = 0.0;
      tok = p.arch.vocab_size - 1;
      for (int i = 0; i < p.arch.vocab_size; ++i) {
        cum += std::exp(t[static_cast<size_t>(i)] - z);
        if (u < cum) {
          tok = i;
          break;
        }
      }
    }
    out.tokens.push_back(tok);
    out.logprobs.push_back(logits[static_cast<size_t>(tok)] - logz(logits));
    if (tok == eos) break;
    advance_one(p, state, tok);
  }
  return out;
}

}  // namespace

SampleOut sample_from_state(const Params& p, const State& ctx_state, int /*ctx_len*/,
                            double temperature, int max_len, uint64_t seed) {
  if (temperature <= 0.0) throw std::invalid_argument("sample: temperature must be > 0");
  return decode(p, ctx_state, temperature, max_len, seed, false);
}

SampleOut sample(const Params& p, std::span<const int> context, double temperature,
                 int max_len, uint64_t seed) {
  State s = initial_state(p.arch);
  advance(p, s, context);
  return sample_from_state(p, s, static_cast<int>(context.size()), temperature, max_len,
                           seed);
}

SampleOut greedy_from_state(const Params& p, const State& ctx_state, int /*ctx_len*/,
                            int max_len) {
  return decode(p, ctx_state, 1.0, max_len, 0, true);
}

SampleOut greedy(const Params& p, std::span<const int> context, int max_len) {
  State s = initial_state(p.arch);
  advance(p, s, context);
  return greedy_from_state(p, s, static_cast<int>(context.size()), max_len);
}

double token_kl(const Params& p, const Params& ref, std::span<const int> context,
                std::span<const int> tokens) {
  if (tokens.empty()) return 0.0;
  State sp = initial_state(p.arch), sr = initial_state(ref.arch);
  advance(p, sp, context);
  advance(ref, sr, context);
  std::vector<double> lp, lq;
  double total = 0.0;
  for (size_t i = 0; i < tokens.size(); ++i) {
    state_logits(p, sp, lp);
    state_logits(ref, sr, lq);
    log_softmax(lp);
    log_softmax(lq);
    double kl = 0.0;
    for (int v = 0; v < p.arch.vocab_size; ++v)
      kl += std::exp(lp[static_cast<size_t>(v)]) *
            (lp[static_cast<size_t>(v)] - lq[static_cast<size_t>(v)]);
    total += kl;
    if (i + 1 < tokens.size()) {
      advance_one(p, sp, tokens[i]);
      advance_one(ref, sr, tokens[i]);
    }
  }
  return total / static_cast<double>(tokens.size());
}

void head_backward(const Params& p, const double* htop, std::span<const double> dlogits,
                   GradientVector& grad, double* dhtop) {
  const int H = p.arch.hidden, V = p.arch.vocab_size;
  ParamLayout lay(p.arch);
  outer_acc(grad.data() + lay.head_w, dlogits.data(), htop, V, H);
  for (int i = 0; i < V; ++i)
    grad[static_cast<size_t>(lay.head_b + i)] += dlogits[static_cast<size_t>(i)];
  matvec_t_acc(p.w.data() + lay.head_w, dlogits.data(), V, H, dhtop);
}

void trace_backward(const Params& p, const Trace& t,
                    std::span<const double> dhead_by_step,
                    std::vector<double>& dkv_state0, GradientVector& grad) {
  const Arch& A = p.arch;
  const int H = A.hidden, D = A.head_dim(), NH = A.heads, M = A.mlp_dim();
  const int base = t.state0.len;
  const int64_t kv_stride = static_cast<int64_t>(A.layers) * 2 * H;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D));
  ParamLayout lay(A);
  CellLayout cl(A);

  // k/v of position j at block l: from the state0 cache for the prefix, from
  // the recorded cells for this trace's own positions.
  auto k_at = [&](int j, int l) -> const double* {
    if (j < base)
      return t.state0.kv.data() + static_cast<int64_t>(j) * kv_stride +
             static_cast<int64_t>(l) * 2 * H;
    return cl.k(t.cells.data() + cl.stride * (j - base), l);
  };
  auto v_at = [&](int j, int l) -> const double* {
    if (j < base)
      return t.state0.kv.data() + static_cast<int64_t>(j) * kv_stride +
             static_cast<int64_t>(l) * 2 * H + H;
    return cl.v(t.cells.data() + cl.stride * (j - base), l);
  };

  // Gradient buffer spanning the whole kv range (prefix plus this trace).
  std::vector<double> dkv(static_cast<size_t>(base + t.steps) * kv_stride, 0.0);
  if (!dkv_state0.empty())
    std::copy(dkv_state0.begin(), dkv_state0.end(), dkv.begin());

  std::vector<double> dy(static_cast<size_t>(H)), dx(static_cast<size_t>(H));
  std::vector<double> dctxv(static_cast<size_t>(H)), dqv(static_cast<size_t>(H));
  std::vector<double> da(static_cast<size_t>(H)), dxm(static_cast<size_t>(H));
  std::vector<double> dbv(static_cast<size_t>(H));
  std::vector<double> du(static_cast<size_t>(M)), ds(static_cast<size_t>(M)),
      sact(static_cast<size_t>(M));
  std::vector<double> dp(static_cast<size_t>(base + t.steps));

  for (int step = t.steps - 1; step >= 0; --step) {
    const double* cells = t.cells.data() + cl.stride * step;
    const int abs_pos = base + step;

    std::fill(dy.begin(), dy.end(), 0.0);
    if (!dhead_by_step.empty()) {
      const double* dn3 = dhead_by_step.data() + static_cast<size_t>(step) * H;
      bool any = false;
      for (int i = 0; i < H; ++i)
        if (dn3[i] != 0.0) {
          any = true;
          break;
        }
      if (any)
        rms_backward(cl.y(cells), *cl.r3(cells), p.w.data() + lay.g3, dn3, H,
                     grad.data() + lay.g3, dy.data());
    }

    const double* probs_step = t.probs.data() + t.probs_off[static_cast<size_t>(step)];
    for (int l = A.layers - 1; l >= 0; --l) {
      const auto B = lay.block(l);
      const double* x_in = cl.x_in(cells, l);
      const double* a = cl.a(cells, l);
      const double* q = cl.q(cells, l);
      const double* ctxv = cl.ctxv(cells, l);
      const double* x_mid = cl.x_mid(cells, l);
      const double* b = cl.b(cells, l);
      const double* u = cl.u(cells, l);
      const double r1 = *cl.r1(cells, l);
      const double r2 = *cl.r2(cells, l);

      // y = x_mid + W2 silu(u), u = W1 b, b = rms2(x_mid) * g2
      for (int i = 0; i < M; ++i) sact[static_cast<size_t>(i)] = silu(u[i]);
      outer_acc(grad.data() + B.w2, dy.data(), sact.data(), H, M);
      std::fill(ds.begin(), ds.end(), 0.0);
      matvec_t_acc(p.w.data() + B.w2, dy.data(), H, M, ds.data());
      for (int i = 0; i < M; ++i)
        du[static_cast<size_t>(i)] = ds[static_cast<size_t>(i)] * silu_prime(u[i]);
      outer_acc(grad.data() + B.w1, du.data(), b, M, H);
      std::fill(dbv.begin(), dbv.end(), 0.0);
      matvec_t_acc(p.w.data() + B.w1, du.data(), M, H, dbv.data());
      std::copy(dy.begin(), dy.end(), dxm.begin());
      rms_backward(x_mid, r2, p.w.data() + B.g2, dbv.data(), H, grad.data() + B.g2,
                   dxm.data());

      // x_mid = x_in + Wo ctxv
      outer_acc(grad.data() + B.wo, dxm.data(), ctxv, H, H);
      std::fill(dctxv.begin(), dctxv.end(), 0.0);
      matvec_t_acc(p.w.data() + B.wo, dxm.data(), H, H, dctxv.data());

      std::fill(dqv.begin(), dqv.end(), 0.0);
      const double* prow = probs_step + static_cast<int64_t>(l) * NH * (abs_pos + 1);
      for (int h = 0; h < NH; ++h) {
        const double* ph = prow + static_cast<int64_t>(h) * (abs_pos + 1);
        const double* dch = dctxv.data() + h * D;
        const double* qh = q + h * D;
        double sum_pdp = 0.0;
        for (int j = 0; j <= abs_pos; ++j) {
          const double* vj = v_at(j, l) + h * D;
          double* dvj = dkv.data() + static_cast<int64_t>(j) * kv_stride +
                        static_cast<int64_t>(l) * 2 * H + H + h * D;
          double d = 0.0;
          for (int dd = 0; dd < D; ++dd) {
            d += dch[dd] * vj[dd];
            dvj[dd] += ph[j] * dch[dd];
          }
          dp[static_cast<size_t>(j)] = d;
          sum_pdp += ph[j] * d;
        }
        double* dqh = dqv.data() + h * D;
        for (int j = 0; j <= abs_pos; ++j) {
          const double dscore = ph[j] * (dp[static_cast<size_t>(j)] - sum_pdp) * inv_sqrt_d;
          if (dscore == 0.0) continue;
          const double* kj = k_at(j, l) + h * D;
          double* dkj = dkv.data() + static_cast<int64_t>(j) * kv_stride +
                        static_cast<int64_t>(l) * 2 * H + h * D;
          for (int dd = 0; dd < D; ++dd) {
            dqh[dd] += dscore * kj[dd];
            dkj[dd] += dscore * qh[dd];
          }
        }
      }

      // projections; this position's own k/v gradients are complete by now
      const double* dk_self = dkv.data() + static_cast<int64_t>(abs_pos) * kv_stride +
                              static_cast<int64_t>(l) * 2 * H;
      const double* dv_self = dk_self + H;
      std::fill(da.begin(), da.end(), 0.0);
      outer_acc(grad.data() + B.wq, dqv.data(), a, H, H);
      matvec_t_acc(p.w.data() + B.wq, dqv.data(), H, H, da.data());
      outer_acc(grad.data() + B.wk, dk_self, a, H, H);
      matvec_t_acc(p.w.data() + B.wk, dk_self, H, H, da.data());
      outer_acc(grad.data() + B.wv, dv_self, a, H, H);
      matvec_t_acc(p.w.data() + B.wv, dv_self, H, H, da.data());

      std::copy(dxm.begin(), dxm.end(), dx.begin());
      rms_backward(x_in, r1, p.w.data() + B.g1, da.data(), H, grad.data() + B.g1,
                   dx.data());
      std::copy(dx.begin(), dx.end(), dy.begin());
    }

    double* demb =
        grad.data() + lay.emb + static_cast<int64_t>(t.inputs[static_cast<size_t>(step)]) * H;
    double* dpos = grad.data() + lay.pos + static_cast<int64_t>(abs_pos) * H;
    for (int i = 0; i < H; ++i) {
      demb[i] += dy[static_cast<size_t>(i)];
      dpos[i] += dy[static_cast<size_t>(i)];
    }
  }

  dkv_state0.assign(dkv.begin(), dkv.begin() + static_cast<int64_t>(base) * kv_stride);
}

bool apply_update(Params& p, const GradientVector& grad, AdamState& opt,
                  const OptConfig& cfg) {
  const size_t n = p.w.size();
  if (grad.size() != n) throw std::invalid_argument("apply_update: size mismatch");
  for (double g : grad)
    if (!std::isfinite(g)) return false;
  if (opt.m.size() != n) {
    opt.m.assign(n, 0.0);
    opt.v.assign(n, 0.0);
    opt.t = 0;
  }
  opt.t += 1;
  double lr = cfg.lr;
  if (cfg.warmup_steps > 0 && opt.t < cfg.warmup_steps)
    lr *= static_cast<double>(opt.t) / cfg.warmup_steps;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.t));
  for (size_t i = 0; i < n; ++i) {
    opt.m[i] = cfg.beta1 * opt.m[i] + (1.0 - cfg.beta1) * grad[i];
    opt.v[i] = cfg.beta2 * opt.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    double mhat = opt.m[i] / bc1;
    double vhat = opt.v[i] / bc2;
    p.w[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p.w[i]);
  }
  return true;
}

}  // namespace iop
