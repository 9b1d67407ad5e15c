#include "iop/task_env.hpp"

#include <fstream>
#include <stdexcept>

#include "iop/rng.hpp"
#include "json.hpp"

namespace iop {

const Vocab& vocab() {
  static const Vocab v{};
  return v;
}

std::string Vocab::token_name(int tok) const {
  if (tok == bos) return "BOS";
  if (tok == eos) return "EOS";
  if (tok == sep) return "SEP";
  if (tok == step) return "=";
  if (tok == ans) return "ANS";
  if (tok == repair_instr) return "FIX";
  if (tok == plus) return "+";
  if (tok == times) return "*";
  if (is_digit(tok)) return std::to_string(digit_value(tok));
  return "?" + std::to_string(tok);
}

Problem generate_problem(uint64_t seed, int chain_len) {
  if (chain_len < 1) throw std::invalid_argument("generate_problem: chain_len must be >= 1");
  const Vocab& v = vocab();
  Rng rng(derive_seed(seed, kSeedProblem, static_cast<uint64_t>(chain_len)));

  Problem p;
  p.chain_len = chain_len;
  p.values.push_back(static_cast<int>(rng.next_below(10)));
  p.prompt.push_back(v.bos);
  p.prompt.push_back(v.digit(p.values[0]));
  for (int k = 1; k <= chain_len; ++k) {
    ChainOp op;
    op.is_mul = rng.next_below(2) == 1;
    op.operand = static_cast<int>(rng.next_below(10));
    p.ops.push_back(op);
    int prev = p.values.back();
    int next = op.is_mul ? (prev * op.operand) % 10 : (prev + op.operand) % 10;
    p.values.push_back(next);
    p.prompt.push_back(op.is_mul ? v.times : v.plus);
    p.prompt.push_back(v.digit(op.operand));
  }
  p.prompt.push_back(v.sep);
  return p;
}

bool parse_prompt(std::span<const int> prompt, int* start, std::vector<ChainOp>* ops) {
  const Vocab& v = vocab();
  if (prompt.size() < 4 || prompt.size() % 2 != 1) return false;
  if (prompt.front() != v.bos || prompt.back() != v.sep) return false;
  if (!v.is_digit(prompt[1])) return false;
  *start = v.digit_value(prompt[1]);
  ops->clear();
  for (size_t i = 2; i + 1 < prompt.size(); i += 2) {
    if (prompt[i] != v.plus && prompt[i] != v.times) return false;
    if (!v.is_digit(prompt[i + 1])) return false;
    ops->push_back({prompt[i] == v.times, v.digit_value(prompt[i + 1])});
  }
  return !ops->empty();
}

Trajectory render_solution(const Problem& p) {
  const Vocab& v = vocab();
  Trajectory t;
  for (int k = 1; k <= p.chain_len; ++k) {
    t.tokens.push_back(v.step);
    t.tokens.push_back(v.digit(p.values[k]));
  }
  t.tokens.push_back(v.ans);
  t.tokens.push_back(v.digit(p.answer()));
  t.tokens.push_back(v.eos);
  t.logprobs.assign(t.tokens.size(), 0.0);
  t.reward = 1;
  return t;
}

int verify(const Problem& p, std::span<const int> tokens) {
  const Vocab& v = vocab();
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == v.eos) return 0;
    if (tokens[i] == v.ans) {
      if (i + 1 >= tokens.size() || !v.is_digit(tokens[i + 1])) return 0;
      return v.digit_value(tokens[i + 1]) == p.answer() ? 1 : 0;
    }
  }
  return 0;
}

namespace {

int apply_op(int value, const ChainOp& op) {
  return op.is_mul ? (value * op.operand) % 10 : (value + op.operand) % 10;
}

// Rebuild trajectory tokens from explicit step values and an answer digit.
std::vector<int> render_tokens(const std::vector<int>& step_values, int answer) {
  const Vocab& v = vocab();
  std::vector<int> tokens;
  for (int value : step_values) {
    tokens.push_back(v.step);
    tokens.push_back(v.digit(value));
  }
  tokens.push_back(v.ans);
  tokens.push_back(v.digit(answer));
  tokens.push_back(v.eos);
  return tokens;
}

}  // namespace

Trajectory corrupt(const Problem& p, const Trajectory& t, uint64_t seed) {
  if (verify(p, t.tokens) != 1) throw std::invalid_argument("corrupt: input must verify");
  Rng rng(derive_seed(seed, kSeedCorrupt));
  const int L = p.chain_len;

  auto make = [&](const std::vector<int>& steps, int answer) {
    Trajectory out;
    out.tokens = render_tokens(steps, answer);
    out.logprobs.assign(out.tokens.size(), 0.0);
    out.reward = 0;
    return out;
  };

  std::vector<int> true_steps(p.values.begin() + 1, p.values.end());

  if (L > 1) {
    // Try intermediate sites in seeded order; a site only works when the
    // altered value still changes the final answer after propagation
    // (multiplicative ops mod 10 can absorb the difference).
    int site0 = static_cast<int>(rng.next_below(static_cast<uint64_t>(L - 1)));  // 0-based, steps 1..L-1
    int delta0 = 1 + static_cast<int>(rng.next_below(9));
    for (int s = 0; s < L - 1; ++s) {
      for (int d = 0; d < 9; ++d) {
        int site = (site0 + s) % (L - 1);           // corrupt v_{site+1}
        int delta = 1 + (delta0 - 1 + d) % 9;
        std::vector<int> steps = true_steps;
        steps[site] = (steps[site] + delta) % 10;
        for (int k = site + 1; k < L; ++k) steps[k] = apply_op(steps[k - 1], p.ops[k]);
        if (steps[L - 1] != p.answer()) return make(steps, steps[L - 1]);
      }
    }
  }
  // Fallback: flip the answer digit, steps untouched.
  int delta = 1 + static_cast<int>(rng.next_below(9));
  return make(true_steps, (p.answer() + delta) % 10);
}

int rule_audit(const Problem& p, std::span<const int> /*failed*/,
               std::span<const int> candidate, std::span<const int> /*reference*/) {
  const Vocab& v = vocab();
  // Grammar: (STEP digit)^L ANS digit EOS, nothing after EOS.
  const size_t want = 2 * static_cast<size_t>(p.chain_len) + 3;
  if (candidate.size() != want) return 0;
  for (int k = 0; k < p.chain_len; ++k) {
    if (candidate[2 * k] != v.step) return 0;
    if (!v.is_digit(candidate[2 * k + 1])) return 0;
    if (v.digit_value(candidate[2 * k + 1]) != p.values[k + 1]) return 0;
  }
  size_t i = 2 * static_cast<size_t>(p.chain_len);
  if (candidate[i] != v.ans) return 0;
  if (!v.is_digit(candidate[i + 1])) return 0;
  if (candidate[i + 2] != v.eos) return 0;
  return 1;
}

int always_pass_audit(const Problem&, std::span<const int>, std::span<const int>,
                      std::span<const int>) {
  return 1;
}

std::vector<int> build_repair_context(const Problem& p, std::span<const int> failed,
                                      std::span<const int> reference) {
  const Vocab& v = vocab();
  std::vector<int> ctx;
  ctx.reserve(3 + p.prompt.size() + failed.size() + reference.size());
  ctx.push_back(v.bos);
  ctx.push_back(v.repair_instr);
  ctx.insert(ctx.end(), p.prompt.begin() + 1, p.prompt.end());
  ctx.insert(ctx.end(), failed.begin(), failed.end());
  ctx.push_back(v.sep);
  ctx.insert(ctx.end(), reference.begin(), reference.end());
  ctx.push_back(v.sep);
  return ctx;
}

std::vector<ColdStartExample> gen_coldstart(uint64_t seed, int n, int chain_min,
                                            int chain_max) {
  if (n < 1) throw std::invalid_argument("gen_coldstart: n must be >= 1");
  if (chain_min < 1 || chain_max < chain_min)
    throw std::invalid_argument("gen_coldstart: bad chain length range");
  const Vocab& v = vocab();
  std::vector<ColdStartExample> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    uint64_t s = derive_seed(seed, kSeedColdstart, static_cast<uint64_t>(i));
    Rng rng(s);
    int len = chain_min + static_cast<int>(rng.next_below(
                              static_cast<uint64_t>(chain_max - chain_min + 1)));
    ColdStartExample ex;
    ex.problem = generate_problem(mix64(s), len);
    Trajectory sol = render_solution(ex.problem);
    if (rng.next_below(2) == 0) {
      // Single-site corruption propagated through the chain.
      ex.failed = corrupt(ex.problem, sol, mix64(s ^ 0x5bd1e995)).tokens;
    } else {
      // Scattered digit noise with a wrong answer, the way sampled failures
      // usually look.
      ex.failed = sol.tokens;
      int flips = 1 + static_cast<int>(rng.next_below(3));
      for (int f = 0; f < flips && len > 0; ++f) {
        int site = static_cast<int>(rng.next_below(static_cast<uint64_t>(len)));
        int& tok = ex.failed[static_cast<size_t>(2 * site + 1)];
        tok = v.digit((v.digit_value(tok) + 1 + static_cast<int>(rng.next_below(9))) % 10);
      }
      int& ans_tok = ex.failed[ex.failed.size() - 2];
      ans_tok = v.digit((v.digit_value(ans_tok) + 1 + static_cast<int>(rng.next_below(9))) % 10);
    }
    ex.reference = sol.tokens;
    // Most references keep the right answer but carry junk intermediate
    // steps, the way a sampled reference anchor usually looks: the repair
    // mode must learn to recompute the chain rather than copy the anchor.
    if (len > 1 && rng.next_below(10) < 4) {
      int flips = 1 + static_cast<int>(rng.next_below(2));
      for (int f = 0; f < flips; ++f) {
        int site = static_cast<int>(rng.next_below(static_cast<uint64_t>(len - 1)));
        int delta = 1 + static_cast<int>(rng.next_below(9));
        int& tok = ex.reference[static_cast<size_t>(2 * site + 1)];
        tok = v.digit((v.digit_value(tok) + delta) % 10);
      }
    }
    ex.target = sol.tokens;
    out.push_back(std::move(ex));
  }
  return out;
}

void write_coldstart_jsonl(const std::string& path,
                           const std::vector<ColdStartExample>& data) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  for (const auto& ex : data) {
    nlohmann::ordered_json j;
    j["x"] = ex.problem.prompt;
    j["y"] = ex.failed;
    j["a"] = ex.reference;
    j["y_star"] = ex.target;
    f << j.dump() << "\n";
  }
}

std::vector<ColdStartExample> read_coldstart_jsonl(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for read: " + path);
  std::vector<ColdStartExample> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    ColdStartExample ex;
    std::vector<int> prompt = j.at("x").get<std::vector<int>>();
    int start = 0;
    std::vector<ChainOp> ops;
    if (!parse_prompt(prompt, &start, &ops))
      throw std::runtime_error("coldstart line has an unparseable prompt");
    ex.problem.prompt = std::move(prompt);
    ex.problem.chain_len = static_cast<int>(ops.size());
    ex.problem.values.push_back(start);
    for (const auto& op : ops) {
      int prev = ex.problem.values.back();
      ex.problem.values.push_back(op.is_mul ? (prev * op.operand) % 10
                                            : (prev + op.operand) % 10);
    }
    ex.problem.ops = std::move(ops);
    ex.failed = j.at("y").get<std::vector<int>>();
    ex.reference = j.at("a").get<std::vector<int>>();
    ex.target = j.at("y_star").get<std::vector<int>>();
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace iop
