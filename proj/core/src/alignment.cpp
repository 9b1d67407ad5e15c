#include "iop/alignment.hpp"

#include <algorithm>
#include <sstream>

#include "iop/vocab.hpp"

namespace iop {

Alignment align(std::span<const int> y, std::span<const int> repair) {
  const int n = static_cast<int>(y.size());
  const int m = static_cast<int>(repair.size());

  // D is (n+1) x (m+1), row-major.
  std::vector<int> dp(static_cast<size_t>(n + 1) * (m + 1));
  auto at = [&](int i, int j) -> int& { return dp[static_cast<size_t>(i) * (m + 1) + j]; };
  for (int i = 0; i <= n; ++i) at(i, 0) = i;
  for (int j = 0; j <= m; ++j) at(0, j) = j;
  for (int i = 1; i <= n; ++i) {
    for (int j = 1; j <= m; ++j) {
      int sub = at(i - 1, j - 1) + (y[i - 1] == repair[j - 1] ? 0 : 1);
      int del = at(i - 1, j) + 1;
      int ins = at(i, j - 1) + 1;
      at(i, j) = std::min({sub, del, ins});
    }
  }

  Alignment a;
  a.distance = at(n, m);
  a.err_mask.assign(static_cast<size_t>(n), 0);
  a.rep_mask.assign(static_cast<size_t>(m), 0);

  // Traceback, preferring diagonal over delete over insert.
  int i = n, j = m;
  std::vector<EditOp> rev;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      int cost = (y[i - 1] == repair[j - 1]) ? 0 : 1;
      if (at(i, j) == at(i - 1, j - 1) + cost) {
        if (cost == 1) rev.push_back({EditOp::Kind::Substitute, i - 1, j - 1});
        --i;
        --j;
        continue;
      }
    }
    if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      rev.push_back({EditOp::Kind::Delete, i - 1, j});
      --i;
      continue;
    }
    rev.push_back({EditOp::Kind::Insert, i, j - 1});
    --j;
  }
  a.ops.assign(rev.rbegin(), rev.rend());

  for (const auto& op : a.ops) {
    switch (op.kind) {
      case EditOp::Kind::Substitute:
        a.err_mask[static_cast<size_t>(op.err_pos)] = 1;
        a.rep_mask[static_cast<size_t>(op.rep_pos)] = 1;
        break;
      case EditOp::Kind::Delete:
        a.err_mask[static_cast<size_t>(op.err_pos)] = 1;
        break;
      case EditOp::Kind::Insert:
        a.rep_mask[static_cast<size_t>(op.rep_pos)] = 1;
        break;
    }
  }
  int denom = std::max({n, m, 1});
  a.normalized = static_cast<double>(a.distance) / denom;
  return a;
}

TruncatedGate truncate_gate(const Alignment& a, int k) {
  TruncatedGate g;
  g.err_mask.assign(a.err_mask.size(), 0);
  g.rep_mask.assign(a.rep_mask.size(), 0);
  g.ops_covered = std::min<int>(k, static_cast<int>(a.ops.size()));
  for (int idx = 0; idx < g.ops_covered; ++idx) {
    const EditOp& op = a.ops[static_cast<size_t>(idx)];
    switch (op.kind) {
      case EditOp::Kind::Substitute:
        g.err_mask[static_cast<size_t>(op.err_pos)] = 1;
        g.rep_mask[static_cast<size_t>(op.rep_pos)] = 1;
        g.err_frontier = std::max(g.err_frontier, op.err_pos);
        break;
      case EditOp::Kind::Delete:
        g.err_mask[static_cast<size_t>(op.err_pos)] = 1;
        g.err_frontier = std::max(g.err_frontier, op.err_pos);
        break;
      case EditOp::Kind::Insert:
        g.rep_mask[static_cast<size_t>(op.rep_pos)] = 1;
        g.err_frontier = std::max(g.err_frontier, op.err_pos);
        break;
    }
  }
  return g;
}

double normalized_edit_distance(std::span<const int> y, std::span<const int> repair) {
  return align(y, repair).normalized;
}

namespace {

// Shared walker: apply the first k ops; when with_tail, also append the
// unedited remainder of y.
std::vector<int> walk(std::span<const int> y, std::span<const int> repair,
                      const Alignment& a, int k, bool with_tail) {
  std::vector<int> out;
  out.reserve(repair.size() + 2);
  int cursor = 0;  // next unconsumed error-side index
  int applied = 0;
  for (const auto& op : a.ops) {
    if (applied >= k) break;
    switch (op.kind) {
      case EditOp::Kind::Substitute:
        for (; cursor < op.err_pos; ++cursor) out.push_back(y[static_cast<size_t>(cursor)]);
        out.push_back(repair[static_cast<size_t>(op.rep_pos)]);
        ++cursor;
        break;
      case EditOp::Kind::Delete:
        for (; cursor < op.err_pos; ++cursor) out.push_back(y[static_cast<size_t>(cursor)]);
        ++cursor;  // consume without emitting
        break;
      case EditOp::Kind::Insert:
        for (; cursor < op.err_pos; ++cursor) out.push_back(y[static_cast<size_t>(cursor)]);
        out.push_back(repair[static_cast<size_t>(op.rep_pos)]);
        break;
    }
    ++applied;
  }
  if (with_tail) {
    for (; cursor < static_cast<int>(y.size()); ++cursor)
      out.push_back(y[static_cast<size_t>(cursor)]);
  }
  return out;
}

}  // namespace

std::vector<int> apply_edits(std::span<const int> y, std::span<const int> repair,
                             const Alignment& a) {
  return walk(y, repair, a, static_cast<int>(a.ops.size()), true);
}

std::vector<int> edited_prefix(std::span<const int> y, std::span<const int> repair,
                               const Alignment& a, int k) {
  return walk(y, repair, a, k, false);
}

std::string render_alignment(std::span<const int> y, std::span<const int> repair,
                             const Alignment& a, int k) {
  const Vocab& v = vocab();
  TruncatedGate g = truncate_gate(a, k);

  // Walk the path emitting aligned columns: (err token | marker | rep token).
  std::vector<std::string> err_row, mark_row, rep_row;
  size_t oi = 0;
  int i = 0, j = 0;
  auto push = [&](const std::string& e, const std::string& mk, const std::string& r) {
    err_row.push_back(e);
    mark_row.push_back(mk);
    rep_row.push_back(r);
  };
  while (i < static_cast<int>(y.size()) || j < static_cast<int>(repair.size()) ||
         oi < a.ops.size()) {
    if (oi < a.ops.size()) {
      const EditOp& op = a.ops[oi];
      bool due = (op.kind == EditOp::Kind::Insert) ? (op.err_pos == i && op.rep_pos == j)
                                                   : (op.err_pos == i);
      if (due) {
        bool active = static_cast<int>(oi) < g.ops_covered;
        std::string mk = active ? "" : "(";
        switch (op.kind) {
          case EditOp::Kind::Substitute:
            push(v.token_name(y[static_cast<size_t>(i)]), active ? "^" : "(^)",
                 v.token_name(repair[static_cast<size_t>(j)]));
            ++i;
            ++j;
            break;
          case EditOp::Kind::Delete:
            push(v.token_name(y[static_cast<size_t>(i)]), active ? "-" : "(-)", ".");
            ++i;
            break;
          case EditOp::Kind::Insert:
            push(".", active ? "+" : "(+)", v.token_name(repair[static_cast<size_t>(j)]));
            ++j;
            break;
        }
        ++oi;
        continue;
      }
    }
    // Matched column.
    push(v.token_name(y[static_cast<size_t>(i)]), " ",
         v.token_name(repair[static_cast<size_t>(j)]));
    ++i;
    ++j;
  }

  auto fmt_row = [&](const std::vector<std::string>& row) {
    std::ostringstream os;
    for (size_t c = 0; c < row.size(); ++c) {
      size_t w = std::max({err_row[c].size(), mark_row[c].size(), rep_row[c].size()});
      os << row[c] << std::string(w - row[c].size() + 1, ' ');
    }
    return os.str();
  };

  std::ostringstream os;
  os << "err: " << fmt_row(err_row) << "\n";
  os << "op : " << fmt_row(mark_row) << "\n";
  os << "rep: " << fmt_row(rep_row) << "\n";
  os << "edits=" << a.distance << " normalized=" << a.normalized;
  if (k != kNoTruncation) os << " covered@K=" << g.ops_covered;
  os << "\n";
  os << "err_mask: ";
  for (int b : (k == kNoTruncation ? a.err_mask : g.err_mask)) os << b;
  os << "\nrep_mask: ";
  for (int b : (k == kNoTruncation ? a.rep_mask : g.rep_mask)) os << b;
  os << "\n";
  return os.str();
}

}  // namespace iop
