#include "doctest.h"
#include "iop/alignment.hpp"
#include "iop/rng.hpp"

using namespace iop;

namespace {

// Independent distance-only oracle: classic full DP, no traceback.
int dp_distance(std::span<const int> a, std::span<const int> b) {
  std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
  for (size_t j = 0; j <= b.size(); ++j) prev[j] = static_cast<int>(j);
  for (size_t i = 1; i <= a.size(); ++i) {
    cur[0] = static_cast<int>(i);
    for (size_t j = 1; j <= b.size(); ++j) {
      int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::vector<int> random_seq(Rng& rng, int max_len, int vocab) {
  std::vector<int> s(rng.next_below(static_cast<uint64_t>(max_len) + 1));
  for (auto& t : s) t = static_cast<int>(rng.next_below(static_cast<uint64_t>(vocab)));
  return s;
}

}  // namespace

TEST_CASE("align basics") {
  SUBCASE("single substitution") {
    Alignment a = align(std::vector<int>{1, 2, 3}, std::vector<int>{1, 5, 3});
    CHECK(a.distance == 1);
    CHECK(a.err_mask == std::vector<int>{0, 1, 0});
    CHECK(a.rep_mask == std::vector<int>{0, 1, 0});
    REQUIRE(a.ops.size() == 1);
    CHECK(a.ops[0].kind == EditOp::Kind::Substitute);
  }
  SUBCASE("identity") {
    Alignment a = align(std::vector<int>{4, 4, 2}, std::vector<int>{4, 4, 2});
    CHECK(a.distance == 0);
    CHECK(a.normalized == 0.0);
    CHECK(a.ops.empty());
    for (int m : a.err_mask) CHECK(m == 0);
  }
  SUBCASE("single insertion") {
    Alignment a = align(std::vector<int>{1, 3}, std::vector<int>{1, 2, 3});
    CHECK(a.distance == 1);
    CHECK(a.err_mask == std::vector<int>{0, 0});
    CHECK(a.rep_mask == std::vector<int>{0, 1, 0});
  }
  SUBCASE("empty versus non-empty") {
    Alignment a = align(std::vector<int>{}, std::vector<int>{7, 7, 7, 7, 7});
    CHECK(a.distance == 5);
    CHECK(a.normalized == 1.0);
  }
  SUBCASE("both empty") {
    Alignment a = align(std::vector<int>{}, std::vector<int>{});
    CHECK(a.distance == 0);
    CHECK(a.normalized == 0.0);
  }
}

TEST_CASE("alignment matches the DP oracle and reconstructs exactly") {
  Rng rng(2024);
  for (int it = 0; it < 1000; ++it) {
    auto y = random_seq(rng, 12, 8);
    auto r = random_seq(rng, 12, 8);
    Alignment a = align(y, r);
    CHECK(a.distance == dp_distance(y, r));
    CHECK(static_cast<int>(a.ops.size()) == a.distance);
    CHECK(apply_edits(y, r, a) == r);

    int subs = 0, dels = 0, ins = 0;
    for (const auto& op : a.ops) {
      if (op.kind == EditOp::Kind::Substitute) ++subs;
      if (op.kind == EditOp::Kind::Delete) ++dels;
      if (op.kind == EditOp::Kind::Insert) ++ins;
    }
    int msum = 0, rsum = 0;
    for (int m : a.err_mask) msum += m;
    for (int m : a.rep_mask) rsum += m;
    CHECK(msum == subs + dels);
    CHECK(rsum == subs + ins);
  }
}

TEST_CASE("distance is symmetric and deterministic") {
  Rng rng(7);
  for (int it = 0; it < 300; ++it) {
    auto y = random_seq(rng, 10, 6);
    auto r = random_seq(rng, 10, 6);
    Alignment a = align(y, r);
    Alignment b = align(r, y);
    CHECK(a.distance == b.distance);
    Alignment a2 = align(y, r);
    CHECK(a2.ops.size() == a.ops.size());
    for (size_t i = 0; i < a.ops.size(); ++i) {
      CHECK(a2.ops[i].kind == a.ops[i].kind);
      CHECK(a2.ops[i].err_pos == a.ops[i].err_pos);
      CHECK(a2.ops[i].rep_pos == a.ops[i].rep_pos);
    }
  }
}

TEST_CASE("tie-break lands ops leftmost") {
  // Deleting from a run of equal tokens: the leftmost copy is removed.
  Alignment a = align(std::vector<int>{5, 5, 5}, std::vector<int>{5, 5});
  REQUIRE(a.ops.size() == 1);
  CHECK(a.ops[0].kind == EditOp::Kind::Delete);
  CHECK(a.ops[0].err_pos == 0);

  Alignment b = align(std::vector<int>{5, 5}, std::vector<int>{5, 5, 5});
  REQUIRE(b.ops.size() == 1);
  CHECK(b.ops[0].kind == EditOp::Kind::Insert);
  CHECK(b.ops[0].rep_pos == 0);
}

TEST_CASE("truncate_gate") {
  std::vector<int> y = {1, 2, 3, 4, 5, 6};
  std::vector<int> r = {9, 8, 3, 7, 5, 0};  // subs at 0,1,3,5
  Alignment a = align(y, r);
  REQUIRE(a.distance == 4);

  SUBCASE("first K ops only") {
    TruncatedGate g = truncate_gate(a, 2);
    CHECK(g.ops_covered == 2);
    CHECK(g.err_mask == std::vector<int>{1, 1, 0, 0, 0, 0});
    CHECK(g.rep_mask == std::vector<int>{1, 1, 0, 0, 0, 0});
    CHECK(g.err_frontier == 1);
  }
  SUBCASE("K beyond distance reproduces full masks") {
    TruncatedGate g = truncate_gate(a, 99);
    CHECK(g.ops_covered == 4);
    CHECK(g.err_mask == a.err_mask);
    CHECK(g.rep_mask == a.rep_mask);
  }
  SUBCASE("monotone coverage in K") {
    int prev = 0;
    for (int k = 1; k <= 6; ++k) {
      TruncatedGate g = truncate_gate(a, k);
      int n = 0;
      for (int m : g.err_mask) n += m;
      CHECK(n >= prev);
      CHECK(g.ops_covered <= a.distance);
      prev = n;
    }
  }
  SUBCASE("zero-distance alignment yields empty gates and sentinel frontier") {
    Alignment id = align(y, y);
    TruncatedGate g = truncate_gate(id, 3);
    CHECK(g.ops_covered == 0);
    CHECK(g.err_frontier == -1);
    for (int m : g.err_mask) CHECK(m == 0);
  }
}

TEST_CASE("normalized_edit_distance") {
  CHECK(normalized_edit_distance(std::vector<int>{1, 2, 3}, std::vector<int>{1, 5, 3}) ==
        doctest::Approx(1.0 / 3.0));
  CHECK(normalized_edit_distance(std::vector<int>{2, 2}, std::vector<int>{2, 2}) == 0.0);
  CHECK(normalized_edit_distance(std::vector<int>{}, std::vector<int>{1, 2, 3, 4, 5}) == 1.0);
}

TEST_CASE("edited_prefix stops at the k-th op") {
  std::vector<int> y = {1, 2, 3, 4, 5, 6};
  std::vector<int> r = {1, 9, 3, 4, 8, 6};  // subs at 1 and 4
  Alignment a = align(y, r);
  REQUIRE(a.distance == 2);
  CHECK(edited_prefix(y, r, a, 1) == std::vector<int>{1, 9});
  CHECK(edited_prefix(y, r, a, 2) == std::vector<int>{1, 9, 3, 4, 8});
  CHECK(edited_prefix(y, r, a, 99) == std::vector<int>{1, 9, 3, 4, 8});
}

TEST_CASE("render_alignment mentions edit count") {
  auto text = render_alignment(std::vector<int>{1, 2}, std::vector<int>{1, 3},
                               align(std::vector<int>{1, 2}, std::vector<int>{1, 3}));
  CHECK(text.find("edits=1") != std::string::npos);
}
