#ifndef IOP_ALIGNMENT_HPP
#define IOP_ALIGNMENT_HPP

#include <span>
#include <string>
#include <vector>

namespace iop {

// One step of the canonical Levenshtein edit path between a failed sequence
// (error side) and its repair (repair side).
//
//   Substitute: err_pos is the replaced error-side index, rep_pos the
//               replacement's repair-side index.
//   Delete:     err_pos is the removed error-side index; rep_pos is the
//               repair-side insertion point the path had reached.
//   Insert:     rep_pos is the inserted repair-side index; err_pos is the
//               error-side anchor (the insert lands before err_pos).
struct EditOp {
  enum class Kind { Substitute, Delete, Insert };
  Kind kind;
  int err_pos;
  int rep_pos;
};

// Edit path plus bilateral difference masks.
//   err_mask marks substituted/deleted positions of the error side,
//   rep_mask marks substituted/inserted positions of the repair side,
//   distance is the Levenshtein distance (= ops.size()),
//   normalized is distance / max(|y|, |repair|, 1).
struct Alignment {
  std::vector<EditOp> ops;  // in nondecreasing path order
  std::vector<int> err_mask;
  std::vector<int> rep_mask;
  int distance = 0;
  double normalized = 0.0;
};

// First-K truncation of an alignment. Masks cover only the earliest
// min(K, distance) ops; err_frontier is the largest error-side index the
// covered ops touch (-1 when no op is covered).
struct TruncatedGate {
  std::vector<int> err_mask;
  std::vector<int> rep_mask;
  int ops_covered = 0;
  int err_frontier = -1;
};

// Sentinel for "no truncation".
inline constexpr int kNoTruncation = 1 << 30;

// Full dynamic program with traceback. Ties break substitute > delete >
// insert, which lands every op at its leftmost possible position and makes
// the path canonical.
Alignment align(std::span<const int> y, std::span<const int> repair);

TruncatedGate truncate_gate(const Alignment& a, int k);

double normalized_edit_distance(std::span<const int> y, std::span<const int> repair);

// Apply the whole edit path to y; reproduces the repair token-for-token.
std::vector<int> apply_edits(std::span<const int> y, std::span<const int> repair,
                             const Alignment& a);

// Apply only the first min(k, distance) ops, emitting matched tokens in
// between, and stop right after the last applied op. This is the grafting
// prefix: everything past the edit frontier is left for the policy to
// regenerate.
std::vector<int> edited_prefix(std::span<const int> y, std::span<const int> repair,
                               const Alignment& a, int k);

// Two-row text diff with op markers, used by the align-debug command.
std::string render_alignment(std::span<const int> y, std::span<const int> repair,
                             const Alignment& a, int k = kNoTruncation);

}  // namespace iop

#endif  // IOP_ALIGNMENT_HPP
