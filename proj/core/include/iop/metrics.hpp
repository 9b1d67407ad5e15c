#ifndef IOP_METRICS_HPP
#define IOP_METRICS_HPP

#include <cstdint>
#include <string>
#include <vector>

namespace iop {

// One training-step record. Serialized to JSONL with a fixed field order so
// identical runs produce byte-identical files.
struct MetricsRecord {
  int step = 0;
  int64_t tokens_total = 0;
  int64_t tokens_policy = 0;
  int64_t tokens_repair = 0;
  int64_t tokens_graft = 0;
  double repair_success = 0.0;      // fraction of failed trajectories repaired this step
  double active_token_ratio = 0.0;  // mean gate density over pair members
  int pairs = 0;
  int repair_groups = 0;
  int deferred = 0;
  int skipped = 0;
  int kstar_k = 0;
  int kstar_2k = 0;
  int kstar_full = 0;
  int hacked_admitted = 0;  // admitted pairs that fail the rule auditor
  double objective = 0.0;
  double obj_policy = 0.0;
  double obj_repair = 0.0;
  double kl_policy = 0.0;
  double kl_repair = 0.0;
  double eval_acc = 0.0;  // last completed evaluation (carried forward)
  bool evaluated = false;
};

std::string metrics_jsonl_line(const MetricsRecord& r);
MetricsRecord metrics_from_jsonl_line(const std::string& line);

void write_metrics_jsonl(const std::string& path, const std::vector<MetricsRecord>& recs);
std::vector<MetricsRecord> read_metrics_jsonl(const std::string& path);

// Columns: step,accuracy,repair_success,active_token_ratio,tokens
void write_summary_csv(const std::string& path, const std::vector<MetricsRecord>& recs);

}  // namespace iop

#endif  // IOP_METRICS_HPP
