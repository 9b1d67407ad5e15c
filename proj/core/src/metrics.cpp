#include "iop/metrics.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace iop {

namespace {

template <typename F>
void for_each_metric(MetricsRecord& r, F&& f) {
  f("step", r.step);
  f("tokens_total", r.tokens_total);
  f("tokens_policy", r.tokens_policy);
  f("tokens_repair", r.tokens_repair);
  f("tokens_graft", r.tokens_graft);
  f("repair_success", r.repair_success);
  f("active_token_ratio", r.active_token_ratio);
  f("pairs", r.pairs);
  f("repair_groups", r.repair_groups);
  f("deferred", r.deferred);
  f("skipped", r.skipped);
  f("kstar_k", r.kstar_k);
  f("kstar_2k", r.kstar_2k);
  f("kstar_full", r.kstar_full);
  f("hacked_admitted", r.hacked_admitted);
  f("objective", r.objective);
  f("obj_policy", r.obj_policy);
  f("obj_repair", r.obj_repair);
  f("kl_policy", r.kl_policy);
  f("kl_repair", r.kl_repair);
  f("eval_acc", r.eval_acc);
  f("evaluated", r.evaluated);
}

}  // namespace

std::string metrics_jsonl_line(const MetricsRecord& r) {
  nlohmann::ordered_json j;
  for_each_metric(const_cast<MetricsRecord&>(r),
                  [&](const char* key, auto& field) { j[key] = field; });
  return j.dump();
}

MetricsRecord metrics_from_jsonl_line(const std::string& line) {
  auto j = nlohmann::json::parse(line);
  MetricsRecord r;
  for_each_metric(r, [&](const char* key, auto& field) {
    field = j.at(key).template get<std::decay_t<decltype(field)>>();
  });
  return r;
}

void write_metrics_jsonl(const std::string& path, const std::vector<MetricsRecord>& recs) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  for (const auto& r : recs) f << metrics_jsonl_line(r) << "\n";
}

std::vector<MetricsRecord> read_metrics_jsonl(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for read: " + path);
  std::vector<MetricsRecord> out;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) out.push_back(metrics_from_jsonl_line(line));
  return out;
}

void write_summary_csv(const std::string& path, const std::vector<MetricsRecord>& recs) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << "step,accuracy,repair_success,active_token_ratio,tokens\n";
  f << std::setprecision(17);
  for (const auto& r : recs)
    f << r.step << "," << r.eval_acc << "," << r.repair_success << ","
      << r.active_token_ratio << "," << r.tokens_total << "\n";
}

}  // namespace iop
