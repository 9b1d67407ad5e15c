#include "iop/config.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

namespace iop {

namespace {

using nlohmann::json;

// One row per field keeps parsing, serialization and unknown-key rejection in
// a single place.
template <typename F>
void for_each_field(TrainConfig& c, F&& f) {
  f("seed", c.seed);
  f("method", c.method);
  f("hidden", c.hidden);
  f("heads", c.heads);
  f("layers", c.layers);
  f("context_len", c.context_len);
  f("chain_min", c.chain_min);
  f("chain_max", c.chain_max);
  f("max_len", c.max_len);
  f("temperature", c.temperature);
  f("g_prime", c.g_prime);
  f("g_rep", c.g_rep);
  f("k_trunc", c.k_trunc);
  f("lambda_edit", c.lambda_edit);
  f("edit_floor", c.edit_floor);
  f("lambda_rep", c.lambda_rep);
  f("beta_kl", c.beta_kl);
  f("tau_r", c.tau_r);
  f("clip_eps", c.clip_eps);
  f("batch_prompts", c.batch_prompts);
  f("lr", c.lr);
  f("warmup_steps", c.warmup_steps);
  f("weight_decay", c.weight_decay);
  f("adam_beta1", c.adam_beta1);
  f("adam_beta2", c.adam_beta2);
  f("adam_eps", c.adam_eps);
  f("inner_epochs", c.inner_epochs);
  f("token_budget", c.token_budget);
  f("max_steps", c.max_steps);
  f("sft_epochs", c.sft_epochs);
  f("sft_batch", c.sft_batch);
  f("sft_lr", c.sft_lr);
  f("sft_policy_weight", c.sft_policy_weight);
  f("coldstart_n", c.coldstart_n);
  f("coldstart_path", c.coldstart_path);
  f("eval_interval", c.eval_interval);
  f("eval_problems", c.eval_problems);
  f("eval_samples", c.eval_samples);
  f("final_eval_samples", c.final_eval_samples);
  f("checkpoint_interval", c.checkpoint_interval);
  f("defer_retry_interval", c.defer_retry_interval);
  f("defer_max_retries", c.defer_max_retries);
  f("refresh_ref_interval", c.refresh_ref_interval);
  f("kl_double", c.kl_double);
  f("keep_deferred_groups", c.keep_deferred_groups);
  f("graft_sample", c.graft_sample);
  f("no_gating", c.no_gating);
  f("no_truncation", c.no_truncation);
  f("fixed_truncation", c.fixed_truncation);
  f("no_min_edit", c.no_min_edit);
  f("include_correct", c.include_correct);
  f("audit_off", c.audit_off);
}

}  // namespace

TrainConfig parse_config_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");

  TrainConfig cfg;
  json known = json::object();
  for_each_field(cfg, [&](const char* key, auto& field) {
    known[key] = true;
    auto it = j.find(key);
    if (it == j.end()) return;
    try {
      field = it->template get<std::decay_t<decltype(field)>>();
    } catch (const json::exception&) {
      throw ConfigError(std::string("config key has wrong type: ") + key);
    }
  });
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.contains(it.key()))
      throw ConfigError(std::string("unknown config key: ") + it.key());
  }
  validate_config(cfg);
  return cfg;
}

TrainConfig load_config_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config_json(ss.str());
}

std::string config_to_json(const TrainConfig& cfg) {
  nlohmann::ordered_json j;
  for_each_field(const_cast<TrainConfig&>(cfg),
                 [&](const char* key, auto& field) { j[key] = field; });
  return j.dump(2);
}

std::string config_hash(const TrainConfig& cfg) {
  // Plain json sorts keys, so the dump is canonical.
  json j;
  for_each_field(const_cast<TrainConfig&>(cfg),
                 [&](const char* key, auto& field) { j[key] = field; });
  std::string s = j.dump();
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

void validate_config(const TrainConfig& cfg) {
  auto fail = [](const std::string& m) { throw ConfigError("invalid config: " + m); };
  if (cfg.method != "iop" && cfg.method != "gspo") fail("method must be iop or gspo");
  if (cfg.hidden < 1 || cfg.layers < 1) fail("hidden and layers must be >= 1");
  if (cfg.heads < 1 || cfg.hidden % cfg.heads != 0) fail("hidden must be divisible by heads");
  if (cfg.chain_min < 1 || cfg.chain_max < cfg.chain_min) fail("bad chain length range");
  if (cfg.max_len < 3) fail("max_len too small");
  if (cfg.temperature <= 0.0) fail("temperature must be > 0");
  if (cfg.g_prime < 2) fail("g_prime must be >= 2");
  if (cfg.g_rep < 1) fail("g_rep must be >= 1");
  if (cfg.k_trunc < 1) fail("k_trunc must be >= 1");
  if (cfg.lambda_edit < 0.0) fail("lambda_edit must be >= 0");
  if (cfg.clip_eps <= 0.0) fail("clip_eps must be > 0");
  if (cfg.batch_prompts < 1) fail("batch_prompts must be >= 1");
  if (cfg.inner_epochs < 1) fail("inner_epochs must be >= 1");
  if (cfg.token_budget < 1) fail("token_budget must be >= 1");
  if (cfg.coldstart_n < 1) fail("coldstart_n must be >= 1");
  if (cfg.eval_samples < 1 || cfg.final_eval_samples < 1) fail("eval samples must be >= 1");
  if (cfg.eval_interval < 1) fail("eval_interval must be >= 1");
  if (cfg.defer_retry_interval < 1) fail("defer_retry_interval must be >= 1");
}

}  // namespace iop
