#ifndef IOP_CONFIG_HPP
#define IOP_CONFIG_HPP

#include <cstdint>
#include <stdexcept>
#include <string>

namespace iop {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Numerical failure that should abort a run (exit code 3 at the CLI).
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat run configuration. JSON config files mirror these keys one-to-one;
// CLI flags override file values which override defaults.
struct TrainConfig {
  uint64_t seed = 1;
  std::string method = "iop";  // iop | gspo

  // model
  int hidden = 48;
  int heads = 4;
  int layers = 1;
  int context_len = 160;

  // task / curriculum
  int chain_min = 4;
  int chain_max = 8;
  int max_len = 24;

  // sampling (one knob for policy, repair and eval)
  double temperature = 1.0;

  // group structure and gating
  int g_prime = 16;
  int g_rep = 4;
  int k_trunc = 4;
  double lambda_edit = 0.3;
  double edit_floor = 0.05;
  double lambda_rep = 0.2;
  double beta_kl = 0.002;
  double tau_r = 0.5;
  double clip_eps = 0.2;

  // optimization
  int batch_prompts = 16;
  double lr = 3e-3;
  int warmup_steps = 20;
  double weight_decay = 0.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int inner_epochs = 1;

  // stage-2 budget
  int64_t token_budget = 2000000;
  int max_steps = 0;  // safety rail; 0 = budget only

  // stage-1 cold start
  int sft_epochs = 150;
  int sft_batch = 32;
  double sft_lr = 0.01;
  double sft_policy_weight = 1.0;  // weight of the solution-cloning term
  int coldstart_n = 500;
  std::string coldstart_path;

  // evaluation
  int eval_interval = 20;
  int eval_problems = 200;
  int eval_samples = 8;
  int final_eval_samples = 32;

  // infrastructure
  int checkpoint_interval = 50;
  int defer_retry_interval = 50;
  int defer_max_retries = 3;
  int refresh_ref_interval = 0;  // 0 = reference frozen at stage-1 output

  // toggles
  bool kl_double = false;
  bool keep_deferred_groups = false;  // keep repair groups with no usable repair in the repair batch
  bool graft_sample = false;
  bool no_gating = false;
  bool no_truncation = false;
  bool fixed_truncation = false;
  bool no_min_edit = false;
  bool include_correct = false;
  bool audit_off = false;
};

// Throws ConfigError naming the offending key on unknown keys or bad types.
TrainConfig parse_config_json(const std::string& json_text);
TrainConfig load_config_file(const std::string& path);

// Ordered, human-readable JSON of every field.
std::string config_to_json(const TrainConfig& cfg);

// Content hash, stable under key reordering in source files.
std::string config_hash(const TrainConfig& cfg);

void validate_config(const TrainConfig& cfg);  // throws ConfigError

}  // namespace iop

#endif  // IOP_CONFIG_HPP
