#ifndef IOP_CHECKPOINT_HPP
#define IOP_CHECKPOINT_HPP

#include <cstdint>
#include <optional>
#include <string>

#include "iop/policy_model.hpp"

namespace iop {

// Binary checkpoint: fixed header (magic, version, arch, step, master seed,
// moments flag), little-endian f64 parameter array, optional Adam moments,
// and a JSON trailer for trainer state (deferral queue, token counters, RNG
// bookkeeping). Round-trips bit-exactly.
struct Checkpoint {
  Params params;
  uint64_t master_seed = 0;
  int64_t step = 0;
  std::optional<AdamState> adam;
  std::string trailer;  // JSON; empty for model-only checkpoints
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace iop

#endif  // IOP_CHECKPOINT_HPP
