#pragma once

#include <cstdint>
#include <string>

#include "unlearn/hashing.hpp"
#include "unlearn/model.hpp"
#include "unlearn/optim.hpp"

namespace unlearn {

// Full training state: parameters plus optimizer state.
struct TrainState {
  ModelParams params;
  OptState opt;

  TrainState() = default;
  explicit TrainState(const ModelDims& dims, uint64_t master_seed)
      : params(init_params(dims, master_seed)), opt(params) {}
};

struct CheckpointMeta {
  uint32_t format_version = 1;
  std::string config_digest_hex;  // pin: replay refuses on mismatch
  uint64_t opt_step = 0;
};

// Canonical body bytes: raw LE f32 params, then exp_avg, then exp_avg_sq
// in declared tensor order, then the step counter as u64. The body is the
// canonical serialization all state hashes are computed over.
std::vector<uint8_t> serialize_state_body(const ModelParams& params, const OptState& opt);

Digest256 state_hash(const ModelParams& params, const OptState& opt);
Digest256 model_hash(const ModelParams& params);
Digest256 optimizer_hash(const OptState& opt);

// Fixed binary layout: header (magic, version, config digest, shape
// table), body as above, SHA-256 trailer over header+body. Loading
// verifies the trailer and refuses version or config-digest drift.
void checkpoint_save(const std::string& path, const ModelParams& params, const OptState& opt,
                     const CheckpointMeta& meta);

struct LoadedCheckpoint {
  TrainState state;
  CheckpointMeta meta;
};

LoadedCheckpoint checkpoint_load(const std::string& path,
                                 const std::string& expect_config_digest_hex = "");

}  // namespace unlearn
