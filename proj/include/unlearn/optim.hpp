#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "unlearn/model.hpp"
#include "unlearn/tensor.hpp"

namespace unlearn {

// AdamW moment tensors mirror the model tensors exactly; `step` counts
// applied (non-empty) updates and never advances without one.
struct OptState {
  std::vector<Tensor> exp_avg;
  std::vector<Tensor> exp_avg_sq;
  uint64_t step = 0;

  OptState() = default;
  explicit OptState(const ModelParams& p);
};

struct TrainConfig {
  ModelDims dims;
  float base_lr = 1e-3f;
  uint32_t warmup_steps = 10;
  uint32_t total_steps = 200;
  float cosine_floor = 0.0f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.01f;
  float grad_clip = 1.0f;
  uint32_t accum_len = 2;
  uint32_t microbatch_size = 8;
  uint64_t master_seed = 42;
  Reduction reduction = Reduction::Sum;
  bool dropout = false;
  float dropout_p = 0.1f;

  void validate() const;
  // Canonical JSON (sorted keys); its SHA-256 is the pin checked at replay.
  std::string canonical_json() const;
  static TrainConfig from_json(const std::string& text);
  std::string config_digest_hex() const;
};

// Warmup-then-cosine schedule indexed by the logical applied-update
// counter, computed in f32 and recorded verbatim into the WAL.
float lr_at(uint32_t applied_update_index, const TrainConfig& cfg);

// Scale factor that clips `g` to global norm `c` (1.0f when under the
// threshold, in which case gradients pass through bit-unchanged).
float clip_scale(const Grads& g, float c);

// One AdamW update with decoupled weight decay. Clips to cfg.grad_clip,
// increments opt.step by exactly one, and fails closed on non-finite
// results. Pure function of its inputs: same bits in, same bits out.
void adamw_update(ModelParams& params, OptState& opt, const Grads& g, float lr,
                  const TrainConfig& cfg);

}  // namespace unlearn
