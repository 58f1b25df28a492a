#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "unlearn/checkpoint.hpp"
#include "unlearn/corpus.hpp"
#include "unlearn/optim.hpp"

namespace unlearn {

// Diagonal Fisher proxy: mean of squared per-example gradients over a
// retain sample. Shapes mirror the model; entries are nonnegative.
struct FisherDiag {
  std::vector<Tensor> h;
  double damping = 0.0;
  uint64_t sample_count = 0;
};

FisherDiag estimate_fisher_diag(const ModelParams& params, const Corpus& corpus,
                                const std::vector<uint64_t>& retain_sample, double damping);

// Default damping when the caller passes none: 1e-3 * mean(H) + 1e-8.
double default_damping(const FisherDiag& fisher);

struct HotPathConfig {
  float eta = 0.5f;           // anti-step LR (shrinks only)
  uint32_t max_anti_steps = 4;
  float trust_radius = 1.0f;  // bound on ||dtheta||_H
  uint32_t retain_tune_steps = 8;
  float retain_lr = 1e-4f;
  float utility_band_pct = 1.0f;  // retain loss guardrail, percent
  float eta_floor = 1e-8f;
  uint32_t retain_probe = 32;  // retain examples used for the guardrail
};

struct AntiStepRecord {
  uint32_t step = 0;
  float accepted_eta = 0.0f;
  double forget_loss_before = 0.0, forget_loss_after = 0.0;
  double retain_loss_before = 0.0, retain_loss_after = 0.0;
  double delta_norm_h = 0.0;
  int backtracks = 0;
};

struct HotPathReport {
  bool feasible = true;
  std::string infeasible_reason;
  std::vector<AntiStepRecord> steps;

  std::string to_json() const;
};

// Curvature-preconditioned ascent on the forget loss:
// dtheta = +eta * (H + lambda I)^-1 * g_forget, elementwise. Backtracking
// halves eta until the trust region holds, the forget loss strictly
// increases, and the retain loss stays inside the guardrail band. When
// eta reaches the floor the result is marked infeasible and the caller
// must escalate to exact replay.
HotPathReport anti_update(ModelParams& params, const Corpus& corpus,
                          const std::vector<uint64_t>& closure_ids, const FisherDiag& fisher,
                          const std::vector<uint64_t>& retain_probe_ids,
                          const HotPathConfig& cfg);

// T_R sum-reduction AdamW steps over retain minibatches; deterministic
// given the seed. Sets `warned_nonmonotone` when the retain loss failed
// to improve over the window.
struct RetainTuneResult {
  double loss_before = 0.0;
  double loss_after = 0.0;
  bool warned_nonmonotone = false;
};

RetainTuneResult retain_tune(TrainState& state, const Corpus& corpus,
                             const std::vector<uint64_t>& retain_ids, uint32_t steps,
                             float lr, const TrainConfig& opt_cfg, uint64_t seed);

}  // namespace unlearn
