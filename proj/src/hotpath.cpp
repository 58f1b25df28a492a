#include "unlearn/hotpath.hpp"

#include <cmath>

#include <json.hpp>

#include "unlearn/errors.hpp"

namespace unlearn {

FisherDiag estimate_fisher_diag(const ModelParams& params, const Corpus& corpus,
                                const std::vector<uint64_t>& retain_sample, double damping) {
  if (retain_sample.empty()) throw PreconditionError("estimate_fisher_diag: empty retain sample");
  FisherDiag fisher;
  for (const Tensor* t : params.tensors()) fisher.h.push_back(Tensor(t->name + ".fisher", t->shape));
  for (uint64_t id : retain_sample) {
    GradResult g = grad(params, corpus, {id}, /*seed64=*/0, {});
    for (size_t ti = 0; ti < fisher.h.size(); ++ti) {
      float* acc = fisher.h[ti].ptr();
      const float* gr = g.grads.t[ti].ptr();
      for (size_t i = 0; i < fisher.h[ti].element_count(); ++i) acc[i] += gr[i] * gr[i];
    }
  }
  float inv_n = 1.0f / static_cast<float>(retain_sample.size());
  for (Tensor& t : fisher.h) {
    for (float& v : t.data) v *= inv_n;
  }
  fisher.sample_count = retain_sample.size();
  fisher.damping = damping;
  return fisher;
}

double default_damping(const FisherDiag& fisher) {
  double sum = 0.0;
  size_t n = 0;
  for (const Tensor& t : fisher.h) {
    for (float v : t.data) sum += v;
    n += t.element_count();
  }
  return 1e-3 * (sum / static_cast<double>(n)) + 1e-8;
}

namespace {

double sum_loss(const ModelParams& params, const Corpus& corpus,
                const std::vector<uint64_t>& ids) {
  return forward_loss_sum(params, corpus, ids).loss;
}

}  // namespace

HotPathReport anti_update(ModelParams& params, const Corpus& corpus,
                          const std::vector<uint64_t>& closure_ids, const FisherDiag& fisher,
                          const std::vector<uint64_t>& retain_probe_ids,
                          const HotPathConfig& cfg) {
  if (fisher.damping <= 0.0)
    throw PreconditionError("anti_update: fisher must carry positive damping");
  HotPathReport report;
  float eta = cfg.eta;

  for (uint32_t s = 0; s < cfg.max_anti_steps; ++s) {
    // summed forget gradient over the closure, fixed order
    GradResult g = grad(params, corpus, closure_ids, /*seed64=*/0, {});
    double forget_before = g.loss;
    double retain_before =
        retain_probe_ids.empty() ? 0.0 : sum_loss(params, corpus, retain_probe_ids);

    AntiStepRecord rec;
    rec.step = s;
    rec.forget_loss_before = forget_before;
    rec.retain_loss_before = retain_before;

    bool accepted = false;
    while (eta >= cfg.eta_floor) {
      // candidate dtheta = +eta * (H + lambda)^-1 g, and its H-norm
      std::vector<Tensor> delta;
      double norm_sq = 0.0;
      for (size_t ti = 0; ti < fisher.h.size(); ++ti) {
        Tensor d("delta", g.grads.t[ti].shape);
        const float* gr = g.grads.t[ti].ptr();
        const float* h = fisher.h[ti].ptr();
        for (size_t i = 0; i < d.element_count(); ++i) {
          float precond = gr[i] / (h[i] + static_cast<float>(fisher.damping));
          d.data[i] = eta * precond;
          norm_sq += static_cast<double>(h[i]) * d.data[i] * d.data[i];
        }
        delta.push_back(std::move(d));
      }
      double norm_h = std::sqrt(norm_sq);
      if (norm_h > cfg.trust_radius) {
        eta *= 0.5f;
        ++rec.backtracks;
        continue;
      }
      // tentatively apply
      ModelParams trial = params;
      auto trial_t = trial.tensors();
      for (size_t ti = 0; ti < trial_t.size(); ++ti) {
        float* p = trial_t[ti]->ptr();
        const float* d = delta[ti].ptr();
        for (size_t i = 0; i < trial_t[ti]->element_count(); ++i) p[i] += d[i];
      }
      double forget_after = sum_loss(trial, corpus, closure_ids);
      double retain_after =
          retain_probe_ids.empty() ? 0.0 : sum_loss(trial, corpus, retain_probe_ids);
      bool forget_up = forget_after > forget_before;
      bool retain_ok = retain_probe_ids.empty() ||
                       std::abs(retain_after - retain_before) <=
                           std::abs(retain_before) * (cfg.utility_band_pct / 100.0);
      if (forget_up && retain_ok) {
        params = std::move(trial);
        rec.accepted_eta = eta;
        rec.forget_loss_after = forget_after;
        rec.retain_loss_after = retain_after;
        rec.delta_norm_h = norm_h;
        accepted = true;
        break;
      }
      eta *= 0.5f;
      ++rec.backtracks;
    }
    if (!accepted) {
      report.feasible = false;
      report.infeasible_reason = "backtracking exhausted (eta below floor) at anti-step " +
                                 std::to_string(s);
      report.steps.push_back(rec);
      return report;
    }
    report.steps.push_back(rec);
  }
  return report;
}

RetainTuneResult retain_tune(TrainState& state, const Corpus& corpus,
                             const std::vector<uint64_t>& retain_ids, uint32_t steps,
                             float lr, const TrainConfig& opt_cfg, uint64_t seed) {
  RetainTuneResult result;
  if (retain_ids.empty()) throw PreconditionError("retain_tune: empty retain set");
  result.loss_before = sum_loss(state.params, corpus, retain_ids);
  result.loss_after = result.loss_before;
  if (steps == 0) return result;

  uint32_t mb = std::min<uint32_t>(opt_cfg.microbatch_size, retain_ids.size());
  for (uint32_t s = 0; s < steps; ++s) {
    std::vector<uint64_t> ids;
    for (uint32_t k = 0; k < mb; ++k)
      ids.push_back(retain_ids[(size_t(s) * mb + k) % retain_ids.size()]);
    uint64_t mb_seed = rng_u64({seed, s, 0, kRngMicrobatchSeed, 2});
    GradResult g = grad(state.params, corpus, ids, mb_seed, {});
    adamw_update(state.params, state.opt, g.grads, lr, opt_cfg);
  }
  result.loss_after = sum_loss(state.params, corpus, retain_ids);
  result.warned_nonmonotone = result.loss_after > result.loss_before;
  return result;
}

std::string HotPathReport::to_json() const {
  nlohmann::json j;
  j["feasible"] = feasible;
  j["infeasible_reason"] = infeasible_reason;
  nlohmann::json steps_j = nlohmann::json::array();
  for (const auto& s : steps) {
    steps_j.push_back({{"step", s.step},
                       {"accepted_eta", s.accepted_eta},
                       {"forget_loss_before", s.forget_loss_before},
                       {"forget_loss_after", s.forget_loss_after},
                       {"retain_loss_before", s.retain_loss_before},
                       {"retain_loss_after", s.retain_loss_after},
                       {"delta_norm_h", s.delta_norm_h},
                       {"backtracks", s.backtracks}});
  }
  j["steps"] = steps_j;
  return j.dump(2);
}

}  // namespace unlearn
