#include "unlearn/optim.hpp"

#include <cmath>

#include <json.hpp>

#include "unlearn/errors.hpp"
#include "unlearn/hashing.hpp"

namespace unlearn {

OptState::OptState(const ModelParams& p) {
  for (const Tensor* t : p.tensors()) {
    exp_avg.push_back(Tensor(t->name + ".exp_avg", t->shape));
    exp_avg_sq.push_back(Tensor(t->name + ".exp_avg_sq", t->shape));
  }
}

void TrainConfig::validate() const {
  if (!(beta1 > 0.0f && beta1 < 1.0f && beta2 > 0.0f && beta2 < 1.0f))
    throw PreconditionError("TrainConfig: betas must lie in (0, 1)");
  if (!(eps > 0.0f)) throw PreconditionError("TrainConfig: eps must be positive");
  if (warmup_steps > total_steps)
    throw PreconditionError("TrainConfig: warmup_steps must not exceed total_steps");
  if (accum_len < 1) throw PreconditionError("TrainConfig: accum_len must be >= 1");
  if (microbatch_size < 1) throw PreconditionError("TrainConfig: microbatch_size must be >= 1");
}

std::string TrainConfig::canonical_json() const {
  nlohmann::json j;
  j["vocab"] = dims.vocab;
  j["ctx"] = dims.ctx;
  j["embed"] = dims.embed;
  j["hidden"] = dims.hidden;
  j["base_lr"] = base_lr;
  j["warmup_steps"] = warmup_steps;
  j["total_steps"] = total_steps;
  j["cosine_floor"] = cosine_floor;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["eps"] = eps;
  j["weight_decay"] = weight_decay;
  j["grad_clip"] = grad_clip;
  j["accum_len"] = accum_len;
  j["microbatch_size"] = microbatch_size;
  j["master_seed"] = master_seed;
  j["reduction"] = reduction == Reduction::Sum ? "sum" : "mean";
  j["dropout"] = dropout;
  j["dropout_p"] = dropout_p;
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  TrainConfig c;
  c.dims.vocab = j.at("vocab");
  c.dims.ctx = j.at("ctx");
  c.dims.embed = j.at("embed");
  c.dims.hidden = j.at("hidden");
  c.base_lr = j.at("base_lr");
  c.warmup_steps = j.at("warmup_steps");
  c.total_steps = j.at("total_steps");
  c.cosine_floor = j.at("cosine_floor");
  c.beta1 = j.at("beta1");
  c.beta2 = j.at("beta2");
  c.eps = j.at("eps");
  c.weight_decay = j.at("weight_decay");
  c.grad_clip = j.at("grad_clip");
  c.accum_len = j.at("accum_len");
  c.microbatch_size = j.at("microbatch_size");
  c.master_seed = j.at("master_seed");
  c.reduction = j.at("reduction") == "sum" ? Reduction::Sum : Reduction::Mean;
  c.dropout = j.at("dropout");
  c.dropout_p = j.at("dropout_p");
  return c;
}

std::string TrainConfig::config_digest_hex() const {
  std::string s = canonical_json();
  return sha256_hex(s.data(), s.size());
}

float lr_at(uint32_t index, const TrainConfig& cfg) {
  if (index >= cfg.total_steps)
    throw PreconditionError("lr_at: index " + std::to_string(index) + " out of range");
  if (index == cfg.warmup_steps) return cfg.base_lr;  // exact warmup boundary
  if (index < cfg.warmup_steps) {
    return cfg.base_lr * (static_cast<float>(index) / static_cast<float>(cfg.warmup_steps));
  }
  float progress = static_cast<float>(index - cfg.warmup_steps) /
                   static_cast<float>(cfg.total_steps - cfg.warmup_steps);
  float cosine = 0.5f * (1.0f + std::cos(3.14159265358979323846f * progress));
  return cfg.cosine_floor + (cfg.base_lr - cfg.cosine_floor) * cosine;
}

float clip_scale(const Grads& g, float c) {
  double sq = 0.0;
  for (const Tensor& t : g.t) {
    for (float v : t.data) sq += static_cast<double>(v) * static_cast<double>(v);
  }
  float norm = static_cast<float>(std::sqrt(sq));
  if (norm <= c || norm == 0.0f) return 1.0f;
  return c / norm;
}

void adamw_update(ModelParams& params, OptState& opt, const Grads& g, float lr,
                  const TrainConfig& cfg) {
  if (!g.all_finite()) throw NumericFault("adamw_update: non-finite gradient");
  float scale = clip_scale(g, cfg.grad_clip);
  opt.step += 1;
  float bc1 = 1.0f - std::pow(cfg.beta1, static_cast<float>(opt.step));
  float bc2 = 1.0f - std::pow(cfg.beta2, static_cast<float>(opt.step));
  auto ptensors = params.tensors();
  for (size_t ti = 0; ti < ptensors.size(); ++ti) {
    float* p = ptensors[ti]->ptr();
    const float* gr = g.t[ti].ptr();
    float* m = opt.exp_avg[ti].ptr();
    float* v = opt.exp_avg_sq[ti].ptr();
    size_t n = ptensors[ti]->element_count();
    for (size_t i = 0; i < n; ++i) {
      float gi = scale == 1.0f ? gr[i] : gr[i] * scale;
      // decoupled decay first, then the Adam step
      p[i] = p[i] - lr * cfg.weight_decay * p[i];
      m[i] = cfg.beta1 * m[i] + (1.0f - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0f - cfg.beta2) * gi * gi;
      float m_hat = m[i] / bc1;
      float v_hat = v[i] / bc2;
      p[i] = p[i] - lr * (m_hat / (std::sqrt(v_hat) + cfg.eps));
    }
  }
  if (!params.all_finite()) throw NumericFault("adamw_update: non-finite parameters after update");
}

}  // namespace unlearn
