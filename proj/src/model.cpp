#include "unlearn/model.hpp"

#include <cmath>

#include "unlearn/errors.hpp"

namespace unlearn {

ModelParams::ModelParams(const ModelDims& d)
    : dims(d),
      embed("embed", {d.vocab, d.embed}),
      w1("w1", {d.embed, d.hidden}),
      b1("b1", {d.hidden}),
      w2("w2", {d.hidden, d.vocab}),
      b2("b2", {d.vocab}) {}

std::vector<Tensor*> ModelParams::tensors() { return {&embed, &w1, &b1, &w2, &b2}; }

std::vector<const Tensor*> ModelParams::tensors() const {
  return {&embed, &w1, &b1, &w2, &b2};
}

size_t ModelParams::param_count() const {
  size_t n = 0;
  for (const Tensor* t : tensors()) n += t->element_count();
  return n;
}

bool ModelParams::all_finite() const {
  for (const Tensor* t : tensors()) {
    for (float v : t->data) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

ModelParams init_params(const ModelDims& dims, uint64_t master_seed) {
  ModelParams p(dims);
  auto fill_uniform = [master_seed](Tensor& t, uint32_t op, float scale) {
    for (size_t i = 0; i < t.data.size(); ++i) {
      t.data[i] = rng_symmetric({master_seed, i, 0, op, 0}, scale);
    }
  };
  fill_uniform(p.embed, kRngInitEmbed, 0.08f);
  float s1 = 1.0f / std::sqrt(static_cast<float>(dims.embed));
  float s2 = 1.0f / std::sqrt(static_cast<float>(dims.hidden));
  fill_uniform(p.w1, kRngInitDense1, s1);
  fill_uniform(p.w2, kRngInitDense2, s2);
  // biases start at zero
  return p;
}

Grads::Grads(const ModelParams& p) {
  for (const Tensor* pt : p.tensors()) t.push_back(Tensor(pt->name, pt->shape));
}

void Grads::zero() {
  for (Tensor& g : t) g.fill(0.0f);
}

void Grads::add_scaled(const Grads& other) {
  for (size_t i = 0; i < t.size(); ++i) {
    float* a = t[i].ptr();
    const float* b = other.t[i].ptr();
    size_t n = t[i].element_count();
    for (size_t j = 0; j < n; ++j) a[j] += b[j];
  }
}

bool Grads::all_finite() const {
  for (const Tensor& g : t) {
    for (float v : g.data) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

namespace {

struct Scratch {
  std::vector<float> h_pre, h_act, logits, probs, dh;
};

// Forward pass for one context token; returns f32 cross-entropy addend for
// `target` and leaves activations in `s` for the backward pass.
float forward_position(const ModelParams& p, uint32_t ctx_tok, uint32_t target, Scratch& s) {
  const ModelDims& d = p.dims;
  s.h_pre.assign(d.hidden, 0.0f);
  s.h_act.resize(d.hidden);
  s.logits.resize(d.vocab);
  s.probs.resize(d.vocab);
  const float* x = p.embed.ptr() + size_t(ctx_tok) * d.embed;
  for (uint32_t i = 0; i < d.embed; ++i) {
    float xi = x[i];
    const float* w = p.w1.ptr() + size_t(i) * d.hidden;
    for (uint32_t j = 0; j < d.hidden; ++j) s.h_pre[j] += xi * w[j];
  }
  for (uint32_t j = 0; j < d.hidden; ++j) {
    s.h_act[j] = std::tanh(s.h_pre[j] + p.b1.data[j]);
  }
  for (uint32_t v = 0; v < d.vocab; ++v) s.logits[v] = p.b2.data[v];
  for (uint32_t j = 0; j < d.hidden; ++j) {
    float hj = s.h_act[j];
    const float* w = p.w2.ptr() + size_t(j) * d.vocab;
    for (uint32_t v = 0; v < d.vocab; ++v) s.logits[v] += hj * w[v];
  }
  float mx = s.logits[0];
  for (uint32_t v = 1; v < d.vocab; ++v) mx = std::max(mx, s.logits[v]);
  float z = 0.0f;
  for (uint32_t v = 0; v < d.vocab; ++v) {
    s.probs[v] = std::exp(s.logits[v] - mx);
    z += s.probs[v];
  }
  float inv_z = 1.0f / z;
  for (uint32_t v = 0; v < d.vocab; ++v) s.probs[v] *= inv_z;
  return std::log(z) - (s.logits[target] - mx);
}

}  // namespace

LossResult forward_loss_sum(const ModelParams& params, const Corpus& corpus,
                            const std::vector<uint64_t>& ids) {
  if (ids.empty()) throw PreconditionError("forward_loss_sum: empty microbatch");
  LossResult out;
  Scratch s;
  for (uint64_t id : ids) {
    std::vector<uint32_t> toks = corpus.tokens(id, params.dims.ctx);
    double ex_loss = 0.0;
    for (size_t j = 1; j < toks.size(); ++j) {
      float addend = forward_position(params, toks[j - 1], toks[j], s);
      ex_loss += addend;
      out.loss += addend;
      ++out.token_count;
    }
    out.per_example.push_back(static_cast<float>(ex_loss));
  }
  return out;
}

GradResult grad(const ModelParams& params, const Corpus& corpus,
                const std::vector<uint64_t>& ids, uint64_t seed64, const GradOptions& opt) {
  if (ids.empty()) throw PreconditionError("grad: empty microbatch");
  const ModelDims& d = params.dims;
  GradResult out;
  out.grads = Grads(params);
  Tensor& g_embed = out.grads.t[0];
  Tensor& g_w1 = out.grads.t[1];
  Tensor& g_b1 = out.grads.t[2];
  Tensor& g_w2 = out.grads.t[3];
  Tensor& g_b2 = out.grads.t[4];

  float scale = 1.0f;
  if (opt.reduction == Reduction::Mean) {
    uint32_t denom = opt.mean_denominator ? opt.mean_denominator
                                          : static_cast<uint32_t>(ids.size());
    scale = 1.0f / static_cast<float>(denom);
  }

  std::vector<float> h_pre(d.hidden), h_tanh(d.hidden), h_out(d.hidden);
  std::vector<float> drop_scale(d.hidden);
  std::vector<float> logits(d.vocab), probs(d.vocab), dlogits(d.vocab), dh(d.hidden);
  const float keep = 1.0f - opt.dropout_p;

  for (uint64_t id : ids) {
    std::vector<uint32_t> toks = corpus.tokens(id, d.ctx);
    for (size_t j = 1; j < toks.size(); ++j) {
      uint32_t ctx_tok = toks[j - 1];
      uint32_t target = toks[j];

      // forward
      std::fill(h_pre.begin(), h_pre.end(), 0.0f);
      const float* x = params.embed.ptr() + size_t(ctx_tok) * d.embed;
      for (uint32_t i = 0; i < d.embed; ++i) {
        float xi = x[i];
        const float* w = params.w1.ptr() + size_t(i) * d.hidden;
        for (uint32_t u = 0; u < d.hidden; ++u) h_pre[u] += xi * w[u];
      }
      for (uint32_t u = 0; u < d.hidden; ++u) {
        h_tanh[u] = std::tanh(h_pre[u] + params.b1.data[u]);
        if (opt.dropout) {
          RngKey k{seed64, id, static_cast<uint32_t>(j), kRngDropout, u};
          drop_scale[u] = rng_uniform(k) < opt.dropout_p ? 0.0f : 1.0f / keep;
        } else {
          drop_scale[u] = 1.0f;
        }
        h_out[u] = h_tanh[u] * drop_scale[u];
      }
      for (uint32_t v = 0; v < d.vocab; ++v) logits[v] = params.b2.data[v];
      for (uint32_t u = 0; u < d.hidden; ++u) {
        float hu = h_out[u];
        const float* w = params.w2.ptr() + size_t(u) * d.vocab;
        for (uint32_t v = 0; v < d.vocab; ++v) logits[v] += hu * w[v];
      }
      float mx = logits[0];
      for (uint32_t v = 1; v < d.vocab; ++v) mx = std::max(mx, logits[v]);
      float z = 0.0f;
      for (uint32_t v = 0; v < d.vocab; ++v) {
        probs[v] = std::exp(logits[v] - mx);
        z += probs[v];
      }
      float inv_z = 1.0f / z;
      for (uint32_t v = 0; v < d.vocab; ++v) probs[v] *= inv_z;
      float addend = std::log(z) - (logits[target] - mx);
      out.loss += opt.reduction == Reduction::Mean ? addend * scale : addend;
      ++out.token_count;

      // backward
      for (uint32_t v = 0; v < d.vocab; ++v) {
        float dl = probs[v] - (v == target ? 1.0f : 0.0f);
        if (opt.reduction == Reduction::Mean) dl *= scale;
        dlogits[v] = dl;
        g_b2.data[v] += dl;
      }
      for (uint32_t u = 0; u < d.hidden; ++u) {
        float hu = h_out[u];
        float acc = 0.0f;
        float* gw2 = g_w2.ptr() + size_t(u) * d.vocab;
        const float* w2 = params.w2.ptr() + size_t(u) * d.vocab;
        for (uint32_t v = 0; v < d.vocab; ++v) {
          gw2[v] += hu * dlogits[v];
          acc += w2[v] * dlogits[v];
        }
        float a = h_tanh[u];
        dh[u] = acc * drop_scale[u] * (1.0f - a * a);
        g_b1.data[u] += dh[u];
      }
      float* gx = g_embed.ptr() + size_t(ctx_tok) * d.embed;
      for (uint32_t i = 0; i < d.embed; ++i) {
        float xi = x[i];
        float acc = 0.0f;
        float* gw1 = g_w1.ptr() + size_t(i) * d.hidden;
        const float* w1 = params.w1.ptr() + size_t(i) * d.hidden;
        for (uint32_t u = 0; u < d.hidden; ++u) {
          gw1[u] += xi * dh[u];
          acc += w1[u] * dh[u];
        }
        gx[i] += acc;
      }
    }
  }
  if (!out.grads.all_finite()) throw NumericFault("grad: non-finite gradient");
  return out;
}

std::vector<float> next_token_logprobs(const ModelParams& params, uint32_t context_token) {
  Scratch s;
  forward_position(params, context_token, 0, s);
  std::vector<float> lp(params.dims.vocab);
  for (uint32_t v = 0; v < params.dims.vocab; ++v) lp[v] = std::log(s.probs[v]);
  return lp;
}

std::vector<uint8_t> greedy_decode(const ModelParams& params, const std::vector<uint8_t>& prompt,
                                   size_t n) {
  uint32_t ctx_tok = kTokenBos;
  if (!prompt.empty()) ctx_tok = prompt.back();
  Scratch s;
  std::vector<uint8_t> out;
  for (size_t step = 0; step < n; ++step) {
    forward_position(params, ctx_tok, 0, s);
    uint32_t best = 0;
    float best_v = s.logits[0];
    for (uint32_t v = 1; v < params.dims.vocab; ++v) {
      if (s.logits[v] > best_v) {
        best_v = s.logits[v];
        best = v;
      }
    }
    if (best >= 256) break;  // BOS/EOS ends generation
    out.push_back(static_cast<uint8_t>(best));
    ctx_tok = best;
  }
  return out;
}

double mean_nll(const ModelParams& params, const Corpus& corpus,
                const std::vector<uint64_t>& ids) {
  LossResult r = forward_loss_sum(params, corpus, ids);
  return r.loss / static_cast<double>(r.token_count);
}

}  // namespace unlearn
