#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "unlearn/corpus.hpp"
#include "unlearn/rng.hpp"
#include "unlearn/tensor.hpp"

namespace unlearn {

struct ModelDims {
  uint32_t vocab = kVocabSize;
  uint32_t ctx = 64;
  uint32_t embed = 24;
  uint32_t hidden = 48;

  bool operator==(const ModelDims&) const = default;
};

// Toy next-token LM: embed -> dense(tanh) -> dense -> softmax. All f32,
// all loops sequential, so the reduction order is fully specified.
struct ModelParams {
  ModelDims dims;
  Tensor embed;  // vocab x embed
  Tensor w1;     // embed x hidden
  Tensor b1;     // hidden
  Tensor w2;     // hidden x vocab
  Tensor b2;     // vocab

  ModelParams() = default;
  explicit ModelParams(const ModelDims& d);

  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;
  size_t param_count() const;

  bool all_finite() const;
};

// Deterministic init: every element drawn from its own RngKey.
ModelParams init_params(const ModelDims& dims, uint64_t master_seed);

// Ordered list of sample ids plus the seed bundle consumed at replay.
struct Microbatch {
  std::vector<uint64_t> ids;
  uint64_t seed64 = 0;
};

enum class Reduction { Sum, Mean };

// Gradients mirror the parameter tensors exactly.
struct Grads {
  std::vector<Tensor> t;

  explicit Grads(const ModelParams& p);
  Grads() = default;
  void zero();
  void add_scaled(const Grads& other);  // elementwise +=, one rounding per element
  bool all_finite() const;
};

struct LossResult {
  double loss = 0.0;                     // f64 accumulation of f32 addends
  std::vector<float> per_example;       // one entry per microbatch id, in order
  uint64_t token_count = 0;             // number of prediction targets
};

// Sum of per-token cross-entropy over the microbatch, accumulated in the
// fixed ordered-ID, ordered-token sequence. Removing an example removes
// exactly its addends.
LossResult forward_loss_sum(const ModelParams& params, const Corpus& corpus,
                            const std::vector<uint64_t>& ids);

struct GradOptions {
  Reduction reduction = Reduction::Sum;
  bool dropout = false;
  float dropout_p = 0.1f;
  // Mean mode normalizes by example count; replay overrides this with the
  // recorded original cardinality to reproduce the program's scaling.
  uint32_t mean_denominator = 0;  // 0 = use the presented batch size
};

struct GradResult {
  Grads grads;
  double loss = 0.0;
  uint64_t token_count = 0;
};

// Deterministic gradients of forward_loss_sum. All stochasticity (dropout,
// when enabled) is keyed per (seed64, example, token, unit), so retained
// elements' draws never depend on batch composition. NaN fails closed.
GradResult grad(const ModelParams& params, const Corpus& corpus,
                const std::vector<uint64_t>& ids, uint64_t seed64,
                const GradOptions& opt = {});

// Log-softmax row for a single context token; used by audits.
std::vector<float> next_token_logprobs(const ModelParams& params, uint32_t context_token);

// Greedy argmax decode of `n` tokens after `prompt` (raw bytes, BOS
// prepended internally). Stops early on EOS.
std::vector<uint8_t> greedy_decode(const ModelParams& params, const std::vector<uint8_t>& prompt,
                                   size_t n);

// Mean per-token negative log-likelihood over the documents.
double mean_nll(const ModelParams& params, const Corpus& corpus,
                const std::vector<uint64_t>& ids);

}  // namespace unlearn
