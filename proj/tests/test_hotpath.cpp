#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "test_util.hpp"
#include "unlearn/errors.hpp"
#include "unlearn/hotpath.hpp"

using namespace unlearn;

namespace {

ModelDims dims() { return {kVocabSize, 32, 8, 16}; }

TrainConfig opt_cfg() {
  TrainConfig cfg;
  cfg.dims = dims();
  return cfg;
}

}  // namespace

TEST_CASE("fisher of a single example is exactly the squared gradient") {
  Corpus corpus = testutil::small_corpus(4);
  ModelParams p = init_params(dims(), 3);
  FisherDiag f = estimate_fisher_diag(p, corpus, {2}, 1e-3);
  GradResult g = grad(p, corpus, {2}, 0);
  for (size_t t = 0; t < f.h.size(); ++t) {
    for (size_t i = 0; i < f.h[t].element_count(); ++i) {
      float gi = g.grads.t[t].data[i];
      CHECK(testutil::same_bits(f.h[t].data[i], gi * gi));
    }
  }
  CHECK(f.sample_count == 1);
}

TEST_CASE("fisher of two examples is the elementwise mean of squares") {
  Corpus corpus = testutil::small_corpus(4);
  ModelParams p = init_params(dims(), 3);
  FisherDiag f = estimate_fisher_diag(p, corpus, {1, 3}, 1e-3);
  GradResult g1 = grad(p, corpus, {1}, 0);
  GradResult g3 = grad(p, corpus, {3}, 0);
  for (size_t t = 0; t < f.h.size(); ++t) {
    for (size_t i = 0; i < f.h[t].element_count(); ++i) {
      float a = g1.grads.t[t].data[i];
      float b = g3.grads.t[t].data[i];
      // two-pass oracle with the same accumulation order
      float expect = (a * a + b * b) * 0.5f;
      CHECK(testutil::same_bits(f.h[t].data[i], expect));
      CHECK(f.h[t].data[i] >= 0.0f);
    }
  }
}

TEST_CASE("fisher requires a nonempty sample; default damping is positive") {
  Corpus corpus = testutil::small_corpus(2);
  ModelParams p = init_params(dims(), 3);
  CHECK_THROWS_AS(estimate_fisher_diag(p, corpus, {}, 1e-3), PreconditionError);
  FisherDiag f = estimate_fisher_diag(p, corpus, {1}, 0.0);
  CHECK(default_damping(f) > 0.0);
}

TEST_CASE("anti-update with zero forget gradient leaves parameters unchanged") {
  // a 'closure' whose gradient is zero cannot exist organically, so check
  // the direction/shrinkage math on the 1-d quadratic instead; here use a
  // tiny eta so backtracking accepts and the delta is ~g/(H+lambda)
  Corpus corpus = testutil::small_corpus(6);
  ModelParams p = init_params(dims(), 3);
  ModelParams before = p;
  FisherDiag f = estimate_fisher_diag(p, corpus, {4, 5}, 0.0);
  f.damping = default_damping(f);
  HotPathConfig cfg;
  cfg.max_anti_steps = 1;
  cfg.eta = 1e-6f;
  cfg.trust_radius = 1e9f;
  cfg.utility_band_pct = 100.0f;
  HotPathReport rep = anti_update(p, corpus, {1, 2}, f, {4, 5}, cfg);
  CHECK(rep.feasible);
  // the anti step moved the parameters in the +preconditioned-gradient
  // direction: sign agreement wherever the update is resolvable
  GradResult g = grad(before, corpus, {1, 2}, 0);
  auto pt = p.tensors();
  auto bt = before.tensors();
  for (size_t t = 0; t < pt.size(); ++t) {
    for (size_t i = 0; i < pt[t]->element_count(); ++i) {
      float moved = pt[t]->data[i] - bt[t]->data[i];
      if (moved == 0.0f) continue;
      CHECK(std::signbit(moved) == std::signbit(g.grads.t[t].data[i]));
    }
  }
}

TEST_CASE("1-d quadratic: accepted delta matches the closed form") {
  // loss = 0.5*h*(theta-a)^2 with curvature h known exactly:
  // delta = eta*(theta-a)*h/(h+lambda)
  float h = 2.0f, theta = 1.5f, a = 0.25f, lambda = 0.1f, eta = 0.125f;
  float g = h * (theta - a);  // gradient at theta
  float precond = g / (h + lambda);
  float expect = eta * precond;
  // replicate the anti_update candidate computation elementwise
  float delta = eta * (g / (h + lambda));
  CHECK(testutil::same_bits(delta, expect));
  // H-norm of the step: sqrt(h)*|delta|
  double norm = std::sqrt(double(h) * double(delta) * double(delta));
  CHECK(norm == doctest::Approx(std::sqrt(2.0) * std::abs(double(delta))));
}

TEST_CASE("damping limit: growing lambda monotonically shrinks the step") {
  float g = 0.8f, h = 0.5f, eta = 1.0f;
  float prev = std::numeric_limits<float>::max();
  for (float lambda : {1e-3f, 1e-1f, 1.0f, 10.0f, 1000.0f}) {
    float delta = eta * (g / (h + lambda));
    CHECK(delta < prev);
    prev = delta;
  }
  CHECK(prev < 1e-3f);
}

TEST_CASE("trust region is enforced on every acceptance") {
  Corpus corpus = testutil::small_corpus(8);
  ModelParams p = init_params(dims(), 3);
  FisherDiag f = estimate_fisher_diag(p, corpus, {5, 6, 7}, 0.0);
  f.damping = default_damping(f);
  HotPathConfig cfg;
  cfg.max_anti_steps = 3;
  cfg.eta = 10.0f;  // forces backtracking against the trust radius
  cfg.trust_radius = 0.05f;
  cfg.utility_band_pct = 100.0f;
  HotPathReport rep = anti_update(p, corpus, {1, 2}, f, {5, 6, 7}, cfg);
  for (const AntiStepRecord& s : rep.steps) {
    if (rep.feasible || s.accepted_eta > 0.0f) {
      CHECK(s.delta_norm_h <= cfg.trust_radius);
      CHECK(s.forget_loss_after > s.forget_loss_before);
    }
  }
}

TEST_CASE("backtracking exhaustion reports infeasible (escalation signal)") {
  Corpus corpus = testutil::small_corpus(8);
  ModelParams p = init_params(dims(), 3);
  FisherDiag f = estimate_fisher_diag(p, corpus, {5, 6}, 0.0);
  f.damping = default_damping(f);
  HotPathConfig cfg;
  cfg.max_anti_steps = 1;
  cfg.eta = 1.0f;
  cfg.trust_radius = 0.0f;  // nothing can satisfy the trust region
  HotPathReport rep = anti_update(p, corpus, {1, 2}, f, {5, 6}, cfg);
  CHECK_FALSE(rep.feasible);
  CHECK_FALSE(rep.infeasible_reason.empty());
  // report serializes
  CHECK(rep.to_json().find("infeasible_reason") != std::string::npos);
}

TEST_CASE("anti-update requires positive damping") {
  Corpus corpus = testutil::small_corpus(4);
  ModelParams p = init_params(dims(), 3);
  FisherDiag f = estimate_fisher_diag(p, corpus, {1}, 0.0);
  CHECK_THROWS_AS(anti_update(p, corpus, {2}, f, {1}, {}), PreconditionError);
}

TEST_CASE("retain_tune with zero steps is the identity") {
  Corpus corpus = testutil::small_corpus(8);
  TrainState st(dims(), 3);
  Digest256 before = state_hash(st.params, st.opt);
  RetainTuneResult r = retain_tune(st, corpus, {1, 2, 3}, 0, 1e-3f, opt_cfg(), 5);
  CHECK(state_hash(st.params, st.opt) == before);
  CHECK(r.loss_before == r.loss_after);
}

TEST_CASE("retain_tune reduces the retain loss on a fresh model") {
  Corpus corpus = testutil::small_corpus(8);
  TrainState st(dims(), 3);
  RetainTuneResult r = retain_tune(st, corpus, {1, 2, 3, 4}, 12, 5e-3f, opt_cfg(), 5);
  CHECK(r.loss_after < r.loss_before);
  CHECK_FALSE(r.warned_nonmonotone);
  CHECK(st.opt.step == 12);
}

TEST_CASE("retain_tune is deterministic") {
  Corpus corpus = testutil::small_corpus(8);
  TrainState a(dims(), 3), b(dims(), 3);
  retain_tune(a, corpus, {1, 2, 3}, 6, 1e-3f, opt_cfg(), 5);
  retain_tune(b, corpus, {1, 2, 3}, 6, 1e-3f, opt_cfg(), 5);
  CHECK(state_hash(a.params, a.opt) == state_hash(b.params, b.opt));
}
