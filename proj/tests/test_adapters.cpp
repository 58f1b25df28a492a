#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "test_util.hpp"
#include "unlearn/adapters.hpp"
#include "unlearn/errors.hpp"

using namespace unlearn;

namespace {

ModelDims dims() { return {kVocabSize, 32, 8, 16}; }

TrainConfig opt_cfg() {
  TrainConfig cfg;
  cfg.dims = dims();
  return cfg;
}

bool params_equal(const ModelParams& a, const ModelParams& b) {
  auto ta = a.tensors();
  auto tb = b.tensors();
  for (size_t i = 0; i < ta.size(); ++i) {
    if (std::memcmp(ta[i]->ptr(), tb[i]->ptr(), ta[i]->byte_count()) != 0) return false;
  }
  return true;
}

// dense f32 contribution of one adapter layer (f64 dot, rounded once),
// mirroring the pinned composition arithmetic
Tensor dense_contribution(const AdapterLayer& l) {
  uint32_t in = l.a.shape[0], r = l.a.shape[1], out = l.b.shape[0];
  Tensor w("dense", {in, out});
  for (uint32_t i = 0; i < in; ++i) {
    for (uint32_t j = 0; j < out; ++j) {
      double acc = 0.0;
      for (uint32_t k = 0; k < r; ++k)
        acc += double(l.a.data[size_t(i) * r + k]) * double(l.b.data[size_t(j) * r + k]);
      w.data[size_t(i) * out + j] = static_cast<float>(acc);
    }
  }
  return w;
}

// exact (f64) summed contribution of several layers: the oracle the
// compacted contribution is compared against
Tensor dense_sum_f64(const std::vector<const AdapterLayer*>& layers) {
  uint32_t in = layers[0]->a.shape[0], out = layers[0]->b.shape[0];
  Tensor w("dense_sum", {in, out});
  std::vector<double> acc(size_t(in) * out, 0.0);
  for (const AdapterLayer* l : layers) {
    uint32_t r = l->a.shape[1];
    for (uint32_t i = 0; i < in; ++i) {
      for (uint32_t j = 0; j < out; ++j) {
        for (uint32_t k = 0; k < r; ++k) {
          acc[size_t(i) * out + j] +=
              double(l->a.data[size_t(i) * r + k]) * double(l->b.data[size_t(j) * r + k]);
        }
      }
    }
  }
  for (size_t i = 0; i < acc.size(); ++i) w.data[i] = static_cast<float>(acc[i]);
  return w;
}

int64_t ulp_dist(float a, float b) {
  int32_t x, y;
  std::memcpy(&x, &a, 4);
  std::memcpy(&y, &b, 4);
  auto fold = [](int32_t v) {
    return v < 0 ? std::numeric_limits<int32_t>::min() - v : v;
  };
  return std::abs(int64_t(fold(x)) - int64_t(fold(y)));
}

}  // namespace

TEST_CASE("fresh adapter contributes exactly nothing (B starts zero)") {
  ModelParams base = init_params(dims(), 3);
  Adapter ad = make_adapter(1, dims(), 8, 4, 7);
  ModelParams served = compose_serving(base, {&ad});
  CHECK(params_equal(served, base));
  // A is randomly initialized, B is zero
  bool a_nonzero = false;
  for (float v : ad.layers[0].a.data) a_nonzero |= v != 0.0f;
  CHECK(a_nonzero);
  for (float v : ad.layers[0].b.data) CHECK(v == 0.0f);
}

TEST_CASE("training a cohort never touches the base and the registry records it") {
  Corpus corpus = testutil::small_corpus(12);
  ModelParams base = init_params(dims(), 3);
  Digest256 before = model_hash(base);
  AdapterRegistry registry;
  CohortTrainConfig ccfg;
  ccfg.steps = 6;
  std::vector<uint64_t> cohort_ids{1, 2, 3, 4};
  Adapter ad = train_cohort(base, corpus, cohort_ids, ccfg, opt_cfg(), &registry);
  CHECK(model_hash(base) == before);
  CHECK(registry.has(ad.cohort_id));
  CHECK(registry.cohort_of_sample(2).has_value());
  CHECK(*registry.cohort_of_sample(2) == ad.cohort_id);
  CHECK_FALSE(registry.cohort_of_sample(99).has_value());
  // training moved the factors: contribution is no longer zero
  ModelParams served = compose_serving(base, registry.live_adapters());
  CHECK_FALSE(params_equal(served, base));
}

TEST_CASE("two-path forward: composition equals explicit weight addition bit-for-bit") {
  ModelParams base = init_params(dims(), 3);
  Adapter ad = make_adapter(2, dims(), 4, 2, 9);
  // give B nonzero values
  for (size_t i = 0; i < ad.layers[0].b.data.size(); ++i)
    ad.layers[0].b.data[i] = rng_symmetric({5, i, 0, 91, 0}, 0.1f);
  for (size_t i = 0; i < ad.layers[1].b.data.size(); ++i)
    ad.layers[1].b.data[i] = rng_symmetric({5, i, 0, 92, 0}, 0.1f);

  ModelParams composed = compose_serving(base, {&ad});
  // manual: base + A.B^T with the same dot order
  ModelParams manual = base;
  Tensor c1 = dense_contribution(ad.layers[0]);
  Tensor c2 = dense_contribution(ad.layers[1]);
  for (size_t i = 0; i < manual.w1.data.size(); ++i) manual.w1.data[i] += c1.data[i];
  for (size_t i = 0; i < manual.w2.data.size(); ++i) manual.w2.data[i] += c2.data[i];
  CHECK(params_equal(composed, manual));

  Corpus corpus = testutil::small_corpus(2);
  LossResult a = forward_loss_sum(composed, corpus, {1});
  LossResult b = forward_loss_sum(manual, corpus, {1});
  CHECK(a.loss == b.loss);
}

TEST_CASE("deleting the only cohort restores the base byte-for-byte (G2)") {
  Corpus corpus = testutil::small_corpus(8);
  ModelParams base = init_params(dims(), 3);
  AdapterRegistry registry;
  CohortTrainConfig ccfg;
  ccfg.steps = 4;
  train_cohort(base, corpus, {1, 2}, ccfg, opt_cfg(), &registry);
  ModelParams with = compose_serving(base, registry.live_adapters());
  CHECK_FALSE(params_equal(with, base));
  registry.delete_adapter(1);
  ModelParams after = compose_serving(base, registry.live_adapters());
  CHECK(params_equal(after, base));
  // double delete errors
  CHECK_THROWS_AS(registry.delete_adapter(1), PreconditionError);
}

TEST_CASE("deleting one of two cohorts equals a fresh composition of the rest") {
  Corpus corpus = testutil::small_corpus(10);
  ModelParams base = init_params(dims(), 3);
  AdapterRegistry registry;
  CohortTrainConfig ccfg;
  ccfg.steps = 4;
  train_cohort(base, corpus, {1, 2}, ccfg, opt_cfg(), &registry);
  ccfg.seed = 8;
  Adapter second = train_cohort(base, corpus, {5, 6}, ccfg, opt_cfg(), &registry);
  registry.delete_adapter(1);
  ModelParams after = compose_serving(base, registry.live_adapters());
  ModelParams fresh = compose_serving(base, {&second});
  CHECK(params_equal(after, fresh));
}

TEST_CASE("merged adapters refuse deletion and signal escalation") {
  ModelParams base = init_params(dims(), 3);
  AdapterRegistry registry;
  Adapter ad = make_adapter(4, dims(), 2, 2, 1);
  ad.merged = true;
  registry.add(std::move(ad));
  CHECK_THROWS_AS(registry.delete_adapter(4), EscalateToReplay);
}

TEST_CASE("members of a compacted set refuse deletion") {
  ModelParams base = init_params(dims(), 3);
  AdapterRegistry registry;
  registry.add(make_adapter(1, dims(), 2, 2, 1));
  registry.add(make_adapter(2, dims(), 2, 2, 2));
  Adapter packed = compact(registry, {1, 2}, 10);
  registry.delete_adapter(1);
  registry.delete_adapter(2);
  registry.add(std::move(packed));
  CHECK_THROWS_AS(registry.delete_adapter(1), PreconditionError);  // already gone
  CHECK_THROWS_AS(registry.delete_adapter(2), PreconditionError);
  // the originals are recorded as compacted-into-10: deleting them via the
  // compacted adapter is refused
  AdapterRegistry registry2;
  registry2.add(make_adapter(1, dims(), 2, 2, 1));
  Adapter packed2 = compact(registry2, {1}, 11);
  registry2.add(std::move(packed2));
  CHECK_THROWS_AS(registry2.delete_adapter(1), EscalateToReplay);
}

TEST_CASE("compact: singleton is bit-equal, rank-1 pairs are exact") {
  ModelParams base = init_params(dims(), 3);
  AdapterRegistry registry;
  Adapter a1 = make_adapter(1, dims(), 1, 1, 5);
  Adapter a2 = make_adapter(2, dims(), 1, 1, 6);
  for (Adapter* ad : {&a1, &a2}) {
    for (AdapterLayer& l : ad->layers) {
      for (size_t i = 0; i < l.b.data.size(); ++i)
        l.b.data[i] = rng_symmetric({ad->cohort_id, i, 0, 93, 0}, 0.2f);
    }
  }
  registry.add(a1);
  registry.add(a2);

  // singleton: contribution bit-equal
  Adapter single = compact(registry, {1}, 20);
  for (size_t li = 0; li < single.layers.size(); ++li) {
    Tensor orig = dense_contribution(a1.layers[li]);
    Tensor packed = dense_contribution(single.layers[li]);
    CHECK(std::memcmp(orig.ptr(), packed.ptr(), orig.byte_count()) == 0);
  }

  // two rank-1 adapters: block concatenation reproduces the exact summed
  // contribution (one product per block, one rounding)
  Adapter pair = compact(registry, {1, 2}, 21);
  CHECK(pair.layers[0].rank == 2);
  for (size_t li = 0; li < pair.layers.size(); ++li) {
    Tensor sum = dense_sum_f64({&a1.layers[li], &a2.layers[li]});
    Tensor packed = dense_contribution(pair.layers[li]);
    CHECK(std::memcmp(sum.ptr(), packed.ptr(), sum.byte_count()) == 0);
  }
}

TEST_CASE("compact: three adapters agree with the dense sum within 1 ulp") {
  ModelDims d = dims();
  AdapterRegistry registry;
  std::vector<Adapter> originals;
  for (uint64_t cid = 1; cid <= 3; ++cid) {
    Adapter ad = make_adapter(cid, d, 3, 2, cid * 11);
    for (AdapterLayer& l : ad.layers) {
      for (size_t i = 0; i < l.b.data.size(); ++i)
        l.b.data[i] = rng_symmetric({cid, i, 0, 94, 0}, 0.15f);
    }
    originals.push_back(ad);
    registry.add(ad);
  }
  Adapter packed = compact(registry, {1, 2, 3}, 30);
  CHECK(packed.layers[0].rank == 9);
  for (size_t li = 0; li < packed.layers.size(); ++li) {
    Tensor sum = dense_sum_f64(
        {&originals[0].layers[li], &originals[1].layers[li], &originals[2].layers[li]});
    Tensor got = dense_contribution(packed.layers[li]);
    for (size_t i = 0; i < sum.data.size(); ++i) {
      CHECK(ulp_dist(sum.data[i], got.data[i]) <= 1);
    }
  }
}

TEST_CASE("adapter files round-trip and detect corruption") {
  std::string dir = testutil::tmp_dir("adapter_file");
  Adapter ad = make_adapter(7, dims(), 4, 2, 3);
  ad.trained_sample_ids = {10, 11, 12};
  for (size_t i = 0; i < ad.layers[0].b.data.size(); ++i) ad.layers[0].b.data[i] = 0.125f;
  std::string path = dir + "/a.bin";
  ad.save(path);
  Adapter back = Adapter::load(path);
  CHECK(back.cohort_id == 7);
  CHECK(back.trained_sample_ids == ad.trained_sample_ids);
  CHECK(back.layers[0].a.data == ad.layers[0].a.data);
  CHECK(back.layers[0].b.data == ad.layers[0].b.data);
  CHECK(back.layers[1].rank == 2);
  {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(64);
    f.put('\x42');
  }
  CHECK_THROWS_AS(Adapter::load(path), CorruptionError);
}

TEST_CASE("interrupted deletion is detectable and repairable via the journal") {
  std::string dir = testutil::tmp_dir("adapter_journal");
  AdapterRegistry registry(dir + "/journal.log");
  registry.add(make_adapter(1, dims(), 2, 2, 1));
  registry.add(make_adapter(2, dims(), 2, 2, 2));
  registry.delete_adapter(1);
  CHECK(registry.check_journal().consistent);

  registry.crash_after_remove = true;  // crash between delete and commit
  registry.delete_adapter(2);
  auto status = registry.check_journal();
  CHECK_FALSE(status.consistent);
  REQUIRE(status.interrupted_deletes.size() == 1);
  CHECK(status.interrupted_deletes[0] == 2);

  registry.crash_after_remove = false;
  registry.repair();
  CHECK(registry.check_journal().consistent);
  CHECK_FALSE(registry.has(2));
}
