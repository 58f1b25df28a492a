#include "unlearn/adapters.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "unlearn/bytes.hpp"
#include "unlearn/errors.hpp"
#include "unlearn/hashing.hpp"

namespace unlearn {

namespace {

constexpr char kAdapterMagic[8] = {'U', 'L', 'A', 'D', 'P', 'T', '0', '1'};

// W[i][j] += sum_k a[i][k] * b[j][k]. The dot accumulates in f64 and
// rounds once, so a compacted adapter's contribution stays within one ulp
// of the sum of its members' contributions even under cancellation.
void add_contribution(Tensor& w, const AdapterLayer& layer) {
  uint32_t in_dim = layer.a.shape[0];
  uint32_t rank = layer.a.shape[1];
  uint32_t out_dim = layer.b.shape[0];
  if (w.shape[0] != in_dim || w.shape[1] != out_dim)
    throw PreconditionError("adapter contribution shape mismatch on " + layer.hooked);
  for (uint32_t i = 0; i < in_dim; ++i) {
    const float* arow = layer.a.ptr() + size_t(i) * rank;
    float* wrow = w.ptr() + size_t(i) * out_dim;
    for (uint32_t j = 0; j < out_dim; ++j) {
      const float* brow = layer.b.ptr() + size_t(j) * rank;
      double c = 0.0;
      for (uint32_t k = 0; k < rank; ++k)
        c += static_cast<double>(arow[k]) * static_cast<double>(brow[k]);
      wrow[j] += static_cast<float>(c);
    }
  }
}

}  // namespace

Adapter make_adapter(uint64_t cohort_id, const ModelDims& dims, uint32_t rank_w1,
                     uint32_t rank_w2, uint64_t master_seed) {
  Adapter ad;
  ad.cohort_id = cohort_id;
  AdapterLayer l1;
  l1.hooked = "w1";
  l1.rank = rank_w1;
  l1.a = Tensor("adapter.w1.a", {dims.embed, rank_w1});
  l1.b = Tensor("adapter.w1.b", {dims.hidden, rank_w1});
  AdapterLayer l2;
  l2.hooked = "w2";
  l2.rank = rank_w2;
  l2.a = Tensor("adapter.w2.a", {dims.hidden, rank_w2});
  l2.b = Tensor("adapter.w2.b", {dims.vocab, rank_w2});
  // A random, B zero: initial contribution is exactly zero
  float s1 = 1.0f / std::sqrt(static_cast<float>(dims.embed));
  float s2 = 1.0f / std::sqrt(static_cast<float>(dims.hidden));
  for (size_t i = 0; i < l1.a.data.size(); ++i)
    l1.a.data[i] = rng_symmetric({master_seed ^ cohort_id, i, 0, kRngAdapterInit, 1}, s1);
  for (size_t i = 0; i < l2.a.data.size(); ++i)
    l2.a.data[i] = rng_symmetric({master_seed ^ cohort_id, i, 0, kRngAdapterInit, 2}, s2);
  ad.layers.push_back(std::move(l1));
  ad.layers.push_back(std::move(l2));
  return ad;
}

ModelParams compose_serving(const ModelParams& base, const std::vector<const Adapter*>& adapters) {
  std::vector<const Adapter*> sorted = adapters;
  std::sort(sorted.begin(), sorted.end(),
            [](const Adapter* x, const Adapter* y) { return x->cohort_id < y->cohort_id; });
  ModelParams out = base;
  for (const Adapter* ad : sorted) {
    for (const AdapterLayer& layer : ad->layers) {
      add_contribution(layer.hooked == "w1" ? out.w1 : out.w2, layer);
    }
  }
  return out;
}

void Adapter::save(const std::string& path) const {
  std::vector<uint8_t> out;
  out.insert(out.end(), kAdapterMagic, kAdapterMagic + 8);
  put_u64(out, cohort_id);
  out.push_back(merged ? 1 : 0);
  put_u32(out, static_cast<uint32_t>(layers.size()));
  for (const AdapterLayer& l : layers) {
    out.push_back(l.hooked == "w1" ? 1 : 2);
    put_u32(out, l.rank);
    for (const Tensor* t : {&l.a, &l.b}) {
      put_u32(out, t->shape[0]);
      put_u32(out, t->shape[1]);
      size_t off = out.size();
      out.resize(off + t->byte_count());
      std::memcpy(out.data() + off, t->data.data(), t->byte_count());
    }
  }
  put_u32(out, static_cast<uint32_t>(trained_sample_ids.size()));
  for (uint64_t id : trained_sample_ids) put_u64(out, id);
  put_u32(out, static_cast<uint32_t>(compacted_from.size()));
  for (uint64_t id : compacted_from) put_u64(out, id);
  Digest256 trailer = sha256(out);
  out.insert(out.end(), trailer.begin(), trailer.end());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("Adapter: cannot open " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("Adapter: write failed " + path);
}

Adapter Adapter::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("Adapter: cannot open " + path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 8 + 8 + 1 + 4 + 32 || !std::equal(kAdapterMagic, kAdapterMagic + 8, buf.begin()))
    throw CorruptionError("Adapter: bad magic");
  Digest256 expect;
  std::memcpy(expect.data(), buf.data() + buf.size() - 32, 32);
  if (sha256(buf.data(), buf.size() - 32) != expect)
    throw CorruptionError("Adapter: SHA-256 mismatch");
  size_t off = 8;
  Adapter ad;
  ad.cohort_id = get_u64(buf.data() + off);
  off += 8;
  ad.merged = buf[off++] != 0;
  uint32_t layer_count = get_u32(buf.data() + off);
  off += 4;
  for (uint32_t li = 0; li < layer_count; ++li) {
    AdapterLayer l;
    l.hooked = buf[off++] == 1 ? "w1" : "w2";
    l.rank = get_u32(buf.data() + off);
    off += 4;
    for (Tensor* t : {&l.a, &l.b}) {
      uint32_t d0 = get_u32(buf.data() + off);
      off += 4;
      uint32_t d1 = get_u32(buf.data() + off);
      off += 4;
      *t = Tensor("adapter." + l.hooked + (t == &l.a ? ".a" : ".b"), {d0, d1});
      if (off + t->byte_count() > buf.size() - 32) throw CorruptionError("Adapter: truncated");
      std::memcpy(t->data.data(), buf.data() + off, t->byte_count());
      off += t->byte_count();
    }
    ad.layers.push_back(std::move(l));
  }
  uint32_t n_ids = get_u32(buf.data() + off);
  off += 4;
  for (uint32_t i = 0; i < n_ids; ++i) {
    ad.trained_sample_ids.push_back(get_u64(buf.data() + off));
    off += 8;
  }
  uint32_t n_comp = get_u32(buf.data() + off);
  off += 4;
  for (uint32_t i = 0; i < n_comp; ++i) {
    ad.compacted_from.push_back(get_u64(buf.data() + off));
    off += 8;
  }
  return ad;
}

AdapterRegistry::AdapterRegistry(std::string journal_path)
    : journal_path_(std::move(journal_path)) {}

void AdapterRegistry::add(Adapter adapter) {
  uint64_t id = adapter.cohort_id;
  if (adapters_.count(id)) throw PreconditionError("AdapterRegistry: cohort already present");
  adapters_.emplace(id, std::move(adapter));
}

bool AdapterRegistry::has(uint64_t cohort_id) const { return adapters_.count(cohort_id) > 0; }

const Adapter& AdapterRegistry::get(uint64_t cohort_id) const {
  auto it = adapters_.find(cohort_id);
  if (it == adapters_.end()) throw PreconditionError("AdapterRegistry: unknown cohort");
  return it->second;
}

std::vector<const Adapter*> AdapterRegistry::live_adapters() const {
  std::vector<const Adapter*> out;
  for (const auto& [id, ad] : adapters_) out.push_back(&ad);
  return out;
}

std::vector<uint64_t> AdapterRegistry::cohort_ids() const {
  std::vector<uint64_t> out;
  for (const auto& [id, ad] : adapters_) out.push_back(id);
  return out;
}

std::optional<uint64_t> AdapterRegistry::cohort_of_sample(uint64_t sample_id) const {
  for (const auto& [id, ad] : adapters_) {
    if (std::find(ad.trained_sample_ids.begin(), ad.trained_sample_ids.end(), sample_id) !=
        ad.trained_sample_ids.end())
      return id;
  }
  return std::nullopt;
}

void AdapterRegistry::journal_append(const std::string& line) {
  if (journal_path_.empty()) return;
  std::ofstream f(journal_path_, std::ios::app);
  if (!f) throw IoError("AdapterRegistry: cannot append journal");
  f << line << "\n";
  f.flush();
}

void AdapterRegistry::delete_adapter(uint64_t cohort_id) {
  auto it = adapters_.find(cohort_id);
  if (it == adapters_.end())
    throw PreconditionError("delete_adapter: cohort " + std::to_string(cohort_id) +
                            " not present (already deleted?)");
  if (it->second.merged)
    throw EscalateToReplay("delete_adapter: cohort " + std::to_string(cohort_id) +
                           " was merged; exact deletion impossible, route to replay");
  for (const auto& [id, ad] : adapters_) {
    if (std::find(ad.compacted_from.begin(), ad.compacted_from.end(), cohort_id) !=
        ad.compacted_from.end())
      throw EscalateToReplay("delete_adapter: cohort " + std::to_string(cohort_id) +
                             " was compacted into " + std::to_string(id) +
                             "; route to replay");
  }
  journal_append("intent delete " + std::to_string(cohort_id));
  adapters_.erase(it);
  if (crash_after_remove) {
    // test hook: simulate a crash between the removal and the commit
    return;
  }
  journal_append("commit delete " + std::to_string(cohort_id));
}

AdapterRegistry::JournalStatus AdapterRegistry::check_journal() const {
  JournalStatus status;
  if (journal_path_.empty()) return status;
  std::ifstream f(journal_path_);
  if (!f) return status;
  std::map<uint64_t, int> pending;  // intents minus commits
  std::string word, action;
  uint64_t id;
  while (f >> word >> action >> id) {
    if (action != "delete") continue;
    if (word == "intent") pending[id] += 1;
    if (word == "commit") pending[id] -= 1;
  }
  for (const auto& [cid, n] : pending) {
    if (n > 0) {
      status.consistent = false;
      status.interrupted_deletes.push_back(cid);
    }
  }
  return status;
}

void AdapterRegistry::repair() {
  JournalStatus status = check_journal();
  for (uint64_t cid : status.interrupted_deletes) {
    adapters_.erase(cid);  // deletion wins: re-apply and commit
    journal_append("commit delete " + std::to_string(cid));
  }
}

Adapter train_cohort(const ModelParams& base, const Corpus& corpus,
                     const std::vector<uint64_t>& cohort_sample_ids, const CohortTrainConfig& ccfg,
                     const TrainConfig& opt_cfg, AdapterRegistry* registry) {
  if (cohort_sample_ids.empty()) throw PreconditionError("train_cohort: empty cohort corpus");
  Digest256 base_hash_before = model_hash(base);

  Adapter ad = make_adapter(registry ? registry->cohort_ids().size() + 1 : 1, base.dims,
                            ccfg.rank_w1, ccfg.rank_w2, ccfg.seed);
  ad.trained_sample_ids = cohort_sample_ids;

  // flat adapter parameter view for AdamW moments
  std::vector<Tensor*> factors;
  for (AdapterLayer& l : ad.layers) {
    factors.push_back(&l.a);
    factors.push_back(&l.b);
  }
  std::vector<Tensor> m, v;
  for (Tensor* t : factors) {
    m.push_back(Tensor(t->name + ".m", t->shape));
    v.push_back(Tensor(t->name + ".v", t->shape));
  }
  uint64_t adapter_step = 0;

  for (uint32_t step = 0; step < ccfg.steps; ++step) {
    // microbatch: deterministic round-robin slices of the cohort ids
    std::vector<uint64_t> ids;
    for (uint32_t k = 0; k < ccfg.microbatch_size; ++k) {
      ids.push_back(
          cohort_sample_ids[(size_t(step) * ccfg.microbatch_size + k) % cohort_sample_ids.size()]);
    }
    std::vector<const Adapter*> views{&ad};
    ModelParams served = compose_serving(base, views);
    uint64_t seed = rng_u64({ccfg.seed, step, 0, kRngMicrobatchSeed, 1});
    GradResult g = grad(served, corpus, ids, seed, {});

    // project dW onto the factors: dA = dW . B, dB = dW^T . A
    const Tensor* dws[2] = {&g.grads.t[1], &g.grads.t[3]};  // w1, w2 grads
    std::vector<Tensor> factor_grads;
    for (size_t li = 0; li < ad.layers.size(); ++li) {
      const AdapterLayer& l = ad.layers[li];
      const Tensor& dw = *dws[li];
      uint32_t in_dim = l.a.shape[0], rank = l.rank, out_dim = l.b.shape[0];
      Tensor da(l.a.name + ".grad", l.a.shape);
      Tensor db(l.b.name + ".grad", l.b.shape);
      for (uint32_t i = 0; i < in_dim; ++i) {
        for (uint32_t k = 0; k < rank; ++k) {
          float acc = 0.0f;
          for (uint32_t j = 0; j < out_dim; ++j)
            acc += dw.data[size_t(i) * out_dim + j] * l.b.data[size_t(j) * rank + k];
          da.data[size_t(i) * rank + k] = acc;
        }
      }
      for (uint32_t j = 0; j < out_dim; ++j) {
        for (uint32_t k = 0; k < rank; ++k) {
          float acc = 0.0f;
          for (uint32_t i = 0; i < in_dim; ++i)
            acc += dw.data[size_t(i) * out_dim + j] * l.a.data[size_t(i) * rank + k];
          db.data[size_t(j) * rank + k] = acc;
        }
      }
      factor_grads.push_back(std::move(da));
      factor_grads.push_back(std::move(db));
    }

    // AdamW on the factors only; the base is never touched
    ++adapter_step;
    float bc1 = 1.0f - std::pow(opt_cfg.beta1, static_cast<float>(adapter_step));
    float bc2 = 1.0f - std::pow(opt_cfg.beta2, static_cast<float>(adapter_step));
    for (size_t fi = 0; fi < factors.size(); ++fi) {
      float* p = factors[fi]->ptr();
      const float* gr = factor_grads[fi].ptr();
      float* mm = m[fi].ptr();
      float* vv = v[fi].ptr();
      for (size_t i = 0; i < factors[fi]->element_count(); ++i) {
        p[i] = p[i] - ccfg.lr * opt_cfg.weight_decay * p[i];
        mm[i] = opt_cfg.beta1 * mm[i] + (1.0f - opt_cfg.beta1) * gr[i];
        vv[i] = opt_cfg.beta2 * vv[i] + (1.0f - opt_cfg.beta2) * gr[i] * gr[i];
        float m_hat = mm[i] / bc1;
        float v_hat = vv[i] / bc2;
        p[i] = p[i] - ccfg.lr * (m_hat / (std::sqrt(v_hat) + opt_cfg.eps));
      }
    }
  }

  if (model_hash(base) != base_hash_before)
    throw IntegrityError("train_cohort: base parameters changed while training (freeze violated)");
  if (registry != nullptr) registry->add(ad);
  return ad;
}

Adapter compact(const AdapterRegistry& registry, const std::vector<uint64_t>& cohort_set,
                uint64_t new_cohort_id) {
  if (cohort_set.empty()) throw PreconditionError("compact: empty cohort set");
  std::vector<uint64_t> sorted = cohort_set;
  std::sort(sorted.begin(), sorted.end());
  for (uint64_t cid : sorted) {
    if (registry.get(cid).merged) throw PreconditionError("compact: merged adapter in the set");
  }
  const Adapter& first = registry.get(sorted.front());
  Adapter out;
  out.cohort_id = new_cohort_id;
  out.compacted_from = sorted;
  for (size_t li = 0; li < first.layers.size(); ++li) {
    uint32_t total_rank = 0;
    for (uint64_t cid : sorted) total_rank += registry.get(cid).layers[li].rank;
    const AdapterLayer& proto = first.layers[li];
    AdapterLayer l;
    l.hooked = proto.hooked;
    l.rank = total_rank;
    uint32_t in_dim = proto.a.shape[0], out_dim = proto.b.shape[0];
    l.a = Tensor(proto.a.name, {in_dim, total_rank});
    l.b = Tensor(proto.b.name, {out_dim, total_rank});
    uint32_t col = 0;
    for (uint64_t cid : sorted) {
      const AdapterLayer& src = registry.get(cid).layers[li];
      for (uint32_t i = 0; i < in_dim; ++i) {
        for (uint32_t k = 0; k < src.rank; ++k)
          l.a.data[size_t(i) * total_rank + col + k] = src.a.data[size_t(i) * src.rank + k];
      }
      for (uint32_t j = 0; j < out_dim; ++j) {
        for (uint32_t k = 0; k < src.rank; ++k)
          l.b.data[size_t(j) * total_rank + col + k] = src.b.data[size_t(j) * src.rank + k];
      }
      col += src.rank;
      const auto& ids = registry.get(cid).trained_sample_ids;
      out.trained_sample_ids.insert(out.trained_sample_ids.end(), ids.begin(), ids.end());
    }
    out.layers.push_back(std::move(l));
  }
  return out;
}

}  // namespace unlearn
