#include "unlearn/corpus.hpp"

#include <algorithm>
#include <bit>
#include <fstream>

#include <json.hpp>

#include "unlearn/bytes.hpp"
#include "unlearn/closure.hpp"
#include "unlearn/errors.hpp"

namespace unlearn {

namespace {

constexpr char kCorpusMagic[8] = {'U', 'L', 'C', 'O', 'R', 'P', '0', '1'};

// Byte ranges. Plain text stays in lowercase+space; reserved ranges keep
// canary fills and secret suffixes out of ordinary transitions so a small
// model can memorize them unambiguously.
constexpr uint8_t kCanaryByteBase = 128;   // 128..191: canary slot values
constexpr uint8_t kSecretByteBase = 192;   // 192..255: secret markers+suffixes

uint8_t text_byte(uint64_t seed, uint64_t doc, uint32_t pos, uint32_t attempt) {
  uint64_t r = rng_u64({seed, doc, pos, kRngCorpusGen, attempt});
  uint32_t v = static_cast<uint32_t>(r % 27);
  return v == 26 ? uint8_t(' ') : uint8_t('a' + v);
}

std::vector<uint8_t> make_text(uint64_t seed, uint64_t doc, uint32_t len) {
  std::vector<uint8_t> bytes(len);
  for (uint32_t i = 0; i < len; ++i) bytes[i] = text_byte(seed, doc, i, 0);
  return bytes;
}

// Perturb a copy of `base` until it passes the near-duplicate admission
// thresholds against the original; deterministic retry ladder.
std::vector<uint8_t> make_variant(const std::vector<uint8_t>& base, uint64_t seed, uint64_t doc,
                                  const GenCorpusOptions& opt) {
  uint64_t base_sig = simhash64(base);
  auto base_sh = shingle_hashes(base);
  for (uint32_t attempt = 1; attempt <= 64; ++attempt) {
    std::vector<uint8_t> v = base;
    // change one lowercase position; leave reserved bytes intact
    uint32_t tries = 0;
    uint32_t pos;
    do {
      pos = static_cast<uint32_t>(rng_below({seed, doc, attempt, kRngCorpusGen, ++tries}, v.size()));
    } while (v[pos] >= 128 && tries < 256);
    v[pos] = text_byte(seed, doc, pos, attempt);
    if (v == base) continue;
    int ham = std::popcount(base_sig ^ simhash64(v));
    double sim = jaccard(base_sh, shingle_hashes(v));
    if (ham <= opt.tau_hamming && sim >= opt.tau_jaccard) return v;
  }
  // Appending a single byte touches at most one shingle; admission is
  // all but certain, and the loop above has never been observed to fall
  // through at the default thresholds.
  std::vector<uint8_t> v = base;
  v.push_back(text_byte(seed, doc, static_cast<uint32_t>(v.size()), 65));
  return v;
}

}  // namespace

std::vector<uint8_t> CanarySpec::fill_for(uint32_t bits) const {
  std::vector<uint8_t> fill(slots.size());
  for (size_t i = 0; i < slots.size(); ++i) {
    fill[i] = (bits >> i) & 1 ? slots[i].second : slots[i].first;
  }
  return fill;
}

Corpus::Corpus(std::vector<Document> docs) : docs_(std::move(docs)) {
  for (size_t i = 0; i < docs_.size(); ++i) {
    auto [it, inserted] = index_.emplace(docs_[i].id, i);
    if (!inserted) throw PreconditionError("Corpus: duplicate document id");
  }
}

const Document& Corpus::doc(uint64_t id) const {
  auto it = index_.find(id);
  if (it == index_.end())
    throw PreconditionError("Corpus: unknown sample id " + std::to_string(id));
  return docs_[it->second];
}

bool Corpus::contains(uint64_t id) const { return index_.count(id) > 0; }

std::vector<uint64_t> Corpus::all_ids() const {
  std::vector<uint64_t> ids;
  ids.reserve(docs_.size());
  for (const auto& [id, idx] : index_) ids.push_back(id);
  return ids;
}

std::vector<uint32_t> Corpus::tokens(uint64_t id, uint32_t ctx_len) const {
  const Document& d = doc(id);
  size_t body = std::min<size_t>(d.bytes.size(), ctx_len >= 2 ? ctx_len - 2 : 0);
  std::vector<uint32_t> t;
  t.reserve(body + 2);
  t.push_back(kTokenBos);
  for (size_t i = 0; i < body; ++i) t.push_back(d.bytes[i]);
  t.push_back(kTokenEos);
  return t;
}

void Corpus::save(const std::string& path) const {
  std::vector<uint8_t> out;
  out.insert(out.end(), kCorpusMagic, kCorpusMagic + 8);
  put_u32(out, 1);
  put_u64(out, docs_.size());
  for (const Document& d : docs_) {
    put_u64(out, d.id);
    put_u32(out, static_cast<uint32_t>(d.bytes.size()));
    out.insert(out.end(), d.bytes.begin(), d.bytes.end());
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("Corpus: cannot open for write: " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("Corpus: write failed: " + path);
}

Corpus Corpus::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("Corpus: cannot open: " + path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 20 || !std::equal(kCorpusMagic, kCorpusMagic + 8, buf.begin()))
    throw CorruptionError("Corpus: bad magic: " + path);
  size_t off = 8;
  uint32_t version = get_u32(buf.data() + off);
  off += 4;
  if (version != 1) throw CorruptionError("Corpus: unsupported version");
  uint64_t count = get_u64(buf.data() + off);
  off += 8;
  std::vector<Document> docs;
  docs.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    if (off + 12 > buf.size()) throw CorruptionError("Corpus: truncated");
    Document d;
    d.id = get_u64(buf.data() + off);
    off += 8;
    uint32_t len = get_u32(buf.data() + off);
    off += 4;
    if (off + len > buf.size()) throw CorruptionError("Corpus: truncated document");
    d.bytes.assign(buf.begin() + off, buf.begin() + off + len);
    off += len;
    docs.push_back(std::move(d));
  }
  return Corpus(std::move(docs));
}

GeneratedCorpus generate_corpus(const GenCorpusOptions& opt) {
  const uint64_t seed = opt.seed;
  std::vector<Document> docs;
  CorpusMeta meta;
  meta.seed = seed;
  meta.total = opt.size;
  meta.dup_rate = opt.dup_rate;

  constexpr uint64_t kCohortSize = 45;
  if (opt.size < kCohortSize + 10)
    throw PreconditionError("generate_corpus: size too small for the default cohort");

  uint64_t next_id = 1;
  auto fresh_id = [&next_id]() { return next_id++; };

  const bool with_variants = opt.dup_rate > 0.0;
  const size_t cohort_bases = with_variants ? 15 : kCohortSize;
  const size_t variants_per_base = with_variants ? 2 : 0;

  // --- forget cohort ---
  int canaries_left = opt.num_canaries;
  int secrets_left = 4;
  for (size_t b = 0; b < cohort_bases; ++b) {
    Document base;
    base.id = fresh_id();
    uint32_t len = 40 + static_cast<uint32_t>(rng_below({seed, base.id, 0, kRngCorpusGen, 9000}, 17));
    base.bytes = make_text(seed, base.id, len);
    if (canaries_left > 0) {
      // canary: uppercase prefix + k reserved fill bytes appended
      CanarySpec spec;
      spec.doc_id = base.id;
      spec.k = opt.canary_bits;
      for (int i = 0; i < 8; ++i) {
        spec.prefix.push_back(static_cast<uint8_t>(
            'A' + rng_below({seed, base.id, static_cast<uint32_t>(i), kRngCorpusGen, 9100}, 26)));
      }
      for (int i = 0; i < spec.k; ++i) {
        uint8_t lo = static_cast<uint8_t>(kCanaryByteBase + 2 * i);
        uint8_t hi = static_cast<uint8_t>(kCanaryByteBase + 2 * i + 1);
        spec.slots.emplace_back(lo, hi);
      }
      spec.true_bits = static_cast<uint32_t>(
          rng_u64({seed, base.id, 0, kRngCorpusGen, 9200}) & ((uint64_t(1) << spec.k) - 1));
      base.bytes.insert(base.bytes.end(), spec.prefix.begin(), spec.prefix.end());
      auto fill = spec.fill_for(spec.true_bits);
      base.bytes.insert(base.bytes.end(), fill.begin(), fill.end());
      meta.canaries.push_back(spec);
      --canaries_left;
    } else if (secrets_left > 0) {
      // secret: text prompt + reserved marker + suffix with globally
      // unique transitions (disjoint byte block per secret)
      SecretSpec spec;
      spec.doc_id = base.id;
      int block = 4 - secrets_left;  // 0..3, disjoint 16-byte blocks
      uint8_t marker = static_cast<uint8_t>(kSecretByteBase + block * 16);
      spec.suffix_len = 8;
      base.bytes.push_back(marker);
      spec.prompt_len = static_cast<uint32_t>(base.bytes.size());
      for (uint32_t i = 0; i < spec.suffix_len; ++i) {
        base.bytes.push_back(static_cast<uint8_t>(kSecretByteBase + block * 16 + 1 + i));
      }
      meta.secrets.push_back(spec);
      --secrets_left;
    }
    meta.cohort_bases.push_back(base.id);
    meta.forget_cohort.push_back(base.id);
    std::vector<uint64_t> family{base.id};
    std::vector<uint8_t> prev_bytes = base.bytes;
    docs.push_back(std::move(base));
    // chain: each variant perturbs the previous one, so families are
    // near-dup chains rather than stars
    for (size_t v = 0; v < variants_per_base; ++v) {
      Document var;
      var.id = fresh_id();
      var.bytes = make_variant(prev_bytes, seed, var.id, opt);
      prev_bytes = var.bytes;
      meta.forget_cohort.push_back(var.id);
      family.push_back(var.id);
      docs.push_back(std::move(var));
    }
    if (family.size() > 1) meta.dup_families.push_back(family);
  }

  // --- retain documents, with optional near-duplicate families ---
  size_t retain_total = opt.size - meta.forget_cohort.size();
  size_t family_count = with_variants
      ? static_cast<size_t>(opt.dup_rate * static_cast<double>(retain_total) / 3.0)
      : 0;
  size_t produced = 0;
  for (size_t fam = 0; fam < family_count && produced + 3 <= retain_total; ++fam) {
    Document base;
    base.id = fresh_id();
    uint32_t len = 40 + static_cast<uint32_t>(rng_below({seed, base.id, 0, kRngCorpusGen, 9000}, 17));
    base.bytes = make_text(seed, base.id, len);
    std::vector<uint64_t> family{base.id};
    std::vector<uint8_t> prev_bytes = base.bytes;
    docs.push_back(std::move(base));
    for (int v = 0; v < 2; ++v) {
      Document var;
      var.id = fresh_id();
      var.bytes = make_variant(prev_bytes, seed, var.id, opt);
      prev_bytes = var.bytes;
      family.push_back(var.id);
      docs.push_back(std::move(var));
    }
    meta.dup_families.push_back(family);
    produced += 3;
  }
  while (produced < retain_total) {
    Document d;
    d.id = fresh_id();
    uint32_t len = 40 + static_cast<uint32_t>(rng_below({seed, d.id, 0, kRngCorpusGen, 9000}, 17));
    d.bytes = make_text(seed, d.id, len);
    docs.push_back(std::move(d));
    ++produced;
  }

  GeneratedCorpus out;
  out.corpus = Corpus(std::move(docs));
  out.meta = std::move(meta);
  return out;
}

std::string CorpusMeta::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["total"] = total;
  j["dup_rate"] = dup_rate;
  j["forget_cohort"] = forget_cohort;
  j["cohort_bases"] = cohort_bases;
  j["dup_families"] = dup_families;
  nlohmann::json cans = nlohmann::json::array();
  for (const auto& c : canaries) {
    nlohmann::json slots = nlohmann::json::array();
    for (auto [lo, hi] : c.slots) slots.push_back({lo, hi});
    cans.push_back({{"doc_id", c.doc_id}, {"prefix", c.prefix}, {"k", c.k}, {"slots", slots},
                    {"true_bits", c.true_bits}});
  }
  j["canaries"] = cans;
  nlohmann::json secs = nlohmann::json::array();
  for (const auto& s : secrets) {
    secs.push_back({{"doc_id", s.doc_id}, {"prompt_len", s.prompt_len},
                    {"suffix_len", s.suffix_len}});
  }
  j["secrets"] = secs;
  return j.dump(2);
}

CorpusMeta CorpusMeta::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  CorpusMeta m;
  m.seed = j.at("seed");
  m.total = j.at("total");
  m.dup_rate = j.at("dup_rate");
  m.forget_cohort = j.at("forget_cohort").get<std::vector<uint64_t>>();
  m.cohort_bases = j.at("cohort_bases").get<std::vector<uint64_t>>();
  m.dup_families = j.at("dup_families").get<std::vector<std::vector<uint64_t>>>();
  for (const auto& c : j.at("canaries")) {
    CanarySpec spec;
    spec.doc_id = c.at("doc_id");
    spec.prefix = c.at("prefix").get<std::vector<uint8_t>>();
    spec.k = c.at("k");
    for (const auto& s : c.at("slots")) spec.slots.emplace_back(s[0], s[1]);
    spec.true_bits = c.at("true_bits");
    m.canaries.push_back(std::move(spec));
  }
  for (const auto& s : j.at("secrets")) {
    m.secrets.push_back({s.at("doc_id"), s.at("prompt_len"), s.at("suffix_len")});
  }
  return m;
}

}  // namespace unlearn
