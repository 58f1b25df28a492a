#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "unlearn/rng.hpp"

namespace unlearn {

// Byte-level vocabulary: 256 raw bytes plus sequence markers. Pinned by
// construction; there is no tokenizer build to checksum.
constexpr uint32_t kTokenBos = 256;
constexpr uint32_t kTokenEos = 257;
constexpr uint32_t kVocabSize = 258;

struct Document {
  uint64_t id = 0;
  std::vector<uint8_t> bytes;
};

// One planted canary: a distinctive prefix followed by `k` binary fill
// slots, each choosing one of two reserved byte values.
struct CanarySpec {
  uint64_t doc_id = 0;
  std::vector<uint8_t> prefix;
  int k = 0;
  std::vector<std::pair<uint8_t, uint8_t>> slots;
  uint32_t true_bits = 0;

  std::vector<uint8_t> fill_for(uint32_t bits) const;
};

// One planted secret: prompt bytes (ending in a reserved marker byte)
// followed by a suffix drawn from a reserved alphabet.
struct SecretSpec {
  uint64_t doc_id = 0;
  uint32_t prompt_len = 0;
  uint32_t suffix_len = 0;
};

struct CorpusMeta {
  uint64_t seed = 0;
  uint64_t total = 0;
  double dup_rate = 0.0;
  std::vector<uint64_t> forget_cohort;
  std::vector<uint64_t> cohort_bases;
  std::vector<CanarySpec> canaries;
  std::vector<SecretSpec> secrets;
  std::vector<std::vector<uint64_t>> dup_families;

  std::string to_json() const;
  static CorpusMeta from_json(const std::string& text);
};

// Immutable document store. Sealed after construction or load; training
// and replay only ever read from it.
class Corpus {
 public:
  Corpus() = default;
  explicit Corpus(std::vector<Document> docs);

  const Document& doc(uint64_t id) const;  // throws PreconditionError on unknown id
  bool contains(uint64_t id) const;
  size_t size() const { return docs_.size(); }
  const std::vector<Document>& docs() const { return docs_; }
  std::vector<uint64_t> all_ids() const;

  // [BOS] + bytes (truncated to ctx_len - 2) + [EOS].
  std::vector<uint32_t> tokens(uint64_t id, uint32_t ctx_len) const;

  void save(const std::string& path) const;
  static Corpus load(const std::string& path);

 private:
  std::vector<Document> docs_;
  std::map<uint64_t, size_t> index_;
};

struct GenCorpusOptions {
  uint64_t size = 2009;
  double dup_rate = 0.10;
  int num_canaries = 4;
  int canary_bits = 12;  // candidate space 2^k
  uint64_t seed = 1;
  // Near-duplicate admission thresholds the planted variants must satisfy.
  int tau_hamming = 3;
  double tau_jaccard = 0.8;
};

struct GeneratedCorpus {
  Corpus corpus;
  CorpusMeta meta;
};

// Deterministic synthetic corpus with a 45-sample forget cohort, planted
// near-duplicate families, canaries, and secret-suffix extraction targets.
GeneratedCorpus generate_corpus(const GenCorpusOptions& opt);

}  // namespace unlearn
