#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "unlearn/corpus.hpp"

namespace unlearn {

// 4-byte shingle hashes of a document (as a set).
std::vector<uint64_t> shingle_hashes(const std::vector<uint8_t>& bytes);

// Standard SimHash over shingle hashes: per-bit signed vote, take the sign.
// A document shorter than one shingle window hashes as a single shingle.
// Empty documents are an error.
uint64_t simhash64(const std::vector<uint8_t>& bytes);

double jaccard(const std::vector<uint64_t>& a_sorted, const std::vector<uint64_t>& b_sorted);

// SimHash index with LSH banding: 4 bands x 16 bits. Any pair within
// Hamming distance 3 shares at least one band, so banding is a complete
// candidate filter at the default threshold.
class SimHashIndex {
 public:
  static constexpr int kBands = 4;
  static constexpr int kBandBits = 16;

  void build(const Corpus& corpus);

  bool contains(uint64_t id) const { return sim_.count(id) > 0; }
  uint64_t simhash_of(uint64_t id) const;
  const std::vector<uint64_t>& shingles_of(uint64_t id) const;  // sorted
  // Band-suggested candidates, ascending id, excluding `id` itself.
  std::vector<uint64_t> candidates(uint64_t id) const;
  std::vector<uint64_t> all_ids() const;

 private:
  std::map<uint64_t, uint64_t> sim_;
  std::map<uint64_t, std::vector<uint64_t>> shingles_;
  std::map<uint64_t, std::vector<uint64_t>> bands_;  // (band << 16 | key) -> ids
};

struct ProvenanceEdge {
  uint64_t from = 0;
  uint64_t to = 0;
  int hamming = 0;
  double similarity = 0.0;
};

struct ForgetClosure {
  std::set<uint64_t> requested;
  std::set<uint64_t> expanded;
  std::vector<ProvenanceEdge> edges;
  int tau_hamming = 3;
  double tau_jaccard = 0.8;

  bool contains(uint64_t id) const { return expanded.count(id) > 0; }
  std::string to_json() const;
  static ForgetClosure from_json(const std::string& text);
};

// Fixed-point frontier expansion: admit y from x's band candidates when
// Hamming(simhash) <= tau_h and shingle-Jaccard >= tau_sim, then keep
// expanding from y until nothing new is admitted. Deterministic order.
ForgetClosure expand_closure(const std::set<uint64_t>& request, const SimHashIndex& index,
                             int tau_hamming = 3, double tau_jaccard = 0.8);

}  // namespace unlearn
