#include "unlearn/closure.hpp"

#include <algorithm>
#include <bit>
#include <deque>

#include <json.hpp>

#include "unlearn/errors.hpp"
#include "unlearn/hashing.hpp"

namespace unlearn {

std::vector<uint64_t> shingle_hashes(const std::vector<uint8_t>& bytes) {
  if (bytes.empty()) throw PreconditionError("shingle_hashes: empty document");
  constexpr size_t kShingle = 4;
  std::vector<uint64_t> out;
  if (bytes.size() < kShingle) {
    out.push_back(fnv1a64(bytes.data(), bytes.size()));
  } else {
    out.reserve(bytes.size() - kShingle + 1);
    for (size_t i = 0; i + kShingle <= bytes.size(); ++i) {
      out.push_back(fnv1a64(bytes.data() + i, kShingle));
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

uint64_t simhash64(const std::vector<uint8_t>& bytes) {
  std::vector<uint64_t> shingles = shingle_hashes(bytes);
  int votes[64] = {0};
  for (uint64_t h : shingles) {
    for (int b = 0; b < 64; ++b) {
      votes[b] += (h >> b) & 1 ? 1 : -1;
    }
  }
  uint64_t sig = 0;
  for (int b = 0; b < 64; ++b) {
    if (votes[b] > 0) sig |= uint64_t(1) << b;
  }
  return sig;
}

double jaccard(const std::vector<uint64_t>& a, const std::vector<uint64_t>& b) {
  if (a.empty() && b.empty()) return 1.0;
  size_t inter = 0;
  size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] == b[j]) {
      ++inter;
      ++i;
      ++j;
    } else if (a[i] < b[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  size_t uni = a.size() + b.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

void SimHashIndex::build(const Corpus& corpus) {
  sim_.clear();
  shingles_.clear();
  bands_.clear();
  for (const Document& d : corpus.docs()) {
    uint64_t sig = simhash64(d.bytes);
    sim_[d.id] = sig;
    shingles_[d.id] = shingle_hashes(d.bytes);
    for (int band = 0; band < kBands; ++band) {
      uint64_t key = (uint64_t(band) << kBandBits) | ((sig >> (band * kBandBits)) & 0xFFFF);
      bands_[key].push_back(d.id);
    }
  }
  for (auto& [key, ids] : bands_) std::sort(ids.begin(), ids.end());
}

uint64_t SimHashIndex::simhash_of(uint64_t id) const {
  auto it = sim_.find(id);
  if (it == sim_.end()) throw PreconditionError("SimHashIndex: unknown doc id " + std::to_string(id));
  return it->second;
}

const std::vector<uint64_t>& SimHashIndex::shingles_of(uint64_t id) const {
  auto it = shingles_.find(id);
  if (it == shingles_.end())
    throw PreconditionError("SimHashIndex: unknown doc id " + std::to_string(id));
  return it->second;
}

std::vector<uint64_t> SimHashIndex::candidates(uint64_t id) const {
  uint64_t sig = simhash_of(id);
  std::vector<uint64_t> out;
  for (int band = 0; band < kBands; ++band) {
    uint64_t key = (uint64_t(band) << kBandBits) | ((sig >> (band * kBandBits)) & 0xFFFF);
    auto it = bands_.find(key);
    if (it == bands_.end()) continue;
    out.insert(out.end(), it->second.begin(), it->second.end());
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  out.erase(std::remove(out.begin(), out.end(), id), out.end());
  return out;
}

std::vector<uint64_t> SimHashIndex::all_ids() const {
  std::vector<uint64_t> ids;
  ids.reserve(sim_.size());
  for (const auto& [id, sig] : sim_) ids.push_back(id);
  return ids;
}

ForgetClosure expand_closure(const std::set<uint64_t>& request, const SimHashIndex& index,
                             int tau_hamming, double tau_jaccard) {
  for (uint64_t id : request) {
    if (!index.contains(id))
      throw PreconditionError("expand_closure: requested id not in corpus: " + std::to_string(id));
  }
  ForgetClosure cl;
  cl.requested = request;
  cl.expanded = request;
  cl.tau_hamming = tau_hamming;
  cl.tau_jaccard = tau_jaccard;
  std::deque<uint64_t> frontier(request.begin(), request.end());
  while (!frontier.empty()) {
    uint64_t x = frontier.front();
    frontier.pop_front();
    uint64_t hx = index.simhash_of(x);
    const auto& sx = index.shingles_of(x);
    for (uint64_t y : index.candidates(x)) {
      if (cl.expanded.count(y)) continue;
      int ham = std::popcount(hx ^ index.simhash_of(y));
      if (ham > tau_hamming) continue;
      double sim = jaccard(sx, index.shingles_of(y));
      if (sim < tau_jaccard) continue;
      cl.expanded.insert(y);
      cl.edges.push_back({x, y, ham, sim});
      frontier.push_back(y);
    }
  }
  return cl;
}

std::string ForgetClosure::to_json() const {
  nlohmann::json j;
  j["requested"] = std::vector<uint64_t>(requested.begin(), requested.end());
  j["expanded"] = std::vector<uint64_t>(expanded.begin(), expanded.end());
  j["tau_hamming"] = tau_hamming;
  j["tau_jaccard"] = tau_jaccard;
  nlohmann::json edges_json = nlohmann::json::array();
  for (const auto& e : edges) {
    edges_json.push_back({{"from", e.from}, {"to", e.to}, {"hamming", e.hamming},
                          {"similarity", e.similarity}});
  }
  j["edges"] = edges_json;
  return j.dump(2);
}

ForgetClosure ForgetClosure::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  ForgetClosure cl;
  for (uint64_t id : j.at("requested")) cl.requested.insert(id);
  for (uint64_t id : j.at("expanded")) cl.expanded.insert(id);
  cl.tau_hamming = j.at("tau_hamming");
  cl.tau_jaccard = j.at("tau_jaccard");
  for (const auto& e : j.at("edges")) {
    cl.edges.push_back({e.at("from"), e.at("to"), e.at("hamming"), e.at("similarity")});
  }
  return cl;
}

}  // namespace unlearn
