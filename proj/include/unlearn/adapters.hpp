#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "unlearn/checkpoint.hpp"
#include "unlearn/errors.hpp"
#include "unlearn/corpus.hpp"
#include "unlearn/optim.hpp"

namespace unlearn {

// Low-rank factors for one hooked weight matrix W (in x out):
// contribution = A . B^T with A (in x r) and B (out x r). B starts zero,
// so a fresh adapter contributes nothing.
struct AdapterLayer {
  std::string hooked;  // "w1" | "w2"
  uint32_t rank = 0;
  Tensor a;  // in x rank
  Tensor b;  // out x rank
};

struct Adapter {
  uint64_t cohort_id = 0;
  std::vector<AdapterLayer> layers;  // fixed order: w1 hook, then w2 hook
  bool merged = false;               // must remain false for deletability
  std::vector<uint64_t> trained_sample_ids;
  // set when this adapter is the result of compact(); members lose
  // individual deletability
  std::vector<uint64_t> compacted_from;

  void save(const std::string& path) const;  // factors + metadata + SHA-256 trailer
  static Adapter load(const std::string& path);
};

Adapter make_adapter(uint64_t cohort_id, const ModelDims& dims, uint32_t rank_w1,
                     uint32_t rank_w2, uint64_t master_seed);

// Adds A.B^T of every adapter into the hooked weights, ascending
// cohort_id, fixed elementwise order. Base tensors are copied, never
// mutated.
ModelParams compose_serving(const ModelParams& base, const std::vector<const Adapter*>& adapters);

// In-memory registry with an intent/commit journal for crash-consistent
// deletion. Serving composition is rebuilt from base + live adapters.
class AdapterRegistry {
 public:
  explicit AdapterRegistry(std::string journal_path = "");

  void add(Adapter adapter);
  bool has(uint64_t cohort_id) const;
  const Adapter& get(uint64_t cohort_id) const;
  std::vector<const Adapter*> live_adapters() const;  // ascending cohort_id
  std::vector<uint64_t> cohort_ids() const;

  // Which cohort (if any) a sample id was trained into.
  std::optional<uint64_t> cohort_of_sample(uint64_t sample_id) const;

  // test hook: abort between journal intent and commit
  bool crash_after_remove = false;

  // Atomic delete: journal intent, drop the adapter, journal commit.
  // Refuses merged adapters and members of a compacted set (the caller
  // escalates to exact replay).
  void delete_adapter(uint64_t cohort_id);

  // Journal consistency: an intent without a matching commit means a
  // crash interrupted a deletion.
  struct JournalStatus {
    bool consistent = true;
    std::vector<uint64_t> interrupted_deletes;
  };
  JournalStatus check_journal() const;
  void repair();  // re-applies interrupted deletions

 private:
  void journal_append(const std::string& line);

  std::map<uint64_t, Adapter> adapters_;
  std::string journal_path_;
};

// Thrown when deletion must escalate to the exact path.
struct EscalateToReplay : Error {
  using Error::Error;
};

struct CohortTrainConfig {
  uint32_t steps = 20;
  uint32_t microbatch_size = 4;
  uint32_t rank_w1 = 8;
  uint32_t rank_w2 = 4;
  float lr = 1e-3f;
  uint64_t seed = 7;
};

// Trains a fresh cohort adapter with the base strictly frozen: only the
// factor tensors receive gradients, and the base hash is asserted
// unchanged before/after. Registers the cohort on success.
Adapter train_cohort(const ModelParams& base, const Corpus& corpus,
                     const std::vector<uint64_t>& cohort_sample_ids, const CohortTrainConfig& ccfg,
                     const TrainConfig& opt_cfg, AdapterRegistry* registry);

// Block-concatenates factors: the compacted contribution equals the sum
// of the inputs' contributions within 1 ULP per element (bit-equal for a
// singleton). Original cohorts lose individual deletability.
Adapter compact(const AdapterRegistry& registry, const std::vector<uint64_t>& cohort_set,
                uint64_t new_cohort_id);

}  // namespace unlearn
