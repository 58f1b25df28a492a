#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "unlearn/checkpoint.hpp"
#include "unlearn/corpus.hpp"
#include "unlearn/optim.hpp"
#include "unlearn/wal.hpp"

namespace unlearn {

class RingBuffer;  // ring.hpp

struct CheckpointPolicy {
  std::string dir;
  uint32_t interval = 50;  // save at step 0, interval, 2*interval, ...
  bool save_final = true;
};

struct SavedCheckpoint {
  uint32_t step = 0;  // opt step the checkpoint precedes (state before update `step`)
  std::string path;
};

struct TrainHooks {
  // test hook: simulate a nondeterministic op by perturbing one parameter
  // with a value that differs across train() invocations
  bool inject_nondeterminism = false;
  // observer invoked after every applied update
  std::function<void(uint32_t step, const TrainState&)> after_update;
};

struct TrainRunResult {
  TrainState state;
  uint64_t wal_records = 0;
  std::vector<SavedCheckpoint> checkpoints;
  std::string config_digest_hex;
  uint64_t applied_updates = 0;
};

// Enumerates the fixed global sample order: per-epoch permutations keyed
// by (master_seed, epoch), consumed in mb-size slices.
class MicrobatchSchedule {
 public:
  MicrobatchSchedule(const Corpus& corpus, uint64_t master_seed, uint32_t microbatch_size);
  // ids for global microbatch index `mb_index` (fixed length)
  std::vector<uint64_t> ids_at(uint64_t mb_index) const;
  // seed bundle for that microbatch
  uint64_t seed_at(uint64_t mb_index) const;

 private:
  const std::vector<uint64_t>& epoch_perm(uint64_t epoch) const;

  std::vector<uint64_t> base_ids_;
  uint64_t master_seed_;
  uint32_t mb_size_;
  mutable std::vector<std::pair<uint64_t, std::vector<uint64_t>>> perm_cache_;
};

// Runs cfg.total_steps logical steps of cfg.accum_len microbatches each,
// emitting one WAL record per microbatch, saving checkpoints per policy,
// and (optionally) capturing one delta patch per applied update. Aborts
// on WAL write failure or non-finite state (fail closed).
TrainRunResult train(const Corpus& corpus, const TrainConfig& cfg, WalWriter* wal,
                     const CheckpointPolicy* ckpt_policy = nullptr, RingBuffer* ring = nullptr,
                     const TrainHooks* hooks = nullptr);

// Run-metadata JSON: config echo, version string, clip threshold, seeds,
// config digest. Written next to the checkpoints; replay checks the pins.
std::string run_metadata_json(const TrainConfig& cfg, const TrainRunResult& result);

}  // namespace unlearn
