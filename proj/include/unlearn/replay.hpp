#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "unlearn/checkpoint.hpp"
#include "unlearn/corpus.hpp"
#include "unlearn/optim.hpp"
#include "unlearn/wal.hpp"

namespace unlearn {

struct ReplayReport {
  uint64_t applied_steps = 0;
  uint64_t empty_logical_steps = 0;
  uint32_t logical_first = 0;
  uint32_t logical_last = 0;
  std::string wal_segment_digest;
  std::string final_state_hash;
};

struct ReplayOutcome {
  TrainState state;
  ReplayReport report;
};

struct ReplayOptions {
  // test hook: when set, a logical step that empties after filtering still
  // advances the optimizer counter (the behavior the skip rule forbids)
  bool advance_counter_on_empty_step = false;
};

// Refuses to run when the run metadata's format version or config digest
// differs from the current build/config (pin drift).
void check_run_pins(const std::string& run_metadata_json, const TrainConfig& cfg);

// Walks the WAL tail from `start`, resolves each record's ordered ids via
// the manifest, filters ids in `closure` preserving order, recomputes
// sum-reduction gradients with the recorded seeds, and applies AdamW with
// the recorded lr_f32 at each contributing accumulation boundary. Logical
// steps whose every microbatch empties are skipped entirely: no update,
// no counter advance. Asserts the optimizer counter against the recorded
// opt_step (offset by skipped steps) before every applied update.
ReplayOutcome replay_filter(const TrainState& start, const std::vector<StepGroup>& tail,
                            const IdManifest& manifest, const std::set<uint64_t>& closure,
                            const Corpus& corpus, const TrainConfig& cfg,
                            const std::string& wal_digest_hex, const ReplayOptions& opts = {});

// Independently coded retain-only reference: materializes the filtered
// microbatch plan from the WAL graph up front, then trains over it using
// the recorded LR values (never a live scheduler). The equality oracle.
ReplayOutcome oracle_retain_train(const TrainState& start, const std::vector<StepGroup>& tail,
                                  const IdManifest& manifest, const std::set<uint64_t>& closure,
                                  const Corpus& corpus, const TrainConfig& cfg,
                                  const std::string& wal_digest_hex);

struct EqualityProof {
  std::string status;  // "PASS" | "FAIL"
  std::string model_hash_oracle, model_hash_replay;
  std::string opt_hash_oracle, opt_hash_replay;
  bool exp_avg_equal = false;
  bool exp_avg_sq_equal = false;
  bool step_equal = false;
  ReplayReport oracle_invariants, replay_invariants;
  std::string wal_sha256;

  bool pass() const { return status == "PASS"; }
  std::string to_json() const;
  static EqualityProof from_json(const std::string& text);
};

// Hashes and per-component tensor equality between the oracle and replay
// outcomes. Shape mismatch is a structural error.
EqualityProof prove_equality(const ReplayOutcome& oracle_side, const ReplayOutcome& replay_side,
                             const std::string& wal_digest_hex);

struct ReductionDivergenceReport {
  double max_abs_param_diff = 0.0;
  bool bitwise_equal = false;
  std::string reduction;  // "sum" | "mean"
};

// Runs filtered replay and the oracle under the configured reduction and
// measures the divergence. Under mean with a cardinality-changing closure
// the difference is positive; under sum it is exactly zero.
ReductionDivergenceReport mean_reduction_counterexample(
    const TrainState& start, const std::vector<StepGroup>& tail, const IdManifest& manifest,
    const std::set<uint64_t>& closure, const Corpus& corpus, const TrainConfig& cfg);

}  // namespace unlearn
