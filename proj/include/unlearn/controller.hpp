#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "unlearn/adapters.hpp"
#include "unlearn/audits.hpp"
#include "unlearn/closure.hpp"
#include "unlearn/hotpath.hpp"
#include "unlearn/replay.hpp"
#include "unlearn/ring.hpp"
#include "unlearn/trainer.hpp"

namespace unlearn {

enum class Urgency : uint8_t { Normal = 0, Urgent = 1 };

struct ForgetRequest {
  std::array<uint8_t, 16> request_id{};  // idempotency key
  std::set<uint64_t> sample_ids;
  Urgency urgency = Urgency::Normal;
  int64_t submitted_at = 0;

  static std::array<uint8_t, 16> id_from_string(const std::string& s);
  std::string to_json() const;
  static ForgetRequest from_json(const std::string& text);
};

enum class Path : uint8_t {
  AdapterDelete = 0,
  RecentRevert = 1,
  HotPath = 2,
  ExactReplay = 3,
  NoOp = 4,  // empty closure: trivially complete
};

std::string path_name(Path p);

enum class Outcome : uint8_t {
  Served = 0,      // executed and audits passed
  Escalated = 1,   // failed; a follow-up entry continues the request
  Refused = 2,     // precondition/integrity refusal
  Trivial = 3,     // nothing to do
};

struct PlannedAction {
  Path path = Path::NoOp;
  std::vector<uint64_t> cohorts;   // AdapterDelete
  uint32_t revert_u = 0;           // RecentRevert
  uint32_t replay_from_step = 0;   // ExactReplay checkpoint step
};

struct RoutingState {
  uint32_t ring_window = 0;
  uint32_t current_step = 0;                 // T
  std::vector<uint32_t> checkpoint_steps;    // catalog
  std::set<uint32_t> offending_steps;        // steps whose records intersect the closure
  bool confined_to_cohorts = false;
  std::vector<uint64_t> affected_cohorts;
  Urgency urgency = Urgency::Normal;
};

// Offending steps from WAL groups + manifest lookups (never raw text).
std::set<uint32_t> offending_steps(const std::vector<StepGroup>& groups, const IdManifest& manifest,
                                   const std::set<uint64_t>& closure);

// Pure routing, strict priority: adapter deletion when every affected
// sample is cohort-confined; recent revert when every offending step lies
// inside the ring window (spanning requests go to replay, nothing is
// reverted partially); hot path on urgency; exact replay from the
// greatest checkpoint step <= min(offending).
PlannedAction route(const std::set<uint64_t>& closure_ids, const RoutingState& state);

struct ArtifactRef {
  std::string tag;        // e.g. "equality_proof", "audit_report"
  std::string sha256_hex;
};

struct ManifestEntry {
  uint64_t seq = 0;
  std::array<uint8_t, 32> prev_entry_hash{};
  std::array<uint8_t, 16> request_id{};
  Urgency urgency = Urgency::Normal;
  int64_t submitted_at = 0;
  std::vector<uint64_t> requested_ids;
  std::array<uint8_t, 32> closure_digest{};
  Path path = Path::NoOp;
  Outcome outcome = Outcome::Trivial;
  int64_t escalated_from_seq = -1;
  std::vector<ArtifactRef> artifacts;
  double threshold_exposure = 0.0, threshold_extraction = 0.0, threshold_utility = 0.0;
  bool servable = false;
  std::array<uint8_t, 32> hmac_tag{};

  std::vector<uint8_t> canonical_bytes(bool include_tag) const;
};

std::array<uint8_t, 32> closure_digest_of(const std::set<uint64_t>& ids);

// Append-only, hash-chained, HMAC-tagged log. Genesis prev-hash is 32
// zero bytes; each entry's prev hash is the SHA-256 of the previous
// entry's full canonical bytes.
class ManifestLog {
 public:
  ManifestLog(std::string path, std::vector<uint8_t> hmac_key);

  // fills seq/prev/hmac, persists, returns the stored entry
  ManifestEntry append(ManifestEntry entry);
  const std::vector<ManifestEntry>& entries() const { return entries_; }
  std::optional<ManifestEntry> find_request(const std::array<uint8_t, 16>& request_id) const;

  struct ChainStatus {
    bool ok = true;
    int64_t first_bad_seq = -1;
    std::string reason;
  };
  ChainStatus verify_chain() const;
  static ChainStatus verify_chain_file(const std::string& path,
                                       const std::vector<uint8_t>& hmac_key);

 private:
  void load();

  std::string path_;
  std::vector<uint8_t> hmac_key_;
  std::vector<ManifestEntry> entries_;
};

// Everything execute() needs to run a path end to end.
struct ControllerEnv {
  const Corpus* corpus = nullptr;
  const CorpusMeta* corpus_meta = nullptr;
  const WalReader* wal = nullptr;
  const IdManifest* id_manifest = nullptr;
  TrainConfig train_cfg;
  std::vector<SavedCheckpoint> checkpoints;
  TrainState* serving = nullptr;        // current serving state (mutated by paths)
  const ModelParams* adapter_base = nullptr;
  AdapterRegistry* registry = nullptr;
  RingBuffer* ring = nullptr;
  ManifestLog* manifest_log = nullptr;
  AuditThresholds thresholds;
  HotPathConfig hotpath;
  // post-deletion smoothing (adapter-only scope); 0 keeps the serving
  // weights byte-equal to base + remaining adapters
  uint32_t adapter_retain_tune_steps = 0;
  uint64_t audit_seed = 1;
  // collected artifact JSON bodies, keyed by sha256 hex (caller persists)
  std::map<std::string, std::pair<std::string, std::string>>* artifact_store = nullptr;
};

struct ExecuteResult {
  ManifestEntry entry;            // final entry for the request
  std::vector<ManifestEntry> all; // including escalation predecessors
  bool duplicate = false;         // idempotent re-submission
};

// Expands nothing (the closure is an input), runs the planned path with
// audits, and appends one signed entry per action taken. Any fast-path
// failure — a failed audit, an infeasible hot path, a merged-adapter
// violation — escalates to exact replay with a causal link to the failed
// attempt; a failed exact replay is terminal (recorded, not servable).
// Re-submitting a request id returns the original entry unchanged.
ExecuteResult execute(const ForgetRequest& request, const ForgetClosure& closure,
                      const PlannedAction& action, ControllerEnv& env);

// Determinism/replay gate: (1) two identical training runs must agree
// byte-for-byte, (2) unfiltered replay from a checkpoint must equal the
// direct run, (3) the WAL must pass the integrity scan. Returns 0 on
// success or the failing stage (1..3). Nonzero blocks forgetting.
struct CiGateOptions {
  uint32_t steps = 100;
  bool inject_nondeterminism = false;  // fault stub for stage 1
  bool truncate_wal = false;           // fault stub for stage 3
};

int ci_gate(const Corpus& corpus, TrainConfig cfg, const std::string& scratch_dir,
            const CiGateOptions& opts = {}, std::string* detail = nullptr);

}  // namespace unlearn
