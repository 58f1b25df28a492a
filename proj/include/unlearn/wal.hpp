#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "unlearn/hashing.hpp"

namespace unlearn {

// One fixed-width 32-byte record per microbatch. Layout (little-endian):
//   [0]  hash64      u64   content hash of the ordered sample ids
//   [8]  seed64      u64   RNG seed bundle consumed at replay
//   [16] lr_f32      f32   exact learning-rate value in effect
//   [20] opt_step    u32   logical optimizer-step counter
//   [24] accum_end   u8    1 on the last microbatch of an accumulation run
//   [25] mb_len      u16   microbatch length
//   [27] crc32       u32   CRC-32 (IEEE) of bytes [0, 27)
//   [31] pad         u8    0x00
struct WalRecord {
  uint64_t hash64 = 0;
  uint64_t seed64 = 0;
  float lr_f32 = 0.0f;
  uint32_t opt_step = 0;
  uint8_t accum_end = 0;
  uint16_t mb_len = 0;

  static constexpr size_t kSize = 32;
  static constexpr size_t kPayloadSize = 27;

  std::array<uint8_t, kSize> encode() const;
  static WalRecord decode(const uint8_t* bytes);  // throws CorruptionError on bad CRC

  bool operator==(const WalRecord&) const = default;
};

// Content hash over the ordered sample ids (LE u64 concatenation).
// Keyed: HMAC-SHA256 truncated to the first 8 bytes. Unkeyed (toy only):
// FNV-1a 64. Order-sensitive in both modes.
uint64_t content_hash64(const std::vector<uint64_t>& ordered_ids,
                        const std::vector<uint8_t>* key = nullptr);

// Access-controlled mapping hash64 -> ordered sample ids.
class IdManifest {
 public:
  void register_batch(uint64_t hash, const std::vector<uint64_t>& ids);
  const std::vector<uint64_t>& lookup(uint64_t hash) const;  // throws on unknown hash
  size_t size() const { return map_.size(); }
  const std::map<uint64_t, std::vector<uint64_t>>& entries() const { return map_; }

  void save(const std::string& path) const;  // length-prefixed binary table
  static IdManifest load(const std::string& path);

 private:
  std::map<uint64_t, std::vector<uint64_t>> map_;
};

// Single-writer append-only segment file. Header is 32 bytes (magic,
// version, run id); every record is 32 bytes, so bytes-on-disk is exactly
// header + 32 * records. The running SHA-256 over record bytes (and the
// HMAC tag when a key is configured) goes to a JSON sidecar on close.
class WalWriter {
 public:
  static constexpr uint64_t kDefaultRotateBytes = 64ull << 20;

  WalWriter(std::string dir, uint64_t run_id, std::vector<uint8_t> hmac_key = {},
            uint64_t rotate_bytes = kDefaultRotateBytes);
  ~WalWriter();

  WalWriter(const WalWriter&) = delete;
  WalWriter& operator=(const WalWriter&) = delete;

  // Appends one record, updates the segment digest, and registers the
  // id list in the manifest. Empty microbatches are never logged.
  void emit_record(const std::vector<uint64_t>& ordered_ids, uint64_t seed64, float lr_f32,
                   uint32_t opt_step, bool accum_end);
  void close();

  const IdManifest& manifest() const { return manifest_; }
  uint64_t records_written() const { return records_; }
  bool keyed() const { return !hmac_key_.empty(); }
  std::vector<std::string> segment_paths() const { return segment_paths_; }

  // test hook: force the next write to fail (fail-closed path)
  bool force_io_error = false;

 private:
  void open_segment();
  void finish_segment();

  std::string dir_;
  uint64_t run_id_;
  std::vector<uint8_t> hmac_key_;
  uint64_t rotate_bytes_;
  int segment_index_ = -1;
  uint64_t segment_record_count_ = 0;
  uint64_t records_ = 0;
  Sha256 segment_sha_;
  std::vector<uint8_t> segment_record_bytes_;  // for HMAC on close
  int fd_ = -1;
  bool open_ = false;
  IdManifest manifest_;
  std::vector<std::string> segment_paths_;
};

struct IntegrityReport {
  bool ok = true;
  std::string first_failure;     // empty when ok
  int64_t first_failure_record = -1;
  uint64_t records = 0;
  std::string segment_sha256_hex;

  void fail(const std::string& what, int64_t record_index) {
    if (ok) {
      ok = false;
      first_failure = what;
      first_failure_record = record_index;
    }
  }
};

// One logical accumulation segment: the records of a single opt step.
struct StepGroup {
  uint32_t opt_step = 0;
  std::vector<WalRecord> records;
};

class WalReader {
 public:
  // Loads all segments under dir (ascending index) without verifying.
  static WalReader open(const std::string& dir);

  // Checks every record CRC, the per-segment SHA-256 (and HMAC when a key
  // is supplied), monotone gap-free opt_step, and accumulation-boundary
  // well-formedness. Failures are report entries, not exceptions.
  IntegrityReport verify(const std::vector<uint8_t>* hmac_key = nullptr) const;

  // Records grouped by logical step, starting at the first group with
  // opt_step >= from_opt_step. Refuses iteration unless verify() passes.
  std::vector<StepGroup> read_tail(uint32_t from_opt_step,
                                   const std::vector<uint8_t>* hmac_key = nullptr) const;

  uint64_t record_count() const { return record_bytes_.size() / WalRecord::kSize; }
  const std::vector<uint8_t>& record_bytes() const { return record_bytes_; }
  // SHA-256 over all record bytes of all segments, hex.
  std::string combined_sha256_hex() const;

 private:
  std::vector<uint8_t> record_bytes_;
  struct SegmentInfo {
    std::string path;
    uint64_t record_count = 0;
    std::string sidecar_sha256_hex;
    std::string sidecar_hmac_hex;
  };
  std::vector<SegmentInfo> segments_;
};

}  // namespace unlearn
