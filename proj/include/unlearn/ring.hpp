#pragma once

#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "unlearn/checkpoint.hpp"

namespace unlearn {

enum class DeltaMode : uint8_t { Xor = 0, Arith = 1 };
enum class Codec : uint8_t { Identity = 0, Zrle = 1 };

// Lossless byte codecs for patch payloads.
std::vector<uint8_t> codec_encode(Codec c, const std::vector<uint8_t>& raw);
std::vector<uint8_t> codec_decode(Codec c, const std::vector<uint8_t>& enc, size_t raw_size);

// Per-step difference between consecutive training states.
//   Xor:   post_bytes ^ pre_bytes over raw f32 bit patterns (self-inverse)
//   Arith: fl(post - pre) per element, applied as fl(cur - delta)
struct DeltaPatch {
  uint32_t step_index = 0;
  DeltaMode mode = DeltaMode::Xor;
  Codec codec = Codec::Identity;
  bool includes_optimizer = true;
  // payloads in state tensor order: params, then exp_avg, then exp_avg_sq
  // (optimizer entries only when includes_optimizer)
  std::vector<std::vector<uint8_t>> payloads;
  std::vector<size_t> raw_sizes;
  uint64_t step_counter_delta = 0;  // xor or arithmetic difference of opt.step
  uint64_t pre_compress_bytes = 0;
  uint64_t stored_bytes = 0;
  std::string shape_digest_hex;  // SHA-256 over the shape table

  void save(const std::string& path) const;  // header + payloads + SHA-256 trailer
  static DeltaPatch load(const std::string& path);
};

std::string state_shape_digest_hex(const TrainState& st);

DeltaPatch capture_delta(const TrainState& pre, const TrainState& post, uint32_t step_index,
                         DeltaMode mode, Codec codec, bool include_optimizer);

// Applies one patch backwards (post -> pre).
void apply_revert(TrainState& state, const DeltaPatch& patch);

// Sliding window of the last N per-step patches; eviction oldest-first.
class RingBuffer {
 public:
  RingBuffer(size_t window, DeltaMode mode = DeltaMode::Xor, Codec codec = Codec::Identity,
             bool revert_optimizer = true)
      : window_(window), mode_(mode), codec_(codec), revert_optimizer_(revert_optimizer) {}

  void capture(const TrainState& pre, const TrainState& post, uint32_t step_index);
  void push(DeltaPatch patch);

  size_t size() const { return patches_.size(); }
  size_t window() const { return window_; }
  const std::deque<DeltaPatch>& patches() const { return patches_; }

 private:
  size_t window_;
  DeltaMode mode_;
  Codec codec_;
  bool revert_optimizer_;
  std::deque<DeltaPatch> patches_;
};

// Reverts the last `u` steps, newest-first. Errors: u > window, or a gap
// in the stored step indices.
void revert(TrainState& state, const RingBuffer& ring, size_t u);

struct BudgetRow {
  std::string name;
  std::string formula;
  uint64_t bytes = 0;
  std::string note;
};

struct BudgetTable {
  std::vector<BudgetRow> rows;
  double replay_latency_worst = 0.0;  // K * t_step, seconds

  std::string to_json() const;
  std::string render_text() const;
};

// Storage/latency calculator. Weights dtype_bytes*P; moments 8P (f32
// pair); ring stored bytes = round(per_step * N * ratio).
BudgetTable budget_report(double param_count, double dtype_bytes, uint32_t ring_window,
                          double compress_ratio, uint32_t checkpoint_interval,
                          double step_seconds, uint64_t microbatches = 0);

}  // namespace unlearn
