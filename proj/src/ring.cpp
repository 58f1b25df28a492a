#include "unlearn/ring.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "unlearn/bytes.hpp"
#include "unlearn/errors.hpp"

namespace unlearn {

namespace {

constexpr char kPatchMagic[8] = {'U', 'L', 'P', 'T', 'C', 'H', '0', '1'};

std::vector<Tensor*> state_tensors(TrainState& st, bool include_opt) {
  std::vector<Tensor*> out;
  for (Tensor* t : st.params.tensors()) out.push_back(t);
  if (include_opt) {
    for (Tensor& t : st.opt.exp_avg) out.push_back(&t);
    for (Tensor& t : st.opt.exp_avg_sq) out.push_back(&t);
  }
  return out;
}

std::vector<const Tensor*> state_tensors(const TrainState& st, bool include_opt) {
  std::vector<const Tensor*> out;
  for (const Tensor* t : st.params.tensors()) out.push_back(t);
  if (include_opt) {
    for (const Tensor& t : st.opt.exp_avg) out.push_back(&t);
    for (const Tensor& t : st.opt.exp_avg_sq) out.push_back(&t);
  }
  return out;
}

}  // namespace

std::vector<uint8_t> codec_encode(Codec c, const std::vector<uint8_t>& raw) {
  if (c == Codec::Identity) return raw;
  // zero run-length: repeat { zero_run u16, literal_len u16, literal bytes }
  std::vector<uint8_t> out;
  size_t i = 0;
  while (i < raw.size()) {
    size_t zeros = 0;
    while (i + zeros < raw.size() && raw[i + zeros] == 0 && zeros < 0xFFFF) ++zeros;
    size_t lit_start = i + zeros;
    size_t lits = 0;
    while (lit_start + lits < raw.size() && raw[lit_start + lits] != 0 && lits < 0xFFFF) ++lits;
    put_u16(out, static_cast<uint16_t>(zeros));
    put_u16(out, static_cast<uint16_t>(lits));
    out.insert(out.end(), raw.begin() + lit_start, raw.begin() + lit_start + lits);
    i = lit_start + lits;
  }
  return out;
}

std::vector<uint8_t> codec_decode(Codec c, const std::vector<uint8_t>& enc, size_t raw_size) {
  if (c == Codec::Identity) return enc;
  std::vector<uint8_t> out;
  out.reserve(raw_size);
  size_t i = 0;
  while (i + 4 <= enc.size()) {
    uint16_t zeros = get_u16(enc.data() + i);
    uint16_t lits = get_u16(enc.data() + i + 2);
    i += 4;
    out.insert(out.end(), zeros, 0);
    if (i + lits > enc.size()) throw CorruptionError("zrle: truncated literal run");
    out.insert(out.end(), enc.begin() + i, enc.begin() + i + lits);
    i += lits;
  }
  if (out.size() != raw_size) throw CorruptionError("zrle: decoded size mismatch");
  return out;
}

std::string state_shape_digest_hex(const TrainState& st) {
  std::vector<uint8_t> bytes;
  for (const Tensor* t : state_tensors(st, true)) {
    put_u32(bytes, static_cast<uint32_t>(t->shape.size()));
    for (uint32_t d : t->shape) put_u32(bytes, d);
  }
  Digest256 d = sha256(bytes);
  return to_hex(d.data(), d.size());
}

DeltaPatch capture_delta(const TrainState& pre, const TrainState& post, uint32_t step_index,
                         DeltaMode mode, Codec codec, bool include_optimizer) {
  auto pre_t = state_tensors(pre, include_optimizer);
  auto post_t = state_tensors(post, include_optimizer);
  DeltaPatch patch;
  patch.step_index = step_index;
  patch.mode = mode;
  patch.codec = codec;
  patch.includes_optimizer = include_optimizer;
  patch.shape_digest_hex = state_shape_digest_hex(post);
  for (size_t ti = 0; ti < pre_t.size(); ++ti) {
    if (!pre_t[ti]->same_shape(*post_t[ti]))
      throw PreconditionError("capture_delta: shape mismatch on " + post_t[ti]->name);
    size_t nbytes = post_t[ti]->byte_count();
    std::vector<uint8_t> raw(nbytes);
    if (mode == DeltaMode::Xor) {
      const uint8_t* a = reinterpret_cast<const uint8_t*>(pre_t[ti]->ptr());
      const uint8_t* b = reinterpret_cast<const uint8_t*>(post_t[ti]->ptr());
      for (size_t i = 0; i < nbytes; ++i) raw[i] = a[i] ^ b[i];
    } else {
      size_t n = post_t[ti]->element_count();
      std::vector<float> delta(n);
      for (size_t i = 0; i < n; ++i) delta[i] = post_t[ti]->data[i] - pre_t[ti]->data[i];
      std::memcpy(raw.data(), delta.data(), nbytes);
    }
    patch.raw_sizes.push_back(nbytes);
    patch.pre_compress_bytes += nbytes;
    std::vector<uint8_t> enc = codec_encode(codec, raw);
    patch.stored_bytes += enc.size();
    patch.payloads.push_back(std::move(enc));
  }
  if (include_optimizer) {
    patch.step_counter_delta = mode == DeltaMode::Xor ? (pre.opt.step ^ post.opt.step)
                                                      : (post.opt.step - pre.opt.step);
  }
  return patch;
}

void apply_revert(TrainState& state, const DeltaPatch& patch) {
  if (patch.shape_digest_hex != state_shape_digest_hex(state))
    throw PreconditionError("apply_revert: shape digest mismatch");
  auto tensors = state_tensors(state, patch.includes_optimizer);
  if (tensors.size() != patch.payloads.size())
    throw PreconditionError("apply_revert: payload count mismatch");
  for (size_t ti = 0; ti < tensors.size(); ++ti) {
    std::vector<uint8_t> raw = codec_decode(patch.codec, patch.payloads[ti], patch.raw_sizes[ti]);
    if (raw.size() != tensors[ti]->byte_count())
      throw PreconditionError("apply_revert: size mismatch on " + tensors[ti]->name);
    if (patch.mode == DeltaMode::Xor) {
      uint8_t* b = reinterpret_cast<uint8_t*>(tensors[ti]->ptr());
      for (size_t i = 0; i < raw.size(); ++i) b[i] ^= raw[i];
    } else {
      const float* delta = reinterpret_cast<const float*>(raw.data());
      size_t n = tensors[ti]->element_count();
      for (size_t i = 0; i < n; ++i) tensors[ti]->data[i] -= delta[i];
    }
  }
  if (patch.includes_optimizer) {
    state.opt.step = patch.mode == DeltaMode::Xor ? (state.opt.step ^ patch.step_counter_delta)
                                                  : (state.opt.step - patch.step_counter_delta);
  }
}

void RingBuffer::capture(const TrainState& pre, const TrainState& post, uint32_t step_index) {
  push(capture_delta(pre, post, step_index, mode_, codec_, revert_optimizer_));
}

void RingBuffer::push(DeltaPatch patch) {
  patches_.push_back(std::move(patch));
  while (patches_.size() > window_) patches_.pop_front();
}

void revert(TrainState& state, const RingBuffer& ring, size_t u) {
  if (u > ring.window())
    throw PreconditionError("revert: u exceeds ring window");
  if (u > ring.size())
    throw PreconditionError("revert: only " + std::to_string(ring.size()) + " patches held");
  const auto& patches = ring.patches();
  for (size_t i = 0; i < u; ++i) {
    const DeltaPatch& p = patches[patches.size() - 1 - i];
    if (i > 0) {
      const DeltaPatch& newer = patches[patches.size() - i];
      if (newer.step_index != p.step_index + 1)
        throw PreconditionError("revert: gap in patch sequence at step " +
                                std::to_string(p.step_index));
    }
    apply_revert(state, p);
  }
}

void DeltaPatch::save(const std::string& path) const {
  std::vector<uint8_t> out;
  out.insert(out.end(), kPatchMagic, kPatchMagic + 8);
  put_u32(out, step_index);
  out.push_back(static_cast<uint8_t>(mode));
  out.push_back(static_cast<uint8_t>(codec));
  out.push_back(includes_optimizer ? 1 : 0);
  std::vector<uint8_t> shape_digest = from_hex(shape_digest_hex);
  shape_digest.resize(32, 0);
  out.insert(out.end(), shape_digest.begin(), shape_digest.end());
  put_u64(out, step_counter_delta);
  put_u64(out, pre_compress_bytes);
  put_u32(out, static_cast<uint32_t>(payloads.size()));
  for (size_t i = 0; i < payloads.size(); ++i) {
    put_u64(out, raw_sizes[i]);
    put_u64(out, payloads[i].size());
    out.insert(out.end(), payloads[i].begin(), payloads[i].end());
  }
  Digest256 trailer = sha256(out);
  out.insert(out.end(), trailer.begin(), trailer.end());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("DeltaPatch: cannot open " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("DeltaPatch: write failed " + path);
}

DeltaPatch DeltaPatch::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("DeltaPatch: cannot open " + path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 8 + 4 + 3 + 32 + 16 + 4 + 32 || !std::equal(kPatchMagic, kPatchMagic + 8, buf.begin()))
    throw CorruptionError("DeltaPatch: bad magic");
  Digest256 expect;
  std::memcpy(expect.data(), buf.data() + buf.size() - 32, 32);
  if (sha256(buf.data(), buf.size() - 32) != expect)
    throw CorruptionError("DeltaPatch: SHA-256 mismatch");
  size_t off = 8;
  DeltaPatch p;
  p.step_index = get_u32(buf.data() + off);
  off += 4;
  p.mode = static_cast<DeltaMode>(buf[off++]);
  p.codec = static_cast<Codec>(buf[off++]);
  p.includes_optimizer = buf[off++] != 0;
  p.shape_digest_hex = to_hex(buf.data() + off, 32);
  off += 32;
  p.step_counter_delta = get_u64(buf.data() + off);
  off += 8;
  p.pre_compress_bytes = get_u64(buf.data() + off);
  off += 8;
  uint32_t count = get_u32(buf.data() + off);
  off += 4;
  for (uint32_t i = 0; i < count; ++i) {
    uint64_t raw_size = get_u64(buf.data() + off);
    off += 8;
    uint64_t enc_size = get_u64(buf.data() + off);
    off += 8;
    if (off + enc_size > buf.size() - 32) throw CorruptionError("DeltaPatch: truncated payload");
    p.raw_sizes.push_back(raw_size);
    p.payloads.emplace_back(buf.begin() + off, buf.begin() + off + enc_size);
    p.stored_bytes += enc_size;
    off += enc_size;
  }
  return p;
}

BudgetTable budget_report(double param_count, double dtype_bytes, uint32_t ring_window,
                          double compress_ratio, uint32_t checkpoint_interval,
                          double step_seconds, uint64_t microbatches) {
  if (param_count <= 0 || dtype_bytes <= 0)
    throw PreconditionError("budget_report: inputs must be positive");
  BudgetTable t;
  auto weights = static_cast<uint64_t>(std::llround(dtype_bytes * param_count));
  auto moments = static_cast<uint64_t>(std::llround(8.0 * param_count));  // f32 moment pair
  t.rows.push_back({"full_checkpoint", "(dtype_bytes + 8) * P", weights + moments,
                    "weights + Adam moments (f32)"});
  t.rows.push_back({"micro_checkpoint", "dtype_bytes * P", weights, "weights only"});
  uint64_t per_step = weights;
  t.rows.push_back({"delta_per_step", "dtype_bytes * P", per_step, "pre-compress"});
  auto ring_pre = static_cast<uint64_t>(per_step) * ring_window;
  auto ring_stored = static_cast<uint64_t>(
      std::llround(static_cast<double>(per_step) * ring_window * compress_ratio));
  t.rows.push_back({"ring_pre_compress", "per_step * N", ring_pre,
                    "N=" + std::to_string(ring_window)});
  t.rows.push_back({"ring_stored", "round(per_step * N * ratio)", ring_stored,
                    "ratio=" + std::to_string(compress_ratio)});
  uint64_t wal_bytes = 32ull * microbatches;
  t.rows.push_back({"wal", "32 B * microbatches", wal_bytes,
                    microbatches ? std::to_string(microbatches) + " records" : "per record"});
  t.replay_latency_worst = static_cast<double>(checkpoint_interval) * step_seconds;
  return t;
}

std::string BudgetTable::to_json() const {
  nlohmann::json j;
  nlohmann::json rows_j = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_j.push_back({{"name", r.name}, {"formula", r.formula}, {"bytes", r.bytes},
                      {"note", r.note}});
  }
  j["rows"] = rows_j;
  j["replay_latency_worst_seconds"] = replay_latency_worst;
  return j.dump(2);
}

std::string BudgetTable::render_text() const {
  std::string out;
  char line[256];
  for (const auto& r : rows) {
    double gb = static_cast<double>(r.bytes) / 1e9;
    std::snprintf(line, sizeof line, "%-20s %-28s %16llu B  (~%.1f GB)  %s\n", r.name.c_str(),
                  r.formula.c_str(), static_cast<unsigned long long>(r.bytes), gb, r.note.c_str());
    out += line;
  }
  std::snprintf(line, sizeof line, "%-20s %-28s %16.3f s\n", "replay_latency_worst",
                "K * t_step", replay_latency_worst);
  out += line;
  return out;
}

}  // namespace unlearn
