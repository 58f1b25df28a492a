#include "unlearn/wal.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "unlearn/bytes.hpp"
#include "unlearn/errors.hpp"

namespace fs = std::filesystem;

namespace unlearn {

namespace {
constexpr char kSegMagic[8] = {'U', 'L', 'W', 'A', 'L', 'S', '0', '1'};
constexpr size_t kSegHeaderSize = 32;  // magic(8) + version(4) + run_id(8) + seg_index(4) + pad(8)

std::string segment_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "segment_%04d.wal", index);
  return buf;
}
}  // namespace

std::array<uint8_t, WalRecord::kSize> WalRecord::encode() const {
  std::vector<uint8_t> payload;
  payload.reserve(kPayloadSize);
  put_u64(payload, hash64);
  put_u64(payload, seed64);
  put_f32(payload, lr_f32);
  put_u32(payload, opt_step);
  payload.push_back(accum_end);
  put_u16(payload, mb_len);
  uint32_t crc = crc32(payload);
  std::array<uint8_t, kSize> out{};
  std::copy(payload.begin(), payload.end(), out.begin());
  out[27] = static_cast<uint8_t>(crc);
  out[28] = static_cast<uint8_t>(crc >> 8);
  out[29] = static_cast<uint8_t>(crc >> 16);
  out[30] = static_cast<uint8_t>(crc >> 24);
  out[31] = 0x00;  // pad to 32 B
  return out;
}

WalRecord WalRecord::decode(const uint8_t* b) {
  uint32_t stored_crc = get_u32(b + 27);
  uint32_t actual_crc = crc32(b, kPayloadSize);
  if (stored_crc != actual_crc) throw CorruptionError("WalRecord: CRC mismatch");
  WalRecord r;
  r.hash64 = get_u64(b);
  r.seed64 = get_u64(b + 8);
  r.lr_f32 = get_f32(b + 16);
  r.opt_step = get_u32(b + 20);
  r.accum_end = b[24];
  r.mb_len = get_u16(b + 25);
  return r;
}

uint64_t content_hash64(const std::vector<uint64_t>& ordered_ids,
                        const std::vector<uint8_t>* key) {
  std::vector<uint8_t> bytes;
  bytes.reserve(ordered_ids.size() * 8);
  for (uint64_t id : ordered_ids) put_u64(bytes, id);
  if (key != nullptr && !key->empty()) {
    Digest256 mac = hmac_sha256(*key, bytes);
    return get_u64(mac.data());  // first 8 bytes, LE
  }
  return fnv1a64(bytes.data(), bytes.size());
}

void IdManifest::register_batch(uint64_t hash, const std::vector<uint64_t>& ids) {
  auto it = map_.find(hash);
  if (it != map_.end()) {
    if (it->second != ids)
      throw IntegrityError("IdManifest: hash collision with different id lists");
    return;
  }
  map_.emplace(hash, ids);
}

const std::vector<uint64_t>& IdManifest::lookup(uint64_t hash) const {
  auto it = map_.find(hash);
  if (it == map_.end()) throw IntegrityError("IdManifest: unknown hash64");
  return it->second;
}

void IdManifest::save(const std::string& path) const {
  std::vector<uint8_t> out;
  const char magic[8] = {'U', 'L', 'I', 'D', 'M', 'A', 'P', '1'};
  out.insert(out.end(), magic, magic + 8);
  put_u64(out, map_.size());
  for (const auto& [hash, ids] : map_) {
    put_u64(out, hash);
    put_u32(out, static_cast<uint32_t>(ids.size()));
    for (uint64_t id : ids) put_u64(out, id);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("IdManifest: cannot open for write " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("IdManifest: write failed " + path);
}

IdManifest IdManifest::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("IdManifest: cannot open " + path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const char magic[8] = {'U', 'L', 'I', 'D', 'M', 'A', 'P', '1'};
  if (buf.size() < 16 || !std::equal(magic, magic + 8, buf.begin()))
    throw CorruptionError("IdManifest: bad magic");
  size_t off = 8;
  uint64_t count = get_u64(buf.data() + off);
  off += 8;
  IdManifest m;
  for (uint64_t i = 0; i < count; ++i) {
    if (off + 12 > buf.size()) throw CorruptionError("IdManifest: truncated");
    uint64_t hash = get_u64(buf.data() + off);
    off += 8;
    uint32_t n = get_u32(buf.data() + off);
    off += 4;
    if (off + 8ull * n > buf.size()) throw CorruptionError("IdManifest: truncated entry");
    std::vector<uint64_t> ids(n);
    for (uint32_t j = 0; j < n; ++j) {
      ids[j] = get_u64(buf.data() + off);
      off += 8;
    }
    m.map_.emplace(hash, std::move(ids));
  }
  return m;
}

WalWriter::WalWriter(std::string dir, uint64_t run_id, std::vector<uint8_t> hmac_key,
                     uint64_t rotate_bytes)
    : dir_(std::move(dir)), run_id_(run_id), hmac_key_(std::move(hmac_key)),
      rotate_bytes_(rotate_bytes) {
  fs::create_directories(dir_);
  open_segment();
}

WalWriter::~WalWriter() {
  try {
    if (open_) close();
  } catch (...) {
    // destructor must not throw; close() explicitly to observe errors
  }
}

void WalWriter::open_segment() {
  ++segment_index_;
  segment_record_count_ = 0;
  segment_sha_.reset();
  segment_record_bytes_.clear();
  std::string path = dir_ + "/" + segment_name(segment_index_);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("WalWriter: cannot open segment " + path);
  std::vector<uint8_t> header;
  header.insert(header.end(), kSegMagic, kSegMagic + 8);
  put_u32(header, 1);
  put_u64(header, run_id_);
  put_u32(header, static_cast<uint32_t>(segment_index_));
  header.resize(kSegHeaderSize, 0);
  f.write(reinterpret_cast<const char*>(header.data()), static_cast<std::streamsize>(header.size()));
  if (!f) throw IoError("WalWriter: header write failed " + path);
  f.close();
  segment_paths_.push_back(path);
  open_ = true;
}

void WalWriter::emit_record(const std::vector<uint64_t>& ordered_ids, uint64_t seed64,
                            float lr_f32, uint32_t opt_step, bool accum_end) {
  if (!open_) throw PreconditionError("WalWriter: writer is closed");
  if (ordered_ids.empty()) throw PreconditionError("WalWriter: empty microbatches are never logged");
  if (ordered_ids.size() > 0xFFFF) throw PreconditionError("WalWriter: microbatch too long");

  WalRecord r;
  r.hash64 = content_hash64(ordered_ids, hmac_key_.empty() ? nullptr : &hmac_key_);
  r.seed64 = seed64;
  r.lr_f32 = lr_f32;
  r.opt_step = opt_step;
  r.accum_end = accum_end ? 1 : 0;
  r.mb_len = static_cast<uint16_t>(ordered_ids.size());
  auto bytes = r.encode();

  const std::string& path = segment_paths_.back();
  std::ofstream f(path, std::ios::binary | std::ios::app);
  if (!f || force_io_error) throw IoError("WalWriter: append failed (fail closed) " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  f.flush();
  if (!f) throw IoError("WalWriter: append failed (fail closed) " + path);

  segment_sha_.update(bytes.data(), bytes.size());
  segment_record_bytes_.insert(segment_record_bytes_.end(), bytes.begin(), bytes.end());
  manifest_.register_batch(r.hash64, ordered_ids);
  ++segment_record_count_;
  ++records_;

  if (kSegHeaderSize + segment_record_count_ * WalRecord::kSize >= rotate_bytes_) {
    finish_segment();
    open_segment();
  }
}

void WalWriter::finish_segment() {
  Digest256 digest = segment_sha_.finish();
  nlohmann::json side;
  side["records"] = segment_record_count_;
  side["sha256"] = to_hex(digest.data(), digest.size());
  // legacy human-readable scheduler digest; not part of the binary record
  // and never consulted at replay
  std::vector<uint8_t> lr_bytes;
  for (size_t off = 16; off + 4 <= segment_record_bytes_.size(); off += WalRecord::kSize) {
    lr_bytes.insert(lr_bytes.end(), segment_record_bytes_.begin() + off,
                    segment_record_bytes_.begin() + off + 4);
  }
  side["sched_digest_u32"] = crc32(lr_bytes);
  if (!hmac_key_.empty()) {
    Digest256 mac = hmac_sha256(hmac_key_, segment_record_bytes_);
    side["hmac_sha256"] = to_hex(mac.data(), mac.size());
  }
  std::string path = segment_paths_.back() + ".digest";
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("WalWriter: cannot write digest sidecar " + path);
  f << side.dump(2) << "\n";
  if (!f) throw IoError("WalWriter: digest sidecar write failed " + path);
}

void WalWriter::close() {
  if (!open_) return;
  finish_segment();
  manifest_.save(dir_ + "/id_manifest.bin");
  open_ = false;
}

WalReader WalReader::open(const std::string& dir) {
  WalReader r;
  std::vector<std::string> paths;
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::string name = entry.path().filename().string();
    if (name.starts_with("segment_") && name.ends_with(".wal")) paths.push_back(entry.path().string());
  }
  std::sort(paths.begin(), paths.end());
  if (paths.empty()) throw IoError("WalReader: no segments under " + dir);
  for (const std::string& path : paths) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("WalReader: cannot open " + path);
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < kSegHeaderSize || !std::equal(kSegMagic, kSegMagic + 8, buf.begin()))
      throw CorruptionError("WalReader: bad segment header " + path);
    if ((buf.size() - kSegHeaderSize) % WalRecord::kSize != 0)
      throw CorruptionError("WalReader: segment size not record-aligned " + path);
    SegmentInfo info;
    info.path = path;
    info.record_count = (buf.size() - kSegHeaderSize) / WalRecord::kSize;
    std::ifstream side(path + ".digest");
    if (side) {
      nlohmann::json j = nlohmann::json::parse(side, nullptr, false);
      if (!j.is_discarded()) {
        info.sidecar_sha256_hex = j.value("sha256", "");
        info.sidecar_hmac_hex = j.value("hmac_sha256", "");
      }
    }
    r.segments_.push_back(info);
    r.record_bytes_.insert(r.record_bytes_.end(), buf.begin() + kSegHeaderSize, buf.end());
  }
  return r;
}

IntegrityReport WalReader::verify(const std::vector<uint8_t>* hmac_key) const {
  IntegrityReport rep;
  rep.records = record_bytes_.size() / WalRecord::kSize;
  Sha256 total;
  total.update(record_bytes_.data(), record_bytes_.size());
  Digest256 total_digest = total.finish();
  rep.segment_sha256_hex = to_hex(total_digest.data(), total_digest.size());

  // per-record CRC + structural scan
  std::vector<WalRecord> records;
  for (size_t i = 0; i < rep.records; ++i) {
    const uint8_t* p = record_bytes_.data() + i * WalRecord::kSize;
    try {
      records.push_back(WalRecord::decode(p));
    } catch (const CorruptionError&) {
      rep.fail("crc32 mismatch", static_cast<int64_t>(i));
      return rep;
    }
    if (p[31] != 0x00) {
      rep.fail("nonzero pad byte", static_cast<int64_t>(i));
      return rep;
    }
  }

  // per-segment digest vs sidecar
  size_t seg_start = 0;
  for (const SegmentInfo& seg : segments_) {
    size_t nbytes = seg.record_count * WalRecord::kSize;
    Digest256 d = sha256(record_bytes_.data() + seg_start * WalRecord::kSize, nbytes);
    std::string hex = to_hex(d.data(), d.size());
    if (seg.sidecar_sha256_hex.empty()) {
      rep.fail("missing digest sidecar for " + seg.path, -1);
    } else if (hex != seg.sidecar_sha256_hex) {
      rep.fail("segment SHA-256 mismatch for " + seg.path, static_cast<int64_t>(seg_start));
    }
    if (hmac_key != nullptr && !hmac_key->empty()) {
      Digest256 mac = hmac_sha256(*hmac_key, record_bytes_.data() + seg_start * WalRecord::kSize,
                                  nbytes);
      std::string mac_hex = to_hex(mac.data(), mac.size());
      if (seg.sidecar_hmac_hex.empty()) {
        rep.fail("missing segment HMAC for " + seg.path, -1);
      } else if (mac_hex != seg.sidecar_hmac_hex) {
        rep.fail("segment HMAC mismatch for " + seg.path, static_cast<int64_t>(seg_start));
      }
    }
    seg_start += seg.record_count;
  }
  if (!rep.ok) return rep;

  // opt_step monotone gap-free; accumulation boundaries well-formed:
  // within a logical step all records carry the same opt_step and only
  // the last one sets accum_end
  for (size_t i = 0; i < records.size(); ++i) {
    const WalRecord& r = records[i];
    if (i > 0) {
      const WalRecord& prev = records[i - 1];
      if (!prev.accum_end && r.opt_step != prev.opt_step) {
        rep.fail("opt_step changed inside an accumulation segment", static_cast<int64_t>(i));
        return rep;
      }
      if (r.opt_step < prev.opt_step || r.opt_step > prev.opt_step + (prev.accum_end ? 1 : 0)) {
        rep.fail("opt_step not monotone gap-free", static_cast<int64_t>(i));
        return rep;
      }
    }
    if (r.mb_len == 0) {
      rep.fail("zero-length microbatch record", static_cast<int64_t>(i));
      return rep;
    }
  }
  if (!records.empty() && !records.back().accum_end) {
    rep.fail("log ends inside an accumulation segment", static_cast<int64_t>(records.size() - 1));
  }
  return rep;
}

std::vector<StepGroup> WalReader::read_tail(uint32_t from_opt_step,
                                            const std::vector<uint8_t>* hmac_key) const {
  IntegrityReport rep = verify(hmac_key);
  if (!rep.ok)
    throw IntegrityError("WalReader: refusing to iterate, integrity failure: " + rep.first_failure);
  std::vector<StepGroup> groups;
  size_t n = record_bytes_.size() / WalRecord::kSize;
  StepGroup current;
  bool in_group = false;
  for (size_t i = 0; i < n; ++i) {
    WalRecord r = WalRecord::decode(record_bytes_.data() + i * WalRecord::kSize);
    if (r.opt_step < from_opt_step) continue;
    if (!in_group) {
      current = StepGroup{r.opt_step, {}};
      in_group = true;
    }
    current.records.push_back(r);
    if (r.accum_end) {
      groups.push_back(std::move(current));
      current = StepGroup{};
      in_group = false;
    }
  }
  if (in_group) groups.push_back(std::move(current));
  return groups;
}

std::string WalReader::combined_sha256_hex() const {
  return sha256_hex(record_bytes_.data(), record_bytes_.size());
}

}  // namespace unlearn
