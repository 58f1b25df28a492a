#include "unlearn/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "unlearn/bytes.hpp"
#include "unlearn/errors.hpp"

namespace unlearn {

namespace {

constexpr char kCkptMagic[8] = {'U', 'L', 'C', 'K', 'P', 'T', '0', '1'};
constexpr uint32_t kFormatVersion = 1;

void append_tensor_bytes(std::vector<uint8_t>& out, const Tensor& t) {
  size_t off = out.size();
  out.resize(off + t.byte_count());
  std::memcpy(out.data() + off, t.data.data(), t.byte_count());
}

}  // namespace

std::vector<uint8_t> serialize_state_body(const ModelParams& params, const OptState& opt) {
  std::vector<uint8_t> body;
  for (const Tensor* t : params.tensors()) append_tensor_bytes(body, *t);
  for (const Tensor& t : opt.exp_avg) append_tensor_bytes(body, t);
  for (const Tensor& t : opt.exp_avg_sq) append_tensor_bytes(body, t);
  put_u64(body, opt.step);
  return body;
}

Digest256 state_hash(const ModelParams& params, const OptState& opt) {
  std::vector<uint8_t> body = serialize_state_body(params, opt);
  return sha256(body);
}

Digest256 model_hash(const ModelParams& params) {
  std::vector<uint8_t> bytes;
  for (const Tensor* t : params.tensors()) append_tensor_bytes(bytes, *t);
  return sha256(bytes);
}

Digest256 optimizer_hash(const OptState& opt) {
  std::vector<uint8_t> bytes;
  for (const Tensor& t : opt.exp_avg) append_tensor_bytes(bytes, t);
  for (const Tensor& t : opt.exp_avg_sq) append_tensor_bytes(bytes, t);
  put_u64(bytes, opt.step);
  return sha256(bytes);
}

void checkpoint_save(const std::string& path, const ModelParams& params, const OptState& opt,
                     const CheckpointMeta& meta) {
  std::vector<uint8_t> header;
  header.insert(header.end(), kCkptMagic, kCkptMagic + 8);
  put_u32(header, kFormatVersion);
  std::vector<uint8_t> cfg_digest = from_hex(meta.config_digest_hex);
  cfg_digest.resize(32, 0);
  header.insert(header.end(), cfg_digest.begin(), cfg_digest.end());
  put_u64(header, opt.step);
  put_u32(header, params.dims.ctx);
  auto tensors = params.tensors();
  put_u32(header, static_cast<uint32_t>(tensors.size()));
  for (const Tensor* t : tensors) {
    put_u16(header, static_cast<uint16_t>(t->name.size()));
    header.insert(header.end(), t->name.begin(), t->name.end());
    header.push_back(static_cast<uint8_t>(t->shape.size()));
    for (uint32_t d : t->shape) put_u32(header, d);
  }

  std::vector<uint8_t> body = serialize_state_body(params, opt);

  Sha256 h;
  h.update(header.data(), header.size());
  h.update(body.data(), body.size());
  Digest256 trailer = h.finish();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("checkpoint_save: cannot open " + path);
  f.write(reinterpret_cast<const char*>(header.data()), static_cast<std::streamsize>(header.size()));
  f.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
  f.write(reinterpret_cast<const char*>(trailer.data()), 32);
  if (!f) throw IoError("checkpoint_save: write failed " + path);
}

LoadedCheckpoint checkpoint_load(const std::string& path,
                                 const std::string& expect_config_digest_hex) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint_load: cannot open " + path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 8 + 4 + 32 + 8 + 4 + 32 || !std::equal(kCkptMagic, kCkptMagic + 8, buf.begin()))
    throw CorruptionError("checkpoint_load: bad magic " + path);

  // hash check first: trailer covers header+body
  Digest256 expect;
  std::memcpy(expect.data(), buf.data() + buf.size() - 32, 32);
  Digest256 got = sha256(buf.data(), buf.size() - 32);
  if (expect != got) throw CorruptionError("checkpoint_load: SHA-256 mismatch " + path);

  size_t off = 8;
  uint32_t version = get_u32(buf.data() + off);
  off += 4;
  if (version != kFormatVersion)
    throw PinDriftError("checkpoint_load: format version " + std::to_string(version) +
                        " != " + std::to_string(kFormatVersion));
  LoadedCheckpoint out;
  out.meta.format_version = version;
  out.meta.config_digest_hex = to_hex(buf.data() + off, 32);
  off += 32;
  if (!expect_config_digest_hex.empty() && out.meta.config_digest_hex != expect_config_digest_hex)
    throw PinDriftError("checkpoint_load: config digest mismatch (pin drift)");
  out.meta.opt_step = get_u64(buf.data() + off);
  off += 8;
  uint32_t ctx_len = get_u32(buf.data() + off);
  off += 4;
  uint32_t tensor_count = get_u32(buf.data() + off);
  off += 4;

  struct ShapeEntry {
    std::string name;
    std::vector<uint32_t> shape;
  };
  std::vector<ShapeEntry> shapes;
  for (uint32_t i = 0; i < tensor_count; ++i) {
    uint16_t name_len = get_u16(buf.data() + off);
    off += 2;
    ShapeEntry e;
    e.name.assign(reinterpret_cast<const char*>(buf.data() + off), name_len);
    off += name_len;
    uint8_t ndims = buf[off++];
    for (uint8_t dnum = 0; dnum < ndims; ++dnum) {
      e.shape.push_back(get_u32(buf.data() + off));
      off += 4;
    }
    shapes.push_back(std::move(e));
  }
  if (shapes.size() != 5) throw CorruptionError("checkpoint_load: unexpected tensor count");

  ModelDims dims;
  dims.vocab = shapes[0].shape.at(0);
  dims.embed = shapes[0].shape.at(1);
  dims.hidden = shapes[1].shape.at(1);
  dims.ctx = ctx_len;
  out.state.params = ModelParams(dims);
  out.state.opt = OptState(out.state.params);

  auto read_tensor = [&](Tensor& t) {
    if (off + t.byte_count() > buf.size() - 32)
      throw CorruptionError("checkpoint_load: truncated body");
    std::memcpy(t.data.data(), buf.data() + off, t.byte_count());
    off += t.byte_count();
  };
  for (Tensor* t : out.state.params.tensors()) read_tensor(*t);
  for (Tensor& t : out.state.opt.exp_avg) read_tensor(t);
  for (Tensor& t : out.state.opt.exp_avg_sq) read_tensor(t);
  out.state.opt.step = get_u64(buf.data() + off);
  off += 8;
  if (out.state.opt.step != out.meta.opt_step)
    throw CorruptionError("checkpoint_load: step counter mismatch between header and body");
  return out;
}

}  // namespace unlearn
