#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <openssl/hmac.h>

#include <filesystem>
#include <fstream>

#include "test_util.hpp"
#include "unlearn/bytes.hpp"
#include "unlearn/errors.hpp"
#include "unlearn/wal.hpp"

using namespace unlearn;
namespace fs = std::filesystem;

namespace {

WalRecord random_record(uint64_t trial) {
  WalRecord r;
  r.hash64 = rng_u64({trial, 1, 0, 50, 0});
  r.seed64 = rng_u64({trial, 2, 0, 50, 0});
  uint32_t lr_bits = static_cast<uint32_t>(rng_u64({trial, 3, 0, 50, 0}));
  // keep lr finite and ordinary
  float lr = static_cast<float>(lr_bits % 100000) * 1e-8f;
  r.lr_f32 = lr;
  r.opt_step = static_cast<uint32_t>(rng_u64({trial, 4, 0, 50, 0}));
  r.accum_end = rng_u64({trial, 5, 0, 50, 0}) & 1;
  r.mb_len = static_cast<uint16_t>(1 + rng_u64({trial, 6, 0, 50, 0}) % 0xFFFF);
  return r;
}

}  // namespace

TEST_CASE("record encode/decode is a bijection over the field domains") {
  for (uint64_t trial = 0; trial < 500; ++trial) {
    WalRecord r = random_record(trial);
    auto bytes = r.encode();
    static_assert(sizeof bytes == 32);
    WalRecord back = WalRecord::decode(bytes.data());
    CHECK(back == r);
  }
}

TEST_CASE("record layout: crc covers the 27-byte payload, one zero pad byte") {
  WalRecord r = random_record(7);
  auto bytes = r.encode();
  CHECK(get_u32(bytes.data() + 27) == crc32(bytes.data(), 27));
  CHECK(bytes[31] == 0x00);
  // field offsets
  CHECK(get_u64(bytes.data()) == r.hash64);
  CHECK(get_u64(bytes.data() + 8) == r.seed64);
  CHECK(get_f32(bytes.data() + 16) == r.lr_f32);
  CHECK(get_u32(bytes.data() + 20) == r.opt_step);
  CHECK(bytes[24] == r.accum_end);
  CHECK(get_u16(bytes.data() + 25) == r.mb_len);
}

TEST_CASE("content_hash64 is order-sensitive and keyed mode matches OpenSSL") {
  std::vector<uint64_t> a{1, 2}, b{2, 1};
  CHECK(content_hash64(a) != content_hash64(b));

  std::vector<uint8_t> key{'s', 'e', 'c', 'r', 'e', 't'};
  CHECK(content_hash64(a, &key) != content_hash64(b, &key));

  // empty input with a fixed key is the truncated HMAC of empty
  uint64_t empty_hash = content_hash64({}, &key);
  unsigned char ref[32];
  unsigned int len = 32;
  HMAC(EVP_sha256(), key.data(), static_cast<int>(key.size()), nullptr, 0, ref, &len);
  CHECK(empty_hash == get_u64(ref));
  CHECK(content_hash64({}, &key) == empty_hash);

  // keyed mode equals an independent HMAC over the same byte string
  std::vector<uint8_t> id_bytes;
  for (uint64_t id : a) put_u64(id_bytes, id);
  HMAC(EVP_sha256(), key.data(), static_cast<int>(key.size()), id_bytes.data(), id_bytes.size(),
       ref, &len);
  CHECK(content_hash64(a, &key) == get_u64(ref));
}

TEST_CASE("writer: 400 records occupy exactly 12800 payload bytes") {
  std::string dir = testutil::tmp_dir("wal_400");
  WalWriter w(dir, 1);
  for (uint32_t i = 0; i < 400; ++i) {
    std::vector<uint64_t> ids{i + 1, i + 2, i + 3};
    w.emit_record(ids, i, 1e-3f, i / 2, i % 2 == 1);
  }
  w.close();
  auto paths = w.segment_paths();
  REQUIRE(paths.size() == 1);
  uint64_t header = 32;
  CHECK(fs::file_size(paths[0]) - header == 400 * 32);
  CHECK(w.records_written() == 400);
}

TEST_CASE("writer rejects empty microbatches and fails closed on io error") {
  std::string dir = testutil::tmp_dir("wal_reject");
  WalWriter w(dir, 1);
  CHECK_THROWS_AS(w.emit_record({}, 0, 1e-3f, 0, true), PreconditionError);
  w.force_io_error = true;
  CHECK_THROWS_AS(w.emit_record({1}, 0, 1e-3f, 0, true), IoError);
}

TEST_CASE("emitted bytes decode to field-equal records and manifest re-derives hash64") {
  std::string dir = testutil::tmp_dir("wal_decode");
  WalWriter w(dir, 1);
  std::vector<uint64_t> ids{5, 9, 1};
  w.emit_record(ids, 1234, 5e-4f, 17, true);
  w.close();
  WalReader reader = WalReader::open(dir);
  auto groups = reader.read_tail(0);
  REQUIRE(groups.size() == 1);
  const WalRecord& r = groups[0].records.at(0);
  CHECK(r.seed64 == 1234);
  CHECK(r.lr_f32 == 5e-4f);
  CHECK(r.opt_step == 17);
  CHECK(r.mb_len == 3);
  CHECK(r.accum_end == 1);
  // manifest invariant: lookup returns the ordered list, hash re-derives
  CHECK(w.manifest().lookup(r.hash64) == ids);
  CHECK(content_hash64(w.manifest().lookup(r.hash64)) == r.hash64);
}

TEST_CASE("verify: clean log passes; corruption and reordering are localized") {
  std::string dir = testutil::tmp_dir("wal_verify");
  {
    WalWriter w(dir, 1);
    for (uint32_t step = 0; step < 10; ++step) {
      for (uint32_t i = 0; i < 2; ++i) {
        std::vector<uint64_t> ids{step * 2ull + i + 1};
        w.emit_record(ids, step, 1e-3f, step, i == 1);
      }
    }
    w.close();
  }
  {
    WalReader reader = WalReader::open(dir);
    IntegrityReport rep = reader.verify();
    CHECK(rep.ok);
    CHECK(rep.records == 20);
  }
  // flip a payload byte in record 6
  std::string seg = dir + "/segment_0000.wal";
  {
    std::fstream f(seg, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(32 + 6 * 32 + 3);
    f.put('\x55');
  }
  {
    WalReader reader = WalReader::open(dir);
    IntegrityReport rep = reader.verify();
    CHECK_FALSE(rep.ok);
    CHECK(rep.first_failure_record == 6);
    CHECK(rep.first_failure == "crc32 mismatch");
    CHECK_THROWS_AS(reader.read_tail(0), IntegrityError);
  }
}

TEST_CASE("verify: swapping two steps breaks opt_step monotonicity") {
  std::string dir = testutil::tmp_dir("wal_swap");
  {
    WalWriter w(dir, 1);
    for (uint32_t step = 0; step < 4; ++step) {
      w.emit_record({step + 1ull}, step, 1e-3f, step, true);
    }
    w.close();
  }
  std::string seg = dir + "/segment_0000.wal";
  std::fstream f(seg, std::ios::binary | std::ios::in | std::ios::out);
  char a[32], b[32];
  f.seekg(32 + 0 * 32);
  f.read(a, 32);
  f.seekg(32 + 2 * 32);
  f.read(b, 32);
  f.seekp(32 + 0 * 32);
  f.write(b, 32);
  f.seekp(32 + 2 * 32);
  f.write(a, 32);
  f.close();
  // records stay individually valid (CRC passes) but the order is wrong,
  // and the sidecar digest no longer matches the mutated byte stream
  WalReader reader = WalReader::open(dir);
  IntegrityReport rep = reader.verify();
  CHECK_FALSE(rep.ok);
}

TEST_CASE("monotonicity check alone flags a decreasing counter") {
  // construct a segment by hand with decreasing opt_step but valid CRCs
  std::string dir = testutil::tmp_dir("wal_mono");
  {
    WalWriter w(dir, 1);
    w.emit_record({1}, 0, 1e-3f, 5, true);
    w.close();
  }
  // append a record with a smaller opt_step by rewriting the file and sidecar
  std::string seg = dir + "/segment_0000.wal";
  WalRecord r;
  r.hash64 = content_hash64({2});
  r.seed64 = 7;
  r.lr_f32 = 1e-3f;
  r.opt_step = 3;  // decreases
  r.accum_end = 1;
  r.mb_len = 1;
  auto bytes = r.encode();
  {
    std::ofstream f(seg, std::ios::binary | std::ios::app);
    f.write(reinterpret_cast<const char*>(bytes.data()), 32);
  }
  {
    // recompute the sidecar digest over both records so only the
    // monotonicity check can fail
    std::ifstream f(seg, std::ios::binary);
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    std::vector<uint8_t> records(buf.begin() + 32, buf.end());
    Digest256 d = sha256(records);
    std::ofstream side(seg + ".digest", std::ios::trunc);
    side << "{\"records\": 2, \"sha256\": \"" << to_hex(d.data(), 32) << "\"}\n";
  }
  WalReader reader = WalReader::open(dir);
  IntegrityReport rep = reader.verify();
  CHECK_FALSE(rep.ok);
  CHECK(rep.first_failure == "opt_step not monotone gap-free");
  CHECK(rep.first_failure_record == 1);
}

TEST_CASE("read_tail grouping honors accumulation boundaries") {
  std::string dir = testutil::tmp_dir("wal_tail");
  {
    WalWriter w(dir, 1);
    for (uint32_t step = 0; step < 6; ++step) {
      for (uint32_t i = 0; i < 2; ++i) {
        w.emit_record({step * 2ull + i + 1}, step * 2 + i, 1e-3f, step, i == 1);
      }
    }
    w.close();
  }
  WalReader reader = WalReader::open(dir);
  auto all = reader.read_tail(0);
  CHECK(all.size() == 6);
  for (const StepGroup& g : all) {
    CHECK(g.records.size() == 2);
    CHECK(g.records[0].accum_end == 0);
    CHECK(g.records[1].accum_end == 1);
    CHECK(g.records[0].opt_step == g.opt_step);
  }
  auto from3 = reader.read_tail(3);
  CHECK(from3.size() == 3);
  CHECK(from3[0].opt_step == 3);
  auto beyond = reader.read_tail(100);
  CHECK(beyond.empty());
}

TEST_CASE("manifest save/load round trip") {
  std::string dir = testutil::tmp_dir("wal_manifest");
  IdManifest m;
  m.register_batch(111, {1, 2, 3});
  m.register_batch(222, {9});
  m.save(dir + "/m.bin");
  IdManifest back = IdManifest::load(dir + "/m.bin");
  CHECK(back.size() == 2);
  CHECK(back.lookup(111) == std::vector<uint64_t>{1, 2, 3});
  CHECK(back.lookup(222) == std::vector<uint64_t>{9});
  CHECK_THROWS_AS(back.lookup(333), IntegrityError);
  // double registration with the same ids is idempotent; different ids are not
  CHECK_NOTHROW(m.register_batch(111, {1, 2, 3}));
  CHECK_THROWS_AS(m.register_batch(111, {4}), IntegrityError);
}

TEST_CASE("privacy: raw document bytes never appear in segment bytes") {
  std::string dir = testutil::tmp_dir("wal_privacy");
  Corpus corpus = testutil::small_corpus(8, 5, 32);
  {
    WalWriter w(dir, 1);
    for (uint32_t step = 0; step < 4; ++step) {
      std::vector<uint64_t> ids{step * 2ull + 1, step * 2ull + 2};
      w.emit_record(ids, step, 1e-3f, step, true);
    }
    w.close();
  }
  std::ifstream f(dir + "/segment_0000.wal", std::ios::binary);
  std::string seg_bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  for (const Document& d : corpus.docs()) {
    std::string text(d.bytes.begin(), d.bytes.end());
    CHECK(seg_bytes.find(text) == std::string::npos);
  }
}

TEST_CASE("segments rotate at the byte limit and the reader merges them") {
  std::string dir = testutil::tmp_dir("wal_rotate");
  {
    // rotate after 5 records per segment
    WalWriter w(dir, 1, {}, /*rotate_bytes=*/32 + 5 * 32);
    for (uint32_t step = 0; step < 12; ++step) {
      w.emit_record({step + 1ull}, step, 1e-3f, step, true);
    }
    w.close();
    CHECK(w.segment_paths().size() == 3);  // 5 + 5 + 2
  }
  WalReader reader = WalReader::open(dir);
  CHECK(reader.record_count() == 12);
  IntegrityReport rep = reader.verify();
  CHECK(rep.ok);
  auto groups = reader.read_tail(0);
  CHECK(groups.size() == 12);
  CHECK(groups.front().opt_step == 0);
  CHECK(groups.back().opt_step == 11);
  // the sidecar carries the legacy scheduler digest; replay never reads it
  std::ifstream side(dir + "/segment_0000.wal.digest");
  std::string side_text((std::istreambuf_iterator<char>(side)), std::istreambuf_iterator<char>());
  CHECK(side_text.find("sched_digest_u32") != std::string::npos);
}

TEST_CASE("keyed segments carry an hmac and verify under the key") {
  std::string dir = testutil::tmp_dir("wal_keyed");
  std::vector<uint8_t> key{'k', '1'};
  {
    WalWriter w(dir, 1, key);
    CHECK(w.keyed());
    w.emit_record({1, 2}, 0, 1e-3f, 0, true);
    w.close();
  }
  WalReader reader = WalReader::open(dir);
  CHECK(reader.verify(&key).ok);
  std::vector<uint8_t> wrong{'k', '2'};
  CHECK_FALSE(reader.verify(&wrong).ok);
}
