#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace unlearn {

using Digest256 = std::array<uint8_t, 32>;

// Streaming SHA-256 (FIPS 180-4).
class Sha256 {
 public:
  Sha256() { reset(); }
  void reset();
  void update(const void* data, size_t len);
  Digest256 finish();

 private:
  void process_block(const uint8_t* block);

  uint32_t state_[8];
  uint64_t total_len_ = 0;
  uint8_t buffer_[64];
  size_t buffer_len_ = 0;
};

Digest256 sha256(const void* data, size_t len);
Digest256 sha256(const std::vector<uint8_t>& data);
Digest256 sha256(const std::string& data);
std::string sha256_hex(const void* data, size_t len);

// HMAC-SHA256 (RFC 2104).
Digest256 hmac_sha256(const std::vector<uint8_t>& key, const void* data, size_t len);
Digest256 hmac_sha256(const std::vector<uint8_t>& key, const std::vector<uint8_t>& data);

// CRC-32, IEEE 802.3 polynomial (reflected 0xEDB88320), init/final xor 0xFFFFFFFF.
uint32_t crc32(const void* data, size_t len);
uint32_t crc32(const std::vector<uint8_t>& data);

// FNV-1a, 64-bit.
uint64_t fnv1a64(const void* data, size_t len);

}  // namespace unlearn
