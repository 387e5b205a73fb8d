#pragma once
// Minimal SHA-256 for content hashing of dataset shards and logs.

#include <cstdint>
#include <string>
#include <vector>

namespace dm {

class sha256 {
 public:
  sha256();
  void update(const void* data, std::size_t len);
  // Finalizes and returns the lowercase hex digest; the object is spent.
  std::string hex_digest();

 private:
  void process_block(const std::uint8_t* p);
  std::uint32_t h_[8];
  std::uint8_t buf_[64];
  std::size_t buf_len_ = 0;
  std::uint64_t total_ = 0;
};

std::string sha256_hex(const void* data, std::size_t len);
std::string sha256_hex(const std::string& s);
std::string sha256_file_hex(const std::string& path);

}  // namespace dm
