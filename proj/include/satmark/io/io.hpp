#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "satmark/ndiff/tensor.hpp"

namespace satmark::io {

using ndiff::TensorF;
using NamedTensors = std::vector<std::pair<std::string, TensorF>>;
using Digest = std::array<std::uint8_t, 32>;

Digest sha256(const void* data, std::size_t size);
inline Digest sha256(const std::string& s) { return sha256(s.data(), s.size()); }
std::string hex(const Digest& d);
// Hash of names, shapes and raw little-endian payloads, in order.
Digest tensors_digest(const NamedTensors& tensors);

inline constexpr std::uint32_t kCheckpointVersion = 1;

// "SATW" | u32 version | 32-byte config hash | u32 count | per tensor:
// u16 name length, name, u8 dtype (0 = f32), u8 rank, u32 extents, f32 payload. All little endian.
struct Checkpoint {
  Digest config_hash{};
  NamedTensors tensors;

  const TensorF& get(const std::string& name) const;  // throws ParseError when absent
};

std::string encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(const std::string& bytes);
void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

// Binary P6, maxval 255. Images are [3, H, W] in [0, 1].
std::string encode_ppm(const TensorF& image);
TensorF decode_ppm(const std::string& bytes);
void write_ppm(const std::string& path, const TensorF& image);
TensorF read_ppm(const std::string& path);

std::string read_file(const std::string& path);
// Writes via a temporary file and rename.
void write_file(const std::string& path, const std::string& bytes);

}  // namespace satmark::io
