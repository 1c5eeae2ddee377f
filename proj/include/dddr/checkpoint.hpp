#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "dddr/tensor.hpp"

namespace dddr {

/// Binary checkpoint:
///   "DDDRCKPT" | u32 version | u32 metadata length | metadata text | payload
/// The metadata text is line oriented:
///   count <n>
///   tensor <name> <d0>x<d1>x...
///   attr <key> <value>
/// The payload is little-endian float32, tensors in name order.
struct Checkpoint {
  ParamSet params;
  std::map<std::string, std::string> attrs;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin = "<memory>");

}  // namespace dddr
