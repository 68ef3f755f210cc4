#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "m2i2/model.hpp"

namespace m2i2 {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Little-endian binary layout:
//   "M2I2" | u32 version | u64 step | str config | str vocab | str rng
//   | u64 count | count x (u32 name_len, name, u32 rank, u64 dims..., f64 data...)
// where str is a u64 byte length followed by the bytes.
struct Checkpoint {
  std::uint64_t step = 0;
  std::string config_json;
  std::string vocab;  // one token per line
  std::string rng_state;
  std::vector<NamedTensor> tensors;

  // nullptr when absent.
  const Tensor* find(const std::string& name) const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string vocab_to_string(const Vocab& vocab);
Vocab vocab_from_string(const std::string& text);

}  // namespace m2i2
