#pragma once

#include <string>
#include <vector>

namespace egnlq {

struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;
};

struct Checkpoint {
  std::vector<NamedTensor> tensors;
  std::vector<NamedTensor> optimizer;  // optional "OPTS" section
};

// "EGCK" | u32 version | u32 count | records, each:
//   u16 name length | name bytes | u8 rank | u32 extents | float32 LE data.
// The optimizer section, when present, follows as "OPTS" | u32 count | records.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace egnlq
