#include "egnlq/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace egnlq {

namespace {

constexpr char kMagic[4] = {'E', 'G', 'C', 'K'};
constexpr char kOptMarker[4] = {'O', 'P', 'T', 'S'};

void write_records(std::ofstream& out, const std::vector<NamedTensor>& tensors) {
  const std::uint32_t count = static_cast<std::uint32_t>(tensors.size());
  out.write(reinterpret_cast<const char*>(&count), 4);
  for (const auto& t : tensors) {
    if (t.name.size() > 0xFFFF) throw std::invalid_argument("checkpoint: tensor name too long");
    std::size_t n = 1;
    for (int e : t.shape) {
      if (e <= 0) throw std::invalid_argument("checkpoint: non-positive extent in " + t.name);
      n *= static_cast<std::size_t>(e);
    }
    if (n != t.data.size())
      throw std::invalid_argument("checkpoint: shape/data mismatch in " + t.name);
    const std::uint16_t len = static_cast<std::uint16_t>(t.name.size());
    out.write(reinterpret_cast<const char*>(&len), 2);
    out.write(t.name.data(), len);
    const std::uint8_t rank = static_cast<std::uint8_t>(t.shape.size());
    out.write(reinterpret_cast<const char*>(&rank), 1);
    for (int e : t.shape) {
      const std::uint32_t ext = static_cast<std::uint32_t>(e);
      out.write(reinterpret_cast<const char*>(&ext), 4);
    }
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  }
}

std::vector<NamedTensor> read_records(std::ifstream& in, const std::string& path) {
  std::uint32_t count = 0;
  in.read(reinterpret_cast<char*>(&count), 4);
  if (!in) throw std::runtime_error(path + ": truncated record count");
  std::vector<NamedTensor> tensors;
  tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    std::uint16_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 2);
    t.name.resize(len);
    in.read(t.name.data(), len);
    std::uint8_t rank = 0;
    in.read(reinterpret_cast<char*>(&rank), 1);
    std::size_t n = 1;
    for (int r = 0; r < rank; ++r) {
      std::uint32_t ext = 0;
      in.read(reinterpret_cast<char*>(&ext), 4);
      t.shape.push_back(static_cast<int>(ext));
      n *= ext;
    }
    if (!in) throw std::runtime_error(path + ": truncated header of tensor " + std::to_string(i));
    t.data.resize(n);
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(n * sizeof(float)));
    if (static_cast<std::size_t>(in.gcount()) != n * sizeof(float))
      throw std::runtime_error(path + ": truncated data of tensor " + t.name);
    tensors.push_back(std::move(t));
  }
  return tensors;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out.write(kMagic, 4);
  out.write(reinterpret_cast<const char*>(&kCheckpointVersion), 4);
  write_records(out, ckpt.tensors);
  if (!ckpt.optimizer.empty()) {
    out.write(kOptMarker, 4);
    write_records(out, ckpt.optimizer);
  }
  if (!out) throw std::runtime_error(path + ": write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error(path + ": bad magic (want EGCK)");
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  if (version != kCheckpointVersion)
    throw std::runtime_error(path + ": unsupported version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.tensors = read_records(in, path);
  char marker[4];
  in.read(marker, 4);
  if (in.gcount() == 4 && std::memcmp(marker, kOptMarker, 4) == 0)
    ckpt.optimizer = read_records(in, path);
  return ckpt;
}

}  // namespace egnlq
