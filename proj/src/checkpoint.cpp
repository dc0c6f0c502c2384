#include "lmdet/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "lmdet/error.hpp"

namespace lmdet {

namespace {

void write_u32(std::ofstream& out, uint32_t v) {
  unsigned char b[4] = {uint8_t(v), uint8_t(v >> 8), uint8_t(v >> 16), uint8_t(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::ifstream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  require(bool(in), "checkpoint: truncated file");
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

}  // namespace

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor<float>>>& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(bool(out), "checkpoint: cannot open for writing: " + path);
  out.write("LNNA", 4);
  write_u32(out, kCheckpointVersion);
  write_u32(out, uint32_t(tensors.size()));
  for (const auto& [name, t] : tensors) {
    write_u32(out, uint32_t(name.size()));
    out.write(name.data(), std::streamsize(name.size()));
    write_u32(out, uint32_t(t.shape.size()));
    for (i64 e : t.shape) write_u32(out, uint32_t(e));
    static_assert(sizeof(float) == 4);
    for (float v : t.data) {
      uint32_t bits;
      std::memcpy(&bits, &v, 4);
      write_u32(out, bits);
    }
  }
  require(bool(out), "checkpoint: write failed: " + path);
}

std::vector<std::pair<std::string, Tensor<float>>> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(bool(in), "checkpoint: cannot open: " + path);
  char magic[4];
  in.read(magic, 4);
  require(bool(in) && std::memcmp(magic, "LNNA", 4) == 0, "checkpoint: bad magic in " + path);
  const uint32_t version = read_u32(in);
  require(version == kCheckpointVersion, "checkpoint: unsupported version " + std::to_string(version));
  const uint32_t count = read_u32(in);
  std::vector<std::pair<std::string, Tensor<float>>> out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = read_u32(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    require(bool(in), "checkpoint: truncated name");
    const uint32_t rank = read_u32(in);
    std::vector<i64> shape(rank);
    for (auto& e : shape) e = i64(read_u32(in));
    Tensor<float> t(shape);
    for (auto& v : t.data) {
      const uint32_t bits = read_u32(in);
      std::memcpy(&v, &bits, 4);
    }
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

std::map<std::string, Tensor<float>> load_checkpoint_map(const std::string& path) {
  std::map<std::string, Tensor<float>> m;
  for (auto& [name, t] : load_checkpoint(path)) m.emplace(std::move(name), std::move(t));
  return m;
}

}  // namespace lmdet
