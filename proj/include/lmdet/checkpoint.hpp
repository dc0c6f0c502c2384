#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "lmdet/tensor.hpp"

namespace lmdet {

// Binary weight file: magic "LNNA", u32 version, u32 count, then per tensor
// u32 name length, UTF-8 name, u32 rank, u32 extents, raw little-endian f32
// data. Round-trips bit-exactly.
inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor<float>>>& tensors);

std::vector<std::pair<std::string, Tensor<float>>> load_checkpoint(const std::string& path);

std::map<std::string, Tensor<float>> load_checkpoint_map(const std::string& path);

}  // namespace lmdet
