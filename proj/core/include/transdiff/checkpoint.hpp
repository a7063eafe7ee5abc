// Versioned binary checkpoint container: "TDIF" magic, format version,
// config echo, named float32 parameter tensors, EMA shadow, optimizer state,
// step counter, CRC32 content checksum.
#pragma once

#include "transdiff/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace transdiff::ckpt {

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr char kMagic[4] = {'T', 'D', 'I', 'F'};

struct NamedTensor {
    std::string name;
    Tensor<float> tensor;
};

struct Checkpoint {
    std::uint32_t version = kFormatVersion;
    std::string config_text;  // serialized ModelConfig echo
    std::uint64_t step = 0;
    std::vector<NamedTensor> params;
    std::vector<NamedTensor> ema;
    std::vector<NamedTensor> opt;  // optimizer moments, "m.<name>" / "v.<name>"
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

std::uint32_t crc32(const void* data, std::size_t size, std::uint32_t seed = 0);

}  // namespace transdiff::ckpt
