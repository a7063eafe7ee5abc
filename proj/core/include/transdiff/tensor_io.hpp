// Raw tensor files ("TDTN" magic, dtype byte, shape, little-endian payload)
// and 8-bit greyscale PGM renders of latents for eyeballing.
#pragma once

#include "transdiff/tensor.hpp"

#include <string>

namespace transdiff::io {

inline constexpr char kTensorMagic[4] = {'T', 'D', 'T', 'N'};

void write_tensor_file(const std::string& path, const Tensor<float>& t);
void write_tensor_file(const std::string& path, const Tensor<double>& t);
Tensor<float> read_tensor_file_f32(const std::string& path);
Tensor<double> read_tensor_file_f64(const std::string& path);

// channel-averaged h x w render, min..max scaled to 0..255
void write_pgm(const std::string& path, const Tensor<float>& latent, std::int64_t h,
               std::int64_t w);

}  // namespace transdiff::io
