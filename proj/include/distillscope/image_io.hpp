#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "distillscope/tensor.hpp"

namespace distillscope {

/// Reads PGM/PPM (P2, P3, P5, P6) or PNG into [C,H,W] floats in [0,1].
Tensor<float> read_image(const std::filesystem::path& path);

/// Binary 8-bit PGM (P5) from an [H,W] map, min-max normalised. A constant
/// map is written as all zeros.
void write_pgm(const std::filesystem::path& path, const Tensor<float>& map);
std::vector<std::uint8_t> to_gray8(const Tensor<float>& map);

/// Writes an [C,H,W] image in [0,1] as P5 (C = 1) or P6 (C = 3), without normalization.
void write_pnm(const std::filesystem::path& path, const Tensor<float>& image);

bool is_image_file(const std::filesystem::path& path);

}  // namespace distillscope
