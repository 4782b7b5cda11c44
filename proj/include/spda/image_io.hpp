#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spda/tensor.hpp"

namespace spda {

struct ImageU16 {
    int h = 0, w = 0, channels = 0;  // 1 or 3
    std::vector<uint16_t> data;      // row-major, interleaved
    int bit_depth = 8;               // source depth: 8 or 16
};

ImageU16 read_png(const std::string& path);
// 8-bit RGB from a (3,H,W) tensor in [0,1].
void write_png_rgb(const std::string& path, const Tensor& rgb_chw);
// Grayscale from an (H,W) tensor in [0,1]; bit_depth 8 or 16.
void write_png_gray(const std::string& path, const Tensor& gray_hw, int bit_depth = 16);

// Raw float32 grid: "SPDAF32" magic, u32 LE width, u32 LE height, then
// width*height little-endian float32 values, row-major.
Tensor read_f32_grid(const std::string& path);
void write_f32_grid(const std::string& path, const Tensor& gray_hw);

// Tensor views of decoded images, scaled to [0,1].
Tensor image_to_gray_tensor(const ImageU16& img);
Tensor image_to_rgb_tensor(const ImageU16& img);  // (3,H,W)

}  // namespace spda
