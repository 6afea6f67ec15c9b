#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "cgnc/tensor.hpp"

namespace cgnc {

// 8-bit interleaved (HWC) image as it exists on disk.
struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 or 3
  std::vector<std::uint8_t> pixels;
};

// Decodes PNG or JPEG (sniffed from the file header). Alpha is dropped.
Image8 read_image(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image8& img);

std::vector<std::uint8_t> encode_jpeg(const Image8& img, int quality);
Image8 decode_jpeg(std::span<const std::uint8_t> bytes);

// [C,H,W] floats in [0,1] <-> 8-bit. Conversion to 8 bits clamps and rounds.
Tensor image_to_tensor(const Image8& img);
Image8 tensor_to_image(const Tensor& chw);

}  // namespace cgnc
