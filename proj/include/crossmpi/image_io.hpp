#pragma once

#include <filesystem>
#include <string>

#include "crossmpi/tensor.hpp"

namespace crossmpi {

/// Binary PGM (P5, one channel) or PPM (P6, three channels), 8-bit only.
/// Pixels become value/255 in a [C,H,W] tensor. Throws Error(kFormat) on a
/// malformed header, maxval other than 255, or a truncated payload, and
/// Error(kMissingInput) when the file cannot be opened.
Tensor read_image(const std::filesystem::path& path);
Tensor decode_image(const std::string& bytes);

/// Writes P5 for one channel, P6 for three. Values are clamped to [0,1] and
/// rounded to the nearest 8-bit level.
void write_image(const std::filesystem::path& path, const Tensor& image);
std::string encode_image(const Tensor& image);

/// Rounds every value to the nearest multiple of 1/255 after clamping to [0,1].
Tensor quantize8(const Tensor& image);

}  // namespace crossmpi
