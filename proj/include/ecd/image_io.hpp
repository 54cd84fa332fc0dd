// Binary PPM (P6) images and PGM (P5) masks.
#pragma once

#include "ecd/change_head.hpp"
#include "ecd/encoder.hpp"

#include <filesystem>

namespace ecd {

void write_ppm(const std::filesystem::path& path, const Image& img);
Image read_ppm(const std::filesystem::path& path);

// 255 = change, 0 = no change.
void write_pgm(const std::filesystem::path& path, const Mask& mask);
// Any nonzero sample reads as change.
Mask read_pgm(const std::filesystem::path& path);

// 8-bit quantization used by write_ppm: round(clamp(v, 0, 1) * 255).
std::uint8_t quantize(float v);

}  // namespace ecd
