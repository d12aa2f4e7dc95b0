#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace taft {

// Binary PGM (P5, maxval 255). Pixels are row-major, one byte each.
void write_pgm(const std::string& path, int width, int height,
               const std::vector<uint8_t>& pixels);

std::vector<uint8_t> read_pgm(const std::string& path, int& width, int& height);

}  // namespace taft
