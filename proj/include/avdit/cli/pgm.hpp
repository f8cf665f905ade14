#pragma once

// Binary PGM (P5), 8-bit.

#include "avdit/numerics/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace avdit::cli {

struct GrayImage {
  Index width = 0;
  Index height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

/// Min-max normalizes to 0..255 (a constant image maps to 0).
GrayImage to_gray(const MatrixX<double>& m);
std::string encode_pgm(const GrayImage& img);
void write_pgm(const std::string& path, const MatrixX<double>& m);

/// Reader for P5 files with maxval 255; throws std::runtime_error otherwise.
GrayImage read_pgm(const std::string& path);

}  // namespace avdit::cli
