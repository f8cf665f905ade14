#include "avdit/cli/pgm.hpp"

#include "avdit/cli/checkpoint.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace avdit::cli {

GrayImage to_gray(const MatrixX<double>& m) {
  if (!m.allFinite()) throw NumericError("to_gray: non-finite values");
  GrayImage img;
  img.height = m.rows();
  img.width = m.cols();
  img.pixels.resize(static_cast<std::size_t>(m.size()));
  if (m.size() == 0) return img;
  const double lo = m.minCoeff(), hi = m.maxCoeff();
  const double span = hi - lo;
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) {
      const double v = span > 0.0 ? (m(r, c) - lo) / span * 255.0 : 0.0;
      img.pixels[static_cast<std::size_t>(r * m.cols() + c)] = static_cast<std::uint8_t>(std::lround(v));
    }
  return img;
}

std::string encode_pgm(const GrayImage& img) {
  std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  return out;
}

void write_pgm(const std::string& path, const MatrixX<double>& m) { write_file_atomic(path, encode_pgm(to_gray(m))); }

GrayImage read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string magic;
  long w = -1, h = -1, maxval = -1;
  in >> magic >> w >> h >> maxval;
  if (!in || magic != "P5" || w < 0 || h < 0 || maxval != 255) throw std::runtime_error(path + ": not an 8-bit P5 file");
  in.get();  // single whitespace before the raster
  GrayImage img;
  img.width = w;
  img.height = h;
  img.pixels.resize(static_cast<std::size_t>(w * h));
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw std::runtime_error(path + ": truncated raster");
  if (in.peek() != std::char_traits<char>::eof()) throw std::runtime_error(path + ": trailing bytes");
  return img;
}

}  // namespace avdit::cli
