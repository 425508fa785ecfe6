#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace dap {

// Row-major throughout: token sequences are (tokens x width), grids are
// (rows x cols), and the on-disk raw layout is row-major as well.
template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatF = Mat<float>;
using MatD = Mat<double>;
using MaskGrid = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& msg) : std::runtime_error("dimension error: " + msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

struct GenerationError : std::runtime_error {
  explicit GenerationError(const std::string& msg) : std::runtime_error("generation error: " + msg) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

inline void require_dims(bool cond, const std::string& msg) {
  if (!cond) throw DimensionError(msg);
}

// Nearest-neighbor upsampling by an integer factor (each cell becomes a
// factor x factor block).
template <typename T>
Mat<T> upsample_nearest(const Mat<T>& grid, int factor) {
  Mat<T> out(grid.rows() * factor, grid.cols() * factor);
  for (Eigen::Index i = 0; i < out.rows(); ++i)
    for (Eigen::Index j = 0; j < out.cols(); ++j) out(i, j) = grid(i / factor, j / factor);
  return out;
}

// Patch-level mask from a pixel mask: a patch is foreground when at least
// `min_coverage` of its pixels are foreground.
inline MaskGrid patch_mask_from_pixels(const MaskGrid& pixel_mask, int patch_size,
                                       double min_coverage = 0.5) {
  const Eigen::Index rows = pixel_mask.rows() / patch_size;
  const Eigen::Index cols = pixel_mask.cols() / patch_size;
  MaskGrid out(rows, cols);
  for (Eigen::Index pr = 0; pr < rows; ++pr)
    for (Eigen::Index pc = 0; pc < cols; ++pc) {
      long fg = 0;
      for (int y = 0; y < patch_size; ++y)
        for (int x = 0; x < patch_size; ++x)
          fg += pixel_mask(pr * patch_size + y, pc * patch_size + x) ? 1 : 0;
      const double cover = static_cast<double>(fg) / (patch_size * patch_size);
      out(pr, pc) = cover >= min_coverage ? 1 : 0;
    }
  return out;
}

}  // namespace dap
