#pragma once

#include <Eigen/Core>

namespace skinlab::nn::detail {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMat>;
using ConstMapRow = Eigen::Map<const RowMat>;

// Column scratch kept under this many floats; larger batches are chunked.
inline constexpr std::size_t kColumnBudget = std::size_t{8} << 20;

// x: one sample [C, H, W]; writes rows (c*k + ki)*k + kj, columns
// col_offset + oy*Wo + ox of a row-major matrix with leading dimension ld.
void im2col(const float* x, int channels, int height, int width, int kernel, int stride, int padding, int out_h,
            int out_w, float* col, std::size_t ld, std::size_t col_offset);

// Adjoint of im2col: accumulates columns back into x.
void col2im(const float* col, std::size_t ld, std::size_t col_offset, int channels, int height, int width, int kernel,
            int stride, int padding, int out_h, int out_w, float* x);

}  // namespace skinlab::nn::detail
