#pragma once

#include "gabliteration/matrix.hpp"

namespace gabl::kernels {

// Dense kernels used throughout the library. Each hot kernel has a serial
// reference implementation and an OpenMP variant. The parallel variants
// partition output elements across threads while keeping every inner
// accumulation in the same order as the serial code, so results are
// bit-identical at any thread count. Tests and the bench tool compare both.

Matrix matmul_serial(const Matrix& a, const Matrix& b);
Matrix matmul(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& a);

// a - alpha * b, elementwise; shapes must agree.
Matrix sub_scaled_serial(const Matrix& a, const Matrix& b, double alpha);
Matrix sub_scaled(const Matrix& a, const Matrix& b, double alpha);

// Below this many multiply-adds the OpenMP variants fall back to the
// serial path to avoid fork/join overhead on tiny operands.
inline constexpr std::size_t kParallelFlopThreshold = 1u << 16;

}  // namespace gabl::kernels
