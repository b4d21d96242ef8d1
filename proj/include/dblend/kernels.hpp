#pragma once

#include <cstddef>

namespace dblend::kernels {

// C[M,N] = A[M,K] * B[K,N], all row-major with explicit leading dimensions.
// Each output element is accumulated over k in ascending order, so results
// do not depend on tiling.
template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c,
          std::size_t ldc);

// out[cols, rows] = in[rows, cols]^T
template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* in, T* out);

// 3x3-style patch extraction for stride-1, zero-padded (pad = ksize/2) convolution.
// cols has shape [channels*ksize*ksize, h*w].
template <typename T>
void im2col(const T* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t ksize, T* cols);

// Adjoint of im2col: accumulates cols back into dx (dx must be zeroed by the caller).
template <typename T>
void col2im(const T* cols, std::size_t channels, std::size_t h, std::size_t w, std::size_t ksize, T* dx);

}  // namespace dblend::kernels
