#include "dblend/kernels.hpp"

#include <cstring>
#include <vector>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace dblend::kernels {
namespace {

template <typename T>
struct Simd;
template <>
struct Simd<float> {
    typedef float type __attribute__((vector_size(64)));
};
template <>
struct Simd<double> {
    typedef double type __attribute__((vector_size(64)));
};

template <typename T>
using vec_t = typename Simd<T>::type;

template <typename T>
constexpr std::size_t lanes = sizeof(vec_t<T>) / sizeof(T);

template <typename T>
inline vec_t<T> load(const T* p) {
    vec_t<T> v;
    std::memcpy(&v, p, sizeof(v));
    return v;
}

template <typename T>
inline void store(T* p, vec_t<T> v) {
    std::memcpy(p, &v, sizeof(v));
}

template <typename T, int MR, int NV>
void micro(std::size_t k, const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc) {
    constexpr std::size_t L = lanes<T>;
    vec_t<T> acc[MR][NV];
    for (int r = 0; r < MR; ++r)
        for (int v = 0; v < NV; ++v) acc[r][v] = vec_t<T>{};
    for (std::size_t p = 0; p < k; ++p) {
        const T* brow = b + p * ldb;
        vec_t<T> bv[NV];
        for (int v = 0; v < NV; ++v) bv[v] = load(brow + v * L);
        for (int r = 0; r < MR; ++r) {
            const T s = a[r * lda + p];
            for (int v = 0; v < NV; ++v) acc[r][v] += s * bv[v];
        }
    }
    for (int r = 0; r < MR; ++r)
        for (int v = 0; v < NV; ++v) store(c + r * ldc + v * L, acc[r][v]);
}

#if defined(__AVX512F__)
template <int MR, int NV>
void micro_avx512(std::size_t k, const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c,
                  std::size_t ldc) {
    __m512 acc0[MR], acc1[MR];
    for (int r = 0; r < MR; ++r) acc0[r] = acc1[r] = _mm512_setzero_ps();
    for (std::size_t p = 0; p < k; ++p) {
        const float* brow = b + p * ldb;
        const __m512 b0 = _mm512_loadu_ps(brow);
        const __m512 b1 = NV == 2 ? _mm512_loadu_ps(brow + 16) : b0;
        for (int r = 0; r < MR; ++r) {
            const __m512 av = _mm512_set1_ps(a[r * lda + p]);
            acc0[r] = _mm512_fmadd_ps(av, b0, acc0[r]);
            if constexpr (NV == 2) acc1[r] = _mm512_fmadd_ps(av, b1, acc1[r]);
        }
    }
    for (int r = 0; r < MR; ++r) {
        _mm512_storeu_ps(c + r * ldc, acc0[r]);
        if constexpr (NV == 2) _mm512_storeu_ps(c + r * ldc + 16, acc1[r]);
    }
}

template <int MR, int NV>
void micro_avx512(std::size_t k, const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c,
                  std::size_t ldc) {
    __m512d acc0[MR], acc1[MR];
    for (int r = 0; r < MR; ++r) acc0[r] = acc1[r] = _mm512_setzero_pd();
    for (std::size_t p = 0; p < k; ++p) {
        const double* brow = b + p * ldb;
        const __m512d b0 = _mm512_loadu_pd(brow);
        const __m512d b1 = NV == 2 ? _mm512_loadu_pd(brow + 8) : b0;
        for (int r = 0; r < MR; ++r) {
            const __m512d av = _mm512_set1_pd(a[r * lda + p]);
            acc0[r] = _mm512_fmadd_pd(av, b0, acc0[r]);
            if constexpr (NV == 2) acc1[r] = _mm512_fmadd_pd(av, b1, acc1[r]);
        }
    }
    for (int r = 0; r < MR; ++r) {
        _mm512_storeu_pd(c + r * ldc, acc0[r]);
        if constexpr (NV == 2) _mm512_storeu_pd(c + r * ldc + 8, acc1[r]);
    }
}
#endif

template <typename T, int MR, int NV>
inline void tile(std::size_t k, const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c, std::size_t ldc) {
#if defined(__AVX512F__)
    micro_avx512<MR, NV>(k, a, lda, b, ldb, c, ldc);
#else
    micro<T, MR, NV>(k, a, lda, b, ldb, c, ldc);
#endif
}

template <typename T, int NV>
void panel(std::size_t m, std::size_t k, const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c,
           std::size_t ldc) {
    std::size_t i = 0;
    for (; i + 8 <= m; i += 8) tile<T, 8, NV>(k, a + i * lda, lda, b, ldb, c + i * ldc, ldc);
    switch (m - i) {
        case 7: tile<T, 7, NV>(k, a + i * lda, lda, b, ldb, c + i * ldc, ldc); break;
        case 6: tile<T, 6, NV>(k, a + i * lda, lda, b, ldb, c + i * ldc, ldc); break;
        case 5: tile<T, 5, NV>(k, a + i * lda, lda, b, ldb, c + i * ldc, ldc); break;
        case 4: tile<T, 4, NV>(k, a + i * lda, lda, b, ldb, c + i * ldc, ldc); break;
        case 3: tile<T, 3, NV>(k, a + i * lda, lda, b, ldb, c + i * ldc, ldc); break;
        case 2: tile<T, 2, NV>(k, a + i * lda, lda, b, ldb, c + i * ldc, ldc); break;
        case 1: tile<T, 1, NV>(k, a + i * lda, lda, b, ldb, c + i * ldc, ldc); break;
        default: break;
    }
}

}  // namespace

template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c,
          std::size_t ldc) {
    constexpr std::size_t L = lanes<T>;
    // Column panels of B are packed contiguously and stay cache-resident across row blocks.
    thread_local std::vector<T> packed;
    if (packed.size() < k * 2 * L) packed.resize(k * 2 * L);
    auto pack = [&](std::size_t j, std::size_t width) {
        for (std::size_t p = 0; p < k; ++p) std::memcpy(packed.data() + p * width, b + p * ldb + j, width * sizeof(T));
    };
    std::size_t j = 0;
    for (; j + 2 * L <= n; j += 2 * L) {
        pack(j, 2 * L);
        panel<T, 2>(m, k, a, lda, packed.data(), 2 * L, c + j, ldc);
    }
    for (; j + L <= n; j += L) {
        pack(j, L);
        panel<T, 1>(m, k, a, lda, packed.data(), L, c + j, ldc);
    }
    for (; j < n; ++j)
        for (std::size_t i = 0; i < m; ++i) {
            T acc = T(0);
            for (std::size_t p = 0; p < k; ++p) acc += a[i * lda + p] * b[p * ldb + j];
            c[i * ldc + j] = acc;
        }
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* in, T* out) {
    constexpr std::size_t B = 16;
    for (std::size_t i0 = 0; i0 < rows; i0 += B)
        for (std::size_t j0 = 0; j0 < cols; j0 += B) {
            const std::size_t i1 = i0 + B < rows ? i0 + B : rows;
            const std::size_t j1 = j0 + B < cols ? j0 + B : cols;
            for (std::size_t i = i0; i < i1; ++i)
                for (std::size_t j = j0; j < j1; ++j) out[j * rows + i] = in[i * cols + j];
        }
}

template <typename T>
void im2col(const T* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t ksize, T* cols) {
    const long pad = long(ksize / 2);
    const std::size_t hw = h * w;
    for (std::size_t ch = 0; ch < channels; ++ch)
        for (std::size_t ky = 0; ky < ksize; ++ky)
            for (std::size_t kx = 0; kx < ksize; ++kx) {
                T* row = cols + ((ch * ksize + ky) * ksize + kx) * hw;
                const long dy = long(ky) - pad, dx = long(kx) - pad;
                for (std::size_t y = 0; y < h; ++y) {
                    const long sy = long(y) + dy;
                    T* dst = row + y * w;
                    if (sy < 0 || sy >= long(h)) {
                        std::memset(dst, 0, w * sizeof(T));
                        continue;
                    }
                    const T* src = x + ch * hw + std::size_t(sy) * w;
                    for (std::size_t xx = 0; xx < w; ++xx) {
                        const long sx = long(xx) + dx;
                        dst[xx] = (sx < 0 || sx >= long(w)) ? T(0) : src[sx];
                    }
                }
            }
}

template <typename T>
void col2im(const T* cols, std::size_t channels, std::size_t h, std::size_t w, std::size_t ksize, T* dx) {
    const long pad = long(ksize / 2);
    const std::size_t hw = h * w;
    for (std::size_t ch = 0; ch < channels; ++ch)
        for (std::size_t ky = 0; ky < ksize; ++ky)
            for (std::size_t kx = 0; kx < ksize; ++kx) {
                const T* row = cols + ((ch * ksize + ky) * ksize + kx) * hw;
                const long ddy = long(ky) - pad, ddx = long(kx) - pad;
                for (std::size_t y = 0; y < h; ++y) {
                    const long sy = long(y) + ddy;
                    if (sy < 0 || sy >= long(h)) continue;
                    T* dst = dx + ch * hw + std::size_t(sy) * w;
                    const T* src = row + y * w;
                    for (std::size_t xx = 0; xx < w; ++xx) {
                        const long sx = long(xx) + ddx;
                        if (sx >= 0 && sx < long(w)) dst[sx] += src[xx];
                    }
                }
            }
}

template void gemm<float>(std::size_t, std::size_t, std::size_t, const float*, std::size_t, const float*, std::size_t,
                          float*, std::size_t);
template void gemm<double>(std::size_t, std::size_t, std::size_t, const double*, std::size_t, const double*,
                           std::size_t, double*, std::size_t);
template void transpose<float>(std::size_t, std::size_t, const float*, float*);
template void transpose<double>(std::size_t, std::size_t, const double*, double*);
template void im2col<float>(const float*, std::size_t, std::size_t, std::size_t, std::size_t, float*);
template void im2col<double>(const double*, std::size_t, std::size_t, std::size_t, std::size_t, double*);
template void col2im<float>(const float*, std::size_t, std::size_t, std::size_t, std::size_t, float*);
template void col2im<double>(const double*, std::size_t, std::size_t, std::size_t, std::size_t, double*);

}  // namespace dblend::kernels
