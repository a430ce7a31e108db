#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace mtp::kernels {

// exp for the float training path: range-reduced degree-6 Taylor, relative
// error ~1e-7, branch-free body so the surrounding loops vectorize. The
// double overload stays on libm; verification code runs in double.
inline float vexp(float x) {
    x = std::min(88.0f, std::max(-87.0f, x));
    const float kf = std::floor(x * 1.44269504088896341f + 0.5f);
    const float r = x - kf * 0.693147180559945286f;
    float p = 1.0f / 720.0f;
    p = p * r + 1.0f / 120.0f;
    p = p * r + 1.0f / 24.0f;
    p = p * r + 1.0f / 6.0f;
    p = p * r + 0.5f;
    p = p * r + 1.0f;
    p = p * r + 1.0f;
    const int32_t k = static_cast<int32_t>(kf);
    uint32_t bits = static_cast<uint32_t>(k + 127) << 23;
    float scale;
    std::memcpy(&scale, &bits, 4);
    return p * scale;
}

inline double vexp(double x) { return std::exp(x); }

#if defined(__AVX512F__)
#define MTP_HAVE_AVX512_EXP 1
#endif

// out[i] = exp(in[i]) for float spans, vectorized by hand where available;
// same range reduction and polynomial as vexp(float), so scalar and vector
// paths agree to the last digit of the approximation design.
inline void vexp_span(const double* in, double* out, size_t n) {
    for (size_t i = 0; i < n; ++i) out[i] = std::exp(in[i]);
}

inline void vexp_span(const float* in, float* out, size_t n) {
#ifdef MTP_HAVE_AVX512_EXP
    size_t i = 0;
    if (n >= 16) {
        const __m512 lo = _mm512_set1_ps(-87.0f), hi = _mm512_set1_ps(88.0f);
        const __m512 log2e = _mm512_set1_ps(1.44269504088896341f);
        const __m512 magic = _mm512_set1_ps(12582912.0f);
        const __m512 ln2 = _mm512_set1_ps(0.693147180559945286f);
        const __m512 c6 = _mm512_set1_ps(1.0f / 720.0f), c5 = _mm512_set1_ps(1.0f / 120.0f),
                     c4 = _mm512_set1_ps(1.0f / 24.0f), c3 = _mm512_set1_ps(1.0f / 6.0f),
                     c2 = _mm512_set1_ps(0.5f), c1 = _mm512_set1_ps(1.0f);
        const __m512i bias = _mm512_set1_epi32(1065353216); // bits of 1.0f
        for (; i + 16 <= n; i += 16) {
            __m512 x = _mm512_max_ps(lo, _mm512_min_ps(hi, _mm512_loadu_ps(in + i)));
            __m512 kf = _mm512_sub_ps(_mm512_fmadd_ps(x, log2e, magic), magic);
            __m512 r = _mm512_fnmadd_ps(kf, ln2, x);
            __m512 p = _mm512_fmadd_ps(c6, r, c5);
            p = _mm512_fmadd_ps(p, r, c4);
            p = _mm512_fmadd_ps(p, r, c3);
            p = _mm512_fmadd_ps(p, r, c2);
            p = _mm512_fmadd_ps(p, r, c1);
            p = _mm512_fmadd_ps(p, r, c1);
            __m512i j = _mm512_add_epi32(_mm512_slli_epi32(_mm512_cvtps_epi32(kf), 23), bias);
            _mm512_storeu_ps(out + i, _mm512_mul_ps(p, _mm512_castsi512_ps(j)));
        }
    }
    for (; i < n; ++i) out[i] = vexp(in[i]);
#else
    for (size_t i = 0; i < n; ++i) out[i] = vexp(in[i]);
#endif
}

// Hot loops for the three matmul data flows used by forward and backward
// passes. All matrices are dense row-major. The j-inner loops are written so
// the compiler can vectorize them with FMA; at the sizes this project runs
// (k, n in the tens to low hundreds) packing or tiling buys nothing.

// Fixed-width accumulator variant: with N a compile-time constant the C row
// block lives in vector registers across the whole k loop.
template <typename T, int N>
void matmul_nn_acc_fixed(const T* __restrict a, const T* __restrict b, T* __restrict c, int m, int k) {
    for (int i = 0; i < m; ++i) {
        const T* ai = a + static_cast<size_t>(i) * k;
        T* ci = c + static_cast<size_t>(i) * N;
        T acc0[N] = {}, acc1[N] = {}, acc2[N] = {}, acc3[N] = {};
        int p = 0;
        for (; p + 4 <= k; p += 4) {
            const T a0 = ai[p], a1 = ai[p + 1], a2 = ai[p + 2], a3 = ai[p + 3];
            const T* b0 = b + static_cast<size_t>(p) * N;
            for (int j = 0; j < N; ++j) acc0[j] += a0 * b0[j];
            for (int j = 0; j < N; ++j) acc1[j] += a1 * b0[N + j];
            for (int j = 0; j < N; ++j) acc2[j] += a2 * b0[2 * N + j];
            for (int j = 0; j < N; ++j) acc3[j] += a3 * b0[3 * N + j];
        }
        for (; p < k; ++p) {
            const T a0 = ai[p];
            const T* b0 = b + static_cast<size_t>(p) * N;
            for (int j = 0; j < N; ++j) acc0[j] += a0 * b0[j];
        }
        for (int j = 0; j < N; ++j) ci[j] += (acc0[j] + acc1[j]) + (acc2[j] + acc3[j]);
    }
}

// C[m x n] += A[m x k] * B[k x n]. Attention-head widths get the
// register-blocked path; everything else streams B rows through the FMA
// units.
template <typename T>
void matmul_nn_acc(const T* __restrict a, const T* __restrict b, T* __restrict c,
                   int m, int k, int n) {
    switch (n) {
        case 8: matmul_nn_acc_fixed<T, 8>(a, b, c, m, k); return;
        case 16: matmul_nn_acc_fixed<T, 16>(a, b, c, m, k); return;
        case 32: matmul_nn_acc_fixed<T, 32>(a, b, c, m, k); return;
        default: break;
    }
    for (int i = 0; i < m; ++i) {
        const T* ai = a + static_cast<size_t>(i) * k;
        T* ci = c + static_cast<size_t>(i) * n;
        int p = 0;
        for (; p + 4 <= k; p += 4) {
            const T a0 = ai[p], a1 = ai[p + 1], a2 = ai[p + 2], a3 = ai[p + 3];
            const T* b0 = b + static_cast<size_t>(p) * n;
            const T* b1 = b0 + n;
            const T* b2 = b1 + n;
            const T* b3 = b2 + n;
            for (int j = 0; j < n; ++j) ci[j] += ((a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]));
        }
        for (; p < k; ++p) {
            const T aip = ai[p];
            const T* bp = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

// C[m x n] += A[m x k] * B[n x k]^T   (rows of B are the reduction axis)
template <typename T>
void matmul_nt_acc(const T* __restrict a, const T* __restrict b, T* __restrict c,
                   int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* ai = a + static_cast<size_t>(i) * k;
        T* ci = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const T* bj = b + static_cast<size_t>(j) * k;
            T s = T(0);
            for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
            ci[j] += s;
        }
    }
}

// C[k x n] += A[m x k]^T * B[m x n]. Blocking 4 output rows per pass of B
// keeps the B row in registers instead of re-streaming it k times.
template <typename T>
void matmul_tn_acc(const T* __restrict a, const T* __restrict b, T* __restrict c,
                   int m, int k, int n) {
    int p0 = 0;
    for (; p0 + 4 <= k; p0 += 4) {
        T* __restrict c0 = c + static_cast<size_t>(p0) * n;
        T* __restrict c1 = c0 + n;
        T* __restrict c2 = c1 + n;
        T* __restrict c3 = c2 + n;
        for (int i = 0; i < m; ++i) {
            const T* ai = a + static_cast<size_t>(i) * k + p0;
            const T a0 = ai[0], a1 = ai[1], a2 = ai[2], a3 = ai[3];
            const T* bi = b + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                const T bj = bi[j];
                c0[j] += a0 * bj;
                c1[j] += a1 * bj;
                c2[j] += a2 * bj;
                c3[j] += a3 * bj;
            }
        }
    }
    for (; p0 < k; ++p0) {
        T* cp = c + static_cast<size_t>(p0) * n;
        for (int i = 0; i < m; ++i) {
            const T aip = a[static_cast<size_t>(i) * k + p0];
            const T* bi = b + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) cp[j] += aip * bi[j];
        }
    }
}

template <typename T>
void axpy(T alpha, const T* __restrict x, T* __restrict y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// Reductions in a fixed lane-partial order: vectorizable without fast-math
// and deterministic by construction.
template <typename T>
T lane_sum(const T* __restrict x, size_t n) {
    T part[16] = {};
    size_t i = 0;
    for (; i + 16 <= n; i += 16)
        for (int l = 0; l < 16; ++l) part[l] += x[i + l];
    for (; i < n; ++i) part[i % 16] += x[i];
    T s01 = (part[0] + part[1]) + (part[2] + part[3]);
    T s23 = (part[4] + part[5]) + (part[6] + part[7]);
    T s45 = (part[8] + part[9]) + (part[10] + part[11]);
    T s67 = (part[12] + part[13]) + (part[14] + part[15]);
    return (s01 + s23) + (s45 + s67);
}

template <typename T>
T lane_sumsq_dev(const T* __restrict x, size_t n, T mean) {
    T part[16] = {};
    size_t i = 0;
    for (; i + 16 <= n; i += 16)
        for (int l = 0; l < 16; ++l) {
            const T c = x[i + l] - mean;
            part[l] += c * c;
        }
    for (; i < n; ++i) {
        const T c = x[i] - mean;
        part[i % 16] += c * c;
    }
    T s01 = (part[0] + part[1]) + (part[2] + part[3]);
    T s23 = (part[4] + part[5]) + (part[6] + part[7]);
    T s45 = (part[8] + part[9]) + (part[10] + part[11]);
    T s67 = (part[12] + part[13]) + (part[14] + part[15]);
    return (s01 + s23) + (s45 + s67);
}

// y[i] += a[i] * b[i] elementwise with lane accumulation of dot(a, y-src):
// helper for layer-norm backward row sums.
template <typename T>
void lane_two_sums(const T* __restrict a, const T* __restrict b, size_t n, T& sum_a, T& sum_ab) {
    T pa[16] = {}, pab[16] = {};
    size_t i = 0;
    for (; i + 16 <= n; i += 16)
        for (int l = 0; l < 16; ++l) {
            pa[l] += a[i + l];
            pab[l] += a[i + l] * b[i + l];
        }
    for (; i < n; ++i) {
        pa[i % 16] += a[i];
        pab[i % 16] += a[i] * b[i];
    }
    T sa = T(0), sab = T(0);
    for (int l = 0; l < 16; ++l) {
        sa += pa[l];
        sab += pab[l];
    }
    sum_a = sa;
    sum_ab = sab;
}

} // namespace mtp::kernels
