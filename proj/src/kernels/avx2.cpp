// AVX2/FMA kernels. Compiled with -mavx2 -mfma and only called after the
// runtime CPU check in dispatch.cpp.

#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "xrds/kernels.hpp"

namespace xrds::kernels::avx2 {
namespace {

constexpr int kMc = 96;
constexpr int kKc = 256;
constexpr int kNc = 1024;

template <typename T>
struct Tile;
template <>
struct Tile<float> {
  static constexpr int mr = 6;
  static constexpr int nr = 16;
};
template <>
struct Tile<double> {
  static constexpr int mr = 6;
  static constexpr int nr = 8;
};

template <typename T>
inline T elem(Trans t, const T* x, int ld, int row, int col) {
  return t == Trans::no ? x[static_cast<std::ptrdiff_t>(row) * ld + col]
                        : x[static_cast<std::ptrdiff_t>(col) * ld + row];
}

// Packs op(A)[i0:i0+mc, p0:p0+kc] into mr-row panels, k-major inside a panel.
template <typename T>
void pack_a(Trans ta, const T* a, int lda, int i0, int mc, int p0, int kc, T* out) {
  constexpr int mr = Tile<T>::mr;
  for (int ir = 0; ir < mc; ir += mr) {
    const int rows = std::min(mr, mc - ir);
    for (int p = 0; p < kc; ++p) {
      for (int i = 0; i < mr; ++i) {
        *out++ = i < rows ? elem(ta, a, lda, i0 + ir + i, p0 + p) : T(0);
      }
    }
  }
}

// Packs op(B)[p0:p0+kc, j0:j0+nc] into nr-column panels.
template <typename T>
void pack_b(Trans tb, const T* b, int ldb, int p0, int kc, int j0, int nc, T* out) {
  constexpr int nr = Tile<T>::nr;
  for (int jr = 0; jr < nc; jr += nr) {
    const int cols = std::min(nr, nc - jr);
    for (int p = 0; p < kc; ++p) {
      if (tb == Trans::no && cols == nr) {
        std::memcpy(out, b + static_cast<std::ptrdiff_t>(p0 + p) * ldb + j0 + jr, sizeof(T) * nr);
        out += nr;
        continue;
      }
      for (int j = 0; j < nr; ++j) {
        *out++ = j < cols ? elem(tb, b, ldb, p0 + p, j0 + jr + j) : T(0);
      }
    }
  }
}

// Accumulators are named locals rather than an array: indexing an array after
// the loop makes GCC spill all twelve to the stack on every iteration.
struct Acc6x2f {
  __m256 c00, c01, c10, c11, c20, c21, c30, c31, c40, c41, c50, c51;
};

struct Acc6x2d {
  __m256d c00, c01, c10, c11, c20, c21, c30, c31, c40, c41, c50, c51;
};

inline void micro_kernel(int kc, const float* ap, const float* bp, float alpha, float* c, int ldc, int rows,
                         int cols) {
  const __m256 z = _mm256_setzero_ps();
  Acc6x2f a{z, z, z, z, z, z, z, z, z, z, z, z};
  for (int p = 0; p < kc; ++p) {
    const __m256 b0 = _mm256_loadu_ps(bp);
    const __m256 b1 = _mm256_loadu_ps(bp + 8);
    __m256 av = _mm256_broadcast_ss(ap);
    a.c00 = _mm256_fmadd_ps(av, b0, a.c00);
    a.c01 = _mm256_fmadd_ps(av, b1, a.c01);
    av = _mm256_broadcast_ss(ap + 1);
    a.c10 = _mm256_fmadd_ps(av, b0, a.c10);
    a.c11 = _mm256_fmadd_ps(av, b1, a.c11);
    av = _mm256_broadcast_ss(ap + 2);
    a.c20 = _mm256_fmadd_ps(av, b0, a.c20);
    a.c21 = _mm256_fmadd_ps(av, b1, a.c21);
    av = _mm256_broadcast_ss(ap + 3);
    a.c30 = _mm256_fmadd_ps(av, b0, a.c30);
    a.c31 = _mm256_fmadd_ps(av, b1, a.c31);
    av = _mm256_broadcast_ss(ap + 4);
    a.c40 = _mm256_fmadd_ps(av, b0, a.c40);
    a.c41 = _mm256_fmadd_ps(av, b1, a.c41);
    av = _mm256_broadcast_ss(ap + 5);
    a.c50 = _mm256_fmadd_ps(av, b0, a.c50);
    a.c51 = _mm256_fmadd_ps(av, b1, a.c51);
    ap += 6;
    bp += 16;
  }
  const __m256 alpha_v = _mm256_set1_ps(alpha);
  if (rows == 6 && cols == 16) {
    auto store = [&](float* crow, __m256 lo, __m256 hi) {
      _mm256_storeu_ps(crow, _mm256_fmadd_ps(alpha_v, lo, _mm256_loadu_ps(crow)));
      _mm256_storeu_ps(crow + 8, _mm256_fmadd_ps(alpha_v, hi, _mm256_loadu_ps(crow + 8)));
    };
    store(c + 0 * static_cast<std::ptrdiff_t>(ldc), a.c00, a.c01);
    store(c + 1 * static_cast<std::ptrdiff_t>(ldc), a.c10, a.c11);
    store(c + 2 * static_cast<std::ptrdiff_t>(ldc), a.c20, a.c21);
    store(c + 3 * static_cast<std::ptrdiff_t>(ldc), a.c30, a.c31);
    store(c + 4 * static_cast<std::ptrdiff_t>(ldc), a.c40, a.c41);
    store(c + 5 * static_cast<std::ptrdiff_t>(ldc), a.c50, a.c51);
    return;
  }
  alignas(32) float tmp[6][16];
  _mm256_store_ps(&tmp[0][0], _mm256_mul_ps(alpha_v, a.c00));
  _mm256_store_ps(&tmp[0][8], _mm256_mul_ps(alpha_v, a.c01));
  _mm256_store_ps(&tmp[1][0], _mm256_mul_ps(alpha_v, a.c10));
  _mm256_store_ps(&tmp[1][8], _mm256_mul_ps(alpha_v, a.c11));
  _mm256_store_ps(&tmp[2][0], _mm256_mul_ps(alpha_v, a.c20));
  _mm256_store_ps(&tmp[2][8], _mm256_mul_ps(alpha_v, a.c21));
  _mm256_store_ps(&tmp[3][0], _mm256_mul_ps(alpha_v, a.c30));
  _mm256_store_ps(&tmp[3][8], _mm256_mul_ps(alpha_v, a.c31));
  _mm256_store_ps(&tmp[4][0], _mm256_mul_ps(alpha_v, a.c40));
  _mm256_store_ps(&tmp[4][8], _mm256_mul_ps(alpha_v, a.c41));
  _mm256_store_ps(&tmp[5][0], _mm256_mul_ps(alpha_v, a.c50));
  _mm256_store_ps(&tmp[5][8], _mm256_mul_ps(alpha_v, a.c51));
  for (int i = 0; i < rows; ++i) {
    float* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
    for (int j = 0; j < cols; ++j) crow[j] += tmp[i][j];
  }
}

inline void micro_kernel(int kc, const double* ap, const double* bp, double alpha, double* c, int ldc,
                         int rows, int cols) {
  const __m256d z = _mm256_setzero_pd();
  Acc6x2d a{z, z, z, z, z, z, z, z, z, z, z, z};
  for (int p = 0; p < kc; ++p) {
    const __m256d b0 = _mm256_loadu_pd(bp);
    const __m256d b1 = _mm256_loadu_pd(bp + 4);
    __m256d av = _mm256_broadcast_sd(ap);
    a.c00 = _mm256_fmadd_pd(av, b0, a.c00);
    a.c01 = _mm256_fmadd_pd(av, b1, a.c01);
    av = _mm256_broadcast_sd(ap + 1);
    a.c10 = _mm256_fmadd_pd(av, b0, a.c10);
    a.c11 = _mm256_fmadd_pd(av, b1, a.c11);
    av = _mm256_broadcast_sd(ap + 2);
    a.c20 = _mm256_fmadd_pd(av, b0, a.c20);
    a.c21 = _mm256_fmadd_pd(av, b1, a.c21);
    av = _mm256_broadcast_sd(ap + 3);
    a.c30 = _mm256_fmadd_pd(av, b0, a.c30);
    a.c31 = _mm256_fmadd_pd(av, b1, a.c31);
    av = _mm256_broadcast_sd(ap + 4);
    a.c40 = _mm256_fmadd_pd(av, b0, a.c40);
    a.c41 = _mm256_fmadd_pd(av, b1, a.c41);
    av = _mm256_broadcast_sd(ap + 5);
    a.c50 = _mm256_fmadd_pd(av, b0, a.c50);
    a.c51 = _mm256_fmadd_pd(av, b1, a.c51);
    ap += 6;
    bp += 8;
  }
  const __m256d alpha_v = _mm256_set1_pd(alpha);
  if (rows == 6 && cols == 8) {
    auto store = [&](double* crow, __m256d lo, __m256d hi) {
      _mm256_storeu_pd(crow, _mm256_fmadd_pd(alpha_v, lo, _mm256_loadu_pd(crow)));
      _mm256_storeu_pd(crow + 4, _mm256_fmadd_pd(alpha_v, hi, _mm256_loadu_pd(crow + 4)));
    };
    store(c + 0 * static_cast<std::ptrdiff_t>(ldc), a.c00, a.c01);
    store(c + 1 * static_cast<std::ptrdiff_t>(ldc), a.c10, a.c11);
    store(c + 2 * static_cast<std::ptrdiff_t>(ldc), a.c20, a.c21);
    store(c + 3 * static_cast<std::ptrdiff_t>(ldc), a.c30, a.c31);
    store(c + 4 * static_cast<std::ptrdiff_t>(ldc), a.c40, a.c41);
    store(c + 5 * static_cast<std::ptrdiff_t>(ldc), a.c50, a.c51);
    return;
  }
  alignas(32) double tmp[6][8];
  _mm256_store_pd(&tmp[0][0], _mm256_mul_pd(alpha_v, a.c00));
  _mm256_store_pd(&tmp[0][4], _mm256_mul_pd(alpha_v, a.c01));
  _mm256_store_pd(&tmp[1][0], _mm256_mul_pd(alpha_v, a.c10));
  _mm256_store_pd(&tmp[1][4], _mm256_mul_pd(alpha_v, a.c11));
  _mm256_store_pd(&tmp[2][0], _mm256_mul_pd(alpha_v, a.c20));
  _mm256_store_pd(&tmp[2][4], _mm256_mul_pd(alpha_v, a.c21));
  _mm256_store_pd(&tmp[3][0], _mm256_mul_pd(alpha_v, a.c30));
  _mm256_store_pd(&tmp[3][4], _mm256_mul_pd(alpha_v, a.c31));
  _mm256_store_pd(&tmp[4][0], _mm256_mul_pd(alpha_v, a.c40));
  _mm256_store_pd(&tmp[4][4], _mm256_mul_pd(alpha_v, a.c41));
  _mm256_store_pd(&tmp[5][0], _mm256_mul_pd(alpha_v, a.c50));
  _mm256_store_pd(&tmp[5][4], _mm256_mul_pd(alpha_v, a.c51));
  for (int i = 0; i < rows; ++i) {
    double* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
    for (int j = 0; j < cols; ++j) crow[j] += tmp[i][j];
  }
}

template <typename T>
std::vector<T>& scratch(int which) {
  thread_local std::vector<T> buffers[2];
  return buffers[which];
}

}  // namespace

template <typename T>
void gemm(Trans ta, Trans tb, int m, int n, int k, T alpha, const T* a, int lda, const T* b, int ldb,
          T beta, T* c, int ldc) {
  constexpr int mr = Tile<T>::mr;
  constexpr int nr = Tile<T>::nr;

  for (int i = 0; i < m; ++i) {
    T* row = c + static_cast<std::ptrdiff_t>(i) * ldc;
    if (beta == T(0)) {
      std::fill(row, row + n, T(0));
    } else if (beta != T(1)) {
      for (int j = 0; j < n; ++j) row[j] *= beta;
    }
  }
  if (k == 0 || alpha == T(0)) return;

  std::vector<T>& apack = scratch<T>(0);
  std::vector<T>& bpack = scratch<T>(1);
  apack.resize(static_cast<std::size_t>(kMc + mr) * kKc);
  bpack.resize(static_cast<std::size_t>(kNc + nr) * kKc);

  for (int jc = 0; jc < n; jc += kNc) {
    const int nc = std::min(kNc, n - jc);
    for (int pc = 0; pc < k; pc += kKc) {
      const int kc = std::min(kKc, k - pc);
      pack_b(tb, b, ldb, pc, kc, jc, nc, bpack.data());
      for (int ic = 0; ic < m; ic += kMc) {
        const int mc = std::min(kMc, m - ic);
        pack_a(ta, a, lda, ic, mc, pc, kc, apack.data());
        for (int jr = 0; jr < nc; jr += nr) {
          const int cols = std::min(nr, nc - jr);
          const T* bp = bpack.data() + static_cast<std::ptrdiff_t>(jr) * kc;
          for (int ir = 0; ir < mc; ir += mr) {
            const int rows = std::min(mr, mc - ir);
            const T* ap = apack.data() + static_cast<std::ptrdiff_t>(ir) * kc;
            T* cp = c + static_cast<std::ptrdiff_t>(ic + ir) * ldc + jc + jr;
            micro_kernel(kc, ap, bp, alpha, cp, ldc, rows, cols);
          }
        }
      }
    }
  }
}

template <>
void adam_update<float>(std::span<float> param, std::span<const float> grad, std::span<float> m,
                        std::span<float> v, const AdamStep<float>& s) {
  const float bc1 = 1.0f - std::pow(s.beta1, static_cast<float>(s.step));
  const float bc2_sqrt = std::sqrt(1.0f - std::pow(s.beta2, static_cast<float>(s.step)));
  const float step_size = s.lr / bc1;
  const float omb1 = 1.0f - s.beta1;
  const float omb2 = 1.0f - s.beta2;
  const __m256 b1v = _mm256_set1_ps(s.beta1), b2v = _mm256_set1_ps(s.beta2);
  const __m256 omb1v = _mm256_set1_ps(omb1), omb2v = _mm256_set1_ps(omb2);
  const __m256 bc2v = _mm256_set1_ps(bc2_sqrt), epsv = _mm256_set1_ps(s.eps);
  const __m256 ssv = _mm256_set1_ps(step_size);
  std::size_t i = 0;
  for (; i + 8 <= param.size(); i += 8) {
    const __m256 g = _mm256_loadu_ps(&grad[i]);
    const __m256 mv = _mm256_add_ps(_mm256_mul_ps(b1v, _mm256_loadu_ps(&m[i])), _mm256_mul_ps(omb1v, g));
    const __m256 vv = _mm256_add_ps(_mm256_mul_ps(b2v, _mm256_loadu_ps(&v[i])),
                                    _mm256_mul_ps(omb2v, _mm256_mul_ps(g, g)));
    _mm256_storeu_ps(&m[i], mv);
    _mm256_storeu_ps(&v[i], vv);
    const __m256 denom = _mm256_add_ps(_mm256_div_ps(_mm256_sqrt_ps(vv), bc2v), epsv);
    const __m256 upd = _mm256_mul_ps(ssv, _mm256_div_ps(mv, denom));
    _mm256_storeu_ps(&param[i], _mm256_sub_ps(_mm256_loadu_ps(&param[i]), upd));
  }
  for (; i < param.size(); ++i) {
    const float g = grad[i];
    m[i] = s.beta1 * m[i] + omb1 * g;
    v[i] = s.beta2 * v[i] + omb2 * (g * g);
    const float denom = std::sqrt(v[i]) / bc2_sqrt + s.eps;
    param[i] -= step_size * (m[i] / denom);
  }
}

template <>
void adam_update<double>(std::span<double> param, std::span<const double> grad, std::span<double> m,
                         std::span<double> v, const AdamStep<double>& s) {
  const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double bc2_sqrt = std::sqrt(1.0 - std::pow(s.beta2, static_cast<double>(s.step)));
  const double step_size = s.lr / bc1;
  const double omb1 = 1.0 - s.beta1;
  const double omb2 = 1.0 - s.beta2;
  const __m256d b1v = _mm256_set1_pd(s.beta1), b2v = _mm256_set1_pd(s.beta2);
  const __m256d omb1v = _mm256_set1_pd(omb1), omb2v = _mm256_set1_pd(omb2);
  const __m256d bc2v = _mm256_set1_pd(bc2_sqrt), epsv = _mm256_set1_pd(s.eps);
  const __m256d ssv = _mm256_set1_pd(step_size);
  std::size_t i = 0;
  for (; i + 4 <= param.size(); i += 4) {
    const __m256d g = _mm256_loadu_pd(&grad[i]);
    const __m256d mv = _mm256_add_pd(_mm256_mul_pd(b1v, _mm256_loadu_pd(&m[i])), _mm256_mul_pd(omb1v, g));
    const __m256d vv = _mm256_add_pd(_mm256_mul_pd(b2v, _mm256_loadu_pd(&v[i])),
                                     _mm256_mul_pd(omb2v, _mm256_mul_pd(g, g)));
    _mm256_storeu_pd(&m[i], mv);
    _mm256_storeu_pd(&v[i], vv);
    const __m256d denom = _mm256_add_pd(_mm256_div_pd(_mm256_sqrt_pd(vv), bc2v), epsv);
    const __m256d upd = _mm256_mul_pd(ssv, _mm256_div_pd(mv, denom));
    _mm256_storeu_pd(&param[i], _mm256_sub_pd(_mm256_loadu_pd(&param[i]), upd));
  }
  for (; i < param.size(); ++i) {
    const double g = grad[i];
    m[i] = s.beta1 * m[i] + omb1 * g;
    v[i] = s.beta2 * v[i] + omb2 * (g * g);
    const double denom = std::sqrt(v[i]) / bc2_sqrt + s.eps;
    param[i] -= step_size * (m[i] / denom);
  }
}

template void gemm<float>(Trans, Trans, int, int, int, float, const float*, int, const float*, int, float,
                          float*, int);
template void gemm<double>(Trans, Trans, int, int, int, double, const double*, int, const double*, int,
                           double, double*, int);

}  // namespace xrds::kernels::avx2
