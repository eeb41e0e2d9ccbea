#include "xrds/kernels.hpp"

#include <cmath>

namespace xrds::kernels::scalar {

template <typename T>
void gemm(Trans ta, Trans tb, int m, int n, int k, T alpha, const T* a, int lda, const T* b, int ldb,
          T beta, T* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    T* row = c + static_cast<std::ptrdiff_t>(i) * ldc;
    if (beta == T(0)) {
      for (int j = 0; j < n; ++j) row[j] = T(0);
    } else if (beta != T(1)) {
      for (int j = 0; j < n; ++j) row[j] *= beta;
    }
  }
  if (k == 0 || alpha == T(0)) return;

  for (int i = 0; i < m; ++i) {
    T* row = c + static_cast<std::ptrdiff_t>(i) * ldc;
    for (int p = 0; p < k; ++p) {
      const T aip = alpha * (ta == Trans::no ? a[static_cast<std::ptrdiff_t>(i) * lda + p]
                                             : a[static_cast<std::ptrdiff_t>(p) * lda + i]);
      if (tb == Trans::no) {
        const T* brow = b + static_cast<std::ptrdiff_t>(p) * ldb;
        for (int j = 0; j < n; ++j) row[j] += aip * brow[j];
      } else {
        for (int j = 0; j < n; ++j) row[j] += aip * b[static_cast<std::ptrdiff_t>(j) * ldb + p];
      }
    }
  }
}

template <typename T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                 const AdamStep<T>& s) {
  const T bc1 = T(1) - std::pow(s.beta1, static_cast<T>(s.step));
  const T bc2_sqrt = std::sqrt(T(1) - std::pow(s.beta2, static_cast<T>(s.step)));
  const T step_size = s.lr / bc1;
  const T one_minus_b1 = T(1) - s.beta1;
  const T one_minus_b2 = T(1) - s.beta2;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i];
    m[i] = s.beta1 * m[i] + one_minus_b1 * g;
    v[i] = s.beta2 * v[i] + one_minus_b2 * (g * g);
    const T denom = std::sqrt(v[i]) / bc2_sqrt + s.eps;
    param[i] -= step_size * (m[i] / denom);
  }
}

template void gemm<float>(Trans, Trans, int, int, int, float, const float*, int, const float*, int, float,
                          float*, int);
template void gemm<double>(Trans, Trans, int, int, int, double, const double*, int, const double*, int,
                           double, double*, int);
template void adam_update<float>(std::span<float>, std::span<const float>, std::span<float>,
                                 std::span<float>, const AdamStep<float>&);
template void adam_update<double>(std::span<double>, std::span<const double>, std::span<double>,
                                  std::span<double>, const AdamStep<double>&);

}  // namespace xrds::kernels::scalar
