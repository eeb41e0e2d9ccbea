#pragma once

// Dense arithmetic kernels used by every layer: a row-major GEMM and the
// Adam parameter update. Each kernel has a portable scalar reference and an
// AVX2/FMA variant; the variant is chosen once at runtime and can be pinned
// (tests, reproducibility) with set_backend() or XRDS_KERNELS=scalar|avx2.

#include <cstddef>
#include <span>
#include <string_view>

namespace xrds::kernels {

enum class Backend { scalar, avx2 };

enum class Trans { no, yes };

/// True when the backend was compiled in and the CPU can run it.
bool backend_supported(Backend backend);

/// The execution plan every dispatched kernel uses. Fixed after the first
/// call unless changed through set_backend().
Backend active_backend();

/// Pins the execution plan. Throws std::invalid_argument if unsupported.
void set_backend(Backend backend);

std::string_view backend_name(Backend backend);

/// Restores the previous backend on scope exit.
class ScopedBackend {
 public:
  explicit ScopedBackend(Backend backend) : previous_(active_backend()) { set_backend(backend); }
  ~ScopedBackend() { set_backend(previous_); }
  ScopedBackend(const ScopedBackend&) = delete;
  ScopedBackend& operator=(const ScopedBackend&) = delete;

 private:
  Backend previous_;
};

template <typename T>
struct AdamStep {
  T lr;
  T beta1;
  T beta2;
  T eps;
  long step;  // 1-based
};

// C = alpha * op(A) * op(B) + beta * C, all row-major.
// op(A) is m x k, op(B) is k x n. beta == 0 overwrites C (NaNs in C ignored).
template <typename T>
void gemm(Trans ta, Trans tb, int m, int n, int k, T alpha, const T* a, int lda, const T* b, int ldb,
          T beta, T* c, int ldc);

template <typename T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                 const AdamStep<T>& step);

namespace scalar {
template <typename T>
void gemm(Trans ta, Trans tb, int m, int n, int k, T alpha, const T* a, int lda, const T* b, int ldb,
          T beta, T* c, int ldc);
template <typename T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                 const AdamStep<T>& step);
}  // namespace scalar

#if defined(XRDS_WITH_AVX2)
namespace avx2 {
template <typename T>
void gemm(Trans ta, Trans tb, int m, int n, int k, T alpha, const T* a, int lda, const T* b, int ldb,
          T beta, T* c, int ldc);
template <typename T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                 const AdamStep<T>& step);
}  // namespace avx2
#endif

}  // namespace xrds::kernels
