#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

// Data-parallel kernels. Every kernel has one algorithm with a serial and an
// OpenMP execution path; the math (including reduction order, which uses
// fixed 4096-element blocks combined in block order) is identical in both, so
// outputs are bitwise equal regardless of thread count. set_parallel(false)
// forces the serial reference path.
namespace gradgen::kern {

inline bool& parallel_flag() {
  static bool enabled = true;
  return enabled;
}
inline void set_parallel(bool on) { parallel_flag() = on; }
inline bool parallel_enabled() {
#ifdef _OPENMP
  return parallel_flag() && !omp_in_parallel();
#else
  return false;
#endif
}

constexpr int64_t kGrain = 2048;

template <class F>
inline void parallel_for(int64_t n, F&& f) {
#ifdef _OPENMP
  if (parallel_enabled() && n >= kGrain) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) f(i);
    return;
  }
#endif
  for (int64_t i = 0; i < n; ++i) f(i);
}

inline double block_partial(const double* x, int64_t n) {
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += x[i];
  return s;
}

constexpr int64_t kSumBlock = 4096;

inline double sum(const double* x, int64_t n) {
  if (n <= kSumBlock) return block_partial(x, n);
  const int64_t nb = (n + kSumBlock - 1) / kSumBlock;
  std::vector<double> part(static_cast<size_t>(nb), 0.0);
  parallel_for(nb, [&](int64_t b) {
    const int64_t lo = b * kSumBlock;
    part[size_t(b)] = block_partial(x + lo, std::min(kSumBlock, n - lo));
  });
  double s = 0.0;
  for (int64_t b = 0; b < nb; ++b) s += part[size_t(b)];
  return s;
}

// C (m,n) = A (m,k) @ B (k,n). Four-row blocks amortize B loads; each output
// element still accumulates in ascending-k order, so results do not depend on
// the blocking or the thread count.
inline void matmul(int64_t m, int64_t k, int64_t n, const double* __restrict__ A,
                   const double* __restrict__ B, double* __restrict__ C) {
  const int64_t mb = m / 4;
  parallel_for(mb + (m % 4 ? 1 : 0), [&](int64_t blk) {
    const int64_t i0 = blk * 4;
    const int64_t rows = std::min<int64_t>(4, m - i0);
    if (rows == 4) {
      double* c0 = C + i0 * n;
      double* c1 = c0 + n;
      double* c2 = c1 + n;
      double* c3 = c2 + n;
      std::fill(c0, c0 + 4 * n, 0.0);
      const double* a = A + i0 * k;
      for (int64_t kk = 0; kk < k; ++kk) {
        const double a0 = a[kk], a1 = a[k + kk], a2 = a[2 * k + kk], a3 = a[3 * k + kk];
        const double* b = B + kk * n;
        for (int64_t j = 0; j < n; ++j) {
          const double bv = b[j];
          c0[j] += a0 * bv;
          c1[j] += a1 * bv;
          c2[j] += a2 * bv;
          c3[j] += a3 * bv;
        }
      }
    } else {
      for (int64_t i = i0; i < i0 + rows; ++i) {
        double* c = C + i * n;
        std::fill(c, c + n, 0.0);
        const double* a = A + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
          const double av = a[kk];
          const double* b = B + kk * n;
          for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
      }
    }
  });
}

// C (m,n) = A (m,k) @ B^T where B is (n,k); dot products, four at a time.
inline void matmul_nt(int64_t m, int64_t k, int64_t n, const double* __restrict__ A,
                      const double* __restrict__ B, double* __restrict__ C) {
  parallel_for(m, [&](int64_t i) {
    const double* a = A + i * k;
    double* c = C + i * n;
    int64_t j = 0;
    for (; j + 4 <= n; j += 4) {
      const double* b0 = B + j * k;
      const double* b1 = b0 + k;
      const double* b2 = b1 + k;
      const double* b3 = b2 + k;
      double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
      for (int64_t kk = 0; kk < k; ++kk) {
        const double av = a[kk];
        s0 += av * b0[kk];
        s1 += av * b1[kk];
        s2 += av * b2[kk];
        s3 += av * b3[kk];
      }
      c[j] = s0;
      c[j + 1] = s1;
      c[j + 2] = s2;
      c[j + 3] = s3;
    }
    for (; j < n; ++j) {
      const double* b = B + j * k;
      double s = 0.0;
      for (int64_t kk = 0; kk < k; ++kk) s += a[kk] * b[kk];
      c[j] = s;
    }
  });
}

// Given A (k,m) and B (k,n), accumulate C (m,n) += A^T @ B.
inline void matmul_tn_acc(int64_t k, int64_t m, int64_t n, const double* __restrict__ A,
                          const double* __restrict__ B, double* __restrict__ C) {
  const int64_t mb = m / 4;
  parallel_for(mb + (m % 4 ? 1 : 0), [&](int64_t blk) {
    const int64_t i0 = blk * 4;
    const int64_t rows = std::min<int64_t>(4, m - i0);
    if (rows == 4) {
      double* c0 = C + i0 * n;
      double* c1 = c0 + n;
      double* c2 = c1 + n;
      double* c3 = c2 + n;
      for (int64_t kk = 0; kk < k; ++kk) {
        const double* arow = A + kk * m + i0;
        const double a0 = arow[0], a1 = arow[1], a2 = arow[2], a3 = arow[3];
        const double* b = B + kk * n;
        for (int64_t j = 0; j < n; ++j) {
          const double bv = b[j];
          c0[j] += a0 * bv;
          c1[j] += a1 * bv;
          c2[j] += a2 * bv;
          c3[j] += a3 * bv;
        }
      }
    } else {
      for (int64_t i = i0; i < i0 + rows; ++i) {
        double* c = C + i * n;
        for (int64_t kk = 0; kk < k; ++kk) {
          const double av = A[kk * m + i];
          const double* b = B + kk * n;
          for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
      }
    }
  });
}

}  // namespace gradgen::kern
