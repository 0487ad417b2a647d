#include "seqimpute/kernels.hpp"

#include <algorithm>
#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace seqimpute::kernels {

namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = 1u << 16;
constexpr std::size_t kParallelElems = 1u << 14;

struct Dims {
  std::size_t m, k, n;
};

Dims check_dims(const Tensor& a, Trans ta, const Tensor& b, Trans tb, const Tensor& c) {
  std::size_t m = ta == Trans::no ? a.rows() : a.cols();
  std::size_t ka = ta == Trans::no ? a.cols() : a.rows();
  std::size_t kb = tb == Trans::no ? b.rows() : b.cols();
  std::size_t n = tb == Trans::no ? b.cols() : b.rows();
  if (ka != kb) {
    throw ShapeError("matmul shape mismatch: " + a.shape_str() + (ta == Trans::yes ? "^T" : "") + " x " +
                     b.shape_str() + (tb == Trans::yes ? "^T" : ""));
  }
  if (c.rows() != m || c.cols() != n) {
    throw ShapeError("matmul output " + c.shape_str() + " does not match " + shape_str(m, n));
  }
  return {m, ka, n};
}

// c[i, :] (+)= sum_k a[i, k] * b[k, :] with a, b, c row-major and k ascending.
// Rows are processed four at a time so each row of b is loaded once per block.
void gemm_nn_rows(const double* a, std::size_t lda, const double* b, std::size_t n, std::size_t kdim,
                  double* c, std::size_t i0, std::size_t i1) {
  std::size_t i = i0;
  for (; i + 4 <= i1; i += 4) {
    double* c0 = c + i * n;
    double* c1 = c0 + n;
    double* c2 = c1 + n;
    double* c3 = c2 + n;
    const double* a0 = a + i * lda;
    const double* a1 = a0 + lda;
    const double* a2 = a1 + lda;
    const double* a3 = a2 + lda;
    for (std::size_t k = 0; k < kdim; ++k) {
      const double x0 = a0[k], x1 = a1[k], x2 = a2[k], x3 = a3[k];
      if (x0 == 0.0 && x1 == 0.0 && x2 == 0.0 && x3 == 0.0) continue;
      const double* bk = b + k * n;
#pragma omp simd
      for (std::size_t j = 0; j < n; ++j) {
        const double bv = bk[j];
        c0[j] += x0 * bv;
        c1[j] += x1 * bv;
        c2[j] += x2 * bv;
        c3[j] += x3 * bv;
      }
    }
  }
  for (; i < i1; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * lda;
    for (std::size_t k = 0; k < kdim; ++k) {
      const double x = ai[k];
      if (x == 0.0) continue;
      const double* bk = b + k * n;
#pragma omp simd
      for (std::size_t j = 0; j < n; ++j) ci[j] += x * bk[j];
    }
  }
}

}  // namespace

void gemm(const Tensor& a, Trans ta, const Tensor& b, Trans tb, Tensor& c, bool accumulate) {
  const Dims d = check_dims(a, ta, b, tb, c);
  if (!accumulate) c.fill(0.0);
  if (d.m == 0 || d.n == 0 || d.k == 0) return;

  // Transposed operands are materialized so the inner loop always streams
  // contiguous rows; the summation order stays k-ascending per element.
  Tensor at_store, bt_store;
  const Tensor* ap = &a;
  const Tensor* bp = &b;
  if (ta == Trans::yes) {
    at_store = transpose(a);
    ap = &at_store;
  }
  if (tb == Trans::yes) {
    bt_store = transpose(b);
    bp = &bt_store;
  }
  const double* A = ap->data();
  const double* B = bp->data();
  double* C = c.data();
  const std::size_t work = d.m * d.n * d.k;
  const std::size_t blocks = (d.m + 3) / 4;

#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (std::size_t blk = 0; blk < blocks; ++blk) {
    const std::size_t i0 = blk * 4;
    const std::size_t i1 = std::min(d.m, i0 + 4);
    gemm_nn_rows(A, d.k, B, d.n, d.k, C, i0, i1);
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  Tensor c(a.rows(), b.cols());
  gemm(a, Trans::no, b, Trans::no, c);
  return c;
}

Tensor transpose(const Tensor& a) {
  Tensor t(a.cols(), a.rows());
  constexpr std::size_t tile = 32;
  for (std::size_t r0 = 0; r0 < a.rows(); r0 += tile) {
    for (std::size_t c0 = 0; c0 < a.cols(); c0 += tile) {
      const std::size_t r1 = std::min(a.rows(), r0 + tile);
      const std::size_t c1 = std::min(a.cols(), c0 + tile);
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t cc = c0; cc < c1; ++cc) t(cc, r) = a(r, cc);
    }
  }
  return t;
}

double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double log_sigmoid(double x) { return -softplus(-x); }

void sigmoid(const double* x, double* y, std::size_t n) {
#pragma omp parallel for schedule(static) if (n > kParallelElems)
  for (std::size_t i = 0; i < n; ++i) y[i] = sigmoid(x[i]);
}

void tanh(const double* x, double* y, std::size_t n) {
#pragma omp parallel for schedule(static) if (n > kParallelElems)
  for (std::size_t i = 0; i < n; ++i) y[i] = std::tanh(x[i]);
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace reference {

void gemm(const Tensor& a, Trans ta, const Tensor& b, Trans tb, Tensor& c, bool accumulate) {
  const Dims d = check_dims(a, ta, b, tb, c);
  for (std::size_t i = 0; i < d.m; ++i) {
    for (std::size_t j = 0; j < d.n; ++j) {
      double s = accumulate ? c(i, j) : 0.0;
      for (std::size_t k = 0; k < d.k; ++k) {
        const double av = ta == Trans::no ? a(i, k) : a(k, i);
        const double bv = tb == Trans::no ? b(k, j) : b(j, k);
        s += av * bv;
      }
      c(i, j) = s;
    }
  }
}

void sigmoid(const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = kernels::sigmoid(x[i]);
}

void tanh(const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = std::tanh(x[i]);
}

}  // namespace reference

}  // namespace seqimpute::kernels
