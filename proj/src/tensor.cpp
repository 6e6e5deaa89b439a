#include "fp/tensor.hpp"

namespace fp {

namespace {

void check_dims(std::int64_t am, std::int64_t ak, std::int64_t bk,
                std::int64_t bn, std::int64_t cm, std::int64_t cn) {
  if (ak != bk || am != cm || bn != cn)
    throw ConfigError("matmul shape mismatch");
}

}  // namespace

void matmul_acc(const Tensor& a, const Tensor& b, Tensor& c) {
  const std::int64_t m = a.rows(), k = a.cols(), n = b.cols();
  check_dims(m, k, b.rows(), n, c.rows(), c.cols());
  const double* __restrict__ ap = a.v.data();
  const double* __restrict__ bp = b.v.data();
  double* __restrict__ cp = c.v.data();
  // i-k-j loop order keeps the inner loop contiguous in b and c.
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = ap + i * k;
    double* crow = cp + i * n;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      if (av == 0.0) continue;
      const double* brow = bp + kk * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_tn_acc(const Tensor& a, const Tensor& b, Tensor& c) {
  // c[m,n] += sum_k a[k,m] * b[k,n]
  const std::int64_t k = a.rows(), m = a.cols(), n = b.cols();
  check_dims(m, k, b.rows(), n, c.rows(), c.cols());
  const double* __restrict__ ap = a.v.data();
  const double* __restrict__ bp = b.v.data();
  double* __restrict__ cp = c.v.data();
  for (std::int64_t kk = 0; kk < k; ++kk) {
    const double* arow = ap + kk * m;
    const double* brow = bp + kk * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = cp + i * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_nt_acc(const Tensor& a, const Tensor& b, Tensor& c) {
  // c[m,n] += sum_k a[m,k] * b[n,k]
  const std::int64_t m = a.rows(), k = a.cols(), n = b.rows();
  check_dims(m, k, b.cols(), n, c.rows(), c.cols());
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a.row_ptr(i);
    double* crow = c.row_ptr(i);
    for (std::int64_t j = 0; j < n; ++j)
      crow[j] += dot(arow, b.row_ptr(j), k);
  }
}

}  // namespace fp
