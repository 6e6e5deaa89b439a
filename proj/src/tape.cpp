#include "fp/tape.hpp"

#include <algorithm>
#include <cmath>

namespace fp {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void check(bool ok, const char* what) {
  if (!ok) throw ConfigError(what);
}

}  // namespace

int Tape::push(Tensor value, bool needs, std::function<void()> back) {
  Node n;
  n.value = std::move(value);
  n.needs = recording_ && needs;
  if (n.needs) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Tensor& Tape::grad_slot(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.v.empty() && n.value.numel() > 0) n.grad = Tensor(n.value.shape);
  return n.grad;
}

const Tensor& Tape::grad(int id) const {
  return nodes_[static_cast<std::size_t>(id)].grad;
}

void Tape::clear() { nodes_.clear(); }

int Tape::leaf(Tensor value, bool needs_grad) {
  return push(std::move(value), needs_grad, {});
}

int Tape::add(int a, int b) {
  check(v(a).same_shape(v(b)), "add: shape mismatch");
  Tensor out = v(a);
  const Tensor& bv = v(b);
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += bv.v[i];
  const bool needs = needs_grad(a) || needs_grad(b);
  int id = push(std::move(out), needs, {});
  if (nodes_.back().needs)
    nodes_.back().back = [this, a, b, id] {
      const Tensor& go = grad(id);
      if (needs_grad(a)) {
        Tensor& ga = g(a);
        for (std::size_t i = 0; i < go.v.size(); ++i) ga.v[i] += go.v[i];
      }
      if (needs_grad(b)) {
        Tensor& gb = g(b);
        for (std::size_t i = 0; i < go.v.size(); ++i) gb.v[i] += go.v[i];
      }
    };
  return id;
}

int Tape::sub(int a, int b) {
  check(v(a).same_shape(v(b)), "sub: shape mismatch");
  Tensor out = v(a);
  const Tensor& bv = v(b);
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] -= bv.v[i];
  const bool needs = needs_grad(a) || needs_grad(b);
  int id = push(std::move(out), needs, {});
  if (nodes_.back().needs)
    nodes_.back().back = [this, a, b, id] {
      const Tensor& go = grad(id);
      if (needs_grad(a)) {
        Tensor& ga = g(a);
        for (std::size_t i = 0; i < go.v.size(); ++i) ga.v[i] += go.v[i];
      }
      if (needs_grad(b)) {
        Tensor& gb = g(b);
        for (std::size_t i = 0; i < go.v.size(); ++i) gb.v[i] -= go.v[i];
      }
    };
  return id;
}

int Tape::mul(int a, int b) {
  check(v(a).same_shape(v(b)), "mul: shape mismatch");
  Tensor out = v(a);
  const Tensor& bv = v(b);
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] *= bv.v[i];
  const bool needs = needs_grad(a) || needs_grad(b);
  int id = push(std::move(out), needs, {});
  if (nodes_.back().needs)
    nodes_.back().back = [this, a, b, id] {
      const Tensor& go = grad(id);
      const Tensor& av = v(a);
      const Tensor& bv2 = v(b);
      if (needs_grad(a)) {
        Tensor& ga = g(a);
        for (std::size_t i = 0; i < go.v.size(); ++i)
          ga.v[i] += go.v[i] * bv2.v[i];
      }
      if (needs_grad(b)) {
        Tensor& gb = g(b);
        for (std::size_t i = 0; i < go.v.size(); ++i)
          gb.v[i] += go.v[i] * av.v[i];
      }
    };
  return id;
}

int Tape::add_rowvec(int a, int r) {
  const Tensor& av = v(a);
  const Tensor& rv = v(r);
  check(av.rank() == 2 && rv.rank() == 2 && rv.rows() == 1 &&
            rv.cols() == av.cols(),
        "add_rowvec: expected [m,n] and [1,n]");
  Tensor out = av;
  const std::int64_t m = av.rows(), n = av.cols();
  for (std::int64_t i = 0; i < m; ++i) {
    double* orow = out.row_ptr(i);
    for (std::int64_t j = 0; j < n; ++j) orow[j] += rv.v[static_cast<std::size_t>(j)];
  }
  const bool needs = needs_grad(a) || needs_grad(r);
  int id = push(std::move(out), needs, {});
  if (nodes_.back().needs)
    nodes_.back().back = [this, a, r, id, m, n] {
      const Tensor& go = grad(id);
      if (needs_grad(a)) {
        Tensor& ga = g(a);
        for (std::size_t i = 0; i < go.v.size(); ++i) ga.v[i] += go.v[i];
      }
      if (needs_grad(r)) {
        Tensor& gr = g(r);
        for (std::int64_t i = 0; i < m; ++i) {
          const double* grow = go.row_ptr(i);
          for (std::int64_t j = 0; j < n; ++j)
            gr.v[static_cast<std::size_t>(j)] += grow[j];
        }
      }
    };
  return id;
}

int Tape::mul_rowvec(int a, int r) {
  const Tensor& av = v(a);
  const Tensor& rv = v(r);
  check(av.rank() == 2 && rv.rank() == 2 && rv.rows() == 1 &&
            rv.cols() == av.cols(),
        "mul_rowvec: expected [m,n] and [1,n]");
  Tensor out = av;
  const std::int64_t m = av.rows(), n = av.cols();
  for (std::int64_t i = 0; i < m; ++i) {
    double* orow = out.row_ptr(i);
    for (std::int64_t j = 0; j < n; ++j) orow[j] *= rv.v[static_cast<std::size_t>(j)];
  }
  const bool needs = needs_grad(a) || needs_grad(r);
  int id = push(std::move(out), needs, {});
  if (nodes_.back().needs)
    nodes_.back().back = [this, a, r, id, m, n] {
      const Tensor& go = grad(id);
      const Tensor& av2 = v(a);
      const Tensor& rv2 = v(r);
      if (needs_grad(a)) {
        Tensor& ga = g(a);
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t j = 0; j < n; ++j)
            ga.at(i, j) += go.at(i, j) * rv2.v[static_cast<std::size_t>(j)];
      }
      if (needs_grad(r)) {
        Tensor& gr = g(r);
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t j = 0; j < n; ++j)
            gr.v[static_cast<std::size_t>(j)] += go.at(i, j) * av2.at(i, j);
      }
    };
  return id;
}

int Tape::scale(int a, double c) {
  Tensor out = v(a);
  for (double& x : out.v) x *= c;
  int id = push(std::move(out), needs_grad(a), {});
  if (nodes_.back().needs)
    nodes_.back().back = [this, a, id, c] {
      const Tensor& go = grad(id);
      Tensor& ga = g(a);
      for (std::size_t i = 0; i < go.v.size(); ++i) ga.v[i] += c * go.v[i];
    };
  return id;
}

int Tape::relu(int a) {
  Tensor out = v(a);
  for (double& x : out.v) x = x > 0.0 ? x : 0.0;
  int id = push(std::move(out), needs_grad(a), {});
  if (nodes_.back().needs)
    nodes_.back().back = [this, a, id] {
      const Tensor& go = grad(id);
      const Tensor& av = v(a);
      Tensor& ga = g(a);
      for (std::size_t i = 0; i < go.v.size(); ++i)
        if (av.v[i] > 0.0) ga.v[i] += go.v[i];
    };
  return id;
}

int Tape::silu(int a) {
  Tensor out = v(a);
  for (double& x : out.v) x = x / (1.0 + std::exp(-x));
  int id = push(std::move(out), needs_grad(a), {});
  if (nodes_.back().needs)
    nodes_.back().back = [this, a, id] {
      const Tensor& go = grad(id);
      const Tensor& av = v(a);
      Tensor& ga = g(a);
      for (std::size_t i = 0; i < go.v.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-av.v[i]));
        ga.v[i] += go.v[i] * s * (1.0 + av.v[i] * (1.0 - s));
      }
    };
  return id;
}

int Tape::gelu(int a) {
  Tensor out = v(a);
  for (double& x : out.v) x = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  int id = push(std::move(out), needs_grad(a), {});
  if (nodes_.back().needs)
    nodes_.back().back = [this, a, id] {
      const Tensor& go = grad(id);
      const Tensor& av = v(a);
      Tensor& ga = g(a);
      for (std::size_t i = 0; i < go.v.size(); ++i) {
        const double x = av.v[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        ga.v[i] += go.v[i] * (cdf + x * pdf);
      }
    };
  return id;
}

int Tape::matmul(int a, int b) {
  const Tensor& av = v(a);
  const Tensor& bv = v(b);
  check(av.rank() == 2 && bv.rank() == 2 && av.cols() == bv.rows(),
        "matmul: shape mismatch");
  Tensor out({av.rows(), bv.cols()});
  matmul_acc(av, bv, out);
  const bool needs = needs_grad(a) || needs_grad(b);
  int id = push(std::move(out), needs, {});
  if (nodes_.back().needs)
    nodes_.back().back = [this, a, b, id] {
      const Tensor& go = grad(id);
      if (needs_grad(a)) matmul_nt_acc(go, v(b), g(a));  // dA += dC * B^T
      if (needs_grad(b)) matmul_tn_acc(v(a), go, g(b));  // dB += A^T * dC
    };
  return id;
}

int Tape::transpose(int a) {
  const Tensor& av = v(a);
  check(av.rank() == 2, "transpose: expected 2-D");
  Tensor out({av.cols(), av.rows()});
  for (std::int64_t i = 0; i < av.rows(); ++i)
    for (std::int64_t j = 0; j < av.cols(); ++j) out.at(j, i) = av.at(i, j);
  int id = push(std::move(out), needs_grad(a), {});
  if (nodes_.back().needs)
    nodes_.back().back = [this, a, id] {
      const Tensor& go = grad(id);
      Tensor& ga = g(a);
      for (std::int64_t i = 0; i < go.rows(); ++i)
        for (std::int64_t j = 0; j < go.cols(); ++j)
          ga.at(j, i) += go.at(i, j);
    };
  return id;
}

int Tape::softmax_rows(int a) {
  const Tensor& av = v(a);
  check(av.rank() == 2, "softmax_rows: expected 2-D");
  Tensor out = av;
  const std::int64_t m = av.rows(), n = av.cols();
  for (std::int64_t i = 0; i < m; ++i) {
    double* row = out.row_ptr(i);
    double mx = row[0];
    for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      s += row[j];
    }
    for (std::int64_t j = 0; j < n; ++j) row[j] /= s;
  }
  int id = push(std::move(out), needs_grad(a), {});
  if (nodes_.back().needs)
    nodes_.back().back = [this, a, id, m, n] {
      const Tensor& go = grad(id);
      const Tensor& y = v(id);
      Tensor& ga = g(a);
      for (std::int64_t i = 0; i < m; ++i) {
        const double* yr = y.row_ptr(i);
        const double* gr = go.row_ptr(i);
        double dot_gy = 0.0;
        for (std::int64_t j = 0; j < n; ++j) dot_gy += gr[j] * yr[j];
        double* gar = ga.row_ptr(i);
        for (std::int64_t j = 0; j < n; ++j)
          gar[j] += yr[j] * (gr[j] - dot_gy);
      }
    };
  return id;
}

int Tape::layer_norm_rows(int a, double eps) {
  const Tensor& av = v(a);
  check(av.rank() == 2, "layer_norm_rows: expected 2-D");
  const std::int64_t m = av.rows(), n = av.cols();
  Tensor out({m, n});
  std::vector<double> inv_sigma(static_cast<std::size_t>(m));
  for (std::int64_t i = 0; i < m; ++i) {
    const double* row = av.row_ptr(i);
    double mu = 0.0;
    for (std::int64_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      const double d = row[j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);  // population variance
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_sigma[static_cast<std::size_t>(i)] = inv;
    double* orow = out.row_ptr(i);
    for (std::int64_t j = 0; j < n; ++j) orow[j] = (row[j] - mu) * inv;
  }
  int id = push(std::move(out), needs_grad(a), {});
  if (nodes_.back().needs)
    nodes_.back().back = [this, a, id, m, n, inv_sigma = std::move(inv_sigma)] {
      const Tensor& go = grad(id);
      const Tensor& y = v(id);
      Tensor& ga = g(a);
      const double invn = 1.0 / static_cast<double>(n);
      for (std::int64_t i = 0; i < m; ++i) {
        const double* yr = y.row_ptr(i);
        const double* gr = go.row_ptr(i);
        double mean_g = 0.0, mean_gy = 0.0;
        for (std::int64_t j = 0; j < n; ++j) {
          mean_g += gr[j];
          mean_gy += gr[j] * yr[j];
        }
        mean_g *= invn;
        mean_gy *= invn;
        const double inv = inv_sigma[static_cast<std::size_t>(i)];
        double* gar = ga.row_ptr(i);
        for (std::int64_t j = 0; j < n; ++j)
          gar[j] += inv * (gr[j] - mean_g - yr[j] * mean_gy);
      }
    };
  return id;
}

int Tape::max_rows(int a) {
  const Tensor& av = v(a);
  check(av.rank() == 2 && av.rows() >= 1, "max_rows: expected non-empty 2-D");
  const std::int64_t m = av.rows(), n = av.cols();
  Tensor out({1, n});
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(n), 0);
  for (std::int64_t j = 0; j < n; ++j) {
    double best = av.at(0, j);
    std::int64_t arg = 0;
    for (std::int64_t i = 1; i < m; ++i) {
      if (av.at(i, j) > best) {  // strict: ties keep the lowest row
        best = av.at(i, j);
        arg = i;
      }
    }
    out.v[static_cast<std::size_t>(j)] = best;
    argmax[static_cast<std::size_t>(j)] = arg;
  }
  int id = push(std::move(out), needs_grad(a), {});
  if (nodes_.back().needs)
    nodes_.back().back = [this, a, id, n, argmax = std::move(argmax)] {
      const Tensor& go = grad(id);
      Tensor& ga = g(a);
      for (std::int64_t j = 0; j < n; ++j)
        ga.at(argmax[static_cast<std::size_t>(j)], j) +=
            go.v[static_cast<std::size_t>(j)];
    };
  return id;
}

int Tape::mean_rows(int a) {
  const Tensor& av = v(a);
  check(av.rank() == 2 && av.rows() >= 1, "mean_rows: expected non-empty 2-D");
  const std::int64_t m = av.rows(), n = av.cols();
  Tensor out({1, n});
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      out.v[static_cast<std::size_t>(j)] += av.at(i, j);
  for (double& x : out.v) x /= static_cast<double>(m);
  int id = push(std::move(out), needs_grad(a), {});
  if (nodes_.back().needs)
    nodes_.back().back = [this, a, id, m, n] {
      const Tensor& go = grad(id);
      Tensor& ga = g(a);
      const double invm = 1.0 / static_cast<double>(m);
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j)
          ga.at(i, j) += go.v[static_cast<std::size_t>(j)] * invm;
    };
  return id;
}

int Tape::broadcast_row(int r, std::int64_t m) {
  const Tensor& rv = v(r);
  check(rv.rank() == 2 && rv.rows() == 1, "broadcast_row: expected [1,n]");
  const std::int64_t n = rv.cols();
  Tensor out({m, n});
  for (std::int64_t i = 0; i < m; ++i)
    std::copy(rv.v.begin(), rv.v.end(), out.row_ptr(i));
  int id = push(std::move(out), needs_grad(r), {});
  if (nodes_.back().needs)
    nodes_.back().back = [this, r, id, m, n] {
      const Tensor& go = grad(id);
      Tensor& gr = g(r);
      for (std::int64_t i = 0; i < m; ++i) {
        const double* grow = go.row_ptr(i);
        for (std::int64_t j = 0; j < n; ++j)
          gr.v[static_cast<std::size_t>(j)] += grow[j];
      }
    };
  return id;
}

int Tape::concat_cols(int a, int b) {
  const Tensor& av = v(a);
  const Tensor& bv = v(b);
  check(av.rank() == 2 && bv.rank() == 2 && av.rows() == bv.rows(),
        "concat_cols: row mismatch");
  const std::int64_t m = av.rows(), na = av.cols(), nb = bv.cols();
  Tensor out({m, na + nb});
  for (std::int64_t i = 0; i < m; ++i) {
    std::copy(av.row_ptr(i), av.row_ptr(i) + na, out.row_ptr(i));
    std::copy(bv.row_ptr(i), bv.row_ptr(i) + nb, out.row_ptr(i) + na);
  }
  const bool needs = needs_grad(a) || needs_grad(b);
  int id = push(std::move(out), needs, {});
  if (nodes_.back().needs)
    nodes_.back().back = [this, a, b, id, m, na, nb] {
      const Tensor& go = grad(id);
      if (needs_grad(a)) {
        Tensor& ga = g(a);
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t j = 0; j < na; ++j) ga.at(i, j) += go.at(i, j);
      }
      if (needs_grad(b)) {
        Tensor& gb = g(b);
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t j = 0; j < nb; ++j)
            gb.at(i, j) += go.at(i, na + j);
      }
    };
  return id;
}

int Tape::slice_cols(int a, std::int64_t start, std::int64_t len) {
  const Tensor& av = v(a);
  check(av.rank() == 2 && start >= 0 && len >= 1 && start + len <= av.cols(),
        "slice_cols: window out of range");
  const std::int64_t m = av.rows();
  Tensor out({m, len});
  for (std::int64_t i = 0; i < m; ++i)
    std::copy(av.row_ptr(i) + start, av.row_ptr(i) + start + len,
              out.row_ptr(i));
  int id = push(std::move(out), needs_grad(a), {});
  if (nodes_.back().needs)
    nodes_.back().back = [this, a, id, m, start, len] {
      const Tensor& go = grad(id);
      Tensor& ga = g(a);
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < len; ++j)
          ga.at(i, start + j) += go.at(i, j);
    };
  return id;
}

int Tape::select_rows(int a, std::vector<int> idx) {
  const Tensor& av = v(a);
  check(av.rank() == 2, "select_rows: expected 2-D");
  for (int i : idx)
    check(i >= 0 && i < av.rows(), "select_rows: index out of range");
  const std::int64_t n = av.cols();
  Tensor out({static_cast<std::int64_t>(idx.size()), n});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(av.row_ptr(idx[i]), av.row_ptr(idx[i]) + n,
              out.row_ptr(static_cast<std::int64_t>(i)));
  int id = push(std::move(out), needs_grad(a), {});
  if (nodes_.back().needs)
    nodes_.back().back = [this, a, id, n, idx = std::move(idx)] {
      const Tensor& go = grad(id);
      Tensor& ga = g(a);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const double* grow = go.row_ptr(static_cast<std::int64_t>(i));
        double* garow = ga.row_ptr(idx[i]);
        for (std::int64_t j = 0; j < n; ++j) garow[j] += grow[j];
      }
    };
  return id;
}

int Tape::scatter_rows(int a, std::vector<int> idx, std::int64_t total_rows) {
  const Tensor& av = v(a);
  check(av.rank() == 2 &&
            av.rows() == static_cast<std::int64_t>(idx.size()),
        "scatter_rows: index count mismatch");
  for (int i : idx)
    check(i >= 0 && i < total_rows, "scatter_rows: index out of range");
  const std::int64_t n = av.cols();
  Tensor out({total_rows, n});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(av.row_ptr(static_cast<std::int64_t>(i)),
              av.row_ptr(static_cast<std::int64_t>(i)) + n, out.row_ptr(idx[i]));
  int id = push(std::move(out), needs_grad(a), {});
  if (nodes_.back().needs)
    nodes_.back().back = [this, a, id, n, idx = std::move(idx)] {
      const Tensor& go = grad(id);
      Tensor& ga = g(a);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const double* grow = go.row_ptr(idx[i]);
        double* garow = ga.row_ptr(static_cast<std::int64_t>(i));
        for (std::int64_t j = 0; j < n; ++j) garow[j] += grow[j];
      }
    };
  return id;
}

int Tape::sum_all(int a) {
  const Tensor& av = v(a);
  double s = 0.0;
  for (double x : av.v) s += x;
  Tensor out({1, 1});
  out.v[0] = s;
  int id = push(std::move(out), needs_grad(a), {});
  if (nodes_.back().needs)
    nodes_.back().back = [this, a, id] {
      const double go = grad(id).v[0];
      Tensor& ga = g(a);
      for (double& x : ga.v) x += go;
    };
  return id;
}

int Tape::mse(int a, int b) {
  const Tensor& av = v(a);
  const Tensor& bv = v(b);
  check(av.same_shape(bv), "mse: shape mismatch");
  check(av.numel() > 0, "mse: empty tensors");
  double s = 0.0;
  for (std::size_t i = 0; i < av.v.size(); ++i) {
    const double d = av.v[i] - bv.v[i];
    s += d * d;
  }
  Tensor out({1, 1});
  out.v[0] = s / static_cast<double>(av.numel());
  const bool needs = needs_grad(a) || needs_grad(b);
  int id = push(std::move(out), needs, {});
  if (nodes_.back().needs)
    nodes_.back().back = [this, a, b, id] {
      const double go = grad(id).v[0];
      const Tensor& av2 = v(a);
      const Tensor& bv2 = v(b);
      const double c = 2.0 * go / static_cast<double>(av2.numel());
      if (needs_grad(a)) {
        Tensor& ga = g(a);
        for (std::size_t i = 0; i < av2.v.size(); ++i)
          ga.v[i] += c * (av2.v[i] - bv2.v[i]);
      }
      if (needs_grad(b)) {
        Tensor& gb = g(b);
        for (std::size_t i = 0; i < av2.v.size(); ++i)
          gb.v[i] -= c * (av2.v[i] - bv2.v[i]);
      }
    };
  return id;
}

void Tape::backward(int root) {
  check(recording_, "backward: tape is not recording");
  check(v(root).numel() == 1, "backward: root must be scalar");
  grad_slot(root).v[0] = 1.0;
  for (int i = root; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.needs && n.back && !n.grad.v.empty()) n.back();
  }
}

}  // namespace fp
