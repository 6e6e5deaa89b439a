#pragma once

#include <functional>
#include <vector>

#include "fp/tensor.hpp"

namespace fp {

// Reverse-mode tape over 2-D tensors. Ops append nodes in topological
// order; backward() walks the list once in reverse. With recording off the
// same op set runs value-only, which is the inference path.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }

  int leaf(Tensor value, bool needs_grad = false);
  int constant(Tensor value) { return leaf(std::move(value), false); }

  // --- elementwise / broadcast ---
  int add(int a, int b);
  int sub(int a, int b);
  int mul(int a, int b);
  int add_rowvec(int a, int r);  // a:[m,n] + r:[1,n]
  int mul_rowvec(int a, int r);  // a:[m,n] * r:[1,n]
  int scale(int a, double c);
  int relu(int a);
  int silu(int a);
  int gelu(int a);

  // --- matrix ---
  int matmul(int a, int b);
  int transpose(int a);

  // --- row/column structure ---
  int softmax_rows(int a);
  int layer_norm_rows(int a, double eps = 1e-5);
  int max_rows(int a);    // [m,n] -> [1,n]
  int mean_rows(int a);   // [m,n] -> [1,n]
  int broadcast_row(int r, std::int64_t m);  // [1,n] -> [m,n]
  int concat_cols(int a, int b);
  int slice_cols(int a, std::int64_t start, std::int64_t len);
  int select_rows(int a, std::vector<int> idx);
  int scatter_rows(int a, std::vector<int> idx, std::int64_t total_rows);

  // --- reductions ---
  int sum_all(int a);          // -> [1,1]
  int mse(int a, int b);       // mean squared difference -> [1,1]

  // Seeds d(root)/d(root) = 1 and accumulates into every needs-grad node.
  // root must hold exactly one element.
  void backward(int root);

  const Tensor& val(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Tensor& grad(int id) const;
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs; }
  std::size_t size() const { return nodes_.size(); }
  void clear();

 private:
  struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily during backward
    bool needs = false;
    std::function<void()> back;  // empty for leaves / no-grad nodes
  };

  int push(Tensor value, bool needs, std::function<void()> back);
  Tensor& grad_slot(int id);
  // Shorthand used inside backward closures.
  Tensor& g(int id) { return grad_slot(id); }
  const Tensor& v(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  std::vector<Node> nodes_;
  bool recording_ = true;
};

}  // namespace fp
