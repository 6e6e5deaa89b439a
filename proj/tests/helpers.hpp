#pragma once

#include <functional>
#include <vector>

#include "fp/params.hpp"
#include "fp/tape.hpp"

namespace fp::test {

// Central finite-difference gradient oracle. Builds the scalar graph from
// leaf tensors, compares analytic gradients against (f(x+h)-f(x-h))/2h and
// returns the worst relative error over every input element.
using GraphFn = std::function<int(Tape&, const std::vector<int>&)>;

inline double gradcheck_inputs(std::vector<Tensor> inputs, const GraphFn& fn,
                               double h = 1e-5) {
  const auto eval = [&](const std::vector<Tensor>& xs) {
    Tape t(/*recording=*/false);
    std::vector<int> ids;
    ids.reserve(xs.size());
    for (const auto& x : xs) ids.push_back(t.leaf(x, false));
    return t.val(fn(t, ids)).v[0];
  };

  Tape t(/*recording=*/true);
  std::vector<int> ids;
  for (const auto& x : inputs) ids.push_back(t.leaf(x, true));
  const int root = fn(t, ids);
  t.backward(root);

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor& analytic = t.grad(ids[i]);
    for (std::size_t e = 0; e < inputs[i].v.size(); ++e) {
      auto probe = inputs;
      probe[i].v[e] += h;
      const double up = eval(probe);
      probe[i].v[e] -= 2.0 * h;
      const double down = eval(probe);
      const double fd = (up - down) / (2.0 * h);
      const double a = analytic.v.empty() ? 0.0 : analytic.v[e];
      const double denom = std::max({1.0, std::abs(a), std::abs(fd)});
      worst = std::max(worst, std::abs(a - fd) / denom);
    }
  }
  return worst;
}

// Same oracle against a ParameterSet-based forward (the way models bind
// weights). Checks every parameter element.
inline double gradcheck_params(ParameterSet& ps,
                               const std::function<int(Tape&, ParamNodes&)>& fn,
                               double h = 1e-5) {
  const auto eval = [&] {
    Tape t(/*recording=*/false);
    ParamNodes pn(t, ps);
    return t.val(fn(t, pn)).v[0];
  };

  ps.zero_grad();
  {
    Tape t(/*recording=*/true);
    ParamNodes pn(t, ps);
    const int root = fn(t, pn);
    t.backward(root);
    pn.accumulate_grads();
  }

  double worst = 0.0;
  for (auto& entry : ps.entries()) {
    for (std::size_t e = 0; e < entry.value.v.size(); ++e) {
      const double saved = entry.value.v[e];
      entry.value.v[e] = saved + h;
      const double up = eval();
      entry.value.v[e] = saved - h;
      const double down = eval();
      entry.value.v[e] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double a = entry.grad.v[e];
      const double denom = std::max({1.0, std::abs(a), std::abs(fd)});
      worst = std::max(worst, std::abs(a - fd) / denom);
    }
  }
  return worst;
}

}  // namespace fp::test
