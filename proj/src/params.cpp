#include "fp/params.hpp"

#include <cmath>

#include "fp/errors.hpp"

namespace fp {

int ParameterSet::add(const std::string& name, Tensor init) {
  if (index_.count(name)) throw ConfigError("duplicate parameter: " + name);
  Entry e;
  e.name = name;
  e.grad = Tensor(init.shape);
  e.m = Tensor(init.shape);
  e.mv = Tensor(init.shape);
  e.value = std::move(init);
  entries_.push_back(std::move(e));
  const int id = static_cast<int>(entries_.size()) - 1;
  index_[name] = id;
  return id;
}

int ParameterSet::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

void ParameterSet::zero_grad() {
  for (auto& e : entries_) e.grad.fill(0.0);
}

void ParameterSet::init_ema() {
  ema_.clear();
  ema_.reserve(entries_.size());
  for (const auto& e : entries_) ema_.push_back(e.value);
}

void ParameterSet::ema_update(double decay) {
  if (ema_.empty()) throw ConfigError("ema_update: shadow not initialised");
  for (std::size_t p = 0; p < entries_.size(); ++p) {
    auto& s = ema_[p].v;
    const auto& w = entries_[p].value.v;
    for (std::size_t i = 0; i < s.size(); ++i)
      s[i] = decay * s[i] + (1.0 - decay) * w[i];
  }
}

ParameterSet ParameterSet::with_ema_values() const {
  ParameterSet out = *this;
  if (!ema_.empty())
    for (std::size_t p = 0; p < out.entries_.size(); ++p)
      out.entries_[p].value = ema_[p];
  return out;
}

double global_grad_norm(const ParameterSet& ps) {
  double s = 0.0;
  for (const auto& e : ps.entries())
    for (double x : e.grad.v) s += x * x;
  return std::sqrt(s);
}

bool adam_step(ParameterSet& ps, const AdamConfig& cfg) {
  for (const auto& e : ps.entries())
    if (!e.grad.finite()) return false;

  double scale = 1.0;
  if (cfg.clip_norm > 0.0) {
    const double norm = global_grad_norm(ps);
    if (norm > cfg.clip_norm) scale = cfg.clip_norm / norm;
  }

  ps.set_step(ps.step() + 1);
  const auto t = static_cast<double>(ps.step());
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);

  for (auto& e : ps.entries()) {
    auto& w = e.value.v;
    auto& m = e.m.v;
    auto& mv = e.mv.v;
    const auto& grad = e.grad.v;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = grad[i] * scale;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      mv[i] = cfg.beta2 * mv[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = mv[i] / bc2;
      w[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) +
                        cfg.weight_decay * w[i]);
    }
  }
  return true;
}

Tensor he_init(std::vector<std::int64_t> shape, std::int64_t fan_in, Rng& rng) {
  if (fan_in <= 0) throw ConfigError("he_init: fan_in must be positive");
  const double sigma = std::sqrt(2.0 / static_cast<double>(fan_in));
  return Tensor::randn(std::move(shape), rng, sigma);
}

int ParamNodes::operator()(const std::string& name) {
  const int p = ps_.index_of(name);
  int& node = node_of_[static_cast<std::size_t>(p)];
  if (node < 0)
    node = tape_.leaf(ps_.entries()[static_cast<std::size_t>(p)].value,
                      tape_.recording());
  return node;
}

void ParamNodes::accumulate_grads() {
  for (std::size_t p = 0; p < node_of_.size(); ++p) {
    const int node = node_of_[p];
    if (node < 0) continue;
    const Tensor& gt = tape_.grad(node);
    if (gt.v.empty()) continue;
    auto& acc = ps_.entries()[p].grad.v;
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += gt.v[i];
  }
}

}  // namespace fp
