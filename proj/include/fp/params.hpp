#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fp/tape.hpp"
#include "fp/tensor.hpp"

namespace fp {

// Named learnable tensors with gradient slots, Adam moments and an optional
// EMA shadow. Iteration order is insertion order so updates and checkpoints
// are deterministic.
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor m;   // first moment
    Tensor mv;  // second moment
  };

  int add(const std::string& name, Tensor init);
  bool has(const std::string& name) const { return index_.count(name) != 0; }
  int index_of(const std::string& name) const;

  Tensor& value(const std::string& name) { return entries_[static_cast<std::size_t>(index_of(name))].value; }
  const Tensor& value(const std::string& name) const { return entries_[static_cast<std::size_t>(index_of(name))].value; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  void zero_grad();
  std::int64_t step() const { return step_; }
  void set_step(std::int64_t s) { step_ = s; }

  // --- EMA shadow ---
  bool has_ema() const { return !ema_.empty(); }
  void init_ema();  // shadow <- current values
  void drop_ema() { ema_.clear(); }
  const std::vector<Tensor>& ema() const { return ema_; }
  std::vector<Tensor>& ema_mutable() { return ema_; }
  // shadow <- decay * shadow + (1 - decay) * value
  void ema_update(double decay);
  // Copy of this set with values replaced by the EMA shadow (when present).
  ParameterSet with_ema_values() const;

 private:
  std::vector<Entry> entries_;
  std::map<std::string, int> index_;
  std::vector<Tensor> ema_;
  std::int64_t step_ = 0;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
  double clip_norm = 0.0;     // 0 disables global-norm clipping
};

double global_grad_norm(const ParameterSet& ps);

// One optimiser step. Clips by global norm first, then applies bias-corrected
// moments and decoupled weight decay. Returns false (and applies nothing)
// when any gradient is non-finite.
bool adam_step(ParameterSet& ps, const AdamConfig& cfg);

// He-normal init: zero mean, variance 2/fan_in.
Tensor he_init(std::vector<std::int64_t> shape, std::int64_t fan_in, Rng& rng);

// Binds parameters to tape leaves on demand; one instance per forward pass.
class ParamNodes {
 public:
  ParamNodes(Tape& tape, ParameterSet& ps)
      : tape_(tape), ps_(ps), node_of_(ps.size(), -1) {}

  // Tape node for the named parameter, created on first use.
  int operator()(const std::string& name);

  // After backward: ps.grad += tape gradients of every bound parameter.
  void accumulate_grads();

  // Forget all bindings; call after Tape::clear().
  void reset() { std::fill(node_of_.begin(), node_of_.end(), -1); }

 private:
  Tape& tape_;
  ParameterSet& ps_;
  std::vector<int> node_of_;
};

}  // namespace fp
