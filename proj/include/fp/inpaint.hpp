#pragma once

#include <string>
#include <vector>

#include "fp/generative.hpp"
#include "fp/metrics.hpp"
#include "fp/tokeniser.hpp"

#include "json.hpp"

namespace fp {

enum class Strategy {
  Mae,
  MaeIterative,
  FmEuler,
  FmEulerZero,
  FmPhysics,
  FmSoft,
  FmIterative,
  FmInitMae,
  BaselineMean,
  BaselineInterp,
};

std::string strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& name);
const std::vector<Strategy>& all_strategies();
bool strategy_needs_fm(Strategy s);
bool strategy_needs_mae(Strategy s);

struct InpaintOptions {
  Strategy strategy = Strategy::Mae;
  int fm_steps = 20;
  int iterative_steps = 5;
  int penalty_steps = 5;
  double penalty_lr = 1.0;  // fraction of the exact line-search step
  int penalty_every = 1;    // project every n-th integration step
  int penalty_knn = 10;
  double t_start = 0.7;     // fm_init_mae switchover time
  bool hard_pin = false;    // pin known tokens to their values, not the path
  bool zero_noise = false;  // replace every noise draw with zeros
  std::uint64_t seed = 0;
};

// A completion problem: token field with valid rows on the known set, plus
// the world-space geometry and the observed (known-region) velocities.
struct InpaintTask {
  TokenField field;
  std::vector<int> known;
  std::vector<int> unknown;
  std::vector<Vec3> positions;
  std::vector<double> wall;
  std::vector<Vec3> known_velocities;      // read where point_in_mask == 0
  std::vector<std::uint8_t> point_in_mask; // 1 = to be reconstructed
  InpaintOptions opts;

  void validate() const;
};

struct InpaintResult {
  TokenField completed;           // known rows equal the input bit for bit
  std::vector<Vec3> velocities;   // decoded full-resolution field
  nlohmann::json diagnostics;
};

struct InpaintBundles {
  const Tokeniser* tokeniser = nullptr;
  const FlowModel* fm = nullptr;   // EMA weights already materialised
  const MaeModel* mae = nullptr;
};

InpaintResult inpaint(const InpaintTask& task, const InpaintBundles& bundles);

// Gradient descent on the mean squared local divergence, the world-space
// side constraint of the physics-guided integration. Each step takes the
// exact line-search minimiser along the gradient, scaled by lr, so the
// penalty is non-increasing for lr in (0, 2).
struct PenaltyDescentResult {
  std::vector<Vec3> velocities;
  double penalty_before = 0.0;
  double penalty_after = 0.0;
  std::vector<double> trace;  // penalty after each step
};

PenaltyDescentResult divergence_penalty_descent(const JacobianStencil& stencil,
                                                std::vector<Vec3> velocities,
                                                int steps, double lr);

// Unknown centres grouped into up-to-`steps` near-equal shells by distance
// to the nearest known centre (ascending; ties by index). Sizes differ by
// at most one; earlier shells take the remainder.
std::vector<std::vector<int>> partition_shells(const TokenField& field,
                                               const std::vector<int>& known,
                                               const std::vector<int>& unknown,
                                               int steps);

// Mask construction for benchmark sweeps: the known set is the (1-fraction)
// share of centres closest to the inlet/outlet anchors, so heavy masks keep
// only the port regions fixed.
struct MaskSpec {
  std::vector<int> known;
  std::vector<int> unknown;
  std::vector<std::uint8_t> point_in_mask;  // nearest-centre region per point
  std::uint64_t hash = 0;
};

MaskSpec build_sweep_mask(const TokenField& field,
                          const std::vector<Vec3>& positions, double fraction,
                          const Vec3& inlet, const Vec3& outlet);

// Edit-pair mask: unknown tokens are those whose ball touches an edited
// point; the point mask is the edit region itself.
MaskSpec build_edit_mask(const TokenField& field,
                         const std::vector<Vec3>& positions,
                         const std::vector<std::uint8_t>& edit_region,
                         int neighbours);

}  // namespace fp
