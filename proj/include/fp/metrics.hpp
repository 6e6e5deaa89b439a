#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "fp/pointcloud.hpp"
#include "fp/rng.hpp"

namespace fp {

// Fixed query/neighbour structure for Jacobian estimation. Building it once
// and applying it to several velocity fields keeps predicted and reference
// derivatives on identical stencils.
struct JacobianStencil {
  std::vector<int> queries;                    // query point indices
  std::vector<std::vector<int>> neighbours;    // k neighbours per query (self excluded)
  std::vector<std::vector<double>> lsq_rows;   // 3 x k pseudo-inverse per query, row-major
  std::vector<std::uint8_t> degenerate;        // rank-deficient neighbourhood flag
  int k = 0;
};

JacobianStencil build_jacobian_stencil(const std::vector<Vec3>& positions,
                                       int k, std::int64_t max_queries,
                                       Rng& rng);

// Per-query 3x3 Jacobians; J[r][c] = d v_c / d x_r, least squares on
// v(x_j) - v(x_i) ~ J^T (x_j - x_i).
struct JacobianField {
  const JacobianStencil* stencil = nullptr;
  std::vector<Mat3> jacobians;
};

JacobianField jacobians_on_stencil(const JacobianStencil& stencil,
                                   const std::vector<Vec3>& velocities);

// Convenience: stencil + Jacobians in one call (k=10, 50k query cap).
JacobianField estimate_jacobians(const std::vector<Vec3>& positions,
                                 const std::vector<Vec3>& velocities,
                                 JacobianStencil& stencil_out, int k = 10,
                                 std::int64_t max_queries = 50000,
                                 std::uint64_t seed = 0);

// Region selector: empty means all points.
using RegionMask = std::vector<std::uint8_t>;

struct NmseParts {
  double num = 0.0;  // sum ||pred - ref||^2 over the region
  double den = 0.0;  // sum ||ref||^2 over the region
  double value() const;
};

NmseParts nmse_parts(const std::vector<Vec3>& pred, const std::vector<Vec3>& ref,
                     const RegionMask& region = {});
double nmse(const std::vector<Vec3>& pred, const std::vector<Vec3>& ref,
            const RegionMask& region = {});

// Mean per-point cosine over the region after dropping the lowest
// `exclude_fraction` of points by reference speed. Zero-magnitude pairs
// contribute 0.
double cosine_similarity(const std::vector<Vec3>& pred,
                         const std::vector<Vec3>& ref,
                         const RegionMask& region = {},
                         double exclude_fraction = 0.10);

// mean |tr J| / (mean ||J||_F + eps) over non-degenerate queries, optionally
// restricted to queries whose point lies in the region.
double divergence_score(const JacobianField& jac, const RegionMask& region = {},
                        double eps = 1e-12);

Vec3 vorticity_from_jacobian(const Mat3& j);

// RMSE of the vorticity difference normalised by the mean reference
// vorticity magnitude. Both fields must share one stencil.
double vorticity_score(const JacobianField& jac_pred,
                       const JacobianField& jac_ref,
                       const RegionMask& region = {}, double eps = 1e-12);

struct MetricReport {
  double nmse = 0.0;
  double cos_sim = 0.0;
  double divergence = 0.0;
  double vorticity = 0.0;
};

}  // namespace fp
