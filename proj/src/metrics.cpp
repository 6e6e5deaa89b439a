#include "fp/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fp {

namespace {

constexpr double kTikhonov = 1e-12;
constexpr double kDegenerateRatio = 1e-8;

bool in_region(const RegionMask& region, int point) {
  return region.empty() || region[static_cast<std::size_t>(point)] != 0;
}

}  // namespace

JacobianStencil build_jacobian_stencil(const std::vector<Vec3>& positions,
                                       int k, std::int64_t max_queries,
                                       Rng& rng) {
  const auto n = static_cast<std::int64_t>(positions.size());
  if (n <= k) throw DataError("jacobian stencil: need more points than k");

  JacobianStencil st;
  st.k = k;
  if (n <= max_queries) {
    st.queries.resize(static_cast<std::size_t>(n));
    std::iota(st.queries.begin(), st.queries.end(), 0);
  } else {
    st.queries = rng.sample_without_replacement(static_cast<int>(n),
                                                static_cast<int>(max_queries));
    std::sort(st.queries.begin(), st.queries.end());
  }

  const SpatialIndex index(positions);
  st.neighbours.resize(st.queries.size());
  st.lsq_rows.resize(st.queries.size());
  st.degenerate.assign(st.queries.size(), 0);

  for (std::size_t qi = 0; qi < st.queries.size(); ++qi) {
    const int q = st.queries[qi];
    auto ids = index.knn(positions[static_cast<std::size_t>(q)], k + 1);
    // Drop the query itself; when it is not among the k+1 (duplicates), drop
    // the furthest instead so the count stays at k.
    auto self = std::find(ids.begin(), ids.end(), q);
    if (self != ids.end()) {
      ids.erase(self);
    } else {
      ids.pop_back();
    }
    st.neighbours[qi] = ids;

    Eigen::MatrixXd x(k, 3);
    for (int j = 0; j < k; ++j) {
      const Vec3 d = positions[static_cast<std::size_t>(ids[static_cast<std::size_t>(j)])] -
                     positions[static_cast<std::size_t>(q)];
      x(j, 0) = d[0];
      x(j, 1) = d[1];
      x(j, 2) = d[2];
    }
    Eigen::Matrix3d xtx = x.transpose() * x;
    const Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(xtx);
    const double lo = eig.eigenvalues().minCoeff();
    const double hi = eig.eigenvalues().maxCoeff();
    if (!(hi > 0.0) || lo <= kDegenerateRatio * hi) st.degenerate[qi] = 1;

    xtx.diagonal().array() += kTikhonov;
    // G = (X^T X + tI)^{-1} X^T, 3 x k; J = G * dV.
    const Eigen::MatrixXd g = xtx.ldlt().solve(x.transpose());
    auto& rows = st.lsq_rows[qi];
    rows.resize(static_cast<std::size_t>(3 * k));
    for (int r = 0; r < 3; ++r)
      for (int j = 0; j < k; ++j)
        rows[static_cast<std::size_t>(r * k + j)] = g(r, j);
  }
  return st;
}

JacobianField jacobians_on_stencil(const JacobianStencil& stencil,
                                   const std::vector<Vec3>& velocities) {
  JacobianField out;
  out.stencil = &stencil;
  out.jacobians.resize(stencil.queries.size());
  const int k = stencil.k;
  for (std::size_t qi = 0; qi < stencil.queries.size(); ++qi) {
    const int q = stencil.queries[qi];
    const auto& ids = stencil.neighbours[qi];
    const auto& g = stencil.lsq_rows[qi];
    Mat3 j{};
    for (int r = 0; r < 3; ++r) {
      for (int nj = 0; nj < k; ++nj) {
        const double w = g[static_cast<std::size_t>(r * k + nj)];
        const Vec3 dv =
            velocities[static_cast<std::size_t>(ids[static_cast<std::size_t>(nj)])] -
            velocities[static_cast<std::size_t>(q)];
        j[static_cast<std::size_t>(r)][0] += w * dv[0];
        j[static_cast<std::size_t>(r)][1] += w * dv[1];
        j[static_cast<std::size_t>(r)][2] += w * dv[2];
      }
    }
    out.jacobians[qi] = j;
  }
  return out;
}

JacobianField estimate_jacobians(const std::vector<Vec3>& positions,
                                 const std::vector<Vec3>& velocities,
                                 JacobianStencil& stencil_out, int k,
                                 std::int64_t max_queries, std::uint64_t seed) {
  Rng rng(seed);
  stencil_out = build_jacobian_stencil(positions, k, max_queries, rng);
  return jacobians_on_stencil(stencil_out, velocities);
}

double NmseParts::value() const {
  if (den <= 0.0)
    throw DataError("nmse: reference field has zero energy in the region");
  return num / den;
}

NmseParts nmse_parts(const std::vector<Vec3>& pred, const std::vector<Vec3>& ref,
                     const RegionMask& region) {
  if (pred.size() != ref.size())
    throw ConfigError("nmse: prediction/reference size mismatch");
  if (!region.empty() && region.size() != ref.size())
    throw ConfigError("nmse: region mask size mismatch");
  NmseParts parts;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    if (!in_region(region, static_cast<int>(i))) continue;
    parts.num += dist2(pred[i], ref[i]);
    parts.den += dot3(ref[i], ref[i]);
  }
  return parts;
}

double nmse(const std::vector<Vec3>& pred, const std::vector<Vec3>& ref,
            const RegionMask& region) {
  return nmse_parts(pred, ref, region).value();
}

double cosine_similarity(const std::vector<Vec3>& pred,
                         const std::vector<Vec3>& ref,
                         const RegionMask& region, double exclude_fraction) {
  if (pred.size() != ref.size())
    throw ConfigError("cosine_similarity: size mismatch");
  std::vector<int> idx;
  for (std::size_t i = 0; i < ref.size(); ++i)
    if (in_region(region, static_cast<int>(i))) idx.push_back(static_cast<int>(i));
  if (idx.empty()) throw DataError("cosine_similarity: empty region");

  // Drop exactly the lowest `exclude_fraction` of points by reference
  // speed; ties resolve by index so the retained set is deterministic.
  std::vector<double> speeds(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i)
    speeds[i] = norm3(ref[static_cast<std::size_t>(idx[i])]);
  std::vector<std::size_t> order(idx.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (speeds[a] != speeds[b]) return speeds[a] < speeds[b];
    return a < b;
  });
  const auto cut = static_cast<std::size_t>(
      std::floor(exclude_fraction * static_cast<double>(idx.size())));
  if (cut >= idx.size())
    throw DataError("cosine_similarity: all points excluded");

  double acc = 0.0;
  for (std::size_t oi = cut; oi < order.size(); ++oi) {
    const Vec3& a = pred[static_cast<std::size_t>(idx[order[oi]])];
    const Vec3& b = ref[static_cast<std::size_t>(idx[order[oi]])];
    const double den = norm3(a) * norm3(b);
    acc += den > 0.0 ? dot3(a, b) / den : 0.0;
  }
  return acc / static_cast<double>(idx.size() - cut);
}

double divergence_score(const JacobianField& jac, const RegionMask& region,
                        double eps) {
  const JacobianStencil& st = *jac.stencil;
  double sum_tr = 0.0, sum_fro = 0.0;
  std::int64_t n = 0;
  for (std::size_t qi = 0; qi < st.queries.size(); ++qi) {
    if (st.degenerate[qi]) continue;
    if (!in_region(region, st.queries[qi])) continue;
    const Mat3& j = jac.jacobians[qi];
    sum_tr += std::abs(j[0][0] + j[1][1] + j[2][2]);
    double fro = 0.0;
    for (const auto& row : j)
      for (double x : row) fro += x * x;
    sum_fro += std::sqrt(fro);
    ++n;
  }
  if (n == 0) return 0.0;
  const double dn = static_cast<double>(n);
  return (sum_tr / dn) / (sum_fro / dn + eps);
}

Vec3 vorticity_from_jacobian(const Mat3& j) {
  // j[r][c] = d v_c / d x_r
  return {j[1][2] - j[2][1], j[2][0] - j[0][2], j[0][1] - j[1][0]};
}

double vorticity_score(const JacobianField& jac_pred,
                       const JacobianField& jac_ref, const RegionMask& region,
                       double eps) {
  if (jac_pred.stencil != jac_ref.stencil)
    throw ConfigError("vorticity_score: fields must share one stencil");
  const JacobianStencil& st = *jac_ref.stencil;
  double sq = 0.0, ref_mag = 0.0;
  std::int64_t n = 0;
  for (std::size_t qi = 0; qi < st.queries.size(); ++qi) {
    if (st.degenerate[qi]) continue;
    if (!in_region(region, st.queries[qi])) continue;
    const Vec3 wp = vorticity_from_jacobian(jac_pred.jacobians[qi]);
    const Vec3 wr = vorticity_from_jacobian(jac_ref.jacobians[qi]);
    sq += dist2(wp, wr);
    ref_mag += norm3(wr);
    ++n;
  }
  if (n == 0) return 0.0;
  const double dn = static_cast<double>(n);
  return std::sqrt(sq / dn) / (ref_mag / dn + eps);
}

}  // namespace fp
