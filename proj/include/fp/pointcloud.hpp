#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "fp/errors.hpp"

namespace fp {

using Vec3 = std::array<double, 3>;

inline Vec3 operator-(const Vec3& a, const Vec3& b) {
  return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}
inline Vec3 operator+(const Vec3& a, const Vec3& b) {
  return {a[0] + b[0], a[1] + b[1], a[2] + b[2]};
}
inline Vec3 operator*(double c, const Vec3& a) {
  return {c * a[0], c * a[1], c * a[2]};
}
inline double dot3(const Vec3& a, const Vec3& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}
inline double norm3(const Vec3& a) { return std::sqrt(dot3(a, a)); }
inline double dist2(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

using Mat3 = std::array<std::array<double, 3>, 3>;

inline Vec3 mat3_apply(const Mat3& m, const Vec3& x) {
  return {m[0][0] * x[0] + m[0][1] * x[1] + m[0][2] * x[2],
          m[1][0] * x[0] + m[1][1] * x[1] + m[1][2] * x[2],
          m[2][0] * x[0] + m[2][1] * x[1] + m[2][2] * x[2]};
}

// One steady-flow sample: positions [m], velocities [m/s], wall distance [m].
struct PointCloudField {
  std::vector<Vec3> positions;
  std::vector<Vec3> velocities;
  std::vector<double> wall_distance;

  std::size_t size() const { return positions.size(); }
  void validate() const;
};

// Exact Euclidean k-NN over an immutable point set. Ties break toward the
// lowest index so queries are fully deterministic.
class SpatialIndex {
 public:
  explicit SpatialIndex(std::vector<Vec3> points);

  // k nearest (including any exact-coincident point), ordered by
  // (distance, index). k must not exceed the point count.
  std::vector<int> knn(const Vec3& query, int k) const;

  const std::vector<Vec3>& points() const { return points_; }
  int size() const { return static_cast<int>(points_.size()); }

 private:
  struct Node {
    int axis = -1;       // -1 marks a leaf
    double split = 0.0;
    int left = -1, right = -1;
    int begin = 0, end = 0;  // leaf range in order_
  };

  int build(int begin, int end, int depth);
  void search(int node, const Vec3& q, int k,
              std::vector<std::pair<double, int>>& heap) const;

  std::vector<Vec3> points_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

// Greedy max-min selection of P centres. First pick is seed_index; later
// picks maximise the distance to the chosen set, ties to the lowest index.
std::vector<int> farthest_point_sampling(const std::vector<Vec3>& points,
                                         int count, int seed_index = 0);

// A ball of K nearest points around a centre with radius-normalised local
// coordinates. The radius is the distance to the furthest member.
struct Neighbourhood {
  int centre_index = -1;
  Vec3 centre_pos{};
  double radius = 0.0;
  std::vector<int> members;       // sorted by (distance, index)
  std::vector<Vec3> local_coords; // (x - centre)/radius per member
};

Neighbourhood build_neighbourhood(const std::vector<Vec3>& positions,
                                  const SpatialIndex& index, int centre_index,
                                  int k, bool normalise = true);

// Wall distances from the near-zero-velocity point set. Wall points get 0.
std::vector<double> compute_wall_distance(const PointCloudField& cloud,
                                          double wall_speed_threshold = 1e-6);

// Inverse-distance interpolation with weights 1/(d^power + eps). An exact
// positional hit returns the stored value verbatim.
std::vector<Vec3> idw_interpolate(const std::vector<Vec3>& known_positions,
                                  const std::vector<Vec3>& known_values,
                                  const std::vector<Vec3>& queries, int k,
                                  int power = 1, double eps = 1e-12);

// Weights for one query against given neighbour distances; sums to 1.
std::vector<double> idw_weights(const std::vector<double>& distances,
                                int power = 1, double eps = 1e-12);

}  // namespace fp
