#include "fp/pointcloud.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace fp {

void PointCloudField::validate() const {
  if (positions.empty()) throw DataError("point cloud is empty");
  if (velocities.size() != positions.size() ||
      wall_distance.size() != positions.size())
    throw DataError("point cloud field lengths disagree");
  for (const auto& p : positions)
    for (double c : p)
      if (!std::isfinite(c)) throw DataError("non-finite position");
  for (const auto& v : velocities)
    for (double c : v)
      if (!std::isfinite(c)) throw DataError("non-finite velocity");
  for (double d : wall_distance)
    if (!std::isfinite(d) || d < 0.0)
      throw DataError("wall distance must be finite and non-negative");
}

// ---------------------------------------------------------------------------
// SpatialIndex

namespace {
constexpr int kLeafSize = 16;

// Heap entries compare by (distance^2, index); the heap keeps the current
// k best with the worst on top.
inline bool heap_less(const std::pair<double, int>& a,
                      const std::pair<double, int>& b) {
  if (a.first != b.first) return a.first < b.first;
  return a.second < b.second;
}
}  // namespace

SpatialIndex::SpatialIndex(std::vector<Vec3> points)
    : points_(std::move(points)) {
  if (points_.empty()) throw DataError("SpatialIndex: empty point set");
  order_.resize(points_.size());
  std::iota(order_.begin(), order_.end(), 0);
  nodes_.reserve(2 * points_.size() / kLeafSize + 4);
  root_ = build(0, static_cast<int>(points_.size()), 0);
}

int SpatialIndex::build(int begin, int end, int depth) {
  Node n;
  if (end - begin <= kLeafSize) {
    n.begin = begin;
    n.end = end;
    nodes_.push_back(n);
    return static_cast<int>(nodes_.size()) - 1;
  }
  // Split on the widest axis at the median.
  Vec3 lo{std::numeric_limits<double>::max(), std::numeric_limits<double>::max(),
          std::numeric_limits<double>::max()};
  Vec3 hi{-std::numeric_limits<double>::max(),
          -std::numeric_limits<double>::max(),
          -std::numeric_limits<double>::max()};
  for (int i = begin; i < end; ++i) {
    const Vec3& p = points_[static_cast<std::size_t>(order_[static_cast<std::size_t>(i)])];
    for (int a = 0; a < 3; ++a) {
      lo[static_cast<std::size_t>(a)] = std::min(lo[static_cast<std::size_t>(a)], p[static_cast<std::size_t>(a)]);
      hi[static_cast<std::size_t>(a)] = std::max(hi[static_cast<std::size_t>(a)], p[static_cast<std::size_t>(a)]);
    }
  }
  int axis = 0;
  double width = hi[0] - lo[0];
  for (int a = 1; a < 3; ++a)
    if (hi[static_cast<std::size_t>(a)] - lo[static_cast<std::size_t>(a)] > width) {
      width = hi[static_cast<std::size_t>(a)] - lo[static_cast<std::size_t>(a)];
      axis = a;
    }
  const int mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid,
                   order_.begin() + end, [&](int a, int b) {
                     const double pa = points_[static_cast<std::size_t>(a)][static_cast<std::size_t>(axis)];
                     const double pb = points_[static_cast<std::size_t>(b)][static_cast<std::size_t>(axis)];
                     if (pa != pb) return pa < pb;
                     return a < b;
                   });
  n.axis = axis;
  n.split = points_[static_cast<std::size_t>(order_[static_cast<std::size_t>(mid)])][static_cast<std::size_t>(axis)];
  const int self = static_cast<int>(nodes_.size());
  nodes_.push_back(n);
  const int left = build(begin, mid, depth + 1);
  const int right = build(mid, end, depth + 1);
  nodes_[static_cast<std::size_t>(self)].left = left;
  nodes_[static_cast<std::size_t>(self)].right = right;
  return self;
}

void SpatialIndex::search(int node_id, const Vec3& q, int k,
                          std::vector<std::pair<double, int>>& heap) const {
  const Node& n = nodes_[static_cast<std::size_t>(node_id)];
  if (n.axis < 0) {
    for (int i = n.begin; i < n.end; ++i) {
      const int idx = order_[static_cast<std::size_t>(i)];
      const double d2 = dist2(points_[static_cast<std::size_t>(idx)], q);
      const std::pair<double, int> cand{d2, idx};
      if (static_cast<int>(heap.size()) < k) {
        heap.push_back(cand);
        std::push_heap(heap.begin(), heap.end(), heap_less);
      } else if (heap_less(cand, heap.front())) {
        std::pop_heap(heap.begin(), heap.end(), heap_less);
        heap.back() = cand;
        std::push_heap(heap.begin(), heap.end(), heap_less);
      }
    }
    return;
  }
  const double delta = q[static_cast<std::size_t>(n.axis)] - n.split;
  const int near = delta < 0.0 ? n.left : n.right;
  const int far = delta < 0.0 ? n.right : n.left;
  search(near, q, k, heap);
  // Visit the far side when it can still contain a better (or tie-breaking)
  // candidate; <= keeps equal-distance points reachable for the index rule.
  if (static_cast<int>(heap.size()) < k || delta * delta <= heap.front().first)
    search(far, q, k, heap);
}

std::vector<int> SpatialIndex::knn(const Vec3& query, int k) const {
  if (k <= 0) throw ConfigError("knn: k must be positive");
  if (k > size()) throw ConfigError("knn: k exceeds point count");
  std::vector<std::pair<double, int>> heap;
  heap.reserve(static_cast<std::size_t>(k) + 1);
  search(root_, query, k, heap);
  std::sort_heap(heap.begin(), heap.end(), heap_less);
  std::vector<int> out(heap.size());
  for (std::size_t i = 0; i < heap.size(); ++i) out[i] = heap[i].second;
  return out;
}

// ---------------------------------------------------------------------------

std::vector<int> farthest_point_sampling(const std::vector<Vec3>& points,
                                         int count, int seed_index) {
  const int n = static_cast<int>(points.size());
  if (count < 1 || count > n)
    throw ConfigError("farthest_point_sampling: count out of range");
  if (seed_index < 0 || seed_index >= n)
    throw ConfigError("farthest_point_sampling: seed index out of range");

  std::vector<int> chosen;
  chosen.reserve(static_cast<std::size_t>(count));
  std::vector<double> min_d2(static_cast<std::size_t>(n),
                             std::numeric_limits<double>::max());
  int current = seed_index;
  chosen.push_back(current);
  for (int step = 1; step < count; ++step) {
    int best = -1;
    double best_d2 = -1.0;
    for (int i = 0; i < n; ++i) {
      double& m = min_d2[static_cast<std::size_t>(i)];
      m = std::min(m, dist2(points[static_cast<std::size_t>(i)],
                            points[static_cast<std::size_t>(current)]));
      if (m > best_d2) {  // strict: ties keep the lowest index
        best_d2 = m;
        best = i;
      }
    }
    current = best;
    chosen.push_back(current);
  }
  return chosen;
}

Neighbourhood build_neighbourhood(const std::vector<Vec3>& positions,
                                  const SpatialIndex& index, int centre_index,
                                  int k, bool normalise) {
  if (centre_index < 0 ||
      centre_index >= static_cast<int>(positions.size()))
    throw ConfigError("build_neighbourhood: bad centre index");
  Neighbourhood nb;
  nb.centre_index = centre_index;
  nb.centre_pos = positions[static_cast<std::size_t>(centre_index)];
  nb.members = index.knn(nb.centre_pos, k);
  const double r =
      std::sqrt(dist2(positions[static_cast<std::size_t>(nb.members.back())],
                      nb.centre_pos));
  if (r <= 0.0)
    throw DataError("build_neighbourhood: zero radius (duplicate points)");
  nb.radius = r;
  nb.local_coords.reserve(nb.members.size());
  const double scale = normalise ? 1.0 / r : 1.0;
  for (int m : nb.members)
    nb.local_coords.push_back(
        scale * (positions[static_cast<std::size_t>(m)] - nb.centre_pos));
  return nb;
}

std::vector<double> compute_wall_distance(const PointCloudField& cloud,
                                          double wall_speed_threshold) {
  std::vector<Vec3> wall_points;
  for (std::size_t i = 0; i < cloud.size(); ++i)
    if (norm3(cloud.velocities[i]) <= wall_speed_threshold)
      wall_points.push_back(cloud.positions[i]);
  if (wall_points.empty())
    throw DataError(
        "compute_wall_distance: no points below the wall speed threshold of " +
        std::to_string(wall_speed_threshold) + " m/s");
  const SpatialIndex wall_index(std::move(wall_points));
  std::vector<double> out(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (norm3(cloud.velocities[i]) <= wall_speed_threshold) {
      out[i] = 0.0;
      continue;
    }
    const int nearest = wall_index.knn(cloud.positions[i], 1)[0];
    out[i] = std::sqrt(
        dist2(wall_index.points()[static_cast<std::size_t>(nearest)],
              cloud.positions[i]));
  }
  return out;
}

std::vector<double> idw_weights(const std::vector<double>& distances,
                                int power, double eps) {
  std::vector<double> w(distances.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < distances.size(); ++i) {
    w[i] = 1.0 / (std::pow(distances[i], power) + eps);
    sum += w[i];
  }
  for (double& x : w) x /= sum;
  return w;
}

std::vector<Vec3> idw_interpolate(const std::vector<Vec3>& known_positions,
                                  const std::vector<Vec3>& known_values,
                                  const std::vector<Vec3>& queries, int k,
                                  int power, double eps) {
  if (known_positions.empty()) throw DataError("idw_interpolate: no known points");
  if (known_positions.size() != known_values.size())
    throw ConfigError("idw_interpolate: positions/values length mismatch");
  if (k > static_cast<int>(known_positions.size()))
    throw ConfigError("idw_interpolate: k exceeds known point count");

  const SpatialIndex index(known_positions);
  std::vector<Vec3> out(queries.size());
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    const auto neigh = index.knn(queries[qi], k);
    std::vector<double> dist(neigh.size());
    bool exact = false;
    for (std::size_t j = 0; j < neigh.size(); ++j) {
      dist[j] = std::sqrt(dist2(
          known_positions[static_cast<std::size_t>(neigh[j])], queries[qi]));
      if (dist[j] == 0.0 && !exact) {
        out[qi] = known_values[static_cast<std::size_t>(neigh[j])];
        exact = true;
      }
    }
    if (exact) continue;
    const auto w = idw_weights(dist, power, eps);
    Vec3 acc{0.0, 0.0, 0.0};
    for (std::size_t j = 0; j < neigh.size(); ++j)
      acc = acc + w[j] * known_values[static_cast<std::size_t>(neigh[j])];
    out[qi] = acc;
  }
  return out;
}

}  // namespace fp
