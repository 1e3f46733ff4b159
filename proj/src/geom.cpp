#include "p3t/geom.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <utility>

namespace p3t::geom {

double squared_distance(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

double distance(const Vec3& a, const Vec3& b) { return std::sqrt(squared_distance(a, b)); }

std::vector<std::size_t> fps(std::span<const Vec3> points, std::size_t n, std::size_t start) {
  const std::size_t total = points.size();
  if (n > total) {
    throw ArgumentError("fps: requested " + std::to_string(n) + " samples from " +
                        std::to_string(total) + " points");
  }
  if (n == 0) return {};
  if (start >= total) throw ArgumentError("fps: start index " + std::to_string(start) + " out of range");

  std::vector<std::size_t> picked{start};
  picked.reserve(n);
  std::vector<double> nearest(total, std::numeric_limits<double>::infinity());
  std::vector<char> taken(total, 0);
  taken[start] = 1;
  std::size_t last = start;
  while (picked.size() < n) {
    std::size_t best = total;
    double best_d = -1.0;
    for (std::size_t i = 0; i < total; ++i) {
      if (taken[i]) continue;
      nearest[i] = std::min(nearest[i], squared_distance(points[i], points[last]));
      if (nearest[i] > best_d) {
        best_d = nearest[i];
        best = i;
      }
    }
    taken[best] = 1;
    picked.push_back(best);
    last = best;
  }
  return picked;
}

namespace {

std::vector<std::size_t> nearest_k(std::vector<std::pair<double, std::size_t>>& cand, std::size_t k) {
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = cand[i].second;
  return out;
}

}  // namespace

std::vector<std::size_t> knn(const Vec3& query, std::span<const Vec3> points, std::size_t k) {
  if (k > points.size()) {
    throw ArgumentError("knn: k=" + std::to_string(k) + " exceeds " + std::to_string(points.size()) +
                        " candidates");
  }
  std::vector<std::pair<double, std::size_t>> cand(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) cand[i] = {squared_distance(query, points[i]), i};
  return nearest_k(cand, k);
}

std::vector<std::size_t> knn_of(std::span<const Vec3> points, std::size_t index, std::size_t k,
                                bool include_self) {
  if (index >= points.size()) throw ArgumentError("knn: query index out of range");
  const std::size_t available = include_self ? points.size() : points.size() - 1;
  if (k > available) {
    throw ArgumentError("knn: k=" + std::to_string(k) + " exceeds " + std::to_string(available) +
                        " candidates");
  }
  std::vector<std::pair<double, std::size_t>> cand;
  cand.reserve(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!include_self && i == index) continue;
    cand.emplace_back(squared_distance(points[index], points[i]), i);
  }
  return nearest_k(cand, k);
}

std::vector<std::size_t> knn_rows(std::span<const double> data, std::size_t rows, std::size_t cols,
                                  std::size_t k) {
  if (k >= rows) {
    throw ArgumentError("knn: graph k=" + std::to_string(k) + " needs more than " +
                        std::to_string(rows) + " nodes");
  }
  std::vector<std::size_t> out(rows * k);
  std::vector<std::pair<double, std::size_t>> cand;
  cand.reserve(rows - 1);
  for (std::size_t i = 0; i < rows; ++i) {
    cand.clear();
    const double* a = data.data() + i * cols;
    for (std::size_t j = 0; j < rows; ++j) {
      if (j == i) continue;
      const double* b = data.data() + j * cols;
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) s += (a[c] - b[c]) * (a[c] - b[c]);
      cand.emplace_back(s, j);
    }
    auto nb = nearest_k(cand, k);
    std::copy(nb.begin(), nb.end(), out.begin() + static_cast<std::ptrdiff_t>(i * k));
  }
  return out;
}

PatchSet patchify(const PointCloud& pc, std::size_t n, std::size_t k) {
  if (pc.points.empty()) throw ArgumentError("patchify: empty point cloud");
  if (k == 0 || n == 0) throw ArgumentError("patchify: n and k must be positive");
  PatchSet ps;
  ps.n = n;
  ps.k = k;
  ps.center_indices = fps(pc.points, n, 0);
  ps.centers.reserve(n);
  ps.points.reserve(n * k);
  for (std::size_t c : ps.center_indices) {
    ps.centers.push_back(pc.points[c]);
    for (std::size_t j : knn(pc.points[c], pc.points, k)) ps.points.push_back(pc.points[j]);
  }
  return ps;
}

Vec3 centroid(std::span<const Vec3> points) {
  if (points.empty()) throw ArgumentError("centroid: empty point set");
  Vec3 c{0.0, 0.0, 0.0};
  for (const auto& p : points)
    for (int d = 0; d < 3; ++d) c[d] += p[d];
  for (int d = 0; d < 3; ++d) c[d] /= static_cast<double>(points.size());
  return c;
}

double patch_diameter(std::span<const Vec3> points) {
  double best = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i)
    for (std::size_t j = i + 1; j < points.size(); ++j)
      best = std::max(best, squared_distance(points[i], points[j]));
  return std::sqrt(best);
}

Thresholds compute_thresholds(const PointCloud& pc, const PatchSet& ps) {
  Thresholds t;
  t.global_centroid = centroid(pc.points);
  for (std::size_t i = 0; i < ps.n; ++i) {
    auto patch = ps.patch(i);
    t.H = std::max(t.H, distance(centroid(patch), t.global_centroid));
    t.G = std::max(t.G, patch_diameter(patch));
  }
  return t;
}

}  // namespace p3t::geom
