#pragma once

// Point-cloud geometry: sampling, neighborhoods, patches and the patch
// position/size thresholds.

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace p3t::geom {

using Vec3 = std::array<double, 3>;

class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct PointCloud {
  std::vector<Vec3> points;
  std::optional<int> label;
  std::string category_name;

  std::size_t size() const { return points.size(); }
};

// n patches of k points each, stored patch-major in absolute coordinates.
struct PatchSet {
  std::size_t n = 0;
  std::size_t k = 0;
  std::vector<Vec3> centers;
  std::vector<Vec3> points;  // n*k
  std::vector<std::size_t> center_indices;

  std::span<const Vec3> patch(std::size_t i) const {
    return std::span<const Vec3>(points).subspan(i * k, k);
  }
};

struct Thresholds {
  double H = 0.0;  // max distance of an original patch centroid to the global centroid
  double G = 0.0;  // max original patch diameter
  Vec3 global_centroid{};
};

double distance(const Vec3& a, const Vec3& b);
double squared_distance(const Vec3& a, const Vec3& b);

// Greedy farthest point sampling; the first index is `start`, ties go to the
// lowest index.
std::vector<std::size_t> fps(std::span<const Vec3> points, std::size_t n, std::size_t start = 0);

// k nearest points to `query`, sorted by distance, ties by lowest index.
std::vector<std::size_t> knn(const Vec3& query, std::span<const Vec3> points, std::size_t k);

// k nearest neighbours of points[index]; the point itself is a candidate
// only when include_self is set.
std::vector<std::size_t> knn_of(std::span<const Vec3> points, std::size_t index, std::size_t k,
                                bool include_self);

// Feature-space graph: for every row of a (rows×cols) matrix, the k nearest
// other rows (self excluded), row-major (rows×k).
std::vector<std::size_t> knn_rows(std::span<const double> data, std::size_t rows, std::size_t cols,
                                  std::size_t k);

PatchSet patchify(const PointCloud& pc, std::size_t n, std::size_t k);

Vec3 centroid(std::span<const Vec3> points);
double patch_diameter(std::span<const Vec3> points);
Thresholds compute_thresholds(const PointCloud& pc, const PatchSet& ps);

}  // namespace p3t::geom
