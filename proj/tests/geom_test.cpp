#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "oracles.hpp"
#include "p3t/geom.hpp"
#include "p3t/random.hpp"

using namespace p3t;
using geom::Vec3;

namespace {

std::vector<Vec3> line(std::initializer_list<double> xs) {
  std::vector<Vec3> v;
  for (double x : xs) v.push_back({x, 0.0, 0.0});
  return v;
}

std::vector<Vec3> random_points(Rng& rng, std::size_t n) {
  std::vector<Vec3> v(n);
  for (auto& p : v) p = {rng.normal(), rng.normal(), rng.normal()};
  return v;
}

}  // namespace

TEST(Fps, CollinearExample) {
  auto pts = line({0, 1, 2, 9});
  EXPECT_EQ(geom::fps(pts, 2, 0), (std::vector<std::size_t>{0, 3}));
  EXPECT_EQ(oracle::fps(pts, 2, 0), (std::vector<std::size_t>{0, 3}));
}

TEST(Fps, AllAndSingle) {
  Rng rng(2);
  auto pts = random_points(rng, 7);
  for (std::size_t start = 0; start < 7; ++start) {
    auto all = geom::fps(pts, 7, start);
    std::sort(all.begin(), all.end());
    for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(all[i], i);
    EXPECT_EQ(geom::fps(pts, 1, start), std::vector<std::size_t>{start});
  }
}

TEST(Fps, TooManyIsArgumentError) {
  auto pts = line({0, 1});
  EXPECT_THROW(geom::fps(pts, 3, 0), geom::ArgumentError);
}

TEST(Fps, MatchesOracleOnRandomInstances) {
  Rng rng(4);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 1 + rng.index(16);
    auto pts = random_points(rng, n);
    const std::size_t m = 1 + rng.index(n);
    const std::size_t start = rng.index(n);
    EXPECT_EQ(geom::fps(pts, m, start), oracle::fps(pts, m, start));
  }
}

TEST(Fps, PermutationStable) {
  Rng rng(8);
  for (int t = 0; t < 20; ++t) {
    auto pts = random_points(rng, 12);
    std::vector<std::size_t> perm(12);
    for (std::size_t i = 0; i < 12; ++i) perm[i] = i;
    rng.shuffle(perm);
    std::vector<Vec3> shuffled(12);
    std::size_t new_start = 0;
    for (std::size_t i = 0; i < 12; ++i) {
      shuffled[i] = pts[perm[i]];
      if (perm[i] == 0) new_start = i;
    }
    auto a = geom::fps(pts, 6, 0);
    auto b = geom::fps(shuffled, 6, new_start);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(pts[a[i]], shuffled[b[i]]);
  }
}

TEST(Knn, Examples) {
  auto pts = line({0, 1, 2, 3});
  EXPECT_EQ(geom::knn({0, 0, 0}, pts, 2), (std::vector<std::size_t>{0, 1}));
  auto all = geom::knn({0, 0, 0}, pts, 4);
  EXPECT_EQ(all.size(), 4u);
  EXPECT_THROW(geom::knn({0, 0, 0}, pts, 5), geom::ArgumentError);
  EXPECT_EQ(geom::knn_of(pts, 0, 2, false), (std::vector<std::size_t>{1, 2}));
  EXPECT_THROW(geom::knn_of(pts, 0, 4, false), geom::ArgumentError);
}

TEST(Knn, DuplicatesPreferLowestIndex) {
  auto pts = line({5, 1, 1, 1});
  EXPECT_EQ(geom::knn({1, 0, 0}, pts, 2), (std::vector<std::size_t>{1, 2}));
}

TEST(Knn, MatchesOracleOnRandomInstances) {
  Rng rng(6);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 1 + rng.index(16);
    auto pts = random_points(rng, n);
    const Vec3 q{rng.normal(), rng.normal(), rng.normal()};
    const std::size_t k = 1 + rng.index(n);
    EXPECT_EQ(geom::knn(q, pts, k), oracle::knn(q, pts, k));
  }
}

TEST(Knn, FeatureGraphExcludesSelf) {
  std::vector<double> f{0.0, 0.0, 1.0, 0.0, 5.0, 0.0};
  auto g = geom::knn_rows(f, 3, 2, 1);
  EXPECT_EQ(g, (std::vector<std::size_t>{1, 0, 1}));
  EXPECT_THROW(geom::knn_rows(f, 3, 2, 3), geom::ArgumentError);
}

TEST(Patchify, SinglePointPatches) {
  Rng rng(1);
  geom::PointCloud pc{random_points(rng, 6), {}, {}};
  auto ps = geom::patchify(pc, 6, 1);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(ps.patch(i)[0], ps.centers[i]);
}

TEST(Patchify, CubeCorners) {
  geom::PointCloud pc;
  for (int x = 0; x < 2; ++x)
    for (int y = 0; y < 2; ++y)
      for (int z = 0; z < 2; ++z) pc.points.push_back({double(x), double(y), double(z)});
  auto ps = geom::patchify(pc, 2, 4);
  // Brute force: FPS from corner 0 picks the opposite corner (index 7); each
  // corner's 4 nearest are itself plus its 3 edge neighbours.
  EXPECT_EQ(ps.center_indices, (std::vector<std::size_t>{0, 7}));
  for (std::size_t p = 0; p < 2; ++p) {
    auto expect = oracle::knn(ps.centers[p], pc.points, 4);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(ps.patch(p)[j], pc.points[expect[j]]);
  }
  EXPECT_EQ(ps.patch(0)[0], (Vec3{0, 0, 0}));
  EXPECT_EQ(ps.patch(1)[0], (Vec3{1, 1, 1}));
}

TEST(Patchify, Deterministic) {
  Rng rng(9);
  geom::PointCloud pc{random_points(rng, 64), {}, {}};
  auto a = geom::patchify(pc, 8, 8);
  auto b = geom::patchify(pc, 8, 8);
  EXPECT_EQ(a.points, b.points);
  EXPECT_EQ(a.center_indices, b.center_indices);
}

TEST(Centroid, Examples) {
  std::vector<Vec3> a{{0, 0, 0}, {2, 0, 0}};
  EXPECT_EQ(geom::centroid(a), (Vec3{1, 0, 0}));
  std::vector<Vec3> b{{3, 4, 5}};
  EXPECT_EQ(geom::centroid(b), (Vec3{3, 4, 5}));
  std::vector<Vec3> c{{1, 0, 0}, {0, 1, 0}};
  EXPECT_EQ(geom::centroid(c), (Vec3{0.5, 0.5, 0}));
  EXPECT_THROW(geom::centroid(std::vector<Vec3>{}), geom::ArgumentError);
}

TEST(Diameter, Examples) {
  std::vector<Vec3> tri{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  EXPECT_NEAR(geom::patch_diameter(tri), std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(oracle::diameter(tri), 1.41421, 1e-5);
  EXPECT_EQ(geom::patch_diameter(std::vector<Vec3>{{1, 2, 3}}), 0.0);
  EXPECT_EQ(geom::patch_diameter(std::vector<Vec3>{{1, 2, 3}, {1, 2, 3}}), 0.0);
}

TEST(Diameter, RigidInvariance) {
  Rng rng(12);
  for (int t = 0; t < 50; ++t) {
    auto pts = random_points(rng, 10);
    const double d0 = geom::patch_diameter(pts);
    std::reverse(pts.begin(), pts.end());
    EXPECT_EQ(geom::patch_diameter(pts), d0);
    auto moved = oracle::rigid_transform(pts, rng);
    EXPECT_NEAR(geom::patch_diameter(moved), d0, 1e-9);
  }
}

TEST(Thresholds, IdenticalPatchesAndWholeCloud) {
  geom::PointCloud pc{{{0, 0, 0}, {1, 0, 0}, {3, 0, 0}}, {}, {}};
  auto ps = geom::patchify(pc, 1, 3);  // one patch equal to the whole cloud
  auto th = geom::compute_thresholds(pc, ps);
  EXPECT_NEAR(th.H, 0.0, 1e-15);
  EXPECT_NEAR(th.G, 3.0, 1e-15);

  geom::PatchSet same;
  same.n = 2;
  same.k = 2;
  same.centers = {{1, 0, 0}, {1, 0, 0}};
  same.points = {{1, 0, 0}, {0, 0, 0}, {1, 0, 0}, {0, 0, 0}};
  auto th2 = geom::compute_thresholds(pc, same);
  EXPECT_NEAR(th2.H, std::abs(0.5 - 4.0 / 3.0), 1e-15);
  EXPECT_NEAR(th2.G, 1.0, 1e-15);
}

TEST(Thresholds, MatchEnumerationAndBoundEveryPatch) {
  Rng rng(21);
  for (int t = 0; t < 30; ++t) {
    geom::PointCloud pc{random_points(rng, 32), {}, {}};
    auto ps = geom::patchify(pc, 4, 6);
    auto th = geom::compute_thresholds(pc, ps);
    double h = 0.0;
    double g = 0.0;
    const Vec3 mu = oracle::mean(pc.points);
    for (std::size_t i = 0; i < ps.n; ++i) {
      auto patch = ps.patch(i);
      std::vector<Vec3> pv(patch.begin(), patch.end());
      const double hi = std::sqrt(oracle::sqdist(oracle::mean(pv), mu));
      const double gi = oracle::diameter(pv);
      h = std::max(h, hi);
      g = std::max(g, gi);
      EXPECT_LE(geom::patch_diameter(patch), th.G);
      EXPECT_LE(geom::distance(geom::centroid(patch), th.global_centroid), th.H);
    }
    EXPECT_NEAR(th.H, h, 1e-12);
    EXPECT_NEAR(th.G, g, 1e-12);
  }
}
