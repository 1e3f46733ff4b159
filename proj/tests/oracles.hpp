#pragma once

// Brute-force reference implementations used only by tests.

#include <cmath>
#include <algorithm>
#include <cstddef>
#include <limits>
#include <vector>

#include "p3t/geom.hpp"
#include "p3t/random.hpp"

namespace oracle {

using p3t::geom::Vec3;

inline double sqdist(const Vec3& a, const Vec3& b) {
  double s = 0.0;
  for (int i = 0; i < 3; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

inline Vec3 mean(const std::vector<Vec3>& pts) {
  Vec3 s{0, 0, 0};
  for (const auto& p : pts)
    for (int i = 0; i < 3; ++i) s[i] += p[i];
  for (int i = 0; i < 3; ++i) s[i] /= static_cast<double>(pts.size());
  return s;
}

// Recomputes every min-distance from scratch at each step.
inline std::vector<std::size_t> fps(const std::vector<Vec3>& pts, std::size_t m, std::size_t start) {
  std::vector<std::size_t> chosen{start};
  while (chosen.size() < m) {
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      double d = std::numeric_limits<double>::infinity();
      for (auto c : chosen) d = std::min(d, sqdist(pts[i], pts[c]));
      if (d > best_d) {
        best_d = d;
        best = i;
      }
    }
    chosen.push_back(best);
  }
  return chosen;
}

// Repeated selection of the nearest unused point.
inline std::vector<std::size_t> knn(const Vec3& q, const std::vector<Vec3>& pts, std::size_t k) {
  std::vector<bool> used(pts.size(), false);
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r < k; ++r) {
    std::size_t best = pts.size();
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (used[i]) continue;
      if (best == pts.size() || sqdist(q, pts[i]) < sqdist(q, pts[best])) best = i;
    }
    used[best] = true;
    out.push_back(best);
  }
  return out;
}

inline double diameter(const std::vector<Vec3>& pts) {
  double d = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = 0; j < pts.size(); ++j) d = std::max(d, std::sqrt(sqdist(pts[i], pts[j])));
  return d;
}

// Random rotation (via Gram-Schmidt on gaussian vectors) plus translation.
inline std::vector<Vec3> rigid_transform(const std::vector<Vec3>& pts, p3t::Rng& rng) {
  double a[3], b[3], c[3];
  for (auto& v : a) v = rng.normal();
  for (auto& v : b) v = rng.normal();
  const double na = std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
  for (auto& v : a) v /= na;
  const double ab = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
  for (int i = 0; i < 3; ++i) b[i] -= ab * a[i];
  const double nb = std::sqrt(b[0] * b[0] + b[1] * b[1] + b[2] * b[2]);
  for (auto& v : b) v /= nb;
  c[0] = a[1] * b[2] - a[2] * b[1];
  c[1] = a[2] * b[0] - a[0] * b[2];
  c[2] = a[0] * b[1] - a[1] * b[0];
  const Vec3 t{rng.normal(), rng.normal(), rng.normal()};
  std::vector<Vec3> out;
  for (const auto& p : pts) {
    out.push_back(Vec3{a[0] * p[0] + a[1] * p[1] + a[2] * p[2] + t[0], b[0] * p[0] + b[1] * p[1] + b[2] * p[2] + t[1],
                       c[0] * p[0] + c[1] * p[1] + c[2] * p[2] + t[2]});
  }
  return out;
}

using Matrix = std::vector<std::vector<double>>;

// Row i wins column j when every earlier row is strictly smaller and no
// later row is larger.
inline std::vector<std::size_t> importance(const Matrix& x) {
  std::vector<std::size_t> s(x.size(), 0);
  for (std::size_t j = 0; j < x[0].size(); ++j) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      bool wins = true;
      for (std::size_t r = 0; r < x.size(); ++r) {
        if (r < i && x[r][j] >= x[i][j]) wins = false;
        if (r > i && x[r][j] > x[i][j]) wins = false;
      }
      if (wins) ++s[i];
    }
  }
  return s;
}

// Ranks by counting; ties go to the lower index.
inline std::vector<std::size_t> select(const std::vector<std::size_t>& s, std::size_t l, bool lowest) {
  std::vector<std::size_t> out(l);
  for (std::size_t i = 0; i < s.size(); ++i) {
    std::size_t rank = 0;
    for (std::size_t j = 0; j < s.size(); ++j) {
      const bool before = lowest ? s[j] < s[i] : s[j] > s[i];
      if (before || (s[j] == s[i] && j < i)) ++rank;
    }
    if (rank < l) out[rank] = i;
  }
  return out;
}

// out_i = max over the k nearest other rows j of leaky(W^T [x_i ; x_j - x_i] + b).
inline Matrix edgeconv(const Matrix& x, const Matrix& w, const std::vector<double>& b, std::size_t k,
                       double slope) {
  const std::size_t m = x.size();
  const std::size_t d = x[0].size();
  Matrix out(m, std::vector<double>(b.size(), -std::numeric_limits<double>::infinity()));
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<bool> used(m, false);
    used[i] = true;
    for (std::size_t r = 0; r < k; ++r) {
      std::size_t best = m;
      double best_d = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        if (used[j]) continue;
        double dist = 0.0;
        for (std::size_t c = 0; c < d; ++c) dist += (x[i][c] - x[j][c]) * (x[i][c] - x[j][c]);
        if (best == m || dist < best_d) {
          best = j;
          best_d = dist;
        }
      }
      used[best] = true;
      for (std::size_t o = 0; o < b.size(); ++o) {
        double v = b[o];
        for (std::size_t c = 0; c < d; ++c) v += w[c][o] * x[i][c] + w[d + c][o] * (x[best][c] - x[i][c]);
        v = v > 0 ? v : slope * v;
        out[i][o] = std::max(out[i][o], v);
      }
    }
  }
  return out;
}

}  // namespace oracle
