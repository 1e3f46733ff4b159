#include "p3t/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "p3t/io.hpp"

namespace p3t::data {

namespace {

using geom::Vec3;
constexpr double kPi = std::numbers::pi;
constexpr char kMagic[] = "P3PC";
constexpr std::uint32_t kVersion = 1;
constexpr char kHeader[] = "path,label,category_name";

Vec3 on_triangle(const Vec3& a, const Vec3& b, const Vec3& c, Rng& rng) {
  double u = rng.uniform();
  double v = rng.uniform();
  if (u + v > 1.0) {
    u = 1.0 - u;
    v = 1.0 - v;
  }
  Vec3 p;
  for (int i = 0; i < 3; ++i) p[i] = a[i] + u * (b[i] - a[i]) + v * (c[i] - a[i]);
  return p;
}

double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 u{b[0] - a[0], b[1] - a[1], b[2] - a[2]};
  const Vec3 v{c[0] - a[0], c[1] - a[1], c[2] - a[2]};
  const double x = u[1] * v[2] - u[2] * v[1];
  const double y = u[2] * v[0] - u[0] * v[2];
  const double z = u[0] * v[1] - u[1] * v[0];
  return 0.5 * std::sqrt(x * x + y * y + z * z);
}

// Index drawn proportionally to the weights.
std::size_t pick_weighted(std::span<const double> w, Rng& rng) {
  double total = 0.0;
  for (double x : w) total += x;
  double r = rng.uniform() * total;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (r < w[i]) return i;
    r -= w[i];
  }
  return w.size() - 1;
}

Vec3 sample_triangles(std::span<const std::array<Vec3, 3>> tris, std::span<const double> areas, Rng& rng) {
  const auto& t = tris[pick_weighted(areas, rng)];
  return on_triangle(t[0], t[1], t[2], rng);
}

Vec3 sample_point(const ShapeSpec& s, Rng& rng) {
  const double a = s.aspect;
  const double b = s.detail;
  switch (s.family) {
    case Family::sphere: {
      Vec3 v{rng.normal(), rng.normal(), rng.normal()};
      double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
      while (n < 1e-12) {
        v = {rng.normal(), rng.normal(), rng.normal()};
        n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
      }
      return {v[0] / n, v[1] / n, v[2] / n};
    }
    case Family::cube: {
      // Box with half extents (1, 1, a); faces weighted by area.
      const double w[3] = {4.0 * a, 4.0 * a, 4.0};  // ±x, ±y, ±z pairs
      const std::size_t axis = pick_weighted(w, rng);
      const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
      const double u = rng.uniform(-1.0, 1.0);
      const double v = rng.uniform(-1.0, 1.0);
      if (axis == 0) return {sign, u, v * a};
      if (axis == 1) return {u, sign, v * a};
      return {u, v, sign * a};
    }
    case Family::cylinder: {
      const double w[2] = {4.0 * kPi * a, 2.0 * kPi};
      const double t = rng.uniform(0.0, 2.0 * kPi);
      if (pick_weighted(w, rng) == 0) return {std::cos(t), std::sin(t), rng.uniform(-a, a)};
      const double r = std::sqrt(rng.uniform());
      return {r * std::cos(t), r * std::sin(t), rng.uniform() < 0.5 ? -a : a};
    }
    case Family::cone: {
      // Apex at +a, base radius 1 at -a.
      const double w[2] = {kPi * std::sqrt(1.0 + 4.0 * a * a), kPi};
      const double t = rng.uniform(0.0, 2.0 * kPi);
      const double r = std::sqrt(rng.uniform());
      if (pick_weighted(w, rng) == 0) return {r * std::cos(t), r * std::sin(t), a - 2.0 * a * r};
      return {r * std::cos(t), r * std::sin(t), -a};
    }
    case Family::torus: {
      const double big = 1.0;
      const double tube = 0.8 * b;
      for (;;) {
        const double u = rng.uniform(0.0, 2.0 * kPi);
        const double v = rng.uniform(0.0, 2.0 * kPi);
        // Rejection step makes the density uniform in surface area.
        if (rng.uniform() * (big + tube) <= big + tube * std::cos(v)) {
          const double rr = big + tube * std::cos(v);
          return {rr * std::cos(u), rr * std::sin(u), a * tube * std::sin(v)};
        }
      }
    }
    case Family::pyramid: {
      // Square base of half side 1 at -a, apex lifted to +a; detail shrinks
      // the top into a frustum.
      const double top = 0.3 * b;
      const Vec3 b0{-1, -1, -a}, b1{1, -1, -a}, b2{1, 1, -a}, b3{-1, 1, -a};
      const Vec3 t0{-top, -top, a}, t1{top, -top, a}, t2{top, top, a}, t3{-top, top, a};
      const std::array<std::array<Vec3, 3>, 10> tris{{{b0, b1, b2}, {b0, b2, b3},
                                                      {b0, b1, t1}, {b0, t1, t0},
                                                      {b1, b2, t2}, {b1, t2, t1},
                                                      {b2, b3, t3}, {b2, t3, t2},
                                                      {b3, b0, t0}, {b3, t0, t3}}};
      std::array<double, 10> areas{};
      for (std::size_t i = 0; i < tris.size(); ++i) areas[i] = triangle_area(tris[i][0], tris[i][1], tris[i][2]);
      return sample_triangles(tris, areas, rng);
    }
    case Family::cross_planes: {
      const double width = 0.4 + b;
      const double w[2] = {2.0, 2.0 * width};
      const double z = rng.uniform(-a, a);
      if (pick_weighted(w, rng) == 0) return {0.0, rng.uniform(-1.0, 1.0), z};
      return {rng.uniform(-width, width), 0.0, z};
    }
    case Family::helix: {
      const double turns = 1.5 + 3.0 * b;
      const double t = rng.uniform(0.0, 2.0 * kPi * turns);
      const double rho = 0.08 * std::sqrt(rng.uniform());
      const double phi = rng.uniform(0.0, 2.0 * kPi);
      const double radial = 1.0 + rho * std::cos(phi);
      const double z = a * (t / (kPi * turns) - 1.0) + rho * std::sin(phi);
      return {radial * std::cos(t), radial * std::sin(t), z};
    }
  }
  return {0, 0, 0};
}

std::uint64_t name_tag(const std::string& name) {
  io::Fnv1a h;
  h.update(name);
  return h.digest();
}

std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

}  // namespace

const std::vector<std::string>& family_names() {
  static const std::vector<std::string> names{"sphere", "cube",    "cylinder",     "cone",
                                              "torus",  "pyramid", "cross-planes", "helix"};
  return names;
}

Family parse_family(const std::string& name) {
  const auto& names = family_names();
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw geom::ArgumentError("unknown shape family '" + name + "'");
  return static_cast<Family>(it - names.begin());
}

std::string to_string(Family f) { return family_names()[static_cast<std::size_t>(f)]; }

geom::PointCloud generate_shape(const ShapeSpec& spec, Rng& rng) {
  if (spec.points < kMinPoints) {
    throw geom::ArgumentError("shape needs at least " + std::to_string(kMinPoints) + " points");
  }
  geom::PointCloud pc;
  pc.points.reserve(spec.points);
  const double c = std::cos(spec.rotation);
  const double s = std::sin(spec.rotation);
  double max_norm = 0.0;
  for (std::size_t i = 0; i < spec.points; ++i) {
    Vec3 p = sample_point(spec, rng);
    p = {c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]};
    max_norm = std::max(max_norm, std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]));
    pc.points.push_back(p);
  }
  for (auto& p : pc.points)
    for (auto& x : p) x /= max_norm;
  pc.category_name = to_string(spec.family);
  return pc;
}

ShapeSpec draw_spec(Family f, const ShapeRanges& ranges, std::size_t points, Rng& rng) {
  ShapeSpec s;
  s.family = f;
  s.aspect = rng.uniform(ranges.aspect.lo, ranges.aspect.hi);
  s.detail = rng.uniform(ranges.detail.lo, ranges.detail.hi);
  s.rotation = rng.uniform(0.0, 2.0 * kPi);
  s.points = points;
  return s;
}

geom::PointCloud corrupt(const geom::PointCloud& pc, const CorruptionProfile& profile, Rng& rng) {
  if (profile.occlusion_fraction < 0.0 || profile.occlusion_fraction > 0.5) {
    throw geom::ArgumentError("occlusion fraction must lie in [0, 0.5]");
  }
  if (profile.jitter_sigma < 0.0) throw geom::ArgumentError("jitter sigma must be non-negative");
  const std::size_t target = pc.points.size();
  std::vector<Vec3> pts = pc.points;

  if (profile.occlusion_fraction > 0.0) {
    Vec3 dir{rng.normal(), rng.normal(), rng.normal()};
    const double n = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
    for (auto& x : dir) x /= n;
    const auto drop = static_cast<std::size_t>(std::floor(profile.occlusion_fraction * static_cast<double>(pts.size()) + 0.5));
    std::vector<std::size_t> order(pts.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    auto proj = [&](std::size_t i) { return pts[i][0] * dir[0] + pts[i][1] * dir[1] + pts[i][2] * dir[2]; };
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return proj(a) > proj(b); });
    std::vector<bool> removed(pts.size(), false);
    for (std::size_t i = 0; i < drop; ++i) removed[order[i]] = true;
    std::vector<Vec3> kept;
    for (std::size_t i = 0; i < pts.size(); ++i)
      if (!removed[i]) kept.push_back(pts[i]);
    pts = std::move(kept);
  }
  if (pts.size() < kMinPoints) {
    throw geom::ArgumentError("corruption leaves " + std::to_string(pts.size()) + " points, fewer than " +
                              std::to_string(kMinPoints));
  }
  if (profile.jitter_sigma > 0.0) {
    for (auto& p : pts)
      for (auto& x : p) x += profile.jitter_sigma * rng.normal();
  }
  for (std::size_t i = 0; i < profile.clutter_count; ++i) {
    pts.push_back({rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)});
  }

  geom::PointCloud out;
  out.label = pc.label;
  out.category_name = pc.category_name;
  if (pts.size() > target) {
    auto idx = rng.sample_without_replacement(pts.size(), target);
    std::sort(idx.begin(), idx.end());
    for (auto i : idx) out.points.push_back(pts[i]);
  } else {
    out.points = pts;
    const std::size_t have = pts.size();
    while (out.points.size() < target) out.points.push_back(pts[rng.index(have)]);
  }
  return out;
}

DatasetSpec preset(const std::string& name, std::uint64_t seed) {
  DatasetSpec s;
  s.name = name;
  s.seed = seed;
  if (name == "desk8" || name == "cross-source") {
    return s;
  }
  if (name == "pretrain") {
    // Disjoint from every tuning range below.
    s.ranges = {{0.5, 0.74}, {0.15, 0.34}};
    s.train_per_class = 40;
    s.test_per_class = 20;
    return s;
  }
  if (name == "cross-narrow") {
    s.ranges = {{0.95, 1.1}, {0.45, 0.55}};
    s.train_per_class = 10;
    return s;
  }
  if (name == "cross-light") {
    s.ranges = {{1.31, 1.5}, {0.66, 0.8}};
    s.profile = {0.01, 0.1, 8};
    s.train_per_class = 10;
    return s;
  }
  if (name == "cross-heavy") {
    s.ranges = {{1.31, 1.5}, {0.66, 0.8}};
    s.profile = {0.03, 0.3, 32};
    s.train_per_class = 10;
    return s;
  }
  throw geom::ArgumentError("unknown dataset preset '" + name + "'");
}

std::vector<std::string> preset_names() {
  return {"desk8", "pretrain", "cross-source", "cross-narrow", "cross-light", "cross-heavy"};
}

std::vector<std::string> Manifest::categories() const {
  std::map<std::size_t, std::string> by_label;
  for (const auto& e : entries) by_label.emplace(e.label, e.category_name);
  std::vector<std::string> out;
  for (auto& [l, n] : by_label) out.push_back(n);
  return out;
}

std::vector<geom::PointCloud> generate_split(const DatasetSpec& spec, Split split) {
  const std::size_t per = split == Split::train ? spec.train_per_class : spec.test_per_class;
  const std::uint64_t base = derive_seed(spec.seed, name_tag(spec.name));
  std::vector<geom::PointCloud> out;
  out.reserve(per * spec.categories.size());
  for (std::size_t c = 0; c < spec.categories.size(); ++c) {
    const Family f = parse_family(spec.categories[c]);
    for (std::size_t i = 0; i < per; ++i) {
      Rng rng(derive_seed(base, split == Split::train ? 1 : 2, c, i));
      geom::PointCloud pc = generate_shape(draw_spec(f, spec.ranges, spec.points, rng), rng);
      if (!spec.profile.is_zero()) pc = corrupt(pc, spec.profile, rng);
      // Stored as float32; rounding here keeps in-memory and on-disk copies identical.
      for (auto& p : pc.points)
        for (auto& x : p) x = static_cast<double>(static_cast<float>(x));
      pc.label = static_cast<int>(c);
      pc.category_name = spec.categories[c];
      out.push_back(std::move(pc));
    }
  }
  return out;
}

std::string describe(const DatasetSpec& spec) {
  std::ostringstream ss;
  ss << "name = " << spec.name << '\n'
     << "seed = " << spec.seed << '\n'
     << "points = " << spec.points << '\n'
     << "train_per_class = " << spec.train_per_class << '\n'
     << "test_per_class = " << spec.test_per_class << '\n'
     << "aspect_range = " << fmt(spec.ranges.aspect.lo) << ' ' << fmt(spec.ranges.aspect.hi) << '\n'
     << "detail_range = " << fmt(spec.ranges.detail.lo) << ' ' << fmt(spec.ranges.detail.hi) << '\n'
     << "jitter_sigma = " << fmt(spec.profile.jitter_sigma) << '\n'
     << "occlusion_fraction = " << fmt(spec.profile.occlusion_fraction) << '\n'
     << "clutter_count = " << spec.profile.clutter_count << '\n'
     << "corrupted = " << (spec.profile.is_zero() ? "false" : "true") << '\n';
  return ss.str();
}

std::filesystem::path generate_dataset(const DatasetSpec& spec, const std::filesystem::path& out) {
  const std::filesystem::path root = out / spec.name;
  for (Split split : {Split::train, Split::test}) {
    const std::string sname = split == Split::train ? "train" : "test";
    const auto clouds = generate_split(spec, split);
    std::vector<Entry> entries;
    std::map<std::size_t, std::size_t> counter;
    for (const auto& pc : clouds) {
      const std::size_t i = counter[static_cast<std::size_t>(*pc.label)]++;
      char buf[32];
      std::snprintf(buf, sizeof buf, "_%04zu.p3pc", i);
      Entry e{sname + "/" + pc.category_name + buf, static_cast<std::size_t>(*pc.label), pc.category_name};
      write_point_cloud(root / e.path, pc);
      entries.push_back(std::move(e));
    }
    write_manifest(root / (sname + ".csv"), entries);
  }
  io::write_file_atomic(root / "meta.txt", describe(spec));
  return root;
}

void write_point_cloud(const std::filesystem::path& path, const geom::PointCloud& pc) {
  io::Writer w;
  w.bytes(std::string_view(kMagic, 4));
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(pc.points.size()));
  w.u32(static_cast<std::uint32_t>(pc.label.value_or(0)));
  for (const auto& p : pc.points)
    for (double x : p) w.f32(static_cast<float>(x));
  io::write_file_atomic(path, w.buffer());
}

geom::PointCloud read_point_cloud(const std::filesystem::path& path) {
  io::Reader r(io::read_file(path));
  if (r.bytes(4) != std::string_view(kMagic, 4)) throw io::FormatError(path.string() + ": not a P3PC file");
  const std::uint32_t version = r.u32();
  if (version != kVersion) throw io::FormatError(path.string() + ": unsupported P3PC version " + std::to_string(version));
  const std::uint32_t n = r.u32();
  geom::PointCloud pc;
  pc.label = static_cast<int>(r.u32());
  pc.points.resize(n);
  for (auto& p : pc.points)
    for (auto& x : p) x = static_cast<double>(r.f32());
  if (!r.at_end()) throw io::FormatError(path.string() + ": trailing bytes");
  return pc;
}

void write_manifest(const std::filesystem::path& path, std::span<const Entry> entries) {
  std::string out = std::string(kHeader) + "\n";
  for (const auto& e : entries) {
    if (e.path.find(',') != std::string::npos || e.category_name.find(',') != std::string::npos) {
      throw geom::ArgumentError("manifest fields may not contain commas: " + e.path);
    }
    out += e.path + "," + std::to_string(e.label) + "," + e.category_name + "\n";
  }
  io::write_file_atomic(path, out);
}

Manifest read_manifest(const std::filesystem::path& path) {
  const std::string text = io::read_file(path);
  std::istringstream in(text);
  std::string line;
  Manifest m;
  m.dir = path.parent_path();
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1) {
      if (line != kHeader) throw io::FormatError(path.string() + ":1: expected header '" + kHeader + "'");
      continue;
    }
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = c1 == std::string::npos ? std::string::npos : line.find(',', c1 + 1);
    if (c2 == std::string::npos || line.find(',', c2 + 1) != std::string::npos) {
      throw io::FormatError(path.string() + ":" + std::to_string(lineno) + ": expected three fields");
    }
    Entry e;
    e.path = line.substr(0, c1);
    const std::string label = line.substr(c1 + 1, c2 - c1 - 1);
    e.category_name = line.substr(c2 + 1);
    try {
      std::size_t used = 0;
      e.label = std::stoul(label, &used);
      if (used != label.size()) throw std::invalid_argument(label);
    } catch (const std::exception&) {
      throw io::FormatError(path.string() + ":" + std::to_string(lineno) + ": bad label '" + label + "'");
    }
    m.entries.push_back(std::move(e));
  }
  if (lineno == 0) throw io::FormatError(path.string() + ": empty manifest");
  std::map<std::size_t, std::string> names;
  for (const auto& e : m.entries) {
    auto [it, fresh] = names.emplace(e.label, e.category_name);
    if (!fresh && it->second != e.category_name) {
      throw io::FormatError(path.string() + ": label " + std::to_string(e.label) + " maps to two categories");
    }
  }
  std::size_t expect = 0;
  for (auto& [label, name] : names) {
    if (label != expect++) throw io::FormatError(path.string() + ": labels are not dense from 0");
  }
  return m;
}

std::vector<geom::PointCloud> load_clouds(const Manifest& m) {
  std::vector<geom::PointCloud> out;
  out.reserve(m.entries.size());
  for (const auto& e : m.entries) {
    geom::PointCloud pc = read_point_cloud(m.resolve(e));
    if (pc.label != static_cast<int>(e.label)) {
      throw io::FormatError(e.path + ": label in file disagrees with manifest");
    }
    pc.category_name = e.category_name;
    out.push_back(std::move(pc));
  }
  return out;
}

Manifest few_shot_sample(const Manifest& m, std::size_t shots, std::uint64_t seed) {
  std::map<std::size_t, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < m.entries.size(); ++i) by_label[m.entries[i].label].push_back(i);
  std::vector<std::size_t> keep;
  for (auto& [label, rows] : by_label) {
    if (rows.size() < shots) {
      throw geom::ArgumentError("few-shot: category '" + m.entries[rows[0]].category_name + "' has " +
                                std::to_string(rows.size()) + " samples, " + std::to_string(shots) + " requested");
    }
    Rng rng(derive_seed(seed, 0x73686f7473ULL, label));
    for (auto j : rng.sample_without_replacement(rows.size(), shots)) keep.push_back(rows[j]);
  }
  std::sort(keep.begin(), keep.end());
  Manifest out;
  out.dir = m.dir;
  for (auto i : keep) out.entries.push_back(m.entries[i]);
  return out;
}

double nn_distance_variance(std::span<const geom::PointCloud> clouds) {
  if (clouds.empty()) return 0.0;
  double total = 0.0;
  for (const auto& pc : clouds) {
    const auto& p = pc.points;
    std::vector<double> nn(p.size(), std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < p.size(); ++i)
      for (std::size_t j = 0; j < p.size(); ++j)
        if (i != j) nn[i] = std::min(nn[i], geom::squared_distance(p[i], p[j]));
    double mean = 0.0;
    for (auto& d : nn) {
      d = std::sqrt(d);
      mean += d;
    }
    mean /= static_cast<double>(nn.size());
    double var = 0.0;
    for (double d : nn) var += (d - mean) * (d - mean);
    total += var / static_cast<double>(nn.size());
  }
  return total / static_cast<double>(clouds.size());
}

}  // namespace p3t::data
