#pragma once

// Parametric synthetic point-cloud benchmarks with optional scan-like
// corruption, their on-disk format, and few-shot subsampling.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "p3t/geom.hpp"
#include "p3t/random.hpp"

namespace p3t::data {

enum class Family { sphere, cube, cylinder, cone, torus, pyramid, cross_planes, helix };

constexpr std::size_t kNumFamilies = 8;
constexpr std::size_t kMinPoints = 32;

const std::vector<std::string>& family_names();
Family parse_family(const std::string& name);
std::string to_string(Family f);

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  bool contains(double v) const { return v >= lo && v <= hi; }
};

// aspect stretches the shape along z; detail is the family's secondary
// parameter (torus tube, helix turns, cone/pyramid taper, plane width).
struct ShapeRanges {
  Range aspect{0.75, 1.3};
  Range detail{0.35, 0.65};
};

struct ShapeSpec {
  Family family = Family::sphere;
  double aspect = 1.0;
  double detail = 0.5;
  double rotation = 0.0;  // about z, radians
  std::size_t points = 256;
};

// Surface samples centered at the origin and scaled to unit max norm.
geom::PointCloud generate_shape(const ShapeSpec& spec, Rng& rng);

ShapeSpec draw_spec(Family f, const ShapeRanges& ranges, std::size_t points, Rng& rng);

struct CorruptionProfile {
  double jitter_sigma = 0.0;
  double occlusion_fraction = 0.0;
  std::size_t clutter_count = 0;

  bool is_zero() const { return jitter_sigma == 0.0 && occlusion_fraction == 0.0 && clutter_count == 0; }
};

// Half-space cap removal, jitter, uniform clutter in [-1,1]^3, then
// resampling back to the input size.
geom::PointCloud corrupt(const geom::PointCloud& pc, const CorruptionProfile& profile, Rng& rng);

struct DatasetSpec {
  std::string name = "desk8";
  std::vector<std::string> categories = family_names();
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 50;
  std::size_t points = 256;
  ShapeRanges ranges;
  CorruptionProfile profile;
  std::uint64_t seed = 0;
};

// Named presets: desk8, pretrain, cross-source, cross-narrow, cross-light,
// cross-heavy.
DatasetSpec preset(const std::string& name, std::uint64_t seed);
std::vector<std::string> preset_names();

enum class Split { train, test };

struct Entry {
  std::string path;  // relative to the manifest directory
  std::size_t label = 0;
  std::string category_name;
};

struct Manifest {
  std::filesystem::path dir;
  std::vector<Entry> entries;

  std::vector<std::string> categories() const;  // indexed by label
  std::filesystem::path resolve(const Entry& e) const { return dir / e.path; }
};

// In-memory generation; per-sample seeds are derived from (seed, split,
// class, index) so any subset can be regenerated independently.
std::vector<geom::PointCloud> generate_split(const DatasetSpec& spec, Split split);

// Writes <out>/<name>/{train,test}.csv, meta.txt and P3PC files.
std::filesystem::path generate_dataset(const DatasetSpec& spec, const std::filesystem::path& out);

void write_point_cloud(const std::filesystem::path& path, const geom::PointCloud& pc);
geom::PointCloud read_point_cloud(const std::filesystem::path& path);

void write_manifest(const std::filesystem::path& path, std::span<const Entry> entries);
Manifest read_manifest(const std::filesystem::path& path);
std::vector<geom::PointCloud> load_clouds(const Manifest& m);

std::string describe(const DatasetSpec& spec);

// `shots` entries per category, uniform without replacement, kept in
// manifest order.
Manifest few_shot_sample(const Manifest& m, std::size_t shots, std::uint64_t seed);

// Mean over clouds of the variance of nearest-neighbour distances.
double nn_distance_variance(std::span<const geom::PointCloud> clouds);

}  // namespace p3t::data
