#pragma once

// Small deterministic models and clouds shared across test binaries.

#include <string>
#include <vector>

#include "p3t/encoders.hpp"
#include "p3t/point_prompter.hpp"
#include "p3t/synthdata.hpp"

namespace fixture {

using namespace p3t;

inline std::vector<std::string> categories(std::size_t c) {
  const auto& all = data::family_names();
  return {all.begin(), all.begin() + static_cast<std::ptrdiff_t>(c)};
}

inline enc::FrozenModel micro_model(std::size_t width = 16, std::size_t c = 3, std::uint64_t seed = 7) {
  enc::FrozenModel m(enc::micro_config(width, categories(c)), seed);
  m.freeze();
  return m;
}

inline geom::PointCloud cloud(data::Family f, std::size_t points, std::uint64_t seed) {
  Rng rng(seed);
  return data::generate_shape(data::draw_spec(f, {}, points, rng), rng);
}

inline prompt::PrompterConfig micro_prompter(std::size_t width, std::size_t k) {
  prompt::PrompterConfig pc;
  pc.feature_dim = width;
  pc.offset_dim = width;
  pc.offset_hidden = width;
  pc.patch_points = k;
  pc.graph_k = 3;
  pc.refine_m = 3;
  pc.transformer_heads = 2;
  return pc;
}

}  // namespace fixture
