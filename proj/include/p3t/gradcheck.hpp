#pragma once

// Finite-difference verification of every training objective on a tiny,
// fully deterministic instance.

#include <cstdint>
#include <string>
#include <vector>

#include "p3t/diffcore.hpp"

namespace p3t::train {

struct MicroInstanceOptions {
  std::size_t patches = 8;
  std::size_t patch_points = 4;
  std::size_t width = 16;
  std::size_t categories = 3;
  std::uint64_t seed = 0;
  double h = 1e-4;
  // Elements checked per parameter tensor; 0 checks all of them.
  std::size_t max_per_param = 0;
};

struct TermReport {
  std::string term;  // ce, proto, reg, con, total
  double value = 0.0;
  ad::GradCheckReport report;
};

std::vector<TermReport> micro_gradient_check(const MicroInstanceOptions& opts = {});

}  // namespace p3t::train
