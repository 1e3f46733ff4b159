#pragma once

// Learnable context vectors shared by every category, and the cached
// handcrafted-template embeddings they are kept close to.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "p3t/encoders.hpp"
#include "p3t/nn.hpp"

namespace p3t::text {

using ad::Tensor;

class ContextVectors {
 public:
  // Rows start from the template token embeddings (cycled when M exceeds
  // the template length) plus N(0, noise²) jitter.
  ContextVectors(const enc::FrozenModel& model, std::size_t m, double noise, std::uint64_t seed);

  std::size_t length() const { return v_.rows(); }
  const Tensor& matrix() const { return v_; }
  nn::ParamStore& store() { return store_; }
  const nn::ParamStore& store() const { return store_; }

 private:
  nn::ParamStore store_;
  Tensor v_;  // (M × d_t)
};

// [SOS; V; t_c; EOS]. Throws geom::ArgumentError for an unknown category.
std::vector<enc::TextEntry> build_prompted(const enc::FrozenModel& model, const std::string& category,
                                           const Tensor& context);

// w̃_c for each named category, stacked to (C × d_s).
Tensor prompted_embeddings(const enc::FrozenModel& model, std::span<const std::string> categories,
                           const Tensor& context);

// Write-once cache of w_c for the handcrafted template.
class HandcraftedCache {
 public:
  HandcraftedCache(const enc::FrozenModel& model, std::span<const std::string> categories);

  const Tensor& embeddings() const { return w_; }  // (C × d_s), constant
  const std::vector<std::string>& categories() const { return categories_; }

 private:
  std::vector<std::string> categories_;
  Tensor w_;
};

}  // namespace p3t::text
