#pragma once

// Classification, prototype, geometric and consistency objectives and
// their weighted combination.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "p3t/diffcore.hpp"
#include "p3t/geom.hpp"

namespace p3t::loss {

using ad::Tensor;

constexpr double kProbFloor = 1e-12;
constexpr double kSoftMaxSharpness = 50.0;

// softmax(cos(z, w_c) / tau) over the rows of `text`; (1 × C).
Tensor prediction_probs(const Tensor& embedding, const Tensor& text, double tau);

// -log p[label], with p clamped below at 1e-12 (a warning is printed once).
Tensor ce_loss(const Tensor& probs, std::size_t label);
// Same quantity from logits through log-softmax.
Tensor ce_from_logits(const Tensor& logits, std::size_t label);

struct PrototypeBank {
  Tensor prototypes;  // (C × d_s), constant
  std::vector<std::size_t> counts;

  std::uint64_t hash() const;
};

// Per-category mean of the given unprompted embeddings (each 1 × d_s).
// Throws geom::ArgumentError naming any category without samples.
PrototypeBank compute_prototypes(std::span<const Tensor> embeddings, std::span<const std::size_t> labels,
                                 std::span<const std::string> category_names);

Tensor proto_loss(const Tensor& embedding, const PrototypeBank& bank, std::size_t label);

// Per-patch size and location terms for l patches of k points.
struct PatchTerms {
  Tensor diameters;  // (l × 1)
  Tensor offsets;    // (l × 1), distance of each patch centroid to the cloud centroid
};

// log-sum-exp softened diameter: (1/s)·log Σ_ij exp(s·‖p_i − p_j‖).
Tensor soft_diameter(const Tensor& patch_points, double sharpness = kSoftMaxSharpness);
PatchTerms patch_terms(const Tensor& points, std::size_t k, const geom::Vec3& cloud_centroid);

// Thresholds for the differentiable objective, computed on the original
// patches through the same soft diameter so an undeformed patch sits
// exactly on them.
struct SoftThresholds {
  double H = 0.0;
  double G = 0.0;
  geom::Vec3 cloud_centroid{};
};
SoftThresholds soft_thresholds(const geom::PatchSet& ps, const geom::Vec3& cloud_centroid);

// mean_i [max(D_i - G, 0) + max(‖μ_i − μ‖ − H, 0)] over the deformed patches.
Tensor reg_loss(const Tensor& deformed_points, std::size_t k, const SoftThresholds& th);

// Same formula with exact diameters and exact thresholds; for reporting.
double reg_violation(std::span<const double> deformed_points, std::size_t k, const geom::Thresholds& th);

// (1/C) Σ_c (1 − cos(w_c, w̃_c)).
Tensor con_loss(const Tensor& handcrafted, const Tensor& prompted);

struct LossWeights {
  double beta = 1.0;
  double gamma = 0.1;
  double lambda = 1.0;
};

struct LossBreakdown {
  double ce = 0.0;
  double proto = 0.0;
  double reg = 0.0;
  double con = 0.0;
  double total = 0.0;
};

struct LossParts {
  Tensor ce;
  Tensor proto;
  Tensor reg;
  Tensor con;
};

// ce + β·proto + γ·reg + λ·con; undefined parts count as zero.
Tensor total_loss(const LossParts& parts, const LossWeights& w);
LossBreakdown breakdown(const LossParts& parts, const LossWeights& w);

}  // namespace p3t::loss
