#pragma once

// Instance-aware point prompts: pick weakly represented patches, learn
// per-point and per-center offsets for them, and summarise the offset
// features into an extra prompt token.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "p3t/diffcore.hpp"
#include "p3t/encoders.hpp"
#include "p3t/geom.hpp"
#include "p3t/nn.hpp"
#include "p3t/random.hpp"

namespace p3t::prompt {

using ad::Tensor;

enum class Strategy { vulnerable, critical, random };
enum class EncoderArch { edgeconv1, edgeconv3, transformer1 };
enum class OffsetArch { mlp1, edgeconv1, edgeconv3 };

std::string to_string(Strategy s);
std::string to_string(EncoderArch a);
std::string to_string(OffsetArch a);
// Throw geom::ArgumentError on an unknown name.
Strategy parse_strategy(const std::string& s);
EncoderArch parse_encoder_arch(const std::string& s);
OffsetArch parse_offset_arch(const std::string& s);

struct ImportanceScores {
  std::vector<std::size_t> scores;  // one per patch
  std::size_t feature_dim = 0;
};

struct TargetSelection {
  std::vector<std::size_t> indices;
  double alpha = 0.5;
  Strategy strategy = Strategy::vulnerable;
};

// Counts, for every patch row, how many feature columns it wins under a
// column-wise argmax (ties to the lowest row).
ImportanceScores importance_scores(const Tensor& features);

// round-half-up(alpha * n); throws geom::ArgumentError when alpha is outside
// (0, 1] or the count rounds to zero.
std::size_t target_count(double alpha, std::size_t n);

TargetSelection select_targets(const ImportanceScores& s, double alpha, Strategy strategy, Rng& rng);

// DGCNN edge convolution over a feature-space kNN graph rebuilt from the
// input: out_i = max_j act(W [x_i ; x_j - x_i] + b).
struct EdgeConv {
  nn::Linear lin;
  std::size_t graph_k = 4;

  Tensor operator()(const Tensor& x) const;
  static EdgeConv make(nn::ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                       std::size_t graph_k, Rng& rng);
};

struct PrompterConfig {
  std::size_t feature_dim = 64;  // d, width of f_P and of encoder tokens
  std::size_t offset_dim = 64;   // d_o
  std::size_t patch_points = 16; // k
  std::size_t graph_k = 4;
  std::size_t refine_m = 4;
  std::size_t offset_hidden = 64;
  EncoderArch encoder = EncoderArch::edgeconv3;
  OffsetArch offset = OffsetArch::edgeconv1;
  std::size_t transformer_heads = 4;
  // Scale of the offset heads' final layers; 0 gives the identity start.
  double head_init = 0.0;
};

struct PromptOutput {
  Tensor offset_tokens;   // O, (l × d_o)
  Tensor offsets;         // δ, (l·k × 3), patch-major
  Tensor center_offsets;  // (l × 3)
  Tensor prompt_token;    // x_0, (1 × d)
};

class PointPrompter {
 public:
  PointPrompter(const PrompterConfig& cfg, std::uint64_t seed);
  PointPrompter(const PointPrompter&) = delete;
  PointPrompter& operator=(const PointPrompter&) = delete;
  PointPrompter(PointPrompter&&) = default;
  PointPrompter& operator=(PointPrompter&&) = default;

  const PrompterConfig& config() const { return cfg_; }

  // f_o = h_e(f_P), (n × d_o).
  Tensor encode(const Tensor& features) const;
  // Element-wise max of f_o over each target's refine_m nearest patch
  // centers, self included.
  Tensor refine(const Tensor& offset_features, std::span<const std::size_t> targets,
                std::span<const geom::Vec3> centers) const;
  PromptOutput generate(const Tensor& refined, const Tensor& offset_features) const;
  Tensor prompt_token(const Tensor& offset_features) const;

  // encode → refine → generate, with the prompt token filled in.
  PromptOutput run(const Tensor& features, std::span<const std::size_t> targets,
                   std::span<const geom::Vec3> centers) const;

  nn::ParamStore& store() { return store_; }
  const nn::ParamStore& store() const { return store_; }

 private:
  PrompterConfig cfg_;
  nn::ParamStore store_;
  std::vector<EdgeConv> enc_layers_;
  std::vector<nn::TransformerBlock> enc_blocks_;
  nn::Linear enc_out_;
  std::vector<EdgeConv> off_layers_;
  nn::Linear off_mlp1_;
  nn::Mlp offset_mlp_;
  nn::Linear center_mlp_;
  nn::Linear token_proj_;  // only when d_o != d
};

// Target patches and deformed copies as tensors (rows patch-major).
struct PromptedPatches {
  Tensor points;   // ((n + l)·k × 3)
  Tensor centers;  // ((n + l) × 3)
  std::size_t n = 0;
  std::size_t l = 0;
  std::size_t k = 0;
};

Tensor patch_points_tensor(const geom::PatchSet& ps, std::span<const std::size_t> patches);
Tensor patch_centers_tensor(const geom::PatchSet& ps, std::span<const std::size_t> patches);

// [P ; P' + δ] with deformed centers appended after the originals.
PromptedPatches assemble_prompted(const geom::PatchSet& ps, const PromptOutput& out,
                                  std::span<const std::size_t> targets);

// Everything the frozen encoder contributes for one cloud; computed once.
struct FrozenFeatures {
  geom::PatchSet patches;
  geom::Thresholds thresholds;
  Tensor features;      // f_P, (n × d)
  Tensor tokens;        // X, (n × d)
  Tensor embedding;     // unprompted z, (1 × d_s)
  ImportanceScores scores;
};

FrozenFeatures extract_features(const geom::PointCloud& pc, const enc::FrozenModel& model, std::size_t n,
                                std::size_t k);

struct PromptedResult {
  Tensor embedding;         // z̃, (1 × d_s)
  Tensor deformed_points;   // (l·k × 3)
  Tensor deformed_centers;  // (l × 3)
  PromptOutput output;
};

// z̃ = E_P[x_cls; x_0; X; X̃'] where X̃' embeds the deformed targets at their
// deformed centers.
PromptedResult prompted_forward(const FrozenFeatures& ff, const enc::FrozenModel& model,
                                const PointPrompter& prompter, std::span<const std::size_t> targets);

// Convenience wrapper running the whole pipeline from a raw cloud.
PromptedResult prompted_forward(const geom::PointCloud& pc, const enc::FrozenModel& model,
                                const PointPrompter& prompter, std::size_t n, std::size_t k, double alpha,
                                Strategy strategy, Rng& rng);

}  // namespace p3t::prompt
