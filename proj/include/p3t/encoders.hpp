#pragma once

// The frozen dual encoder: a patch embedder and transformer for point
// clouds, and a small transformer text encoder over a closed vocabulary,
// both projecting into a shared embedding space.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "p3t/diffcore.hpp"
#include "p3t/geom.hpp"
#include "p3t/nn.hpp"

namespace p3t::enc {

using ad::Tensor;

struct ModelConfig {
  std::size_t width = 64;        // 3D encoder width d
  std::size_t text_width = 64;   // text encoder width d_t
  std::size_t shared_dim = 32;   // shared embedding dim d_s
  std::size_t blocks = 3;
  std::size_t heads = 4;
  std::size_t text_blocks = 2;
  std::size_t text_heads = 4;
  std::size_t mlp_width = 128;
  std::size_t text_mlp_width = 128;
  std::size_t point_hidden = 32;
  std::size_t template_len = 4;  // reserved context slots holding the handcrafted template
  std::size_t max_text_len = 16;
  double tau = 0.07;
  std::vector<std::string> categories;
};

// Micro configuration used by gradient checks and oracle tests.
ModelConfig micro_config(std::size_t width, std::vector<std::string> categories);

enum class Source { unprompted, prompted };

struct Embedding3D {
  Tensor vector;  // (1 × d_s)
  Source source = Source::unprompted;
};

struct TextEmbedding {
  Tensor vector;  // (1 × d_s)
  std::size_t category = 0;
  bool prompted = false;
};

struct Encoded3D {
  Embedding3D embedding;
  Tensor patch_features;  // (n × d), final-layer states of the patch positions
};

// A text sequence entry: a vocabulary id or a block of raw token vectors.
using TextEntry = std::variant<std::size_t, Tensor>;

class FrozenModel {
 public:
  static constexpr std::size_t kSos = 0;
  static constexpr std::size_t kEos = 1;

  FrozenModel(ModelConfig cfg, std::uint64_t seed, bool trainable = false);
  FrozenModel(const FrozenModel&) = delete;
  FrozenModel& operator=(const FrozenModel&) = delete;
  FrozenModel(FrozenModel&&) = default;
  FrozenModel& operator=(FrozenModel&&) = default;

  const ModelConfig& config() const { return cfg_; }
  double tau() const { return cfg_.tau; }

  std::size_t vocab_size() const { return 2 + cfg_.template_len + cfg_.categories.size(); }
  std::size_t template_token(std::size_t i) const { return 2 + i; }
  // Throws geom::ArgumentError for a name outside the vocabulary.
  std::size_t category_token(const std::string& name) const;
  bool has_category(const std::string& name) const;

  Tensor embed_patches(const geom::PatchSet& ps) const;
  // Differentiable patch embedding from absolute points (m·k × 3) and
  // centers (m × 3).
  Tensor embed_patch_points(const Tensor& points, const Tensor& centers, std::size_t k) const;

  // Runs [class; prompt?; patch tokens] through the 3D encoder.
  Encoded3D encode_3d(const Tensor& patch_tokens, const Tensor* prompt_token = nullptr) const;

  TextEmbedding encode_text(const std::vector<TextEntry>& sequence) const;
  std::vector<TextEntry> handcrafted_sequence(const std::string& category) const;
  // Rows of the token embedding table (constant).
  Tensor token_rows(std::span<const std::size_t> ids) const;

  void freeze() { store_.freeze(); }
  bool frozen() const { return store_.trainable_count() == 0; }
  std::uint64_t weights_hash() const;

  nn::ParamStore& store() { return store_; }
  const nn::ParamStore& store() const { return store_; }

  void save(const std::filesystem::path& path) const;
  // Rejects a file whose stored hash does not match its weights.
  static FrozenModel load(const std::filesystem::path& path);

 private:
  ModelConfig cfg_;
  nn::ParamStore store_;
  nn::Mlp point_mlp_;
  nn::Mlp pos_mlp_;
  Tensor cls_token_;
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm final_ln_;
  nn::Linear proj_;
  Tensor token_table_;
  Tensor text_pos_;
  std::vector<nn::TransformerBlock> text_blocks_;
  nn::LayerNorm text_ln_;
  nn::Linear text_proj_;
};

struct PretrainOptions {
  std::size_t epochs = 4;
  std::size_t batch_size = 16;
  double learning_rate = 2e-3;
  std::size_t patches = 16;
  std::size_t patch_points = 16;
  std::uint64_t seed = 0;
  bool verbose = false;
};

// Briefly aligns a freshly initialised dual encoder with a symmetric
// contrastive loss between cloud embeddings and category template
// embeddings, then freezes it.
FrozenModel pretrain_align(const ModelConfig& cfg, std::span<const geom::PointCloud> clouds,
                           const PretrainOptions& opts);

// Cosine-similarity logits divided by tau: (1 × d_s) against (C × d_s).
Tensor similarity_logits(const Tensor& embedding, const Tensor& text, double tau);

}  // namespace p3t::enc
