#include "p3t/point_prompter.hpp"

#include <algorithm>
#include <cmath>

namespace p3t::prompt {

namespace {

constexpr double kLeak = 0.2;

}  // namespace

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::vulnerable: return "vulnerable";
    case Strategy::critical: return "critical";
    case Strategy::random: return "random";
  }
  return "?";
}

std::string to_string(EncoderArch a) {
  switch (a) {
    case EncoderArch::edgeconv1: return "edgeconv1";
    case EncoderArch::edgeconv3: return "edgeconv3";
    case EncoderArch::transformer1: return "transformer1";
  }
  return "?";
}

std::string to_string(OffsetArch a) {
  switch (a) {
    case OffsetArch::mlp1: return "mlp1";
    case OffsetArch::edgeconv1: return "edgeconv1";
    case OffsetArch::edgeconv3: return "edgeconv3";
  }
  return "?";
}

Strategy parse_strategy(const std::string& s) {
  if (s == "vulnerable") return Strategy::vulnerable;
  if (s == "critical") return Strategy::critical;
  if (s == "random") return Strategy::random;
  throw geom::ArgumentError("unknown selection strategy '" + s + "' (vulnerable|critical|random)");
}

EncoderArch parse_encoder_arch(const std::string& s) {
  if (s == "edgeconv1") return EncoderArch::edgeconv1;
  if (s == "edgeconv3") return EncoderArch::edgeconv3;
  if (s == "transformer1") return EncoderArch::transformer1;
  throw geom::ArgumentError("unknown prompt encoder '" + s + "' (edgeconv1|edgeconv3|transformer1)");
}

OffsetArch parse_offset_arch(const std::string& s) {
  if (s == "mlp1") return OffsetArch::mlp1;
  if (s == "edgeconv1") return OffsetArch::edgeconv1;
  if (s == "edgeconv3") return OffsetArch::edgeconv3;
  throw geom::ArgumentError("unknown offset generator '" + s + "' (mlp1|edgeconv1|edgeconv3)");
}

ImportanceScores importance_scores(const Tensor& features) {
  const std::size_t n = features.rows();
  const std::size_t d = features.cols();
  ImportanceScores s;
  s.scores.assign(n, 0);
  s.feature_dim = d;
  const auto v = features.data();
  for (std::size_t j = 0; j < d; ++j) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < n; ++i) {
      if (v[i * d + j] > v[best * d + j]) best = i;
    }
    ++s.scores[best];
  }
  return s;
}

std::size_t target_count(double alpha, std::size_t n) {
  if (!(alpha > 0.0 && alpha <= 1.0)) {
    throw geom::ArgumentError("prompt ratio alpha must lie in (0, 1], got " + std::to_string(alpha));
  }
  const auto l = static_cast<std::size_t>(std::floor(alpha * static_cast<double>(n) + 0.5));
  if (l == 0) {
    throw geom::ArgumentError("prompt ratio " + std::to_string(alpha) + " selects no patches out of " +
                              std::to_string(n));
  }
  return std::min(l, n);
}

TargetSelection select_targets(const ImportanceScores& s, double alpha, Strategy strategy, Rng& rng) {
  const std::size_t n = s.scores.size();
  const std::size_t l = target_count(alpha, n);
  TargetSelection sel;
  sel.alpha = alpha;
  sel.strategy = strategy;
  if (strategy == Strategy::random) {
    sel.indices = rng.sample_without_replacement(n, l);
    return sel;
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  const bool low = strategy == Strategy::vulnerable;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return low ? s.scores[a] < s.scores[b] : s.scores[a] > s.scores[b];
  });
  sel.indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(l));
  return sel;
}

Tensor EdgeConv::operator()(const Tensor& x) const {
  const std::size_t m = x.rows();
  if (graph_k >= m) {
    throw geom::ArgumentError("edgeconv: graph_k = " + std::to_string(graph_k) + " needs more than " +
                              std::to_string(m) + " nodes");
  }
  const auto nbrs = geom::knn_rows(x.data(), m, x.cols(), graph_k);
  std::vector<std::size_t> self(m * graph_k);
  for (std::size_t i = 0; i < self.size(); ++i) self[i] = i / graph_k;
  Tensor xi = ad::gather_rows(x, self);
  Tensor xj = ad::gather_rows(x, nbrs);
  Tensor edges = ad::leaky_relu(lin(ad::concat_cols({xi, ad::sub(xj, xi)})), kLeak);
  return ad::segment_max_rows(edges, graph_k).values;
}

EdgeConv EdgeConv::make(nn::ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                        std::size_t graph_k, Rng& rng) {
  return EdgeConv{nn::Linear::make(store, name, 2 * in, out, rng, true), graph_k};
}

PointPrompter::PointPrompter(const PrompterConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  Rng rng(seed);
  const std::size_t d = cfg_.feature_dim;
  const std::size_t dout = cfg_.offset_dim;
  const std::size_t gk = cfg_.graph_k;
  switch (cfg_.encoder) {
    case EncoderArch::edgeconv1:
    case EncoderArch::edgeconv3: {
      const std::size_t layers = cfg_.encoder == EncoderArch::edgeconv1 ? 1 : 3;
      std::size_t in = d;
      for (std::size_t i = 0; i < layers; ++i) {
        enc_layers_.push_back(EdgeConv::make(store_, "he.edge" + std::to_string(i), in, dout, gk, rng));
        in = dout;
      }
      enc_out_ = nn::Linear::make(store_, "he.out", layers * dout, dout, rng, true);
      break;
    }
    case EncoderArch::transformer1:
      enc_blocks_.push_back(
          nn::TransformerBlock::make(store_, "he.block0", d, cfg_.transformer_heads, 2 * d, rng, true));
      enc_out_ = nn::Linear::make(store_, "he.out", d, dout, rng, true);
      break;
  }
  switch (cfg_.offset) {
    case OffsetArch::mlp1:
      off_mlp1_ = nn::Linear::make(store_, "ho.mlp", dout, dout, rng, true);
      break;
    case OffsetArch::edgeconv1:
    case OffsetArch::edgeconv3: {
      const std::size_t layers = cfg_.offset == OffsetArch::edgeconv1 ? 1 : 3;
      for (std::size_t i = 0; i < layers; ++i) {
        off_layers_.push_back(EdgeConv::make(store_, "ho.edge" + std::to_string(i), dout, dout, gk, rng));
      }
      break;
    }
  }
  const bool zero = cfg_.head_init == 0.0;
  const std::size_t h = cfg_.offset_hidden;
  offset_mlp_.act = nn::Activation::relu;
  offset_mlp_.layers.push_back(nn::Linear::make(store_, "offset_mlp.0", dout, h, rng, true));
  offset_mlp_.layers.push_back(nn::Linear::make(store_, "offset_mlp.1", h, h, rng, true));
  offset_mlp_.layers.push_back(nn::Linear::make(store_, "offset_mlp.2", h, cfg_.patch_points * 3, rng, true,
                                                true, zero, cfg_.head_init));
  center_mlp_ = nn::Linear::make(store_, "center_mlp", dout, 3, rng, true, true, zero, cfg_.head_init);
  if (dout != d) token_proj_ = nn::Linear::make(store_, "token_proj", dout, d, rng, true);
}

Tensor PointPrompter::encode(const Tensor& features) const {
  if (!enc_blocks_.empty()) {
    Tensor h = features;
    for (const auto& b : enc_blocks_) h = b(h);
    return enc_out_(h);
  }
  std::vector<Tensor> skips;
  Tensor h = features;
  for (const auto& layer : enc_layers_) {
    h = layer(h);
    skips.push_back(h);
  }
  return enc_out_(skips.size() == 1 ? skips[0] : ad::concat_cols(skips));
}

Tensor PointPrompter::refine(const Tensor& offset_features, std::span<const std::size_t> targets,
                             std::span<const geom::Vec3> centers) const {
  const std::size_t m = std::min(cfg_.refine_m, centers.size());
  std::vector<std::size_t> rows;
  rows.reserve(targets.size() * m);
  for (auto t : targets) {
    const auto nb = geom::knn_of(centers, t, m, true);
    rows.insert(rows.end(), nb.begin(), nb.end());
  }
  return ad::segment_max_rows(ad::gather_rows(offset_features, rows), m).values;
}

PromptOutput PointPrompter::generate(const Tensor& refined, const Tensor& offset_features) const {
  const std::size_t l = refined.rows();
  Tensor seq = ad::concat_rows({refined, offset_features});
  Tensor h = seq;
  if (off_layers_.empty()) {
    h = ad::leaky_relu(off_mlp1_(h), kLeak);
  } else {
    for (const auto& layer : off_layers_) h = layer(h);
  }
  PromptOutput out;
  out.offset_tokens = ad::slice_rows(h, 0, l);
  out.offsets = ad::reshape(offset_mlp_(out.offset_tokens), {l * cfg_.patch_points, 3});
  out.center_offsets = center_mlp_(out.offset_tokens);
  return out;
}

Tensor PointPrompter::prompt_token(const Tensor& offset_features) const {
  Tensor pooled = ad::max_rows(offset_features).values;
  return token_proj_.weight.defined() ? token_proj_(pooled) : pooled;
}

PromptOutput PointPrompter::run(const Tensor& features, std::span<const std::size_t> targets,
                                std::span<const geom::Vec3> centers) const {
  Tensor fo = encode(features);
  PromptOutput out = generate(refine(fo, targets, centers), fo);
  out.prompt_token = prompt_token(fo);
  return out;
}

Tensor patch_points_tensor(const geom::PatchSet& ps, std::span<const std::size_t> patches) {
  std::vector<double> v;
  v.reserve(patches.size() * ps.k * 3);
  for (auto p : patches) {
    for (const auto& q : ps.patch(p)) v.insert(v.end(), q.begin(), q.end());
  }
  return Tensor::matrix(patches.size() * ps.k, 3, std::move(v));
}

Tensor patch_centers_tensor(const geom::PatchSet& ps, std::span<const std::size_t> patches) {
  std::vector<double> v;
  v.reserve(patches.size() * 3);
  for (auto p : patches) v.insert(v.end(), ps.centers[p].begin(), ps.centers[p].end());
  return Tensor::matrix(patches.size(), 3, std::move(v));
}

PromptedPatches assemble_prompted(const geom::PatchSet& ps, const PromptOutput& out,
                                  std::span<const std::size_t> targets) {
  std::vector<std::size_t> all(ps.n);
  for (std::size_t i = 0; i < ps.n; ++i) all[i] = i;
  PromptedPatches pp;
  pp.n = ps.n;
  pp.l = targets.size();
  pp.k = ps.k;
  Tensor deformed = ad::add(patch_points_tensor(ps, targets), out.offsets);
  Tensor deformed_centers = ad::add(patch_centers_tensor(ps, targets), out.center_offsets);
  pp.points = ad::concat_rows({patch_points_tensor(ps, all), deformed});
  pp.centers = ad::concat_rows({patch_centers_tensor(ps, all), deformed_centers});
  return pp;
}

FrozenFeatures extract_features(const geom::PointCloud& pc, const enc::FrozenModel& model, std::size_t n,
                                std::size_t k) {
  ad::NoGradGuard guard;
  FrozenFeatures ff;
  ff.patches = geom::patchify(pc, n, k);
  ff.thresholds = geom::compute_thresholds(pc, ff.patches);
  ff.tokens = model.embed_patches(ff.patches);
  auto enc = model.encode_3d(ff.tokens);
  ff.features = enc.patch_features;
  ff.embedding = enc.embedding.vector;
  ff.scores = importance_scores(ff.features);
  return ff;
}

PromptedResult prompted_forward(const FrozenFeatures& ff, const enc::FrozenModel& model,
                                const PointPrompter& prompter, std::span<const std::size_t> targets) {
  PromptedResult r;
  r.output = prompter.run(ff.features, targets, ff.patches.centers);
  r.deformed_points = ad::add(patch_points_tensor(ff.patches, targets), r.output.offsets);
  r.deformed_centers = ad::add(patch_centers_tensor(ff.patches, targets), r.output.center_offsets);
  // The original rows are embedded once in extract_features; embedding is per
  // patch, so only the deformed rows need a fresh pass.
  Tensor deformed_tokens = model.embed_patch_points(r.deformed_points, r.deformed_centers, ff.patches.k);
  Tensor tokens = ad::concat_rows({ff.tokens, deformed_tokens});
  r.embedding = model.encode_3d(tokens, &r.output.prompt_token).embedding.vector;
  return r;
}

PromptedResult prompted_forward(const geom::PointCloud& pc, const enc::FrozenModel& model,
                                const PointPrompter& prompter, std::size_t n, std::size_t k, double alpha,
                                Strategy strategy, Rng& rng) {
  const FrozenFeatures ff = extract_features(pc, model, n, k);
  const TargetSelection sel = select_targets(ff.scores, alpha, strategy, rng);
  return prompted_forward(ff, model, prompter, sel.indices);
}

}  // namespace p3t::prompt
