#include "p3t/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <optional>

#include "p3t/io.hpp"
#include "p3t/random.hpp"

namespace p3t::enc {

namespace {

constexpr char kMagic[] = "P3TW";
constexpr std::uint32_t kVersion = 1;

Tensor points_tensor(std::span<const geom::Vec3> pts) {
  std::vector<double> v;
  v.reserve(pts.size() * 3);
  for (const auto& p : pts) v.insert(v.end(), p.begin(), p.end());
  return Tensor::matrix(pts.size(), 3, std::move(v));
}

}  // namespace

ModelConfig micro_config(std::size_t width, std::vector<std::string> categories) {
  ModelConfig c;
  c.width = width;
  c.text_width = width;
  c.shared_dim = std::max<std::size_t>(width / 2, 4);
  c.blocks = 1;
  c.heads = 2;
  c.text_blocks = 1;
  c.text_heads = 2;
  c.mlp_width = 2 * width;
  c.text_mlp_width = 2 * width;
  c.point_hidden = width;
  c.categories = std::move(categories);
  return c;
}

FrozenModel::FrozenModel(ModelConfig cfg, std::uint64_t seed, bool trainable) : cfg_(std::move(cfg)) {
  if (cfg_.tau <= 0.0) throw geom::ArgumentError("model: temperature must be positive");
  if (cfg_.categories.empty()) throw geom::ArgumentError("model: empty category vocabulary");
  Rng rng(seed);
  const std::size_t d = cfg_.width;
  const std::size_t dt = cfg_.text_width;
  point_mlp_ = nn::Mlp::make(store_, "patch.point_mlp", {3, cfg_.point_hidden, d}, nn::Activation::relu, rng,
                             trainable);
  pos_mlp_ = nn::Mlp::make(store_, "patch.pos_mlp", {3, cfg_.point_hidden, d}, nn::Activation::gelu, rng,
                           trainable);
  cls_token_ = store_.add_normal("enc3d.cls", {1, d}, 0.5, rng, trainable);
  for (std::size_t b = 0; b < cfg_.blocks; ++b) {
    blocks_.push_back(nn::TransformerBlock::make(store_, "enc3d.block" + std::to_string(b), d, cfg_.heads,
                                                 cfg_.mlp_width, rng, trainable));
  }
  final_ln_ = nn::LayerNorm::make(store_, "enc3d.ln", d, trainable);
  proj_ = nn::Linear::make(store_, "enc3d.proj", d, cfg_.shared_dim, rng, trainable, false);

  token_table_ = store_.add_normal("text.tokens", {vocab_size(), dt}, 0.5, rng, trainable);
  text_pos_ = store_.add_normal("text.pos", {cfg_.max_text_len, dt}, 0.1, rng, trainable);
  for (std::size_t b = 0; b < cfg_.text_blocks; ++b) {
    text_blocks_.push_back(nn::TransformerBlock::make(store_, "text.block" + std::to_string(b), dt,
                                                      cfg_.text_heads, cfg_.text_mlp_width, rng, trainable,
                                                      true));
  }
  text_ln_ = nn::LayerNorm::make(store_, "text.ln", dt, trainable);
  text_proj_ = nn::Linear::make(store_, "text.proj", dt, cfg_.shared_dim, rng, trainable, false);
}

std::size_t FrozenModel::category_token(const std::string& name) const {
  auto it = std::find(cfg_.categories.begin(), cfg_.categories.end(), name);
  if (it == cfg_.categories.end()) {
    throw geom::ArgumentError("category '" + name + "' is not in the text vocabulary");
  }
  return 2 + cfg_.template_len + static_cast<std::size_t>(it - cfg_.categories.begin());
}

bool FrozenModel::has_category(const std::string& name) const {
  return std::find(cfg_.categories.begin(), cfg_.categories.end(), name) != cfg_.categories.end();
}

Tensor FrozenModel::embed_patches(const geom::PatchSet& ps) const {
  return embed_patch_points(points_tensor(ps.points), points_tensor(ps.centers), ps.k);
}

Tensor FrozenModel::embed_patch_points(const Tensor& points, const Tensor& centers, std::size_t k) const {
  const std::size_t m = centers.rows();
  if (points.rows() != m * k || points.cols() != 3 || centers.cols() != 3) {
    throw ad::ShapeError("embed_patches: shape mismatch " + ad::shape_str(points.shape()) + " vs " +
                         ad::shape_str(centers.shape()));
  }
  std::vector<std::size_t> owner(m * k);
  for (std::size_t i = 0; i < m * k; ++i) owner[i] = i / k;
  Tensor rel = ad::sub(points, ad::gather_rows(centers, owner));
  Tensor pooled = ad::segment_max_rows(point_mlp_(rel), k).values;
  return ad::add(pooled, pos_mlp_(centers));
}

Encoded3D FrozenModel::encode_3d(const Tensor& patch_tokens, const Tensor* prompt_token) const {
  if (!patch_tokens.defined() || patch_tokens.size() == 0) {
    throw geom::ArgumentError("encode_3d: empty token sequence");
  }
  std::vector<Tensor> seq{cls_token_};
  if (prompt_token != nullptr) seq.push_back(*prompt_token);
  seq.push_back(patch_tokens);
  Tensor h = ad::concat_rows(seq);
  for (const auto& b : blocks_) h = b(h);
  h = final_ln_(h);
  const std::size_t skip = seq.size() - 1;
  Encoded3D out;
  out.embedding.vector = proj_(ad::slice_rows(h, 0, 1));
  out.embedding.source = prompt_token != nullptr ? Source::prompted : Source::unprompted;
  out.patch_features = ad::slice_rows(h, skip, h.rows() - skip);
  return out;
}

Tensor FrozenModel::token_rows(std::span<const std::size_t> ids) const {
  for (auto id : ids) {
    if (id >= vocab_size()) throw geom::ArgumentError("text: token id out of range");
  }
  return ad::gather_rows(token_table_, ids);
}

TextEmbedding FrozenModel::encode_text(const std::vector<TextEntry>& sequence) const {
  auto is_id = [](const TextEntry& e, std::size_t id) {
    return std::holds_alternative<std::size_t>(e) && std::get<std::size_t>(e) == id;
  };
  if (sequence.size() < 2 || !is_id(sequence.front(), kSos) || !is_id(sequence.back(), kEos)) {
    throw ad::ContractError("encode_text: sequence must begin with SOS and end with EOS");
  }
  std::vector<Tensor> rows;
  std::vector<std::size_t> pending;
  auto flush = [&] {
    if (!pending.empty()) rows.push_back(token_rows(pending));
    pending.clear();
  };
  std::optional<std::size_t> category;
  for (const auto& e : sequence) {
    if (const auto* id = std::get_if<std::size_t>(&e)) {
      pending.push_back(*id);
      if (*id >= 2 + cfg_.template_len && *id < vocab_size()) category = *id - 2 - cfg_.template_len;
    } else {
      flush();
      const Tensor& v = std::get<Tensor>(e);
      if (v.cols() != cfg_.text_width) {
        throw ad::ShapeError("encode_text: vector width " + ad::shape_str(v.shape()) + " vs text width " +
                             std::to_string(cfg_.text_width));
      }
      rows.push_back(v);
    }
  }
  flush();
  Tensor h = rows.size() == 1 ? rows[0] : ad::concat_rows(rows);
  const std::size_t len = h.rows();
  if (len > cfg_.max_text_len) throw geom::ArgumentError("encode_text: sequence longer than the positional table");
  h = ad::add(h, ad::slice_rows(text_pos_, 0, len));
  for (const auto& b : text_blocks_) h = b(h);
  h = text_ln_(h);
  TextEmbedding out;
  out.vector = text_proj_(ad::slice_rows(h, len - 1, 1));
  out.category = category.value_or(0);
  out.prompted = std::any_of(sequence.begin(), sequence.end(),
                             [](const TextEntry& e) { return std::holds_alternative<Tensor>(e); });
  return out;
}

std::vector<TextEntry> FrozenModel::handcrafted_sequence(const std::string& category) const {
  std::vector<TextEntry> seq{kSos};
  for (std::size_t i = 0; i < cfg_.template_len; ++i) seq.emplace_back(template_token(i));
  seq.emplace_back(category_token(category));
  seq.emplace_back(kEos);
  return seq;
}

std::uint64_t FrozenModel::weights_hash() const {
  io::Fnv1a h;
  for (const auto& p : store_.params()) {
    h.update(p.name);
    h.update_u64(p.tensor.rank());
    for (auto d : p.tensor.shape()) h.update_u64(d);
    for (double v : p.tensor.data()) h.update_f64(v);
  }
  return h.digest();
}

void FrozenModel::save(const std::filesystem::path& path) const {
  std::vector<io::Record> recs;
  auto meta = [&](const std::string& name, double v) { recs.push_back({"meta." + name, {1}, {v}}); };
  meta("width", static_cast<double>(cfg_.width));
  meta("text_width", static_cast<double>(cfg_.text_width));
  meta("shared_dim", static_cast<double>(cfg_.shared_dim));
  meta("blocks", static_cast<double>(cfg_.blocks));
  meta("heads", static_cast<double>(cfg_.heads));
  meta("text_blocks", static_cast<double>(cfg_.text_blocks));
  meta("text_heads", static_cast<double>(cfg_.text_heads));
  meta("mlp_width", static_cast<double>(cfg_.mlp_width));
  meta("text_mlp_width", static_cast<double>(cfg_.text_mlp_width));
  meta("point_hidden", static_cast<double>(cfg_.point_hidden));
  meta("template_len", static_cast<double>(cfg_.template_len));
  meta("max_text_len", static_cast<double>(cfg_.max_text_len));
  meta("tau", cfg_.tau);
  for (std::size_t i = 0; i < cfg_.categories.size(); ++i) {
    recs.push_back({"vocab." + cfg_.categories[i], {1}, {static_cast<double>(i)}});
  }
  for (const auto& p : store_.params()) {
    recs.push_back({p.name, p.tensor.shape(), std::vector<double>(p.tensor.data().begin(), p.tensor.data().end())});
  }
  io::Writer w;
  w.bytes(std::string_view(kMagic, 4));
  w.u32(kVersion);
  io::write_records(w, recs);
  w.u64(weights_hash());
  io::write_file_atomic(path, w.buffer());
}

FrozenModel FrozenModel::load(const std::filesystem::path& path) {
  io::Reader r(io::read_file(path));
  if (r.bytes(4) != std::string_view(kMagic, 4)) throw io::FormatError(path.string() + ": not a P3TW model file");
  const std::uint32_t version = r.u32();
  if (version != kVersion) throw io::FormatError(path.string() + ": unsupported model version " + std::to_string(version));
  auto recs = io::read_records(r);
  const std::uint64_t stored = r.u64();

  ModelConfig cfg;
  std::map<std::size_t, std::string> vocab;
  std::map<std::string, const io::Record*> weights;
  for (const auto& rec : recs) {
    if (rec.name.rfind("meta.", 0) == 0) {
      const std::string key = rec.name.substr(5);
      const double v = rec.values.at(0);
      const auto u = static_cast<std::size_t>(v);
      if (key == "width") cfg.width = u;
      else if (key == "text_width") cfg.text_width = u;
      else if (key == "shared_dim") cfg.shared_dim = u;
      else if (key == "blocks") cfg.blocks = u;
      else if (key == "heads") cfg.heads = u;
      else if (key == "text_blocks") cfg.text_blocks = u;
      else if (key == "text_heads") cfg.text_heads = u;
      else if (key == "mlp_width") cfg.mlp_width = u;
      else if (key == "text_mlp_width") cfg.text_mlp_width = u;
      else if (key == "point_hidden") cfg.point_hidden = u;
      else if (key == "template_len") cfg.template_len = u;
      else if (key == "max_text_len") cfg.max_text_len = u;
      else if (key == "tau") cfg.tau = v;
    } else if (rec.name.rfind("vocab.", 0) == 0) {
      vocab[static_cast<std::size_t>(rec.values.at(0))] = rec.name.substr(6);
    } else {
      weights[rec.name] = &rec;
    }
  }
  for (auto& [i, name] : vocab) cfg.categories.push_back(name);
  FrozenModel model(cfg, 0, false);
  for (auto& p : model.store_.params()) {
    auto it = weights.find(p.name);
    if (it == weights.end()) throw io::FormatError(path.string() + ": missing weight " + p.name);
    if (it->second->shape != p.tensor.shape()) throw io::FormatError(path.string() + ": shape mismatch for " + p.name);
    std::copy(it->second->values.begin(), it->second->values.end(), p.tensor.mutable_data().begin());
  }
  if (model.weights_hash() != stored) throw io::FormatError(path.string() + ": weights hash mismatch");
  return model;
}

Tensor similarity_logits(const Tensor& embedding, const Tensor& text, double tau) {
  return ad::scale(ad::matmul(ad::normalize_rows(embedding), ad::transpose(ad::normalize_rows(text))), 1.0 / tau);
}

FrozenModel pretrain_align(const ModelConfig& cfg, std::span<const geom::PointCloud> clouds,
                           const PretrainOptions& opts) {
  FrozenModel model(cfg, derive_seed(opts.seed, 0x707265ULL), true);
  std::vector<geom::PatchSet> patches;
  std::vector<std::size_t> labels;
  patches.reserve(clouds.size());
  for (const auto& pc : clouds) {
    patches.push_back(geom::patchify(pc, opts.patches, opts.patch_points));
    // Labels index the model vocabulary, not the dataset's own label space.
    labels.push_back(model.category_token(pc.category_name) - 2 - cfg.template_len);
  }
  const std::size_t num_categories = cfg.categories.size();
  ad::Adam adam({opts.learning_rate, 0.9, 0.999, 1e-8});
  auto& params = model.store().params();

  std::vector<std::size_t> order(clouds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    Rng rng(derive_seed(opts.seed, 0x6f72646572ULL, epoch));
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      std::vector<Tensor> text_rows;
      for (std::size_t c = 0; c < num_categories; ++c) {
        text_rows.push_back(model.encode_text(model.handcrafted_sequence(cfg.categories[c])).vector);
      }
      Tensor text = ad::concat_rows(text_rows);
      std::vector<Tensor> logit_rows;
      std::vector<std::size_t> batch_labels;
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t i = order[b];
        Tensor z = model.encode_3d(model.embed_patches(patches[i])).embedding.vector;
        logit_rows.push_back(similarity_logits(z, text, cfg.tau));
        batch_labels.push_back(labels[i]);
      }
      const std::size_t bsz = batch_labels.size();
      Tensor logits = ad::concat_rows(logit_rows);  // (B × C)
      Tensor lsm = ad::log_softmax_rows(logits);
      std::vector<Tensor> picks;
      for (std::size_t b = 0; b < bsz; ++b) picks.push_back(ad::pick(lsm, b * num_categories + batch_labels[b]));
      Tensor cloud_loss = ad::scale(ad::sum(ad::concat_rows(picks)), -1.0 / static_cast<double>(bsz));

      Tensor lsm_t = ad::log_softmax_rows(ad::transpose(logits));  // (C × B)
      std::vector<Tensor> per_cat;
      for (std::size_t c = 0; c < num_categories; ++c) {
        std::vector<Tensor> pos;
        for (std::size_t b = 0; b < bsz; ++b) {
          if (batch_labels[b] == c) pos.push_back(ad::pick(lsm_t, c * bsz + b));
        }
        if (!pos.empty()) per_cat.push_back(ad::logsumexp(ad::concat_rows(pos)));
      }
      Tensor text_loss = ad::scale(ad::sum(ad::concat_rows(per_cat)), -1.0 / static_cast<double>(per_cat.size()));
      Tensor loss = ad::scale(ad::add(cloud_loss, text_loss), 0.5);
      loss.backward();
      adam.step(params);
      epoch_loss += loss.item();
      ++batches;
    }
    if (opts.verbose) {
      std::cerr << "pretrain epoch " << epoch << " loss " << epoch_loss / static_cast<double>(batches) << '\n';
    }
  }
  model.freeze();
  return model;
}

}  // namespace p3t::enc
