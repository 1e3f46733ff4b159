#include "p3t/text_prompter.hpp"

#include "p3t/random.hpp"

namespace p3t::text {

ContextVectors::ContextVectors(const enc::FrozenModel& model, std::size_t m, double noise, std::uint64_t seed) {
  if (m == 0) throw geom::ArgumentError("context length M must be at least 1");
  const std::size_t tl = model.config().template_len;
  std::vector<std::size_t> ids(m);
  for (std::size_t i = 0; i < m; ++i) ids[i] = model.template_token(i % tl);
  Tensor rows = model.token_rows(ids);
  std::vector<double> init(rows.data().begin(), rows.data().end());
  if (noise > 0.0) {
    Rng rng(seed);
    for (auto& v : init) v += noise * rng.normal();
  }
  v_ = store_.add("text.context", {m, rows.cols()}, std::move(init), true);
}

std::vector<enc::TextEntry> build_prompted(const enc::FrozenModel& model, const std::string& category,
                                           const Tensor& context) {
  std::vector<enc::TextEntry> seq;
  seq.reserve(context.rows() + 3);
  seq.emplace_back(enc::FrozenModel::kSos);
  for (std::size_t i = 0; i < context.rows(); ++i) seq.emplace_back(ad::slice_rows(context, i, 1));
  seq.emplace_back(model.category_token(category));
  seq.emplace_back(enc::FrozenModel::kEos);
  return seq;
}

Tensor prompted_embeddings(const enc::FrozenModel& model, std::span<const std::string> categories,
                           const Tensor& context) {
  std::vector<Tensor> rows;
  rows.reserve(categories.size());
  for (const auto& c : categories) rows.push_back(model.encode_text(build_prompted(model, c, context)).vector);
  return ad::concat_rows(rows);
}

HandcraftedCache::HandcraftedCache(const enc::FrozenModel& model, std::span<const std::string> categories)
    : categories_(categories.begin(), categories.end()) {
  ad::NoGradGuard guard;
  std::vector<Tensor> rows;
  for (const auto& c : categories_) rows.push_back(model.encode_text(model.handcrafted_sequence(c)).vector);
  w_ = ad::concat_rows(rows);
}

}  // namespace p3t::text
