#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "p3t/losses.hpp"
#include "p3t/text_prompter.hpp"

using namespace p3t;
using ad::Tensor;

TEST(BuildPrompted, LengthAndLayout) {
  const auto model = fixture::micro_model(8);
  for (std::size_t m : {1u, 4u, 6u}) {
    text::ContextVectors v(model, m, 0.0, 0);
    const auto seq = text::build_prompted(model, "cube", v.matrix());
    ASSERT_EQ(seq.size(), m + 3);
    EXPECT_EQ(std::get<std::size_t>(seq.front()), enc::FrozenModel::kSos);
    EXPECT_EQ(std::get<std::size_t>(seq.back()), enc::FrozenModel::kEos);
    EXPECT_EQ(std::get<std::size_t>(seq[m + 1]), model.category_token("cube"));
    std::size_t vectors = 0;
    for (const auto& e : seq) vectors += std::holds_alternative<Tensor>(e);
    EXPECT_EQ(vectors, m);
  }
  text::ContextVectors v(model, 2, 0.0, 0);
  EXPECT_THROW(text::build_prompted(model, "teapot", v.matrix()), geom::ArgumentError);
}

TEST(BuildPrompted, ContextIsSharedAcrossCategories) {
  const auto model = fixture::micro_model(8);
  text::ContextVectors v(model, 3, 0.1, 1);
  const auto a = text::build_prompted(model, "sphere", v.matrix());
  const auto b = text::build_prompted(model, "cylinder", v.matrix());
  for (std::size_t i = 1; i <= 3; ++i) {
    const auto& ta = std::get<Tensor>(a[i]);
    const auto& tb = std::get<Tensor>(b[i]);
    for (std::size_t c = 0; c < ta.size(); ++c) EXPECT_EQ(ta.data()[c], tb.data()[c]);
  }
}

TEST(PromptedEmbeddings, EditingContextMovesEveryCategory) {
  auto model = fixture::micro_model(8);
  text::ContextVectors v(model, 4, 0.0, 0);
  const auto& cats = model.config().categories;
  const Tensor before = text::prompted_embeddings(model, cats, v.matrix());
  EXPECT_EQ(before.shape(), (ad::Shape{cats.size(), model.config().shared_dim}));
  v.store().params()[0].tensor.mutable_data()[5] += 0.5;
  const Tensor after = text::prompted_embeddings(model, cats, v.matrix());
  for (std::size_t c = 0; c < cats.size(); ++c) {
    double diff = 0.0;
    for (std::size_t j = 0; j < before.cols(); ++j)
      diff += std::abs(before.data()[c * before.cols() + j] - after.data()[c * before.cols() + j]);
    EXPECT_GT(diff, 0.0) << cats[c];
  }
}

TEST(PromptedEmbeddings, TemplateInitialisationHasZeroConsistencyLoss) {
  const auto model = fixture::micro_model(8);
  text::ContextVectors v(model, model.config().template_len, 0.0, 0);
  const auto& cats = model.config().categories;
  text::HandcraftedCache hand(model, cats);
  EXPECT_NEAR(loss::con_loss(hand.embeddings(), text::prompted_embeddings(model, cats, v.matrix())).item(), 0.0,
              1e-12);
}

TEST(PromptedEmbeddings, ContextGradientMatchesFiniteDifferences) {
  const auto model = fixture::micro_model(8);
  text::ContextVectors v(model, 3, 0.05, 2);
  const auto& cats = model.config().categories;
  auto f = [&] {
    const Tensor w = text::prompted_embeddings(model, cats, v.matrix());
    return ad::sum(ad::mul(w, w));
  };
  EXPECT_LT(ad::grad_check(f, v.store().params()).max_rel_error, 1e-6);
}

TEST(ContextVectors, NoiseAndSeed) {
  const auto model = fixture::micro_model(8);
  text::ContextVectors a(model, 4, 1e-4, 3);
  text::ContextVectors b(model, 4, 1e-4, 3);
  text::ContextVectors clean(model, 4, 0.0, 3);
  const std::vector<std::size_t> ids{2, 3, 4, 5};
  const Tensor tmpl = model.token_rows(ids);
  double max_dev = 0.0;
  for (std::size_t i = 0; i < tmpl.size(); ++i) {
    EXPECT_EQ(a.matrix().data()[i], b.matrix().data()[i]);
    EXPECT_EQ(clean.matrix().data()[i], tmpl.data()[i]);
    max_dev = std::max(max_dev, std::abs(a.matrix().data()[i] - tmpl.data()[i]));
  }
  EXPECT_GT(max_dev, 0.0);
  EXPECT_LT(max_dev, 1e-3);
  EXPECT_EQ(a.store().params().size(), 1u);
  EXPECT_EQ(a.store().trainable_count(), 4 * a.matrix().cols());
}

TEST(ContextVectors, LongerThanTemplateCycles) {
  const auto model = fixture::micro_model(8);
  text::ContextVectors v(model, 6, 0.0, 0);
  const std::size_t w = v.matrix().cols();
  for (std::size_t c = 0; c < w; ++c) {
    EXPECT_EQ(v.matrix().data()[4 * w + c], v.matrix().data()[c]);
    EXPECT_EQ(v.matrix().data()[5 * w + c], v.matrix().data()[w + c]);
  }
}

TEST(HandcraftedCache, MatchesTemplateAndStaysConstant) {
  const auto model = fixture::micro_model(8);
  const auto& cats = model.config().categories;
  text::HandcraftedCache hand(model, cats);
  const std::vector<double> first(hand.embeddings().data().begin(), hand.embeddings().data().end());
  for (std::size_t c = 0; c < cats.size(); ++c) {
    const auto w = model.encode_text(model.handcrafted_sequence(cats[c])).vector;
    for (std::size_t j = 0; j < w.size(); ++j) EXPECT_EQ(hand.embeddings().data()[c * w.size() + j], w.data()[j]);
  }
  // Backprop through something built on the cache must not touch it.
  text::ContextVectors v(model, 4, 0.01, 0);
  loss::con_loss(hand.embeddings(), text::prompted_embeddings(model, cats, v.matrix())).backward();
  EXPECT_FALSE(hand.embeddings().requires_grad());
  for (std::size_t i = 0; i < first.size(); ++i) EXPECT_EQ(hand.embeddings().data()[i], first[i]);
}
