#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "p3t/losses.hpp"
#include "p3t/point_prompter.hpp"

using namespace p3t;
using ad::Tensor;

namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c) {
  std::vector<double> v(r * c);
  for (auto& x : v) x = rng.normal();
  return Tensor::matrix(r, c, std::move(v));
}

oracle::Matrix to_rows(const Tensor& t) {
  oracle::Matrix m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.data()[i * t.cols() + j];
  return m;
}

}  // namespace

TEST(Importance, WorkedExample) {
  const auto s = prompt::importance_scores(Tensor::matrix(3, 4, {1, 0, 5, 2, 3, 9, 1, 1, 2, 2, 2, 7}));
  EXPECT_EQ(s.scores, (std::vector<std::size_t>{1, 2, 1}));
  EXPECT_EQ(s.feature_dim, 4u);
}

TEST(Importance, SingleRowTakesEveryColumn) {
  const auto s = prompt::importance_scores(Tensor::matrix(1, 5, {0, -1, 3, 2, 2}));
  EXPECT_EQ(s.scores, std::vector<std::size_t>{5});
}

TEST(Importance, ConstantMatrixGoesToFirstRow) {
  const auto s = prompt::importance_scores(Tensor::filled({4, 6}, 0.25));
  EXPECT_EQ(s.scores, (std::vector<std::size_t>{6, 0, 0, 0}));
}

TEST(Importance, ConservedAndMatchesOracle) {
  Rng rng(11);
  for (int t = 0; t < 300; ++t) {
    const std::size_t n = 1 + rng.index(16);
    const std::size_t d = 1 + rng.index(16);
    // Coarse integer values force frequent ties.
    std::vector<double> v(n * d);
    for (auto& x : v) x = static_cast<double>(rng.index(4));
    const Tensor f = Tensor::matrix(n, d, v);
    const auto s = prompt::importance_scores(f);
    std::size_t total = 0;
    for (auto x : s.scores) total += x;
    ASSERT_EQ(total, d);
    ASSERT_EQ(s.scores, oracle::importance(to_rows(f)));
  }
}

TEST(TargetCount, RoundsHalfUp) {
  EXPECT_EQ(prompt::target_count(0.5, 64), 32u);
  EXPECT_EQ(prompt::target_count(0.5, 5), 3u);
  EXPECT_EQ(prompt::target_count(1.0, 7), 7u);
  EXPECT_THROW(prompt::target_count(0.0, 8), geom::ArgumentError);
  EXPECT_THROW(prompt::target_count(1.5, 8), geom::ArgumentError);
  EXPECT_THROW(prompt::target_count(0.01, 8), geom::ArgumentError);
}

TEST(SelectTargets, SmallestScoreWins) {
  Rng rng(0);
  const prompt::ImportanceScores s{{0, 3, 1, 2}, 6};
  EXPECT_EQ(prompt::select_targets(s, 0.25, prompt::Strategy::vulnerable, rng).indices,
            std::vector<std::size_t>{0});
  EXPECT_EQ(prompt::select_targets(s, 0.25, prompt::Strategy::critical, rng).indices, std::vector<std::size_t>{1});
}

TEST(SelectTargets, TieGoesToLowerIndex) {
  Rng rng(0);
  const prompt::ImportanceScores s{{1, 2, 1}, 4};
  EXPECT_EQ(prompt::select_targets(s, 1.0 / 3.0, prompt::Strategy::vulnerable, rng).indices,
            std::vector<std::size_t>{0});
}

TEST(SelectTargets, VulnerableAndCriticalAreDisjointForDistinctScores) {
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    prompt::ImportanceScores s;
    s.scores = rng.sample_without_replacement(64, 64);
    const auto v = prompt::select_targets(s, 0.5, prompt::Strategy::vulnerable, rng).indices;
    const auto c = prompt::select_targets(s, 0.5, prompt::Strategy::critical, rng).indices;
    ASSERT_EQ(v.size(), 32u);
    ASSERT_EQ(c.size(), 32u);
    std::set<std::size_t> all(v.begin(), v.end());
    all.insert(c.begin(), c.end());
    EXPECT_EQ(all.size(), 64u);
  }
}

TEST(SelectTargets, MatchesOracle) {
  Rng rng(5);
  for (int t = 0; t < 300; ++t) {
    const std::size_t n = 1 + rng.index(16);
    prompt::ImportanceScores s;
    for (std::size_t i = 0; i < n; ++i) s.scores.push_back(rng.index(4));
    const double alpha = 0.05 + 0.95 * rng.uniform();
    if (alpha * static_cast<double>(n) + 0.5 < 1.0) continue;
    const std::size_t l = prompt::target_count(alpha, n);
    EXPECT_EQ(prompt::select_targets(s, alpha, prompt::Strategy::vulnerable, rng).indices,
              oracle::select(s.scores, l, true));
    EXPECT_EQ(prompt::select_targets(s, alpha, prompt::Strategy::critical, rng).indices,
              oracle::select(s.scores, l, false));
  }
}

TEST(SelectTargets, RandomIsSeededAndDistinct) {
  const prompt::ImportanceScores s{std::vector<std::size_t>(20, 1), 20};
  Rng a(9), b(9);
  const auto x = prompt::select_targets(s, 0.4, prompt::Strategy::random, a).indices;
  EXPECT_EQ(x, prompt::select_targets(s, 0.4, prompt::Strategy::random, b).indices);
  EXPECT_EQ(std::set<std::size_t>(x.begin(), x.end()).size(), 8u);
}

TEST(Strategy, NamesRoundTrip) {
  for (auto s : {prompt::Strategy::vulnerable, prompt::Strategy::critical, prompt::Strategy::random})
    EXPECT_EQ(prompt::parse_strategy(prompt::to_string(s)), s);
  EXPECT_THROW(prompt::parse_strategy("weakest"), geom::ArgumentError);
  EXPECT_THROW(prompt::parse_encoder_arch("gcn"), geom::ArgumentError);
  EXPECT_THROW(prompt::parse_offset_arch("mlp3"), geom::ArgumentError);
}

TEST(EdgeConv, TwoNodesSeeEachOther) {
  nn::ParamStore store;
  Rng rng(1);
  const auto ec = prompt::EdgeConv::make(store, "e", 2, 3, 1, rng);
  const Tensor x = Tensor::matrix(2, 2, {1, 0, 0, 2});
  const auto expect = oracle::edgeconv(to_rows(x), to_rows(ec.lin.weight),
                                       {ec.lin.bias.data().begin(), ec.lin.bias.data().end()}, 1, 0.2);
  const Tensor y = ec(x);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t o = 0; o < 3; ++o) EXPECT_NEAR(y.data()[i * 3 + o], expect[i][o], 1e-12);
}

TEST(EdgeConv, IdenticalRowsGiveIdenticalOutputs) {
  nn::ParamStore store;
  Rng rng(2);
  const auto ec = prompt::EdgeConv::make(store, "e", 3, 4, 2, rng);
  const Tensor y = ec(Tensor::matrix(4, 3, {1, 2, 3, 1, 2, 3, 1, 2, 3, 1, 2, 3}));
  for (std::size_t i = 1; i < 4; ++i)
    for (std::size_t o = 0; o < 4; ++o) EXPECT_EQ(y.data()[i * 4 + o], y.data()[o]);
}

TEST(EdgeConv, MatchesHandUnrolledOracle) {
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    nn::ParamStore store;
    const std::size_t m = 3 + rng.index(6);
    const std::size_t k = 1 + rng.index(m - 1);
    const auto ec = prompt::EdgeConv::make(store, "e", 2, 3, k, rng);
    const Tensor x = random_matrix(rng, m, 2);
    const auto expect = oracle::edgeconv(to_rows(x), to_rows(ec.lin.weight),
                                         {ec.lin.bias.data().begin(), ec.lin.bias.data().end()}, k, 0.2);
    const Tensor y = ec(x);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t o = 0; o < 3; ++o) ASSERT_NEAR(y.data()[i * 3 + o], expect[i][o], 1e-12);
  }
}

TEST(EdgeConv, RejectsGraphLargerThanInput) {
  nn::ParamStore store;
  Rng rng(0);
  const auto ec = prompt::EdgeConv::make(store, "e", 2, 2, 3, rng);
  EXPECT_THROW(ec(Tensor::zeros({3, 2})), geom::ArgumentError);
}

TEST(Refine, SingleNeighbourIsTheTargetRow) {
  auto pc = fixture::micro_prompter(4, 2);
  pc.refine_m = 1;
  prompt::PointPrompter p(pc, 0);
  Rng rng(6);
  const Tensor fo = random_matrix(rng, 5, 4);
  std::vector<geom::Vec3> centers;
  for (int i = 0; i < 5; ++i) centers.push_back({rng.normal(), rng.normal(), rng.normal()});
  const std::vector<std::size_t> targets{3, 0};
  const Tensor r = p.refine(fo, targets, centers);
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(r.data()[t * 4 + c], fo.data()[targets[t] * 4 + c]);
}

TEST(Refine, AllNeighboursGiveTheColumnMax) {
  auto pc = fixture::micro_prompter(4, 2);
  pc.refine_m = 5;
  prompt::PointPrompter p(pc, 0);
  Rng rng(8);
  const Tensor fo = random_matrix(rng, 5, 4);
  std::vector<geom::Vec3> centers;
  for (int i = 0; i < 5; ++i) centers.push_back({rng.normal(), rng.normal(), rng.normal()});
  const std::vector<std::size_t> targets{1, 4};
  const Tensor r = p.refine(fo, targets, centers);
  const Tensor colmax = ad::max_rows(fo).values;
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(r.data()[t * 4 + c], colmax.data()[c]);
}

class PrompterFixture : public ::testing::Test {
 protected:
  static constexpr std::size_t kWidth = 16;
  static constexpr std::size_t kN = 8;
  static constexpr std::size_t kK = 4;

  enc::FrozenModel model = fixture::micro_model(kWidth);
  prompt::FrozenFeatures ff =
      prompt::extract_features(fixture::cloud(data::Family::torus, kN * kK, 1), model, kN, kK);
  std::vector<std::size_t> targets{1, 4, 6};
};

TEST_F(PrompterFixture, IdentityAtInit) {
  prompt::PointPrompter p(fixture::micro_prompter(kWidth, kK), 0);
  const auto r = prompt::prompted_forward(ff, model, p, targets);
  for (double v : r.output.offsets.data()) EXPECT_EQ(v, 0.0);
  for (double v : r.output.center_offsets.data()) EXPECT_EQ(v, 0.0);
  const Tensor orig = prompt::patch_points_tensor(ff.patches, targets);
  ASSERT_EQ(r.deformed_points.shape(), orig.shape());
  for (std::size_t i = 0; i < orig.size(); ++i) EXPECT_EQ(r.deformed_points.data()[i], orig.data()[i]);
  const auto soft = loss::soft_thresholds(ff.patches, ff.thresholds.global_centroid);
  EXPECT_EQ(loss::reg_loss(r.deformed_points, kK, soft).item(), 0.0);
}

TEST_F(PrompterFixture, OutputShapes) {
  auto cfg = fixture::micro_prompter(kWidth, kK);
  cfg.offset_dim = 6;
  prompt::PointPrompter p(cfg, 0);
  const auto out = p.run(ff.features, targets, ff.patches.centers);
  EXPECT_EQ(out.offset_tokens.shape(), (ad::Shape{3, 6}));
  EXPECT_EQ(out.offsets.shape(), (ad::Shape{12, 3}));
  EXPECT_EQ(out.center_offsets.shape(), (ad::Shape{3, 3}));
  EXPECT_EQ(out.prompt_token.shape(), (ad::Shape{1, kWidth}));
}

TEST_F(PrompterFixture, PromptTokenIgnoresRowOrder) {
  prompt::PointPrompter p(fixture::micro_prompter(kWidth, kK), 0);
  const Tensor fo = p.encode(ff.features);
  std::vector<std::size_t> perm{5, 2, 7, 0, 1, 6, 3, 4};
  const Tensor a = p.prompt_token(fo);
  const Tensor b = p.prompt_token(ad::gather_rows(fo, perm));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
}

TEST_F(PrompterFixture, EveryVariantRuns) {
  for (auto e : {prompt::EncoderArch::edgeconv1, prompt::EncoderArch::edgeconv3, prompt::EncoderArch::transformer1}) {
    for (auto o : {prompt::OffsetArch::mlp1, prompt::OffsetArch::edgeconv1, prompt::OffsetArch::edgeconv3}) {
      auto cfg = fixture::micro_prompter(kWidth, kK);
      cfg.encoder = e;
      cfg.offset = o;
      prompt::PointPrompter p(cfg, 0);
      const auto r = prompt::prompted_forward(ff, model, p, targets);
      EXPECT_EQ(r.embedding.shape(), (ad::Shape{1, model.config().shared_dim}));
    }
  }
}

TEST_F(PrompterFixture, EveryGroupReceivesGradient) {
  auto cfg = fixture::micro_prompter(kWidth, kK);
  cfg.head_init = 0.5;
  prompt::PointPrompter p(cfg, 0);
  const auto r = prompt::prompted_forward(ff, model, p, targets);
  const auto soft = loss::soft_thresholds(ff.patches, ff.thresholds.global_centroid);
  Tensor l = ad::add(ad::sum(ad::mul(r.embedding, r.embedding)), loss::reg_loss(r.deformed_points, kK, soft));
  l.backward();
  for (const auto& prm : p.store().params()) {
    const auto g = prm.tensor.grad();
    EXPECT_TRUE(std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; })) << prm.name;
  }
}

TEST_F(PrompterFixture, DeformedTokensMatchOriginalsAtInit) {
  const Tensor pts = prompt::patch_points_tensor(ff.patches, targets);
  const Tensor ctr = prompt::patch_centers_tensor(ff.patches, targets);
  const Tensor tok = model.embed_patch_points(pts, ctr, kK);
  for (std::size_t t = 0; t < targets.size(); ++t)
    for (std::size_t c = 0; c < kWidth; ++c)
      EXPECT_NEAR(tok.data()[t * kWidth + c], ff.tokens.data()[targets[t] * kWidth + c], 1e-12);
}

TEST_F(PrompterFixture, AssembleAppendsDeformedCopies) {
  auto cfg = fixture::micro_prompter(kWidth, kK);
  cfg.head_init = 0.5;
  prompt::PointPrompter p(cfg, 0);
  const auto out = p.run(ff.features, targets, ff.patches.centers);
  const auto pp = prompt::assemble_prompted(ff.patches, out, targets);
  EXPECT_EQ(pp.points.rows(), (kN + targets.size()) * kK);
  EXPECT_EQ(pp.centers.rows(), kN + targets.size());
  const auto& q = ff.patches.patch(targets[1])[2];
  for (std::size_t a = 0; a < 3; ++a)
    EXPECT_DOUBLE_EQ(pp.points.data()[((kN + 1) * kK + 2) * 3 + a], q[a] + out.offsets.data()[(kK + 2) * 3 + a]);
}
