#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fixtures.hpp"
#include "p3t/encoders.hpp"

using namespace p3t;
using ad::Tensor;

namespace {

using Matrix = std::vector<std::vector<double>>;

// Plain-loop forward pass of the encoders, reading weights by name.
struct Reference {
  const nn::ParamStore& store;

  std::vector<double> vec(const std::string& name) const {
    const auto& t = store.find(name)->tensor;
    return {t.data().begin(), t.data().end()};
  }
  Matrix mat(const std::string& name) const {
    const auto& t = store.find(name)->tensor;
    Matrix m(t.rows(), std::vector<double>(t.cols()));
    for (std::size_t i = 0; i < t.rows(); ++i)
      for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.data()[i * t.cols() + j];
    return m;
  }

  static Matrix affine(const Matrix& x, const Matrix& w, const std::vector<double>& b) {
    Matrix y(x.size(), std::vector<double>(w[0].size(), 0.0));
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t o = 0; o < w[0].size(); ++o) {
        double s = b.empty() ? 0.0 : b[o];
        for (std::size_t c = 0; c < x[0].size(); ++c) s += x[i][c] * w[c][o];
        y[i][o] = s;
      }
    return y;
  }
  Matrix linear(const Matrix& x, const std::string& name, bool bias = true) const {
    return affine(x, mat(name + ".weight"), bias ? vec(name + ".bias") : std::vector<double>{});
  }
  Matrix layer_norm(const Matrix& x, const std::string& name) const {
    const auto g = vec(name + ".gain");
    const auto b = vec(name + ".bias");
    Matrix y = x;
    for (auto& r : y) {
      double mu = 0.0;
      for (double v : r) mu += v;
      mu /= static_cast<double>(r.size());
      double var = 0.0;
      for (double v : r) var += (v - mu) * (v - mu);
      var /= static_cast<double>(r.size());
      for (std::size_t j = 0; j < r.size(); ++j) r[j] = (r[j] - mu) / std::sqrt(var + 1e-5) * g[j] + b[j];
    }
    return y;
  }
  Matrix block(const Matrix& x, const std::string& name, std::size_t heads, bool causal) const {
    const std::size_t t = x.size();
    const std::size_t w = x[0].size();
    const std::size_t hd = w / heads;
    const Matrix qkv = linear(layer_norm(x, name + ".ln1"), name + ".qkv");
    Matrix att(t, std::vector<double>(w, 0.0));
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < t; ++i) {
        std::vector<double> score(t, -INFINITY);
        double mx = -INFINITY;
        for (std::size_t j = 0; j < t; ++j) {
          if (causal && j > i) continue;
          double s = 0.0;
          for (std::size_t c = 0; c < hd; ++c) s += qkv[i][h * hd + c] * qkv[j][w + h * hd + c];
          score[j] = s / std::sqrt(static_cast<double>(hd));
          mx = std::max(mx, score[j]);
        }
        double z = 0.0;
        for (auto& s : score) z += (s = std::exp(s - mx));
        for (std::size_t j = 0; j < t; ++j)
          for (std::size_t c = 0; c < hd; ++c) att[i][h * hd + c] += score[j] / z * qkv[j][2 * w + h * hd + c];
      }
    }
    Matrix y = linear(att, name + ".proj");
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t c = 0; c < w; ++c) y[i][c] += x[i][c];
    Matrix hdn = linear(layer_norm(y, name + ".ln2"), name + ".fc1");
    for (auto& r : hdn)
      for (auto& v : r) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
    const Matrix m = linear(hdn, name + ".fc2");
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t c = 0; c < w; ++c) y[i][c] += m[i][c];
    return y;
  }
};

Matrix rows_of(const Tensor& t) {
  Matrix m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.data()[i * t.cols() + j];
  return m;
}

// Fresh micro model with every weight, gain and bias randomised so no
// parameter sits at a neutral value.
enc::FrozenModel randomised_micro(std::size_t width, std::uint64_t seed) {
  enc::FrozenModel m(enc::micro_config(width, fixture::categories(3)), seed);
  Rng rng(seed + 100);
  for (auto& p : m.store().params())
    for (auto& v : p.tensor.mutable_data()) v += 0.3 * rng.normal();
  m.freeze();
  return m;
}

}  // namespace

TEST(Encode3D, MatchesStepByStepReference) {
  const auto model = randomised_micro(8, 1);
  const Reference ref{model.store()};
  Rng rng(2);
  std::vector<double> v(5 * 8);
  for (auto& x : v) x = rng.normal();
  const Tensor tokens = Tensor::matrix(5, 8, v);
  for (bool with_prompt : {false, true}) {
    const Tensor prompt = Tensor::matrix(1, 8, {0.1, -0.2, 0.3, 0.0, 0.5, -1.0, 0.2, 0.7});
    const auto out = model.encode_3d(tokens, with_prompt ? &prompt : nullptr);

    Matrix x = rows_of(model.store().find("enc3d.cls")->tensor);
    if (with_prompt) x.push_back(rows_of(prompt)[0]);
    for (const auto& r : rows_of(tokens)) x.push_back(r);
    x = ref.layer_norm(ref.block(x, "enc3d.block0", 2, false), "enc3d.ln");
    const Matrix z = ref.linear({x[0]}, "enc3d.proj", false);
    const std::size_t skip = with_prompt ? 2 : 1;

    ASSERT_EQ(out.embedding.vector.cols(), z[0].size());
    for (std::size_t c = 0; c < z[0].size(); ++c) EXPECT_NEAR(out.embedding.vector.data()[c], z[0][c], 1e-12);
    ASSERT_EQ(out.patch_features.rows(), 5u);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(out.patch_features.data()[i * 8 + c], x[skip + i][c], 1e-12);
  }
}

TEST(EncodeText, MatchesStepByStepReference) {
  const auto model = randomised_micro(8, 3);
  const Reference ref{model.store()};
  const auto seq = model.handcrafted_sequence("cube");
  const auto out = model.encode_text(seq);

  Matrix table = ref.mat("text.tokens");
  Matrix pos = ref.mat("text.pos");
  Matrix x;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    auto r = table[std::get<std::size_t>(seq[i])];
    for (std::size_t c = 0; c < r.size(); ++c) r[c] += pos[i][c];
    x.push_back(r);
  }
  x = ref.layer_norm(ref.block(x, "text.block0", 2, true), "text.ln");
  const Matrix w = ref.linear({x.back()}, "text.proj", false);
  for (std::size_t c = 0; c < w[0].size(); ++c) EXPECT_NEAR(out.vector.data()[c], w[0][c], 1e-12);
  EXPECT_EQ(out.category, 1u);
  EXPECT_FALSE(out.prompted);
}

TEST(Encode3D, PatchFeaturesFollowPatchOrderWithoutPositions) {
  auto model = randomised_micro(8, 4);
  for (auto& p : model.store().params())
    if (p.name.rfind("patch.pos_mlp", 0) == 0)
      for (auto& v : p.tensor.mutable_data()) v = 0.0;
  const auto pc = fixture::cloud(data::Family::cone, 64, 5);
  auto ps = geom::patchify(pc, 8, 4);
  const auto a = model.encode_3d(model.embed_patches(ps));

  const std::vector<std::size_t> perm{3, 7, 0, 5, 1, 6, 2, 4};
  geom::PatchSet q = ps;
  for (std::size_t i = 0; i < 8; ++i) {
    q.centers[i] = ps.centers[perm[i]];
    for (std::size_t j = 0; j < 4; ++j) q.points[i * 4 + j] = ps.points[perm[i] * 4 + j];
  }
  const auto b = model.encode_3d(model.embed_patches(q));
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t c = 0; c < 8; ++c)
      EXPECT_NEAR(b.patch_features.data()[i * 8 + c], a.patch_features.data()[perm[i] * 8 + c], 1e-12);
  for (std::size_t c = 0; c < a.embedding.vector.size(); ++c)
    EXPECT_NEAR(a.embedding.vector.data()[c], b.embedding.vector.data()[c], 1e-12);
}

TEST(Encode3D, EmptyInputIsRejected) {
  const auto model = fixture::micro_model(8);
  EXPECT_THROW(model.encode_3d(Tensor::zeros({0, 8})), geom::ArgumentError);
  EXPECT_THROW(model.encode_3d(Tensor()), geom::ArgumentError);
}

TEST(Encode3D, EmbeddingsAreFiniteAndNonzero) {
  const auto model = fixture::micro_model(8);
  Rng rng(6);
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> v(4 * 8);
    for (auto& x : v) x = 3.0 * rng.normal();
    const auto z = model.encode_3d(Tensor::matrix(4, 8, v)).embedding.vector;
    double n = 0.0;
    for (double x : z.data()) {
      ASSERT_TRUE(std::isfinite(x));
      n += x * x;
    }
    ASSERT_GT(n, 0.0);
  }
}

TEST(EncodeText, RequiresDelimiters) {
  const auto model = fixture::micro_model(8);
  const std::size_t c = model.category_token("sphere");
  EXPECT_THROW(model.encode_text({c, enc::FrozenModel::kEos}), ad::ContractError);
  EXPECT_THROW(model.encode_text({enc::FrozenModel::kSos, c}), ad::ContractError);
  EXPECT_THROW(model.encode_text({}), ad::ContractError);
}

TEST(EncodeText, SameCategoryTwiceIsIdentical) {
  const auto model = fixture::micro_model(8);
  const auto a = model.encode_text(model.handcrafted_sequence("cylinder")).vector;
  const auto b = model.encode_text(model.handcrafted_sequence("cylinder")).vector;
  EXPECT_EQ(a.shape(), (ad::Shape{1, model.config().shared_dim}));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
}

TEST(Vocabulary, UnknownCategory) {
  const auto model = fixture::micro_model(8);
  EXPECT_THROW(model.category_token("teapot"), geom::ArgumentError);
  EXPECT_THROW(model.handcrafted_sequence("teapot"), geom::ArgumentError);
  EXPECT_EQ(model.category_token("sphere"), 2 + model.config().template_len);
}

TEST(FrozenModel, SaveLoadRoundTrip) {
  const auto model = randomised_micro(8, 9);
  const auto path = std::filesystem::temp_directory_path() / "p3t_encoders_test.p3tw";
  model.save(path);
  const auto back = enc::FrozenModel::load(path);
  EXPECT_EQ(back.weights_hash(), model.weights_hash());
  EXPECT_TRUE(back.frozen());
  EXPECT_EQ(back.config().categories, model.config().categories);
  EXPECT_EQ(back.tau(), model.tau());
  const auto a = model.encode_text(model.handcrafted_sequence("cube")).vector;
  const auto b = back.encode_text(back.handcrafted_sequence("cube")).vector;
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.data()[i], b.data()[i]);

  // Flip one byte inside the weights.
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  bytes[bytes.size() / 2] ^= 0x10;
  {
    std::ofstream out(path, std::ios::binary);
    out << bytes;
  }
  EXPECT_ANY_THROW(enc::FrozenModel::load(path));
  std::filesystem::remove(path);
}

TEST(FrozenModel, HashTracksWeights) {
  auto a = fixture::micro_model(8, 3, 1);
  const auto b = fixture::micro_model(8, 3, 1);
  EXPECT_EQ(a.weights_hash(), b.weights_hash());
  a.store().params()[0].tensor.mutable_data()[0] += 1e-12;
  EXPECT_NE(a.weights_hash(), b.weights_hash());
}

TEST(Pretrain, BeatsChanceAndFreezes) {
  auto cats = fixture::categories(3);
  std::vector<geom::PointCloud> train, test;
  const data::Family fam[] = {data::Family::sphere, data::Family::cube, data::Family::cylinder};
  for (std::size_t c = 0; c < 3; ++c) {
    for (int i = 0; i < 24; ++i) {
      auto pc = fixture::cloud(fam[c], 64, 1000 * c + i);
      pc.label = static_cast<int>(c);
      pc.category_name = cats[c];
      (i < 16 ? train : test).push_back(pc);
    }
  }
  enc::PretrainOptions o;
  o.epochs = 50;
  o.batch_size = 8;
  o.patches = 8;
  o.patch_points = 8;
  o.learning_rate = 5e-4;
  auto cfg = enc::micro_config(16, cats);
  const auto model = enc::pretrain_align(cfg, train, o);
  EXPECT_TRUE(model.frozen());
  EXPECT_EQ(model.tau(), cfg.tau);
  std::vector<Tensor> rows;
  for (const auto& c : cats) rows.push_back(model.encode_text(model.handcrafted_sequence(c)).vector);
  const Tensor text = ad::concat_rows(rows);
  std::size_t correct = 0;
  for (const auto& pc : test) {
    const auto z = model.encode_3d(model.embed_patches(geom::patchify(pc, 8, 8))).embedding.vector;
    const auto logits = enc::similarity_logits(z, text, model.tau());
    const auto best = std::max_element(logits.data().begin(), logits.data().end()) - logits.data().begin();
    if (static_cast<int>(best) == *pc.label) ++correct;
  }
  EXPECT_GT(static_cast<double>(correct) / static_cast<double>(test.size()), 1.0 / 3.0);
}
