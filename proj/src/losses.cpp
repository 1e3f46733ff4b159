#include "p3t/losses.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "p3t/io.hpp"

namespace p3t::loss {

namespace {

double value_or_zero(const Tensor& t) { return t.defined() ? t.item() : 0.0; }

Tensor centroid_tensor(const geom::Vec3& c) { return Tensor::matrix(1, 3, {c[0], c[1], c[2]}); }

void warn_clamp() {
  static bool warned = false;
  if (!warned) {
    std::cerr << "warning: class probability below 1e-12 clamped in cross-entropy\n";
    warned = true;
  }
}

}  // namespace

Tensor prediction_probs(const Tensor& embedding, const Tensor& text, double tau) {
  if (text.rows() < 2) throw geom::ArgumentError("prediction needs at least two categories");
  Tensor logits =
      ad::scale(ad::matmul(ad::normalize_rows(embedding), ad::transpose(ad::normalize_rows(text))), 1.0 / tau);
  return ad::softmax_rows(logits);
}

Tensor ce_loss(const Tensor& probs, std::size_t label) {
  if (label >= probs.size()) throw geom::ArgumentError("cross-entropy label out of range");
  if (probs.at(label) < kProbFloor) {
    warn_clamp();
    return Tensor::scalar(-std::log(kProbFloor));
  }
  return ad::scale(ad::log(ad::pick(probs, label)), -1.0);
}

Tensor ce_from_logits(const Tensor& logits, std::size_t label) {
  if (label >= logits.size()) throw geom::ArgumentError("cross-entropy label out of range");
  Tensor nll = ad::scale(ad::pick(ad::log_softmax_rows(logits), label), -1.0);
  if (nll.item() > -std::log(kProbFloor)) {
    warn_clamp();
    return Tensor::scalar(-std::log(kProbFloor));
  }
  return nll;
}

std::uint64_t PrototypeBank::hash() const {
  io::Fnv1a h;
  for (double v : prototypes.data()) h.update_f64(v);
  return h.digest();
}

PrototypeBank compute_prototypes(std::span<const Tensor> embeddings, std::span<const std::size_t> labels,
                                 std::span<const std::string> category_names) {
  const std::size_t c = category_names.size();
  if (embeddings.size() != labels.size()) throw geom::ArgumentError("prototypes: embeddings/labels size mismatch");
  if (embeddings.empty()) throw geom::ArgumentError("prototypes: no samples");
  const std::size_t d = embeddings[0].size();
  std::vector<double> sums(c * d, 0.0);
  PrototypeBank bank;
  bank.counts.assign(c, 0);
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    if (labels[i] >= c) throw geom::ArgumentError("prototypes: label out of range");
    const auto z = embeddings[i].data();
    for (std::size_t j = 0; j < d; ++j) sums[labels[i] * d + j] += z[j];
    ++bank.counts[labels[i]];
  }
  for (std::size_t k = 0; k < c; ++k) {
    if (bank.counts[k] == 0) {
      throw geom::ArgumentError("prototypes: category '" + category_names[k] + "' has no training samples");
    }
    for (std::size_t j = 0; j < d; ++j) sums[k * d + j] /= static_cast<double>(bank.counts[k]);
  }
  bank.prototypes = Tensor::matrix(c, d, std::move(sums));
  return bank;
}

Tensor proto_loss(const Tensor& embedding, const PrototypeBank& bank, std::size_t label) {
  if (label >= bank.prototypes.rows()) throw geom::ArgumentError("prototype label out of range");
  Tensor r = ad::slice_rows(bank.prototypes, label, 1);
  return ad::add_scalar(ad::scale(ad::cosine_similarity(embedding, r), -1.0), 1.0);
}

Tensor soft_diameter(const Tensor& patch_points, double sharpness) {
  return ad::scale(ad::logsumexp(ad::scale(ad::pairwise_distances(patch_points), sharpness)), 1.0 / sharpness);
}

PatchTerms patch_terms(const Tensor& points, std::size_t k, const geom::Vec3& cloud_centroid) {
  const std::size_t l = points.rows() / k;
  const Tensor mu = centroid_tensor(cloud_centroid);
  std::vector<Tensor> diam;
  std::vector<Tensor> off;
  diam.reserve(l);
  off.reserve(l);
  for (std::size_t i = 0; i < l; ++i) {
    Tensor patch = ad::slice_rows(points, i * k, k);
    diam.push_back(ad::reshape(soft_diameter(patch), {1, 1}));
    off.push_back(ad::reshape(ad::norm(ad::sub(ad::mean_rows(patch), mu)), {1, 1}));
  }
  return {ad::concat_rows(diam), ad::concat_rows(off)};
}

SoftThresholds soft_thresholds(const geom::PatchSet& ps, const geom::Vec3& cloud_centroid) {
  ad::NoGradGuard guard;
  std::vector<double> v;
  v.reserve(ps.points.size() * 3);
  for (const auto& p : ps.points) v.insert(v.end(), p.begin(), p.end());
  const PatchTerms t = patch_terms(Tensor::matrix(ps.points.size(), 3, std::move(v)), ps.k, cloud_centroid);
  SoftThresholds th;
  th.cloud_centroid = cloud_centroid;
  for (double x : t.diameters.data()) th.G = std::max(th.G, x);
  for (double x : t.offsets.data()) th.H = std::max(th.H, x);
  return th;
}

Tensor reg_loss(const Tensor& deformed_points, std::size_t k, const SoftThresholds& th) {
  if (deformed_points.rows() == 0 || deformed_points.rows() % k != 0) {
    throw ad::ShapeError("reg_loss: " + ad::shape_str(deformed_points.shape()) + " is not a whole number of " +
                         std::to_string(k) + "-point patches");
  }
  const PatchTerms t = patch_terms(deformed_points, k, th.cloud_centroid);
  Tensor size = ad::hinge(ad::add_scalar(t.diameters, -th.G));
  Tensor loc = ad::hinge(ad::add_scalar(t.offsets, -th.H));
  return ad::mean(ad::add(size, loc));
}

double reg_violation(std::span<const double> deformed_points, std::size_t k, const geom::Thresholds& th) {
  const std::size_t l = deformed_points.size() / (3 * k);
  if (l == 0) return 0.0;
  double total = 0.0;
  std::vector<geom::Vec3> patch(k);
  for (std::size_t i = 0; i < l; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const double* p = &deformed_points[(i * k + j) * 3];
      patch[j] = {p[0], p[1], p[2]};
    }
    total += std::max(geom::patch_diameter(patch) - th.G, 0.0);
    total += std::max(geom::distance(geom::centroid(patch), th.global_centroid) - th.H, 0.0);
  }
  return total / static_cast<double>(l);
}

Tensor con_loss(const Tensor& handcrafted, const Tensor& prompted) {
  if (handcrafted.shape() != prompted.shape()) {
    throw ad::ShapeError("con_loss: shape mismatch " + ad::shape_str(handcrafted.shape()) + " vs " +
                         ad::shape_str(prompted.shape()));
  }
  const double c = static_cast<double>(handcrafted.rows());
  Tensor cos_sum = ad::sum(ad::mul(ad::normalize_rows(handcrafted), ad::normalize_rows(prompted)));
  return ad::add_scalar(ad::scale(cos_sum, -1.0 / c), 1.0);
}

Tensor total_loss(const LossParts& parts, const LossWeights& w) {
  Tensor total = parts.ce;
  auto add = [&](const Tensor& t, double weight) {
    if (!t.defined() || weight == 0.0) return;
    total = total.defined() ? ad::add(total, ad::scale(t, weight)) : ad::scale(t, weight);
  };
  add(parts.proto, w.beta);
  add(parts.reg, w.gamma);
  add(parts.con, w.lambda);
  if (!total.defined()) total = Tensor::scalar(0.0);
  return total;
}

LossBreakdown breakdown(const LossParts& parts, const LossWeights& w) {
  LossBreakdown b;
  b.ce = value_or_zero(parts.ce);
  b.proto = value_or_zero(parts.proto);
  b.reg = value_or_zero(parts.reg);
  b.con = value_or_zero(parts.con);
  b.total = b.ce + w.beta * b.proto + w.gamma * b.reg + w.lambda * b.con;
  return b;
}

}  // namespace p3t::loss
