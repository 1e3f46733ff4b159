#include "p3t/nn.hpp"

#include <cmath>

namespace p3t::nn {

Tensor ParamStore::add(const std::string& name, ad::Shape shape, std::vector<double> values,
                       bool trainable) {
  if (find(name) != nullptr) throw ad::ContractError("duplicate parameter name: " + name);
  Tensor t = Tensor::from(std::move(shape), std::move(values), trainable);
  params_.push_back(Parameter{name, t, trainable});
  return t;
}

Tensor ParamStore::add_normal(const std::string& name, ad::Shape shape, double stddev, Rng& rng,
                              bool trainable) {
  std::vector<double> v(ad::shape_size(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return add(name, std::move(shape), std::move(v), trainable);
}

Tensor ParamStore::add_constant(const std::string& name, ad::Shape shape, double value, bool trainable) {
  std::vector<double> v(ad::shape_size(shape), value);
  return add(name, std::move(shape), std::move(v), trainable);
}

const Parameter* ParamStore::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

Parameter* ParamStore::find(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

void ParamStore::freeze() {
  for (auto& p : params_) {
    p.trainable = false;
    p.tensor.node()->requires_grad = false;
    p.tensor.zero_grad();
  }
}

Tensor activate(const Tensor& x, Activation act) {
  switch (act) {
    case Activation::none:
      return x;
    case Activation::relu:
      return ad::relu(x);
    case Activation::leaky_relu:
      return ad::leaky_relu(x, 0.2);
    case Activation::gelu:
      return ad::gelu(x);
  }
  return x;
}

Linear Linear::make(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                    Rng& rng, bool trainable, bool with_bias, bool zero_init, double gain) {
  Linear l;
  if (zero_init) {
    l.weight = store.add_constant(name + ".weight", {in, out}, 0.0, trainable);
  } else {
    l.weight = store.add_normal(name + ".weight", {in, out}, gain / std::sqrt(static_cast<double>(in)),
                                rng, trainable);
  }
  if (with_bias) l.bias = store.add_constant(name + ".bias", {out}, 0.0, trainable);
  return l;
}

LayerNorm LayerNorm::make(ParamStore& store, const std::string& name, std::size_t width,
                          bool trainable) {
  return LayerNorm{store.add_constant(name + ".gain", {width}, 1.0, trainable),
                   store.add_constant(name + ".bias", {width}, 0.0, trainable)};
}

Tensor Mlp::operator()(const Tensor& x) const {
  Tensor h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i](h);
    if (i + 1 < layers.size()) h = activate(h, act);
  }
  return h;
}

Mlp Mlp::make(ParamStore& store, const std::string& name, const std::vector<std::size_t>& widths,
              Activation act, Rng& rng, bool trainable, bool zero_last) {
  Mlp m;
  m.act = act;
  const double gain = (act == Activation::none) ? 1.0 : std::sqrt(2.0);
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const bool last = i + 2 == widths.size();
    m.layers.push_back(Linear::make(store, name + "." + std::to_string(i), widths[i], widths[i + 1], rng,
                                    trainable, true, last && zero_last, last ? 1.0 : gain));
  }
  return m;
}

Tensor TransformerBlock::operator()(const Tensor& x) const {
  const std::size_t width = x.cols();
  const std::size_t head_dim = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  Tensor qkv_all = qkv(ln1(x));
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor q = ad::slice_cols(qkv_all, h * head_dim, head_dim);
    Tensor k = ad::slice_cols(qkv_all, width + h * head_dim, head_dim);
    Tensor v = ad::slice_cols(qkv_all, 2 * width + h * head_dim, head_dim);
    Tensor att = ad::softmax_rows(ad::scale(ad::matmul(q, ad::transpose(k)), inv_sqrt), causal);
    outs.push_back(ad::matmul(att, v));
  }
  Tensor attended = heads == 1 ? outs[0] : ad::concat_cols(outs);
  Tensor y = ad::add(x, proj(attended));
  return ad::add(y, fc2(ad::gelu(fc1(ln2(y)))));
}

TransformerBlock TransformerBlock::make(ParamStore& store, const std::string& name, std::size_t width,
                                        std::size_t heads, std::size_t mlp_width, Rng& rng,
                                        bool trainable, bool causal) {
  if (heads == 0 || width % heads != 0) {
    throw ad::ShapeError("transformer: width " + std::to_string(width) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  TransformerBlock b;
  b.heads = heads;
  b.causal = causal;
  b.ln1 = LayerNorm::make(store, name + ".ln1", width, trainable);
  b.qkv = Linear::make(store, name + ".qkv", width, 3 * width, rng, trainable);
  b.proj = Linear::make(store, name + ".proj", width, width, rng, trainable, true, false, 0.5);
  b.ln2 = LayerNorm::make(store, name + ".ln2", width, trainable);
  b.fc1 = Linear::make(store, name + ".fc1", width, mlp_width, rng, trainable, true, false, std::sqrt(2.0));
  b.fc2 = Linear::make(store, name + ".fc2", mlp_width, width, rng, trainable, true, false, 0.5);
  return b;
}

}  // namespace p3t::nn
