#pragma once

// Parameter registry and the small layer vocabulary shared by the frozen
// encoders and the prompters.

#include <cstddef>
#include <string>
#include <vector>

#include "p3t/diffcore.hpp"
#include "p3t/random.hpp"

namespace p3t::nn {

using ad::Parameter;
using ad::Tensor;

class ParamStore {
 public:
  Tensor add(const std::string& name, ad::Shape shape, std::vector<double> values, bool trainable);
  Tensor add_normal(const std::string& name, ad::Shape shape, double stddev, Rng& rng, bool trainable);
  Tensor add_constant(const std::string& name, ad::Shape shape, double value, bool trainable);

  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }
  const Parameter* find(const std::string& name) const;
  Parameter* find(const std::string& name);

  // Marks every parameter non-trainable and stops gradient recording for it.
  void freeze();
  std::size_t trainable_count() const { return ad::count_trainable(params_); }

 private:
  std::vector<Parameter> params_;
};

enum class Activation { none, relu, leaky_relu, gelu };

Tensor activate(const Tensor& x, Activation act);

struct Linear {
  Tensor weight;  // (in × out)
  Tensor bias;    // (out), may be undefined

  Tensor operator()(const Tensor& x) const { return ad::linear(x, weight, bias); }

  // Weights ~ N(0, 1/in) scaled by `gain`; zero_init gives all-zero weight and bias.
  static Linear make(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                     Rng& rng, bool trainable, bool with_bias = true, bool zero_init = false,
                     double gain = 1.0);
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  Tensor operator()(const Tensor& x) const { return ad::layer_norm_rows(x, gain, bias); }
  static LayerNorm make(ParamStore& store, const std::string& name, std::size_t width, bool trainable);
};

// Stack of linear layers with an activation between consecutive layers and
// none after the last.
struct Mlp {
  std::vector<Linear> layers;
  Activation act = Activation::relu;

  Tensor operator()(const Tensor& x) const;
  static Mlp make(ParamStore& store, const std::string& name, const std::vector<std::size_t>& widths,
                  Activation act, Rng& rng, bool trainable, bool zero_last = false);
};

// Pre-norm transformer block with multi-head self-attention and a GELU MLP.
struct TransformerBlock {
  LayerNorm ln1;
  Linear qkv;
  Linear proj;
  LayerNorm ln2;
  Linear fc1;
  Linear fc2;
  std::size_t heads = 1;
  bool causal = false;

  Tensor operator()(const Tensor& x) const;
  static TransformerBlock make(ParamStore& store, const std::string& name, std::size_t width,
                               std::size_t heads, std::size_t mlp_width, Rng& rng, bool trainable,
                               bool causal = false);
};

}  // namespace p3t::nn
