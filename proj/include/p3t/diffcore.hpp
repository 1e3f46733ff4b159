#pragma once

// Reverse-mode differentiation over dense double-precision tensors.
//
// A Tensor is a shared handle to a graph node. Ops record their inputs and a
// backward closure when gradient recording is enabled and at least one input
// requires a gradient; otherwise the result is a plain constant. Most ops
// treat their operands as row-major matrices: rank-2 shapes map directly,
// rank-1 shapes are a single row, and higher ranks fold all leading axes into
// rows.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace p3t::ad {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::string shape_str(const Shape& s);
std::size_t shape_size(const Shape& s);

struct Node;
using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<void(Node&)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until populated
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  BackwardFn backward;

  std::vector<double>& grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double v, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rank() const { return node_->shape.size(); }
  // Matrix view of the shape.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return node_->value; }
  // In-place access for leaves (parameters, gradient checks).
  std::span<double> mutable_data() { return node_->value; }
  double item() const;
  double at(std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  // Zeros when no gradient has been populated.
  std::vector<double> grad() const;
  void zero_grad() { node_->grad.clear(); }

  // Populates gradients of every leaf reachable from this scalar.
  void backward() const;

  // Copy of the values with no history.
  Tensor detach() const;
  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---- elementwise --------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// a (m×n) + row (n), row broadcast over every row of a.
Tensor add_row(const Tensor& a, const Tensor& row);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor hinge(const Tensor& a);  // max(x, 0)
Tensor leaky_relu(const Tensor& a, double slope);
Tensor gelu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);

// ---- linear algebra -----------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
// x (m×in) · w (in×out) + b (out); b may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor transpose(const Tensor& a);

// ---- row-wise ---------------------------------------------------------
Tensor softmax_rows(const Tensor& a, bool causal = false);
Tensor log_softmax_rows(const Tensor& a);
Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                       double eps = 1e-5);
Tensor normalize_rows(const Tensor& a);

// ---- reductions -------------------------------------------------------
struct MaxResult {
  Tensor values;
  std::vector<std::size_t> argmax;  // one source row per output element
};
// Column-wise max over all rows: (m×n) -> (1×n). Ties go to the lowest row.
MaxResult max_rows(const Tensor& a);
// Column-wise max within consecutive groups of `group` rows: (g·m×n) -> (m×n).
MaxResult segment_max_rows(const Tensor& a, std::size_t group);
Tensor mean_rows(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor norm(const Tensor& a);
Tensor logsumexp(const Tensor& a);
Tensor cosine_similarity(const Tensor& a, const Tensor& b);

// ---- structural -------------------------------------------------------
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count);
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index);
Tensor pick(const Tensor& a, std::size_t index);

// ---- geometry ---------------------------------------------------------
// Euclidean distances of all unordered row pairs of an (m×c) matrix, in
// (0,1),(0,2),...,(m-2,m-1) order. The gradient at a zero distance is zero.
Tensor pairwise_distances(const Tensor& points);

// ---- parameters & optimization -----------------------------------------

struct Parameter {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

struct GradCheckEntry {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  GradCheckEntry worst;
  std::vector<GradCheckEntry> per_parameter;  // worst entry per parameter
};

// Relative error |a-n| / max(|a|,|n|); absolute error when both are below 1e-8.
double grad_error(double analytic, double numeric);

// Central-difference check of every element (or `max_per_param` evenly
// strided elements when nonzero) of the trainable parameters.
GradCheckReport grad_check(const std::function<Tensor()>& f, std::span<Parameter> params,
                           double h = 1e-4, std::size_t max_per_param = 0);

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamOptions opts) : opts_(opts) {}

  // Applies one update to every trainable parameter with a populated
  // gradient, then clears all gradients.
  void step(std::span<Parameter> params);

  const AdamOptions& options() const { return opts_; }
  std::uint64_t steps() const { return step_; }

  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  const std::vector<std::pair<std::string, Moments>>& moments() const { return moments_; }
  void restore(std::uint64_t steps, std::vector<std::pair<std::string, Moments>> moments);

 private:
  Moments& moments_for(const Parameter& p);

  AdamOptions opts_;
  std::uint64_t step_ = 0;
  std::vector<std::pair<std::string, Moments>> moments_;
};

void zero_grad(std::span<Parameter> params);
std::size_t count_trainable(std::span<const Parameter> params);

}  // namespace p3t::ad
