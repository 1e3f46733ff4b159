#include "p3t/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace p3t::ad {

namespace {

thread_local bool g_grad_enabled = true;

void check_finite(const char* op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
}

Tensor make(const char* op, Shape shape, std::vector<double> value,
            std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
  check_finite(op, value);
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const Tensor* t : inputs) any = any || t->requires_grad();
    if (any) {
      n->requires_grad = true;
      n->parents.reserve(inputs.size());
      for (const Tensor* t : inputs) n->parents.push_back(t->node());
      n->backward = std::move(fn);
    }
  }
  return Tensor(std::move(n));
}

Tensor make_n(const char* op, Shape shape, std::vector<double> value,
              const std::vector<Tensor>& inputs, BackwardFn fn) {
  check_finite(op, value);
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (g_grad_enabled) {
    bool any = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
      n->requires_grad = true;
      for (const Tensor& t : inputs) n->parents.push_back(t.node());
      n->backward = std::move(fn);
    }
  }
  return Tensor(std::move(n));
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// Elementwise unary op with derivative evaluated from (x, y).
template <class F, class D>
Tensor unary(const char* op, const Tensor& a, F f, D dfdx) {
  require_defined(a, op);
  std::vector<double> out(a.size());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return make(op, a.shape(), std::move(out), {&a}, [dfdx](Node& o) {
    Node& p = *o.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * dfdx(p.value[i], o.value[i]);
  });
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

std::vector<double>& Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_size(shape) != values.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  }
  check_finite("tensor", values);
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return filled(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::filled(Shape shape, double v, bool requires_grad) {
  std::vector<double> values(shape_size(shape), v);
  return from(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({}, {v}, requires_grad); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                      bool requires_grad) {
  return from({rows, cols}, std::move(values), requires_grad);
}

std::size_t Tensor::rows() const {
  const Shape& s = node_->shape;
  if (s.size() <= 1) return 1;
  std::size_t r = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) r *= s[i];
  return r;
}

std::size_t Tensor::cols() const {
  const Shape& s = node_->shape;
  return s.empty() ? 1 : s.back();
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not scalar");
  return node_->value[0];
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(size(), 0.0);
  return node_->grad;
}

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }

void Tensor::backward() const {
  require_defined(*this, "backward");
  if (size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS yields a topological order (inputs first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && p->backward && visited.insert(p).second) {
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->grad.empty() || !n->backward) continue;
    n->backward(*n);
    if (n != node_.get()) n->grad.clear();
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- elementwise --------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  return make("add", a.shape(), std::move(out), {&a, &b}, [](Node& o) {
    for (auto& p : o.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
  return make("sub", a.shape(), std::move(out), {&a, &b}, [](Node& o) {
    if (o.parents[0]->requires_grad) {
      auto& g = o.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (o.parents[1]->requires_grad) {
      auto& g = o.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  return make("mul", a.shape(), std::move(out), {&a, &b}, [](Node& o) {
    Node& pa = *o.parents[0];
    Node& pb = *o.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pa.value[i];
    }
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  require_defined(a, "add_row");
  require_defined(row, "add_row");
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  if (row.size() != n) {
    throw ShapeError("add_row: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(row.shape()));
  }
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.at(i * n + j) + row.at(j);
  return make("add_row", a.shape(), std::move(out), {&a, &row}, [m, n](Node& o) {
    if (o.parents[0]->requires_grad) {
      auto& g = o.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (o.parents[1]->requires_grad) {
      auto& g = o.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += o.grad[i * n + j];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  return unary(
      "scale", a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(
      "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor hinge(const Tensor& a) { return relu(a); }

Tensor leaky_relu(const Tensor& a, double slope) {
  return unary(
      "leaky_relu", a, [slope](double x) { return x > 0.0 ? x : slope * x; },
      [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Tensor gelu(const Tensor& a) {
  return unary(
      "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

// ---- linear algebra -----------------------------------------------------

namespace {

// out (m×n) += a (m×k) · b (k×n)
void gemm_nn(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// out (m×k) += g (m×n) · bᵀ where b is (k×n)
void gemm_nt(const double* g, const double* b, double* out, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
      out[i * k + p] += s;
    }
  }
}

// out (k×n) += aᵀ · g where a is (m×k), g is (m×n)
void gemm_tn(const double* a, const double* g, double* out, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      double* orow = out + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * grow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  const std::size_t m = a.rows();
  const std::size_t k = a.cols();
  const std::size_t n = b.cols();
  if (b.rows() != k || b.rank() > 2) {
    throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make("matmul", {m, n}, std::move(out), {&a, &b}, [m, k, n](Node& o) {
    Node& pa = *o.parents[0];
    Node& pb = *o.parents[1];
    if (pa.requires_grad) gemm_nt(o.grad.data(), pb.value.data(), pa.grad_buffer().data(), m, k, n);
    if (pb.requires_grad) gemm_tn(pa.value.data(), o.grad.data(), pb.grad_buffer().data(), m, k, n);
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_defined(x, "linear");
  require_defined(w, "linear");
  const std::size_t m = x.rows();
  const std::size_t k = x.cols();
  const std::size_t n = w.cols();
  if (w.rows() != k || w.rank() != 2) {
    throw ShapeError("linear: shape mismatch " + shape_str(x.shape()) + " vs " +
                     shape_str(w.shape()));
  }
  const bool has_bias = b.defined();
  if (has_bias && b.size() != n) {
    throw ShapeError("linear: bias shape " + shape_str(b.shape()) + " vs weight " +
                     shape_str(w.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  if (has_bias) {
    for (std::size_t i = 0; i < m; ++i) std::copy(b.data().begin(), b.data().end(), out.begin() + i * n);
  }
  gemm_nn(x.data().data(), w.data().data(), out.data(), m, k, n);
  Shape shape = x.shape();
  if (shape.empty()) shape = {1};
  shape.back() = n;
  BackwardFn fn = [m, k, n, has_bias](Node& o) {
    Node& px = *o.parents[0];
    Node& pw = *o.parents[1];
    if (px.requires_grad) gemm_nt(o.grad.data(), pw.value.data(), px.grad_buffer().data(), m, k, n);
    if (pw.requires_grad) gemm_tn(px.value.data(), o.grad.data(), pw.grad_buffer().data(), m, k, n);
    if (has_bias && o.parents[2]->requires_grad) {
      auto& g = o.parents[2]->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += o.grad[i * n + j];
    }
  };
  if (has_bias) return make("linear", std::move(shape), std::move(out), {&x, &w, &b}, std::move(fn));
  return make("linear", std::move(shape), std::move(out), {&x, &w}, std::move(fn));
}

Tensor transpose(const Tensor& a) {
  require_defined(a, "transpose");
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.at(i * n + j);
  return make("transpose", {n, m}, std::move(out), {&a}, [m, n](Node& o) {
    Node& p = *o.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += o.grad[j * m + i];
  });
}

// ---- row-wise ---------------------------------------------------------

Tensor softmax_rows(const Tensor& a, bool causal) {
  require_defined(a, "softmax_rows");
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  std::vector<double> out(a.size(), 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t width = causal ? std::min(n, i + 1) : n;
    const double* x = a.data().data() + i * n;
    double mx = x[0];
    for (std::size_t j = 1; j < width; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      out[i * n + j] = std::exp(x[j] - mx);
      s += out[i * n + j];
    }
    for (std::size_t j = 0; j < width; ++j) out[i * n + j] /= s;
  }
  return make("softmax_rows", a.shape(), std::move(out), {&a}, [m, n](Node& o) {
    Node& p = *o.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      const double* y = o.value.data() + i * n;
      const double* dy = o.grad.data() + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += y[j] * dy[j];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += y[j] * (dy[j] - dot);
    }
  });
}

Tensor log_softmax_rows(const Tensor& a) {
  require_defined(a, "log_softmax_rows");
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = a.data().data() + i * n;
    const double mx = *std::max_element(x, x + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(x[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[j] - lse;
  }
  return make("log_softmax_rows", a.shape(), std::move(out), {&a}, [m, n](Node& o) {
    Node& p = *o.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      const double* y = o.value.data() + i * n;
      const double* dy = o.grad.data() + i * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += dy[j];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += dy[j] - std::exp(y[j]) * s;
    }
  });
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_defined(x, "layer_norm_rows");
  const std::size_t m = x.rows();
  const std::size_t n = x.cols();
  if (gain.size() != n || bias.size() != n) {
    throw ShapeError("layer_norm_rows: shape mismatch " + shape_str(x.shape()) + " vs " +
                     shape_str(gain.shape()));
  }
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto rstd = std::make_shared<std::vector<double>>(m);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < m; ++i) {
    const double* r = x.data().data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += r[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (r[j] - mu) * (r[j] - mu);
    var /= static_cast<double>(n);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[i] = rs;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (r[j] - mu) * rs;
      (*xhat)[i * n + j] = h;
      out[i * n + j] = h * gain.at(j) + bias.at(j);
    }
  }
  return make("layer_norm_rows", x.shape(), std::move(out), {&x, &gain, &bias},
              [m, n, xhat, rstd](Node& o) {
                Node& px = *o.parents[0];
                Node& pg = *o.parents[1];
                Node& pb = *o.parents[2];
                if (pg.requires_grad) {
                  auto& g = pg.grad_buffer();
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) g[j] += o.grad[i * n + j] * (*xhat)[i * n + j];
                }
                if (pb.requires_grad) {
                  auto& g = pb.grad_buffer();
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) g[j] += o.grad[i * n + j];
                }
                if (!px.requires_grad) return;
                auto& g = px.grad_buffer();
                const double inv_n = 1.0 / static_cast<double>(n);
                std::vector<double> dh(n);
                for (std::size_t i = 0; i < m; ++i) {
                  double s1 = 0.0;
                  double s2 = 0.0;
                  for (std::size_t j = 0; j < n; ++j) {
                    dh[j] = o.grad[i * n + j] * pg.value[j];
                    s1 += dh[j];
                    s2 += dh[j] * (*xhat)[i * n + j];
                  }
                  for (std::size_t j = 0; j < n; ++j) {
                    g[i * n + j] +=
                        (*rstd)[i] * (dh[j] - s1 * inv_n - (*xhat)[i * n + j] * s2 * inv_n);
                  }
                }
              });
}

Tensor normalize_rows(const Tensor& a) {
  require_defined(a, "normalize_rows");
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  auto norms = std::make_shared<std::vector<double>>(m);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += a.at(i * n + j) * a.at(i * n + j);
    const double nr = std::sqrt(s);
    if (nr == 0.0) throw NumericError("normalize_rows: zero-norm row " + std::to_string(i));
    (*norms)[i] = nr;
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.at(i * n + j) / nr;
  }
  return make("normalize_rows", a.shape(), std::move(out), {&a}, [m, n, norms](Node& o) {
    Node& p = *o.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      const double* y = o.value.data() + i * n;
      const double* dy = o.grad.data() + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += y[j] * dy[j];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += (dy[j] - y[j] * dot) / (*norms)[i];
    }
  });
}

// ---- reductions -------------------------------------------------------

MaxResult segment_max_rows(const Tensor& a, std::size_t group) {
  require_defined(a, "segment_max_rows");
  const std::size_t rows = a.rows();
  const std::size_t n = a.cols();
  if (group == 0 || rows % group != 0 || rows == 0) {
    throw ShapeError("segment_max_rows: " + std::to_string(rows) + " rows not divisible into groups of " +
                     std::to_string(group));
  }
  const std::size_t m = rows / group;
  std::vector<double> out(m * n);
  auto arg = std::make_shared<std::vector<std::size_t>>(m * n);
  for (std::size_t s = 0; s < m; ++s) {
    for (std::size_t j = 0; j < n; ++j) {
      std::size_t best = s * group;
      double bv = a.at(best * n + j);
      for (std::size_t r = s * group + 1; r < (s + 1) * group; ++r) {
        const double v = a.at(r * n + j);
        if (v > bv) {
          bv = v;
          best = r;
        }
      }
      out[s * n + j] = bv;
      (*arg)[s * n + j] = best;
    }
  }
  MaxResult res;
  res.argmax = *arg;
  res.values = make("segment_max_rows", {m, n}, std::move(out), {&a}, [n, arg](Node& o) {
    Node& p = *o.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < arg->size(); ++i) g[(*arg)[i] * n + i % n] += o.grad[i];
  });
  return res;
}

MaxResult max_rows(const Tensor& a) {
  require_defined(a, "max_rows");
  return segment_max_rows(a, a.rows());
}

Tensor mean_rows(const Tensor& a) {
  require_defined(a, "mean_rows");
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  if (m == 0) throw ShapeError("mean_rows: empty tensor");
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += a.at(i * n + j);
  for (auto& v : out) v /= static_cast<double>(m);
  return make("mean_rows", {1, n}, std::move(out), {&a}, [m, n](Node& o) {
    Node& p = *o.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += o.grad[j] * inv;
  });
}

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make("sum", {}, {s}, {&a}, [](Node& o) {
    Node& p = *o.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (auto& v : g) v += o.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  require_defined(a, "mean");
  if (a.size() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor norm(const Tensor& a) {
  require_defined(a, "norm");
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return make("norm", {}, {std::sqrt(s)}, {&a}, [](Node& o) {
    Node& p = *o.parents[0];
    if (!p.requires_grad || o.value[0] == 0.0) return;
    auto& g = p.grad_buffer();
    const double k = o.grad[0] / o.value[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * p.value[i];
  });
}

Tensor logsumexp(const Tensor& a) {
  require_defined(a, "logsumexp");
  if (a.size() == 0) throw ShapeError("logsumexp: empty tensor");
  const double mx = *std::max_element(a.data().begin(), a.data().end());
  double s = 0.0;
  for (double v : a.data()) s += std::exp(v - mx);
  return make("logsumexp", {}, {mx + std::log(s)}, {&a}, [](Node& o) {
    Node& p = *o.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[0] * std::exp(p.value[i] - o.value[0]);
  });
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  require_defined(a, "cosine_similarity");
  require_defined(b, "cosine_similarity");
  if (a.size() != b.size()) {
    throw ShapeError("cosine_similarity: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  double dot = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a.at(i) * b.at(i);
    na += a.at(i) * a.at(i);
    nb += b.at(i) * b.at(i);
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na == 0.0 || nb == 0.0) throw NumericError("cosine_similarity: zero-norm operand");
  const double c = dot / (na * nb);
  return make("cosine_similarity", {}, {c}, {&a, &b}, [na, nb, c](Node& o) {
    Node& pa = *o.parents[0];
    Node& pb = *o.parents[1];
    const double g0 = o.grad[0];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] += g0 * (pb.value[i] / (na * nb) - c * pa.value[i] / (na * na));
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] += g0 * (pa.value[i] / (na * nb) - c * pb.value[i] / (nb * nb));
    }
  });
}

// ---- structural -------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (shape_size(shape) != a.size()) {
    throw ShapeError("reshape: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make("reshape", std::move(shape), std::move(out), {&a}, [](Node& o) {
    Node& p = *o.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t n = parts[0].cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_defined(p, "concat_rows");
    if (p.cols() != n) {
      throw ShapeError("concat_rows: shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    total += p.rows();
  }
  std::vector<double> out;
  out.reserve(total * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_n("concat_rows", {total, n}, std::move(out), parts, [](Node& o) {
    std::size_t off = 0;
    for (auto& p : o.parents) {
      const std::size_t len = p->value.size();
      if (p->requires_grad) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < len; ++i) g[i] += o.grad[off + i];
      }
      off += len;
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    require_defined(p, "concat_cols");
    if (p.rows() != m) {
      throw ShapeError("concat_cols: shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    widths.push_back(p.cols());
    total += p.cols();
  }
  std::vector<double> out(m * total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(p.data().begin() + i * w, w, out.begin() + i * total + off);
    off += w;
  }
  return make_n("concat_cols", {m, total}, std::move(out), parts, [m, total, widths](Node& o) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < o.parents.size(); ++k) {
      Node& p = *o.parents[k];
      const std::size_t w = widths[k];
      if (p.requires_grad) {
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) g[i * w + j] += o.grad[i * total + off + j];
      }
      off += w;
    }
  });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
  require_defined(a, "slice_rows");
  const std::size_t n = a.cols();
  if (begin + count > a.rows()) {
    throw ShapeError("slice_rows: rows [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                     ") out of range for " + shape_str(a.shape()));
  }
  std::vector<double> out(a.data().begin() + begin * n, a.data().begin() + (begin + count) * n);
  return make("slice_rows", {count, n}, std::move(out), {&a}, [begin, n](Node& o) {
    Node& p = *o.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[begin * n + i] += o.grad[i];
  });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
  require_defined(a, "slice_cols");
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  if (begin + count > n) {
    throw ShapeError("slice_cols: cols [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                     ") out of range for " + shape_str(a.shape()));
  }
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(a.data().begin() + i * n + begin, count, out.begin() + i * count);
  return make("slice_cols", {m, count}, std::move(out), {&a}, [m, n, begin, count](Node& o) {
    Node& p = *o.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) g[i * n + begin + j] += o.grad[i * count + j];
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index) {
  require_defined(a, "gather_rows");
  const std::size_t n = a.cols();
  const std::size_t m = a.rows();
  std::vector<double> out(index.size() * n);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= m) {
      throw ShapeError("gather_rows: index " + std::to_string(index[i]) + " out of range for " +
                       shape_str(a.shape()));
    }
    std::copy_n(a.data().begin() + index[i] * n, n, out.begin() + i * n);
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(index.begin(), index.end());
  return make("gather_rows", {index.size(), n}, std::move(out), {&a}, [n, idx](Node& o) {
    Node& p = *o.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < idx->size(); ++i)
      for (std::size_t j = 0; j < n; ++j) g[(*idx)[i] * n + j] += o.grad[i * n + j];
  });
}

Tensor pick(const Tensor& a, std::size_t index) {
  require_defined(a, "pick");
  if (index >= a.size()) throw ShapeError("pick: index out of range for " + shape_str(a.shape()));
  return make("pick", {}, {a.at(index)}, {&a}, [index](Node& o) {
    Node& p = *o.parents[0];
    if (!p.requires_grad) return;
    p.grad_buffer()[index] += o.grad[0];
  });
}

Tensor pairwise_distances(const Tensor& points) {
  require_defined(points, "pairwise_distances");
  const std::size_t m = points.rows();
  const std::size_t c = points.cols();
  std::vector<double> out;
  out.reserve(m * (m - 1) / 2);
  const double* x = points.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) {
      double s = 0.0;
      for (std::size_t d = 0; d < c; ++d) s += (x[i * c + d] - x[j * c + d]) * (x[i * c + d] - x[j * c + d]);
      out.push_back(std::sqrt(s));
    }
  }
  const std::size_t count = out.size();
  return make("pairwise_distances", {count}, std::move(out), {&points}, [m, c](Node& o) {
    Node& p = *o.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    const double* x = p.value.data();
    std::size_t k = 0;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = i + 1; j < m; ++j, ++k) {
        const double dist = o.value[k];
        if (dist == 0.0) continue;
        const double s = o.grad[k] / dist;
        for (std::size_t d = 0; d < c; ++d) {
          const double diff = (x[i * c + d] - x[j * c + d]) * s;
          g[i * c + d] += diff;
          g[j * c + d] -= diff;
        }
      }
    }
  });
}

// ---- parameters & optimization -----------------------------------------

double grad_error(double analytic, double numeric) {
  const double a = std::abs(analytic);
  const double n = std::abs(numeric);
  const double diff = std::abs(analytic - numeric);
  if (a < 1e-8 && n < 1e-8) return diff;
  return diff / std::max(a, n);
}

GradCheckReport grad_check(const std::function<Tensor()>& f, std::span<Parameter> params, double h,
                           std::size_t max_per_param) {
  zero_grad(params);
  f().backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.tensor.grad());
  zero_grad(params);

  GradCheckReport report;
  NoGradGuard guard;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = params[k];
    if (!p.trainable) continue;
    auto values = p.tensor.mutable_data();
    const std::size_t total = values.size();
    const std::size_t stride =
        (max_per_param == 0 || total <= max_per_param) ? 1 : (total + max_per_param - 1) / max_per_param;
    GradCheckEntry worst{p.name, 0, 0.0, 0.0, -1.0};
    for (std::size_t i = 0; i < total; i += stride) {
      const double old = values[i];
      values[i] = old + h;
      const double fp = f().item();
      values[i] = old - h;
      const double fm = f().item();
      values[i] = old;
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = grad_error(analytic[k][i], numeric);
      ++report.checked;
      if (err > worst.error) worst = {p.name, i, analytic[k][i], numeric, err};
    }
    if (worst.error < 0.0) continue;
    report.per_parameter.push_back(worst);
    if (report.per_parameter.size() == 1 || worst.error > report.max_rel_error) {
      report.max_rel_error = worst.error;
      report.worst = worst;
    }
  }
  return report;
}

void zero_grad(std::span<Parameter> params) {
  for (auto& p : params) p.tensor.zero_grad();
}

std::size_t count_trainable(std::span<const Parameter> params) {
  std::size_t n = 0;
  for (const auto& p : params)
    if (p.trainable) n += p.tensor.size();
  return n;
}

Adam::Moments& Adam::moments_for(const Parameter& p) {
  for (auto& [name, mom] : moments_) {
    if (name == p.name) return mom;
  }
  moments_.emplace_back(p.name, Moments{std::vector<double>(p.tensor.size(), 0.0),
                                        std::vector<double>(p.tensor.size(), 0.0)});
  return moments_.back().second;
}

void Adam::step(std::span<Parameter> params) {
  const bool any = std::any_of(params.begin(), params.end(),
                               [](const Parameter& p) { return p.trainable && p.tensor.has_grad(); });
  if (!any) throw ContractError("optimizer step before backward: no trainable gradient populated");
  ++step_;
  const double t = static_cast<double>(step_);
  const double bc1 = 1.0 - std::pow(opts_.beta1, t);
  const double bc2 = 1.0 - std::pow(opts_.beta2, t);
  for (auto& p : params) {
    if (!p.trainable || !p.tensor.has_grad()) continue;
    Moments& mom = moments_for(p);
    if (mom.m.size() != p.tensor.size()) {
      throw ContractError("optimizer: moment shape mismatch for " + p.name);
    }
    const auto& g = p.tensor.node()->grad;
    auto x = p.tensor.mutable_data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      mom.m[i] = opts_.beta1 * mom.m[i] + (1.0 - opts_.beta1) * g[i];
      mom.v[i] = opts_.beta2 * mom.v[i] + (1.0 - opts_.beta2) * g[i] * g[i];
      const double mhat = mom.m[i] / bc1;
      const double vhat = mom.v[i] / bc2;
      x[i] -= opts_.learning_rate * mhat / (std::sqrt(vhat) + opts_.eps);
    }
  }
  zero_grad(params);
}

void Adam::restore(std::uint64_t steps, std::vector<std::pair<std::string, Moments>> moments) {
  step_ = steps;
  moments_ = std::move(moments);
}

}  // namespace p3t::ad
