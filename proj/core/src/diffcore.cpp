#include "cfsfl/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace cfsfl {

// ---------------------------------------------------------------------------
// Tensor

namespace {

std::size_t product(const std::vector<std::size_t>& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

void require_positive_dims(const std::vector<std::size_t>& dims) {
  if (dims.empty() || dims.size() > 2) {
    throw ShapeError("tensor rank must be 1 or 2, got " + std::to_string(dims.size()));
  }
  for (auto d : dims) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_string(dims));
  }
}

}  // namespace

std::string shape_string(const std::vector<std::size_t>& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
  require_positive_dims(dims_);
  data_.assign(product(dims_), 0.0);
}

Tensor::Tensor(std::vector<std::size_t> dims, std::vector<double> data)
    : dims_(std::move(dims)), data_(std::move(data)) {
  require_positive_dims(dims_);
  if (product(dims_) != data_.size()) {
    throw ShapeError("tensor " + shape_string(dims_) + " given " + std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::from_matrix(const Matrix& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  t.matrix() = m;
  return t;
}

Tensor Tensor::row(const Matrix& m) {
  if (m.rows() != 1) throw ShapeError("Tensor::row expects a 1 x n matrix");
  Tensor t({static_cast<std::size_t>(m.cols())});
  t.matrix() = m;
  return t;
}

Eigen::Index Tensor::rows() const noexcept {
  return dims_.size() == 2 ? static_cast<Eigen::Index>(dims_[0]) : 1;
}

Eigen::Index Tensor::cols() const noexcept {
  if (dims_.empty()) return 0;
  return static_cast<Eigen::Index>(dims_.back());
}

Eigen::Map<Matrix> Tensor::matrix() { return {data_.data(), rows(), cols()}; }

Eigen::Map<const Matrix> Tensor::matrix() const { return {data_.data(), rows(), cols()}; }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------------------
// ParamSet / GradSet

std::string_view to_string(Owner owner) {
  switch (owner) {
    case Owner::theta: return "theta";
    case Owner::phi: return "phi";
    case Owner::psi: return "psi";
    case Owner::fusion: return "fusion";
  }
  return "?";
}

Owner owner_from_string(std::string_view s) {
  if (s == "theta") return Owner::theta;
  if (s == "phi") return Owner::phi;
  if (s == "psi") return Owner::psi;
  if (s == "fusion") return Owner::fusion;
  throw ParameterError("unknown parameter owner '" + std::string(s) + "'");
}

void ParamSet::add(std::string name, Owner owner, Tensor value) {
  if (contains(name)) throw ContractError("duplicate parameter name '" + name + "'");
  entries_.emplace(std::move(name), Entry{std::move(value), owner});
}

Tensor& ParamSet::at(std::string_view name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ContractError("unknown parameter '" + std::string(name) + "'");
  return it->second.value;
}

const Tensor& ParamSet::at(std::string_view name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ContractError("unknown parameter '" + std::string(name) + "'");
  return it->second.value;
}

Owner ParamSet::owner(std::string_view name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ContractError("unknown parameter '" + std::string(name) + "'");
  return it->second.owner;
}

std::vector<std::string> ParamSet::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, entry] : entries_) out.push_back(name);
  return out;
}

std::vector<std::string> ParamSet::names(Owner owner) const {
  std::vector<std::string> out;
  for (const auto& [name, entry] : entries_) {
    if (entry.owner == owner) out.push_back(name);
  }
  return out;
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, entry] : entries_) n += entry.value.size();
  return n;
}

bool ParamSet::operator==(const ParamSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (auto a = entries_.begin(), b = other.entries_.begin(); a != entries_.end(); ++a, ++b) {
    if (a->first != b->first || a->second.owner != b->second.owner || !(a->second.value == b->second.value)) {
      return false;
    }
  }
  return true;
}

GradSet GradSet::zeros_like(const ParamSet& params) {
  GradSet g;
  for (const auto& [name, entry] : params) g.set(name, Tensor(entry.value.dims()));
  return g;
}

Tensor& GradSet::at(std::string_view name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ContractError("no gradient for '" + std::string(name) + "'");
  return it->second;
}

const Tensor& GradSet::at(std::string_view name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ContractError("no gradient for '" + std::string(name) + "'");
  return it->second;
}

GradSet GradSet::restricted_to(const ParamSet& params, std::initializer_list<Owner> owners) const {
  GradSet out;
  for (const auto& [name, grad] : entries_) {
    const Owner o = params.owner(name);
    if (std::find(owners.begin(), owners.end(), o) != owners.end()) out.set(name, grad);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adam

void adam_step(ParamSet& params, const GradSet& grads, AdamState& state) {
  for (const auto& [name, grad] : grads) {
    const Tensor& p = params.at(name);
    if (!p.same_shape(grad)) {
      throw ShapeError("gradient for '" + name + "' has shape " + shape_string(grad.dims()) + ", parameter " +
                       shape_string(p.dims()));
    }
    if (!grad.all_finite()) throw NumericError("non-finite gradient for '" + name + "'");
  }

  ++state.step;
  const auto& cfg = state.config;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(cfg.beta1, t);
  const double correction2 = 1.0 - std::pow(cfg.beta2, t);

  for (const auto& [name, grad] : grads) {
    Tensor& p = params.at(name);
    auto [m_it, m_new] = state.first_moment.try_emplace(name, Tensor(p.dims()));
    auto [v_it, v_new] = state.second_moment.try_emplace(name, Tensor(p.dims()));
    auto m = m_it->second.data();
    auto v = v_it->second.data();
    auto w = p.data();
    auto g = grad.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      w[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
    }
  }
}

// ---------------------------------------------------------------------------
// Plain layers

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::softmax: return "softmax";
  }
  return "?";
}

Matrix softmax_rows(const Matrix& x) {
  const Eigen::VectorXd row_max = x.rowwise().maxCoeff();
  Matrix y = (x.colwise() - row_max).array().exp().matrix();
  const Eigen::VectorXd inv_sum = y.rowwise().sum().cwiseInverse();
  return inv_sum.asDiagonal() * y;
}

Matrix log_softmax_rows(const Matrix& x) {
  const Eigen::VectorXd row_max = x.rowwise().maxCoeff();
  Matrix shifted = x.colwise() - row_max;
  const Eigen::VectorXd lse = shifted.array().exp().rowwise().sum().log().matrix();
  shifted.colwise() -= lse;
  return shifted;
}

namespace {

Matrix sigmoid_of(const Matrix& x) {
  return x.unaryExpr([](double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
}

}  // namespace

Matrix activate(const Matrix& x, Activation a) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::tanh: return x.array().tanh().matrix();
    case Activation::relu: return x.cwiseMax(0.0);
    case Activation::sigmoid: return sigmoid_of(x);
    case Activation::softmax: return softmax_rows(x);
  }
  return x;
}

Tensor forward_layer(const Tensor& input, const Tensor& weights, const Tensor& bias, Activation a) {
  if (weights.rank() != 2) throw ShapeError("weights must be rank 2, got " + shape_string(weights.dims()));
  if (input.cols() != weights.rows()) {
    throw ShapeError("input width " + std::to_string(input.cols()) + " does not match weights " +
                     shape_string(weights.dims()));
  }
  if (bias.size() != static_cast<std::size_t>(weights.cols())) {
    throw ShapeError("bias " + shape_string(bias.dims()) + " does not match weights " + shape_string(weights.dims()));
  }
  if (!input.all_finite()) throw NumericError("forward_layer: non-finite input");

  Matrix z = input.matrix() * weights.matrix();
  z.rowwise() += bias.matrix().row(0);
  const Matrix out = activate(z, a);
  if (input.rank() == 1) return Tensor::row(out);
  return Tensor::from_matrix(out);
}

// ---------------------------------------------------------------------------
// Graph

const Matrix& Var::value() const { return graph_->value(*this); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) throw ContractError("Var::scalar on a non-scalar node");
  return v(0, 0);
}

Var Graph::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false, false});
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

void Graph::freeze(Owner owner) {
  if (params_ != nullptr) {
    for (const auto& [name, id] : param_nodes_) {
      if (params_->owner(name) == owner && nodes_[id].requires_grad) {
        throw ContractError("cannot freeze " + std::string(to_string(owner)) + ": '" + name + "' is already bound");
      }
    }
  }
  frozen_mask_ |= static_cast<std::uint8_t>(1u << static_cast<unsigned>(owner));
}

bool Graph::frozen(Owner owner) const {
  return (frozen_mask_ >> static_cast<unsigned>(owner)) & 1u;
}

Var Graph::param(std::string_view name) {
  if (params_ == nullptr) throw ContractError("graph has no bound parameters");
  if (auto it = param_nodes_.find(name); it != param_nodes_.end()) return Var(this, it->second);
  const Tensor& t = params_->at(name);
  const bool trainable = record_ && !frozen(params_->owner(name));
  nodes_.push_back(Node{Matrix(t.matrix()), {}, {}, trainable, false});
  const auto id = static_cast<std::uint32_t>(nodes_.size() - 1);
  param_nodes_.emplace(std::string(name), id);
  return Var(this, id);
}

Var Graph::record(Matrix value, std::initializer_list<Var> parents, Backward backward) {
  bool needs = false;
  if (record_) {
    for (const Var& p : parents) needs = needs || nodes_[p.id_].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backward) : Backward{}, needs, false});
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

void Graph::accumulate(Var v, const Matrix& grad) {
  Node& n = nodes_[v.id_];
  if (!n.requires_grad) return;
  if (!n.has_grad) {
    n.grad = grad;
    n.has_grad = true;
  } else {
    n.grad += grad;
  }
}

void Graph::backward(Var loss) {
  Node& out = nodes_[loss.id_];
  if (out.value.rows() != 1 || out.value.cols() != 1) {
    throw ContractError("backward requires a scalar loss, got " + std::to_string(out.value.rows()) + "x" +
                        std::to_string(out.value.cols()));
  }
  if (!std::isfinite(out.value(0, 0))) throw NumericError("backward: loss is not finite");
  if (!out.requires_grad) return;
  out.grad = Matrix::Ones(1, 1);
  out.has_grad = true;
  for (std::int64_t i = loss.id_; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.has_grad && n.backward) {
      // Copy: the closure may accumulate into nodes of the same deque.
      const Matrix g = n.grad;
      n.backward(*this, g, n.value);
    }
  }
}

GradSet Graph::gradients() const {
  if (params_ == nullptr) throw ContractError("graph has no bound parameters");
  GradSet out = GradSet::zeros_like(*params_);
  for (const auto& [name, id] : param_nodes_) {
    const Node& n = nodes_[id];
    if (n.has_grad) out.at(name).matrix() = n.grad;
  }
  return out;
}

namespace ops {

namespace {

void require_same_shape(Var a, Var b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " times " +
                     std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Graph& g = a.graph();
  Matrix value = a.value() * b.value();
  return g.record(std::move(value), {a, b}, [a, b](Graph& g, const Matrix& go, const Matrix&) {
    if (g.requires_grad(a)) g.accumulate(a, go * b.value().transpose());
    if (g.requires_grad(b)) g.accumulate(b, a.value().transpose() * go);
  });
}

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  return a.graph().record(a.value() + b.value(), {a, b}, [a, b](Graph& g, const Matrix& go, const Matrix&) {
    g.accumulate(a, go);
    g.accumulate(b, go);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  return a.graph().record(a.value() - b.value(), {a, b}, [a, b](Graph& g, const Matrix& go, const Matrix&) {
    g.accumulate(a, go);
    if (g.requires_grad(b)) g.accumulate(b, -go);
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  return a.graph().record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Graph& g, const Matrix& go, const Matrix&) {
    if (g.requires_grad(a)) g.accumulate(a, go.cwiseProduct(b.value()));
    if (g.requires_grad(b)) g.accumulate(b, go.cwiseProduct(a.value()));
  });
}

Var scale(Var a, double s) {
  return a.graph().record(a.value() * s, {a}, [a, s](Graph& g, const Matrix& go, const Matrix&) { g.accumulate(a, go * s); });
}

Var add_scalar(Var a, double s) {
  return a.graph().record(a.value().array() + s, {a}, [a](Graph& g, const Matrix& go, const Matrix&) { g.accumulate(a, go); });
}

Var add_bias(Var x, Var bias) {
  if (bias.rows() != 1 || bias.cols() != x.cols()) {
    throw ShapeError("add_bias: bias " + std::to_string(bias.rows()) + "x" + std::to_string(bias.cols()) +
                     " for input width " + std::to_string(x.cols()));
  }
  Matrix value = x.value();
  value.rowwise() += bias.value().row(0);
  return x.graph().record(std::move(value), {x, bias}, [x, bias](Graph& g, const Matrix& go, const Matrix&) {
    g.accumulate(x, go);
    if (g.requires_grad(bias)) g.accumulate(bias, go.colwise().sum());
  });
}

Var affine(Var x, Var w, Var bias) { return add_bias(matmul(x, w), bias); }

Var mul_const(Var a, const Matrix& c) {
  if (a.rows() != c.rows() || a.cols() != c.cols()) throw ShapeError("mul_const: shape mismatch");
  return a.graph().record(a.value().cwiseProduct(c), {a},
                          [a, c](Graph& g, const Matrix& go, const Matrix&) { g.accumulate(a, go.cwiseProduct(c)); });
}

Var concat_cols(Var a, Var b) {
  if (a.rows() != b.rows()) throw ShapeError("concat_cols: row count mismatch");
  Matrix value(a.rows(), a.cols() + b.cols());
  value << a.value(), b.value();
  const Eigen::Index ca = a.cols();
  const Eigen::Index cb = b.cols();
  return a.graph().record(std::move(value), {a, b}, [a, b, ca, cb](Graph& g, const Matrix& go, const Matrix&) {
    if (g.requires_grad(a)) g.accumulate(a, go.leftCols(ca));
    if (g.requires_grad(b)) g.accumulate(b, go.rightCols(cb));
  });
}

Var tanh(Var a) {
  return a.graph().record(a.value().array().tanh().matrix(), {a}, [a](Graph& g, const Matrix& go, const Matrix& y) {
    g.accumulate(a, go.cwiseProduct((1.0 - y.array().square()).matrix()));
  });
}

Var relu(Var a) {
  return a.graph().record(a.value().cwiseMax(0.0), {a}, [a](Graph& g, const Matrix& go, const Matrix&) {
    g.accumulate(a, (a.value().array() > 0.0).select(go, 0.0));
  });
}

Var sigmoid(Var a) {
  return a.graph().record(sigmoid_of(a.value()), {a}, [a](Graph& g, const Matrix& go, const Matrix& y) {
    g.accumulate(a, (go.array() * y.array() * (1.0 - y.array())).matrix());
  });
}

Var log_sigmoid(Var a) {
  Matrix value = a.value().unaryExpr([](double x) { return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x))); });
  return a.graph().record(std::move(value), {a}, [a](Graph& g, const Matrix& go, const Matrix&) {
    // d/dx log sigmoid(x) = sigmoid(-x)
    g.accumulate(a, go.cwiseProduct(sigmoid_of(-a.value())));
  });
}

Var exp(Var a) {
  return a.graph().record(a.value().array().exp().matrix(), {a},
                          [a](Graph& g, const Matrix& go, const Matrix& y) { g.accumulate(a, go.cwiseProduct(y)); });
}

Var log(Var a) {
  return a.graph().record(a.value().array().log().matrix(), {a}, [a](Graph& g, const Matrix& go, const Matrix&) {
    g.accumulate(a, go.cwiseQuotient(a.value()));
  });
}

Var softmax(Var a) {
  return a.graph().record(softmax_rows(a.value()), {a}, [a](Graph& g, const Matrix& go, const Matrix& y) {
    Eigen::VectorXd dot = go.cwiseProduct(y).rowwise().sum();
    Matrix d = go;
    d.colwise() -= dot;
    g.accumulate(a, d.cwiseProduct(y));
  });
}

Var log_softmax(Var a) {
  return a.graph().record(log_softmax_rows(a.value()), {a}, [a](Graph& g, const Matrix& go, const Matrix& y) {
    Matrix p = y.array().exp().matrix();
    Eigen::VectorXd total = go.rowwise().sum();
    p.array().colwise() *= total.array();
    g.accumulate(a, go - p);
  });
}

Var activate(Var a, Activation act) {
  switch (act) {
    case Activation::identity: return a;
    case Activation::tanh: return tanh(a);
    case Activation::relu: return relu(a);
    case Activation::sigmoid: return sigmoid(a);
    case Activation::softmax: return softmax(a);
  }
  return a;
}

Var sum(Var a) {
  Matrix value(1, 1);
  value(0, 0) = a.value().sum();
  const Eigen::Index r = a.rows();
  const Eigen::Index c = a.cols();
  return a.graph().record(std::move(value), {a}, [a, r, c](Graph& g, const Matrix& go, const Matrix&) {
    g.accumulate(a, Matrix::Constant(r, c, go(0, 0)));
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw ContractError("mean of an empty matrix");
  return scale(sum(a), 1.0 / n);
}

Var row_sum(Var a) {
  Matrix value = a.value().rowwise().sum();
  const Eigen::Index c = a.cols();
  return a.graph().record(std::move(value), {a}, [a, c](Graph& g, const Matrix& go, const Matrix&) {
    g.accumulate(a, go.replicate(1, c));
  });
}

Var sum_squares(Var a) {
  Matrix value(1, 1);
  value(0, 0) = a.value().squaredNorm();
  return a.graph().record(std::move(value), {a},
                          [a](Graph& g, const Matrix& go, const Matrix&) { g.accumulate(a, a.value() * (2.0 * go(0, 0))); });
}

Var normalize_rows(Var a) {
  Eigen::VectorXd norms = a.value().rowwise().norm();
  Matrix y = a.value();
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    if (norms(i) > 0.0) y.row(i) /= norms(i);
  }
  return a.graph().record(std::move(y), {a}, [a, norms](Graph& g, const Matrix& go, const Matrix& y) {
    Matrix d = Matrix::Zero(go.rows(), go.cols());
    for (Eigen::Index i = 0; i < go.rows(); ++i) {
      if (norms(i) == 0.0) continue;
      const double proj = go.row(i).dot(y.row(i));
      d.row(i) = (go.row(i) - proj * y.row(i)) / norms(i);
    }
    g.accumulate(a, d);
  });
}

Var detach(Var a) { return a.graph().constant(a.value()); }

}  // namespace ops

Var dense(Graph& g, Var x, std::string_view prefix, Activation act) {
  const std::string p(prefix);
  return ops::activate(ops::affine(x, g.param(p + ".W"), g.param(p + ".b")), act);
}

void add_dense_params(ParamSet& params, const std::string& prefix, Owner owner, std::size_t fan_in,
                      std::size_t fan_out, Activation act, CounterRng& rng) {
  const double limit = act == Activation::relu ? std::sqrt(6.0 / static_cast<double>(fan_in))
                                               : std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor w({fan_in, fan_out});
  for (double& x : w.data()) x = (2.0 * rng.uniform() - 1.0) * limit;
  params.add(prefix + ".W", owner, std::move(w));
  params.add(prefix + ".b", owner, Tensor({fan_out}));
}

// ---------------------------------------------------------------------------
// Gradient verification

namespace {

std::vector<std::size_t> entries_to_check(std::size_t size, const GradCheckOptions& options, std::string_view name) {
  std::vector<std::size_t> idx(size);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (options.max_entries_per_tensor == 0 || size <= options.max_entries_per_tensor) return idx;
  std::uint64_t name_hash = 1469598103934665603ULL;
  for (char c : name) name_hash = (name_hash ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
  CounterRng rng{options.seed, name_hash};
  // Partial Fisher-Yates: the first k slots become a uniform sample.
  for (std::size_t i = 0; i < options.max_entries_per_tensor; ++i) {
    std::swap(idx[i], idx[i + rng.below(size - i)]);
  }
  idx.resize(options.max_entries_per_tensor);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

GradCheckReport grad_check(const ValueFn& value_fn, const GradSet& analytic, ParamSet& params,
                           const GradCheckOptions& options) {
  if (!(options.eps > 0.0)) throw ContractError("grad_check: eps must be positive");
  const double base = value_fn(params);
  const double again = value_fn(params);
  if (base != again) {
    throw ContractError("grad_check: function is not deterministic (fix its sampling noise)");
  }

  GradCheckReport report;
  for (auto& [name, entry] : params) {
    if (!options.only.empty() && std::find(options.only.begin(), options.only.end(), name) == options.only.end()) {
      continue;
    }
    const Tensor& grad = analytic.at(name);
    auto data = entry.value.data();
    for (std::size_t i : entries_to_check(data.size(), options, name)) {
      const double saved = data[i];
      data[i] = saved + options.eps;
      const double plus = value_fn(params);
      data[i] = saved - options.eps;
      const double minus = value_fn(params);
      data[i] = saved;

      const double numeric = (plus - minus) / (2.0 * options.eps);
      const double a = grad[i];
      const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      ++report.entries_checked;
      if (!(err <= report.max_relative_error)) {
        report.max_relative_error = std::isnan(err) ? std::numeric_limits<double>::infinity() : err;
        report.worst_param = name;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

GradCheckReport grad_check(const LossBuilder& build, ParamSet& params, const GradCheckOptions& options) {
  GradSet analytic;
  {
    Graph g(params);
    Var loss = build(g);
    g.backward(loss);
    analytic = g.gradients();
  }
  auto value_fn = [&build](const ParamSet& p) {
    Graph g(p, /*record=*/false);
    return build(g).scalar();
  };
  return grad_check(value_fn, analytic, params, options);
}

}  // namespace cfsfl
