#pragma once

// Dense tensors, a tape-based reverse-mode graph, layers, Adam and finite
// difference gradient verification. Everything trains in 64-bit floats.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "cfsfl/errors.hpp"
#include "cfsfl/random.hpp"

namespace cfsfl {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Row-major dense array of doubles. Rank 1 tensors view as a 1 x n matrix.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> dims);
  Tensor(std::vector<std::size_t> dims, std::vector<double> data);

  static Tensor from_matrix(const Matrix& m);
  static Tensor row(const Matrix& m);  // rank 1 from a 1 x n matrix

  const std::vector<std::size_t>& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  Eigen::Index rows() const noexcept;
  Eigen::Index cols() const noexcept;
  Eigen::Map<Matrix> matrix();
  Eigen::Map<const Matrix> matrix() const;

  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return dims_ == other.dims_; }
  bool operator==(const Tensor& other) const = default;

 private:
  std::vector<std::size_t> dims_;
  std::vector<double> data_;
};

std::string shape_string(const std::vector<std::size_t>& dims);

/// Which sub-model a parameter belongs to: the recommender (theta), the
/// reward estimator (phi), the feedback generator (psi) or the shared
/// item lookup table (fusion).
enum class Owner : std::uint8_t { theta, phi, psi, fusion };

std::string_view to_string(Owner owner);
Owner owner_from_string(std::string_view s);

class ParamSet {
 public:
  struct Entry {
    Tensor value;
    Owner owner;
  };
  using Map = std::map<std::string, Entry, std::less<>>;

  void add(std::string name, Owner owner, Tensor value);
  bool contains(std::string_view name) const { return entries_.find(name) != entries_.end(); }
  Tensor& at(std::string_view name);
  const Tensor& at(std::string_view name) const;
  Owner owner(std::string_view name) const;
  std::vector<std::string> names() const;
  std::vector<std::string> names(Owner owner) const;
  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t scalar_count() const;

  Map::iterator begin() { return entries_.begin(); }
  Map::iterator end() { return entries_.end(); }
  Map::const_iterator begin() const { return entries_.begin(); }
  Map::const_iterator end() const { return entries_.end(); }

  bool operator==(const ParamSet& other) const;

 private:
  Map entries_;
};

class GradSet {
 public:
  using Map = std::map<std::string, Tensor, std::less<>>;

  static GradSet zeros_like(const ParamSet& params);

  void set(std::string name, Tensor grad) { entries_.insert_or_assign(std::move(name), std::move(grad)); }
  bool contains(std::string_view name) const { return entries_.find(name) != entries_.end(); }
  Tensor& at(std::string_view name);
  const Tensor& at(std::string_view name) const;
  std::size_t size() const noexcept { return entries_.size(); }

  // Keeps only the entries whose parameter is owned by one of `owners`.
  GradSet restricted_to(const ParamSet& params, std::initializer_list<Owner> owners) const;

  Map::const_iterator begin() const { return entries_.begin(); }
  Map::const_iterator end() const { return entries_.end(); }

 private:
  Map entries_;
};

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::map<std::string, Tensor, std::less<>> first_moment;
  std::map<std::string, Tensor, std::less<>> second_moment;
};

/// Bias-corrected Adam update of every parameter named in `grads`. Parameters
/// absent from `grads` are untouched. Throws NumericError (before modifying
/// anything) if a gradient is non-finite.
void adam_step(ParamSet& params, const GradSet& grads, AdamState& state);

// ---------------------------------------------------------------------------
// Plain (non-recording) layer evaluation

enum class Activation { identity, tanh, relu, sigmoid, softmax };

std::string_view to_string(Activation a);

// Row-wise softmax with max subtraction.
Matrix softmax_rows(const Matrix& x);
Matrix log_softmax_rows(const Matrix& x);
Matrix activate(const Matrix& x, Activation a);

/// activation(input * weights + bias). `input` is rank 1 or 2 (rows are
/// independent samples), `weights` is in x out, `bias` has out entries.
Tensor forward_layer(const Tensor& input, const Tensor& weights, const Tensor& bias, Activation a);

// ---------------------------------------------------------------------------
// Reverse-mode graph

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
  Graph& graph() const { return *graph_; }
  std::uint32_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* g, std::uint32_t id) : graph_(g), id_(id) {}
  Graph* graph_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Tape of matrix-valued operations. Nodes are appended in evaluation order,
/// so reverse insertion order is a valid reverse topological order.
///
/// A graph built with `record = false` evaluates values only; this is the
/// inference path and skips all closure bookkeeping.
class Graph {
 public:
  // Receives the gradient flowing into the node and the node's own value.
  using Backward = std::function<void(Graph&, const Matrix& out_grad, const Matrix& out_value)>;

  Graph() = default;
  explicit Graph(const ParamSet& params, bool record = true) : params_(&params), record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const noexcept { return record_; }
  const ParamSet* params() const noexcept { return params_; }

  Var constant(Matrix value);

  // Parameters of a frozen owner enter the graph as constants: they get no
  // gradient, and gradients() reports zeros for them. Must be called before
  // any parameter of that owner is bound.
  void freeze(Owner owner);
  bool frozen(Owner owner) const;

  // Leaf bound to a parameter; repeated calls return the same node, so a
  // parameter used at several unrolled steps accumulates one gradient.
  Var param(std::string_view name);

  Var record(Matrix value, std::initializer_list<Var> parents, Backward backward);
  bool requires_grad(Var v) const { return nodes_[v.id_].requires_grad; }
  void accumulate(Var v, const Matrix& grad);

  const Matrix& value(Var v) const { return nodes_[v.id_].value; }

  /// Reverse sweep from a 1x1 loss. Throws ContractError for non-scalar loss.
  void backward(Var loss);

  /// Gradients for every parameter of the bound ParamSet; parameters the loss
  /// does not reach get zeros.
  GradSet gradients() const;

  std::size_t node_count() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    bool requires_grad = false;
    bool has_grad = false;
  };

  const ParamSet* params_ = nullptr;
  bool record_ = true;
  std::deque<Node> nodes_;
  std::map<std::string, std::uint32_t, std::less<>> param_nodes_;
  std::uint8_t frozen_mask_ = 0;
};

namespace ops {

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
// x (n x m) plus a 1 x m bias broadcast over rows.
Var add_bias(Var x, Var bias);
Var affine(Var x, Var w, Var bias);
// Elementwise product with a constant matrix (masks, binary indicators).
Var mul_const(Var a, const Matrix& c);
Var concat_cols(Var a, Var b);

Var tanh(Var a);
Var relu(Var a);
Var sigmoid(Var a);
// log(sigmoid(a)) evaluated without overflow.
Var log_sigmoid(Var a);
Var exp(Var a);
Var log(Var a);
Var softmax(Var a);
Var log_softmax(Var a);
Var activate(Var a, Activation act);

Var sum(Var a);
Var mean(Var a);
Var row_sum(Var a);
Var sum_squares(Var a);
// Rows scaled to unit L2 norm; all-zero rows stay zero.
Var normalize_rows(Var a);
// Same value, no gradient path.
Var detach(Var a);

}  // namespace ops

/// activation(x * W + b) with W = prefix + ".W" and b = prefix + ".b".
Var dense(Graph& g, Var x, std::string_view prefix, Activation act);

/// Adds prefix.W (fan_in x fan_out) and prefix.b (fan_out). Weights uniform
/// in +-sqrt(6 / (fan_in + fan_out)) for tanh/sigmoid/identity layers and
/// +-sqrt(6 / fan_in) for ReLU layers; zero biases.
void add_dense_params(ParamSet& params, const std::string& prefix, Owner owner, std::size_t fan_in,
                      std::size_t fan_out, Activation act, CounterRng& rng);

// ---------------------------------------------------------------------------
// Gradient verification

struct GradCheckOptions {
  double eps = 1e-5;
  // 0 checks every entry; otherwise a seeded sample of entries per tensor.
  std::size_t max_entries_per_tensor = 0;
  std::uint64_t seed = 0;
  // Empty means every parameter.
  std::vector<std::string> only;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
};

using LossBuilder = std::function<Var(Graph&)>;
using ValueFn = std::function<double(const ParamSet&)>;

/// Compares `analytic` against central differences of `value_fn`:
/// max |a - n| / max(1e-8, |a| + |n|). Throws ContractError when value_fn is
/// not deterministic at the base point.
GradCheckReport grad_check(const ValueFn& value_fn, const GradSet& analytic, ParamSet& params,
                           const GradCheckOptions& options = {});

/// Same check with the analytic gradient taken from a reverse sweep over the
/// graph that `build` records.
GradCheckReport grad_check(const LossBuilder& build, ParamSet& params, const GradCheckOptions& options = {});

}  // namespace cfsfl
