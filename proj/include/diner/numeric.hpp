#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "diner/random.hpp"

// Dense 64-bit tensors and a tape-based reverse-mode differentiator.
//
// Tensors have rank 1 or 2. Row-wise operations treat a rank-1 tensor as a
// single row, so "last axis" always means columns.
namespace diner::numeric {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

  double& operator[](std::size_t i) { return values_[i]; }
  const double& operator[](std::size_t i) const { return values_[i]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
  double item() const;

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::span<const double> row(std::size_t r) const { return values().subspan(r * cols(), cols()); }
  std::span<double> row(std::size_t r) { return values().subspan(r * cols(), cols()); }

  void fill(double v);
  // Throws NumericError naming `what` if any entry is NaN or infinite.
  void check_finite(std::string_view what) const;

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

// Named trainable tensor. `decay` marks whether decoupled weight decay applies.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool decay = true;

  void zero_grad() { grad = Tensor(value.shape()); }
};

// Owns parameters in registration order; addresses stay stable.
class ParameterStore {
 public:
  Parameter& add(std::string name, Tensor init, bool decay = true);
  Parameter& get(std::string_view name);
  const Parameter& get(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

class Tape;

// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

class Tape {
 public:
  using Backprop = std::function<void(Tape&, const Tensor& out_grad)>;

  Var constant(Tensor value);
  // Leaf bound to a parameter; repeated calls for the same parameter return the same node.
  Var parameter(Parameter& p);

  // Records an op output. `inputs` decide whether gradients must flow here.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backprop backprop);
  Var record(Tensor value, std::span<const Var> inputs, Backprop backprop);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
  // Gradient accumulator for `v`, allocated on first use.
  Tensor& grad(Var v);
  const Tensor* grad_if_any(Var v) const;

  // Reverse pass from a scalar loss; accumulates into Parameter::grad.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool needs_grad = false;
    Parameter* param = nullptr;
    Backprop backprop;
  };
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
};

// ---- operation set --------------------------------------------------------

Var matmul(Var a, Var b);     // [m,k] x [k,n]
Var matmul_nt(Var a, Var b);  // [m,k] x [n,k]^T
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);        // elementwise
Var add_row(Var a, Var row);  // broadcast a length-n vector over every row of a
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var add_n(std::span<const Var> terms);

Var tanh(Var a);
Var sigmoid(Var a);
Var gelu(Var a);

// Softmax over the last axis. Masked-out columns receive probability exactly 0.
Var softmax_rows(Var a, std::span<const bool> column_mask = {});
// L2 norm over the last axis: [m,n] -> [m], [n] -> [1].
Var l2norm_rows(Var a);
Var clamp_min(Var a, double floor);
// Divides row i of a by s[i].
Var div_rows(Var a, Var s);
// Mean over axis 0 (-> [n]) or axis 1 (-> [m]) of a rank-2 tensor.
Var mean_axis(Var a, std::size_t axis);
// Mean over the selected rows only -> [n].
Var mean_rows_masked(Var a, std::span<const bool> row_mask);
Var sum_all(Var a);

Var embedding(Var table, std::span<const int> ids);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
// Inverted dropout; identity when p == 0.
Var dropout(Var x, double p, Rng& rng);
// Negative log-softmax of logits (one row) at `target`.
Var cross_entropy(Var logits, std::size_t target);

Var concat_cols(std::span<const Var> parts);
Var concat_cols(Var a, Var b);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var row(Var a, std::size_t r);  // -> rank-1 [n]

// Guard applied to every norm used as a denominator.
inline constexpr double kNormFloor = 1e-12;

// ---- verification -----------------------------------------------------------

struct GradientCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool passed = false;
};

using LossBuilder = std::function<Var(Tape&)>;

// Analytic gradients of the loss for each parameter, in the order given.
std::vector<Tensor> analytic_gradients(const LossBuilder& build,
                                       std::span<Parameter* const> params);

// Compares `analytic` against central differences (loss(p+h) - loss(p-h)) / 2h,
// componentwise. Relative error is |a - n| / max(|a|, |n|, abs_floor).
GradientCheckResult compare_with_finite_differences(const LossBuilder& build,
                                                    std::span<Parameter* const> params,
                                                    std::span<const Tensor> analytic,
                                                    double h = 1e-5, double tol = 1e-4,
                                                    double abs_floor = 1e-6);

GradientCheckResult gradient_check(const LossBuilder& build,
                                   std::span<Parameter* const> params, double h = 1e-5,
                                   double tol = 1e-4);

struct GradientCheckOptions {
  double h = 1e-5;
  double tol = 1e-4;
  double abs_floor = 1e-6;
  std::size_t max_coordinates = 0;  // 0 checks every coordinate
  std::uint64_t seed = 0;           // picks the sampled coordinates
};

// Same comparison restricted to a seeded random sample of coordinates.
GradientCheckResult gradient_check(const LossBuilder& build,
                                   std::span<Parameter* const> params,
                                   const GradientCheckOptions& options);

}  // namespace diner::numeric
