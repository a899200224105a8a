#include "diner/numeric.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "diner/error.hpp"

namespace diner::numeric {

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void validate_shape(const Shape& shape) {
  if (shape.empty() || shape.size() > 2) {
    throw ShapeError("tensor rank must be 1 or 2, got shape " + shape_string(shape));
  }
}

[[noreturn]] void shape_mismatch(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch between " + shape_string(a) + " and " +
                   shape_string(b));
}

}  // namespace

// ---- Tensor -----------------------------------------------------------------

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  validate_shape(shape_);
  values_.assign(product(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  validate_shape(shape_);
  if (values_.size() != product(shape_)) {
    throw ShapeError("value count " + std::to_string(values_.size()) + " does not match shape " +
                     shape_string(shape_));
  }
}

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
  return values_[0];
}

void Tensor::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

void Tensor::check_finite(std::string_view what) const {
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (!std::isfinite(values_[i])) {
      throw NumericError("non-finite value in " + std::string(what) + " at index " +
                         std::to_string(i));
    }
  }
}

// ---- ParameterStore -----------------------------------------------------------

Parameter& ParameterStore::add(std::string name, Tensor init, bool decay) {
  if (index_.contains(name)) throw Error("duplicate parameter name: " + name);
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->grad = Tensor(init.shape());
  p->value = std::move(init);
  p->decay = decay;
  index_.emplace(std::move(name), params_.size());
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter& ParameterStore::get(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw Error("unknown parameter: " + std::string(name));
  return *params_[it->second];
}

const Parameter& ParameterStore::get(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw Error("unknown parameter: " + std::string(name));
  return *params_[it->second];
}

bool ParameterStore::contains(std::string_view name) const {
  return index_.contains(std::string(name));
}

std::vector<Parameter*> ParameterStore::all() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
  std::vector<const Parameter*> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

// ---- Tape ---------------------------------------------------------------------

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::constant(Tensor value) {
  value.check_finite("constant");
  nodes_.push_back(Node{std::move(value), {}, false, false, nullptr, {}});
  return Var{this, nodes_.size() - 1};
}

Var Tape::parameter(Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var{this, it->second};
  p.value.check_finite(p.name);
  nodes_.push_back(Node{p.value, {}, false, true, &p, {}});
  param_nodes_.emplace(&p, nodes_.size() - 1);
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Backprop backprop) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backprop));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, Backprop backprop) {
  value.check_finite("forward op output");
  bool needs = false;
  for (const Var& v : inputs) needs = needs || nodes_[v.id].needs_grad;
  nodes_.push_back(Node{std::move(value), {}, false, needs, nullptr,
                        needs ? std::move(backprop) : Backprop{}});
  return Var{this, nodes_.size() - 1};
}

Tensor& Tape::grad(Var v) {
  Node& n = nodes_[v.id];
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape());
    n.has_grad = true;
  }
  return n.grad;
}

const Tensor* Tape::grad_if_any(Var v) const {
  const Node& n = nodes_[v.id];
  return n.has_grad ? &n.grad : nullptr;
}

void Tape::backward(Var loss) {
  if (value(loss).size() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " +
                     shape_string(value(loss).shape()));
  }
  grad(loss)[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.needs_grad) continue;
    n.grad.check_finite("gradient");
    if (n.param != nullptr) {
      Tensor& acc = n.param->grad;
      if (acc.shape() != n.value.shape()) acc = Tensor(n.value.shape());
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += n.grad[k];
    } else if (n.backprop) {
      n.backprop(*this, n.grad);
    }
  }
}

// ---- ops ------------------------------------------------------------------------

namespace {

bool wants(Tape& t, Var v) { return t.needs_grad(v); }

Shape row_shape(const Tensor& like, std::size_t cols) {
  return like.rank() == 1 ? Shape{cols} : Shape{like.rows(), cols};
}

template <typename F, typename D>
Var unary(Var a, F f, D df) {
  Tape& t = *a.tape;
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return t.record(std::move(y), {a}, [a, df](Tape& tp, const Tensor& g) {
    const Tensor& x = tp.value(a);
    Tensor& ga = tp.grad(a);
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g[i] * df(x[i]);
  });
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (B.rank() != 2 || A.cols() != B.rows()) shape_mismatch("matmul", A.shape(), B.shape());
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  Tensor C(row_shape(A, n));
  for (std::size_t i = 0; i < m; ++i) {
    double* c = &C[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      const double* brow = &B[p * n];
      for (std::size_t j = 0; j < n; ++j) c[j] += av * brow[j];
    }
  }
  return t.record(std::move(C), {a, b}, [a, b, m, k, n](Tape& tp, const Tensor& G) {
    const Tensor& A = tp.value(a);
    const Tensor& B = tp.value(b);
    if (wants(tp, a)) {
      Tensor& gA = tp.grad(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * B[p * n + j];
          gA[i * k + p] += s;
        }
    }
    if (wants(tp, b)) {
      Tensor& gB = tp.grad(b);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gB[p * n + j] += av * G[i * n + j];
        }
    }
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = *a.tape;
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.cols() != B.cols()) shape_mismatch("matmul_nt", A.shape(), B.shape());
  const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
  Tensor C(row_shape(A, n));
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = &A[i * k];
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = &B[j * k];
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      C[i * n + j] = s;
    }
  }
  return t.record(std::move(C), {a, b}, [a, b, m, k, n](Tape& tp, const Tensor& G) {
    const Tensor& A = tp.value(a);
    const Tensor& B = tp.value(b);
    if (wants(tp, a)) {
      Tensor& gA = tp.grad(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double g = G[i * n + j];
          if (g == 0.0) continue;
          const double* brow = &B[j * k];
          double* ga = &gA[i * k];
          for (std::size_t p = 0; p < k; ++p) ga[p] += g * brow[p];
        }
    }
    if (wants(tp, b)) {
      Tensor& gB = tp.grad(b);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double g = G[i * n + j];
          if (g == 0.0) continue;
          const double* arow = &A[i * k];
          double* gb = &gB[j * k];
          for (std::size_t p = 0; p < k; ++p) gb[p] += g * arow[p];
        }
    }
  });
}

Var add(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape() != B.shape()) shape_mismatch("add", A.shape(), B.shape());
  Tensor C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] += B[i];
  return a.tape->record(std::move(C), {a, b}, [a, b](Tape& tp, const Tensor& G) {
    for (Var v : {a, b}) {
      if (!wants(tp, v)) continue;
      Tensor& gv = tp.grad(v);
      for (std::size_t i = 0; i < G.size(); ++i) gv[i] += G[i];
    }
  });
}

Var sub(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape() != B.shape()) shape_mismatch("sub", A.shape(), B.shape());
  Tensor C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] -= B[i];
  return a.tape->record(std::move(C), {a, b}, [a, b](Tape& tp, const Tensor& G) {
    if (wants(tp, a)) {
      Tensor& ga = tp.grad(a);
      for (std::size_t i = 0; i < G.size(); ++i) ga[i] += G[i];
    }
    if (wants(tp, b)) {
      Tensor& gb = tp.grad(b);
      for (std::size_t i = 0; i < G.size(); ++i) gb[i] -= G[i];
    }
  });
}

Var mul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape() != B.shape()) shape_mismatch("mul", A.shape(), B.shape());
  Tensor C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] *= B[i];
  return a.tape->record(std::move(C), {a, b}, [a, b](Tape& tp, const Tensor& G) {
    const Tensor& A = tp.value(a);
    const Tensor& B = tp.value(b);
    if (wants(tp, a)) {
      Tensor& ga = tp.grad(a);
      for (std::size_t i = 0; i < G.size(); ++i) ga[i] += G[i] * B[i];
    }
    if (wants(tp, b)) {
      Tensor& gb = tp.grad(b);
      for (std::size_t i = 0; i < G.size(); ++i) gb[i] += G[i] * A[i];
    }
  });
}

Var add_row(Var a, Var r) {
  const Tensor& A = a.value();
  const Tensor& R = r.value();
  if (R.size() != A.cols()) shape_mismatch("add_row", A.shape(), R.shape());
  Tensor C = A;
  const std::size_t n = A.cols();
  for (std::size_t i = 0; i < A.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) C[i * n + j] += R[j];
  return a.tape->record(std::move(C), {a, r}, [a, r, n](Tape& tp, const Tensor& G) {
    if (wants(tp, a)) {
      Tensor& ga = tp.grad(a);
      for (std::size_t i = 0; i < G.size(); ++i) ga[i] += G[i];
    }
    if (wants(tp, r)) {
      Tensor& gr = tp.grad(r);
      for (std::size_t i = 0; i < G.size(); ++i) gr[i % n] += G[i];
    }
  });
}

Var scale(Var a, double s) {
  Tensor C = a.value();
  for (std::size_t i = 0; i < C.size(); ++i) C[i] *= s;
  return a.tape->record(std::move(C), {a}, [a, s](Tape& tp, const Tensor& G) {
    Tensor& ga = tp.grad(a);
    for (std::size_t i = 0; i < G.size(); ++i) ga[i] += G[i] * s;
  });
}

Var add_scalar(Var a, double s) {
  Tensor C = a.value();
  for (std::size_t i = 0; i < C.size(); ++i) C[i] += s;
  return a.tape->record(std::move(C), {a}, [a](Tape& tp, const Tensor& G) {
    Tensor& ga = tp.grad(a);
    for (std::size_t i = 0; i < G.size(); ++i) ga[i] += G[i];
  });
}

Var add_n(std::span<const Var> terms) {
  if (terms.empty()) throw ShapeError("add_n: no operands");
  Tensor C = terms[0].value();
  for (std::size_t t = 1; t < terms.size(); ++t) {
    const Tensor& T = terms[t].value();
    if (T.shape() != C.shape()) shape_mismatch("add_n", C.shape(), T.shape());
    for (std::size_t i = 0; i < C.size(); ++i) C[i] += T[i];
  }
  std::vector<Var> inputs(terms.begin(), terms.end());
  return terms[0].tape->record(std::move(C), terms, [inputs](Tape& tp, const Tensor& G) {
    for (Var v : inputs) {
      if (!wants(tp, v)) continue;
      Tensor& gv = tp.grad(v);
      for (std::size_t i = 0; i < G.size(); ++i) gv[i] += G[i];
    }
  });
}

Var tanh(Var a) {
  return unary(
      a, [](double x) { return std::tanh(x); },
      [](double x) {
        const double t = std::tanh(x);
        return 1.0 - t * t;
      });
}

Var sigmoid(Var a) {
  auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  return unary(a, sig, [sig](double x) {
    const double s = sig(x);
    return s * (1.0 - s);
  });
}

Var gelu(Var a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  return unary(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x))); },
      [](double x) {
        const double t = std::tanh(c * (x + k * x * x * x));
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * k * x * x);
      });
}

Var softmax_rows(Var a, std::span<const bool> column_mask) {
  const Tensor& X = a.value();
  const std::size_t n = X.cols();
  if (!column_mask.empty() && column_mask.size() != n) {
    throw ShapeError("softmax_rows: mask length " + std::to_string(column_mask.size()) +
                     " does not match shape " + shape_string(X.shape()));
  }
  std::vector<bool> mask(column_mask.begin(), column_mask.end());
  auto keep = [&mask](std::size_t j) { return mask.empty() || mask[j]; };
  Tensor Y(X.shape());
  for (std::size_t i = 0; i < X.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (keep(j)) mx = std::max(mx, X[i * n + j]);
    if (!std::isfinite(mx)) throw ShapeError("softmax_rows: every column masked");
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!keep(j)) continue;
      Y[i * n + j] = std::exp(X[i * n + j] - mx);
      z += Y[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) Y[i * n + j] /= z;
  }
  const std::size_t rows = X.rows();
  Tensor probs = Y;
  return a.tape->record(std::move(Y), {a}, [a, probs, n, rows](Tape& tp, const Tensor& G) {
    Tensor& ga = tp.grad(a);
    for (std::size_t i = 0; i < rows; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += probs[i * n + j] * G[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        ga[i * n + j] += probs[i * n + j] * (G[i * n + j] - dot);
    }
  });
}

Var l2norm_rows(Var a) {
  const Tensor& X = a.value();
  const std::size_t m = X.rows(), n = X.cols();
  Tensor N({m});
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += X[i * n + j] * X[i * n + j];
    N[i] = std::sqrt(s);
  }
  Tensor norms = N;
  return a.tape->record(std::move(N), {a}, [a, m, n, norms](Tape& tp, const Tensor& G) {
    const Tensor& X = tp.value(a);
    Tensor& ga = tp.grad(a);
    for (std::size_t i = 0; i < m; ++i) {
      if (norms[i] <= kNormFloor) continue;
      const double f = G[i] / norms[i];
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += f * X[i * n + j];
    }
  });
}

Var clamp_min(Var a, double floor) {
  Tensor Y = a.value();
  for (std::size_t i = 0; i < Y.size(); ++i) Y[i] = std::max(Y[i], floor);
  return a.tape->record(std::move(Y), {a}, [a, floor](Tape& tp, const Tensor& G) {
    const Tensor& X = tp.value(a);
    Tensor& ga = tp.grad(a);
    for (std::size_t i = 0; i < G.size(); ++i)
      if (X[i] > floor) ga[i] += G[i];
  });
}

Var div_rows(Var a, Var s) {
  const Tensor& A = a.value();
  const Tensor& S = s.value();
  if (S.size() != A.rows()) shape_mismatch("div_rows", A.shape(), S.shape());
  const std::size_t m = A.rows(), n = A.cols();
  Tensor Y = A;
  for (std::size_t i = 0; i < m; ++i) {
    if (S[i] == 0.0) throw NumericError("div_rows: division by zero in row " + std::to_string(i));
    for (std::size_t j = 0; j < n; ++j) Y[i * n + j] /= S[i];
  }
  return a.tape->record(std::move(Y), {a, s}, [a, s, m, n](Tape& tp, const Tensor& G) {
    const Tensor& A = tp.value(a);
    const Tensor& S = tp.value(s);
    if (wants(tp, a)) {
      Tensor& ga = tp.grad(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += G[i * n + j] / S[i];
    }
    if (wants(tp, s)) {
      Tensor& gs = tp.grad(s);
      for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * A[i * n + j];
        gs[i] -= acc / (S[i] * S[i]);
      }
    }
  });
}

Var mean_axis(Var a, std::size_t axis) {
  const Tensor& X = a.value();
  const std::size_t m = X.rows(), n = X.cols();
  if (axis > 1) throw ShapeError("mean_axis: axis must be 0 or 1");
  Tensor Y(Shape{axis == 0 ? n : m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) Y[axis == 0 ? j : i] += X[i * n + j];
  const double denom = static_cast<double>(axis == 0 ? m : n);
  for (std::size_t i = 0; i < Y.size(); ++i) Y[i] /= denom;
  return a.tape->record(std::move(Y), {a}, [a, axis, m, n, denom](Tape& tp, const Tensor& G) {
    Tensor& ga = tp.grad(a);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += G[axis == 0 ? j : i] / denom;
  });
}

Var mean_rows_masked(Var a, std::span<const bool> row_mask) {
  const Tensor& X = a.value();
  const std::size_t m = X.rows(), n = X.cols();
  if (row_mask.size() != m) throw ShapeError("mean_rows_masked: mask length mismatch");
  std::vector<bool> mask(row_mask.begin(), row_mask.end());
  const auto count = static_cast<double>(std::count(mask.begin(), mask.end(), true));
  if (count == 0) throw ShapeError("mean_rows_masked: no rows selected");
  Tensor Y(Shape{n});
  for (std::size_t i = 0; i < m; ++i)
    if (mask[i])
      for (std::size_t j = 0; j < n; ++j) Y[j] += X[i * n + j];
  for (std::size_t j = 0; j < n; ++j) Y[j] /= count;
  return a.tape->record(std::move(Y), {a}, [a, mask, m, n, count](Tape& tp, const Tensor& G) {
    Tensor& ga = tp.grad(a);
    for (std::size_t i = 0; i < m; ++i)
      if (mask[i])
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += G[j] / count;
  });
}

Var sum_all(Var a) {
  const Tensor& X = a.value();
  double s = 0.0;
  for (double v : X.values()) s += v;
  return a.tape->record(Tensor::scalar(s), {a}, [a](Tape& tp, const Tensor& G) {
    Tensor& ga = tp.grad(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += G[0];
  });
}

Var embedding(Var table, std::span<const int> ids) {
  const Tensor& W = table.value();
  if (W.rank() != 2) throw ShapeError("embedding: table must be rank 2");
  const std::size_t d = W.cols();
  std::vector<int> idv(ids.begin(), ids.end());
  Tensor Y({idv.size(), d});
  for (std::size_t t = 0; t < idv.size(); ++t) {
    if (idv[t] < 0 || static_cast<std::size_t>(idv[t]) >= W.rows()) {
      throw ShapeError("embedding: id " + std::to_string(idv[t]) + " outside table of shape " +
                       shape_string(W.shape()));
    }
    std::copy_n(&W[static_cast<std::size_t>(idv[t]) * d], d, &Y[t * d]);
  }
  return table.tape->record(std::move(Y), {table}, [table, idv, d](Tape& tp, const Tensor& G) {
    Tensor& gw = tp.grad(table);
    for (std::size_t t = 0; t < idv.size(); ++t) {
      double* row = &gw[static_cast<std::size_t>(idv[t]) * d];
      for (std::size_t j = 0; j < d; ++j) row[j] += G[t * d + j];
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& X = x.value();
  const std::size_t m = X.rows(), n = X.cols();
  if (gain.value().size() != n || bias.value().size() != n) {
    shape_mismatch("layer_norm", X.shape(), gain.value().shape());
  }
  Tensor xhat(X.shape());
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += X[i * n + j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (X[i * n + j] - mu) * (X[i * n + j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) xhat[i * n + j] = (X[i * n + j] - mu) * inv_std[i];
  }
  const Tensor& g = gain.value();
  const Tensor& b = bias.value();
  Tensor Y(X.shape());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) Y[i * n + j] = xhat[i * n + j] * g[j] + b[j];
  return x.tape->record(
      std::move(Y), {x, gain, bias},
      [x, gain, bias, xhat, inv_std, m, n](Tape& tp, const Tensor& G) {
        const Tensor& g = tp.value(gain);
        if (wants(tp, gain)) {
          Tensor& gg = tp.grad(gain);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gg[j] += G[i * n + j] * xhat[i * n + j];
        }
        if (wants(tp, bias)) {
          Tensor& gb = tp.grad(bias);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += G[i * n + j];
        }
        if (wants(tp, x)) {
          Tensor& gx = tp.grad(x);
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            double mean_g = 0.0, mean_gx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double gh = G[i * n + j] * g[j];
              mean_g += gh;
              mean_gx += gh * xhat[i * n + j];
            }
            mean_g *= inv_n;
            mean_gx *= inv_n;
            for (std::size_t j = 0; j < n; ++j) {
              const double gh = G[i * n + j] * g[j];
              gx[i * n + j] += inv_std[i] * (gh - mean_g - xhat[i * n + j] * mean_gx);
            }
          }
        }
      });
}

Var dropout(Var x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw Error("dropout probability must be < 1");
  const Tensor& X = x.value();
  Tensor mask(X.shape());
  const double keep_scale = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = bernoulli(rng, p) ? 0.0 : keep_scale;
  Tensor Y = X;
  for (std::size_t i = 0; i < Y.size(); ++i) Y[i] *= mask[i];
  return x.tape->record(std::move(Y), {x}, [x, mask](Tape& tp, const Tensor& G) {
    Tensor& gx = tp.grad(x);
    for (std::size_t i = 0; i < G.size(); ++i) gx[i] += G[i] * mask[i];
  });
}

Var cross_entropy(Var logits, std::size_t target) {
  const Tensor& Z = logits.value();
  if (Z.rows() != 1) throw ShapeError("cross_entropy expects one row of logits");
  const std::size_t c = Z.cols();
  if (target >= c) {
    throw Error("cross_entropy: label index " + std::to_string(target) + " outside " +
                std::to_string(c) + " classes");
  }
  const double mx = *std::max_element(Z.values().begin(), Z.values().end());
  std::vector<double> prob(c);
  double z = 0.0;
  for (std::size_t j = 0; j < c; ++j) {
    prob[j] = std::exp(Z[j] - mx);
    z += prob[j];
  }
  for (double& v : prob) v /= z;
  const double loss = std::log(z) + mx - Z[target];
  return logits.tape->record(Tensor::scalar(loss), {logits},
                             [logits, prob, target](Tape& tp, const Tensor& G) {
                               Tensor& gz = tp.grad(logits);
                               for (std::size_t j = 0; j < prob.size(); ++j)
                                 gz[j] += G[0] * (prob[j] - (j == target ? 1.0 : 0.0));
                             });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  const Tensor& first = parts[0].value();
  const std::size_t m = first.rows();
  bool all_rank1 = true;
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& v : parts) {
    const Tensor& T = v.value();
    if (T.rows() != m) shape_mismatch("concat_cols", first.shape(), T.shape());
    all_rank1 = all_rank1 && T.rank() == 1;
    widths.push_back(T.cols());
    total += T.cols();
  }
  Tensor Y(all_rank1 ? Shape{total} : Shape{m, total});
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& T = parts[p].value();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(&T[i * widths[p]], widths[p], &Y[i * total + offset]);
    offset += widths[p];
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].tape->record(std::move(Y), parts,
                               [inputs, widths, m, total](Tape& tp, const Tensor& G) {
                                 std::size_t offset = 0;
                                 for (std::size_t p = 0; p < inputs.size(); ++p) {
                                   if (wants(tp, inputs[p])) {
                                     Tensor& gp = tp.grad(inputs[p]);
                                     for (std::size_t i = 0; i < m; ++i)
                                       for (std::size_t j = 0; j < widths[p]; ++j)
                                         gp[i * widths[p] + j] += G[i * total + offset + j];
                                   }
                                   offset += widths[p];
                                 }
                               });
}

Var concat_cols(Var a, Var b) {
  const Var parts[] = {a, b};
  return concat_cols(std::span<const Var>(parts));
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Tensor& X = a.value();
  if (begin > end || end > X.cols()) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") outside shape " + shape_string(X.shape()));
  }
  const std::size_t m = X.rows(), n = X.cols(), w = end - begin;
  Tensor Y(row_shape(X, w));
  for (std::size_t i = 0; i < m; ++i) std::copy_n(&X[i * n + begin], w, &Y[i * w]);
  return a.tape->record(std::move(Y), {a}, [a, begin, m, n, w](Tape& tp, const Tensor& G) {
    Tensor& ga = tp.grad(a);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) ga[i * n + begin + j] += G[i * w + j];
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  const Tensor& X = a.value();
  if (X.rank() != 2 || begin > end || end > X.rows()) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") outside shape " + shape_string(X.shape()));
  }
  const std::size_t n = X.cols();
  Tensor Y({end - begin, n});
  std::copy_n(&X[begin * n], (end - begin) * n, &Y[0]);
  return a.tape->record(std::move(Y), {a}, [a, begin, n](Tape& tp, const Tensor& G) {
    Tensor& ga = tp.grad(a);
    for (std::size_t i = 0; i < G.size(); ++i) ga[begin * n + i] += G[i];
  });
}

Var row(Var a, std::size_t r) {
  const Tensor& X = a.value();
  if (r >= X.rows()) throw ShapeError("row: index outside shape " + shape_string(X.shape()));
  const std::size_t n = X.cols();
  Tensor Y({n});
  std::copy_n(&X[r * n], n, &Y[0]);
  return a.tape->record(std::move(Y), {a}, [a, r, n](Tape& tp, const Tensor& G) {
    Tensor& ga = tp.grad(a);
    for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += G[j];
  });
}

// ---- verification -----------------------------------------------------------------

std::vector<Tensor> analytic_gradients(const LossBuilder& build,
                                       std::span<Parameter* const> params) {
  for (Parameter* p : params) p->zero_grad();
  Tape tape;
  const Var loss = build(tape);
  tape.backward(loss);
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (Parameter* p : params) out.push_back(p->grad);
  return out;
}

GradientCheckResult compare_with_finite_differences(const LossBuilder& build,
                                                    std::span<Parameter* const> params,
                                                    std::span<const Tensor> analytic, double h,
                                                    double tol, double abs_floor) {
  auto loss_at = [&build]() {
    Tape tape;
    return build(tape).value().item();
  };
  GradientCheckResult result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Parameter& param = *params[p];
    for (std::size_t i = 0; i < param.value.size(); ++i) {
      const double original = param.value[i];
      param.value[i] = original + h;
      const double up = loss_at();
      param.value[i] = original - h;
      const double down = loss_at();
      param.value[i] = original;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[p][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), abs_floor});
      const double rel = std::abs(a - numeric) / denom;
      ++result.checked;
      if (!(rel <= result.max_relative_error)) {
        result.max_relative_error = rel;
        result.worst_parameter = param.name;
        result.worst_index = i;
      }
    }
  }
  result.passed = result.max_relative_error <= tol;
  return result;
}

GradientCheckResult gradient_check(const LossBuilder& build, std::span<Parameter* const> params,
                                   double h, double tol) {
  const auto analytic = analytic_gradients(build, params);
  return compare_with_finite_differences(build, params, analytic, h, tol);
}

GradientCheckResult gradient_check(const LossBuilder& build, std::span<Parameter* const> params,
                                   const GradientCheckOptions& options) {
  const auto analytic = analytic_gradients(build, params);
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t p = 0; p < params.size(); ++p)
    for (std::size_t i = 0; i < params[p]->value.size(); ++i) coords.emplace_back(p, i);
  if (options.max_coordinates != 0 && coords.size() > options.max_coordinates) {
    Rng rng(splitmix64(options.seed));
    diner::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(options.max_coordinates);
  }
  GradientCheckResult result;
  for (const auto& [p, i] : coords) {
    Parameter& param = *params[p];
    const double original = param.value[i];
    param.value[i] = original + options.h;
    double up, down;
    {
      Tape tape;
      up = build(tape).value().item();
    }
    param.value[i] = original - options.h;
    {
      Tape tape;
      down = build(tape).value().item();
    }
    param.value[i] = original;
    const double numeric = (up - down) / (2.0 * options.h);
    const double a = analytic[p][i];
    const double denom = std::max({std::abs(a), std::abs(numeric), options.abs_floor});
    const double rel = std::abs(a - numeric) / denom;
    ++result.checked;
    if (!(rel <= result.max_relative_error)) {
      result.max_relative_error = rel;
      result.worst_parameter = param.name;
      result.worst_index = i;
    }
  }
  result.passed = result.max_relative_error <= options.tol;
  return result;
}

}  // namespace diner::numeric
