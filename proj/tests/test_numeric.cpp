#include <cmath>
#include <numeric>

#include "diner/error.hpp"
#include "diner/numeric.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace diner;
using namespace diner::numeric;
using test_support::random_tensor;

namespace {

// Projects an op output onto a fixed random direction so every output entry
// carries a distinct weight in the scalar loss.
Var project(Tape& tape, Var out, std::uint64_t seed) {
  Rng rng(seed);
  const Var r = tape.constant(random_tensor(rng, out.shape()));
  return sum_all(mul(out, r));
}

GradientCheckResult check_op(ParameterStore& store, const std::function<Var(Tape&)>& op) {
  const auto params = store.all();
  return gradient_check([&](Tape& tape) { return project(tape, op(tape), 99); }, params);
}

}  // namespace

TEST_CASE("softmax of equal logits is uniform") {
  Tape tape;
  const auto p = softmax_rows(tape.constant(Tensor::vector({0, 0, 0}))).value();
  for (std::size_t i = 0; i < 3; ++i) CHECK(p[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("softmax rows sum to one and stay positive") {
  Rng rng(5);
  Tape tape;
  const auto p = softmax_rows(tape.constant(random_tensor(rng, {7, 5}, -30, 30))).value();
  for (std::size_t r = 0; r < 7; ++r) {
    double s = 0.0;
    for (double v : p.row(r)) {
      CHECK(v > 0.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("masked softmax columns get exactly zero") {
  Tape tape;
  const bool mask[] = {true, false, true};
  const auto p = softmax_rows(tape.constant(Tensor::vector({1, 5, 1})), mask).value();
  CHECK(p[1] == 0.0);
  CHECK(p[0] == doctest::Approx(0.5));
}

TEST_CASE("l2 norm of [3,4] is 5") {
  Tape tape;
  CHECK(l2norm_rows(tape.constant(Tensor::vector({3, 4}))).value().item() == 5.0);
}

TEST_CASE("cross entropy of uniform logits is ln 3") {
  Tape tape;
  for (std::size_t target = 0; target < 3; ++target) {
    const auto ce = cross_entropy(tape.constant(Tensor::vector({0.7, 0.7, 0.7})), target);
    CHECK(ce.value().item() == doctest::Approx(std::log(3.0)).epsilon(1e-14));
  }
  CHECK(std::log(3.0) == doctest::Approx(1.098612).epsilon(1e-6));
}

TEST_CASE("cross entropy rejects an out-of-range target") {
  Tape tape;
  CHECK_THROWS_AS(cross_entropy(tape.constant(Tensor::vector({0, 0, 0})), 3), Error);
}

TEST_CASE("gradient of sum(p) is all ones") {
  ParameterStore store;
  Rng rng(1);
  auto& p = store.add("p", random_tensor(rng, {2, 3}));
  Tape tape;
  tape.backward(sum_all(tape.parameter(p)));
  for (double g : p.grad.values()) CHECK(g == 1.0);
}

TEST_CASE("gradient of |p|^2 / 2 is p") {
  ParameterStore store;
  Rng rng(2);
  auto& p = store.add("p", random_tensor(rng, {5}));
  Tape tape;
  const Var v = tape.parameter(p);
  tape.backward(scale(sum_all(mul(v, v)), 0.5));
  for (std::size_t i = 0; i < 5; ++i) CHECK(p.grad[i] == doctest::Approx(p.value[i]).epsilon(1e-15));
}

TEST_CASE("backward requires a scalar loss") {
  Tape tape;
  const Var v = tape.constant(Tensor::vector({1, 2}));
  CHECK_THROWS_AS(tape.backward(v), ShapeError);
}

TEST_CASE("non-finite values are hard errors") {
  Tape tape;
  const Var v = tape.constant(Tensor::vector({1e300, 1e300}));
  CHECK_THROWS_AS(mul(v, v), NumericError);
}

TEST_CASE("shape mismatch names both operands") {
  Tape tape;
  const Var a = tape.constant(Tensor({2, 3}));
  const Var b = tape.constant(Tensor({2, 3}));
  try {
    matmul(a, b);
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, tape.constant(Tensor({3}))), ShapeError);
}

TEST_CASE("two-layer tanh network matches finite differences") {
  Rng rng(11);
  ParameterStore store;
  auto& w1 = store.add("w1", random_tensor(rng, {4, 3}));
  auto& b1 = store.add("b1", random_tensor(rng, {4}));
  auto& w2 = store.add("w2", random_tensor(rng, {3, 4}));
  const Tensor x = random_tensor(rng, {5, 3});
  auto loss = [&](Tape& tape) {
    const Var h = numeric::tanh(add_row(matmul_nt(tape.constant(x), tape.parameter(w1)),
                                        tape.parameter(b1)));
    const Var logits = matmul_nt(h, tape.parameter(w2));
    return cross_entropy(row(logits, 2), 1);
  };
  const auto result = gradient_check(loss, store.all());
  CHECK(result.passed);
  CHECK(result.max_relative_error < 1e-6);
  CHECK(result.checked == 4 * 3 + 4 + 3 * 4);
}

TEST_CASE("identity loss has zero gradient error") {
  ParameterStore store;
  // At p = 0 both probes p +- h are exact, so the difference quotient is exact too.
  auto& p = store.add("p", Tensor::scalar(0.0));
  const auto result = gradient_check([&](Tape& t) { return t.parameter(p); }, store.all());
  CHECK(result.max_relative_error <= 1e-12);
}

TEST_CASE("a corrupted gradient fails the check") {
  Rng rng(3);
  ParameterStore store;
  auto& p = store.add("p", random_tensor(rng, {6}));
  auto loss = [&](Tape& t) { return sum_all(numeric::tanh(t.parameter(p))); };
  auto analytic = analytic_gradients(loss, store.all());
  const auto params = store.all();
  CHECK(compare_with_finite_differences(loss, params, analytic).passed);
  for (double& g : analytic[0].values()) g *= 1.01;
  const auto bad = compare_with_finite_differences(loss, params, analytic);
  CHECK_FALSE(bad.passed);
  CHECK(bad.max_relative_error == doctest::Approx(0.01 / 1.01).epsilon(1e-3));
}

TEST_CASE("sampled gradient check visits the requested number of coordinates") {
  Rng rng(4);
  ParameterStore store;
  auto& p = store.add("p", random_tensor(rng, {10, 10}));
  GradientCheckOptions options;
  options.max_coordinates = 17;
  options.seed = 8;
  const auto r = gradient_check([&](Tape& t) { return sum_all(gelu(t.parameter(p))); },
                                store.all(), options);
  CHECK(r.checked == 17);
  CHECK(r.passed);
}

TEST_CASE("every differentiable op passes the gradient check in isolation") {
  Rng rng(21);
  ParameterStore store;
  auto& a = store.add("a", random_tensor(rng, {3, 4}));
  auto& b = store.add("b", random_tensor(rng, {4, 2}));
  auto& c = store.add("c", random_tensor(rng, {3, 4}));
  auto& v = store.add("v", random_tensor(rng, {4}));
  auto& s = store.add("s", random_tensor(rng, {3}, 0.5, 2.0));
  auto& table = store.add("table", random_tensor(rng, {6, 4}));
  auto& gain = store.add("gain", random_tensor(rng, {4}, 0.5, 1.5));
  auto& bias = store.add("bias", random_tensor(rng, {4}));

  auto P = [](Tape& t, Parameter& p) { return t.parameter(p); };
  const std::vector<std::pair<const char*, std::function<Var(Tape&)>>> ops = {
      {"matmul", [&](Tape& t) { return matmul(P(t, a), P(t, b)); }},
      {"matmul_nt", [&](Tape& t) { return matmul_nt(P(t, a), P(t, c)); }},
      {"add", [&](Tape& t) { return add(P(t, a), P(t, c)); }},
      {"sub", [&](Tape& t) { return sub(P(t, a), P(t, c)); }},
      {"mul", [&](Tape& t) { return mul(P(t, a), P(t, c)); }},
      {"add_row", [&](Tape& t) { return add_row(P(t, a), P(t, v)); }},
      {"scale", [&](Tape& t) { return scale(P(t, a), -2.5); }},
      {"add_scalar", [&](Tape& t) { return add_scalar(P(t, a), 0.75); }},
      {"add_n", [&](Tape& t) {
         const Var terms[] = {P(t, a), P(t, c), P(t, a)};
         return add_n(terms);
       }},
      {"tanh", [&](Tape& t) { return numeric::tanh(P(t, a)); }},
      {"sigmoid", [&](Tape& t) { return sigmoid(P(t, a)); }},
      {"gelu", [&](Tape& t) { return gelu(P(t, a)); }},
      {"softmax", [&](Tape& t) { return softmax_rows(P(t, a)); }},
      {"softmax_masked", [&](Tape& t) {
         static const bool mask[] = {true, false, true, true};
         return softmax_rows(P(t, a), mask);
       }},
      {"l2norm", [&](Tape& t) { return l2norm_rows(P(t, a)); }},
      {"clamp_min", [&](Tape& t) { return clamp_min(P(t, s), 1.0); }},
      {"div_rows", [&](Tape& t) { return div_rows(P(t, a), P(t, s)); }},
      {"mean_axis0", [&](Tape& t) { return mean_axis(P(t, a), 0); }},
      {"mean_axis1", [&](Tape& t) { return mean_axis(P(t, a), 1); }},
      {"mean_rows_masked", [&](Tape& t) {
         static const bool mask[] = {true, false, true};
         return mean_rows_masked(P(t, a), mask);
       }},
      {"embedding", [&](Tape& t) {
         static const int ids[] = {2, 0, 2, 5};
         return embedding(P(t, table), ids);
       }},
      {"layer_norm", [&](Tape& t) { return layer_norm(P(t, a), P(t, gain), P(t, bias)); }},
      {"cross_entropy", [&](Tape& t) { return cross_entropy(P(t, v), 2); }},
      {"concat_cols", [&](Tape& t) { return concat_cols(P(t, a), P(t, c)); }},
      {"slice_cols", [&](Tape& t) { return slice_cols(P(t, a), 1, 3); }},
      {"slice_rows", [&](Tape& t) { return slice_rows(P(t, a), 1, 3); }},
      {"row", [&](Tape& t) { return row(P(t, a), 1); }},
  };
  for (const auto& [name, op] : ops) {
    CAPTURE(name);
    const auto r = check_op(store, op);
    CHECK(r.passed);
    CHECK(r.max_relative_error <= 1e-4);
  }
}

TEST_CASE("clamp_min passes gradient only above the floor") {
  ParameterStore store;
  auto& p = store.add("p", Tensor::vector({-1.0, 2.0}));
  Tape tape;
  tape.backward(sum_all(clamp_min(tape.parameter(p), 0.0)));
  CHECK(p.grad[0] == 0.0);
  CHECK(p.grad[1] == 1.0);
}

TEST_CASE("zero-norm rows have a zero norm gradient") {
  ParameterStore store;
  auto& p = store.add("p", Tensor({2, 3}));
  Tape tape;
  tape.backward(sum_all(l2norm_rows(tape.parameter(p))));
  for (double g : p.grad.values()) CHECK(g == 0.0);
}

TEST_CASE("layer norm standardizes each row") {
  Rng rng(6);
  Tape tape;
  const auto y = layer_norm(tape.constant(random_tensor(rng, {3, 8}, -5, 5)),
                            tape.constant(Tensor({8}, 1.0)), tape.constant(Tensor({8})))
                     .value();
  for (std::size_t r = 0; r < 3; ++r) {
    double mean = 0.0, var = 0.0;
    for (double v : y.row(r)) mean += v / 8.0;
    for (double v : y.row(r)) var += (v - mean) * (v - mean) / 8.0;
    CHECK(std::abs(mean) < 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("dropout is seeded, inverted and the identity at p = 0") {
  Rng data_rng(7);
  const Tensor x = random_tensor(data_rng, {4, 50});
  Tape tape;
  const Var v = tape.constant(x);
  Rng r1(42), r2(42);
  const auto a = dropout(v, 0.3, r1).value();
  const auto b = dropout(v, 0.3, r2).value();
  CHECK(a == b);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK((a[i] == 0.0 || std::abs(a[i] - x[i] / 0.7) < 1e-12));
  }
  Rng r3(1);
  CHECK(dropout(v, 0.0, r3).value() == x);
}

TEST_CASE("forward passes are bit-identical across runs") {
  auto run = [] {
    Rng rng(9);
    ParameterStore store;
    auto& w = store.add("w", random_tensor(rng, {4, 4}));
    Tape tape;
    const Var x = tape.constant(random_tensor(rng, {3, 4}));
    const Var y = softmax_rows(gelu(matmul_nt(x, tape.parameter(w))));
    tape.backward(sum_all(mul(y, y)));
    return std::make_pair(y.value(), w.grad);
  };
  CHECK(run() == run());
}

TEST_CASE("parameter store keeps order and rejects duplicates") {
  ParameterStore store;
  store.add("x", Tensor({2}));
  store.add("y", Tensor({3}), false);
  CHECK(store.size() == 2);
  CHECK(store.scalar_count() == 5);
  CHECK(store.all()[1]->name == "y");
  CHECK_FALSE(store.get("y").decay);
  CHECK_THROWS(store.add("x", Tensor({1})));
  CHECK_THROWS(store.get("z"));
}
