#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "gradgen/kernels.hpp"
#include "gradgen/rng.hpp"
#include "gradgen/tensor.hpp"

using namespace gradgen;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo = -2.0, double hi = 2.0) {
  std::vector<double> v(size_t(numel(shape)));
  for (double& x : v) x = rng.uniform(lo, hi);
  return constant(std::move(shape), std::move(v));
}

// Scalarize y via a fixed random projection so multi-output ops reduce to one
// scalar root for both autodiff and the finite-difference oracle.
struct GradCheck {
  std::function<Tensor(const std::vector<Tensor>&)> build;
  std::vector<Tensor> inputs;

  double run() const {
    Rng rng(99);
    Tape tape;
    std::vector<Tensor> leaves;
    for (const Tensor& x : inputs) leaves.push_back(tape.leaf(x.shape, *x.data));
    Tensor y = build(leaves);
    Tensor w = random_tensor(rng, y.shape, -1.0, 1.0);
    Tensor root = y.shape.empty() ? mul(y, tape.leaf({}, {1.3})) : dot(y, w);
    Gradients g = tape.backward(root);

    double worst = 0.0;
    for (size_t i = 0; i < inputs.size(); ++i) {
      Tensor fd = finite_diff(
          [&](const Tensor& xi) {
            std::vector<Tensor> args = inputs;
            args[i] = xi;
            Tensor yy = build(args);
            if (yy.shape.empty()) return yy.scalar() * 1.3;
            double s = 0.0;
            for (int64_t j = 0; j < yy.size(); ++j) s += yy.at(j) * w.at(j);
            return s;
          },
          inputs[i], 1e-6);
      worst = std::max(worst, max_rel_err(g.at(leaves[i]), fd));
    }
    return worst;
  }
};

}  // namespace

TEST_CASE("elementwise arithmetic examples") {
  Tensor a = constant({2}, {1, 2});
  Tensor b = constant({2}, {3, 4});
  Tensor c = add(a, b);
  CHECK(c.at(0) == 4.0);
  CHECK(c.at(1) == 6.0);

  Tensor eye = constant({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor x = constant({3, 1}, {0.3, -1.7, 2.5});
  Tensor y = matmul(eye, x);
  for (int i = 0; i < 3; ++i) CHECK(y.at(i) == x.at(i));

  Tensor sp = softplus(constant({1}, {0.0}));
  CHECK(sp.at(0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("backward basics") {
  Tape tape;
  Tensor x = tape.leaf({3}, {1, 2, 3});
  Tensor root = sum(mul(x, x));
  Gradients g = tape.backward(root);
  Tensor gx = g.at(x);
  CHECK(gx.at(0) == 2.0);
  CHECK(gx.at(1) == 4.0);
  CHECK(gx.at(2) == 6.0);
}

TEST_CASE("negative cosine similarity is stationary at alignment") {
  Tape tape;
  Tensor u = tape.leaf({3}, {0.3, -0.5, 0.9});
  Tensor v = tape.leaf({3}, {0.3, -0.5, 0.9});
  Tensor cs = dot(l2_normalize(u), l2_normalize(v));
  Tensor root = neg(cs);
  Gradients g = tape.backward(root);
  Tensor gu = g.at(u);
  for (int i = 0; i < 3; ++i) CHECK(std::fabs(gu.at(i)) < 1e-12);
}

TEST_CASE("finite_diff examples") {
  Tensor x = constant({4}, {0.1, -0.4, 1.2, 0.8});
  Tensor g = finite_diff([](const Tensor& t) {
    double s = 0;
    for (int64_t i = 0; i < t.size(); ++i) s += t.at(i);
    return s;
  }, x, 1e-6);
  for (int64_t i = 0; i < 4; ++i) CHECK(g.at(i) == doctest::Approx(1.0).epsilon(1e-9));

  Tensor two = constant({1}, {2.0});
  Tensor d = finite_diff([](const Tensor& t) { return std::pow(t.at(0), 3.0); }, two, 1e-6);
  CHECK(std::fabs(d.at(0) - 12.0) < 1e-5);

  CHECK_THROWS_AS(finite_diff([](const Tensor&) { return std::nan(""); }, two, 1e-6),
                  std::runtime_error);
  CHECK_THROWS_AS(finite_diff([](const Tensor& t) { return t.at(0); }, two, 0.0),
                  std::invalid_argument);
}

TEST_CASE("backward matches finite differences on every op") {
  Rng rng(7);
  auto positive = [&](Shape s) { return random_tensor(rng, s, 0.2, 2.0); };

  std::vector<std::pair<const char*, GradCheck>> cases;
  Tensor a = random_tensor(rng, {3, 4});
  Tensor b = random_tensor(rng, {3, 4});
  cases.push_back({"add", {[](auto& v) { return add(v[0], v[1]); }, {a, b}}});
  cases.push_back({"sub", {[](auto& v) { return sub(v[0], v[1]); }, {a, b}}});
  cases.push_back({"mul", {[](auto& v) { return mul(v[0], v[1]); }, {a, b}}});
  cases.push_back({"div", {[](auto& v) { return div(v[0], v[1]); }, {a, positive({3, 4})}}});
  cases.push_back({"matmul", {[](auto& v) { return matmul(v[0], v[1]); },
                              {random_tensor(rng, {3, 5}), random_tensor(rng, {5, 2})}}});
  cases.push_back({"matmul_nt", {[](auto& v) { return matmul(v[0], v[1], true); },
                                 {random_tensor(rng, {3, 5}), random_tensor(rng, {2, 5})}}});
  cases.push_back({"sum", {[](auto& v) { return sum(v[0]); }, {a}}});
  cases.push_back({"sum_axis0", {[](auto& v) { return sum(v[0], 0); }, {a}}});
  cases.push_back({"sum_axis1", {[](auto& v) { return sum(v[0], 1); }, {a}}});
  cases.push_back({"mean", {[](auto& v) { return mean(v[0]); }, {a}}});
  cases.push_back({"mean_axis", {[](auto& v) { return mean(v[0], 1); }, {a}}});
  cases.push_back({"broadcast", {[](auto& v) { return broadcast_to(v[0], {5, 3, 4}); }, {a}}});
  cases.push_back({"broadcast_col", {[](auto& v) { return broadcast_to(v[0], {3, 4}); },
                                     {random_tensor(rng, {3, 1})}}});
  cases.push_back({"reshape", {[](auto& v) { return reshape(v[0], {12}); }, {a}}});
  cases.push_back({"gather", {[](auto& v) { return gather(v[0], {0, 3, 3, 7, 11}, {5}); }, {a}}});
  cases.push_back({"slice", {[](auto& v) { return slice_rows(v[0], 1, 3); }, {a}}});
  cases.push_back({"concat", {[](auto& v) { return concat_rows({v[0], v[1]}); }, {a, b}}});
  cases.push_back({"tanh", {[](auto& v) { return tanh_(v[0]); }, {a}}});
  cases.push_back({"sigmoid", {[](auto& v) { return sigmoid(v[0]); }, {a}}});
  cases.push_back({"exp", {[](auto& v) { return exp_(v[0]); }, {a}}});
  cases.push_back({"log", {[](auto& v) { return log_(v[0]); }, {positive({3, 4})}}});
  cases.push_back({"softplus", {[](auto& v) { return softplus(v[0]); }, {a}}});
  cases.push_back({"sqrt", {[](auto& v) { return sqrt_(v[0]); }, {positive({3, 4})}}});
  cases.push_back({"power", {[](auto& v) { return pow_(v[0], 2.5); }, {positive({3, 4})}}});
  // keep inputs >= 1e-3 away from the max-with-constant kink
  {
    std::vector<double> vals(12);
    for (double& v : vals) {
      v = rng.uniform(-2.0, 2.0);
      if (std::fabs(v - 0.5) < 1e-2) v += 0.05;
    }
    cases.push_back({"max-with-constant",
                     {[](auto& v) { return max_const(v[0], 0.5); }, {constant({3, 4}, vals)}}});
  }
  cases.push_back({"softmax", {[](auto& v) { return softmax(v[0]); }, {a}}});
  cases.push_back({"l2-normalize", {[](auto& v) { return l2_normalize(v[0]); },
                                    {random_tensor(rng, {3, 4}, 0.5, 2.0)}}});
  cases.push_back({"sin", {[](auto& v) { return sin_(v[0]); }, {a}}});
  cases.push_back({"cos", {[](auto& v) { return cos_(v[0]); }, {a}}});
  cases.push_back({"scale", {[](auto& v) { return scale(v[0], -1.7); }, {a}}});
  cases.push_back({"addc", {[](auto& v) { return add_const(v[0], 0.3); }, {a}}});
  cases.push_back({"composite", {[](auto& v) {
    Tensor t = tanh_(matmul(v[0], v[1]));
    return l2_normalize(reshape(t, {1, 6}));
  }, {random_tensor(rng, {2, 4}), random_tensor(rng, {4, 3})}}});

  for (auto& [name, check] : cases) {
    INFO("op: " << name);
    CHECK(check.run() < 1e-6);
  }
}

TEST_CASE("gradient accumulation across fan-out is exact") {
  Tape tape;
  Tensor x = tape.leaf({3}, {0.4, -1.1, 2.2});
  auto f = [&](const Tensor& t) { return sum(mul(tanh_(t), t)); };
  Tensor once = f(x);
  Gradients g1 = tape.backward(once);
  Tensor twice = add(f(x), f(x));
  Gradients g2 = tape.backward(twice);
  for (int i = 0; i < 3; ++i) CHECK(g2.at(x).at(i) == 2.0 * g1.at(x).at(i));
}

TEST_CASE("identical graph and inputs give bit-identical gradients") {
  auto run = [] {
    Tape tape;
    Tensor x = tape.leaf({64}, std::vector<double>(64, 0.37));
    Tensor w = tape.leaf({64}, std::vector<double>(64, -0.21));
    Tensor root = sum(mul(sigmoid(mul(x, w)), tanh_(x)));
    Gradients g = tape.backward(root);
    return *g.at(x).data;
  };
  auto a = run();
  auto b = run();
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

TEST_CASE("tape can be swept repeatedly") {
  Tape tape;
  Tensor x = tape.leaf({2}, {1.0, 2.0});
  Tensor root = sum(mul(x, x));
  Tensor g1 = tape.backward(root).at(x);
  Tensor g2 = tape.backward(root).at(x);
  CHECK(g1.at(0) == g2.at(0));
  CHECK(g1.at(1) == g2.at(1));
}

TEST_CASE("error reporting") {
  Tensor a = constant({2}, {1, 2});
  Tensor b = constant({3}, {1, 2, 3});
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("[2]"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("[3]"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(record("convolve", {a}), doctest::Contains("unknown op kind"),
                       std::invalid_argument);
  CHECK_THROWS_AS(constant({1}, {std::nan("")}), std::invalid_argument);

  Tape tape;
  Tensor x = tape.leaf({2}, {1, 2});
  CHECK_THROWS_AS((void)tape.backward(x), std::invalid_argument);

  Tape other;
  Tensor y = other.leaf({2}, {1, 2});
  CHECK_THROWS_AS(add(x, y), std::invalid_argument);
}

TEST_CASE("string op dispatch mirrors the native ops") {
  Tensor a = constant({2, 2}, {1, 2, 3, 4});
  Tensor viaStr = record("softmax", {a});
  Tensor native = softmax(a);
  for (int64_t i = 0; i < 4; ++i) CHECK(viaStr.at(i) == native.at(i));
  Tensor p = record("power", {a}, {2.0});
  CHECK(p.at(3) == 16.0);
}

TEST_CASE("serial and OpenMP kernel paths are bitwise identical") {
  Rng rng(21);
  auto run_graph = [&](bool parallel) {
    kern::set_parallel(parallel);
    Tape tape;
    Tensor x = tape.leaf({70, 90}, [&] {
      std::vector<double> v(70 * 90);
      Rng r(5);
      for (double& e : v) e = r.uniform(-1, 1);
      return v;
    }());
    Tensor w = tape.leaf({90, 30}, [&] {
      std::vector<double> v(90 * 30);
      Rng r(6);
      for (double& e : v) e = r.uniform(-1, 1);
      return v;
    }());
    Tensor h = tanh_(matmul(x, w));
    Tensor root = add(mean(mul(h, h)), sum(softmax(h)));
    Gradients g = tape.backward(root);
    std::vector<double> out = *root.data;
    auto gx = *g.at(x).data;
    out.insert(out.end(), gx.begin(), gx.end());
    auto gw = *g.at(w).data;
    out.insert(out.end(), gw.begin(), gw.end());
    return out;
  };
  auto serial = run_graph(false);
  auto par = run_graph(true);
  kern::set_parallel(true);
  REQUIRE(serial.size() == par.size());
  CHECK(std::memcmp(serial.data(), par.data(), serial.size() * sizeof(double)) == 0);

  // blocked reduction determinism across the block boundary
  std::vector<double> big(100000);
  for (double& v : big) v = rng.uniform(-1, 1);
  kern::set_parallel(false);
  double s1 = kern::sum(big.data(), int64_t(big.size()));
  kern::set_parallel(true);
  double s2 = kern::sum(big.data(), int64_t(big.size()));
  CHECK(s1 == s2);
}
