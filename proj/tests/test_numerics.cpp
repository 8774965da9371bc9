#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mim/autodiff.hpp"
#include "mim/rng.hpp"
#include "mim/tensor.hpp"

using namespace mim;

namespace {

// Builds a scalar expression on a fresh tape from the given inputs.
using Expr = std::function<Var(Tape&, const std::vector<Var>&)>;

double eval(const Expr& expr, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.input(t));
  return tape.value(expr(tape, vars))[0];
}

// Analytic gradients vs the central-difference oracle.
double gradcheck(const Expr& expr, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.input(t));
  tape.backward_scalar(expr(tape, vars));
  auto fd = finite_diff([&](const std::vector<Tensor>& xs) { return eval(expr, xs); },
                        inputs);
  double worst = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    worst = std::max(worst, max_rel_error(tape.gradient(vars[i]), fd[i]));
  return worst;
}

// Samples away from relu kinks and zero norms.
Tensor sample_vec(Rng& rng, std::size_t n) {
  Tensor t = Tensor::zeros({n});
  for (double& v : t.data()) {
    v = rng.uniform(-2.0, 2.0);
    if (std::abs(v) < 0.05) v += v < 0 ? -0.1 : 0.1;
  }
  return t;
}

}  // namespace

TEST_CASE("tensor construction validates shape and finiteness") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor({1}, {std::nan("")}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor({1}, {INFINITY}), std::invalid_argument);
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.at(1, 2) == 6);
}

TEST_CASE("forward closed forms") {
  Tape tape;
  Var r = tape.relu(tape.input(Tensor{-1, 2}));
  CHECK(tape.value(r)[0] == 0.0);
  CHECK(tape.value(r)[1] == 2.0);

  Var c1 = tape.cosine(tape.input(Tensor{1, 0}), tape.input(Tensor{1, 0}));
  CHECK(tape.value(c1)[0] == doctest::Approx(1.0).epsilon(1e-12));

  Var c2 = tape.cosine(tape.input(Tensor{1, 1}), tape.input(Tensor{1, 0}));
  CHECK(tape.value(c2)[0] == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
}

TEST_CASE("shape mismatch errors name the primitive and shapes") {
  Tape tape;
  Var a = tape.input(Tensor{1, 2});
  Var b = tape.input(Tensor{1, 2, 3});
  try {
    tape.add(a, b);
    FAIL("expected throw");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    CHECK(msg.find("add") != std::string::npos);
    CHECK(msg.find("[2]") != std::string::npos);
    CHECK(msg.find("[3]") != std::string::npos);
  }
}

TEST_CASE("relu backward at and around zero") {
  Tape tape;
  Var x = tape.input(Tensor{-1, 2});
  Var y = tape.relu(x);
  tape.backward(y, Tensor{1, 1});
  Tensor g = tape.gradient(x);
  CHECK(g[0] == 0.0);
  CHECK(g[1] == 1.0);

  // exactly 0 -> subgradient 0 by convention
  Tape t2;
  Var x0 = t2.input(Tensor{0.0});
  t2.backward(t2.relu(x0), Tensor{1.0});
  CHECK(t2.gradient(x0)[0] == 0.0);
}

TEST_CASE("cosine gradient vanishes at x == y") {
  Tape tape;
  Var x = tape.input(Tensor{0.3, -0.7, 1.1});
  Var y = tape.input(Tensor{0.3, -0.7, 1.1});
  tape.backward_scalar(tape.cosine(x, y));
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(std::abs(tape.gradient(x)[i]) < 1e-12);
    CHECK(std::abs(tape.gradient(y)[i]) < 1e-12);
  }
}

TEST_CASE("backward seed shape is checked") {
  Tape tape;
  Var x = tape.input(Tensor{1, 2});
  CHECK_THROWS_AS(tape.backward(x, Tensor{1.0}), std::invalid_argument);
}

TEST_CASE("finite_diff on x^2 and relu") {
  auto fd = finite_diff(
      [](const std::vector<Tensor>& xs) { return xs[0][0] * xs[0][0]; },
      {Tensor{3.0}});
  CHECK(fd[0][0] == doctest::Approx(6.0).epsilon(1e-6));

  auto fd_relu = finite_diff(
      [](const std::vector<Tensor>& xs) { return std::max(0.0, xs[0][0]); },
      {Tensor{0.0}});
  CHECK(fd_relu[0][0] >= 0.0);
  CHECK(fd_relu[0][0] <= 1.0);

  CHECK_THROWS_AS(finite_diff([](const std::vector<Tensor>&) { return 0.0; },
                              {Tensor{1.0}}, 0.0),
                  std::invalid_argument);
}

TEST_CASE("random 3-layer MLP gradients match finite differences") {
  Rng rng(7);
  for (int rep = 0; rep < 5; ++rep) {
    std::vector<Tensor> inputs = {
        rng.uniform_tensor({4, 6}, -0.5, 0.5), rng.uniform_tensor({4}, -0.5, 0.5),
        rng.uniform_tensor({3, 4}, -0.5, 0.5), rng.uniform_tensor({3}, -0.5, 0.5),
        rng.uniform_tensor({1, 3}, -0.5, 0.5), rng.uniform_tensor({1}, -0.5, 0.5),
        sample_vec(rng, 6)};
    Expr mlp = [](Tape& t, const std::vector<Var>& v) {
      Var h = t.relu(t.affine(v[0], v[6], v[1]));
      h = t.relu(t.affine(v[2], h, v[3]));
      return t.select(t.affine(v[4], h, v[5]), 0);
    };
    CHECK(gradcheck(mlp, inputs) < 1e-4);
  }
}

TEST_CASE("every primitive gradchecks over 100 random cases") {
  Rng rng(42);
  struct Case {
    const char* name;
    Expr expr;
    std::function<std::vector<Tensor>(Rng&)> gen;
  };
  std::vector<Case> cases = {
      {"affine",
       [](Tape& t, const std::vector<Var>& v) {
         return t.mean(t.affine(v[0], v[1], v[2]));
       },
       [](Rng& r) -> std::vector<Tensor> {
         return {r.uniform_tensor({3, 4}, -1, 1), sample_vec(r, 4),
                 r.uniform_tensor({3}, -1, 1)};
       }},
      {"relu",
       [](Tape& t, const std::vector<Var>& v) { return t.mean(t.relu(v[0])); },
       [](Rng& r) -> std::vector<Tensor> { return {sample_vec(r, 5)}; }},
      {"concat",
       [](Tape& t, const std::vector<Var>& v) {
         return t.mean(t.concat({v[0], v[1]}));
       },
       [](Rng& r) -> std::vector<Tensor> { return {sample_vec(r, 3), sample_vec(r, 4)}; }},
      {"outer_product_augmented",
       [](Tape& t, const std::vector<Var>& v) {
         return t.mean(t.outer_aug(v[0], v[1]));
       },
       [](Rng& r) -> std::vector<Tensor> { return {sample_vec(r, 3), sample_vec(r, 5)}; }},
      {"cosine_similarity",
       [](Tape& t, const std::vector<Var>& v) { return t.cosine(v[0], v[1]); },
       [](Rng& r) -> std::vector<Tensor> { return {sample_vec(r, 4), sample_vec(r, 4)}; }},
      {"softmax",
       [](Tape& t, const std::vector<Var>& v) {
         return t.select(t.softmax(v[0]), 1);
       },
       [](Rng& r) -> std::vector<Tensor> { return {sample_vec(r, 5)}; }},
      {"log_sum_exp",
       [](Tape& t, const std::vector<Var>& v) { return t.log_sum_exp(v[0]); },
       [](Rng& r) -> std::vector<Tensor> { return {sample_vec(r, 6)}; }},
      {"add_sub_mul",
       [](Tape& t, const std::vector<Var>& v) {
         return t.mean(t.mul(t.add(v[0], v[1]), t.sub(v[0], v[1])));
       },
       [](Rng& r) -> std::vector<Tensor> { return {sample_vec(r, 4), sample_vec(r, 4)}; }},
      {"scale_smul_select",
       [](Tape& t, const std::vector<Var>& v) {
         return t.mean(t.smul(t.select(t.scale(v[0], 0.7), 0), v[1]));
       },
       [](Rng& r) -> std::vector<Tensor> { return {sample_vec(r, 2), sample_vec(r, 4)}; }},
      {"dot_sigmoid",
       [](Tape& t, const std::vector<Var>& v) {
         return t.select(t.sigmoid(t.dot_product(v[0], v[1])), 0);
       },
       [](Rng& r) -> std::vector<Tensor> { return {sample_vec(r, 4), sample_vec(r, 4)}; }},
      {"bce_with_logits",
       [](Tape& t, const std::vector<Var>& v) {
         return t.bce_with_logits(t.select(v[0], 0), 1.0);
       },
       [](Rng& r) -> std::vector<Tensor> { return {sample_vec(r, 1)}; }},
      {"mean_neg",
       [](Tape& t, const std::vector<Var>& v) { return t.mean(t.neg(v[0])); },
       [](Rng& r) -> std::vector<Tensor> { return {sample_vec(r, 5)}; }},
  };
  for (const auto& c : cases) {
    double worst = 0;
    for (int rep = 0; rep < 100; ++rep)
      worst = std::max(worst, gradcheck(c.expr, c.gen(rng)));
    INFO(c.name);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("determinism: identical inputs give bit-identical values and gradients") {
  auto run = [] {
    Tape tape;
    Rng rng(5);
    Var w = tape.input(rng.uniform_tensor({4, 4}, -1, 1));
    Var x = tape.input(rng.uniform_tensor({4}, -1, 1));
    Var b = tape.input(rng.uniform_tensor({4}, -1, 1));
    Var out = tape.mean(tape.relu(tape.affine(w, x, b)));
    tape.backward_scalar(out);
    return std::make_pair(tape.value(out)[0], tape.gradient(w));
  };
  auto [v1, g1] = run();
  auto [v2, g2] = run();
  CHECK(v1 == v2);
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("outer_aug output length and constant corner") {
  Rng rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    std::size_t d1 = 1 + rng.index(5), d2 = 1 + rng.index(5);
    Tape tape;
    Var a = tape.input(rng.uniform_tensor({d1}, -1, 1));
    Var b = tape.input(rng.uniform_tensor({d2}, -1, 1));
    const Tensor& y = tape.value(tape.outer_aug(a, b));
    CHECK(y.size() == (d1 + 1) * (d2 + 1));
    CHECK(y[y.size() - 1] == 1.0);
  }
}

TEST_CASE("detached leaves keep exactly-zero gradient slots") {
  Tape tape;
  Var a = tape.input(Tensor{1.0, 2.0}, true);
  Var d = tape.input(Tensor{3.0, 4.0}, false);
  tape.backward_scalar(tape.dot_product(a, d));
  Tensor gd = tape.gradient(d);
  CHECK(gd[0] == 0.0);
  CHECK(gd[1] == 0.0);
  CHECK(tape.gradient(a)[0] == 3.0);
}
