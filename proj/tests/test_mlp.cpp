#include <doctest.h>

#include <cmath>
#include <vector>

#include "flexihaz/errors.hpp"
#include "flexihaz/mlp.hpp"
#include "flexihaz/rng.hpp"
#include "support.hpp"

using namespace flexihaz;
using namespace flexihaz::nn;

namespace {

MlpParams hand_net() {
  // One hidden unit: W0=[1], v0=-2, W1=[3], v1=1.
  std::vector<int> w{1, 1, 1};
  MlpParams p = init_params(w, 0);
  p.weights[0](0, 0) = 1.0;
  p.biases[0](0) = -2.0;
  p.weights[1](0, 0) = 3.0;
  p.biases[1](0) = 1.0;
  return p;
}

std::vector<int> random_widths(Rng& rng) {
  const int depth = 1 + static_cast<int>(rng.below(2));
  std::vector<int> w{1 + static_cast<int>(rng.below(4))};
  for (int l = 0; l < depth; ++l) w.push_back(1 + static_cast<int>(rng.below(8)));
  w.push_back(1);
  return w;
}

}  // namespace

TEST_SUITE("core-nn") {

TEST_CASE("init_params shapes") {
  std::vector<int> a{2, 1};
  auto p = init_params(a, 123);
  REQUIRE(p.weights.size() == 1);
  CHECK(p.weights[0].rows() == 1);
  CHECK(p.weights[0].cols() == 2);
  CHECK(p.biases[0](0) == 0.0);

  std::vector<int> b{4, 20, 20, 1};
  auto q = init_params(b, 5);
  REQUIRE(q.weights.size() == 3);
  CHECK(q.weights[0].rows() == 20);
  CHECK(q.weights[0].cols() == 4);
  CHECK(q.weights[1].rows() == 20);
  CHECK(q.weights[1].cols() == 20);
  CHECK(q.weights[2].rows() == 1);
  CHECK(q.weights[2].cols() == 20);
  CHECK(q.widths() == b);
  for (const auto& v : q.biases) CHECK(v.isZero());
  // He-uniform bound.
  CHECK(q.weights[1].cwiseAbs().maxCoeff() <= std::sqrt(6.0 / 20.0));
}

TEST_CASE("init_params is deterministic in the seed") {
  std::vector<int> w{3, 8, 8, 1};
  auto a = init_params(w, 42);
  auto b = init_params(w, 42);
  auto c = init_params(w, 43);
  CHECK(a.flatten() == b.flatten());
  CHECK(a.flatten() != c.flatten());
}

TEST_CASE("init_params rejects invalid widths") {
  CHECK_THROWS_AS(init_params(std::vector<int>{}, 1), ConfigError);
  CHECK_THROWS_AS(init_params(std::vector<int>{3}, 1), ConfigError);
  CHECK_THROWS_AS(init_params(std::vector<int>{3, 0, 1}, 1), ConfigError);
  CHECK_THROWS_AS(init_params(std::vector<int>{3, 4, 2}, 1), ConfigError);
}

TEST_CASE("forward: zero weights give the final bias") {
  auto p = testing::constant_network({3, 5, 5, 1}, 0.7);
  Rng rng(3);
  for (int k = 0; k < 10; ++k) {
    Eigen::VectorXd u = Eigen::VectorXd::NullaryExpr(3, [&] { return rng.uniform(-5, 5); });
    CHECK(forward(p, u).output == 0.7);
  }
}

TEST_CASE("forward: hand evaluation") {
  auto p = hand_net();
  CHECK(forward(p, Eigen::VectorXd::Constant(1, 5.0)).output == doctest::Approx(10.0));
  CHECK(forward(p, Eigen::VectorXd::Constant(1, 1.0)).output == doctest::Approx(1.0));
}

TEST_CASE("forward: input_scale divides the input") {
  auto p = hand_net();
  p.input_scale(0) = 2.0;
  CHECK(forward(p, Eigen::VectorXd::Constant(1, 10.0)).output == doctest::Approx(10.0));
}

TEST_CASE("forward: shape mismatch") {
  auto p = hand_net();
  CHECK_THROWS_AS(forward(p, Eigen::VectorXd::Zero(2)), ShapeError);
}

TEST_CASE("forward is pure") {
  std::vector<int> w{3, 6, 6, 1};
  auto p = init_params(w, 9);
  Eigen::VectorXd u(3);
  u << 0.3, -0.2, 0.9;
  const double a = forward(p, u).output;
  const double b = forward(p, u).output;
  CHECK(a == b);
}

TEST_CASE("forward_batch agrees with forward") {
  std::vector<int> w{4, 7, 5, 1};
  auto p = init_params(w, 10);
  p.input_scale(0) = 3.0;
  Rng rng(11);
  Eigen::MatrixXd in = Eigen::MatrixXd::NullaryExpr(4, 37, [&] { return rng.uniform(-2, 2); });
  BatchCache cache;
  Eigen::RowVectorXd out;
  forward_batch(p, in, cache, out);
  REQUIRE(out.size() == 37);
  for (Eigen::Index b = 0; b < 37; ++b) {
    CHECK(out(b) == doctest::Approx(forward(p, in.col(b)).output).epsilon(1e-13));
  }
}

TEST_CASE("backward: zero upstream gives zero gradients") {
  std::vector<int> w{3, 6, 1};
  auto p = init_params(w, 2);
  auto fr = forward(p, Eigen::VectorXd::Ones(3));
  CHECK(backward(p, fr.cache, 0.0).flatten().isZero());
}

TEST_CASE("backward: affine network") {
  std::vector<int> w{3, 1};
  auto p = init_params(w, 4);
  Eigen::VectorXd u(3);
  u << 1.5, -2.0, 0.25;
  auto fr = forward(p, u);
  auto g = backward(p, fr.cache, 1.0);
  CHECK(g.weights[0](0, 0) == doctest::Approx(1.5));
  CHECK(g.weights[0](0, 1) == doctest::Approx(-2.0));
  CHECK(g.weights[0](0, 2) == doctest::Approx(0.25));
  CHECK(g.biases[0](0) == doctest::Approx(1.0));
}

TEST_CASE("backward: cache mismatch") {
  std::vector<int> w{3, 6, 1};
  std::vector<int> v{3, 4, 1};
  auto p = init_params(w, 2);
  auto q = init_params(v, 2);
  auto fr = forward(q, Eigen::VectorXd::Ones(3));
  CHECK_THROWS_AS(backward(p, fr.cache, 1.0), ShapeError);
}

TEST_CASE("backward matches long-double central differences on 100 random nets") {
  Rng rng(2024);
  int checked = 0;
  while (checked < 100) {
    auto widths = random_widths(rng);
    auto p = init_params(widths, rng.engine()());
    for (auto& v : p.biases) {
      for (Eigen::Index k = 0; k < v.size(); ++k) v(k) = rng.uniform(-0.5, 0.5);
    }
    Eigen::VectorXd u(widths[0]);
    for (Eigen::Index k = 0; k < u.size(); ++k) u(k) = rng.uniform(-2, 2);
    std::vector<testing::ld> ul(u.data(), u.data() + u.size());
    testing::ld min_pre = 1e300L;
    testing::naive_forward(p, ul, &min_pre);
    if (min_pre < 1e-3L) continue;  // too close to a kink for step 1e-6

    const double upstream = rng.uniform(-2, 2);
    auto grad = backward(p, forward(p, u).cache, upstream).flatten();
    Eigen::VectorXd flat = p.flatten();
    const double h = 1e-6;
    for (Eigen::Index k = 0; k < flat.size(); ++k) {
      MlpParams plus = p;
      MlpParams minus = p;
      Eigen::VectorXd fp = flat;
      Eigen::VectorXd fm = flat;
      fp(k) += h;
      fm(k) -= h;
      plus.unflatten(fp);
      minus.unflatten(fm);
      const testing::ld fd =
          (testing::naive_forward(plus, ul) - testing::naive_forward(minus, ul)) /
          static_cast<testing::ld>(fp(k) - fm(k));
      CHECK(testing::close(grad(k), static_cast<double>(upstream * fd)));
    }
    ++checked;
  }
}

TEST_CASE("backward_batch accumulates the per-sample gradients") {
  std::vector<int> w{3, 5, 4, 1};
  auto p = init_params(w, 8);
  Rng rng(1);
  Eigen::MatrixXd in = Eigen::MatrixXd::NullaryExpr(3, 9, [&] { return rng.uniform(-1, 1); });
  Eigen::RowVectorXd up = Eigen::RowVectorXd::NullaryExpr(9, [&] { return rng.uniform(-1, 1); });
  BatchCache cache;
  Eigen::RowVectorXd out;
  forward_batch(p, in, cache, out);
  MlpParams acc = p.zeros_like();
  backward_batch(p, cache, up, acc);
  Eigen::VectorXd ref = Eigen::VectorXd::Zero(acc.flatten().size());
  for (Eigen::Index b = 0; b < 9; ++b) {
    ref += backward(p, forward(p, in.col(b)).cache, up(b)).flatten();
  }
  CHECK((acc.flatten() - ref).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("input_gradient matches differences inside an activation region") {
  std::vector<int> w{3, 8, 8, 1};
  Rng rng(77);
  int checked = 0;
  while (checked < 20) {
    auto p = init_params(w, rng.engine()());
    Eigen::VectorXd u(3);
    for (Eigen::Index k = 0; k < 3; ++k) u(k) = rng.uniform(-1, 1);
    std::vector<testing::ld> ul(u.data(), u.data() + 3);
    testing::ld min_pre = 1e300L;
    testing::naive_forward(p, ul, &min_pre);
    if (min_pre < 1e-3L) continue;
    auto fr = forward(p, u);
    Eigen::VectorXd J = input_gradient(p, fr.cache);
    for (Eigen::Index k = 0; k < 3; ++k) {
      const double h = 1e-7;
      auto up = ul;
      auto dn = ul;
      up[static_cast<std::size_t>(k)] += h;
      dn[static_cast<std::size_t>(k)] -= h;
      // Piecewise affine: the difference quotient is exact up to rounding.
      const testing::ld fd =
          (testing::naive_forward(p, up) - testing::naive_forward(p, dn)) / (2 * h);
      CHECK(J(k) == doctest::Approx(static_cast<double>(fd)).epsilon(1e-9));
    }
    ++checked;
  }
}

TEST_CASE("adam_step: zero gradients leave parameters fixed") {
  std::vector<int> w{2, 3, 1};
  auto p = init_params(w, 1);
  Eigen::VectorXd theta = Eigen::VectorXd::Constant(2, 0.5);
  const auto before = p.flatten();
  auto state = AdamState::create(p, 2);
  adam_step(p, theta, p.zeros_like(), Eigen::VectorXd::Zero(2), state);
  CHECK(state.step_count == 1);
  CHECK(p.flatten() == before);
  CHECK(theta == Eigen::VectorXd::Constant(2, 0.5));
}

TEST_CASE("adam_step: first step has magnitude lr regardless of gradient scale") {
  for (double g : {1e-4, 1.0, 250.0, -3.0}) {
    std::vector<int> w{1, 1};
    auto p = init_params(w, 1);
    p.weights[0](0, 0) = 0.0;
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(1);
    AdamOptions opt;
    opt.learning_rate = 0.01;
    auto state = AdamState::create(p, 1, opt);
    auto grads = p.zeros_like();
    grads.weights[0](0, 0) = g;
    adam_step(p, theta, grads, Eigen::VectorXd::Constant(1, g), state);
    const double expected = -0.01 * g / (std::fabs(g) + 1e-8);
    CHECK(p.weights[0](0, 0) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(theta(0) == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("adam_step: constant gradient keeps steps near lr") {
  std::vector<int> w{1, 1};
  auto p = init_params(w, 1);
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(1);
  auto state = AdamState::create(p, 1);
  auto grads = p.zeros_like();
  grads.biases[0](0) = 0.3;
  double prev = p.biases[0](0);
  for (int s = 0; s < 200; ++s) {
    adam_step(p, theta, grads, Eigen::VectorXd::Constant(1, 0.3), state);
    const double step = prev - p.biases[0](0);
    CHECK(step == doctest::Approx(1e-3 * 0.3 / (0.3 + 1e-8)).epsilon(1e-9));
    prev = p.biases[0](0);
  }
  CHECK(state.step_count == 200);
}

TEST_CASE("adam_step: sign pattern invariant to gradient scaling") {
  std::vector<int> w{3, 4, 1};
  Rng rng(5);
  auto base = init_params(w, 3);
  auto grads = base.zeros_like();
  Eigen::VectorXd flat = Eigen::VectorXd::NullaryExpr(grads.flatten().size(),
                                                      [&] { return rng.uniform(-1, 1); });
  for (double c : {1e-3, 1.0, 1e3}) {
    auto p = base;
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(1);
    auto g = grads;
    g.unflatten(flat * c);
    auto state = AdamState::create(p, 1);
    adam_step(p, theta, g, Eigen::VectorXd::Constant(1, c), state);
    Eigen::VectorXd delta = p.flatten() - base.flatten();
    for (Eigen::Index k = 0; k < delta.size(); ++k) {
      CHECK((delta(k) < 0) == (flat(k) > 0));
    }
  }
}

TEST_CASE("adam_step: non-finite gradient is rejected without side effects") {
  std::vector<int> w{2, 3, 1};
  auto p = init_params(w, 1);
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(1);
  auto state = AdamState::create(p, 1);
  auto g = p.zeros_like();
  g.weights[1](0, 2) = std::nan("");
  const auto before = p.flatten();
  CHECK_THROWS_AS(adam_step(p, theta, g, Eigen::VectorXd::Zero(1), state), TrainingError);
  CHECK(p.flatten() == before);
  CHECK(state.step_count == 0);
  CHECK_THROWS_AS(adam_step(p, theta, p.zeros_like(),
                            Eigen::VectorXd::Constant(1, INFINITY), state),
                  TrainingError);
}

TEST_CASE("adam trajectories are reproducible") {
  std::vector<int> w{2, 4, 1};
  auto run = [&] {
    auto p = init_params(w, 17);
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(1);
    auto state = AdamState::create(p, 1);
    Rng rng(6);
    for (int s = 0; s < 50; ++s) {
      auto g = p.zeros_like();
      Eigen::VectorXd flat = Eigen::VectorXd::NullaryExpr(g.flatten().size(),
                                                          [&] { return rng.uniform(-1, 1); });
      g.unflatten(flat);
      adam_step(p, theta, g, Eigen::VectorXd::Constant(1, rng.uniform()), state);
    }
    return p.flatten();
  };
  CHECK(run() == run());
}

TEST_CASE("json round trip is exact") {
  std::vector<int> w{4, 6, 3, 1};
  auto p = init_params(w, 31);
  p.input_scale(0) = 30.0;
  p.biases[1](2) = -0.123456789012345;
  auto doc = to_json(p);
  CHECK(doc["format"] == "flexihaz.mlp");
  auto q = params_from_json(nlohmann::json::parse(doc.dump()));
  CHECK(q.flatten() == p.flatten());
  CHECK(q.input_scale == p.input_scale);
  CHECK(q.widths() == w);
}

TEST_CASE("json with inconsistent shapes is rejected") {
  std::vector<int> w{2, 3, 1};
  auto doc = to_json(init_params(w, 1));
  doc["layers"][0]["weights"].erase(0);
  CHECK_THROWS_AS(params_from_json(doc), ShapeError);
}

}  // TEST_SUITE
