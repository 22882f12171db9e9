#include <doctest.h>

#include <cmath>
#include <random>

#include "hmarl/numerics.hpp"
#include "test_util.hpp"

using namespace hmarl;

namespace {

Approximator single_layer(std::size_t in, std::size_t out, Vector w, Vector b, Activation act) {
  Layer l;
  l.in = in;
  l.out = out;
  l.weights = std::move(w);
  l.bias = std::move(b);
  l.act = act;
  return Approximator(std::vector<Layer>{l});
}

double squared_error(const Vector& y, const Vector& target) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += 0.5 * (y[i] - target[i]) * (y[i] - target[i]);
  return s;
}

}  // namespace

TEST_CASE("forward: identity and relu fixtures") {
  auto id = single_layer(2, 2, {1, 0, 0, 1}, {0, 0}, Activation::identity);
  const Vector x{1, 2};
  CHECK(forward(id, x) == Vector{1, 2});

  auto r = single_layer(2, 1, {1, -1}, {0}, Activation::relu);
  CHECK(forward(r, x) == Vector{0.0});
}

TEST_CASE("forward: zero input follows the bias path") {
  const std::vector<LayerShape> shapes{{3, 4, Activation::tanh}, {4, 2, Activation::identity}};
  Approximator net(shapes, 42);
  auto& layers = net.mutable_layers();
  for (std::size_t j = 0; j < 4; ++j) layers[0].bias[j] = 0.1 * (j + 1);
  layers[1].bias = {0.5, -0.25};
  const Vector y = forward(net, Vector{0, 0, 0});
  // Hand evaluation: h_j = tanh(b0_j); y_r = sum_j W1[r][j] h_j + b1_r.
  for (std::size_t r = 0; r < 2; ++r) {
    double expect = layers[1].bias[r];
    for (std::size_t j = 0; j < 4; ++j) expect += layers[1].w(r, j) * std::tanh(0.1 * (j + 1));
    CHECK(y[r] == doctest::Approx(expect).epsilon(1e-15));
  }
  CHECK(forward(net, Vector{0, 0, 0}) == y);
}

TEST_CASE("forward: width mismatch") {
  auto id = single_layer(2, 2, {1, 0, 0, 1}, {0, 0}, Activation::identity);
  CHECK_THROWS_AS(forward(id, Vector{1, 2, 3}), DimensionError);
}

TEST_CASE("abs output is non-negative for random inputs") {
  const std::vector<LayerShape> shapes{{5, 7, Activation::relu}, {7, 3, Activation::abs}};
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 3.0);
  for (int s = 0; s < 20; ++s) {
    Approximator net(shapes, 100 + s);
    for (int i = 0; i < 50; ++i) {
      Vector x(5);
      for (auto& v : x) v = n(rng);
      for (double y : forward(net, x)) CHECK(y >= 0.0);
    }
  }
}

TEST_CASE("backward: linear unit and dead relu") {
  auto lin = single_layer(1, 1, {0.7}, {0.2}, Activation::identity);
  GradientTape tape(lin);
  forward(lin, Vector{3.0}, tape);
  const Vector dx = backward(lin, tape, Vector{1.0});
  CHECK(tape.grads.weights[0][0] == 3.0);
  CHECK(tape.grads.bias[0][0] == 1.0);
  CHECK(dx[0] == doctest::Approx(0.7));

  auto dead = single_layer(1, 1, {1.0}, {-5.0}, Activation::relu);
  GradientTape t2(dead);
  forward(dead, Vector{1.0}, t2);
  const Vector dx2 = backward(dead, t2, Vector{1.0});
  CHECK(t2.grads.all_zero());
  CHECK(dx2[0] == 0.0);
}

TEST_CASE("fresh tape has zero accumulators with parameter shapes") {
  Approximator net(std::vector<LayerShape>{{4, 3, Activation::relu}, {3, 2, Activation::identity}}, 1);
  GradientTape tape(net);
  CHECK(tape.grads.all_zero());
  REQUIRE(tape.grads.weights.size() == 2);
  CHECK(tape.grads.weights[0].size() == 12);
  CHECK(tape.grads.bias[1].size() == 2);
}

TEST_CASE("backward: stale tape is rejected") {
  Approximator net(std::vector<LayerShape>{{2, 2, Activation::tanh}}, 5);
  GradientTape tape(net);
  forward(net, Vector{1, 1}, tape);
  net.touch();
  CHECK_THROWS_AS(backward(net, tape, Vector{1, 1}), ContractError);
  Approximator other(std::vector<LayerShape>{{2, 2, Activation::tanh}}, 5);
  GradientTape t2(other);
  forward(other, Vector{1, 1}, t2);
  CHECK_THROWS_AS(backward(net, t2, Vector{1, 1}), ContractError);
}

TEST_CASE("backward matches finite differences on random nets") {
  for (Activation act : {Activation::tanh, Activation::relu, Activation::abs}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const std::vector<LayerShape> shapes{{4, 6, act}, {6, 3, Activation::identity}};
      Approximator net(shapes, seed);
      std::mt19937_64 rng(seed + 77);
      std::normal_distribution<double> n;
      Vector x(4), target(3);
      for (auto& v : x) v = n(rng);
      for (auto& v : target) v = n(rng);
      GradientTape tape(net);
      const Vector y = forward(net, x, tape);
      Vector g(3);
      for (int i = 0; i < 3; ++i) g[i] = y[i] - target[i];
      backward(net, tape, g);
      const Vector analytic = flatten(tape.grads);
      const Vector numeric = finite_difference_gradient(
          [&](std::span<const double> theta) {
            Approximator probe = net;
            probe.set_flat_parameters(theta);
            return squared_error(forward(probe, x), target);
          },
          net.flat_parameters());
      CHECK(max_relative_error(analytic, numeric, 1e-6) < 1e-4);
    }
  }
}

TEST_CASE("sgd_step arithmetic") {
  auto net = single_layer(1, 1, {1.0}, {0.0}, Activation::identity);
  Gradients g(net);
  g.weights[0][0] = 2.0;
  sgd_step(net, g, 0.1);
  CHECK(net.layers()[0].weights[0] == doctest::Approx(0.8).epsilon(1e-15));

  Gradients zero(net);
  const Vector before = net.flat_parameters();
  sgd_step(net, zero, 0.5);
  CHECK(net.flat_parameters() == before);

  Gradients bad(net);
  bad.bias[0][0] = std::nan("");
  CHECK_THROWS_AS(sgd_step(net, bad, 0.1), NumericError);
  CHECK_THROWS_AS(sgd_step(net, zero, 0.0), ContractError);
}

TEST_CASE("sgd converges on (w - 3)^2") {
  auto net = single_layer(1, 1, {0.0}, {0.0}, Activation::identity);
  for (int i = 0; i < 100; ++i) {
    Gradients g(net);
    g.weights[0][0] = 2.0 * (net.layers()[0].weights[0] - 3.0);
    sgd_step(net, g, 0.1);
  }
  // w_n - 3 = -3 * 0.8^n
  CHECK(std::abs(net.layers()[0].weights[0] - 3.0) < 1e-6);
}

TEST_CASE("sgd with small lr does not increase loss") {
  int decreased = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Approximator net(std::vector<LayerShape>{{3, 5, Activation::tanh}, {5, 1, Activation::identity}}, seed);
    const Vector x{0.3, -0.2, 0.9};
    const Vector target{1.5};
    GradientTape tape(net);
    const Vector y = forward(net, x, tape);
    const double before = squared_error(y, target);
    backward(net, tape, Vector{y[0] - target[0]});
    sgd_step(net, tape, 1e-3);
    if (squared_error(forward(net, x), target) <= before) ++decreased;
  }
  CHECK(decreased == 20);
}

TEST_CASE("soft_copy semantics") {
  const std::vector<LayerShape> shapes{{3, 4, Activation::relu}, {4, 2, Activation::identity}};
  Approximator src(shapes, 1), dst(shapes, 2);
  soft_copy(src, dst);
  const Vector x{0.1, 0.2, -0.3};
  CHECK(forward(src, x) == forward(dst, x));
  src.mutable_layers()[1].bias[0] += 1.0;
  CHECK(forward(src, x) != forward(dst, x));
  CHECK(dst.flat_parameters() != src.flat_parameters());

  Approximator other(std::vector<LayerShape>{{3, 2, Activation::relu}}, 1);
  CHECK_THROWS_AS(soft_copy(src, other), ContractError);
}

TEST_CASE("target network lags the online network by one sync period") {
  // Online weight w increments by 1 each update; target syncs every 3 updates.
  auto online = single_layer(1, 1, {0.0}, {0.0}, Activation::identity);
  auto target = online;
  std::vector<double> target_trace;
  for (int step = 1; step <= 9; ++step) {
    Gradients g(online);
    g.weights[0][0] = -1.0;
    sgd_step(online, g, 1.0);
    if (step % 3 == 0) soft_copy(online, target);
    target_trace.push_back(forward(target, Vector{1.0})[0]);
  }
  CHECK(target_trace == std::vector<double>{0, 0, 3, 3, 3, 6, 6, 6, 9});
}

TEST_CASE("momentum optimizer reduces to plain sgd at zero momentum") {
  const std::vector<LayerShape> shapes{{2, 2, Activation::tanh}};
  Approximator a(shapes, 4), b(shapes, 4);
  Gradients g(a);
  g.weights[0] = {0.1, -0.2, 0.3, 0.4};
  OptimizerConfig cfg;
  cfg.lr = 0.05;
  Optimizer opt(cfg);
  opt.step(a, g);
  sgd_step(b, g, 0.05);
  CHECK(a.flat_parameters() == b.flat_parameters());
}

TEST_CASE("adam steps follow the bias-corrected moment recurrences") {
  const std::vector<LayerShape> shapes{{2, 1, Activation::identity}};
  Approximator net(shapes, 5);
  const Vector start = net.flat_parameters();  // w0, w1, b
  OptimizerConfig cfg;
  cfg.kind = OptimizerKind::adam;
  cfg.lr = 0.01;
  Optimizer opt(cfg);

  const std::vector<Vector> steps{{0.5, -2.0, 0.0}, {-0.1, -1.0, 3.0}};
  Vector expect = start, m(3, 0.0), v(3, 0.0);
  for (std::size_t t = 0; t < steps.size(); ++t) {
    Gradients g(net);
    g.weights[0] = {steps[t][0], steps[t][1]};
    g.bias[0] = {steps[t][2]};
    opt.step(net, g);
    for (std::size_t j = 0; j < 3; ++j) {
      m[j] = 0.9 * m[j] + 0.1 * steps[t][j];
      v[j] = 0.999 * v[j] + 0.001 * steps[t][j] * steps[t][j];
      const double mh = m[j] / (1 - std::pow(0.9, t + 1.0)), vh = v[j] / (1 - std::pow(0.999, t + 1.0));
      expect[j] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    }
    const Vector got = net.flat_parameters();
    for (std::size_t j = 0; j < 3; ++j) CHECK(got[j] == doctest::Approx(expect[j]).epsilon(1e-14));
  }
  CHECK(opt.steps() == 2);
  CHECK(optimizer_from_string(to_string(OptimizerKind::adam)) == OptimizerKind::adam);
  CHECK_THROWS_AS(optimizer_from_string("rmsprop"), ContractError);
}

// First step: m_hat = g and v_hat = g^2, so every parameter moves by lr regardless of scale.
TEST_CASE("adam first step has magnitude lr per parameter") {
  Approximator net(std::vector<LayerShape>{{3, 1, Activation::identity}}, 6);
  const Vector start = net.flat_parameters();
  OptimizerConfig cfg;
  cfg.kind = OptimizerKind::adam;
  cfg.lr = 0.02;
  cfg.eps = 0.0;
  Optimizer opt(cfg);
  Gradients g(net);
  g.weights[0] = {1e-3, -50.0, 2.0};
  g.bias[0] = {-0.5};
  opt.step(net, g);
  const Vector got = net.flat_parameters();
  CHECK(got[3] == doctest::Approx(start[3] + 0.02).epsilon(1e-12));
  CHECK(got[0] == doctest::Approx(start[0] - 0.02).epsilon(1e-12));
  CHECK(got[1] == doctest::Approx(start[1] + 0.02).epsilon(1e-12));
  CHECK(got[2] == doctest::Approx(start[2] - 0.02).epsilon(1e-12));
}

TEST_CASE("weights persistence round-trips bit-exactly") {
  TempDir dir;
  Approximator net(std::vector<LayerShape>{{3, 4, Activation::relu}, {4, 2, Activation::abs}}, 9);
  save_weights(dir.path / "net", net, "Rt");
  const Approximator back = load_weights(dir.path / "net");
  CHECK(back.flat_parameters() == net.flat_parameters());
  CHECK(back.parameter_hash() == net.parameter_hash());
  CHECK(back.layers()[1].act == Activation::abs);
}
