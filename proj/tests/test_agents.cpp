#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "hmarl/agents.hpp"

using namespace hmarl;

namespace {

const StateWidths kWidths{16, 48};

/// Linear net over a one-hot state: Q(s, a) = w[a][s] + b[a].
QAgent tabular_agent(std::size_t states, std::size_t actions) {
  QAgent a;
  a.id = AgentId::CarIV;
  a.base_width = states;
  a.options.assign(actions, "a");
  Layer l;
  l.in = states;
  l.out = actions;
  l.weights.assign(states * actions, 0.0);
  l.bias.assign(actions, 0.0);
  a.online = Approximator(std::vector<Layer>{l});
  a.target = a.online;
  return a;
}

Vector one_hot(std::size_t n, std::size_t i) {
  Vector v(n, 0.0);
  v[i] = 1.0;
  return v;
}

Vector random_vector(std::size_t n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Vector v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

}  // namespace

TEST_CASE("agent catalogue") {
  CHECK(option_count(AgentId::Rt) == 5);
  CHECK(option_count(AgentId::Neu) == 3);
  CHECK(option_count(AgentId::Car) == 3);
  CHECK(option_count(AgentId::Ren) == 5);
  CHECK(option_count(AgentId::NeuS1) == 4);
  CHECK(option_count(AgentId::CarVaso) == 4);
  CHECK(option_count(AgentId::NeuMix) == 16);
  CHECK(option_count(AgentId::OMixNeu) == 25);
  CHECK(option_count(AgentId::OMixCar) == 25);
  CHECK(option_count(AgentId::OMixRen) == 6);
  for (AgentId id : all_agents()) CHECK(agent_from_name(agent_name(id)) == id);
  CHECK_THROWS(agent_from_name("Lung"));
}

TEST_CASE("communicated widths") {
  CHECK(agent_input_width(AgentId::OMixNeu, kWidths) == 48 + 10 + 6);
  CHECK(agent_input_width(AgentId::OMixCar, kWidths) == 48 + 10 + 6);
  CHECK(agent_input_width(AgentId::OMixRen, kWidths) == 48 + 20);
  CHECK(agent_input_width(AgentId::CarMix, kWidths) == 16 + 10);
  CHECK(agent_input_width(AgentId::Rt, kWidths) == 16);

  const Vector base(48, 0.25);
  PeerOutputs peers;
  peers.car = PairChoice{2, 0};
  peers.renal = 5;
  const Vector s = build_communicated_state(AgentId::OMixNeu, base, peers);
  REQUIRE(s.size() == 64);
  CHECK(std::equal(base.begin(), base.end(), s.begin()));
  Vector expected_tail(16, 0.0);
  expected_tail[2] = 1.0;       // IV level 2
  expected_tail[5 + 0] = 1.0;   // Vaso level 0
  expected_tail[10 + 5] = 1.0;  // dialysis
  CHECK(Vector(s.begin() + 48, s.end()) == expected_tail);

  const Vector z = build_communicated_state(AgentId::OMixNeu, base, {}, true);
  CHECK(z.size() == 64);
  CHECK(std::all_of(z.begin() + 48, z.end(), [](double v) { return v == 0.0; }));

  PeerOutputs missing;
  missing.car = PairChoice{1, 1};
  CHECK_THROWS_AS(build_communicated_state(AgentId::OMixNeu, base, missing), ContractError);
  CHECK_THROWS_AS(build_communicated_state(AgentId::CarMix, Vector(16, 0.0), missing), ContractError);
}

TEST_CASE("q_values: determinism and widths") {
  const QAgent a = make_agent(AgentId::Rt, kWidths, NetworkConfig{}, 11);
  const QAgent b = make_agent(AgentId::Rt, kWidths, NetworkConfig{}, 11);
  const Vector s(16, 0.3);
  CHECK(q_values(a, s).size() == 5);
  CHECK(q_values(a, s) == q_values(b, s));
  // Zero input: only biases contribute, and those start at zero.
  const Vector q0 = q_values(a, Vector(16, 0.0));
  CHECK(std::all_of(q0.begin(), q0.end(), [](double v) { return v == 0.0; }));
  CHECK_THROWS_AS(q_values(a, Vector(15, 0.0)), DimensionError);
  CHECK_THROWS_AS(make_agent(AgentId::OMix, kWidths, NetworkConfig{}, 1), ContractError);
}

TEST_CASE("select_option") {
  std::mt19937_64 rng(3);
  CHECK(select_option(Vector{1, 3, 2}, {}, 0.0, rng) == 1);
  CHECK(select_option(Vector{2, 2, 1}, {}, 0.0, rng) == 0);
  const std::vector<std::uint8_t> mask{1, 0, 1};
  CHECK(select_option(Vector{1, 3, 2}, mask, 0.0, rng) == 2);
  CHECK_THROWS_AS(select_option(Vector{1, 2}, std::vector<std::uint8_t>{0, 0}, 0.0, rng), ContractError);

  std::vector<int> counts(5, 0);
  const int n = 10000;
  for (int i = 0; i < n; ++i) ++counts[select_option(Vector{5, 4, 3, 2, 1}, {}, 1.0, rng)];
  const double sigma = std::sqrt(0.2 * 0.8 / n);
  for (int c : counts) CHECK(std::abs(c / double(n) - 0.2) <= 3 * sigma);

  // Exploration never lands on a masked option.
  for (int i = 0; i < 200; ++i) CHECK(select_option(Vector{0, 0, 0}, mask, 1.0, rng) != 1);
}

TEST_CASE("root_q_target cases") {
  CHECK(root_q_target(RootOption::None, -0.025, {}) == -0.025);
  RootTargetInputs in;
  in.q_car = Vector{1.0, 2.5, 2.0};
  CHECK(root_q_target(RootOption::Car, 0.7, in) == 2.5);
  in.q_omix = 3.25;
  CHECK(root_q_target(RootOption::OMix, 0.0, in) == 3.25);
  CHECK_THROWS_AS(root_q_target(RootOption::Neu, 0.0, in), ContractError);
  CHECK_THROWS_AS(root_q_target(RootOption::Ren, 0.0, RootTargetInputs{}), ContractError);
}

TEST_CASE("td_update tabular limit") {
  SUBCASE("terminal") {
    QAgent a = tabular_agent(2, 2);
    const double delta = td_update(a, {one_hot(2, 0), 1, 10.0, {}, true}, 1.0, 0.99);
    CHECK(delta == doctest::Approx(10.0));
    CHECK(q_values(a, one_hot(2, 0))[1] == doctest::Approx(10.0).epsilon(1e-12));
  }
  SUBCASE("bootstrapped") {
    QAgent a = tabular_agent(2, 2);
    a.target.mutable_layers()[0].w(0, 1) = 5.0;  // Q_target(s'=1, a=0) = 5
    td_update(a, {one_hot(2, 0), 0, 0.0, one_hot(2, 1), false}, 1.0, 0.99);
    CHECK(q_values(a, one_hot(2, 0))[0] == doctest::Approx(4.95).epsilon(1e-12));
  }
  SUBCASE("contract") {
    QAgent a = tabular_agent(2, 2);
    CHECK_THROWS_AS(td_update(a, {one_hot(2, 0), 0, 0.0, {}, true}, 0.0, 0.99), ContractError);
    CHECK_THROWS_AS(td_update(a, {one_hot(2, 0), 5, 0.0, {}, true}, 0.5, 0.99), ContractError);
    CHECK_THROWS_AS(td_update(a, {one_hot(3, 0), 0, 0.0, {}, true}, 0.5, 0.99), DimensionError);
    CHECK_THROWS_AS(td_update(a, {one_hot(2, 0), 0, std::nan(""), {}, true}, 0.5, 0.99), NumericError);
  }
}

TEST_CASE("td_update converges on a two-state chain") {
  // A -> B pays 1, B -> A pays 0, one action. Q(A) = 1 + g Q(B), Q(B) = g Q(A).
  const double g = 0.9;
  const double qa = 1.0 / (1.0 - g * g);
  const double qb = g * qa;
  QAgent a = tabular_agent(2, 1);
  int steps = 0;
  for (; steps < 10000; ++steps) {
    const bool from_a = steps % 2 == 0;
    td_update(a, {one_hot(2, from_a ? 0 : 1), 0, from_a ? 1.0 : 0.0, one_hot(2, from_a ? 1 : 0), false}, 0.5, g);
    a.sync_target();
    const double ea = std::abs(q_values(a, one_hot(2, 0))[0] - qa);
    const double eb = std::abs(q_values(a, one_hot(2, 1))[0] - qb);
    if (ea < 1e-4 && eb < 1e-4) break;
  }
  CHECK(steps < 10000);
  CHECK(q_values(a, one_hot(2, 0))[0] == doctest::Approx(qa).epsilon(1e-3));
  CHECK(q_values(a, one_hot(2, 1))[0] == doctest::Approx(qb).epsilon(1e-3));
}

TEST_CASE("agent gradients match finite differences") {
  std::mt19937_64 rng(5);
  for (AgentId id : all_agents()) {
    if (id == AgentId::OMix) continue;
    CAPTURE(agent_name(id));
    QAgent a = make_agent(id, kWidths, NetworkConfig{}, 100 + static_cast<int>(id));
    const Vector s = random_vector(a.input_width(), rng);
    const std::size_t act = a.options.size() - 1;
    GradientTape tape(a.online);
    forward(a.online, s, tape);
    backward(a.online, tape, one_hot(a.options.size(), act));
    Approximator probe = a.online;
    const auto fn = [&](std::span<const double> theta) {
      probe.set_flat_parameters(theta);
      return forward(probe, s)[act];
    };
    const Vector fd = finite_difference_gradient(fn, a.online.flat_parameters());
    CHECK(max_relative_error(flatten(tape.grads), fd, 1e-6) < 1e-4);
  }
}

TEST_CASE("gradient through the embedding table") {
  std::mt19937_64 rng(9);
  EmbeddingTable table = random_embedding(Level::Rt, 12, 8, 4);
  const QAgent a = make_agent(AgentId::Rt, kWidths, NetworkConfig{}, 8);
  std::array<Vector, 4> xs;
  for (auto& x : xs) x = random_vector(12, rng, 0.0, 1.0);
  const XWindow w{&xs[0], &xs[1], &xs[2], nullptr};
  const std::size_t act = 3;

  GradientTape tape(a.online);
  forward(a.online, encode_window(w, table), tape);
  const Vector ds = backward(a.online, tape, one_hot(5, act));
  Vector grad_e(table.e.size(), 0.0);
  encode_window_backward(w, table, ds, grad_e);

  EmbeddingTable probe = table;
  const auto fn = [&](std::span<const double> e) {
    probe.e.assign(e.begin(), e.end());
    return q_values(a, encode_window(w, probe))[act];
  };
  const Vector fd = finite_difference_gradient(fn, table.e);
  CHECK(max_relative_error(grad_e, fd, 1e-6) < 1e-4);
}

TEST_CASE("mixer gradients match finite differences") {
  std::mt19937_64 rng(21);
  MixingNetwork m = MixingNetwork::make(3, 48, 32, 6);
  const Vector s = random_vector(48, rng);
  const Vector q = random_vector(3, rng, -5.0, 5.0);

  MixerTape tape(m);
  qmix_forward(m, q, s, tape);
  const MixerInputGrads g = qmix_backward(m, tape, 1.0);

  MixingNetwork probe = m;
  const auto fw = [&](std::span<const double> theta) {
    probe.hyper_w.set_flat_parameters(theta);
    return qmix_forward(probe, q, s);
  };
  CHECK(max_relative_error(flatten(tape.w.grads), finite_difference_gradient(fw, m.hyper_w.flat_parameters()), 1e-6) <
        1e-4);
  probe = m;
  const auto fb = [&](std::span<const double> theta) {
    probe.hyper_b.set_flat_parameters(theta);
    return qmix_forward(probe, q, s);
  };
  CHECK(max_relative_error(flatten(tape.b.grads), finite_difference_gradient(fb, m.hyper_b.flat_parameters()), 1e-6) <
        1e-4);
  const auto fq = [&](std::span<const double> sub) { return qmix_forward(m, sub, s); };
  CHECK(max_relative_error(g.sub_qs, finite_difference_gradient(fq, q), 1e-6) < 1e-4);
  const auto fs = [&](std::span<const double> st) { return qmix_forward(m, q, st); };
  CHECK(max_relative_error(g.state, finite_difference_gradient(fs, s), 1e-6) < 1e-4);
}

TEST_CASE("qmix: linear mixer sums") {
  MixingNetwork m = MixingNetwork::make(3, 4, 0, 1);
  auto& wl = m.hyper_w.mutable_layers()[0];
  std::fill(wl.weights.begin(), wl.weights.end(), 0.0);
  std::fill(wl.bias.begin(), wl.bias.end(), 1.0);
  auto& bl = m.hyper_b.mutable_layers()[0];
  std::fill(bl.weights.begin(), bl.weights.end(), 0.0);
  std::fill(bl.bias.begin(), bl.bias.end(), 0.0);
  CHECK(qmix_forward(m, Vector{1.5, -2.0, 4.0}, Vector{0.1, 0.2, 0.3, 0.4}) == doctest::Approx(3.5));
}

TEST_CASE("qmix: monotone in every sub-agent value") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    const MixingNetwork m = MixingNetwork::make(3, 6, trial % 2 ? 8 : 0, 1000 + trial);
    const Vector s = random_vector(6, rng, -2.0, 2.0);
    const Vector q = random_vector(3, rng, -5.0, 5.0);
    for (double w : m.weights(s)) CHECK(w >= 0.0);
    const Vector fd = finite_difference_gradient([&](std::span<const double> sub) { return qmix_forward(m, sub, s); }, q);
    for (double d : fd) CHECK(d >= -1e-9);
    for (std::size_t i = 0; i < 3; ++i) {
      Vector up = q;
      up[i] += 0.5;
      CHECK(qmix_forward(m, up, s) >= qmix_forward(m, q, s));
    }
  }
}

TEST_CASE("qmix: factored argmax equals exhaustive argmax") {
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<int> size(2, 6);
  int agreed = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const MixingNetwork m = MixingNetwork::make(3, 5, 8, 500 + trial);
    const Vector s = random_vector(5, rng);
    std::vector<Vector> sub(3);
    for (auto& q : sub) q = random_vector(static_cast<std::size_t>(size(rng)), rng, -3.0, 3.0);
    const auto factored = qmix_argmax(sub, m.weights(s), 0);
    const auto exhaustive = qmix_exhaustive_argmax(sub, m, s, 0);
    agreed += factored == exhaustive;
  }
  CHECK(agreed == 100);
}

TEST_CASE("qmix: repair under the two-active rule") {
  // Unconstrained tuple already multi-organ: unchanged.
  const std::vector<Vector> multi{{0, 2, 1}, {0, 1, 3}, {5, 1}};
  CHECK(qmix_argmax(multi, Vector{1, 1, 1}, 2) == std::vector<std::size_t>{1, 2, 0});

  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    const MixingNetwork m = MixingNetwork::make(3, 4, 8, 900 + trial);
    const Vector s = random_vector(4, rng);
    std::vector<Vector> sub{random_vector(5, rng), random_vector(5, rng), random_vector(4, rng)};
    // Force exactly one active organ: option 0 dominates for agents 1 and 2.
    sub[0][3] = 10.0;
    sub[1][0] = 10.0;
    sub[2][0] = 10.0;
    const auto w = m.weights(s);
    const auto pick = qmix_argmax(sub, w, 2);
    CHECK(std::count_if(pick.begin(), pick.end(), [](std::size_t p) { return p != 0; }) >= 2);

    // Enumerate single flips of the unconstrained tuple and keep the best mixed value.
    double best = -1e300;
    for (std::size_t i = 1; i < 3; ++i) {
      for (std::size_t o = 1; o < sub[i].size(); ++o) {
        std::vector<std::size_t> cand{3, 0, 0};
        cand[i] = o;
        const Vector chosen{sub[0][cand[0]], sub[1][cand[1]], sub[2][cand[2]]};
        best = std::max(best, qmix_forward(m, chosen, s));
      }
    }
    const Vector got{sub[0][pick[0]], sub[1][pick[1]], sub[2][pick[2]]};
    CHECK(qmix_forward(m, got, s) == doctest::Approx(best).epsilon(1e-12));
  }
}

TEST_CASE("mixing network persistence hash tracks parameters") {
  MixingNetwork a = MixingNetwork::make(3, 4, 8, 2);
  const MixingNetwork b = MixingNetwork::make(3, 4, 8, 2);
  CHECK(a.parameter_hash() == b.parameter_hash());
  a.hyper_b.mutable_layers()[0].bias[0] += 1e-9;
  CHECK(a.parameter_hash() != b.parameter_hash());
}
