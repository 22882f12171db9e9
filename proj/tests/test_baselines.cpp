#include <doctest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <random>

#include "hmarl/baselines.hpp"
#include "test_util.hpp"

using namespace hmarl;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.epochs = 1;
  c.phase2_epochs = 1;
  c.min_option_samples = 2;
  return c;
}

struct Cohort {
  EpisodeStore store;
  NormalizationConstants constants;
};

const Cohort& cohort() {
  static const Cohort c = [] {
    const DynamicsConfig cfg = default_dynamics();
    const Oracle oracle(cfg);
    const auto schema = FeatureSchema::synthetic();
    const auto inputs = to_cohort_inputs(generate_cohort(80, cfg, oracle, schema, "t"), schema);
    Cohort out;
    out.constants = fit_on_train(inputs, schema);
    out.store = build_episode_store(inputs, schema, out.constants, "train");
    return out;
  }();
  return c;
}

const TrainingData& cohort_data() {
  static const TrainingData data = make_training_data(cohort().store, kDefaultTerminalReward);
  return data;
}

const BaselineModel& trained(BaselineKind k) {
  static std::map<BaselineKind, BaselineModel> cache;
  auto it = cache.find(k);
  if (it == cache.end()) it = cache.emplace(k, train_baseline(k, cohort_data(), small_config())).first;
  return it->second;
}

Vector random_vector(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Vector v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

}  // namespace

TEST_CASE("dueling head: constant advantages give Q = V") {
  const Vector raw{2.5, 2.5, 2.5, -1.25};
  const Vector q = dueling_q(raw);
  REQUIRE(q.size() == 3);
  for (double v : q) CHECK(v == doctest::Approx(-1.25).epsilon(1e-15));
  CHECK_THROWS_AS(dueling_q(Vector{1.0}), DimensionError);
}

TEST_CASE("dueling head: centering preserves the advantage argmax") {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t n = 2 + rep % 40;
    const Vector raw = random_vector(n + 1, rng, 5.0);
    const Vector q = dueling_q(raw);
    const std::span<const double> adv(raw.data(), n);
    CHECK(argmax_valid(q) == argmax_valid(adv));
  }
}

TEST_CASE("dueling backward matches finite differences") {
  std::mt19937_64 rng(5);
  const Vector raw = random_vector(8, rng);
  const Vector c = random_vector(7, rng);
  const auto loss = [&](std::span<const double> r) {
    const Vector q = dueling_q(r);
    double s = 0.0;
    for (std::size_t j = 0; j < q.size(); ++j) s += c[j] * q[j];
    return s;
  };
  const Vector fd = finite_difference_gradient(loss, raw);
  CHECK(max_relative_error(dueling_backward(c), fd) < 1e-7);

  // Through a dueling network: L = (Q_a(s) - y)^2.
  const Approximator net(q_network_shapes(4, 6, NetworkConfig{}), 9);
  const Vector s = random_vector(4, rng);
  const std::size_t a = 2;
  const double y = 0.7;
  GradientTape tape(net);
  const Vector q = dueling_q(forward(net, s, tape));
  Vector gq(q.size(), 0.0);
  gq[a] = 2.0 * (q[a] - y);
  backward(net, tape, dueling_backward(gq));
  const auto net_loss = [&](std::span<const double> theta) {
    Approximator copy = net;
    copy.set_flat_parameters(theta);
    const double d = dueling_q(forward(copy, s))[a] - y;
    return d * d;
  };
  CHECK(max_relative_error(flatten(tape.grads), finite_difference_gradient(net_loss, net.flat_parameters())) < 1e-4);
}

TEST_CASE("double-Q target on a two-action fixture") {
  // Online prefers action 1 at s'; the target network rates it 2 (its own max would be 5).
  const Vector online{1.0, 3.0};
  const Vector target{5.0, 2.0};
  CHECK(double_q_target(online, target, 1.0, 0.9, false) == doctest::Approx(1.0 + 0.9 * 2.0));
  CHECK(double_q_target(online, target, 1.0, 0.9, true) == 1.0);
  const std::vector<std::uint8_t> only_first{1, 0};
  CHECK(double_q_target(online, target, 1.0, 0.9, false, only_first) == doctest::Approx(1.0 + 0.9 * 5.0));
  CHECK_THROWS_AS(double_q_target(online, Vector{1.0}, 0.0, 0.9, false), DimensionError);
}

TEST_CASE("layouts and head widths") {
  const BaselineModel s = make_baseline(BaselineKind::d3qn_s, 10, TrainConfig{});
  REQUIRE(s.heads.size() == 1);
  CHECK(head_width(HeadAxis::flat) == enumerate_space().actions.size());
  CHECK(s.heads[0].q(Vector(s.state_width(), 0.1)).size() == 3750);
  CHECK(s.heads[0].online.output_width() == 3751);
  CHECK_FALSE(s.mixer.has_value());

  const BaselineModel qt = make_baseline(BaselineKind::qmix_t, 10, TrainConfig{});
  REQUIRE(qt.mixer.has_value());
  CHECK(qt.mixer->agents == 5);
  CHECK(qt.mixer->hyper_w.output_width() == 5);
  CHECK(qt.heads.size() == 5);

  const BaselineModel qo = make_baseline(BaselineKind::qmix_o, 10, TrainConfig{});
  CHECK(qo.mixer->agents == 3);
  CHECK(make_baseline(BaselineKind::d3qn_o, 10, TrainConfig{}).heads.size() == 3);
  CHECK(make_baseline(BaselineKind::d3qn_t, 10, TrainConfig{}).heads.size() == 5);

  for (BaselineKind k : all_baselines()) CHECK(baseline_from_name(baseline_name(k)) == k);
  CHECK_FALSE(baseline_from_name("d3qn").has_value());
}

TEST_CASE("head slices compose every valid joint action") {
  for (BaselineKind k : all_baselines()) {
    const auto layout = baseline_layout(k);
    for (const JointAction& a : enumerate_space().actions) {
      JointAction b;
      for (HeadAxis h : layout) apply_choice(h, head_choice(h, a), b);
      REQUIRE(b == a);
    }
  }
  JointAction a;
  CHECK_THROWS_AS(apply_choice(HeadAxis::renal, 6, a), ContractError);
}

TEST_CASE("D3QN-O recommends the tuple of independent argmaxes") {
  BaselineModel m = make_baseline(BaselineKind::d3qn_o, 12, TrainConfig{});
  std::mt19937_64 rng(17);
  for (int rep = 0; rep < 50; ++rep) {
    const Vector s = random_vector(m.state_width(), rng);
    const BaselineDecision dec = baseline_decide(m, s);
    JointAction expect;
    for (std::size_t h = 0; h < m.heads.size(); ++h) {
      const std::size_t c = argmax_valid(m.heads[h].q(s));
      CHECK(dec.choice[h] == c);
      apply_choice(m.heads[h].axis, c, expect);
    }
    CHECK(dec.action == expect);
  }
  // Perturbing the cardio head leaves the neuro and renal choices alone.
  const Vector s = random_vector(m.state_width(), rng);
  const BaselineDecision before = baseline_decide(m, s);
  Vector theta = m.heads[1].online.flat_parameters();
  for (auto& v : theta) v += 0.5;
  m.heads[1].online.set_flat_parameters(theta);
  const BaselineDecision after = baseline_decide(m, s);
  CHECK(after.choice[0] == before.choice[0]);
  CHECK(after.choice[2] == before.choice[2]);
}

TEST_CASE("QMix baselines: per-agent argmax equals the exhaustive joint argmax") {
  std::mt19937_64 rng(23);
  for (BaselineKind k : {BaselineKind::qmix_o, BaselineKind::qmix_t}) {
    TrainConfig cfg;
    for (int rep = 0; rep < 5; ++rep) {
      cfg.seed = 100 + rep;
      const BaselineModel m = make_baseline(k, 9, cfg);
      const Vector s = random_vector(m.state_width(), rng);
      const BaselineDecision dec = baseline_decide(m, s);
      const auto exhaustive = qmix_exhaustive_argmax(dec.q, *m.mixer, s);
      CHECK(exhaustive == dec.choice);
    }
  }
}

TEST_CASE("every trained baseline respects renal exclusivity on every logged state") {
  const auto& data = cohort_data();
  for (BaselineKind k : all_baselines()) {
    const BaselineModel& m = trained(k);
    CHECK(m.samples == data.records.size());
    CHECK(m.loss_curve.size() == 2);
    for (double l : m.loss_curve) CHECK(std::isfinite(l));
    std::size_t bad = 0;
    for (const auto& r : data.records) {
      if (!satisfies_renal_exclusivity(baseline_decide(m, m.state(r.w)).action)) ++bad;
    }
    CHECK(bad == 0);
    for (const auto& head : m.heads) CHECK(head.valid[0] == 1);
  }
}

TEST_CASE("baseline training is deterministic and persists exactly") {
  for (BaselineKind k : {BaselineKind::d3qn_t, BaselineKind::qmix_o}) {
    const BaselineModel again = train_baseline(k, cohort_data(), small_config());
    CHECK(again.hash() == trained(k).hash());

    TempDir dir;
    save_baseline(dir.path / "m", trained(k));
    const BaselineModel loaded = load_baseline(dir.path / "m");
    CHECK(loaded.hash() == trained(k).hash());
    CHECK(loaded.kind == k);
    for (std::size_t i = 0; i < 40; ++i) {
      const auto& r = cohort_data().records[i * 11 % cohort_data().records.size()];
      CHECK(baseline_decide(loaded, loaded.state(r.w)).action == baseline_decide(trained(k), trained(k).state(r.w)).action);
    }
    {
      const std::string first = std::string("head_0_") + axis_name(baseline_layout(k)[0]) + ".bin";
      std::ofstream out(dir.path / "m" / first, std::ios::binary | std::ios::in | std::ios::out);
      out.seekp(16);
      const char junk[8] = {9, 9, 9, 9, 9, 9, 9, 9};
      out.write(junk, 8);
    }
    CHECK_THROWS(load_baseline(dir.path / "m"));
  }
  CHECK_THROWS_AS(load_baseline("/nonexistent/baseline"), DataError);
}

TEST_CASE("baseline divergence raises a numeric error") {
  TrainConfig cfg = small_config();
  cfg.divergence_limit = 1e-12;
  CHECK_THROWS_AS(train_baseline(BaselineKind::d3qn_o, cohort_data(), cfg), NumericError);
}

TEST_CASE("raw-feature baselines read x_t") {
  TrainConfig cfg = small_config();
  cfg.no_state_repr = true;
  const BaselineModel m = train_baseline(BaselineKind::qmix_t, cohort_data(), cfg);
  CHECK(m.state_width() == cohort().store.schema.size());
  const auto& r = cohort_data().records.front();
  CHECK(m.state(r.w) == *r.w[0]);
}

TEST_CASE("baseline policies drive the simulator and the offline evaluator") {
  const DynamicsConfig cfg = default_dynamics();
  const auto schema = FeatureSchema::synthetic();
  BaselinePolicy policy(trained(BaselineKind::qmix_t));
  const PolicyValue v = true_policy_value(policy, cfg, schema, cohort().constants, 30, 3);
  CHECK(v.rollouts == 30);
  CHECK(std::isfinite(v.mean));

  const BaselineOfflinePolicy off(trained(BaselineKind::d3qn_s));
  CHECK(off.name() == "d3qn-s");
  const DecisionTable t = decide_all(off, cohort().store);
  REQUIRE(t.size() == cohort().store.episodes.size());
  for (std::size_t e = 0; e < t.size(); ++e) CHECK(t[e].size() == cohort().store.episodes[e].frames.size());
}
