#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "hmarl/training.hpp"
#include "test_util.hpp"

using namespace hmarl;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.epochs = 2;
  c.phase2_epochs = 2;
  c.min_agent_samples = 8;
  c.min_option_samples = 2;
  return c;
}

struct Cohort {
  EpisodeStore store;
  NormalizationConstants constants;
};

/// A small behavior cohort shared by the tests (the oracle solve dominates setup time).
const Cohort& cohort() {
  static const Cohort c = [] {
    const DynamicsConfig cfg = default_dynamics();
    const Oracle oracle(cfg);
    const auto schema = FeatureSchema::synthetic();
    const auto inputs = to_cohort_inputs(generate_cohort(120, cfg, oracle, schema, "t"), schema);
    Cohort out;
    out.constants = fit_on_train(inputs, schema);
    out.store = build_episode_store(inputs, schema, out.constants, "train");
    return out;
  }();
  return c;
}

const EpisodeStore& cohort_store() { return cohort().store; }

const TrainingData& cohort_data() {
  static const TrainingData data = make_training_data(cohort_store(), kDefaultTerminalReward);
  return data;
}

const AgentSet& trained_set() {
  static const AgentSet set = train_hierarchy(cohort_data(), small_config());
  return set;
}

JointAction action_of(std::initializer_list<std::pair<Treatment, int>> levels) {
  JointAction a;
  for (auto [t, l] : levels) a[t] = l;
  return a;
}

std::set<AgentId> routed(const HierarchyPath& p) {
  std::set<AgentId> out;
  for (AgentId id : all_agents()) {
    if (logged_option(id, p)) out.insert(id);
  }
  return out;
}

/// Last layer emits `c` for every option regardless of the input.
void make_constant(Approximator& net, double c) {
  auto& last = net.mutable_layers().back();
  std::fill(last.weights.begin(), last.weights.end(), 0.0);
  std::fill(last.bias.begin(), last.bias.end(), c);
}

}  // namespace

TEST_CASE("window_at and transition rewards") {
  const auto& store = cohort_store();
  const Episode& e = store.episodes.front();
  REQUIRE(e.frames.size() >= 2);
  const XWindow w0 = window_at(e, 0);
  CHECK(w0[0] == &e.frames[0].x);
  CHECK(w0[1] == nullptr);
  const XWindow w1 = window_at(e, 1);
  CHECK(w1[0] == &e.frames[1].x);
  CHECK(w1[1] == &e.frames[0].x);
  CHECK(w1[2] == nullptr);
  CHECK_THROWS_AS(window_at(e, e.frames.size()), ContractError);

  const std::size_t sofa = store.schema.index_of("sofa");
  const std::size_t lac = store.schema.index_of("lactate");
  const double expected = intermediate_reward(static_cast<int>(std::lround(e.frames[0].raw[sofa])), e.frames[0].raw[lac],
                                              static_cast<int>(std::lround(e.frames[1].raw[sofa])), e.frames[1].raw[lac]);
  CHECK(transition_reward(e, 0, store.schema, 10.0) == expected);
  const std::size_t last = e.frames.size() - 1;
  CHECK(std::abs(transition_reward(e, last, store.schema, 10.0)) == 10.0);
  CHECK(transition_reward(e, last, store.schema, 10.0) == (e.died() ? -10.0 : 10.0));

  const auto& data = cohort_data();
  CHECK(data.records.size() == store.frame_count());
  for (const auto& r : data.records) {
    CHECK(r.path == decompose(r.action));
    CHECK(r.terminal == (r.w_next[0] == nullptr));
  }
}

TEST_CASE("routing examples") {
  CHECK(routed(decompose(JointAction{})) == std::set<AgentId>{AgentId::Rt});
  CHECK(routed(decompose(action_of({{Treatment::IV, 2}, {Treatment::Vaso, 1}}))) ==
        std::set<AgentId>{AgentId::Rt, AgentId::Car, AgentId::CarMix});
  CHECK(routed(decompose(action_of({{Treatment::Vaso, 3}}))) ==
        std::set<AgentId>{AgentId::Rt, AgentId::Car, AgentId::CarVaso});
  CHECK(routed(decompose(action_of({{Treatment::S1, 1}, {Treatment::Dialysis, 1}}))) ==
        std::set<AgentId>{AgentId::Rt, AgentId::Neu, AgentId::NeuS1, AgentId::Ren, AgentId::OMix, AgentId::OMixNeu,
                          AgentId::OMixCar, AgentId::OMixRen});

  const HierarchyPath p = decompose(action_of({{Treatment::IV, 2}, {Treatment::Vaso, 1}}));
  CHECK(*logged_option(AgentId::Car, p) == static_cast<std::size_t>(PairOption::Mix));
  CHECK(*logged_option(AgentId::CarMix, p) == 4);  // (2 - 1) * 4 + (1 - 1)
  const HierarchyPath q = decompose(action_of({{Treatment::S1, 1}, {Treatment::Dialysis, 1}}));
  CHECK(*logged_option(AgentId::OMixCar, q) == 0);
  CHECK(*logged_option(AgentId::OMixRen, q) == 5);
  CHECK(*logged_option(AgentId::Ren, q) == 4);
}

TEST_CASE("sibling leaf subsets are disjoint") {
  const auto& data = cohort_data();
  const Routing r = route_samples(data);
  CHECK(r.size(AgentId::Rt) == data.records.size());
  const auto disjoint = [&](std::initializer_list<AgentId> ids) {
    std::set<std::size_t> seen;
    std::size_t total = 0;
    for (AgentId id : ids) {
      total += r.size(id);
      seen.insert(r.samples[static_cast<std::size_t>(id)].begin(), r.samples[static_cast<std::size_t>(id)].end());
    }
    return seen.size() == total;
  };
  CHECK(disjoint({AgentId::NeuS1, AgentId::NeuS2, AgentId::NeuMix}));
  CHECK(disjoint({AgentId::CarIV, AgentId::CarVaso, AgentId::CarMix}));
  CHECK(r.size(AgentId::Neu) == r.size(AgentId::NeuS1) + r.size(AgentId::NeuS2) + r.size(AgentId::NeuMix));
  CHECK(r.size(AgentId::OMix) == r.size(AgentId::OMixRen));
}

TEST_CASE("agent set widths") {
  const AgentSet set = make_agent_set(12, TrainConfig{});
  CHECK(set.agent(AgentId::Rt).input_width() == 16);
  CHECK(set.agent(AgentId::OMixNeu).input_width() == 48 + 16);
  CHECK(set.mixer.state_width == 48);
  TrainConfig raw;
  raw.no_state_repr = true;
  const AgentSet r = make_agent_set(12, raw);
  CHECK(r.agent(AgentId::Rt).input_width() == 12);
  CHECK(r.agent(AgentId::OMixRen).input_width() == 12 + 20);
  CHECK_THROWS_AS(make_agent_set(0, raw), DimensionError);
}

TEST_CASE("train config JSON") {
  TrainConfig c;
  c.lr = 0.002;
  c.no_communication = true;
  c.net.hidden = {32, 16};
  const TrainConfig back = train_config_from_json(train_config_to_json(c));
  CHECK(train_config_to_json(back) == train_config_to_json(c));
  CHECK(config_hash(back) == config_hash(c));
  CHECK(config_hash(TrainConfig{}) != config_hash(c));
  CHECK_THROWS_AS(train_config_from_json(R"({"lr": 0.1, "learning_rate": 2})"), ContractError);
  CHECK_THROWS_AS(train_config_from_json(R"({"gamma": 1.5})"), ContractError);
  CHECK_THROWS_AS(train_config_from_json("not json"), ContractError);
}

TEST_CASE("phase 2 leaves every non-root agent untouched") {
  AgentSet set = make_agent_set(cohort_store().schema.size(), small_config());
  train_phase1(cohort_data(), set);
  std::vector<std::uint64_t> before;
  for (AgentId id : all_agents()) before.push_back(set.agent_hash(id));
  const auto organ_tables = std::array<Vector, 3>{set.embeddings.neu.e, set.embeddings.car.e, set.embeddings.ren.e};
  train_phase2(cohort_data(), set);
  for (AgentId id : all_agents()) {
    CAPTURE(agent_name(id));
    if (id == AgentId::Rt) {
      CHECK(set.agent_hash(id) != before[static_cast<std::size_t>(id)]);
    } else {
      CHECK(set.agent_hash(id) == before[static_cast<std::size_t>(id)]);
    }
  }
  CHECK(set.embeddings.neu.e == organ_tables[0]);
  CHECK(set.embeddings.car.e == organ_tables[1]);
  CHECK(set.embeddings.ren.e == organ_tables[2]);
}

TEST_CASE("phase 2 fixed point under constant lower agents") {
  const double c = 2.0;
  TrainConfig cfg = small_config();
  cfg.phase2_epochs = 200;
  cfg.lr = 0.005;
  AgentSet set = make_agent_set(cohort_store().schema.size(), cfg);
  train_phase1(cohort_data(), set);
  for (auto& [id, agent] : set.agents) {
    if (id != AgentId::Rt) make_constant(agent.online, c);
  }
  // Mixed value = sum_i w_i c + b with w_i = 1/3 and b = 0.
  make_constant(set.mixer.hyper_w, 1.0 / 3.0);
  make_constant(set.mixer.hyper_b, 0.0);
  train_phase2(cohort_data(), set);

  const auto& data = cohort_data();
  std::array<double, kRootOptionCount> err{}, bias{};
  std::array<int, kRootOptionCount> n{};
  for (const auto& r : data.records) {
    const Vector q = q_values(set.agent(AgentId::Rt), bundle_for(set, r.w).rt);
    for (std::size_t o = 1; o < kRootOptionCount; ++o) {
      if (!set.mask(AgentId::Rt)[o]) continue;
      err[o] += std::abs(q[o] - c);
      bias[o] += q[o] - c;
      ++n[o];
    }
  }
  for (std::size_t o = 1; o < kRootOptionCount; ++o) {
    CAPTURE(o);
    if (n[o] == 0) continue;
    // Shared hidden units also fit the noisy no-action targets, which leaves a small spread.
    CHECK(std::abs(bias[o] / n[o]) < 0.02);
    CHECK(err[o] / n[o] < 0.1);
  }
}

TEST_CASE("recommendations are valid and traced") {
  const AgentSet& set = trained_set();
  for (const auto& r : cohort_data().records) {
    const Recommendation rec = recommend(set, bundle_for(set, r.w));
    CHECK(is_valid(rec.action));
    CHECK(rec.path == decompose(rec.action));
    REQUIRE(!rec.trace.empty());
    CHECK(rec.trace.front().agent == AgentId::Rt);
    CHECK(rec.trace.front().choice == static_cast<std::size_t>(rec.path.root));
    CHECK(rec.evaluations >= 1);
    CHECK(rec.evaluations <= 13);
    if (rec.path.root == RootOption::None) {
      CHECK(rec.action.is_no_action());
      CHECK(rec.trace.size() == 1);
    }
    if (rec.path.root == RootOption::OMix) CHECK(rec.action.active_organ_count() >= 2);
  }
}

TEST_CASE("descent fixture: root picks Car, Car picks Mix") {
  AgentSet set = make_agent_set(12, TrainConfig{});
  for (auto& [id, agent] : set.agents) make_constant(agent.online, 0.0);
  set.agent(AgentId::Rt).online.mutable_layers().back().bias[static_cast<std::size_t>(RootOption::Car)] = 1.0;
  set.agent(AgentId::Car).online.mutable_layers().back().bias[static_cast<std::size_t>(PairOption::Mix)] = 1.0;
  set.agent(AgentId::CarMix).online.mutable_layers().back().bias[(3 - 1) * 4 + (2 - 1)] = 1.0;
  const Vector x(12, 0.5);
  const XWindow w{&x, nullptr, nullptr, nullptr};
  const Recommendation rec = recommend(set, bundle_for(set, w));
  REQUIRE(rec.trace.size() == 3);
  CHECK(rec.trace[0].agent == AgentId::Rt);
  CHECK(rec.trace[1].agent == AgentId::Car);
  CHECK(rec.trace[2].agent == AgentId::CarMix);
  CHECK(rec.trace[2].q.size() == 16);
  CHECK(rec.evaluations == 5);  // root, master, two sibling leaves, mixture
  CHECK(rec.action == action_of({{Treatment::IV, 3}, {Treatment::Vaso, 2}}));

  // Without communication the sibling leaves are not consulted.
  set.config.no_communication = true;
  CHECK(recommend(set, bundle_for(set, w)).evaluations == 3);
}

TEST_CASE("starved agents are skipped and masked") {
  EpisodeStore store = cohort_store();
  std::size_t i = 0;
  for (auto& e : store.episodes) {
    for (auto& f : e.frames) f.action = (i++ % 3 == 0) ? JointAction{} : action_of({{Treatment::IV, 1 + int(i % 4)}});
  }
  const TrainingData data = make_training_data(store, kDefaultTerminalReward);
  const AgentSet set = train_hierarchy(data, small_config());
  for (AgentId id : {AgentId::Neu, AgentId::Ren, AgentId::NeuS1, AgentId::CarMix, AgentId::OMix, AgentId::OMixRen}) {
    CAPTURE(agent_name(id));
    CHECK(set.status[static_cast<std::size_t>(id)].skipped);
    CHECK(!set.available(id));
  }
  CHECK(set.status[static_cast<std::size_t>(AgentId::Car)].trained);
  CHECK(set.status[static_cast<std::size_t>(AgentId::CarIV)].trained);
  const auto root_mask = set.mask(AgentId::Rt);
  CHECK(root_mask[static_cast<std::size_t>(RootOption::Neu)] == 0);
  CHECK(root_mask[static_cast<std::size_t>(RootOption::OMix)] == 0);
  for (const auto& r : data.records) {
    const auto rec = recommend(set, bundle_for(set, r.w));
    CHECK((rec.path.root == RootOption::None || rec.path.root == RootOption::Car));
    CHECK(rec.action[Treatment::Vaso] == 0);
  }
}

TEST_CASE("divergence aborts with the agent id") {
  TrainConfig cfg = small_config();
  cfg.divergence_limit = 1e-12;
  try {
    train_hierarchy(cohort_data(), cfg);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.agent == AgentId::Rt);
  }
}

TEST_CASE("training is deterministic and persists exactly") {
  const AgentSet again = train_hierarchy(cohort_data(), small_config());
  CHECK(again.hash() == trained_set().hash());

  TempDir dir;
  save_agent_set(dir.path / "model", trained_set());
  const AgentSet loaded = load_agent_set(dir.path / "model");
  CHECK(loaded.hash() == trained_set().hash());
  for (std::size_t i = 0; i < 50; ++i) {
    const auto& r = cohort_data().records[i * 7 % cohort_data().records.size()];
    const auto a = recommend(trained_set(), bundle_for(trained_set(), r.w));
    const auto b = recommend(loaded, bundle_for(loaded, r.w));
    CHECK(a.action == b.action);
  }

  write_loss_curves(dir.path / "loss.csv", trained_set());
  std::ifstream in(dir.path / "loss.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "agent,epoch,loss");

  // Tampered payload is rejected.
  {
    std::ofstream out(dir.path / "model" / "agent_Rt.bin", std::ios::binary | std::ios::in | std::ios::out);
    out.seekp(8);
    const char junk[8] = {1, 2, 3, 4, 5, 6, 7, 8};
    out.write(junk, 8);
  }
  CHECK_THROWS(load_agent_set(dir.path / "model"));
  CHECK_THROWS_AS(load_agent_set(dir.path / "missing"), DataError);
}

TEST_CASE("hierarchy policy drives the simulator") {
  const DynamicsConfig cfg = default_dynamics();
  const auto schema = FeatureSchema::synthetic();
  HierarchyPolicy policy(trained_set());
  const PolicyValue v = true_policy_value(policy, cfg, schema, cohort().constants, 50, 3);
  CHECK(v.rollouts == 50);
  CHECK(std::isfinite(v.mean));
  CHECK(v.mean_length >= 1.0);
}
