#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include <json.hpp>

#include "hmarl/ope.hpp"
#include "ope_oracle.hpp"
#include "test_util.hpp"

using namespace hmarl;

namespace {

struct SimCohort {
  DynamicsConfig cfg;
  std::vector<Trajectory> trajectories;
  EpisodeStore store;
};

SimCohort make_cohort(const DynamicsConfig& cfg, const Oracle& oracle, std::size_t n, const std::string& prefix) {
  const auto schema = FeatureSchema::synthetic();
  SimCohort c;
  c.cfg = cfg;
  c.trajectories = generate_cohort(n, cfg, oracle, schema, prefix);
  const auto inputs = to_cohort_inputs(c.trajectories, schema);
  c.store = build_episode_store(inputs, schema, fit_on_train(inputs, schema), "test");
  return c;
}

const Oracle& default_oracle() {
  static const Oracle o(default_dynamics());
  return o;
}

const SimCohort& behavior_cohort() {
  static const SimCohort c = make_cohort(default_dynamics(), default_oracle(), 300, "b");
  return c;
}

/// Oracle decisions at the hidden states of a generated cohort (episodes follow trajectory order).
DecisionTable oracle_decisions(const SimCohort& c, const Oracle& oracle) {
  DecisionTable out;
  for (std::size_t i = 0; i < c.trajectories.size(); ++i) {
    const auto& tr = c.trajectories[i];
    REQUIRE(c.store.episodes[i].patient_id == tr.patient_id);
    std::vector<Decision> row;
    for (std::size_t t = 0; t < tr.length(); ++t) {
      const int cell = tr.states[t].cell();
      row.push_back({from_flat_index(oracle.greedy(static_cast<int>(t), cell)), oracle.value(static_cast<int>(t), cell)});
    }
    out.push_back(row);
  }
  return out;
}

DecisionTable logged_decisions(const EpisodeStore& store) {
  DecisionTable out;
  for (const auto& e : store.episodes) {
    std::vector<Decision> row;
    for (const auto& f : e.frames) row.push_back({f.action, 0.0});
    out.push_back(row);
  }
  return out;
}

}  // namespace

TEST_CASE("cwpdis worked examples") {
  // Matching deterministic policy, behavior 0.5 per step, rewards (0, 10), gamma 1.
  const std::vector<IsTrajectory> one{{{1.0, 0.5, 0.0}, {1.0, 0.5, 10.0}}};
  CHECK(cwpdis(one, 1.0) == doctest::Approx(10.0).epsilon(1e-12));

  // Disjoint support: every ratio vanishes, so every term is dropped.
  const std::vector<IsTrajectory> none{{{0.0, 0.4, 3.0}, {0.0, 0.2, 5.0}}, {{0.0, 0.9, -1.0}}};
  CHECK(cwpdis(none, 0.99) == 0.0);

  const std::vector<IsTrajectory> bad{{{1.0, 0.0, 1.0}}};
  CHECK_THROWS_AS(cwpdis(bad, 1.0), ContractError);
}

TEST_CASE("cwpdis on-policy reduction equals the empirical mean") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> p(0.01, 1.0), r(-10, 10);
  std::uniform_int_distribution<std::size_t> n(1, 20), h(1, 12);
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<IsTrajectory> data(n(rng));
    for (auto& tr : data) {
      tr.resize(h(rng));
      for (auto& s : tr) {
        s.behavior_prob = s.eval_prob = p(rng);
        s.reward = r(rng);
      }
    }
    // The identity needs a common horizon: with ragged lengths each per-step mean covers a
    // different set of trajectories.
    const std::size_t len = data.front().size();
    for (auto& tr : data) tr.resize(len, tr.back());
    CHECK(std::abs(cwpdis(data, 0.97) - empirical_value(data, 0.97)) < 1e-9);
  }
}

TEST_CASE("cwpdis matches the brute-force reference on small tabular problems") {
  std::mt19937_64 rng(2024);
  for (int rep = 0; rep < 1000; ++rep) {
    const TabularCase c = random_case(rng);
    CHECK(std::abs(cwpdis(as_is(c), c.gamma) - brute_force_wpdis(c)) < 1e-9);
  }
}

TEST_CASE("behavior model probabilities are floored and normalized") {
  const auto& c = behavior_cohort();
  const BehaviorModel m = fit_behavior(c.store);
  for (std::size_t i = 0; i < 5; ++i) {
    const auto& x = c.store.episodes[i].frames.front().x;
    const Vector p = m.distribution(x);
    CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-9));
    const Vector root = m.root_probabilities(x);
    CHECK(std::accumulate(root.begin(), root.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
    for (double v : root) CHECK(v >= m.floor);
    for (const SoftmaxHead* h : {&m.neu, &m.car, &m.ren, &m.omix_neu, &m.omix_car, &m.omix_ren})
      for (double v : h->probabilities(x, m.floor)) CHECK(v >= m.floor);
    for (std::size_t k = 0; k < kJointActionCount; k += 397)
      CHECK(m.probability(x, from_flat_index(k)) == doctest::Approx(p[k]).epsilon(1e-12));
  }
  const auto kl = logged_fitted_kl(m, c.store);
  REQUIRE(kl.has_value());
  CHECK(std::isfinite(*kl));
  MESSAGE("KL(logged || fitted) = " << *kl);
  CHECK_THROWS_AS(fit_behavior(EpisodeStore{}), DataError);
}

TEST_CASE("behavior model: always no-action clinician") {
  EpisodeStore s = behavior_cohort().store;
  for (auto& e : s.episodes)
    for (auto& f : e.frames) f.action = JointAction{};
  const BehaviorModel m = fit_behavior(s);
  double lowest = 1.0;
  for (const auto& e : s.episodes) lowest = std::min(lowest, m.root_probabilities(e.frames.front().x)[0]);
  CHECK(lowest >= 0.95);
}

TEST_CASE("behavior model: uniform-random clinician has near-uniform marginals") {
  DynamicsConfig cfg = default_dynamics();
  cfg.behavior_skill = 0.0;
  const SimCohort c = make_cohort(cfg, default_oracle(), 300, "u");
  // The floor deliberately moves mass toward rare root options; this checks the fit itself.
  BehaviorFitConfig fc;
  fc.floor = 0.0;
  const BehaviorModel m = fit_behavior(c.store, fc);

  const auto space = enumerate_space();
  std::array<std::array<double, 5>, kTreatmentCount> uniform{}, fitted{};
  for (const auto& a : space.actions)
    for (std::size_t k = 0; k < kTreatmentCount; ++k) uniform[k][a.levels[k]] += 1.0 / kJointActionCount;

  const std::size_t states = 20;
  for (std::size_t i = 0; i < states; ++i) {
    const Vector p = m.distribution(c.store.episodes[i].frames.front().x);
    for (std::size_t j = 0; j < kJointActionCount; ++j)
      for (std::size_t k = 0; k < kTreatmentCount; ++k) fitted[k][space.actions[j].levels[k]] += p[j] / states;
  }
  double worst = 0.0;
  for (std::size_t k = 0; k < kTreatmentCount; ++k)
    for (int l = 0; l < 5; ++l) worst = std::max(worst, std::abs(fitted[k][l] - uniform[k][l]));
  MESSAGE("largest marginal deviation " << worst);
  CHECK(worst <= 0.05);
}

TEST_CASE("fitted-vs-logged estimate gap shrinks as the behavior fit improves") {
  // Small cohorts leave the estimator noise larger than the behavior-model error.
  const SimCohort c = make_cohort(default_dynamics(), default_oracle(), 1500, "g");
  const auto rewards = episode_rewards(c.store, kDefaultTerminalReward);
  const DecisionTable dec = oracle_decisions(c, default_oracle());
  const double v_logged = cwpdis(is_trajectories(c.store, rewards, dec), 0.99);

  std::vector<std::pair<double, double>> fits;  // (log loss, gap)
  for (const auto& [fraction, epochs] : std::vector<std::pair<double, std::size_t>>{{1.0, 0}, {0.02, 2}, {1.0, 30}}) {
    BehaviorFitConfig fc;
    fc.sample_fraction = fraction;
    fc.epochs = epochs;
    const BehaviorModel m = fit_behavior(c.store, fc);
    const double gap = std::abs(cwpdis(is_trajectories(c.store, rewards, dec, &m), 0.99) - v_logged);
    fits.emplace_back(behavior_log_loss(m, c.store), gap);
    MESSAGE("fraction " << fraction << ", epochs " << epochs << ": log loss " << fits.back().first << ", gap " << gap);
  }
  CHECK(fits[0].first > fits[1].first);
  CHECK(fits[1].first > fits[2].first);
  CHECK(fits[0].second > fits[1].second);
  CHECK(fits[1].second > fits[2].second);
}

TEST_CASE("equal-count bins keep every sample and never split ties") {
  const Vector v{1, 1, 1, 2, 3, 3, 4, 5, 6, 7};
  const std::vector<std::uint8_t> d{1, 0, 1, 0, 0, 1, 0, 0, 0, 0};
  const BinnedCurve c = equal_count_curve(v, d, 4);
  CHECK(c.total() == v.size());
  for (std::size_t b = 0; b + 1 < c.bins(); ++b) CHECK(c.hi[b] < c.lo[b + 1]);
  CHECK(c.n.front() == 3);
  CHECK(c.mortality.front() == doctest::Approx(2.0 / 3.0));
  for (double m : c.mortality) CHECK((m >= 0.0 && m <= 1.0));
}

TEST_CASE("mortality from returns") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g(0, 5);
  Vector ret(500);
  std::vector<std::uint8_t> died(500);
  std::size_t deaths = 0;
  for (std::size_t i = 0; i < ret.size(); ++i) {
    ret[i] = g(rng);
    died[i] = std::bernoulli_distribution(ret[i] < 0 ? 0.7 : 0.1)(rng);
    deaths += died[i];
  }
  const auto cal = calibrate_mortality(ret, died, 20);
  CHECK(cal.curve.bins() == 20);

  SUBCASE("identity calibration reproduces cohort mortality") {
    const auto est = mortality_from_returns(cal, ret, 200);
    CHECK(est.mortality == doctest::Approx(static_cast<double>(deaths) / 500.0).epsilon(1e-12));
    CHECK(est.stderr_ > 0.0);
    CHECK(est.clamped == 0);
  }
  SUBCASE("returns above the range saturate at the top bin") {
    const Vector high(50, 1e6);
    const auto est = mortality_from_returns(cal, high, 50);
    CHECK(est.mortality == doctest::Approx(cal.curve.mortality.back()));
    CHECK(est.clamped == 50);
  }
}

TEST_CASE("mortality from returns tracks simulator mortality of another policy") {
  const auto& c = behavior_cohort();
  Vector clin;
  std::vector<std::uint8_t> died;
  for (const auto& tr : c.trajectories) {
    clin.push_back(tr.discounted_return(0.99));
    died.push_back(tr.outcome == Outcome::deceased);
  }
  const auto cal = calibrate_mortality(clin, died);

  DynamicsConfig better = default_dynamics();
  better.behavior_skill = 0.95;
  better.seed = 77;
  const auto schema = FeatureSchema::synthetic();
  const auto other = generate_cohort(400, better, default_oracle(), schema, "o");
  Vector ret;
  double true_mortality = 0.0;
  for (const auto& tr : other) {
    ret.push_back(tr.discounted_return(0.99));
    true_mortality += tr.outcome == Outcome::deceased ? 1.0 : 0.0;
  }
  true_mortality /= static_cast<double>(other.size());
  const auto est = mortality_from_returns(cal, ret, 100);
  MESSAGE("estimated " << est.mortality << " vs simulator " << true_mortality);
  CHECK(std::abs(est.mortality - true_mortality) <= 0.02);
}

TEST_CASE("mortality-vs-return curves") {
  SUBCASE("oracle values order mortality when severity drives death") {
    // Under the default dynamics almost every patient is salvageable, so V* mostly reflects the
    // recoverable SOFA/lactate shaping and barely predicts clinician-cohort deaths. Here
    // noisier, weaker-treatment dynamics make severity carry real death risk.
    DynamicsConfig cfg = default_dynamics();
    cfg.noise_sd = 0.45;
    cfg.drift_base = {-0.15, -0.15, -0.15};
    for (auto& e : cfg.effect) e.severity *= 0.88;
    cfg.lactate_per_sofa = 0.1;
    cfg.lactate_per_cardio = 0.15;
    const Oracle oracle(cfg);
    const SimCohort c = make_cohort(cfg, oracle, 300, "s");
    const DecisionTable dec = oracle_decisions(c, oracle);
    Vector v;
    std::vector<std::uint8_t> died;
    decision_values(c.store, dec, v, died);
    const ReturnCurve rc = mortality_vs_return(v, died);
    CHECK(rc.curve.total() == c.store.frame_count());
    MESSAGE("oracle spearman " << rc.spearman);
    CHECK(rc.spearman <= -0.8);
  }
  SUBCASE("independent returns give a null correlation") {
    std::mt19937_64 rng(12);
    std::normal_distribution<double> g;
    Vector v(4000);
    std::vector<std::uint8_t> died(4000);
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = g(rng);
      died[i] = std::bernoulli_distribution(0.3)(rng);
    }
    const ReturnCurve rc = mortality_vs_return(v, died);
    CHECK(rc.curve.total() == 4000);
    CHECK(std::abs(rc.spearman) < 0.5);
    CHECK(rc.ci.lo <= 0.0);
    CHECK(rc.ci.hi >= 0.0);
  }
  SUBCASE("a single bin is rejected") {
    const Vector v(10, 1.0);
    const std::vector<std::uint8_t> died(10, 0);
    CHECK_THROWS_AS(mortality_vs_return(v, died), AnalysisError);
  }
}

TEST_CASE("spearman and pearson") {
  CHECK(spearman(Vector{1, 2, 3, 4}, Vector{10, 20, 30, 40}) == doctest::Approx(1.0));
  CHECK(spearman(Vector{1, 2, 3, 4}, Vector{1, 4, 9, 16}) == doctest::Approx(1.0));
  CHECK(spearman(Vector{1, 2, 3, 4}, Vector{4, 3, 2, 1}) == doctest::Approx(-1.0));
  // Ties take averaged ranks: (1, 2.5, 2.5, 4) against (1, 2, 3, 4).
  CHECK(spearman(Vector{1, 2, 2, 3}, Vector{1, 2, 3, 4}) == doctest::Approx(pearson(Vector{1, 2.5, 2.5, 4}, Vector{1, 2, 3, 4})));
  CHECK(pearson(Vector{1, 1, 1}, Vector{1, 2, 3}) == 0.0);
}

TEST_CASE("dosage-difference curves") {
  const auto& store = behavior_cohort().store;
  SUBCASE("policy equal to the clinician puts all mass at zero") {
    const auto curves = dosage_difference_curves(store, logged_decisions(store));
    for (const auto& dc : curves) {
      CHECK(dc.curve.total() == store.frame_count());
      const std::size_t zero = dc.diffs.size() / 2;
      CHECK(dc.diffs[zero] == 0);
      CHECK(dc.curve.n[zero] == store.frame_count());
    }
    CHECK(curves[5].diffs.size() == 3);
    CHECK(curves[0].diffs.size() == 9);
  }
  SUBCASE("anti-clinician policy leaves bin zero empty") {
    DecisionTable dec = logged_decisions(store);
    for (auto& row : dec)
      for (auto& d : row) {
        for (std::size_t k = 0; k < 4; ++k) d.action.levels[k] = d.action.levels[k] >= 2 ? 0 : 4;
        // Renal axes are compared independently, so exclusivity is irrelevant here.
        d.action.levels[4] = d.action.levels[4] >= 2 ? 0 : 4;
        d.action.levels[5] = 1 - d.action.levels[5];
      }
    for (const auto& dc : dosage_difference_curves(store, dec)) CHECK(dc.curve.n[dc.diffs.size() / 2] == 0);
  }
}

TEST_CASE("treatment correlations") {
  const auto& c = behavior_cohort();
  const DecisionTable same = logged_decisions(c.store);
  const CorrelationSet cs = treatment_correlations(c.store, same);
  CHECK(cs.sofa_t1 <= cs.sofa_t2);
  std::size_t total = 0;
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t o = 0; o < 2; ++o) {
      const auto& a = cs.clinician[s][o];
      const auto& b = cs.policy[s][o];
      total += a.n;
      for (std::size_t i = 0; i < kTreatmentCount; ++i) {
        CHECK(a.r[i][i] == 1.0);
        for (std::size_t j = 0; j < kTreatmentCount; ++j) {
          CHECK(a.r[i][j] == b.r[i][j]);
          CHECK(a.r[i][j] == a.r[j][i]);
        }
      }
    }
  CHECK(total == c.store.frame_count());

  std::vector<JointAction> flat(5);
  for (int i = 0; i < 5; ++i) flat[i].levels[2] = i;
  const auto m = treatment_correlation(flat);
  CHECK(m.constant[0]);
  CHECK_FALSE(m.constant[2]);
  CHECK(m.r[0][2] == 0.0);
}

TEST_CASE("planted IV-vasopressor synergy shows up in the oracle's survivor stratum") {
  DynamicsConfig cfg = default_dynamics();
  REQUIRE(cfg.iv_vaso_synergy < 0.0);  // negative change improves the organ
  const auto& c = behavior_cohort();
  const CorrelationSet cs = treatment_correlations(c.store, oracle_decisions(c, default_oracle()));
  const auto iv = static_cast<std::size_t>(Treatment::IV), vaso = static_cast<std::size_t>(Treatment::Vaso);
  double pooled = 0.0;
  for (std::size_t s = 0; s < 3; ++s) {
    MESSAGE(std::string(severity_name(static_cast<Severity>(s))) << " survivors IV-Vaso r = " << cs.policy[s][0].r[iv][vaso]);
    pooled += cs.policy[s][0].r[iv][vaso];
  }
  CHECK(pooled > 0.0);
}

TEST_CASE("curve CSV round trip is lossless") {
  TempDir tmp;
  BinnedCurve c;
  c.lo = {-1.0 / 3.0, 0.1};
  c.hi = {0.0999999999999, 1e300};
  c.n = {7, 11};
  c.mortality = {2.0 / 7.0, 0.0};
  c.stderr_ = {std::sqrt(2.0 / 7.0 * 5.0 / 7.0 / 7.0), 0.0};
  write_curve_csv(tmp.path / "c.csv", c);
  const BinnedCurve back = read_curve_csv(tmp.path / "c.csv");
  CHECK(back.lo == c.lo);
  CHECK(back.hi == c.hi);
  CHECK(back.n == c.n);
  CHECK(back.mortality == c.mortality);
  CHECK(back.stderr_ == c.stderr_);
}

TEST_CASE("evaluation report for a trained hierarchy") {
  const auto& c = behavior_cohort();
  TrainConfig tc;
  tc.epochs = 1;
  tc.phase2_epochs = 1;
  tc.min_agent_samples = 8;
  tc.min_option_samples = 2;
  const auto data = make_training_data(c.store, kDefaultTerminalReward);
  const AgentSet set = train_hierarchy(data, tc);
  const HierarchyOfflinePolicy policy(set);
  const BehaviorModel fitted = fit_behavior(c.store);
  EvaluationContext ctx;
  ctx.fitted = &fitted;
  ctx.resamples = 100;
  const DatasetReport r = evaluate_dataset(policy, c.store, ctx);
  CHECK(r.patients == c.store.episodes.size());
  CHECK(r.behavior_source == "logged");
  CHECK(r.v_cwpdis_fitted.has_value());
  CHECK(r.return_curve.curve.total() == r.frames);

  TempDir tmp;
  write_report(tmp.path, "run", "proposed", {r});
  std::ifstream in(tmp.path / "report.json");
  const auto j = nlohmann::json::parse(in);
  CHECK(j["format"] == kReportFormat);
  CHECK(j["datasets"][0]["split"] == "test");
  const auto curve = read_curve_csv(tmp.path / "curves/test/mortality_vs_return.csv");
  CHECK(curve.total() == r.frames);
  CHECK(std::filesystem::exists(tmp.path / "curves/test/dosage_dialysis.csv"));
  CHECK(std::filesystem::exists(tmp.path / "curves/test/correlation_policy_high_deceased.csv"));
}
