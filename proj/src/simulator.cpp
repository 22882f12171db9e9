#include "hmarl/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

namespace hmarl {

namespace {

constexpr double kStep = 0.5;

double level_fraction(int level) { return static_cast<double>(level) / kMaxLevel; }

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

double treatment_effect(const TreatmentEffect& e, int level, double z) {
  if (level <= 0) return 0.0;
  const double u = level_fraction(level);
  return e.active + e.dose * u + e.severity * u * z + e.toxicity * u * u;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace

bool DynamicsConfig::has_cross_coupling() const {
  return sedation_cardio != 0.0 || iv_vaso_synergy != 0.0 || vaso_renal != 0.0 || vaso_diuretic != 0.0 ||
         std::any_of(organ_coupling.begin(), organ_coupling.end(), [](const auto& row) {
           return std::any_of(row.begin(), row.end(), [](double v) { return v != 0.0; });
         });
}

DynamicsConfig default_dynamics() {
  DynamicsConfig c;
  c.name = "default";
  // S1 sedation, S2 analgesia, IV fluids, vasopressor, diuretic, dialysis
  c.effect[0] = {0.05, 0.05, -0.40, 0.40};
  c.effect[1] = {0.05, 0.05, -0.25, 0.30};
  c.effect[2] = {0.05, 0.05, -0.35, 0.40};
  c.effect[3] = {0.05, 0.05, -0.40, 0.45};
  c.effect[4] = {0.05, 0.05, -0.40, 0.40};
  c.effect[5] = {0.60, -0.35, -0.25, 0.0};
  c.drift_base = {-0.05, -0.05, -0.05};
  c.drift_slope = {0.10, 0.10, 0.10};
  c.sedation_cardio = 0.25;
  c.iv_vaso_synergy = -0.20;
  c.vaso_renal = 0.35;
  c.vaso_diuretic = -0.30;
  c.organ_coupling = {{{0.0, 0.03, 0.03}, {0.04, 0.0, 0.04}, {0.02, 0.08, 0.0}}};
  c.noise_sd = 0.3;
  c.death_sofa = 17;
  c.recovery_sofa = 5;
  c.horizon = 18;
  c.behavior_skill = 0.7;
  c.behavior_temperature = 0.1;
  c.seed = 1;
  return c;
}

DynamicsConfig external_dynamics(const DynamicsConfig& base) {
  DynamicsConfig c = base;
  c.name = "external";
  for (auto& e : c.effect) {
    e.dose *= 0.9;
    e.severity *= 0.9;
  }
  for (auto& d : c.drift_base) d *= 1.2;
  c.vaso_renal *= 1.2;
  c.noise_sd *= 1.15;
  c.sick_mean += 0.2;
  c.multi_mean += 0.2;
  c.single_organ_fraction *= 0.8;
  c.observation_noise *= 1.2;
  c.missing_scale *= 1.3;
  c.seed = base.seed ^ 0x5eedull;
  return c;
}

DynamicsConfig null_dynamics() {
  DynamicsConfig c;
  c.name = "null";
  c.noise_sd = 0.0;
  c.death_sofa = 1000;
  c.recovery_sofa = -1;
  c.lactate_per_sofa = 0.0;
  c.lactate_per_cardio = 0.0;
  c.lactate_relief = 0.0;
  c.lactate_noise = 0.0;
  c.single_organ_fraction = 0.0;
  c.multi_mean = 0.0;
  c.multi_sd = 0.0;
  return c;
}

void validate(const DynamicsConfig& c) {
  if (c.horizon < 1) throw ContractError("horizon must be at least 1");
  if (!(c.noise_sd >= 0.0) || !(c.lactate_noise >= 0.0)) throw ContractError("noise scales must be non-negative");
  if (!(c.gamma > 0.0 && c.gamma <= 1.0)) throw ContractError("gamma must lie in (0, 1]");
  if (!(c.terminal_reward > 0.0)) throw ContractError("terminal reward must be positive");
  if (!(c.behavior_skill >= 0.0 && c.behavior_skill <= 1.0)) throw ContractError("behavior skill must lie in [0, 1]");
  if (!(c.behavior_temperature >= 0.0)) throw ContractError("behavior temperature must be non-negative");
  if (!(c.sick_sd >= 0.0 && c.healthy_sd >= 0.0 && c.multi_sd >= 0.0)) {
    throw ContractError("initial-state spread must be non-negative");
  }
  if (!(c.single_organ_fraction >= 0.0 && c.single_organ_fraction <= 1.0)) {
    throw ContractError("single_organ_fraction must lie in [0, 1]");
  }
}

namespace {

nlohmann::json effect_json(const TreatmentEffect& e) {
  return {{"active", e.active}, {"dose", e.dose}, {"severity", e.severity}, {"toxicity", e.toxicity}};
}

TreatmentEffect effect_from(const nlohmann::json& j, const TreatmentEffect& def) {
  TreatmentEffect e = def;
  e.active = j.value("active", def.active);
  e.dose = j.value("dose", def.dose);
  e.severity = j.value("severity", def.severity);
  e.toxicity = j.value("toxicity", def.toxicity);
  return e;
}

template <std::size_t N>
std::array<double, N> array_from(const nlohmann::json& j, const char* key, const std::array<double, N>& def) {
  if (!j.contains(key)) return def;
  const auto v = j.at(key).get<std::vector<double>>();
  if (v.size() != N) throw ContractError(std::string("config key ") + key + " has the wrong length");
  std::array<double, N> out{};
  std::copy(v.begin(), v.end(), out.begin());
  return out;
}

}  // namespace

std::string dynamics_to_json(const DynamicsConfig& c) {
  nlohmann::json j;
  j["name"] = c.name;
  nlohmann::json eff;
  for (std::size_t i = 0; i < kTreatmentCount; ++i) eff[treatment_name(static_cast<Treatment>(i))] = effect_json(c.effect[i]);
  j["effect"] = eff;
  j["drift_base"] = c.drift_base;
  j["drift_slope"] = c.drift_slope;
  j["sedation_cardio"] = c.sedation_cardio;
  j["iv_vaso_synergy"] = c.iv_vaso_synergy;
  j["vaso_renal"] = c.vaso_renal;
  j["vaso_diuretic"] = c.vaso_diuretic;
  j["organ_coupling"] = c.organ_coupling;
  j["noise_sd"] = c.noise_sd;
  j["death_sofa"] = c.death_sofa;
  j["recovery_sofa"] = c.recovery_sofa;
  j["horizon"] = c.horizon;
  j["lactate_base"] = c.lactate_base;
  j["lactate_per_sofa"] = c.lactate_per_sofa;
  j["lactate_per_cardio"] = c.lactate_per_cardio;
  j["lactate_relief"] = c.lactate_relief;
  j["lactate_noise"] = c.lactate_noise;
  j["single_organ_fraction"] = c.single_organ_fraction;
  j["sick_mean"] = c.sick_mean;
  j["sick_sd"] = c.sick_sd;
  j["healthy_mean"] = c.healthy_mean;
  j["healthy_sd"] = c.healthy_sd;
  j["multi_mean"] = c.multi_mean;
  j["multi_sd"] = c.multi_sd;
  j["terminal_reward_R"] = c.terminal_reward;
  j["gamma"] = c.gamma;
  j["behavior_skill"] = c.behavior_skill;
  j["behavior_temperature"] = c.behavior_temperature;
  j["observation_noise"] = c.observation_noise;
  j["missing_scale"] = c.missing_scale;
  j["seed"] = c.seed;
  return j.dump(2);
}

DynamicsConfig dynamics_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(std::string("dynamics config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ContractError("dynamics config must be a JSON object");
  const DynamicsConfig d = default_dynamics();
  const auto known = nlohmann::json::parse(dynamics_to_json(d));
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ContractError("unknown key in dynamics config: " + key);
  }
  DynamicsConfig c = d;
  try {
    c.name = j.value("name", d.name);
    if (j.contains("effect")) {
      for (const auto& [key, value] : j["effect"].items()) {
        bool known = false;
        for (std::size_t i = 0; i < kTreatmentCount; ++i) known = known || key == treatment_name(static_cast<Treatment>(i));
        if (!known) throw ContractError("unknown treatment in dynamics config: " + key);
      }
      for (std::size_t i = 0; i < kTreatmentCount; ++i) {
        const char* key = treatment_name(static_cast<Treatment>(i));
        if (j["effect"].contains(key)) c.effect[i] = effect_from(j["effect"][key], d.effect[i]);
      }
    }
    c.drift_base = array_from(j, "drift_base", d.drift_base);
    c.drift_slope = array_from(j, "drift_slope", d.drift_slope);
    c.sedation_cardio = j.value("sedation_cardio", d.sedation_cardio);
    c.iv_vaso_synergy = j.value("iv_vaso_synergy", d.iv_vaso_synergy);
    c.vaso_renal = j.value("vaso_renal", d.vaso_renal);
    c.vaso_diuretic = j.value("vaso_diuretic", d.vaso_diuretic);
    if (j.contains("organ_coupling")) {
      const auto m = j.at("organ_coupling").get<std::vector<std::vector<double>>>();
      if (m.size() != kOrganCount) throw ContractError("organ_coupling must be 3x3");
      for (std::size_t o = 0; o < kOrganCount; ++o) {
        if (m[o].size() != kOrganCount) throw ContractError("organ_coupling must be 3x3");
        std::copy(m[o].begin(), m[o].end(), c.organ_coupling[o].begin());
      }
    }
    c.noise_sd = j.value("noise_sd", d.noise_sd);
    c.death_sofa = j.value("death_sofa", d.death_sofa);
    c.recovery_sofa = j.value("recovery_sofa", d.recovery_sofa);
    c.horizon = j.value("horizon", d.horizon);
    c.lactate_base = j.value("lactate_base", d.lactate_base);
    c.lactate_per_sofa = j.value("lactate_per_sofa", d.lactate_per_sofa);
    c.lactate_per_cardio = j.value("lactate_per_cardio", d.lactate_per_cardio);
    c.lactate_relief = j.value("lactate_relief", d.lactate_relief);
    c.lactate_noise = j.value("lactate_noise", d.lactate_noise);
    c.single_organ_fraction = j.value("single_organ_fraction", d.single_organ_fraction);
    c.sick_mean = j.value("sick_mean", d.sick_mean);
    c.sick_sd = j.value("sick_sd", d.sick_sd);
    c.healthy_mean = j.value("healthy_mean", d.healthy_mean);
    c.healthy_sd = j.value("healthy_sd", d.healthy_sd);
    c.multi_mean = j.value("multi_mean", d.multi_mean);
    c.multi_sd = j.value("multi_sd", d.multi_sd);
    c.terminal_reward = j.value("terminal_reward_R", d.terminal_reward);
    c.gamma = j.value("gamma", d.gamma);
    c.behavior_skill = j.value("behavior_skill", d.behavior_skill);
    c.behavior_temperature = j.value("behavior_temperature", d.behavior_temperature);
    c.observation_noise = j.value("observation_noise", d.observation_noise);
    c.missing_scale = j.value("missing_scale", d.missing_scale);
    c.seed = j.value("seed", d.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(std::string("dynamics config has a bad field: ") + e.what());
  }
  validate(c);
  return c;
}

DynamicsConfig dynamics_from_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot read dynamics config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return dynamics_from_json(ss.str());
}

void dynamics_to_json_file(const std::filesystem::path& path, const DynamicsConfig& cfg) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << dynamics_to_json(cfg) << "\n";
}

int OrganState::sofa() const {
  return static_cast<int>(std::lround(2.0 * (score[0] + score[1] + score[2])));
}

int OrganState::cell() const {
  int c = 0;
  for (double s : score) c = c * kScoreLevels + static_cast<int>(std::lround(s / kStep));
  return c;
}

OrganState OrganState::from_cell(int cell) {
  OrganState s;
  for (int o = kOrganCount; o-- > 0;) {
    s.score[o] = (cell % kScoreLevels) * kStep;
    cell /= kScoreLevels;
  }
  return s;
}

double snap_score(double v) {
  const double r = std::round(v / kStep) * kStep;
  return std::clamp(r, 0.0, (kScoreLevels - 1) * kStep);
}

double noise_free_lactate(const OrganState& s, const DynamicsConfig& cfg) {
  return cfg.lactate_base + cfg.lactate_per_sofa * s.sofa() + cfg.lactate_per_cardio * s.score[1];
}

std::array<double, kOrganCount> mean_change(const OrganState& s, const JointAction& a, const DynamicsConfig& cfg) {
  const auto& e = cfg.effect;
  const double zn = s.score[0], zc = s.score[1], zr = s.score[2];
  const double u_s1 = level_fraction(a[Treatment::S1]);
  const double u_iv = level_fraction(a[Treatment::IV]);
  const double u_va = level_fraction(a[Treatment::Vaso]);
  const double u_di = level_fraction(a[Treatment::Diuretic]);
  std::array<double, kOrganCount> mu{};
  mu[0] = cfg.drift_base[0] + cfg.drift_slope[0] * zn + treatment_effect(e[0], a[Treatment::S1], zn) +
          treatment_effect(e[1], a[Treatment::S2], zn);
  mu[1] = cfg.drift_base[1] + cfg.drift_slope[1] * zc + treatment_effect(e[2], a[Treatment::IV], zc) +
          treatment_effect(e[3], a[Treatment::Vaso], zc) + cfg.iv_vaso_synergy * u_iv * u_va +
          cfg.sedation_cardio * u_s1;
  const double dialysis =
      a[Treatment::Dialysis] > 0 ? e[5].active + e[5].dose + e[5].severity * zr + e[5].toxicity : 0.0;
  mu[2] = cfg.drift_base[2] + cfg.drift_slope[2] * zr +
          treatment_effect(e[4], a[Treatment::Diuretic], zr) + dialysis + cfg.vaso_renal * u_va +
          cfg.vaso_diuretic * u_va * u_di;
  for (std::size_t o = 0; o < kOrganCount; ++o)
    for (std::size_t p = 0; p < kOrganCount; ++p)
      if (p != o) mu[o] += cfg.organ_coupling[o][p] * s.score[p];
  return mu;
}

StepResult sim_step(const OrganState& s, const JointAction& a, int step, const DynamicsConfig& cfg,
                    std::mt19937_64& rng) {
  validate(a);
  std::normal_distribution<double> n01(0.0, 1.0);
  const auto mu = mean_change(s, a, cfg);
  StepResult r;
  for (std::size_t o = 0; o < kOrganCount; ++o) {
    const double eps = n01(rng);
    r.next.score[o] = snap_score(s.score[o] + mu[o] + cfg.noise_sd * eps);
  }
  const double lac_eps = n01(rng);
  r.next.lactate = std::max(0.3, noise_free_lactate(r.next, cfg) - cfg.lactate_relief * level_fraction(a[Treatment::IV]) +
                                     cfg.lactate_noise * lac_eps);
  const int sofa = r.next.sofa();
  if (sofa >= cfg.death_sofa) {
    r.terminal = true;
    r.outcome = Outcome::deceased;
  } else if (sofa <= cfg.recovery_sofa || step + 1 >= cfg.horizon) {
    r.terminal = true;
    r.outcome = Outcome::survived;
  }
  if (r.terminal) {
    r.reward = r.outcome == Outcome::survived ? cfg.terminal_reward : -cfg.terminal_reward;
  } else {
    r.reward = intermediate_reward(s.sofa(), s.lactate, sofa, r.next.lactate);
  }
  return r;
}

namespace {

bool initial_ok(const OrganState& s, const DynamicsConfig& cfg) {
  const int sofa = s.sofa();
  return sofa < cfg.death_sofa && sofa > cfg.recovery_sofa;
}

}  // namespace

OrganState sample_initial_state(const DynamicsConfig& cfg, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::uniform_int_distribution<int> organ(0, kOrganCount - 1);
  OrganState s;
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const bool single = u01(rng) < cfg.single_organ_fraction;
    const int sick = organ(rng);
    for (int o = 0; o < static_cast<int>(kOrganCount); ++o) {
      const double eps = n01(rng);
      if (!single) {
        s.score[o] = snap_score(cfg.multi_mean + cfg.multi_sd * eps);
      } else if (o == sick) {
        s.score[o] = snap_score(cfg.sick_mean + cfg.sick_sd * eps);
      } else {
        s.score[o] = snap_score(cfg.healthy_mean + cfg.healthy_sd * eps);
      }
    }
    if (initial_ok(s, cfg)) break;
  }
  s.lactate = std::max(0.3, noise_free_lactate(s, cfg) + cfg.lactate_noise * n01(rng));
  return s;
}

PatientInfo sample_patient_info(std::mt19937_64& rng) {
  std::normal_distribution<double> age(65.0, 12.0);
  std::bernoulli_distribution female(0.45);
  PatientInfo p;
  p.age = std::clamp(age(rng), 18.0, 95.0);
  p.female = female(rng);
  return p;
}

std::vector<Reading> observe_window(const OrganState& s, const PatientInfo& info, int step,
                                    const FeatureSchema& schema, const DynamicsConfig& cfg, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::vector<Reading> out;
  const double noise = cfg.observation_noise;
  const auto emit = [&](const char* name, double minute, double value, double missing_rate) {
    // Draws are consumed whether or not the reading is kept so streams stay aligned.
    const double draw = u01(rng);
    if (!schema.contains(name)) return;
    if (draw < missing_rate * cfg.missing_scale) return;
    out.push_back({schema.index_of(name), minute, value});
  };
  const double zn = s.score[0], zc = s.score[1], zr = s.score[2];
  if (step == 0) {
    emit("gender", 0.0, info.female ? 1.0 : 0.0, 0.0);
    emit("age", 0.0, info.age, 0.0);
  }
  emit("sofa", 0.0, static_cast<double>(s.sofa()), 0.0);
  emit("timestep", 0.0, static_cast<double>(step), 0.0);
  emit("lactate", 1.0, s.lactate, 0.0);
  const double vent_p = 1.0 / (1.0 + std::exp(-2.5 * (zn - 2.0)));
  emit("mech_vent", 5.0, u01(rng) < vent_p ? 1.0 : 0.0, 0.0);
  emit("gcs", 30.0, std::clamp(15.0 - 2.5 * zn + 0.8 * noise * n01(rng), 3.0, 15.0), 0.2);
  for (double minute : {20.0, 140.0}) {
    emit("mbp", minute, 88.0 - 7.0 * zc + 5.0 * noise * n01(rng), 0.1);
    emit("heart_rate", minute + 1.0, 78.0 + 9.0 * zc + 8.0 * noise * n01(rng), 0.1);
  }
  emit("spo2", 60.0, std::min(100.0, 97.0 - 0.8 * zn - 0.5 * zc + 1.5 * noise * n01(rng)), 0.25);
  emit("creatinine", 90.0, std::exp(std::log(0.9) + 0.38 * zr + 0.12 * noise * n01(rng)), 0.3);
  const double urine_total = 500.0 * std::exp(-0.5 * zr + 0.2 * noise * n01(rng));
  for (double minute : {60.0, 140.0, 220.0}) emit("urine_output", minute, urine_total / 3.0, 0.15);
  return out;
}

void aggregate_readings(const std::vector<Reading>& readings, const FeatureSchema& schema, Vector& values,
                        std::vector<std::uint8_t>& missing) {
  const std::size_t d = schema.size();
  values.assign(d, 0.0);
  missing.assign(d, 1);
  std::vector<int> count(d, 0);
  for (const auto& r : readings) {
    values[r.feature] += r.value;
    ++count[r.feature];
  }
  for (std::size_t f = 0; f < d; ++f) {
    if (count[f] == 0) continue;
    missing[f] = 0;
    if (schema[f].aggregation == Aggregation::mean) values[f] /= count[f];
  }
}

// Oracle -----------------------------------------------------------------------

Oracle::Oracle(const DynamicsConfig& cfg, bool single_organ_only) : cfg_(cfg), single_organ_only_(single_organ_only) {
  validate(cfg_);
  actions_ = enumerate_space().actions;
  allowed_.assign(actions_.size(), 1);
  if (single_organ_only_) {
    for (std::size_t i = 0; i < actions_.size(); ++i) allowed_[i] = actions_[i].active_organ_count() <= 1;
  }
  solve();
}

std::array<double, kScoreLevels> Oracle::score_distribution(double score, double change) const {
  std::array<double, kScoreLevels> p{};
  const double m = score + change;
  if (cfg_.noise_sd <= 0.0) {
    p[static_cast<std::size_t>(std::lround(snap_score(m) / kStep))] = 1.0;
    return p;
  }
  double prev = 0.0;
  for (int j = 0; j < kScoreLevels - 1; ++j) {
    const double upper = normal_cdf(((j + 0.5) * kStep - m) / cfg_.noise_sd);
    p[j] = upper - prev;
    prev = upper;
  }
  p[kScoreLevels - 1] = 1.0 - prev;
  return p;
}

void Oracle::q_row(int step, int cell, const Vector& next_value, Vector& q) const {
  constexpr int L = kScoreLevels;
  const OrganState s = OrganState::from_cell(cell);
  const int sofa = s.sofa();
  const double lac = noise_free_lactate(s, cfg_);
  const bool last = step + 1 >= cfg_.horizon;

  // g over next cells: expected reward + discounted continuation.
  std::array<double, kGridCells> g{};
  for (int c2 = 0; c2 < kGridCells; ++c2) {
    const OrganState n = OrganState::from_cell(c2);
    const int sofa2 = n.sofa();
    if (sofa2 >= cfg_.death_sofa) {
      g[c2] = -cfg_.terminal_reward;
    } else if (sofa2 <= cfg_.recovery_sofa || last) {
      g[c2] = cfg_.terminal_reward;
    } else {
      g[c2] = intermediate_reward(sofa, lac, sofa2, noise_free_lactate(n, cfg_)) + cfg_.gamma * next_value[c2];
    }
  }

  // Per-organ next-score distributions keyed by the treatments that move each organ.
  JointAction a;
  std::array<std::array<double, L>, 25> pn{};
  for (int s1 = 0; s1 < 5; ++s1)
    for (int s2 = 0; s2 < 5; ++s2) {
      a = {};
      a[Treatment::S1] = s1;
      a[Treatment::S2] = s2;
      pn[s1 * 5 + s2] = score_distribution(s.score[0], mean_change(s, a, cfg_)[0]);
    }
  std::array<std::array<double, L>, 125> pc{};
  for (int s1 = 0; s1 < 5; ++s1)
    for (int iv = 0; iv < 5; ++iv)
      for (int va = 0; va < 5; ++va) {
        a = {};
        a[Treatment::S1] = s1;
        a[Treatment::IV] = iv;
        a[Treatment::Vaso] = va;
        pc[(s1 * 5 + iv) * 5 + va] = score_distribution(s.score[1], mean_change(s, a, cfg_)[1]);
      }
  std::array<std::array<double, L>, 30> pr{};
  for (int va = 0; va < 5; ++va)
    for (int ro = 0; ro < kRenalOptionCount; ++ro) {
      a = {};
      a[Treatment::Vaso] = va;
      set_renal_option(a, ro);
      pr[va * kRenalOptionCount + ro] = score_distribution(s.score[2], mean_change(s, a, cfg_)[2]);
    }

  // Contract renal, then cardio, then neuro.
  std::vector<double> w1(30 * L * L, 0.0);  // [va,ro][n][c]
  for (int key = 0; key < 30; ++key) {
    const auto& p = pr[key];
    for (int n = 0; n < L; ++n)
      for (int c = 0; c < L; ++c) {
        const double* gr = &g[(n * L + c) * L];
        double acc = 0.0;
        for (int r = 0; r < L; ++r) acc += p[r] * gr[r];
        w1[(key * L + n) * L + c] = acc;
      }
  }
  std::vector<double> w2(750 * L, 0.0);  // [s1,iv,va,ro][n]
  for (int s1 = 0; s1 < 5; ++s1)
    for (int iv = 0; iv < 5; ++iv)
      for (int va = 0; va < 5; ++va) {
        const auto& p = pc[(s1 * 5 + iv) * 5 + va];
        for (int ro = 0; ro < kRenalOptionCount; ++ro) {
          const int key = va * kRenalOptionCount + ro;
          const int out = ((s1 * 5 + iv) * 5 + va) * kRenalOptionCount + ro;
          for (int n = 0; n < L; ++n) {
            const double* wc = &w1[(key * L + n) * L];
            double acc = 0.0;
            for (int c = 0; c < L; ++c) acc += p[c] * wc[c];
            w2[out * L + n] = acc;
          }
        }
      }
  q.assign(kJointActionCount, 0.0);
  for (std::size_t idx = 0; idx < kJointActionCount; ++idx) {
    const int ro = static_cast<int>(idx % kRenalOptionCount);
    std::size_t rest = idx / kRenalOptionCount;
    const int va = static_cast<int>(rest % 5);
    rest /= 5;
    const int iv = static_cast<int>(rest % 5);
    rest /= 5;
    const int s2 = static_cast<int>(rest % 5);
    const int s1 = static_cast<int>(rest / 5);
    const auto& p = pn[s1 * 5 + s2];
    const double* wn = &w2[(((s1 * 5 + iv) * 5 + va) * kRenalOptionCount + ro) * L];
    double acc = 0.0;
    for (int n = 0; n < L; ++n) acc += p[n] * wn[n];
    q[idx] = allowed_[idx] ? acc : -std::numeric_limits<double>::infinity();
  }
}

void Oracle::solve() {
  const int T = cfg_.horizon;
  v_.assign(T + 1, Vector(kGridCells, 0.0));
  greedy_.assign(T, std::vector<std::int32_t>(kGridCells, -1));
  Vector q;
  for (int t = T - 1; t >= 0; --t) {
    for (int cell = 0; cell < kGridCells; ++cell) {
      q_row(t, cell, v_[t + 1], q);
      const auto it = std::max_element(q.begin(), q.end());
      v_[t][cell] = *it;
      greedy_[t][cell] = static_cast<std::int32_t>(it - q.begin());
    }
  }
}

double Oracle::value(int step, int cell) const {
  if (step < 0 || step >= cfg_.horizon) throw ContractError("oracle step out of range");
  return v_.at(step).at(cell);
}

Vector Oracle::q_values(int step, int cell) const {
  if (step < 0 || step >= cfg_.horizon) throw ContractError("oracle step out of range");
  Vector q;
  q_row(step, cell, v_[step + 1], q);
  return q;
}

std::size_t Oracle::greedy(int step, int cell) const {
  if (step < 0 || step >= cfg_.horizon) throw ContractError("oracle step out of range");
  return static_cast<std::size_t>(greedy_[step][cell]);
}

Vector initial_distribution(const DynamicsConfig& cfg) {
  // Snapped-normal mixture over cells, restricted to non-terminal starting cells and renormalized.
  const auto snapped = [](double m, double sd) {
    std::array<double, kScoreLevels> p{};
    if (sd <= 0.0) {
      p[static_cast<std::size_t>(std::lround(snap_score(m) / kStep))] = 1.0;
      return p;
    }
    double prev = 0.0;
    for (int j = 0; j < kScoreLevels - 1; ++j) {
      const double upper = normal_cdf(((j + 0.5) * kStep - m) / sd);
      p[j] = upper - prev;
      prev = upper;
    }
    p[kScoreLevels - 1] = 1.0 - prev;
    return p;
  };
  const auto sick = snapped(cfg.sick_mean, cfg.sick_sd);
  const auto healthy = snapped(cfg.healthy_mean, cfg.healthy_sd);
  const auto multi = snapped(cfg.multi_mean, cfg.multi_sd);
  Vector dist(kGridCells, 0.0);
  double total = 0.0;
  for (int cell = 0; cell < kGridCells; ++cell) {
    const OrganState s = OrganState::from_cell(cell);
    if (!initial_ok(s, cfg)) continue;
    std::array<std::size_t, kOrganCount> idx{};
    for (std::size_t o = 0; o < kOrganCount; ++o) idx[o] = static_cast<std::size_t>(std::lround(s.score[o] / kStep));
    double w_multi = 1.0;
    for (std::size_t o = 0; o < kOrganCount; ++o) w_multi *= multi[idx[o]];
    double w_single = 0.0;
    for (std::size_t k = 0; k < kOrganCount; ++k) {
      double w = 1.0;
      for (std::size_t o = 0; o < kOrganCount; ++o) w *= o == k ? sick[idx[o]] : healthy[idx[o]];
      w_single += w / kOrganCount;
    }
    dist[cell] = cfg.single_organ_fraction * w_single + (1.0 - cfg.single_organ_fraction) * w_multi;
    total += dist[cell];
  }
  if (total <= 0.0) {
    // Degenerate configs (e.g. null dynamics) start from the multi-organ mean cell regardless of thresholds.
    OrganState s;
    for (std::size_t o = 0; o < kOrganCount; ++o) s.score[o] = snap_score(cfg.multi_mean);
    dist[s.cell()] = 1.0;
    return dist;
  }
  for (auto& v : dist) v /= total;
  return dist;
}

double Oracle::initial_value() const {
  const Vector p0 = initial_distribution(cfg_);
  double v = 0.0;
  for (int cell = 0; cell < kGridCells; ++cell)
    if (p0[cell] > 0.0) v += p0[cell] * v_[0][cell];
  return v;
}

Vector behavior_distribution(const Oracle& oracle, int step, int cell, double skill, double temperature) {
  const std::size_t n = kJointActionCount;
  Vector p(n, (1.0 - skill) / static_cast<double>(n));
  if (skill <= 0.0) return p;
  if (temperature <= 0.0) {
    p[oracle.greedy(step, cell)] += skill;
    return p;
  }
  static const std::vector<std::uint8_t> root_of = [] {
    std::vector<std::uint8_t> r(kJointActionCount);
    for (std::size_t i = 0; i < kJointActionCount; ++i) r[i] = static_cast<std::uint8_t>(decompose(from_flat_index(i)).root);
    return r;
  }();
  const Vector q = oracle.q_values(step, cell);
  std::array<double, kRootOptionCount> best;
  best.fill(-std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n; ++i) best[root_of[i]] = std::max(best[root_of[i]], q[i]);
  const double qmax = *std::max_element(best.begin(), best.end());
  std::array<double, kRootOptionCount> option_w{}, inner_z{};
  double option_z = 0.0;
  for (std::size_t o = 0; o < kRootOptionCount; ++o) {
    option_w[o] = std::isfinite(best[o]) ? std::exp((best[o] - qmax) / temperature) : 0.0;
    option_z += option_w[o];
  }
  Vector w(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(q[i])) continue;
    w[i] = std::exp((q[i] - best[root_of[i]]) / temperature);
    inner_z[root_of[i]] += w[i];
  }
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t o = root_of[i];
    if (w[i] > 0.0) p[i] += skill * (option_w[o] / option_z) * (w[i] / inner_z[o]);
  }
  return p;
}

double Trajectory::discounted_return(double gamma) const {
  double g = 0.0, disc = 1.0;
  for (double r : rewards) {
    g += disc * r;
    disc *= gamma;
  }
  return g;
}

std::uint64_t patient_seed(std::uint64_t base, std::uint64_t patient_index) {
  return splitmix64(base ^ splitmix64(patient_index + 0x1234567ull));
}

std::vector<Trajectory> generate_cohort(std::size_t n, const DynamicsConfig& cfg, const Oracle& oracle,
                                        const FeatureSchema& schema, const std::string& prefix,
                                        std::uint64_t first_index) {
  if (n == 0) throw ContractError("cohort size must be at least 1");
  std::vector<Trajectory> cohort;
  cohort.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t idx = first_index + i;
    const std::uint64_t seed = patient_seed(cfg.seed, idx);
    std::mt19937_64 dyn(seed);
    std::mt19937_64 obs(splitmix64(seed ^ 0x0b5ull));
    std::mt19937_64 act(splitmix64(seed ^ 0xac7ull));
    Trajectory tr;
    tr.patient_id = prefix + std::to_string(idx);
    tr.info = sample_patient_info(obs);
    OrganState s = sample_initial_state(cfg, dyn);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (int t = 0; t < cfg.horizon; ++t) {
      tr.states.push_back(s);
      tr.readings.push_back(observe_window(s, tr.info, t, schema, cfg, obs));
      const Vector p = behavior_distribution(oracle, t, s.cell(), cfg.behavior_skill, cfg.behavior_temperature);
      const double draw = u01(act);
      std::size_t chosen = p.size() - 1;
      double cum = 0.0;
      for (std::size_t k = 0; k < p.size(); ++k) {
        cum += p[k];
        if (draw < cum) {
          chosen = k;
          break;
        }
      }
      const JointAction a = from_flat_index(chosen);
      tr.actions.push_back(a);
      tr.behavior_prob.push_back(p[chosen]);
      const StepResult r = sim_step(s, a, t, cfg, dyn);
      tr.rewards.push_back(r.reward);
      if (r.terminal) {
        tr.outcome = r.outcome;
        break;
      }
      s = r.next;
    }
    cohort.push_back(std::move(tr));
  }
  return cohort;
}

double representative_dose(const TreatmentAxis& axis, int level) {
  if (level <= 0) return 0.0;
  if (axis.binary()) return 1.0;
  if (level >= 4) return 1.5 * axis.thresholds[3];
  return 0.5 * (axis.thresholds[level - 1] + axis.thresholds[level]);
}

CohortInputs to_cohort_inputs(const std::vector<Trajectory>& cohort, const FeatureSchema& schema) {
  const auto axes = default_axes();
  CohortInputs in;
  for (const auto& tr : cohort) {
    for (std::size_t t = 0; t < tr.length(); ++t) {
      for (const auto& r : tr.readings[t]) {
        in.events.push_back({tr.patient_id, kDefaultWindowMinutes * static_cast<double>(t) + r.minute,
                             schema[r.feature].name, r.value});
      }
      ActionRow row;
      row.patient_id = tr.patient_id;
      row.step = static_cast<int>(t);
      for (std::size_t k = 0; k < kTreatmentCount; ++k) row.doses[k] = representative_dose(axes[k], tr.actions[t].levels[k]);
      row.terminal = t + 1 == tr.length();
      row.outcome = row.terminal ? tr.outcome : Outcome::none;
      row.behavior_prob = tr.behavior_prob[t];
      in.actions.push_back(row);
    }
  }
  return in;
}

JointAction OraclePolicy::act(const StepContext& ctx) {
  if (ctx.state == nullptr) throw ContractError("oracle policy needs the simulator state");
  return from_flat_index(oracle_->greedy(ctx.step, ctx.state->cell()));
}

JointAction RandomPolicy::act(const StepContext&) {
  std::uniform_int_distribution<std::size_t> pick(0, kJointActionCount - 1);
  return from_flat_index(pick(rng_));
}

PolicyValue true_policy_value(Policy& policy, const DynamicsConfig& cfg, const FeatureSchema& schema,
                              const NormalizationConstants& constants, std::size_t n_rollouts,
                              std::uint64_t seed) {
  if (n_rollouts == 0) throw ContractError("need at least one rollout");
  double sum = 0.0, sum_sq = 0.0, deaths = 0.0, steps = 0.0;
  Vector values, raw, x;
  std::vector<std::uint8_t> missing;
  for (std::size_t i = 0; i < n_rollouts; ++i) {
    const std::uint64_t ps = patient_seed(seed, i);
    std::mt19937_64 dyn(ps);
    std::mt19937_64 obs(splitmix64(ps ^ 0x0b5ull));
    const PatientInfo info = sample_patient_info(obs);
    OrganState s = sample_initial_state(cfg, dyn);
    OnlineFeaturePipeline pipe(schema, constants);
    policy.reset();
    double g = 0.0, disc = 1.0;
    for (int t = 0; t < cfg.horizon; ++t) {
      aggregate_readings(observe_window(s, info, t, schema, cfg, obs), schema, values, missing);
      std::tie(raw, x) = pipe.push(values, missing);
      const StepContext ctx{&s, t, &raw, &x};
      const JointAction a = policy.act(ctx);
      const StepResult r = sim_step(s, a, t, cfg, dyn);
      g += disc * r.reward;
      disc *= cfg.gamma;
      steps += 1.0;
      if (r.terminal) {
        if (r.outcome == Outcome::deceased) deaths += 1.0;
        break;
      }
      s = r.next;
    }
    sum += g;
    sum_sq += g * g;
  }
  const double n = static_cast<double>(n_rollouts);
  PolicyValue v;
  v.rollouts = n_rollouts;
  v.mean = sum / n;
  const double var = n > 1 ? std::max(0.0, (sum_sq - n * v.mean * v.mean) / (n - 1.0)) : 0.0;
  v.stderr_ = std::sqrt(var / n);
  v.mortality = deaths / n;
  v.mean_length = steps / n;
  return v;
}

}  // namespace hmarl
