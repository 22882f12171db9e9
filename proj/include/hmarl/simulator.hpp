#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "hmarl/actions.hpp"
#include "hmarl/features.hpp"
#include "hmarl/reward.hpp"

namespace hmarl {

inline constexpr int kScoreLevels = 9;  // dysfunction scores 0, 0.5, ..., 4
inline constexpr int kGridCells = kScoreLevels * kScoreLevels * kScoreLevels;

/// Own-organ effect of one treatment: active*1[l>0] + dose*u + severity*u*z + toxicity*u^2, u = l/4.
/// Negative values improve the organ.
struct TreatmentEffect {
  double active = 0.0;
  double dose = 0.0;
  double severity = 0.0;
  double toxicity = 0.0;
};

struct DynamicsConfig {
  std::string name = "default";
  std::array<TreatmentEffect, kTreatmentCount> effect{};
  std::array<double, kOrganCount> drift_base{};
  std::array<double, kOrganCount> drift_slope{};

  // Cross-organ couplings.
  double sedation_cardio = 0.0;   // S1 dose worsens cardio
  double iv_vaso_synergy = 0.0;   // u_iv * u_vaso on cardio
  double vaso_renal = 0.0;        // vasopressor dose worsens renal
  double vaso_diuretic = 0.0;     // u_vaso * u_diuretic on renal
  // organ_coupling[o][p]: score of organ p added to the drift of organ o (diagonal unused).
  std::array<std::array<double, kOrganCount>, kOrganCount> organ_coupling{};

  double noise_sd = 0.0;
  int death_sofa = 18;
  int recovery_sofa = 2;
  int horizon = 18;

  double lactate_base = 1.0;
  double lactate_per_sofa = 0.2;
  double lactate_per_cardio = 0.3;
  double lactate_relief = 0.3;  // per unit IV dose fraction
  double lactate_noise = 0.2;

  // Case mix: with probability single_organ_fraction one uniformly chosen organ starts
  // sick and the others healthy; otherwise every organ draws from the multi-organ profile.
  double single_organ_fraction = 0.5;
  double sick_mean = 2.5, sick_sd = 0.7;
  double healthy_mean = 0.3, healthy_sd = 0.4;
  double multi_mean = 2.0, multi_sd = 0.8;

  double terminal_reward = kDefaultTerminalReward;
  double gamma = 0.99;

  double behavior_skill = 0.7;
  double behavior_temperature = 0.1;

  double observation_noise = 1.0;  // scales every feature's measurement noise
  double missing_scale = 1.0;      // scales per-feature missingness rates

  std::uint64_t seed = 1;

  bool has_cross_coupling() const;
};

/// Coefficients used by `generate` for the train/test cohorts.
DynamicsConfig default_dynamics();
/// Shifted coefficients, noise and case mix for the external cohort.
DynamicsConfig external_dynamics(const DynamicsConfig& base);
/// Every coefficient zero and thresholds disabled.
DynamicsConfig null_dynamics();

DynamicsConfig dynamics_from_json_file(const std::filesystem::path& path);
void dynamics_to_json_file(const std::filesystem::path& path, const DynamicsConfig& cfg);
std::string dynamics_to_json(const DynamicsConfig& cfg);
DynamicsConfig dynamics_from_json(const std::string& text);
void validate(const DynamicsConfig& cfg);

struct OrganState {
  std::array<double, kOrganCount> score{};  // each in {0, 0.5, ..., 4}
  double lactate = 1.0;

  int sofa() const;
  int cell() const;  // grid index over the three scores
  static OrganState from_cell(int cell);
};

struct PatientInfo {
  double age = 65.0;
  bool female = false;
};

struct StepResult {
  OrganState next;
  bool terminal = false;
  Outcome outcome = Outcome::none;
  double reward = 0.0;
};

/// Expected per-organ drift plus treatment effects and couplings.
std::array<double, kOrganCount> mean_change(const OrganState& s, const JointAction& a, const DynamicsConfig& cfg);

double snap_score(double v);  // round to the 0.5 grid and clamp to [0, 4]
double noise_free_lactate(const OrganState& s, const DynamicsConfig& cfg);

/// One 4-hour transition. `step` is the index of the transition (0-based).
StepResult sim_step(const OrganState& s, const JointAction& a, int step, const DynamicsConfig& cfg,
                    std::mt19937_64& rng);

OrganState sample_initial_state(const DynamicsConfig& cfg, std::mt19937_64& rng);
PatientInfo sample_patient_info(std::mt19937_64& rng);

/// Raw measurements for one window, as (feature index, minutes into window, value).
struct Reading {
  std::size_t feature = 0;
  double minute = 0.0;
  double value = 0.0;
};
std::vector<Reading> observe_window(const OrganState& s, const PatientInfo& info, int step,
                                    const FeatureSchema& schema, const DynamicsConfig& cfg, std::mt19937_64& rng);

/// Window aggregate (mean or sum per schema) with missingness mask.
void aggregate_readings(const std::vector<Reading>& readings, const FeatureSchema& schema, Vector& values,
                        std::vector<std::uint8_t>& missing);

/// Finite-horizon dynamic program over the score grid. Lactate enters the expected reward
/// through its noise-free component.
class Oracle {
 public:
  explicit Oracle(const DynamicsConfig& cfg, bool single_organ_only = false);

  const DynamicsConfig& config() const { return cfg_; }
  double value(int step, int cell) const;
  /// Q over the canonical flat action index, at decision `step`.
  Vector q_values(int step, int cell) const;
  /// Greedy flat action index (ties -> lowest index).
  std::size_t greedy(int step, int cell) const;
  /// Expected discounted return from the initial-state distribution.
  double initial_value() const;
  bool single_organ_only() const { return single_organ_only_; }

  /// Next-score distribution for one organ given a mean change.
  std::array<double, kScoreLevels> score_distribution(double score, double change) const;

 private:
  void solve();
  void q_row(int step, int cell, const Vector& next_value, Vector& q) const;

  DynamicsConfig cfg_;
  bool single_organ_only_ = false;
  std::vector<Vector> v_;  // v_[t][cell]
  std::vector<std::vector<std::int32_t>> greedy_;
  std::vector<JointAction> actions_;
  std::vector<std::uint8_t> allowed_;
};

/// Initial-state distribution over grid cells.
Vector initial_distribution(const DynamicsConfig& cfg);

/// skill * softened-greedy + (1 - skill) * uniform over valid actions. The softened part picks a
/// root option by Boltzmann over each option's best Q*, then an action within it by Boltzmann over Q*.
/// temperature == 0 means the greedy point mass.
Vector behavior_distribution(const Oracle& oracle, int step, int cell, double skill, double temperature);

struct Trajectory {
  std::string patient_id;
  PatientInfo info;
  std::vector<OrganState> states;     // states[t] observed before action t
  std::vector<JointAction> actions;
  std::vector<double> behavior_prob;
  std::vector<double> rewards;
  std::vector<std::vector<Reading>> readings;  // per window
  Outcome outcome = Outcome::none;

  std::size_t length() const { return actions.size(); }
  double discounted_return(double gamma) const;
};

std::uint64_t patient_seed(std::uint64_t base, std::uint64_t patient_index);

/// Behavior-policy cohort. Patient ids are "<prefix><index>".
std::vector<Trajectory> generate_cohort(std::size_t n, const DynamicsConfig& cfg, const Oracle& oracle,
                                        const FeatureSchema& schema, const std::string& prefix,
                                        std::uint64_t first_index = 0);

/// Raw dose representative of a level, used when writing the actions CSV.
double representative_dose(const TreatmentAxis& axis, int level);

/// Converts trajectories to the CSV-level inputs of the feature pipeline.
CohortInputs to_cohort_inputs(const std::vector<Trajectory>& cohort, const FeatureSchema& schema);

/// What a policy sees at decision time. `state` is the hidden truth (oracle policies only).
struct StepContext {
  const OrganState* state = nullptr;
  int step = 0;
  const Vector* raw = nullptr;
  const Vector* x = nullptr;
};

class Policy {
 public:
  virtual ~Policy() = default;
  virtual void reset() {}
  virtual JointAction act(const StepContext& ctx) = 0;
  virtual std::string name() const = 0;
};

class OraclePolicy : public Policy {
 public:
  explicit OraclePolicy(const Oracle& oracle) : oracle_(&oracle) {}
  JointAction act(const StepContext& ctx) override;
  std::string name() const override { return oracle_->single_organ_only() ? "oracle-single-organ" : "oracle"; }

 private:
  const Oracle* oracle_;
};

class ConstantPolicy : public Policy {
 public:
  explicit ConstantPolicy(JointAction a) : a_(a) {}
  JointAction act(const StepContext&) override { return a_; }
  std::string name() const override { return "constant"; }

 private:
  JointAction a_;
};

class RandomPolicy : public Policy {
 public:
  explicit RandomPolicy(std::uint64_t seed) : rng_(seed) {}
  JointAction act(const StepContext&) override;
  std::string name() const override { return "random"; }

 private:
  std::mt19937_64 rng_;
};

struct PolicyValue {
  double mean = 0.0;
  double stderr_ = 0.0;
  double mortality = 0.0;
  double mean_length = 0.0;
  std::size_t rollouts = 0;
};

/// Monte Carlo value from the initial-state distribution. Patient `i` uses the same
/// initial state and noise streams for every policy (common random numbers).
PolicyValue true_policy_value(Policy& policy, const DynamicsConfig& cfg, const FeatureSchema& schema,
                              const NormalizationConstants& constants, std::size_t n_rollouts,
                              std::uint64_t seed);

}  // namespace hmarl
