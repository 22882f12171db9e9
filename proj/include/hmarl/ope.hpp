#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hmarl/actions.hpp"
#include "hmarl/features.hpp"
#include "hmarl/numerics.hpp"
#include "hmarl/training.hpp"

namespace hmarl {

/// Raised when an analysis has too little data to be meaningful.
class AnalysisError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// CWPDIS ---------------------------------------------------------------------------

/// One logged decision as seen by an importance-sampling estimator.
struct IsStep {
  double eval_prob = 0.0;      // pi_e(a_logged | s); 0 or 1 for deterministic policies
  double behavior_prob = 0.0;  // pi_b(a_logged | s)
  double reward = 0.0;
};
using IsTrajectory = std::vector<IsStep>;

/// V = sum_t gamma^t [sum_i rho_{i,1:t} r_{i,t}] / [sum_i rho_{i,1:t}]. Time steps whose
/// weights all vanish (or that no trajectory reaches) contribute zero.
/// Throws ContractError on a non-positive behavior probability.
double cwpdis(std::span<const IsTrajectory> data, double gamma);

/// Mean discounted return of the logged rewards.
double empirical_value(std::span<const IsTrajectory> data, double gamma);

// Behavior model ----------------------------------------------------------------------

inline constexpr double kBehaviorFloor = 0.01;

/// Softmax regression head on [x_t, 1].
struct SoftmaxHead {
  std::size_t classes = 0;
  Approximator net;  // single linear layer, d+1 -> classes (the bias is the layer's own)
  /// Floored probabilities: eps + (1 - K eps) p, so each entry is >= eps and they sum to 1.
  Vector probabilities(std::span<const double> x, double floor) const;
};

/// pi_b factored like the agent hierarchy: root option, then the within-option choice.
/// Multi-organ actions take independent per-organ heads renormalized over the >= 2 active set.
struct BehaviorModel {
  double floor = kBehaviorFloor;
  std::size_t d = 0;
  SoftmaxHead root;      // 5 root options
  SoftmaxHead neu;       // 24 non-zero pair indices (index - 1)
  SoftmaxHead car;       // 24
  SoftmaxHead ren;       // 5 renal options 1..5
  SoftmaxHead omix_neu;  // 25 pair indices, 0 = inactive
  SoftmaxHead omix_car;  // 25
  SoftmaxHead omix_ren;  // 6 renal options

  double probability(std::span<const double> x, const JointAction& a) const;
  /// Over the canonical flat index; sums to 1.
  Vector distribution(std::span<const double> x) const;
  Vector root_probabilities(std::span<const double> x) const;
};

struct BehaviorFitConfig {
  std::size_t epochs = 30;
  double lr = 0.5;
  double l2 = 1e-4;
  std::size_t batch = 256;
  double floor = kBehaviorFloor;
  std::uint64_t seed = 11;
  double sample_fraction = 1.0;  // fraction of frames used (diagnostics of fit quality)
};

/// Throws DataError on an empty store.
BehaviorModel fit_behavior(const EpisodeStore& train, const BehaviorFitConfig& cfg = {});

/// Mean negative log-likelihood of the logged actions.
double behavior_log_loss(const BehaviorModel& m, const EpisodeStore& store);

/// Mean over frames of KL(logged || fitted), with the logged distribution a point mass
/// on the logged action at its recorded probability: sum p_logged * log(p_logged / p_fitted).
/// Only frames with a finite logged probability count; nullopt if none.
std::optional<double> logged_fitted_kl(const BehaviorModel& m, const EpisodeStore& store);

// Policy decisions on logged data -----------------------------------------------

struct Decision {
  JointAction action;
  double value = 0.0;  // the policy's own estimate of the expected return
};

/// decisions[episode][step]
using DecisionTable = std::vector<std::vector<Decision>>;

/// A deterministic policy that can be queried at any logged frame.
class OfflinePolicy {
 public:
  virtual ~OfflinePolicy() = default;
  virtual Decision decide(const Episode& e, std::size_t step) const = 0;
  virtual std::string name() const = 0;
};

class HierarchyOfflinePolicy : public OfflinePolicy {
 public:
  explicit HierarchyOfflinePolicy(const AgentSet& set) : set_(&set) {}
  Decision decide(const Episode& e, std::size_t step) const override;
  std::string name() const override { return "hierarchy"; }

 private:
  const AgentSet* set_;
};

/// The logged clinician action with the realized discounted return-to-go as its value.
class ClinicianPolicy : public OfflinePolicy {
 public:
  ClinicianPolicy(const FeatureSchema& schema, double terminal_reward, double gamma)
      : schema_(&schema), terminal_reward_(terminal_reward), gamma_(gamma) {}
  Decision decide(const Episode& e, std::size_t step) const override;
  std::string name() const override { return "clinician"; }

 private:
  const FeatureSchema* schema_;
  double terminal_reward_;
  double gamma_;
};

DecisionTable decide_all(const OfflinePolicy& policy, const EpisodeStore& store);

/// Per-episode rewards recomputed from the features.
std::vector<Vector> episode_rewards(const EpisodeStore& store, double terminal_reward);

/// Importance-sampling view with indicator eval probabilities. `behavior` supplies pi_b;
/// without it the logged probabilities are used (DataError if any is missing).
std::vector<IsTrajectory> is_trajectories(const EpisodeStore& store, const std::vector<Vector>& rewards,
                                          const DecisionTable& decisions, const BehaviorModel* behavior = nullptr);

// Curves ----------------------------------------------------------------------------

struct BinnedCurve {
  Vector lo;
  Vector hi;
  std::vector<std::size_t> n;
  Vector mortality;
  Vector stderr_;

  std::size_t bins() const { return n.size(); }
  std::size_t total() const;
  std::size_t nonempty() const;
};

/// Ranks with ties averaged, Pearson on ranks.
double spearman(std::span<const double> a, std::span<const double> b);
/// Returns 0 if either input is constant.
double pearson(std::span<const double> a, std::span<const double> b);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};
/// Fisher-z 95% interval for a correlation estimated from n points.
Interval fisher_interval(double r, std::size_t n);

/// Equal-count bins over `values` (ties never split). Bin i covers [lo_i, hi_i].
BinnedCurve equal_count_curve(std::span<const double> values, std::span<const std::uint8_t> died, std::size_t bins);

/// Return -> mortality calibration from clinician trajectories.
struct MortalityCalibration {
  BinnedCurve curve;
  /// Piecewise-constant lookup; values outside the range clamp to the edge bins.
  double lookup(double value, bool* clamped = nullptr) const;
};
MortalityCalibration calibrate_mortality(std::span<const double> clinician_returns,
                                         std::span<const std::uint8_t> died, std::size_t bins = 20);

struct MortalityEstimate {
  double mortality = 0.0;
  double stderr_ = 0.0;  // bootstrap over trajectories
  std::size_t clamped = 0;
};
MortalityEstimate mortality_from_returns(const MortalityCalibration& cal, std::span<const double> eval_returns,
                                         std::size_t resamples = 1000, std::uint64_t seed = 5);

struct ReturnCurve {
  BinnedCurve curve;
  double spearman = 0.0;  // bin centers vs mortality, over non-empty bins
  Interval ci;
};
/// Throws AnalysisError with fewer than 2 non-empty bins.
ReturnCurve mortality_vs_return(std::span<const double> values, std::span<const std::uint8_t> died,
                                std::size_t bins = 20);

/// Per-timestep values and patient outcomes from a decision table.
void decision_values(const EpisodeStore& store, const DecisionTable& decisions, Vector& values,
                     std::vector<std::uint8_t>& died);

struct DosageCurve {
  Treatment treatment = Treatment::S1;
  std::vector<int> diffs;  // clinician level - policy level
  BinnedCurve curve;
  std::optional<double> v_score;  // mortality at the extreme |diff| minus mortality at 0
};
std::array<DosageCurve, kTreatmentCount> dosage_difference_curves(const EpisodeStore& store,
                                                                 const DecisionTable& decisions);

enum class Severity : std::uint8_t { low = 0, med = 1, high = 2 };
const char* severity_name(Severity s);

struct CorrelationMatrix {
  std::array<std::array<double, kTreatmentCount>, kTreatmentCount> r{};
  std::array<bool, kTreatmentCount> constant{};
  std::size_t n = 0;
};
CorrelationMatrix treatment_correlation(std::span<const JointAction> actions);

struct CorrelationSet {
  double sofa_t1 = 0.0;  // tertile edges of per-timestep SOFA
  double sofa_t2 = 0.0;
  // [severity][0 survived / 1 deceased]
  std::array<std::array<CorrelationMatrix, 2>, 3> clinician{};
  std::array<std::array<CorrelationMatrix, 2>, 3> policy{};
};
CorrelationSet treatment_correlations(const EpisodeStore& store, const DecisionTable& decisions);

// Reports --------------------------------------------------------------------------

struct DatasetReport {
  std::string split;
  std::size_t patients = 0;
  std::size_t frames = 0;
  double clinician_value = 0.0;
  double clinician_mortality = 0.0;
  double v_cwpdis = 0.0;  // logged behavior probabilities when available, else fitted
  std::optional<double> v_cwpdis_fitted;
  std::optional<double> behavior_kl;
  std::string behavior_source;
  MortalityEstimate estimated_mortality;
  ReturnCurve return_curve;
  std::array<DosageCurve, kTreatmentCount> dosage;
  CorrelationSet correlations;
  std::optional<double> true_value;
  std::optional<double> true_mortality;
  std::size_t match_rate_steps = 0;  // frames where the policy agrees with the clinician
};

struct EvaluationContext {
  double gamma = 0.99;
  double terminal_reward = kDefaultTerminalReward;
  const BehaviorModel* fitted = nullptr;  // optional; used for the fitted estimate
  std::size_t bins = 20;
  std::size_t resamples = 1000;
  std::uint64_t seed = 5;
};

DatasetReport evaluate_dataset(const OfflinePolicy& policy, const EpisodeStore& store, const EvaluationContext& ctx);

inline constexpr const char* kReportFormat = "hmarl-report-v1";

/// report.json plus curves/<split>/*.csv under `dir`.
void write_report(const std::filesystem::path& dir, const std::string& model, const std::string& model_kind,
                  const std::vector<DatasetReport>& rows);

void write_curve_csv(const std::filesystem::path& path, const BinnedCurve& c);
BinnedCurve read_curve_csv(const std::filesystem::path& path);

}  // namespace hmarl
