#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hmarl/agents.hpp"
#include "hmarl/ope.hpp"
#include "hmarl/simulator.hpp"
#include "hmarl/training.hpp"

namespace hmarl {

enum class BaselineKind : std::uint8_t { d3qn_s, d3qn_o, d3qn_t, qmix_o, qmix_t };

const char* baseline_name(BaselineKind k);  // "d3qn-s", ...
std::optional<BaselineKind> baseline_from_name(const std::string& name);
std::vector<BaselineKind> all_baselines();
bool is_cooperative(BaselineKind k);

/// The slice of the joint action one head controls.
enum class HeadAxis : std::uint8_t { flat, neu_pair, car_pair, renal, s1, s2, iv, vaso };

const char* axis_name(HeadAxis a);
HeadAxis axis_from_name(const std::string& name);
/// 3750 for the flat head, 25 for the paired organs, 6 for renal, 5 per dosed treatment.
std::size_t head_width(HeadAxis a);
std::size_t head_choice(HeadAxis a, const JointAction& action);
/// Writes the choice into its slice; other slices are untouched.
void apply_choice(HeadAxis a, std::size_t choice, JointAction& action);

/// D3QN-S: flat. D3QN-O / QMix-O: Neu, Car, Ren. D3QN-T / QMix-T: S1, S2, IV, Vaso, Ren.
/// A single renal head over {none, diuretic 1..4, dialysis} keeps renal exclusivity by construction.
std::vector<HeadAxis> baseline_layout(BaselineKind k);

// Dueling double Q ------------------------------------------------------------------

/// Network output is [A_0 .. A_{n-1}, V]; Q = V + A - mean(A).
Vector dueling_q(std::span<const double> raw);
/// dL/draw for a given dL/dQ (the transpose of the centering map).
Vector dueling_backward(std::span<const double> grad_q);
/// r + gamma * Q_target(s', argmax_valid Q_online(s')), or r when terminal.
double double_q_target(std::span<const double> q_online_next, std::span<const double> q_target_next, double r,
                       double gamma, bool terminal, std::span<const std::uint8_t> valid = {});

struct BaselineHead {
  HeadAxis axis = HeadAxis::flat;
  bool dueling = true;
  Approximator online;
  Approximator target;
  std::vector<std::uint8_t> valid;  // support mask; choice 0 (no treatment) is always valid

  Vector q(std::span<const double> state) const;
  Vector q_target(std::span<const double> state) const;
};

struct BaselineModel {
  BaselineKind kind = BaselineKind::d3qn_s;
  TrainConfig config;
  std::size_t d = 0;
  EmbeddingTable table;  // unified representation, tuned end-to-end
  std::vector<BaselineHead> heads;
  std::optional<MixingNetwork> mixer;  // cooperative kinds; reads the same state
  std::optional<MixingNetwork> mixer_target;
  std::size_t samples = 0;
  std::size_t epochs = 0;
  std::vector<double> loss_curve;

  std::size_t state_width() const;
  /// s^Rt of the window, or x_t itself with the representation ablated.
  Vector state(const XWindow& w) const;
  std::uint64_t hash() const;
};

/// Untrained model with every network seeded from `cfg.seed`.
BaselineModel make_baseline(BaselineKind kind, std::size_t d, const TrainConfig& cfg);

/// Every head sees every transition. `epochs` 0 gives the root agent's budget
/// (cfg.epochs + cfg.phase2_epochs passes). Throws NumericError on divergence.
BaselineModel train_baseline(BaselineKind kind, const TrainingData& data, const TrainConfig& cfg,
                             std::size_t epochs = 0);

struct BaselineDecision {
  JointAction action;
  std::vector<Vector> q;            // per head, online
  std::vector<std::size_t> choice;  // per head
  double value = 0.0;               // Q_tot, or the mean chosen Q of independent heads
};

BaselineDecision baseline_decide(const BaselineModel& m, std::span<const double> state);

class BaselinePolicy : public Policy {
 public:
  explicit BaselinePolicy(const BaselineModel& m) : m_(&m) {}
  void reset() override { history_.reset(); }
  JointAction act(const StepContext& ctx) override;
  std::string name() const override { return baseline_name(m_->kind); }

 private:
  const BaselineModel* m_;
  WindowHistory history_;
};

class BaselineOfflinePolicy : public OfflinePolicy {
 public:
  explicit BaselineOfflinePolicy(const BaselineModel& m) : m_(&m) {}
  Decision decide(const Episode& e, std::size_t step) const override;
  std::string name() const override { return baseline_name(m_->kind); }

 private:
  const BaselineModel* m_;
};

inline constexpr const char* kBaselineFormat = "hmarl-baseline-v1";

/// manifest.json, one weights pair per head, the mixer and the embedding table.
/// The flat head's action order (canonical flat index) is recorded in the manifest.
void save_baseline(const std::filesystem::path& dir, const BaselineModel& m);
BaselineModel load_baseline(const std::filesystem::path& dir);

}  // namespace hmarl
