#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "hmarl/actions.hpp"
#include "hmarl/numerics.hpp"
#include "hmarl/reward.hpp"

namespace hmarl {

class SchemaError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class FeatureKind { binary, normal, lognormal };
enum class Aggregation { mean, sum };

std::string to_string(FeatureKind k);
std::string to_string(Aggregation a);

struct FeatureSpec {
  std::string name;
  FeatureKind kind = FeatureKind::normal;
  Aggregation aggregation = Aggregation::mean;
};

class FeatureSchema {
 public:
  FeatureSchema() = default;
  explicit FeatureSchema(std::vector<FeatureSpec> features);

  /// Twelve-feature synthetic schema: 2 binary, 7 normal, 3 lognormal.
  static FeatureSchema synthetic();

  std::size_t size() const { return features_.size(); }
  const FeatureSpec& operator[](std::size_t i) const { return features_[i]; }
  const std::vector<FeatureSpec>& features() const { return features_; }
  /// Throws SchemaError for unknown names.
  std::size_t index_of(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  bool operator==(const FeatureSchema& other) const;

 private:
  std::vector<FeatureSpec> features_;
  std::map<std::string, std::size_t> index_;
};

struct RawEvent {
  std::string patient_id;
  double timestamp_min = 0.0;
  std::string feature;
  double value = 0.0;
};

/// windows x d matrix of aggregates for one patient, row-major, with a missingness mask.
struct WindowMatrix {
  std::string patient_id;
  std::size_t windows = 0;
  std::size_t width = 0;
  Vector values;
  std::vector<std::uint8_t> missing;

  WindowMatrix() = default;
  WindowMatrix(std::string id, std::size_t windows, std::size_t width);
  double& at(std::size_t w, std::size_t i) { return values[w * width + i]; }
  double at(std::size_t w, std::size_t i) const { return values[w * width + i]; }
  bool is_missing(std::size_t w, std::size_t i) const { return missing[w * width + i] != 0; }
  /// Pads with missing windows or truncates to `n` windows.
  void resize_windows(std::size_t n);
};

inline constexpr int kDefaultWindowMinutes = 240;

/// Half-open windows [w*len, (w+1)*len). Patients are returned in first-appearance order.
std::vector<WindowMatrix> aggregate_windows(const std::vector<RawEvent>& events, const FeatureSchema& schema,
                                            int window_minutes = kDefaultWindowMinutes);

/// Last observation carried forward; leading gaps take `defaults[i]`. The mask is preserved.
WindowMatrix impute_locf(const WindowMatrix& m, std::span<const double> defaults);

/// Per-feature medians of observed cells.
Vector population_medians(const std::vector<WindowMatrix>& train, std::size_t width);

struct FeatureScaling {
  FeatureKind kind = FeatureKind::normal;
  double lo = 0.0;  // binary: lower raw value; lognormal: on log1p scale
  double hi = 1.0;
  bool degenerate = false;
};

struct NormalizationConstants {
  std::vector<FeatureScaling> scaling;
  Vector population_default;
  std::vector<std::string> warnings;

  /// Every feature passes through unchanged (binary values already in {-0.5, 0.5}).
  static NormalizationConstants identity(const FeatureSchema& schema);
};

/// Fits min/max (and binary levels) on imputed train matrices.
NormalizationConstants fit_normalization(const std::vector<WindowMatrix>& train_imputed, const FeatureSchema& schema,
                                         Vector population_default);

/// Binary -> {-0.5, 0.5}; normal -> min-max; lognormal -> log1p then min-max; degenerate -> 0.5.
/// Held-out values are not clamped.
WindowMatrix normalize(const WindowMatrix& m, const FeatureSchema& schema, const NormalizationConstants& c);
double normalize_value(double raw, const FeatureScaling& s);

void save_normalization(const std::filesystem::path& path, const FeatureSchema& schema,
                        const NormalizationConstants& c);
NormalizationConstants load_normalization(const std::filesystem::path& path, const FeatureSchema& schema);

/// One 4-hour decision step of an episode.
struct EpisodeFrame {
  std::string patient_id;
  int step = 0;
  Vector raw;                         // imputed, pre-normalization
  Vector x;                           // normalized
  std::vector<std::uint8_t> missing;  // original missingness
  JointAction action;
  double behavior_prob = std::numeric_limits<double>::quiet_NaN();
  bool terminal = false;
  Outcome outcome = Outcome::none;
};

struct Episode {
  std::string patient_id;
  std::vector<EpisodeFrame> frames;

  Outcome outcome() const { return frames.empty() ? Outcome::none : frames.back().outcome; }
  bool died() const { return outcome() == Outcome::deceased; }
};

/// Contiguous steps from 0, exactly one terminal frame (the last), outcome only there.
void validate_episode(const Episode& e, std::size_t width);

struct EpisodeStore {
  FeatureSchema schema;
  std::string split;
  std::vector<Episode> episodes;

  std::size_t frame_count() const;
  double mortality() const;
  double mean_length() const;
};

inline constexpr const char* kEpisodesFormat = "hmarl-episodes-v1";

/// <stem>.json manifest and <stem>.bin float64 payload.
void save_episode_store(const std::filesystem::path& stem, const EpisodeStore& store);
EpisodeStore load_episode_store(const std::filesystem::path& stem);

// CSV interfaces --------------------------------------------------------------

struct ActionRow {
  std::string patient_id;
  int step = 0;
  std::array<double, kTreatmentCount> doses{};
  bool terminal = false;
  Outcome outcome = Outcome::none;
  double behavior_prob = std::numeric_limits<double>::quiet_NaN();
};

inline constexpr const char* kEventsHeader = "patient_id,timestamp_min,feature,value";
inline constexpr const char* kActionsHeader = "patient_id,step,s1,s2,iv,vaso,diuretic,dialysis,terminal,outcome";

void write_events_csv(const std::filesystem::path& path, const std::vector<RawEvent>& events);
std::vector<RawEvent> read_events_csv(const std::filesystem::path& path, const FeatureSchema& schema);
/// Appends a trailing behavior_prob column when any row carries one.
void write_actions_csv(const std::filesystem::path& path, const std::vector<ActionRow>& rows);
std::vector<ActionRow> read_actions_csv(const std::filesystem::path& path);

/// Joins windowed features with action rows into validated episodes.
struct CohortInputs {
  std::vector<RawEvent> events;
  std::vector<ActionRow> actions;
};

std::vector<WindowMatrix> windowed_patients(const CohortInputs& in, const FeatureSchema& schema,
                                            int window_minutes = kDefaultWindowMinutes);

EpisodeStore build_episode_store(const CohortInputs& in, const FeatureSchema& schema,
                                 const NormalizationConstants& constants, const std::string& split,
                                 int window_minutes = kDefaultWindowMinutes);

/// Fits medians and normalization on `train`, then builds the train store.
NormalizationConstants fit_on_train(const CohortInputs& train, const FeatureSchema& schema,
                                    int window_minutes = kDefaultWindowMinutes);

/// Incremental LOCF + normalization for one patient, used during live rollouts.
class OnlineFeaturePipeline {
 public:
  OnlineFeaturePipeline(const FeatureSchema& schema, const NormalizationConstants& c);
  /// Consumes one window of aggregates (missing cells flagged) and returns (raw, normalized).
  std::pair<Vector, Vector> push(std::span<const double> values, std::span<const std::uint8_t> missing);

 private:
  const FeatureSchema* schema_;
  const NormalizationConstants* constants_;
  Vector last_;
  std::vector<bool> seen_;
};

}  // namespace hmarl
