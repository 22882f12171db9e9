#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hmarl/numerics.hpp"

namespace hmarl {

class ConstraintError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DataError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Organ : std::uint8_t { Neu = 0, Car = 1, Ren = 2 };
inline constexpr std::size_t kOrganCount = 3;
const char* organ_name(Organ o);

/// Axis order is fixed throughout the project: S1, S2, IV, Vaso, Diuretic, Dialysis.
enum class Treatment : std::uint8_t { S1 = 0, S2 = 1, IV = 2, Vaso = 3, Diuretic = 4, Dialysis = 5 };
inline constexpr std::size_t kTreatmentCount = 6;
inline constexpr int kMaxLevel = 4;
const char* treatment_name(Treatment t);
Organ organ_of(Treatment t);

struct TreatmentAxis {
  Treatment id = Treatment::S1;
  std::string name;
  Organ organ = Organ::Neu;
  int levels = 5;                     // 5 for dosed axes, 2 for dialysis
  // Lower edges of levels 1..4 in raw dose units, ascending; thresholds[q] is also the
  // inclusive upper edge of level q. Unused for dialysis.
  std::array<double, 4> thresholds{};

  bool binary() const { return levels == 2; }
};

/// Default axes using the 4-hourly dose thresholds of the reference cohort.
std::array<TreatmentAxis, kTreatmentCount> default_axes();

/// Level for a raw dose: 0 iff dose == 0, else the smallest q >= 1 with dose <= thresholds[q],
/// 4 above all thresholds. Boundary doses fall in the lower level. Dialysis: 1 iff dose > 0.
int discretize(const TreatmentAxis& axis, double raw_dose);

/// Per-axis discrete dosage levels.
struct JointAction {
  std::array<int, kTreatmentCount> levels{};

  int operator[](Treatment t) const { return levels[static_cast<std::size_t>(t)]; }
  int& operator[](Treatment t) { return levels[static_cast<std::size_t>(t)]; }
  bool operator==(const JointAction&) const = default;

  bool organ_active(Organ o) const;
  int active_organ_count() const;
  bool is_no_action() const;
};

bool satisfies_renal_exclusivity(const JointAction& a);
/// Range checks plus renal exclusivity.
bool is_valid(const JointAction& a);
void validate(const JointAction& a);

enum class RootOption : std::uint8_t { None = 0, Neu = 1, Car = 2, Ren = 3, OMix = 4 };
inline constexpr std::size_t kRootOptionCount = 5;
const char* root_option_name(RootOption o);

/// Neuro and cardio masters choose one of their two treatments or both.
enum class PairOption : std::uint8_t { First = 0, Second = 1, Mix = 2 };

/// Renal option index: 0 = none, 1..4 = diuretic level, 5 = dialysis.
inline constexpr int kRenalOptionCount = 6;
inline constexpr int kRenalDialysis = 5;

/// Within-organ choice for the paired organs. `first`/`second` are levels 0..4.
struct PairChoice {
  int first = 0;
  int second = 0;
  bool active() const { return first > 0 || second > 0; }
  bool operator==(const PairChoice&) const = default;
};

/// Structured view of a joint action along the agent hierarchy.
struct HierarchyPath {
  RootOption root = RootOption::None;
  PairChoice neu;
  PairChoice car;
  int renal = 0;  // renal option index (0 = none, 1..4 diuretic, 5 dialysis)

  bool operator==(const HierarchyPath&) const = default;
};

/// Option of a paired-organ master implied by a choice; requires choice.active().
PairOption pair_option(const PairChoice& c);

HierarchyPath decompose(const JointAction& a);
JointAction compose(const HierarchyPath& p);
/// Throws ContractError if the root option disagrees with which organs are active.
void check_well_formed(const HierarchyPath& p);

int renal_option(const JointAction& a);
void set_renal_option(JointAction& a, int option);

/// Canonical flat index over all valid joint actions (S1 major, renal option minor).
/// Counts 5*5*5*5*6 = 3750 with renal exclusivity.
std::size_t flat_index(const JointAction& a);
JointAction from_flat_index(std::size_t index);

struct SpaceSummary {
  std::size_t joint_count = 0;
  std::vector<JointAction> actions;
};

/// Enumerates joint actions in canonical order. Without the renal constraint the
/// diuretic and dialysis axes are free (5*5*5*5*5*2).
SpaceSummary enumerate_space(bool renal_exclusivity = true);
inline constexpr std::size_t kJointActionCount = 3750;

/// Per-step decision bound of a hierarchy with `depth` layers, `branching` parallel
/// agents per layer and at most `options` choices per agent.
std::size_t hierarchical_decision_bound(std::size_t depth, std::size_t branching, std::size_t options);

/// Pair-choice index for 25-way organ heads: first * 5 + second.
inline int pair_index(const PairChoice& c) { return c.first * 5 + c.second; }
inline PairChoice pair_from_index(int idx) { return {idx / 5, idx % 5}; }

PairChoice neu_choice(const JointAction& a);
PairChoice car_choice(const JointAction& a);

std::string to_string(const JointAction& a);

}  // namespace hmarl
