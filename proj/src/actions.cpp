#include "hmarl/actions.hpp"

#include <sstream>

#include "hmarl/numerics.hpp"

namespace hmarl {

const char* organ_name(Organ o) {
  switch (o) {
    case Organ::Neu: return "Neu";
    case Organ::Car: return "Car";
    case Organ::Ren: return "Ren";
  }
  return "?";
}

const char* treatment_name(Treatment t) {
  switch (t) {
    case Treatment::S1: return "s1";
    case Treatment::S2: return "s2";
    case Treatment::IV: return "iv";
    case Treatment::Vaso: return "vaso";
    case Treatment::Diuretic: return "diuretic";
    case Treatment::Dialysis: return "dialysis";
  }
  return "?";
}

Organ organ_of(Treatment t) {
  switch (t) {
    case Treatment::S1:
    case Treatment::S2: return Organ::Neu;
    case Treatment::IV:
    case Treatment::Vaso: return Organ::Car;
    default: return Organ::Ren;
  }
}

const char* root_option_name(RootOption o) {
  switch (o) {
    case RootOption::None: return "None";
    case RootOption::Neu: return "Neu";
    case RootOption::Car: return "Car";
    case RootOption::Ren: return "Ren";
    case RootOption::OMix: return "OMix";
  }
  return "?";
}

std::array<TreatmentAxis, kTreatmentCount> default_axes() {
  std::array<TreatmentAxis, kTreatmentCount> axes;
  const auto make = [](Treatment t, std::array<double, 4> th) {
    TreatmentAxis a;
    a.id = t;
    a.name = treatment_name(t);
    a.organ = organ_of(t);
    a.levels = 5;
    a.thresholds = th;
    return a;
  };
  axes[0] = make(Treatment::S1, {0.0, 3.40, 6.01, 9.53});
  axes[1] = make(Treatment::S2, {0.0, 0.65, 2.08, 4.30});
  axes[2] = make(Treatment::IV, {0.0, 56.17, 227.50, 530.93});
  axes[3] = make(Treatment::Vaso, {0.0, 9.40, 20.66, 44.42});
  axes[4] = make(Treatment::Diuretic, {0.0, 20.00, 160.00, 902.10});
  TreatmentAxis dialysis;
  dialysis.id = Treatment::Dialysis;
  dialysis.name = treatment_name(Treatment::Dialysis);
  dialysis.organ = Organ::Ren;
  dialysis.levels = 2;
  axes[5] = dialysis;
  return axes;
}

int discretize(const TreatmentAxis& axis, double raw_dose) {
  if (!(raw_dose >= 0.0)) throw DataError("negative or non-finite dose for " + axis.name);
  if (raw_dose == 0.0) return 0;
  if (axis.binary()) return 1;
  // thresholds[q] is the inclusive upper bound of level q for q = 1..3.
  for (std::size_t q = 1; q < 4; ++q) {
    if (raw_dose <= axis.thresholds[q]) return static_cast<int>(q);
  }
  return 4;
}

bool JointAction::organ_active(Organ o) const {
  switch (o) {
    case Organ::Neu: return (*this)[Treatment::S1] > 0 || (*this)[Treatment::S2] > 0;
    case Organ::Car: return (*this)[Treatment::IV] > 0 || (*this)[Treatment::Vaso] > 0;
    case Organ::Ren: return (*this)[Treatment::Diuretic] > 0 || (*this)[Treatment::Dialysis] > 0;
  }
  return false;
}

int JointAction::active_organ_count() const {
  return static_cast<int>(organ_active(Organ::Neu)) + static_cast<int>(organ_active(Organ::Car)) +
         static_cast<int>(organ_active(Organ::Ren));
}

bool JointAction::is_no_action() const {
  for (int l : levels)
    if (l != 0) return false;
  return true;
}

bool satisfies_renal_exclusivity(const JointAction& a) {
  return !(a[Treatment::Diuretic] > 0 && a[Treatment::Dialysis] > 0);
}

bool is_valid(const JointAction& a) {
  for (std::size_t i = 0; i < kTreatmentCount; ++i) {
    const int max = (i == static_cast<std::size_t>(Treatment::Dialysis)) ? 1 : kMaxLevel;
    if (a.levels[i] < 0 || a.levels[i] > max) return false;
  }
  return satisfies_renal_exclusivity(a);
}

void validate(const JointAction& a) {
  for (std::size_t i = 0; i < kTreatmentCount; ++i) {
    const int max = (i == static_cast<std::size_t>(Treatment::Dialysis)) ? 1 : kMaxLevel;
    if (a.levels[i] < 0 || a.levels[i] > max) {
      throw ContractError(std::string("level out of range on axis ") + treatment_name(static_cast<Treatment>(i)));
    }
  }
  if (!satisfies_renal_exclusivity(a)) throw ConstraintError("renal exclusivity violated: diuretic and dialysis both active");
}

PairOption pair_option(const PairChoice& c) {
  if (c.first > 0 && c.second > 0) return PairOption::Mix;
  if (c.first > 0) return PairOption::First;
  if (c.second > 0) return PairOption::Second;
  throw ContractError("pair option of an inactive organ choice");
}

int renal_option(const JointAction& a) {
  if (a[Treatment::Dialysis] > 0) return kRenalDialysis;
  return a[Treatment::Diuretic];
}

void set_renal_option(JointAction& a, int option) {
  if (option < 0 || option >= kRenalOptionCount) throw ContractError("renal option out of range");
  a[Treatment::Diuretic] = option == kRenalDialysis ? 0 : option;
  a[Treatment::Dialysis] = option == kRenalDialysis ? 1 : 0;
}

PairChoice neu_choice(const JointAction& a) { return {a[Treatment::S1], a[Treatment::S2]}; }
PairChoice car_choice(const JointAction& a) { return {a[Treatment::IV], a[Treatment::Vaso]}; }

HierarchyPath decompose(const JointAction& a) {
  validate(a);
  HierarchyPath p;
  p.neu = neu_choice(a);
  p.car = car_choice(a);
  p.renal = renal_option(a);
  const int active = a.active_organ_count();
  if (active == 0) {
    p.root = RootOption::None;
  } else if (active >= 2) {
    p.root = RootOption::OMix;
  } else if (a.organ_active(Organ::Neu)) {
    p.root = RootOption::Neu;
  } else if (a.organ_active(Organ::Car)) {
    p.root = RootOption::Car;
  } else {
    p.root = RootOption::Ren;
  }
  return p;
}

void check_well_formed(const HierarchyPath& p) {
  const auto in_range = [](const PairChoice& c) {
    return c.first >= 0 && c.first <= kMaxLevel && c.second >= 0 && c.second <= kMaxLevel;
  };
  if (!in_range(p.neu) || !in_range(p.car) || p.renal < 0 || p.renal >= kRenalOptionCount) {
    throw ContractError("hierarchy path level out of range");
  }
  const bool neu = p.neu.active();
  const bool car = p.car.active();
  const bool ren = p.renal != 0;
  const int active = int(neu) + int(car) + int(ren);
  bool ok = false;
  switch (p.root) {
    case RootOption::None: ok = active == 0; break;
    case RootOption::Neu: ok = neu && active == 1; break;
    case RootOption::Car: ok = car && active == 1; break;
    case RootOption::Ren: ok = ren && active == 1; break;
    case RootOption::OMix: ok = active >= 2; break;
  }
  if (!ok) throw ContractError(std::string("malformed hierarchy path for root option ") + root_option_name(p.root));
}

JointAction compose(const HierarchyPath& p) {
  check_well_formed(p);
  JointAction a;
  a[Treatment::S1] = p.neu.first;
  a[Treatment::S2] = p.neu.second;
  a[Treatment::IV] = p.car.first;
  a[Treatment::Vaso] = p.car.second;
  set_renal_option(a, p.renal);
  return a;
}

std::size_t flat_index(const JointAction& a) {
  validate(a);
  std::size_t idx = 0;
  for (std::size_t i = 0; i < 4; ++i) idx = idx * 5 + static_cast<std::size_t>(a.levels[i]);
  return idx * kRenalOptionCount + static_cast<std::size_t>(renal_option(a));
}

JointAction from_flat_index(std::size_t index) {
  if (index >= kJointActionCount) throw ContractError("flat action index out of range");
  JointAction a;
  set_renal_option(a, static_cast<int>(index % kRenalOptionCount));
  index /= kRenalOptionCount;
  for (std::size_t i = 4; i-- > 0;) {
    a.levels[i] = static_cast<int>(index % 5);
    index /= 5;
  }
  return a;
}

SpaceSummary enumerate_space(bool renal_exclusivity) {
  SpaceSummary s;
  if (renal_exclusivity) {
    for (std::size_t i = 0; i < kJointActionCount; ++i) s.actions.push_back(from_flat_index(i));
  } else {
    JointAction a;
    for (int s1 = 0; s1 < 5; ++s1)
      for (int s2 = 0; s2 < 5; ++s2)
        for (int iv = 0; iv < 5; ++iv)
          for (int va = 0; va < 5; ++va)
            for (int di = 0; di < 5; ++di)
              for (int dl = 0; dl < 2; ++dl) {
                a.levels = {s1, s2, iv, va, di, dl};
                s.actions.push_back(a);
              }
  }
  s.joint_count = s.actions.size();
  return s;
}

std::size_t hierarchical_decision_bound(std::size_t depth, std::size_t branching, std::size_t options) {
  return depth * branching * options;
}

std::string to_string(const JointAction& a) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < kTreatmentCount; ++i) {
    if (i) os << ",";
    os << treatment_name(static_cast<Treatment>(i)) << "=" << a.levels[i];
  }
  os << ")";
  return os.str();
}

}  // namespace hmarl
