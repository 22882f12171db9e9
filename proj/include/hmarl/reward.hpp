#pragma once

namespace hmarl {

enum class Outcome { none, survived, deceased };

struct ClinicalMarkers {
  int sofa = 0;
  double lactate = 0.0;  // mmol/L
  bool terminal = false;
  Outcome outcome = Outcome::none;
};

struct RewardConstants {
  double stagnation = -0.025;  // C0
  double sofa_delta = -0.125;  // C1
  double lactate_delta = -2.0;  // C2
};

inline constexpr double kDefaultTerminalReward = 10.0;

/// Terminal +-R on discharge/death, otherwise the SOFA/lactate shaping term.
double reward(const ClinicalMarkers& prev, const ClinicalMarkers& next, double terminal_reward = kDefaultTerminalReward,
              const RewardConstants& c = {});

/// Shaping term alone, for non-terminal transitions.
double intermediate_reward(int sofa_prev, double lactate_prev, int sofa_next, double lactate_next,
                           const RewardConstants& c = {});

}  // namespace hmarl
