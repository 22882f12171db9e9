#include "hmarl/reward.hpp"

#include <cmath>

#include "hmarl/numerics.hpp"

namespace hmarl {

double intermediate_reward(int sofa_prev, double lactate_prev, int sofa_next, double lactate_next,
                           const RewardConstants& c) {
  const double stagnant = (sofa_next == sofa_prev && sofa_next > 0) ? 1.0 : 0.0;
  return c.stagnation * stagnant + c.sofa_delta * static_cast<double>(sofa_next - sofa_prev) +
         c.lactate_delta * std::tanh(lactate_next - lactate_prev);
}

double reward(const ClinicalMarkers& prev, const ClinicalMarkers& next, double terminal_reward,
              const RewardConstants& c) {
  if (!(terminal_reward > 0.0)) throw ContractError("terminal reward magnitude must be positive");
  if (!next.terminal && next.outcome != Outcome::none) {
    throw ContractError("non-terminal markers carry an outcome");
  }
  if (next.terminal) {
    if (next.outcome == Outcome::survived) return terminal_reward;
    if (next.outcome == Outcome::deceased) return -terminal_reward;
    throw ContractError("terminal markers without an outcome");
  }
  return intermediate_reward(prev.sofa, prev.lactate, next.sofa, next.lactate, c);
}

}  // namespace hmarl
