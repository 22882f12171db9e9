#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hmarl/actions.hpp"
#include "hmarl/numerics.hpp"
#include "hmarl/state_repr.hpp"

namespace hmarl {

enum class AgentId : std::uint8_t {
  Rt,
  Neu,
  Car,
  Ren,
  NeuS1,
  NeuS2,
  NeuMix,
  CarIV,
  CarVaso,
  CarMix,
  OMix,
  OMixNeu,
  OMixCar,
  OMixRen
};
inline constexpr std::size_t kAgentCount = 14;

const char* agent_name(AgentId id);
AgentId agent_from_name(const std::string& name);
std::array<AgentId, kAgentCount> all_agents();

/// State family an agent reads: Rt/Neu/Car/Ren use s^Rt or the organ state, OMix* use s^OMix.
bool uses_omix_state(AgentId id);
Level agent_level(AgentId id);

/// Option labels in output order. OMix itself has none (its value comes from the mixer).
std::vector<std::string> agent_options(AgentId id);
std::size_t option_count(AgentId id);

/// One-hot widths of the communicated peer outputs appended to the base state.
std::size_t communication_width(AgentId id);
std::size_t agent_input_width(AgentId id, const StateWidths& w);

struct NetworkConfig {
  std::vector<std::size_t> hidden{64};
  Activation activation = Activation::relu;
};

/// Online and target Q-networks of one agent.
struct QAgent {
  AgentId id = AgentId::Rt;
  std::size_t base_width = 0;
  std::size_t comm_width = 0;
  std::vector<std::string> options;
  Approximator online;
  Approximator target;

  std::size_t input_width() const { return base_width + comm_width; }
  void sync_target() { soft_copy(online, target); }
};

std::vector<LayerShape> q_network_shapes(std::size_t in, std::size_t out, const NetworkConfig& cfg);
QAgent make_agent(AgentId id, const StateWidths& widths, const NetworkConfig& cfg, std::uint64_t seed);

/// Online Q vector. Throws DimensionError on a width mismatch.
Vector q_values(const QAgent& agent, std::span<const double> state);

/// Greedy over valid entries, ties to the lowest index. Empty `valid` means all valid.
std::size_t argmax_valid(std::span<const double> q, std::span<const std::uint8_t> valid = {});

/// epsilon-greedy; exploration is uniform over valid options. Throws ContractError if none is valid.
std::size_t select_option(std::span<const double> q, std::span<const std::uint8_t> valid, double epsilon,
                          std::mt19937_64& rng);

/// Contributions of the frozen lower agents at the current state.
struct RootTargetInputs {
  std::optional<Vector> q_neu;
  std::optional<Vector> q_car;
  std::optional<Vector> q_ren;
  std::optional<double> q_omix;  // mixed Q at the (masked) factored argmax
};

/// r for no-action, otherwise the max over the controlling agent's options.
double root_q_target(RootOption option, double r, const RootTargetInputs& in);

struct Transition {
  Vector s;
  std::size_t action = 0;
  double r = 0.0;
  Vector s_next;
  bool terminal = false;
};

/// y = r (terminal) or r + gamma * max_a' Q_target(s', a'). Moves Q(s, a) by alpha * (y - Q(s, a))
/// to first order (normalized gradient step), exactly so for networks linear in their parameters.
/// Returns the TD error before the update.
double td_update(QAgent& agent, const Transition& t, double alpha, double gamma);

// Communication -----------------------------------------------------------------

/// One-hot over levels 0..4.
void append_level(Vector& out, int level);
void append_pair(Vector& out, const PairChoice& c);
void append_renal(Vector& out, int renal_option);

struct PeerOutputs {
  std::optional<PairChoice> neu;
  std::optional<PairChoice> car;
  std::optional<int> renal;
  std::optional<int> first_leaf;   // intra-organ: greedy level of the first treatment leaf
  std::optional<int> second_leaf;  // intra-organ: greedy level of the second treatment leaf
};

/// Base state followed by the peer encodings the agent expects. With `zeroed` the encodings are
/// all-zero vectors of the same width. Throws ContractError if a required peer is missing.
Vector build_communicated_state(AgentId id, std::span<const double> base, const PeerOutputs& peers,
                                bool zeroed = false);

// QMix ---------------------------------------------------------------------------

/// Q_tot = sum_i |w_i(s)| q_i + b(s). Both hypernetworks read s^OMix.
struct MixingNetwork {
  std::size_t agents = 0;
  std::size_t state_width = 0;
  Approximator hyper_w;  // state -> agents, abs output
  Approximator hyper_b;  // state -> 1

  static MixingNetwork make(std::size_t agents, std::size_t state_width, std::size_t hidden, std::uint64_t seed);
  Vector weights(std::span<const double> state) const;
  double bias(std::span<const double> state) const;
  std::uint64_t parameter_hash() const;
};

double qmix_forward(const MixingNetwork& mixer, std::span<const double> sub_qs, std::span<const double> state);

struct MixerTape {
  GradientTape w;
  GradientTape b;
  Vector weights;
  Vector sub_qs;
  explicit MixerTape(const MixingNetwork& m) : w(m.hyper_w), b(m.hyper_b) {}
};

double qmix_forward(const MixingNetwork& mixer, std::span<const double> sub_qs, std::span<const double> state,
                    MixerTape& tape);

struct MixerInputGrads {
  Vector sub_qs;
  Vector state;
};

/// Accumulates parameter gradients into the tape and returns input gradients for dL/dQ_tot.
MixerInputGrads qmix_backward(const MixingNetwork& mixer, MixerTape& tape, double grad_out);

/// Per-agent argmaxes; option 0 of every agent means "inactive". If fewer than `min_active`
/// agents are active, the cheapest single flips (by mixed-Q loss) are applied until satisfied.
std::vector<std::size_t> qmix_argmax(std::span<const Vector> sub_q, std::span<const double> mixing_weights,
                                     std::size_t min_active = 0);

/// Exhaustive argmax of qmix_forward over all tuples (ties to the lexicographically first).
std::vector<std::size_t> qmix_exhaustive_argmax(std::span<const Vector> sub_q, const MixingNetwork& mixer,
                                                std::span<const double> state, std::size_t min_active = 0);

}  // namespace hmarl
