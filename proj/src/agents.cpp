#include "hmarl/agents.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace hmarl {

namespace {

constexpr std::array<const char*, kAgentCount> kAgentNames{
    "Rt",     "Neu",     "Car",    "Ren",  "Neu.S1",   "Neu.S2",   "Neu.Mix",
    "Car.IV", "Car.Vaso", "Car.Mix", "OMix", "OMix.Neu", "OMix.Car", "OMix.Ren"};

std::vector<std::string> level_labels(const char* prefix) {
  std::vector<std::string> out;
  for (int l = 1; l <= kMaxLevel; ++l) out.push_back(std::string(prefix) + "=" + std::to_string(l));
  return out;
}

std::vector<std::string> mix_labels(const char* a, const char* b) {
  std::vector<std::string> out;
  for (int i = 1; i <= kMaxLevel; ++i)
    for (int j = 1; j <= kMaxLevel; ++j)
      out.push_back(std::string(a) + "=" + std::to_string(i) + "," + b + "=" + std::to_string(j));
  return out;
}

std::vector<std::string> pair_labels(const char* a, const char* b) {
  std::vector<std::string> out;
  for (int i = 0; i <= kMaxLevel; ++i)
    for (int j = 0; j <= kMaxLevel; ++j)
      out.push_back(std::string(a) + "=" + std::to_string(i) + "," + b + "=" + std::to_string(j));
  return out;
}

std::vector<std::string> renal_labels(bool with_none) {
  std::vector<std::string> out;
  if (with_none) out.push_back("none");
  for (int l = 1; l <= kMaxLevel; ++l) out.push_back("diuretic=" + std::to_string(l));
  out.push_back("dialysis");
  return out;
}

constexpr std::size_t kLevelEnc = kMaxLevel + 1;
constexpr std::size_t kPairEnc = 2 * kLevelEnc;
constexpr std::size_t kRenalEnc = kRenalOptionCount;

}  // namespace

const char* agent_name(AgentId id) { return kAgentNames[static_cast<std::size_t>(id)]; }

AgentId agent_from_name(const std::string& name) {
  for (std::size_t i = 0; i < kAgentCount; ++i)
    if (name == kAgentNames[i]) return static_cast<AgentId>(i);
  throw ContractError("unknown agent id: " + name);
}

std::array<AgentId, kAgentCount> all_agents() {
  std::array<AgentId, kAgentCount> out{};
  for (std::size_t i = 0; i < kAgentCount; ++i) out[i] = static_cast<AgentId>(i);
  return out;
}

bool uses_omix_state(AgentId id) {
  return id == AgentId::OMix || id == AgentId::OMixNeu || id == AgentId::OMixCar || id == AgentId::OMixRen;
}

Level agent_level(AgentId id) {
  switch (id) {
    case AgentId::Rt: return Level::Rt;
    case AgentId::Neu:
    case AgentId::NeuS1:
    case AgentId::NeuS2:
    case AgentId::NeuMix:
    case AgentId::OMixNeu: return Level::Neu;
    case AgentId::Car:
    case AgentId::CarIV:
    case AgentId::CarVaso:
    case AgentId::CarMix:
    case AgentId::OMixCar: return Level::Car;
    case AgentId::Ren:
    case AgentId::OMixRen: return Level::Ren;
    case AgentId::OMix: return Level::Rt;
  }
  return Level::Rt;
}

std::vector<std::string> agent_options(AgentId id) {
  switch (id) {
    case AgentId::Rt: return {"none", "Neu", "Car", "Ren", "OMix"};
    case AgentId::Neu: return {"S1", "S2", "Mix"};
    case AgentId::Car: return {"IV", "Vaso", "Mix"};
    case AgentId::Ren: return renal_labels(false);
    case AgentId::NeuS1: return level_labels("S1");
    case AgentId::NeuS2: return level_labels("S2");
    case AgentId::CarIV: return level_labels("IV");
    case AgentId::CarVaso: return level_labels("Vaso");
    case AgentId::NeuMix: return mix_labels("S1", "S2");
    case AgentId::CarMix: return mix_labels("IV", "Vaso");
    case AgentId::OMix: return {};
    case AgentId::OMixNeu: return pair_labels("S1", "S2");
    case AgentId::OMixCar: return pair_labels("IV", "Vaso");
    case AgentId::OMixRen: return renal_labels(true);
  }
  return {};
}

std::size_t option_count(AgentId id) { return agent_options(id).size(); }

std::size_t communication_width(AgentId id) {
  switch (id) {
    case AgentId::NeuMix:
    case AgentId::CarMix: return 2 * kLevelEnc;
    case AgentId::OMixNeu:
    case AgentId::OMixCar: return kPairEnc + kRenalEnc;
    case AgentId::OMixRen: return 2 * kPairEnc;
    default: return 0;
  }
}

std::size_t agent_input_width(AgentId id, const StateWidths& w) {
  return (uses_omix_state(id) ? w.omix : w.organ) + communication_width(id);
}

std::vector<LayerShape> q_network_shapes(std::size_t in, std::size_t out, const NetworkConfig& cfg) {
  std::vector<LayerShape> shapes;
  std::size_t prev = in;
  for (std::size_t h : cfg.hidden) {
    shapes.push_back({prev, h, cfg.activation});
    prev = h;
  }
  shapes.push_back({prev, out, Activation::identity});
  return shapes;
}

QAgent make_agent(AgentId id, const StateWidths& widths, const NetworkConfig& cfg, std::uint64_t seed) {
  if (id == AgentId::OMix) throw ContractError("OMix is represented by its mixing network");
  QAgent a;
  a.id = id;
  a.base_width = uses_omix_state(id) ? widths.omix : widths.organ;
  a.comm_width = communication_width(id);
  a.options = agent_options(id);
  const auto shapes = q_network_shapes(a.input_width(), a.options.size(), cfg);
  a.online = Approximator(shapes, seed);
  a.target = a.online;
  return a;
}

Vector q_values(const QAgent& agent, std::span<const double> state) {
  if (state.size() != agent.input_width()) {
    throw DimensionError(std::string(agent_name(agent.id)) + " expects a state of width " +
                         std::to_string(agent.input_width()) + ", got " + std::to_string(state.size()));
  }
  return forward(agent.online, state);
}

std::size_t argmax_valid(std::span<const double> q, std::span<const std::uint8_t> valid) {
  if (!valid.empty() && valid.size() != q.size()) throw DimensionError("mask width mismatch");
  std::size_t best = q.size();
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (!valid.empty() && !valid[i]) continue;
    if (best == q.size() || q[i] > q[best]) best = i;
  }
  if (best == q.size()) throw ContractError("every option is masked");
  return best;
}

std::size_t select_option(std::span<const double> q, std::span<const std::uint8_t> valid, double epsilon,
                          std::mt19937_64& rng) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ContractError("epsilon must lie in [0, 1]");
  const std::size_t greedy = argmax_valid(q, valid);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  if (epsilon == 0.0 || u01(rng) >= epsilon) return greedy;
  std::vector<std::size_t> allowed;
  for (std::size_t i = 0; i < q.size(); ++i)
    if (valid.empty() || valid[i]) allowed.push_back(i);
  std::uniform_int_distribution<std::size_t> pick(0, allowed.size() - 1);
  return allowed[pick(rng)];
}

double root_q_target(RootOption option, double r, const RootTargetInputs& in) {
  const auto max_of = [](const std::optional<Vector>& q, const char* who) {
    if (!q || q->empty()) throw ContractError(std::string("root target needs the ") + who + " agent");
    return *std::max_element(q->begin(), q->end());
  };
  switch (option) {
    case RootOption::None: return r;
    case RootOption::Neu: return max_of(in.q_neu, "Neu");
    case RootOption::Car: return max_of(in.q_car, "Car");
    case RootOption::Ren: return max_of(in.q_ren, "Ren");
    case RootOption::OMix:
      if (!in.q_omix) throw ContractError("root target needs the OMix agent");
      return *in.q_omix;
  }
  throw ContractError("unknown root option");
}

double td_update(QAgent& agent, const Transition& t, double alpha, double gamma) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ContractError("alpha must lie in (0, 1]");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ContractError("gamma must lie in (0, 1]");
  if (t.action >= agent.options.size()) throw ContractError("action outside the agent's options");
  double y = t.r;
  if (!t.terminal) {
    if (t.s_next.size() != agent.input_width()) throw DimensionError("next-state width mismatch");
    const Vector qn = forward(agent.target, t.s_next);
    y += gamma * *std::max_element(qn.begin(), qn.end());
  }
  if (!std::isfinite(y)) throw NumericError(std::string("non-finite TD target for ") + agent_name(agent.id));
  if (t.s.size() != agent.input_width()) throw DimensionError("state width mismatch");
  GradientTape tape(agent.online);
  const Vector q = forward(agent.online, t.s, tape);
  const double delta = y - q[t.action];
  Vector seed(q.size(), 0.0);
  seed[t.action] = 1.0;
  backward(agent.online, tape, seed);  // dQ(s,a)/dtheta
  const double norm2 = tape.grads.squared_norm();
  if (norm2 > 0.0 && delta != 0.0) {
    Gradients loss_grad = tape.grads;  // d(0.5 * delta^2)/dtheta = -delta * dQ/dtheta
    loss_grad.scale(-delta);
    sgd_step(agent.online, loss_grad, alpha / norm2);
  }
  return delta;
}

// Communication -------------------------------------------------------------------

void append_level(Vector& out, int level) {
  if (level < 0 || level > kMaxLevel) throw ContractError("dosage level out of range");
  for (int l = 0; l <= kMaxLevel; ++l) out.push_back(l == level ? 1.0 : 0.0);
}

void append_pair(Vector& out, const PairChoice& c) {
  append_level(out, c.first);
  append_level(out, c.second);
}

void append_renal(Vector& out, int renal_option) {
  if (renal_option < 0 || renal_option >= kRenalOptionCount) throw ContractError("renal option out of range");
  for (int o = 0; o < kRenalOptionCount; ++o) out.push_back(o == renal_option ? 1.0 : 0.0);
}

Vector build_communicated_state(AgentId id, std::span<const double> base, const PeerOutputs& peers, bool zeroed) {
  Vector out(base.begin(), base.end());
  const std::size_t width = communication_width(id);
  if (zeroed) {
    out.resize(out.size() + width, 0.0);
    return out;
  }
  const auto need = [&](bool present, const char* what) {
    if (!present) throw ContractError(std::string(agent_name(id)) + " is missing the " + what + " peer output");
  };
  switch (id) {
    case AgentId::NeuMix:
    case AgentId::CarMix:
      need(peers.first_leaf.has_value(), "first-treatment");
      need(peers.second_leaf.has_value(), "second-treatment");
      append_level(out, *peers.first_leaf);
      append_level(out, *peers.second_leaf);
      break;
    case AgentId::OMixNeu:
      need(peers.car.has_value(), "Car");
      need(peers.renal.has_value(), "Ren");
      append_pair(out, *peers.car);
      append_renal(out, *peers.renal);
      break;
    case AgentId::OMixCar:
      need(peers.neu.has_value(), "Neu");
      need(peers.renal.has_value(), "Ren");
      append_pair(out, *peers.neu);
      append_renal(out, *peers.renal);
      break;
    case AgentId::OMixRen:
      need(peers.neu.has_value(), "Neu");
      need(peers.car.has_value(), "Car");
      append_pair(out, *peers.neu);
      append_pair(out, *peers.car);
      break;
    default: break;
  }
  return out;
}

// QMix -------------------------------------------------------------------------------

MixingNetwork MixingNetwork::make(std::size_t agents, std::size_t state_width, std::size_t hidden,
                                  std::uint64_t seed) {
  if (agents == 0 || state_width == 0) throw DimensionError("mixer needs agents and a state");
  MixingNetwork m;
  m.agents = agents;
  m.state_width = state_width;
  std::vector<LayerShape> ws, bs;
  if (hidden > 0) {
    ws = {{state_width, hidden, Activation::relu}, {hidden, agents, Activation::abs}};
    bs = {{state_width, hidden, Activation::relu}, {hidden, 1, Activation::identity}};
  } else {
    ws = {{state_width, agents, Activation::abs}};
    bs = {{state_width, 1, Activation::identity}};
  }
  m.hyper_w = Approximator(ws, seed);
  m.hyper_b = Approximator(bs, seed ^ 0x9e3779b97f4a7c15ull);
  // Start near an unweighted sum of the sub-agent values.
  for (auto& b : m.hyper_w.mutable_layers().back().bias) b = 1.0;
  return m;
}

Vector MixingNetwork::weights(std::span<const double> state) const { return forward(hyper_w, state); }

double MixingNetwork::bias(std::span<const double> state) const { return forward(hyper_b, state)[0]; }

std::uint64_t MixingNetwork::parameter_hash() const {
  return hyper_w.parameter_hash() ^ (hyper_b.parameter_hash() * 0x100000001b3ull);
}

double qmix_forward(const MixingNetwork& mixer, std::span<const double> sub_qs, std::span<const double> state) {
  if (sub_qs.size() != mixer.agents) throw DimensionError("mixer expects one value per agent");
  const Vector w = mixer.weights(state);
  double q = mixer.bias(state);
  for (std::size_t i = 0; i < w.size(); ++i) q += w[i] * sub_qs[i];
  return q;
}

double qmix_forward(const MixingNetwork& mixer, std::span<const double> sub_qs, std::span<const double> state,
                    MixerTape& tape) {
  if (sub_qs.size() != mixer.agents) throw DimensionError("mixer expects one value per agent");
  tape.weights = forward(mixer.hyper_w, state, tape.w);
  const double b = forward(mixer.hyper_b, state, tape.b)[0];
  tape.sub_qs.assign(sub_qs.begin(), sub_qs.end());
  double q = b;
  for (std::size_t i = 0; i < tape.weights.size(); ++i) q += tape.weights[i] * sub_qs[i];
  return q;
}

MixerInputGrads qmix_backward(const MixingNetwork& mixer, MixerTape& tape, double grad_out) {
  MixerInputGrads g;
  g.sub_qs.resize(mixer.agents);
  Vector dw(mixer.agents);
  for (std::size_t i = 0; i < mixer.agents; ++i) {
    g.sub_qs[i] = grad_out * tape.weights[i];
    dw[i] = grad_out * tape.sub_qs[i];
  }
  const Vector ds_w = backward(mixer.hyper_w, tape.w, dw);
  const Vector db{grad_out};
  const Vector ds_b = backward(mixer.hyper_b, tape.b, db);
  g.state.resize(ds_w.size());
  for (std::size_t i = 0; i < ds_w.size(); ++i) g.state[i] = ds_w[i] + ds_b[i];
  return g;
}

std::vector<std::size_t> qmix_argmax(std::span<const Vector> sub_q, std::span<const double> mixing_weights,
                                     std::size_t min_active) {
  const std::size_t n = sub_q.size();
  if (mixing_weights.size() != n) throw DimensionError("one mixing weight per agent");
  if (min_active > n) throw ContractError("cannot activate more agents than exist");
  std::vector<std::size_t> pick(n);
  std::size_t active = 0;
  for (std::size_t i = 0; i < n; ++i) {
    pick[i] = argmax_valid(sub_q[i]);
    active += pick[i] != 0;
  }
  while (active < min_active) {
    // Flip the inactive agent whose best active option loses the least mixed value.
    std::size_t flip = n, flip_to = 0;
    double best_loss = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (pick[i] != 0 || sub_q[i].size() < 2) continue;
      std::size_t alt = 1;
      for (std::size_t o = 2; o < sub_q[i].size(); ++o)
        if (sub_q[i][o] > sub_q[i][alt]) alt = o;
      const double loss = mixing_weights[i] * (sub_q[i][0] - sub_q[i][alt]);
      if (loss < best_loss) {
        best_loss = loss;
        flip = i;
        flip_to = alt;
      }
    }
    if (flip == n) throw ContractError("no agent can be activated");
    pick[flip] = flip_to;
    ++active;
  }
  return pick;
}

std::vector<std::size_t> qmix_exhaustive_argmax(std::span<const Vector> sub_q, const MixingNetwork& mixer,
                                                std::span<const double> state, std::size_t min_active) {
  const std::size_t n = sub_q.size();
  std::vector<std::size_t> cur(n, 0), best;
  double best_q = -std::numeric_limits<double>::infinity();
  Vector qs(n);
  while (true) {
    std::size_t active = 0;
    for (std::size_t i = 0; i < n; ++i) {
      qs[i] = sub_q[i][cur[i]];
      active += cur[i] != 0;
    }
    if (active >= min_active) {
      const double q = qmix_forward(mixer, qs, state);
      if (q > best_q) {
        best_q = q;
        best = cur;
      }
    }
    std::size_t i = n;
    while (i > 0) {
      --i;
      if (++cur[i] < sub_q[i].size()) break;
      cur[i] = 0;
      if (i == 0) return best;
    }
    if (n == 0) return best;
  }
}

}  // namespace hmarl
