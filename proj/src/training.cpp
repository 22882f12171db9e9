#include "hmarl/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

namespace hmarl {

namespace {

using nlohmann::json;

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::size_t slot(AgentId id) { return static_cast<std::size_t>(id); }

std::uint64_t mix_hash(std::uint64_t h, std::uint64_t v) {
  const auto* p = reinterpret_cast<const std::byte*>(&v);
  return fnv1a(std::span<const std::byte>(p, sizeof v), h);
}

double masked_max(std::span<const double> q, std::span<const std::uint8_t> valid) {
  return q[argmax_valid(q, valid)];
}

struct PairAgents {
  AgentId master, first, second, mix;
};

PairAgents pair_agents(Organ o) {
  if (o == Organ::Neu) return {AgentId::Neu, AgentId::NeuS1, AgentId::NeuS2, AgentId::NeuMix};
  if (o == Organ::Car) return {AgentId::Car, AgentId::CarIV, AgentId::CarVaso, AgentId::CarMix};
  throw ContractError("renal organ has no paired treatments");
}

}  // namespace

// Config ------------------------------------------------------------------------

std::string train_config_to_json(const TrainConfig& c) {
  json j;
  j["optimizer"] = to_string(c.optimizer);
  j["lr"] = c.lr;
  j["embedding_lr"] = c.embedding_lr;
  j["momentum"] = c.momentum;
  j["max_grad_norm"] = c.max_grad_norm;
  j["gamma"] = c.gamma;
  j["batch"] = c.batch;
  j["epochs"] = c.epochs;
  j["phase2_epochs"] = c.phase2_epochs;
  j["target_sync"] = c.target_sync;
  j["seed"] = c.seed;
  j["hidden"] = c.net.hidden;
  j["activation"] = to_string(c.net.activation);
  j["mixer_hidden"] = c.mixer_hidden;
  j["k"] = c.k;
  j["terminal_reward"] = c.terminal_reward;
  j["no_communication"] = c.no_communication;
  j["no_state_repr"] = c.no_state_repr;
  j["min_agent_samples"] = c.min_agent_samples;
  j["min_option_samples"] = c.min_option_samples;
  j["divergence_limit"] = c.divergence_limit;
  return j.dump(2);
}

TrainConfig train_config_from_json(const std::string& text) {
  const TrainConfig d;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ContractError(std::string("training config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ContractError("training config must be a JSON object");
  const auto known = json::parse(train_config_to_json(d));
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ContractError("unknown training config key: " + key);
  }
  TrainConfig c;
  try {
    c.optimizer = optimizer_from_string(j.value("optimizer", to_string(d.optimizer)));
    c.lr = j.value("lr", d.lr);
    c.embedding_lr = j.value("embedding_lr", d.embedding_lr);
    c.momentum = j.value("momentum", d.momentum);
    c.max_grad_norm = j.value("max_grad_norm", d.max_grad_norm);
    c.gamma = j.value("gamma", d.gamma);
    c.batch = j.value("batch", d.batch);
    c.epochs = j.value("epochs", d.epochs);
    c.phase2_epochs = j.value("phase2_epochs", d.phase2_epochs);
    c.target_sync = j.value("target_sync", d.target_sync);
    c.seed = j.value("seed", d.seed);
    c.net.hidden = j.value("hidden", d.net.hidden);
    c.net.activation = activation_from_string(j.value("activation", to_string(d.net.activation)));
    c.mixer_hidden = j.value("mixer_hidden", d.mixer_hidden);
    c.k = j.value("k", d.k);
    c.terminal_reward = j.value("terminal_reward", d.terminal_reward);
    c.no_communication = j.value("no_communication", d.no_communication);
    c.no_state_repr = j.value("no_state_repr", d.no_state_repr);
    c.min_agent_samples = j.value("min_agent_samples", d.min_agent_samples);
    c.min_option_samples = j.value("min_option_samples", d.min_option_samples);
    c.divergence_limit = j.value("divergence_limit", d.divergence_limit);
  } catch (const json::exception& e) {
    throw ContractError(std::string("bad training config value: ") + e.what());
  }
  if (!(c.lr > 0.0) || !(c.embedding_lr >= 0.0) || c.batch == 0 || c.target_sync == 0 || c.k == 0) {
    throw ContractError("training config needs lr > 0, batch > 0, target_sync > 0 and k > 0");
  }
  if (!(c.gamma >= 0.0 && c.gamma <= 1.0)) throw ContractError("gamma must lie in [0, 1]");
  return c;
}

OptimizerConfig network_optimizer(const TrainConfig& c) {
  OptimizerConfig o;
  o.kind = c.optimizer;
  o.lr = c.lr;
  o.momentum = c.momentum;
  o.max_grad_norm = c.max_grad_norm;
  return o;
}

std::uint64_t config_hash(const TrainConfig& c) {
  const std::string s = json::parse(train_config_to_json(c)).dump();
  return fnv1a(std::as_bytes(std::span<const char>(s.data(), s.size())));
}

DivergenceError::DivergenceError(AgentId id, double loss)
    : NumericError(std::string(agent_name(id)) + " diverged: mean loss " + std::to_string(loss)), agent(id) {}

// Data --------------------------------------------------------------------------

XWindow window_at(const Episode& e, std::size_t step) {
  if (step >= e.frames.size()) throw ContractError("window step beyond the episode");
  XWindow w{};
  for (std::size_t m = 0; m <= kContextSteps && m <= step; ++m) w[m] = &e.frames[step - m].x;
  return w;
}

double transition_reward(const Episode& e, std::size_t step, const FeatureSchema& schema, double terminal_reward) {
  const auto& f = e.frames.at(step);
  if (f.terminal) {
    if (f.outcome == Outcome::none) throw DataError("terminal frame without an outcome");
    return f.outcome == Outcome::survived ? terminal_reward : -terminal_reward;
  }
  if (step + 1 >= e.frames.size()) throw DataError("non-terminal frame at the end of episode " + e.patient_id);
  const std::size_t sofa = schema.index_of("sofa");
  const std::size_t lac = schema.index_of("lactate");
  const auto& g = e.frames[step + 1];
  return intermediate_reward(static_cast<int>(std::lround(f.raw[sofa])), f.raw[lac],
                             static_cast<int>(std::lround(g.raw[sofa])), g.raw[lac]);
}

TrainingData make_training_data(const EpisodeStore& store, double terminal_reward) {
  TrainingData data;
  data.store = &store;
  for (std::size_t ei = 0; ei < store.episodes.size(); ++ei) {
    const auto& e = store.episodes[ei];
    for (std::size_t t = 0; t < e.frames.size(); ++t) {
      const auto& f = e.frames[t];
      TransitionRecord r;
      r.episode = ei;
      r.step = t;
      r.w = window_at(e, t);
      r.terminal = f.terminal;
      if (!f.terminal) r.w_next = window_at(e, t + 1);
      r.action = f.action;
      r.path = decompose(f.action);
      r.reward = transition_reward(e, t, store.schema, terminal_reward);
      r.behavior_prob = f.behavior_prob;
      data.records.push_back(r);
    }
  }
  return data;
}

std::optional<std::size_t> logged_option(AgentId id, const HierarchyPath& p) {
  const auto leaf = [](int level) -> std::optional<std::size_t> { return static_cast<std::size_t>(level - 1); };
  switch (id) {
    case AgentId::Rt: return static_cast<std::size_t>(p.root);
    case AgentId::Neu:
      if (!p.neu.active()) return std::nullopt;
      return static_cast<std::size_t>(pair_option(p.neu));
    case AgentId::Car:
      if (!p.car.active()) return std::nullopt;
      return static_cast<std::size_t>(pair_option(p.car));
    case AgentId::Ren:
      if (p.renal == 0) return std::nullopt;
      return static_cast<std::size_t>(p.renal - 1);
    case AgentId::NeuS1:
    case AgentId::CarIV: {
      const auto& c = id == AgentId::NeuS1 ? p.neu : p.car;
      if (c.first > 0 && c.second == 0) return leaf(c.first);
      return std::nullopt;
    }
    case AgentId::NeuS2:
    case AgentId::CarVaso: {
      const auto& c = id == AgentId::NeuS2 ? p.neu : p.car;
      if (c.first == 0 && c.second > 0) return leaf(c.second);
      return std::nullopt;
    }
    case AgentId::NeuMix:
    case AgentId::CarMix: {
      const auto& c = id == AgentId::NeuMix ? p.neu : p.car;
      if (c.first > 0 && c.second > 0) return static_cast<std::size_t>((c.first - 1) * 4 + (c.second - 1));
      return std::nullopt;
    }
    case AgentId::OMix:
      if (p.root != RootOption::OMix) return std::nullopt;
      return 0;
    case AgentId::OMixNeu:
      if (p.root != RootOption::OMix) return std::nullopt;
      return static_cast<std::size_t>(pair_index(p.neu));
    case AgentId::OMixCar:
      if (p.root != RootOption::OMix) return std::nullopt;
      return static_cast<std::size_t>(pair_index(p.car));
    case AgentId::OMixRen:
      if (p.root != RootOption::OMix) return std::nullopt;
      return static_cast<std::size_t>(p.renal);
  }
  return std::nullopt;
}

Routing route_samples(const TrainingData& data) {
  Routing r;
  for (std::size_t i = 0; i < data.records.size(); ++i) {
    const auto& p = data.records[i].path;
    for (AgentId id : all_agents()) {
      if (logged_option(id, p)) r.samples[slot(id)].push_back(i);
    }
  }
  return r;
}

// Agent set ---------------------------------------------------------------------

bool AgentSet::available(AgentId id) const {
  const auto& st = status[slot(id)];
  if (st.skipped) return false;
  if (id == AgentId::OMix) return !mixer.hyper_w.empty();
  return agents.count(id) > 0;
}

const QAgent& AgentSet::agent(AgentId id) const {
  auto it = agents.find(id);
  if (it == agents.end()) throw ContractError(std::string("no network for agent ") + agent_name(id));
  return it->second;
}

QAgent& AgentSet::agent(AgentId id) {
  auto it = agents.find(id);
  if (it == agents.end()) throw ContractError(std::string("no network for agent ") + agent_name(id));
  return it->second;
}

std::uint64_t AgentSet::agent_hash(AgentId id) const {
  if (id == AgentId::OMix) return mixer.parameter_hash();
  return agent(id).online.parameter_hash();
}

std::uint64_t AgentSet::hash() const {
  std::uint64_t h = 14695981039346656037ull;
  for (AgentId id : all_agents()) {
    h = mix_hash(h, agent_hash(id));
    const auto& v = valid[slot(id)];
    h = fnv1a(std::as_bytes(std::span<const std::uint8_t>(v)), h);
  }
  for (Level l : {Level::Rt, Level::Neu, Level::Car, Level::Ren}) h = hash_doubles(embeddings.at(l).e, h);
  return h;
}

AgentSet make_agent_set(std::size_t d, const TrainConfig& cfg) {
  if (d == 0) throw DimensionError("agent set needs at least one feature");
  AgentSet set;
  set.config = cfg;
  set.d = d;
  set.embeddings.rt = random_embedding(Level::Rt, d, cfg.k, cfg.seed);
  set.embeddings.neu = copy_as(set.embeddings.rt, Level::Neu);
  set.embeddings.car = copy_as(set.embeddings.rt, Level::Car);
  set.embeddings.ren = copy_as(set.embeddings.rt, Level::Ren);
  const StateWidths widths = set.widths();
  for (AgentId id : all_agents()) {
    const std::uint64_t seed = cfg.seed * 1000003ull + 17ull * (slot(id) + 1);
    if (id == AgentId::OMix) {
      set.mixer = MixingNetwork::make(kOrganCount, widths.omix, cfg.mixer_hidden, seed);
      set.mixer_target = set.mixer;
      set.valid[slot(id)] = {1};
      continue;
    }
    set.agents.emplace(id, make_agent(id, widths, cfg.net, seed));
    set.valid[slot(id)].assign(option_count(id), 1);
  }
  return set;
}

StateBundle bundle_for(const AgentSet& set, const XWindow& w) {
  return build_state_bundle(w, set.embeddings, set.config.no_state_repr);
}

// Inference ---------------------------------------------------------------------

namespace {

struct Tracer {
  std::size_t* evaluations = nullptr;
  std::vector<NodeTrace>* trace = nullptr;

  Vector eval(const AgentSet& set, AgentId id, std::span<const double> input) const {
    if (evaluations) ++*evaluations;
    return q_values(set.agent(id), input);
  }
  std::size_t choose(const AgentSet& set, AgentId id, const Vector& q) const {
    const std::size_t c = argmax_valid(q, set.mask(id));
    if (trace) {
      const auto m = set.mask(id);
      trace->push_back({id, q, std::vector<std::uint8_t>(m.begin(), m.end()), c});
    }
    return c;
  }
};

int greedy_leaf(const AgentSet& set, AgentId id, const Vector& s, const Tracer& tr) {
  if (!set.available(id)) return 0;
  const Vector q = tr.eval(set, id, s);
  return static_cast<int>(tr.choose(set, id, q)) + 1;
}

PairChoice greedy_pair_impl(const AgentSet& set, Organ organ, const Vector& s, const Tracer& tr) {
  const PairAgents ids = pair_agents(organ);
  if (!set.available(ids.master)) return {};
  const Vector q = tr.eval(set, ids.master, s);
  switch (static_cast<PairOption>(tr.choose(set, ids.master, q))) {
    case PairOption::First: return {greedy_leaf(set, ids.first, s, tr), 0};
    case PairOption::Second: return {0, greedy_leaf(set, ids.second, s, tr)};
    case PairOption::Mix: {
      PeerOutputs peers;
      if (!set.config.no_communication) {
        const Tracer counted{tr.evaluations, nullptr};
        peers.first_leaf = greedy_leaf(set, ids.first, s, counted);
        peers.second_leaf = greedy_leaf(set, ids.second, s, counted);
      }
      const Vector in = build_communicated_state(ids.mix, s, peers, set.config.no_communication);
      const std::size_t idx = tr.choose(set, ids.mix, tr.eval(set, ids.mix, in));
      return {static_cast<int>(idx / 4) + 1, static_cast<int>(idx % 4) + 1};
    }
  }
  return {};
}

int greedy_renal_impl(const AgentSet& set, const Vector& s, const Tracer& tr) {
  if (!set.available(AgentId::Ren)) return 0;
  const Vector q = tr.eval(set, AgentId::Ren, s);
  return static_cast<int>(tr.choose(set, AgentId::Ren, q)) + 1;
}

PeerOutputs peers_impl(const AgentSet& set, const StateBundle& b, std::size_t* evaluations) {
  PeerOutputs p;
  if (set.config.no_communication) return p;
  const Tracer tr{evaluations, nullptr};
  p.neu = greedy_pair_impl(set, Organ::Neu, b.neu, tr);
  p.car = greedy_pair_impl(set, Organ::Car, b.car, tr);
  p.renal = greedy_renal_impl(set, b.ren, tr);
  return p;
}

constexpr std::array<AgentId, kOrganCount> kOMixSubs{AgentId::OMixNeu, AgentId::OMixCar, AgentId::OMixRen};

/// Sub-agent inputs at one state.
std::array<Vector, kOrganCount> omix_inputs(const AgentSet& set, const Vector& omix_state, const PeerOutputs& peers) {
  std::array<Vector, kOrganCount> in;
  for (std::size_t i = 0; i < kOrganCount; ++i) {
    in[i] = build_communicated_state(kOMixSubs[i], omix_state, peers, set.config.no_communication);
  }
  return in;
}

/// Masked copies with invalid options at -inf so the factored argmax never picks them.
std::array<Vector, kOrganCount> masked_sub_q(const AgentSet& set, std::array<Vector, kOrganCount> q) {
  for (std::size_t i = 0; i < kOrganCount; ++i) {
    const auto m = set.mask(kOMixSubs[i]);
    for (std::size_t j = 1; j < q[i].size(); ++j) {
      if (!m.empty() && !m[j]) q[i][j] = kNegInf;
    }
  }
  return q;
}

struct MixedChoice {
  std::vector<std::size_t> choice;
  double q = 0.0;
};

MixedChoice mixed_greedy(const std::array<Vector, kOrganCount>& raw_q, const AgentSet& set,
                         const MixingNetwork& mixer, const Vector& omix_state) {
  const auto q = masked_sub_q(set, raw_q);
  const Vector w = mixer.weights(omix_state);
  MixedChoice out;
  out.choice = qmix_argmax(q, w, 2);
  Vector chosen(kOrganCount);
  for (std::size_t i = 0; i < kOrganCount; ++i) chosen[i] = raw_q[i][out.choice[i]];
  out.q = qmix_forward(mixer, chosen, omix_state);
  return out;
}

JointAction omix_action(const std::vector<std::size_t>& choice) {
  HierarchyPath p;
  p.root = RootOption::OMix;
  p.neu = pair_from_index(static_cast<int>(choice[0]));
  p.car = pair_from_index(static_cast<int>(choice[1]));
  p.renal = static_cast<int>(choice[2]);
  return compose(p);
}

}  // namespace

PairChoice greedy_pair(const AgentSet& set, Organ organ, const Vector& organ_state, std::size_t* evaluations) {
  return greedy_pair_impl(set, organ, organ_state, Tracer{evaluations, nullptr});
}

int greedy_renal(const AgentSet& set, const Vector& ren_state, std::size_t* evaluations) {
  return greedy_renal_impl(set, ren_state, Tracer{evaluations, nullptr});
}

PeerOutputs single_organ_peers(const AgentSet& set, const StateBundle& b, std::size_t* evaluations) {
  return peers_impl(set, b, evaluations);
}

OMixDecision omix_decide(const AgentSet& set, const StateBundle& b, const PeerOutputs& peers) {
  OMixDecision d;
  const auto in = omix_inputs(set, b.omix, peers);
  for (std::size_t i = 0; i < kOrganCount; ++i) d.sub_q[i] = q_values(set.agent(kOMixSubs[i]), in[i]);
  const MixedChoice mc = mixed_greedy(d.sub_q, set, set.mixer, b.omix);
  d.choice = mc.choice;
  d.q_mixed = mc.q;
  d.action = omix_action(d.choice);
  return d;
}

Recommendation recommend(const AgentSet& set, const StateBundle& b) {
  Recommendation rec;
  const Tracer tr{&rec.evaluations, &rec.trace};
  const Vector q = tr.eval(set, AgentId::Rt, b.rt);
  HierarchyPath& p = rec.path;
  p.root = static_cast<RootOption>(tr.choose(set, AgentId::Rt, q));
  switch (p.root) {
    case RootOption::None: break;
    case RootOption::Neu: p.neu = greedy_pair_impl(set, Organ::Neu, b.neu, tr); break;
    case RootOption::Car: p.car = greedy_pair_impl(set, Organ::Car, b.car, tr); break;
    case RootOption::Ren: p.renal = greedy_renal_impl(set, b.ren, tr); break;
    case RootOption::OMix: {
      const PeerOutputs peers = peers_impl(set, b, &rec.evaluations);
      const OMixDecision d = omix_decide(set, b, peers);
      rec.evaluations += kOrganCount;
      for (std::size_t i = 0; i < kOrganCount; ++i) {
        const auto m = set.mask(kOMixSubs[i]);
        rec.trace.push_back({kOMixSubs[i], d.sub_q[i], std::vector<std::uint8_t>(m.begin(), m.end()), d.choice[i]});
      }
      rec.trace.push_back({AgentId::OMix, {d.q_mixed}, {1}, 0});
      rec.action = d.action;
      p = decompose(d.action);
      validate(rec.action);
      return rec;
    }
  }
  rec.action = compose(p);
  validate(rec.action);
  return rec;
}

const XWindow& WindowHistory::push(const Vector& x) {
  xs_.push_back(x);
  if (xs_.size() > kContextSteps + 1) xs_.erase(xs_.begin());
  w_ = XWindow{};
  for (std::size_t m = 0; m < xs_.size(); ++m) w_[m] = &xs_[xs_.size() - 1 - m];
  return w_;
}

JointAction HierarchyPolicy::act(const StepContext& ctx) {
  if (!ctx.x) throw ContractError("hierarchy policy needs the normalized features");
  return recommend(*set_, bundle_for(*set_, history_.push(*ctx.x))).action;
}

// Training ----------------------------------------------------------------------

namespace {

/// One agent's DQN problem. Inputs are either precomputed vectors or embedded windows
/// (the latter tunes `table` end-to-end alongside the network).
struct DqnJob {
  AgentId id = AgentId::Rt;
  QAgent* agent = nullptr;
  std::vector<std::uint8_t> mask;
  std::vector<std::size_t> action;
  std::vector<double> reward;
  std::vector<std::uint8_t> terminal;
  std::vector<Vector> s, s_next;
  EmbeddingTable* table = nullptr;
  std::vector<XWindow> w, w_next;
  std::vector<double> fixed;  // supervised targets replace the TD target when non-empty

  std::size_t size() const { return action.size(); }
};

void check_loss(AgentId id, double loss, const TrainConfig& cfg) {
  if (!std::isfinite(loss) || loss > cfg.divergence_limit) throw DivergenceError(id, loss);
}

void clip_norm(Vector& g, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (double v : g) sq += v * v;
  const double n = std::sqrt(sq);
  if (n > max_norm) {
    for (double& v : g) v *= max_norm / n;
  }
}

void run_dqn(DqnJob& job, const TrainConfig& cfg, std::size_t epochs, std::mt19937_64& rng, AgentStatus& st) {
  const std::size_t n = job.size();
  if (n == 0) return;
  QAgent& agent = *job.agent;
  Optimizer opt(network_optimizer(cfg));
  EmbeddingTable target_table;
  Vector e_velocity;
  if (job.table) {
    target_table = *job.table;
    e_velocity.assign(job.table->e.size(), 0.0);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t updates = 0;
  const std::size_t out = agent.online.output_width();
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch) {
      const std::size_t stop = std::min(n, start + cfg.batch);
      const double scale = 1.0 / static_cast<double>(stop - start);
      GradientTape tape(agent.online);
      Vector grad_e;
      if (job.table) grad_e.assign(job.table->e.size(), 0.0);
      for (std::size_t b = start; b < stop; ++b) {
        const std::size_t i = order[b];
        double y;
        if (!job.fixed.empty()) {
          y = job.fixed[i];
        } else if (job.terminal[i]) {
          y = job.reward[i];
        } else {
          const Vector sn = job.table ? encode_window(job.w_next[i], target_table) : job.s_next[i];
          y = job.reward[i] + cfg.gamma * masked_max(forward(agent.target, sn), job.mask);
        }
        const Vector s = job.table ? encode_window(job.w[i], *job.table) : job.s[i];
        const Vector q = forward(agent.online, s, tape);
        const double diff = q[job.action[i]] - y;
        loss_sum += diff * diff;
        Vector g(out, 0.0);
        g[job.action[i]] = diff * scale;
        const Vector ds = backward(agent.online, tape, g);
        if (job.table) encode_window_backward(job.w[i], *job.table, ds, grad_e);
      }
      opt.step(agent.online, tape.grads);
      if (job.table) {
        clip_norm(grad_e, cfg.max_grad_norm);
        for (std::size_t j = 0; j < grad_e.size(); ++j) {
          e_velocity[j] = cfg.momentum * e_velocity[j] + grad_e[j];
          job.table->e[j] -= cfg.embedding_lr * e_velocity[j];
        }
      }
      if (++updates % cfg.target_sync == 0) {
        agent.sync_target();
        if (job.table) target_table = *job.table;
      }
    }
    const double mean = loss_sum / static_cast<double>(n);
    check_loss(job.id, mean, cfg);
    st.loss_curve.push_back(mean);
  }
  agent.sync_target();
  st.trained = true;
}

std::vector<std::size_t> option_support(const TrainingData& data, const Routing& routing, AgentId id) {
  std::vector<std::size_t> counts(id == AgentId::OMix ? 1 : option_count(id), 0);
  for (std::size_t i : routing.samples[slot(id)]) ++counts[*logged_option(id, data.records[i].path)];
  return counts;
}

void skip(AgentSet& set, AgentId id, const std::string& why) {
  auto& st = set.status[slot(id)];
  st.skipped = true;
  st.trained = false;
  st.note = why;
}

/// Decides which agents train and which options stay selectable. Children are settled before
/// their parents so an option leading to an unavailable agent is masked.
void plan_agents(const TrainingData& data, const Routing& routing, AgentSet& set) {
  const auto& cfg = set.config;
  for (AgentId id : all_agents()) {
    auto& st = set.status[slot(id)];
    st = AgentStatus{};
    st.samples = routing.size(id);
    if (st.samples < cfg.min_agent_samples) {
      skip(set, id, "only " + std::to_string(st.samples) + " routed samples");
    }
  }
  const auto support_mask = [&](AgentId id) {
    const auto counts = option_support(data, routing, id);
    auto& v = set.valid[slot(id)];
    v.assign(counts.size(), 0);
    for (std::size_t j = 0; j < counts.size(); ++j) v[j] = counts[j] >= cfg.min_option_samples ? 1 : 0;
    return counts;
  };
  const auto none_valid = [&](AgentId id) {
    const auto& v = set.valid[slot(id)];
    return std::none_of(v.begin(), v.end(), [](std::uint8_t x) { return x != 0; });
  };

  for (Organ o : {Organ::Neu, Organ::Car}) {
    const PairAgents ids = pair_agents(o);
    for (AgentId leaf : {ids.first, ids.second, ids.mix}) {
      support_mask(leaf);
      if (!set.status[slot(leaf)].skipped && none_valid(leaf)) skip(set, leaf, "no option has enough support");
    }
    support_mask(ids.master);
    auto& v = set.valid[slot(ids.master)];
    if (!set.available(ids.first)) v[static_cast<std::size_t>(PairOption::First)] = 0;
    if (!set.available(ids.second)) v[static_cast<std::size_t>(PairOption::Second)] = 0;
    if (!set.available(ids.mix)) v[static_cast<std::size_t>(PairOption::Mix)] = 0;
    if (!set.status[slot(ids.master)].skipped && none_valid(ids.master)) {
      skip(set, ids.master, "no option has enough support");
    }
  }
  support_mask(AgentId::Ren);
  if (!set.status[slot(AgentId::Ren)].skipped && none_valid(AgentId::Ren)) {
    skip(set, AgentId::Ren, "no option has enough support");
  }

  bool omix_ok = !set.status[slot(AgentId::OMix)].skipped;
  for (AgentId sub : kOMixSubs) {
    support_mask(sub);
    set.valid[slot(sub)][0] = 1;  // inactive is always selectable
  }
  set.valid[slot(AgentId::OMix)] = {1};
  if (!omix_ok) {
    for (AgentId sub : kOMixSubs) skip(set, sub, "OMix subset too small");
  }

  support_mask(AgentId::Rt);
  auto& rv = set.valid[slot(AgentId::Rt)];
  rv[static_cast<std::size_t>(RootOption::None)] = 1;  // needs no downstream agent
  if (!set.available(AgentId::Neu)) rv[static_cast<std::size_t>(RootOption::Neu)] = 0;
  if (!set.available(AgentId::Car)) rv[static_cast<std::size_t>(RootOption::Car)] = 0;
  if (!set.available(AgentId::Ren)) rv[static_cast<std::size_t>(RootOption::Ren)] = 0;
  if (!omix_ok) rv[static_cast<std::size_t>(RootOption::OMix)] = 0;
  if (set.status[slot(AgentId::Rt)].skipped) {
    throw DataError("not enough transitions to train the root agent (" +
                    std::to_string(set.status[slot(AgentId::Rt)].samples) + ")");
  }
}

DqnJob job_for(AgentSet& set, const TrainingData& data, const Routing& routing, AgentId id) {
  DqnJob job;
  job.id = id;
  job.agent = &set.agent(id);
  job.mask = set.valid[slot(id)];
  for (std::size_t i : routing.samples[slot(id)]) {
    const auto& r = data.records[i];
    job.action.push_back(*logged_option(id, r.path));
    job.reward.push_back(r.reward);
    job.terminal.push_back(r.terminal ? 1 : 0);
  }
  return job;
}

/// Routes windows (tuned embedding) or raw x (no learned representation).
void attach_windows(DqnJob& job, const TrainingData& data, const Routing& routing, EmbeddingTable* table,
                    bool raw) {
  for (std::size_t i : routing.samples[slot(job.id)]) {
    const auto& r = data.records[i];
    if (raw) {
      job.s.push_back(*r.w[0]);
      job.s_next.push_back(r.terminal ? Vector{} : *r.w_next[0]);
    } else {
      job.w.push_back(r.w);
      job.w_next.push_back(r.w_next);
    }
  }
  if (!raw) job.table = table;
}

struct CachedStates {
  std::vector<StateBundle> s;
  std::vector<StateBundle> s_next;  // empty bundle for terminal transitions
};

CachedStates cache_states(const TrainingData& data, const AgentSet& set) {
  CachedStates c;
  c.s.reserve(data.records.size());
  c.s_next.reserve(data.records.size());
  for (const auto& r : data.records) {
    c.s.push_back(bundle_for(set, r.w));
    c.s_next.push_back(r.terminal ? StateBundle{} : bundle_for(set, r.w_next));
  }
  return c;
}

void train_omix(const TrainingData& data, const Routing& routing, const CachedStates& cache, AgentSet& set,
                std::mt19937_64& rng) {
  const auto& cfg = set.config;
  const auto& idx = routing.samples[slot(AgentId::OMix)];
  const std::size_t n = idx.size();
  std::vector<std::array<Vector, kOrganCount>> in(n), in_next(n);
  std::vector<std::array<std::size_t, kOrganCount>> act(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t i = idx[k];
    const auto& r = data.records[i];
    in[k] = omix_inputs(set, cache.s[i].omix, peers_impl(set, cache.s[i], nullptr));
    if (!r.terminal) in_next[k] = omix_inputs(set, cache.s_next[i].omix, peers_impl(set, cache.s_next[i], nullptr));
    for (std::size_t a = 0; a < kOrganCount; ++a) act[k][a] = *logged_option(kOMixSubs[a], r.path);
  }

  std::array<QAgent*, kOrganCount> subs;
  std::array<Optimizer, kOrganCount> opts;
  for (std::size_t a = 0; a < kOrganCount; ++a) {
    subs[a] = &set.agent(kOMixSubs[a]);
    opts[a] = Optimizer(network_optimizer(cfg));
  }
  Optimizer opt_w(network_optimizer(cfg));
  Optimizer opt_b(network_optimizer(cfg));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t updates = 0;
  auto& st = set.status[slot(AgentId::OMix)];
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch) {
      const std::size_t stop = std::min(n, start + cfg.batch);
      const double scale = 1.0 / static_cast<double>(stop - start);
      std::array<GradientTape, kOrganCount> tapes;
      for (std::size_t a = 0; a < kOrganCount; ++a) tapes[a] = GradientTape(subs[a]->online);
      MixerTape mt(set.mixer);
      for (std::size_t b = start; b < stop; ++b) {
        const std::size_t k = order[b];
        const auto& r = data.records[idx[k]];
        double y = r.reward;
        if (!r.terminal) {
          std::array<Vector, kOrganCount> qn;
          for (std::size_t a = 0; a < kOrganCount; ++a) qn[a] = forward(subs[a]->target, in_next[k][a]);
          y += cfg.gamma * mixed_greedy(qn, set, set.mixer_target, cache.s_next[idx[k]].omix).q;
        }
        Vector chosen(kOrganCount);
        std::array<Vector, kOrganCount> q;
        for (std::size_t a = 0; a < kOrganCount; ++a) {
          q[a] = forward(subs[a]->online, in[k][a], tapes[a]);
          chosen[a] = q[a][act[k][a]];
        }
        const double qtot = qmix_forward(set.mixer, chosen, cache.s[idx[k]].omix, mt);
        const double diff = qtot - y;
        loss_sum += diff * diff;
        const MixerInputGrads g = qmix_backward(set.mixer, mt, diff * scale);
        for (std::size_t a = 0; a < kOrganCount; ++a) {
          Vector ga(q[a].size(), 0.0);
          ga[act[k][a]] = g.sub_qs[a];
          backward(subs[a]->online, tapes[a], ga);
        }
      }
      for (std::size_t a = 0; a < kOrganCount; ++a) opts[a].step(subs[a]->online, tapes[a].grads);
      opt_w.step(set.mixer.hyper_w, mt.w.grads);
      opt_b.step(set.mixer.hyper_b, mt.b.grads);
      if (++updates % cfg.target_sync == 0) {
        for (auto* s : subs) s->sync_target();
        set.mixer_target = set.mixer;
      }
    }
    const double mean = loss_sum / static_cast<double>(n);
    check_loss(AgentId::OMix, mean, cfg);
    st.loss_curve.push_back(mean);
  }
  for (auto* s : subs) s->sync_target();
  set.mixer_target = set.mixer;
  st.trained = true;
  for (AgentId sub : kOMixSubs) {
    set.status[slot(sub)].trained = true;
    set.status[slot(sub)].loss_curve = st.loss_curve;
  }
}

}  // namespace

void train_phase1(const TrainingData& data, AgentSet& set) {
  const TrainConfig& cfg = set.config;
  if (data.store && data.store->schema.size() != set.d) throw DimensionError("feature width differs from agent set");
  const Routing routing = route_samples(data);
  plan_agents(data, routing, set);
  std::mt19937_64 rng(cfg.seed);
  const bool raw = cfg.no_state_repr;

  {
    DqnJob job = job_for(set, data, routing, AgentId::Rt);
    attach_windows(job, data, routing, &set.embeddings.rt, raw);
    run_dqn(job, cfg, cfg.epochs, rng, set.status[slot(AgentId::Rt)]);
  }

  // Organ masters start from the trained root representation and fine-tune their own copy.
  const std::array<std::pair<AgentId, Level>, kOrganCount> masters{
      {{AgentId::Neu, Level::Neu}, {AgentId::Car, Level::Car}, {AgentId::Ren, Level::Ren}}};
  for (const auto& [id, level] : masters) {
    set.embeddings.at(level) = copy_as(set.embeddings.rt, level);
    if (!set.available(id)) continue;
    DqnJob job = job_for(set, data, routing, id);
    attach_windows(job, data, routing, &set.embeddings.at(level), raw);
    run_dqn(job, cfg, cfg.epochs, rng, set.status[slot(id)]);
  }

  const CachedStates cache = cache_states(data, set);
  const auto organ_state = [&](const StateBundle& b, Organ o) -> const Vector& {
    return o == Organ::Neu ? b.neu : b.car;
  };

  for (Organ o : {Organ::Neu, Organ::Car}) {
    const PairAgents ids = pair_agents(o);
    for (AgentId leaf : {ids.first, ids.second}) {
      if (!set.available(leaf)) continue;
      DqnJob job = job_for(set, data, routing, leaf);
      for (std::size_t i : routing.samples[slot(leaf)]) {
        job.s.push_back(organ_state(cache.s[i], o));
        job.s_next.push_back(data.records[i].terminal ? Vector{} : organ_state(cache.s_next[i], o));
      }
      run_dqn(job, cfg, cfg.epochs, rng, set.status[slot(leaf)]);
    }
    if (!set.available(ids.mix)) continue;
    // The mix agent reads the frozen leaves' greedy levels at s and s'.
    const auto mix_input = [&](const Vector& s) {
      PeerOutputs peers;
      if (!cfg.no_communication) {
        const Tracer quiet{};
        peers.first_leaf = greedy_leaf(set, ids.first, s, quiet);
        peers.second_leaf = greedy_leaf(set, ids.second, s, quiet);
      }
      return build_communicated_state(ids.mix, s, peers, cfg.no_communication);
    };
    DqnJob job = job_for(set, data, routing, ids.mix);
    for (std::size_t i : routing.samples[slot(ids.mix)]) {
      job.s.push_back(mix_input(organ_state(cache.s[i], o)));
      job.s_next.push_back(data.records[i].terminal ? Vector{} : mix_input(organ_state(cache.s_next[i], o)));
    }
    run_dqn(job, cfg, cfg.epochs, rng, set.status[slot(ids.mix)]);
  }

  if (set.available(AgentId::OMix)) train_omix(data, routing, cache, set, rng);
}

void train_phase2(const TrainingData& data, AgentSet& set) {
  const TrainConfig& cfg = set.config;
  DqnJob job;
  job.id = AgentId::Rt;
  job.agent = &set.agent(AgentId::Rt);
  job.mask = set.valid[slot(AgentId::Rt)];
  // Targets come from the frozen lower agents and are computed once.
  for (const auto& r : data.records) {
    const auto option = r.path.root;
    if (!job.mask[static_cast<std::size_t>(option)]) continue;
    const StateBundle b = bundle_for(set, r.w);
    RootTargetInputs in;
    switch (option) {
      case RootOption::None: break;
      case RootOption::Neu: in.q_neu = q_values(set.agent(AgentId::Neu), b.neu); break;
      case RootOption::Car: in.q_car = q_values(set.agent(AgentId::Car), b.car); break;
      case RootOption::Ren: in.q_ren = q_values(set.agent(AgentId::Ren), b.ren); break;
      case RootOption::OMix: in.q_omix = omix_decide(set, b, peers_impl(set, b, nullptr)).q_mixed; break;
    }
    // Masked options must not contribute to the organ maxima.
    const auto restrict = [&](std::optional<Vector>& q, AgentId id) {
      if (!q) return;
      const auto m = set.mask(id);
      Vector kept;
      for (std::size_t j = 0; j < q->size(); ++j) {
        if (m[j]) kept.push_back((*q)[j]);
      }
      *q = kept;
    };
    restrict(in.q_neu, AgentId::Neu);
    restrict(in.q_car, AgentId::Car);
    restrict(in.q_ren, AgentId::Ren);
    job.fixed.push_back(root_q_target(option, r.reward, in));
    job.action.push_back(static_cast<std::size_t>(option));
    job.reward.push_back(r.reward);
    job.terminal.push_back(r.terminal ? 1 : 0);
    if (cfg.no_state_repr) {
      job.s.push_back(*r.w[0]);
    } else {
      job.w.push_back(r.w);
      job.w_next.push_back(r.w_next);
    }
  }
  if (!cfg.no_state_repr) job.table = &set.embeddings.rt;
  std::mt19937_64 rng(cfg.seed ^ 0x5bd1e995ull);
  auto& st = set.status[slot(AgentId::Rt)];
  run_dqn(job, cfg, cfg.phase2_epochs, rng, st);
}

AgentSet train_hierarchy(const TrainingData& data, const TrainConfig& cfg) {
  if (!data.store) throw ContractError("training data has no episode store");
  AgentSet set = make_agent_set(data.store->schema.size(), cfg);
  train_phase1(data, set);
  train_phase2(data, set);
  return set;
}

// Persistence -------------------------------------------------------------------

void save_agent_set(const std::filesystem::path& dir, const AgentSet& set) {
  std::filesystem::create_directories(dir);
  json m;
  m["format"] = kHierarchyFormat;
  m["config"] = json::parse(train_config_to_json(set.config));
  m["d"] = set.d;
  json agents = json::array();
  for (AgentId id : all_agents()) {
    const auto& st = set.status[slot(id)];
    json a;
    a["name"] = agent_name(id);
    a["trained"] = st.trained;
    a["skipped"] = st.skipped;
    a["samples"] = st.samples;
    a["note"] = st.note;
    a["valid"] = set.valid[slot(id)];
    a["loss_curve"] = st.loss_curve;
    if (id == AgentId::OMix) {
      save_weights(dir / "omix_hyper_w", set.mixer.hyper_w, "omix-hyper-w");
      save_weights(dir / "omix_hyper_b", set.mixer.hyper_b, "omix-hyper-b");
      a["weights"] = {"omix_hyper_w", "omix_hyper_b"};
    } else {
      const auto& ag = set.agent(id);
      const std::string stem = std::string("agent_") + agent_name(id);
      save_weights(dir / stem, ag.online, agent_name(id));
      a["weights"] = {stem};
      a["base_width"] = ag.base_width;
      a["comm_width"] = ag.comm_width;
    }
    agents.push_back(a);
  }
  m["agents"] = agents;
  save_embeddings(dir / "embeddings", set.embeddings);
  m["hash"] = std::to_string(set.hash());
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  out << m.dump(2) << "\n";
}

AgentSet load_agent_set(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw DataError("missing hierarchy manifest in " + dir.string());
  json m;
  try {
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(std::string("corrupt hierarchy manifest: ") + e.what());
  }
  if (m.value("format", "") != kHierarchyFormat) throw DataError("unsupported hierarchy format");
  AgentSet set;
  try {
    set.config = train_config_from_json(m.at("config").dump());
    set.d = m.at("d").get<std::size_t>();
    set.embeddings = load_embeddings(dir / "embeddings");
    for (const auto& a : m.at("agents")) {
      const AgentId id = agent_from_name(a.at("name").get<std::string>());
      auto& st = set.status[slot(id)];
      st.trained = a.at("trained").get<bool>();
      st.skipped = a.at("skipped").get<bool>();
      st.samples = a.at("samples").get<std::size_t>();
      st.note = a.at("note").get<std::string>();
      st.loss_curve = a.at("loss_curve").get<std::vector<double>>();
      set.valid[slot(id)] = a.at("valid").get<std::vector<std::uint8_t>>();
      if (id == AgentId::OMix) {
        set.mixer.agents = kOrganCount;
        set.mixer.hyper_w = load_weights(dir / "omix_hyper_w");
        set.mixer.hyper_b = load_weights(dir / "omix_hyper_b");
        set.mixer.state_width = set.mixer.hyper_w.input_width();
        set.mixer_target = set.mixer;
        continue;
      }
      QAgent ag;
      ag.id = id;
      ag.base_width = a.at("base_width").get<std::size_t>();
      ag.comm_width = a.at("comm_width").get<std::size_t>();
      ag.options = agent_options(id);
      ag.online = load_weights(dir / a.at("weights").at(0).get<std::string>());
      if (ag.online.input_width() != ag.input_width() || ag.online.output_width() != ag.options.size()) {
        throw DataError(std::string("weights of ") + agent_name(id) + " do not match the agent's widths");
      }
      ag.target = ag.online;
      set.agents.emplace(id, std::move(ag));
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("bad hierarchy manifest: ") + e.what());
  }
  if (set.agents.size() + 1 != kAgentCount) throw DataError("hierarchy manifest does not list every agent");
  if (m.contains("hash") && m["hash"].get<std::string>() != std::to_string(set.hash())) {
    throw DataError("hierarchy payload does not match its manifest hash");
  }
  return set;
}

void write_loss_curves(const std::filesystem::path& path, const AgentSet& set) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "agent,epoch,loss\n";
  out.precision(10);
  for (AgentId id : all_agents()) {
    const auto& curve = set.status[slot(id)].loss_curve;
    for (std::size_t e = 0; e < curve.size(); ++e) out << agent_name(id) << ',' << e << ',' << curve[e] << '\n';
  }
}

}  // namespace hmarl
