#include "hmarl/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

namespace hmarl {

namespace {

using nlohmann::json;

std::uint64_t mix_hash(std::uint64_t h, std::uint64_t v) {
  const auto* p = reinterpret_cast<const std::byte*>(&v);
  return fnv1a(std::span<const std::byte>(p, sizeof v), h);
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

void add_into(Vector& acc, const Vector& v) {
  for (std::size_t i = 0; i < v.size(); ++i) acc[i] += v[i];
}

}  // namespace

// Kinds and layouts ------------------------------------------------------------------

const char* baseline_name(BaselineKind k) {
  switch (k) {
    case BaselineKind::d3qn_s: return "d3qn-s";
    case BaselineKind::d3qn_o: return "d3qn-o";
    case BaselineKind::d3qn_t: return "d3qn-t";
    case BaselineKind::qmix_o: return "qmix-o";
    case BaselineKind::qmix_t: return "qmix-t";
  }
  return "?";
}

std::optional<BaselineKind> baseline_from_name(const std::string& name) {
  for (BaselineKind k : all_baselines()) {
    if (name == baseline_name(k)) return k;
  }
  return std::nullopt;
}

std::vector<BaselineKind> all_baselines() {
  return {BaselineKind::d3qn_s, BaselineKind::d3qn_o, BaselineKind::d3qn_t, BaselineKind::qmix_o,
          BaselineKind::qmix_t};
}

bool is_cooperative(BaselineKind k) { return k == BaselineKind::qmix_o || k == BaselineKind::qmix_t; }

const char* axis_name(HeadAxis a) {
  switch (a) {
    case HeadAxis::flat: return "flat";
    case HeadAxis::neu_pair: return "neu";
    case HeadAxis::car_pair: return "car";
    case HeadAxis::renal: return "ren";
    case HeadAxis::s1: return "s1";
    case HeadAxis::s2: return "s2";
    case HeadAxis::iv: return "iv";
    case HeadAxis::vaso: return "vaso";
  }
  return "?";
}

HeadAxis axis_from_name(const std::string& name) {
  for (HeadAxis a : {HeadAxis::flat, HeadAxis::neu_pair, HeadAxis::car_pair, HeadAxis::renal, HeadAxis::s1,
                     HeadAxis::s2, HeadAxis::iv, HeadAxis::vaso}) {
    if (name == axis_name(a)) return a;
  }
  throw DataError("unknown head axis '" + name + "'");
}

std::size_t head_width(HeadAxis a) {
  switch (a) {
    case HeadAxis::flat: return kJointActionCount;
    case HeadAxis::neu_pair:
    case HeadAxis::car_pair: return 25;
    case HeadAxis::renal: return kRenalOptionCount;
    default: return kMaxLevel + 1;
  }
}

std::size_t head_choice(HeadAxis a, const JointAction& action) {
  switch (a) {
    case HeadAxis::flat: return flat_index(action);
    case HeadAxis::neu_pair: return static_cast<std::size_t>(pair_index(neu_choice(action)));
    case HeadAxis::car_pair: return static_cast<std::size_t>(pair_index(car_choice(action)));
    case HeadAxis::renal: return static_cast<std::size_t>(renal_option(action));
    case HeadAxis::s1: return static_cast<std::size_t>(action[Treatment::S1]);
    case HeadAxis::s2: return static_cast<std::size_t>(action[Treatment::S2]);
    case HeadAxis::iv: return static_cast<std::size_t>(action[Treatment::IV]);
    case HeadAxis::vaso: return static_cast<std::size_t>(action[Treatment::Vaso]);
  }
  return 0;
}

void apply_choice(HeadAxis a, std::size_t choice, JointAction& action) {
  if (choice >= head_width(a)) throw ContractError(std::string("choice out of range for head ") + axis_name(a));
  const int c = static_cast<int>(choice);
  switch (a) {
    case HeadAxis::flat: action = from_flat_index(choice); break;
    case HeadAxis::neu_pair: {
      const PairChoice p = pair_from_index(c);
      action[Treatment::S1] = p.first;
      action[Treatment::S2] = p.second;
      break;
    }
    case HeadAxis::car_pair: {
      const PairChoice p = pair_from_index(c);
      action[Treatment::IV] = p.first;
      action[Treatment::Vaso] = p.second;
      break;
    }
    case HeadAxis::renal: set_renal_option(action, c); break;
    case HeadAxis::s1: action[Treatment::S1] = c; break;
    case HeadAxis::s2: action[Treatment::S2] = c; break;
    case HeadAxis::iv: action[Treatment::IV] = c; break;
    case HeadAxis::vaso: action[Treatment::Vaso] = c; break;
  }
}

std::vector<HeadAxis> baseline_layout(BaselineKind k) {
  switch (k) {
    case BaselineKind::d3qn_s: return {HeadAxis::flat};
    case BaselineKind::d3qn_o:
    case BaselineKind::qmix_o: return {HeadAxis::neu_pair, HeadAxis::car_pair, HeadAxis::renal};
    case BaselineKind::d3qn_t:
    case BaselineKind::qmix_t: return {HeadAxis::s1, HeadAxis::s2, HeadAxis::iv, HeadAxis::vaso, HeadAxis::renal};
  }
  return {};
}

// Dueling double Q -------------------------------------------------------------------

Vector dueling_q(std::span<const double> raw) {
  if (raw.size() < 2) throw DimensionError("dueling output needs at least one advantage and a value");
  const std::size_t n = raw.size() - 1;
  double mean = 0.0;
  for (std::size_t j = 0; j < n; ++j) mean += raw[j];
  mean /= static_cast<double>(n);
  Vector q(n);
  for (std::size_t j = 0; j < n; ++j) q[j] = raw[n] + raw[j] - mean;
  return q;
}

Vector dueling_backward(std::span<const double> grad_q) {
  const std::size_t n = grad_q.size();
  double total = 0.0;
  for (double g : grad_q) total += g;
  Vector out(n + 1);
  for (std::size_t j = 0; j < n; ++j) out[j] = grad_q[j] - total / static_cast<double>(n);
  out[n] = total;
  return out;
}

double double_q_target(std::span<const double> q_online_next, std::span<const double> q_target_next, double r,
                       double gamma, bool terminal, std::span<const std::uint8_t> valid) {
  if (terminal) return r;
  if (q_online_next.size() != q_target_next.size()) throw DimensionError("online and target Q widths differ");
  return r + gamma * q_target_next[argmax_valid(q_online_next, valid)];
}

Vector BaselineHead::q(std::span<const double> state) const {
  const Vector raw = forward(online, state);
  return dueling ? dueling_q(raw) : raw;
}

Vector BaselineHead::q_target(std::span<const double> state) const {
  const Vector raw = forward(target, state);
  return dueling ? dueling_q(raw) : raw;
}

// Model ---------------------------------------------------------------------------------

std::size_t BaselineModel::state_width() const { return state_widths(d, config.k, config.no_state_repr).organ; }

Vector BaselineModel::state(const XWindow& w) const {
  if (config.no_state_repr) return *w[0];
  return encode_window(w, table);
}

std::uint64_t BaselineModel::hash() const {
  std::uint64_t h = hash_doubles(table.e);
  h = mix_hash(h, static_cast<std::uint64_t>(kind));
  for (const auto& head : heads) {
    h = mix_hash(h, head.online.parameter_hash());
    for (std::uint8_t v : head.valid) h = mix_hash(h, v);
  }
  if (mixer) h = mix_hash(h, mixer->parameter_hash());
  return h;
}

BaselineModel make_baseline(BaselineKind kind, std::size_t d, const TrainConfig& cfg) {
  if (d == 0) throw DimensionError("baseline needs at least one feature");
  BaselineModel m;
  m.kind = kind;
  m.config = cfg;
  m.d = d;
  m.table = random_embedding(Level::Rt, d, cfg.k, cfg.seed);
  const std::size_t in = m.state_width();
  const bool dueling = !is_cooperative(kind);
  const auto layout = baseline_layout(kind);
  for (std::size_t h = 0; h < layout.size(); ++h) {
    BaselineHead head;
    head.axis = layout[h];
    head.dueling = dueling;
    const std::size_t out = head_width(head.axis) + (dueling ? 1 : 0);
    head.online = Approximator(q_network_shapes(in, out, cfg.net), cfg.seed * 1000003ull + 31ull * (h + 1));
    head.target = head.online;
    head.valid.assign(head_width(head.axis), 1);
    m.heads.push_back(std::move(head));
  }
  if (is_cooperative(kind)) {
    m.mixer = MixingNetwork::make(layout.size(), in, cfg.mixer_hidden, cfg.seed * 1000003ull + 977ull);
    m.mixer_target = m.mixer;
  }
  return m;
}

BaselineDecision baseline_decide(const BaselineModel& m, std::span<const double> state) {
  BaselineDecision dec;
  Vector chosen;
  for (const auto& head : m.heads) {
    dec.q.push_back(head.q(state));
    const std::size_t c = argmax_valid(dec.q.back(), head.valid);
    dec.choice.push_back(c);
    chosen.push_back(dec.q.back()[c]);
    apply_choice(head.axis, c, dec.action);
  }
  if (m.mixer) {
    dec.value = qmix_forward(*m.mixer, chosen, state);
  } else {
    dec.value = std::accumulate(chosen.begin(), chosen.end(), 0.0) / static_cast<double>(chosen.size());
  }
  validate(dec.action);
  return dec;
}

JointAction BaselinePolicy::act(const StepContext& ctx) {
  if (!ctx.x) throw ContractError("baseline policy needs the normalized features");
  return baseline_decide(*m_, m_->state(history_.push(*ctx.x))).action;
}

Decision BaselineOfflinePolicy::decide(const Episode& e, std::size_t step) const {
  const BaselineDecision dec = baseline_decide(*m_, m_->state(window_at(e, step)));
  return {dec.action, dec.value};
}

// Training ------------------------------------------------------------------------------

BaselineModel train_baseline(BaselineKind kind, const TrainingData& data, const TrainConfig& cfg,
                             std::size_t epochs) {
  if (!data.store) throw ContractError("training data has no episode store");
  if (data.records.empty()) throw DataError("no transitions to train on");
  BaselineModel m = make_baseline(kind, data.store->schema.size(), cfg);
  m.epochs = epochs == 0 ? cfg.epochs + cfg.phase2_epochs : epochs;
  const std::size_t n = data.records.size();
  m.samples = n;
  const std::size_t heads = m.heads.size();
  const bool coop = m.mixer.has_value();
  const bool raw = cfg.no_state_repr;

  // Logged choices and the support mask per head.
  std::vector<std::vector<std::size_t>> act(heads, std::vector<std::size_t>(n));
  for (std::size_t h = 0; h < heads; ++h) {
    auto& head = m.heads[h];
    std::vector<std::size_t> counts(head_width(head.axis), 0);
    for (std::size_t i = 0; i < n; ++i) ++counts[act[h][i] = head_choice(head.axis, data.records[i].action)];
    for (std::size_t j = 0; j < counts.size(); ++j) head.valid[j] = counts[j] >= cfg.min_option_samples ? 1 : 0;
    head.valid[0] = 1;  // no treatment on this slice
  }

  std::vector<Optimizer> opts(heads, Optimizer(network_optimizer(cfg)));
  Optimizer opt_w(network_optimizer(cfg)), opt_b(network_optimizer(cfg));
  EmbeddingTable target_table = m.table;
  Vector e_velocity(m.table.e.size(), 0.0);
  std::mt19937_64 rng(cfg.seed ^ (0x9e3779b97f4a7c15ull * (static_cast<std::uint64_t>(kind) + 1)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t updates = 0;

  const auto encode = [&](const XWindow& w, const EmbeddingTable& t) { return raw ? *w[0] : encode_window(w, t); };

  for (std::size_t epoch = 0; epoch < m.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch) {
      const std::size_t stop = std::min(n, start + cfg.batch);
      const double scale = 1.0 / static_cast<double>(stop - start);
      std::vector<GradientTape> tapes;
      for (const auto& head : m.heads) tapes.emplace_back(head.online);
      std::optional<MixerTape> mt;
      if (coop) mt.emplace(*m.mixer);
      Vector grad_e(raw ? 0 : m.table.e.size(), 0.0);

      for (std::size_t b = start; b < stop; ++b) {
        const std::size_t i = order[b];
        const auto& r = data.records[i];
        const Vector s = encode(r.w, m.table);
        Vector sn_online, sn_target;
        if (!r.terminal) {
          sn_target = encode(r.w_next, target_table);
          sn_online = encode(r.w_next, m.table);
        }
        Vector ds(s.size(), 0.0);
        std::vector<Vector> outs(heads);
        for (std::size_t h = 0; h < heads; ++h) outs[h] = forward(m.heads[h].online, s, tapes[h]);

        if (!coop) {
          for (std::size_t h = 0; h < heads; ++h) {
            const auto& head = m.heads[h];
            const Vector q = dueling_q(outs[h]);
            double y = r.reward;
            if (!r.terminal) {
              y = double_q_target(head.q(sn_online), head.q_target(sn_target), r.reward, cfg.gamma, false, head.valid);
            }
            const double diff = q[act[h][i]] - y;
            loss_sum += diff * diff;
            Vector gq(q.size(), 0.0);
            gq[act[h][i]] = diff * scale;
            add_into(ds, backward(head.online, tapes[h], dueling_backward(gq)));
          }
        } else {
          double y = r.reward;
          if (!r.terminal) {
            // Double Q per agent: online argmax, target evaluation.
            Vector best(heads);
            for (std::size_t h = 0; h < heads; ++h) {
              const Vector qn = m.heads[h].q_target(sn_target);
              best[h] = qn[argmax_valid(m.heads[h].q(sn_online), m.heads[h].valid)];
            }
            y += cfg.gamma * qmix_forward(*m.mixer_target, best, sn_target);
          }
          Vector chosen(heads);
          for (std::size_t h = 0; h < heads; ++h) chosen[h] = outs[h][act[h][i]];
          const double diff = qmix_forward(*m.mixer, chosen, s, *mt) - y;
          loss_sum += diff * diff;
          const MixerInputGrads g = qmix_backward(*m.mixer, *mt, diff * scale);
          add_into(ds, g.state);
          for (std::size_t h = 0; h < heads; ++h) {
            Vector gq(outs[h].size(), 0.0);
            gq[act[h][i]] = g.sub_qs[h];
            add_into(ds, backward(m.heads[h].online, tapes[h], gq));
          }
        }
        if (!raw) encode_window_backward(r.w, m.table, ds, grad_e);
      }

      for (std::size_t h = 0; h < heads; ++h) opts[h].step(m.heads[h].online, tapes[h].grads);
      if (coop) {
        opt_w.step(m.mixer->hyper_w, mt->w.grads);
        opt_b.step(m.mixer->hyper_b, mt->b.grads);
      }
      if (!raw) {
        clip_norm(grad_e, cfg.max_grad_norm);
        for (std::size_t j = 0; j < grad_e.size(); ++j) {
          e_velocity[j] = cfg.momentum * e_velocity[j] + grad_e[j];
          m.table.e[j] -= cfg.embedding_lr * e_velocity[j];
        }
      }
      if (++updates % cfg.target_sync == 0) {
        for (auto& head : m.heads) soft_copy(head.online, head.target);
        if (coop) m.mixer_target = m.mixer;
        target_table = m.table;
      }
    }
    const double mean = loss_sum / static_cast<double>(n);
    if (!std::isfinite(mean) || mean > cfg.divergence_limit) {
      throw NumericError(std::string(baseline_name(kind)) + " diverged at epoch " + std::to_string(epoch) +
                         " (loss " + std::to_string(mean) + ")");
    }
    m.loss_curve.push_back(mean);
  }
  for (auto& head : m.heads) soft_copy(head.online, head.target);
  if (coop) m.mixer_target = m.mixer;
  return m;
}

// Persistence ----------------------------------------------------------------------------

void save_baseline(const std::filesystem::path& dir, const BaselineModel& m) {
  std::filesystem::create_directories(dir);
  json j;
  j["format"] = kBaselineFormat;
  j["kind"] = baseline_name(m.kind);
  j["config"] = json::parse(train_config_to_json(m.config));
  j["d"] = m.d;
  j["samples"] = m.samples;
  j["epochs"] = m.epochs;
  j["loss_curve"] = m.loss_curve;
  j["flat_action_order"] = "canonical flat index: S1 major, renal option minor";
  json hs = json::array();
  for (std::size_t h = 0; h < m.heads.size(); ++h) {
    const auto& head = m.heads[h];
    const std::string stem = "head_" + std::to_string(h) + "_" + axis_name(head.axis);
    save_weights(dir / stem, head.online, axis_name(head.axis));
    hs.push_back({{"axis", axis_name(head.axis)}, {"dueling", head.dueling}, {"weights", stem}, {"valid", head.valid}});
  }
  j["heads"] = hs;
  if (m.mixer) {
    save_weights(dir / "mixer_hyper_w", m.mixer->hyper_w, "mixer-hyper-w");
    save_weights(dir / "mixer_hyper_b", m.mixer->hyper_b, "mixer-hyper-b");
  }
  save_matrices(dir / "embedding", {{"rt", m.table.d, m.table.k, m.table.e}}, "baseline-embedding");
  j["hash"] = std::to_string(m.hash());
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  out << j.dump(2) << "\n";
}

BaselineModel load_baseline(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw DataError("missing baseline manifest in " + dir.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(std::string("corrupt baseline manifest: ") + e.what());
  }
  if (j.value("format", "") != kBaselineFormat) throw DataError("unsupported baseline format");
  BaselineModel m;
  try {
    const auto kind = baseline_from_name(j.at("kind").get<std::string>());
    if (!kind) throw DataError("unknown baseline kind in manifest");
    m.kind = *kind;
    m.config = train_config_from_json(j.at("config").dump());
    m.d = j.at("d").get<std::size_t>();
    m.samples = j.at("samples").get<std::size_t>();
    m.epochs = j.at("epochs").get<std::size_t>();
    m.loss_curve = j.at("loss_curve").get<std::vector<double>>();
    const auto mats = load_matrices(dir / "embedding");
    if (mats.size() != 1 || mats[0].rows != m.d || mats[0].cols != m.config.k) {
      throw DataError("baseline embedding does not match the manifest");
    }
    m.table = EmbeddingTable(Level::Rt, m.d, m.config.k);
    m.table.e = mats[0].values;
    const auto layout = baseline_layout(m.kind);
    if (j.at("heads").size() != layout.size()) throw DataError("baseline head count does not match its kind");
    for (std::size_t h = 0; h < layout.size(); ++h) {
      const auto& hj = j.at("heads").at(h);
      BaselineHead head;
      head.axis = axis_from_name(hj.at("axis").get<std::string>());
      if (head.axis != layout[h]) throw DataError("baseline head order does not match its kind");
      head.dueling = hj.at("dueling").get<bool>();
      head.valid = hj.at("valid").get<std::vector<std::uint8_t>>();
      head.online = load_weights(dir / hj.at("weights").get<std::string>());
      const std::size_t out = head_width(head.axis) + (head.dueling ? 1 : 0);
      if (head.online.input_width() != m.state_width() || head.online.output_width() != out ||
          head.valid.size() != head_width(head.axis)) {
        throw DataError(std::string("weights of head ") + axis_name(head.axis) + " do not match its widths");
      }
      head.target = head.online;
      m.heads.push_back(std::move(head));
    }
    if (is_cooperative(m.kind)) {
      MixingNetwork mix;
      mix.agents = layout.size();
      mix.hyper_w = load_weights(dir / "mixer_hyper_w");
      mix.hyper_b = load_weights(dir / "mixer_hyper_b");
      mix.state_width = mix.hyper_w.input_width();
      if (mix.state_width != m.state_width() || mix.hyper_w.output_width() != mix.agents) {
        throw DataError("baseline mixer does not match its heads");
      }
      m.mixer = mix;
      m.mixer_target = mix;
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("bad baseline manifest: ") + e.what());
  }
  if (j.contains("hash") && j["hash"].get<std::string>() != std::to_string(m.hash())) {
    throw DataError("baseline payload does not match its manifest hash");
  }
  return m;
}

}  // namespace hmarl
