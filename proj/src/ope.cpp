#include "hmarl/ope.hpp"

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

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

// CWPDIS ---------------------------------------------------------------------------

double cwpdis(std::span<const IsTrajectory> data, double gamma) {
  std::size_t horizon = 0;
  for (const auto& tr : data) horizon = std::max(horizon, tr.size());
  std::vector<double> rho(data.size(), 1.0);
  double v = 0.0, disc = 1.0;
  for (std::size_t t = 0; t < horizon; ++t) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (t >= data[i].size()) continue;
      const IsStep& s = data[i][t];
      if (!(s.behavior_prob > 0.0)) throw ContractError("non-positive behavior probability for a logged action");
      rho[i] *= s.eval_prob / s.behavior_prob;
      num += rho[i] * s.reward;
      den += rho[i];
    }
    if (den > 0.0) v += disc * num / den;
    disc *= gamma;
  }
  return v;
}

double empirical_value(std::span<const IsTrajectory> data, double gamma) {
  if (data.empty()) return 0.0;
  double total = 0.0;
  for (const auto& tr : data) {
    double g = 0.0, disc = 1.0;
    for (const auto& s : tr) {
      g += disc * s.reward;
      disc *= gamma;
    }
    total += g;
  }
  return total / static_cast<double>(data.size());
}

// Behavior model ----------------------------------------------------------------------

namespace {

Vector with_bias(std::span<const double> x) {
  Vector v(x.begin(), x.end());
  v.push_back(1.0);
  return v;
}

Vector softmax(Vector z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double& v : z) s += (v = std::exp(v - m));
  for (double& v : z) v /= s;
  return z;
}

SoftmaxHead make_head(std::size_t d, std::size_t classes) {
  // Zero weights start every head at the uniform distribution.
  Layer l;
  l.in = d + 1;
  l.out = classes;
  l.weights.assign(l.in * l.out, 0.0);
  l.bias.assign(l.out, 0.0);
  l.act = Activation::identity;
  SoftmaxHead h;
  h.classes = classes;
  h.net = Approximator(std::vector<Layer>{l});
  return h;
}

struct Example {
  const Vector* x;
  std::size_t label;
};

void fit_head(SoftmaxHead& h, const std::vector<Example>& data, const BehaviorFitConfig& cfg, std::mt19937_64& rng) {
  if (data.empty()) return;
  Layer& l = h.net.mutable_layers()[0];
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Vector gw(l.weights.size()), gb(l.out);
  for (std::size_t ep = 0; ep < cfg.epochs; ++ep) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      std::fill(gw.begin(), gw.end(), 0.0);
      std::fill(gb.begin(), gb.end(), 0.0);
      for (std::size_t k = start; k < end; ++k) {
        const Example& ex = data[order[k]];
        const Vector xb = with_bias(*ex.x);
        const Vector p = softmax(forward(h.net, xb));
        for (std::size_t c = 0; c < l.out; ++c) {
          const double g = p[c] - (c == ex.label ? 1.0 : 0.0);
          gb[c] += g;
          for (std::size_t j = 0; j < l.in; ++j) gw[c * l.in + j] += g * xb[j];
        }
      }
      const double scale = cfg.lr / static_cast<double>(end - start);
      for (std::size_t i = 0; i < gw.size(); ++i) l.weights[i] -= scale * gw[i] + cfg.lr * cfg.l2 * l.weights[i];
      for (std::size_t c = 0; c < l.out; ++c) l.bias[c] -= scale * gb[c];
    }
  }
  h.net.touch();
}

// P(fewer than 2 of 3 organs active) under independent activity probabilities.
double below_two(double a0, double a1, double a2) {
  const double i0 = 1 - a0, i1 = 1 - a1, i2 = 1 - a2;
  return i0 * i1 * i2 + a0 * i1 * i2 + i0 * a1 * i2 + i0 * i1 * a2;
}

struct HeadOutputs {
  Vector root, neu, car, ren, on, oc, orn;
  double omix_z = 1.0;
};

HeadOutputs all_heads(const BehaviorModel& m, std::span<const double> x) {
  HeadOutputs h;
  h.root = m.root.probabilities(x, m.floor);
  h.neu = m.neu.probabilities(x, m.floor);
  h.car = m.car.probabilities(x, m.floor);
  h.ren = m.ren.probabilities(x, m.floor);
  h.on = m.omix_neu.probabilities(x, m.floor);
  h.oc = m.omix_car.probabilities(x, m.floor);
  h.orn = m.omix_ren.probabilities(x, m.floor);
  h.omix_z = 1.0 - below_two(1 - h.on[0], 1 - h.oc[0], 1 - h.orn[0]);
  return h;
}

double path_probability(const HeadOutputs& h, const HierarchyPath& p) {
  const double pr = h.root[static_cast<std::size_t>(p.root)];
  switch (p.root) {
    case RootOption::None: return pr;
    case RootOption::Neu: return pr * h.neu[pair_index(p.neu) - 1];
    case RootOption::Car: return pr * h.car[pair_index(p.car) - 1];
    case RootOption::Ren: return pr * h.ren[p.renal - 1];
    case RootOption::OMix:
      return pr * h.on[pair_index(p.neu)] * h.oc[pair_index(p.car)] * h.orn[p.renal] / h.omix_z;
  }
  return 0.0;
}

}  // namespace

Vector SoftmaxHead::probabilities(std::span<const double> x, double floor) const {
  Vector p = softmax(forward(net, with_bias(x)));
  const double keep = 1.0 - floor * static_cast<double>(classes);
  if (keep < 0.0) throw ContractError("behavior floor too large for the head width");
  for (double& v : p) v = floor + keep * v;
  return p;
}

double BehaviorModel::probability(std::span<const double> x, const JointAction& a) const {
  validate(a);
  return path_probability(all_heads(*this, x), decompose(a));
}

Vector BehaviorModel::distribution(std::span<const double> x) const {
  const HeadOutputs h = all_heads(*this, x);
  Vector p(kJointActionCount);
  for (std::size_t i = 0; i < kJointActionCount; ++i) p[i] = path_probability(h, decompose(from_flat_index(i)));
  return p;
}

Vector BehaviorModel::root_probabilities(std::span<const double> x) const { return root.probabilities(x, floor); }

BehaviorModel fit_behavior(const EpisodeStore& train, const BehaviorFitConfig& cfg) {
  if (train.episodes.empty() || train.frame_count() == 0) throw DataError("behavior model needs a non-empty train set");
  if (!(cfg.sample_fraction > 0.0 && cfg.sample_fraction <= 1.0)) throw ContractError("sample_fraction must be in (0, 1]");
  BehaviorModel m;
  m.floor = cfg.floor;
  m.d = train.schema.size();
  m.root = make_head(m.d, kRootOptionCount);
  m.neu = make_head(m.d, 24);
  m.car = make_head(m.d, 24);
  m.ren = make_head(m.d, 5);
  m.omix_neu = make_head(m.d, 25);
  m.omix_car = make_head(m.d, 25);
  m.omix_ren = make_head(m.d, kRenalOptionCount);

  std::mt19937_64 rng(cfg.seed);
  std::bernoulli_distribution keep(cfg.sample_fraction);
  std::vector<Example> root, neu, car, ren, on, oc, orn;
  for (const auto& e : train.episodes)
    for (const auto& f : e.frames) {
      if (cfg.sample_fraction < 1.0 && !keep(rng)) continue;
      const HierarchyPath p = decompose(f.action);
      root.push_back({&f.x, static_cast<std::size_t>(p.root)});
      switch (p.root) {
        case RootOption::None: break;
        case RootOption::Neu: neu.push_back({&f.x, static_cast<std::size_t>(pair_index(p.neu) - 1)}); break;
        case RootOption::Car: car.push_back({&f.x, static_cast<std::size_t>(pair_index(p.car) - 1)}); break;
        case RootOption::Ren: ren.push_back({&f.x, static_cast<std::size_t>(p.renal - 1)}); break;
        case RootOption::OMix:
          on.push_back({&f.x, static_cast<std::size_t>(pair_index(p.neu))});
          oc.push_back({&f.x, static_cast<std::size_t>(pair_index(p.car))});
          orn.push_back({&f.x, static_cast<std::size_t>(p.renal)});
          break;
      }
    }
  fit_head(m.root, root, cfg, rng);
  fit_head(m.neu, neu, cfg, rng);
  fit_head(m.car, car, cfg, rng);
  fit_head(m.ren, ren, cfg, rng);
  fit_head(m.omix_neu, on, cfg, rng);
  fit_head(m.omix_car, oc, cfg, rng);
  fit_head(m.omix_ren, orn, cfg, rng);
  return m;
}

double behavior_log_loss(const BehaviorModel& m, const EpisodeStore& store) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& e : store.episodes)
    for (const auto& f : e.frames) {
      total -= std::log(m.probability(f.x, f.action));
      ++n;
    }
  if (n == 0) throw DataError("log loss of an empty store");
  return total / static_cast<double>(n);
}

std::optional<double> logged_fitted_kl(const BehaviorModel& m, const EpisodeStore& store) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& e : store.episodes)
    for (const auto& f : e.frames) {
      if (!std::isfinite(f.behavior_prob) || f.behavior_prob <= 0.0) continue;
      total += f.behavior_prob * std::log(f.behavior_prob / m.probability(f.x, f.action));
      ++n;
    }
  if (n == 0) return std::nullopt;
  return total / static_cast<double>(n);
}

// Decisions -------------------------------------------------------------------------

Decision HierarchyOfflinePolicy::decide(const Episode& e, std::size_t step) const {
  const Recommendation rec = recommend(*set_, bundle_for(*set_, window_at(e, step)));
  const NodeTrace& root = rec.trace.front();
  return {rec.action, root.q[root.choice]};
}

Decision ClinicianPolicy::decide(const Episode& e, std::size_t step) const {
  double g = 0.0, disc = 1.0;
  for (std::size_t t = step; t < e.frames.size(); ++t) {
    g += disc * transition_reward(e, t, *schema_, terminal_reward_);
    disc *= gamma_;
  }
  return {e.frames.at(step).action, g};
}

DecisionTable decide_all(const OfflinePolicy& policy, const EpisodeStore& store) {
  DecisionTable out(store.episodes.size());
  for (std::size_t i = 0; i < store.episodes.size(); ++i) {
    const auto& e = store.episodes[i];
    out[i].reserve(e.frames.size());
    for (std::size_t t = 0; t < e.frames.size(); ++t) out[i].push_back(policy.decide(e, t));
  }
  return out;
}

std::vector<Vector> episode_rewards(const EpisodeStore& store, double terminal_reward) {
  std::vector<Vector> out;
  out.reserve(store.episodes.size());
  for (const auto& e : store.episodes) {
    Vector r(e.frames.size());
    for (std::size_t t = 0; t < r.size(); ++t) r[t] = transition_reward(e, t, store.schema, terminal_reward);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<IsTrajectory> is_trajectories(const EpisodeStore& store, const std::vector<Vector>& rewards,
                                          const DecisionTable& decisions, const BehaviorModel* behavior) {
  if (rewards.size() != store.episodes.size() || decisions.size() != store.episodes.size())
    throw DimensionError("rewards/decisions do not match the store");
  std::vector<IsTrajectory> out(store.episodes.size());
  for (std::size_t i = 0; i < store.episodes.size(); ++i) {
    const auto& e = store.episodes[i];
    if (decisions[i].size() != e.frames.size() || rewards[i].size() != e.frames.size())
      throw DimensionError("episode " + e.patient_id + " length mismatch");
    for (std::size_t t = 0; t < e.frames.size(); ++t) {
      const auto& f = e.frames[t];
      IsStep s;
      s.reward = rewards[i][t];
      s.eval_prob = decisions[i][t].action == f.action ? 1.0 : 0.0;
      if (behavior) {
        s.behavior_prob = behavior->probability(f.x, f.action);
      } else {
        if (!std::isfinite(f.behavior_prob)) throw DataError("episode " + e.patient_id + " has no logged behavior probability");
        s.behavior_prob = f.behavior_prob;
      }
      out[i].push_back(s);
    }
  }
  return out;
}

// Statistics -------------------------------------------------------------------------

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("pearson: length mismatch");
  const std::size_t n = a.size();
  if (n < 2) return 0.0;
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

namespace {

Vector ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
  Vector r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("spearman: length mismatch");
  const Vector ra = ranks(a), rb = ranks(b);
  return pearson(ra, rb);
}

Interval fisher_interval(double r, std::size_t n) {
  if (n <= 3) return {-1.0, 1.0};
  const double rc = std::clamp(r, -0.999999, 0.999999);
  const double z = std::atanh(rc), half = 1.959963984540054 / std::sqrt(static_cast<double>(n - 3));
  return {std::tanh(z - half), std::tanh(z + half)};
}

// Curves ----------------------------------------------------------------------------

std::size_t BinnedCurve::total() const { return std::accumulate(n.begin(), n.end(), std::size_t{0}); }

std::size_t BinnedCurve::nonempty() const {
  return static_cast<std::size_t>(std::count_if(n.begin(), n.end(), [](std::size_t c) { return c > 0; }));
}

namespace {

void push_bin(BinnedCurve& c, double lo, double hi, std::size_t n, std::size_t deaths) {
  c.lo.push_back(lo);
  c.hi.push_back(hi);
  c.n.push_back(n);
  const double p = n ? static_cast<double>(deaths) / static_cast<double>(n) : 0.0;
  c.mortality.push_back(p);
  c.stderr_.push_back(n ? std::sqrt(p * (1 - p) / static_cast<double>(n)) : 0.0);
}

}  // namespace

BinnedCurve equal_count_curve(std::span<const double> values, std::span<const std::uint8_t> died, std::size_t bins) {
  if (values.size() != died.size()) throw DimensionError("values/outcomes length mismatch");
  if (bins == 0) throw ContractError("at least one bin");
  BinnedCurve c;
  if (values.empty()) return c;
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return values[i] < values[j]; });
  const std::size_t n = idx.size();
  std::size_t start = 0;
  for (std::size_t b = 0; b < bins && start < n; ++b) {
    std::size_t end = b + 1 == bins ? n : std::max(start + 1, (b + 1) * n / bins);
    while (end < n && values[idx[end]] == values[idx[end - 1]]) ++end;  // keep ties together
    std::size_t deaths = 0;
    for (std::size_t k = start; k < end; ++k) deaths += died[idx[k]] ? 1 : 0;
    push_bin(c, values[idx[start]], values[idx[end - 1]], end - start, deaths);
    start = end;
  }
  return c;
}

double MortalityCalibration::lookup(double value, bool* clamped) const {
  if (curve.bins() == 0) throw AnalysisError("empty mortality calibration");
  if (clamped) *clamped = value < curve.lo.front() || value > curve.hi.back();
  for (std::size_t b = 0; b < curve.bins(); ++b)
    if (value <= curve.hi[b]) return curve.mortality[b];
  return curve.mortality.back();
}

MortalityCalibration calibrate_mortality(std::span<const double> clinician_returns,
                                         std::span<const std::uint8_t> died, std::size_t bins) {
  MortalityCalibration c;
  c.curve = equal_count_curve(clinician_returns, died, bins);
  if (c.curve.bins() == 0) throw AnalysisError("no clinician trajectories to calibrate on");
  return c;
}

MortalityEstimate mortality_from_returns(const MortalityCalibration& cal, std::span<const double> eval_returns,
                                         std::size_t resamples, std::uint64_t seed) {
  if (eval_returns.empty()) throw AnalysisError("no evaluation returns");
  MortalityEstimate out;
  Vector mapped(eval_returns.size());
  for (std::size_t i = 0; i < mapped.size(); ++i) {
    bool cl = false;
    mapped[i] = cal.lookup(eval_returns[i], &cl);
    out.clamped += cl ? 1 : 0;
  }
  out.mortality = std::accumulate(mapped.begin(), mapped.end(), 0.0) / static_cast<double>(mapped.size());
  if (resamples > 1) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, mapped.size() - 1);
    Vector means(resamples);
    for (double& m : means) {
      double s = 0.0;
      for (std::size_t k = 0; k < mapped.size(); ++k) s += mapped[pick(rng)];
      m = s / static_cast<double>(mapped.size());
    }
    const double mu = std::accumulate(means.begin(), means.end(), 0.0) / static_cast<double>(resamples);
    double ss = 0.0;
    for (double m : means) ss += (m - mu) * (m - mu);
    out.stderr_ = std::sqrt(ss / static_cast<double>(resamples - 1));
  }
  return out;
}

ReturnCurve mortality_vs_return(std::span<const double> values, std::span<const std::uint8_t> died, std::size_t bins) {
  ReturnCurve rc;
  rc.curve = equal_count_curve(values, died, bins);
  if (rc.curve.nonempty() < 2) throw AnalysisError("mortality-vs-return needs at least 2 non-empty bins");
  Vector centers, rates;
  for (std::size_t b = 0; b < rc.curve.bins(); ++b) {
    if (rc.curve.n[b] == 0) continue;
    centers.push_back(0.5 * (rc.curve.lo[b] + rc.curve.hi[b]));
    rates.push_back(rc.curve.mortality[b]);
  }
  rc.spearman = spearman(centers, rates);
  rc.ci = fisher_interval(rc.spearman, centers.size());
  return rc;
}

void decision_values(const EpisodeStore& store, const DecisionTable& decisions, Vector& values,
                     std::vector<std::uint8_t>& died) {
  values.clear();
  died.clear();
  for (std::size_t i = 0; i < store.episodes.size(); ++i) {
    const auto& e = store.episodes[i];
    for (std::size_t t = 0; t < e.frames.size(); ++t) {
      values.push_back(decisions.at(i).at(t).value);
      died.push_back(e.died() ? 1 : 0);
    }
  }
}

std::array<DosageCurve, kTreatmentCount> dosage_difference_curves(const EpisodeStore& store,
                                                                 const DecisionTable& decisions) {
  std::array<DosageCurve, kTreatmentCount> out;
  for (std::size_t k = 0; k < kTreatmentCount; ++k) {
    auto& dc = out[k];
    dc.treatment = static_cast<Treatment>(k);
    const int extreme = dc.treatment == Treatment::Dialysis ? 1 : kMaxLevel;
    for (int diff = -extreme; diff <= extreme; ++diff) dc.diffs.push_back(diff);
    std::vector<std::size_t> n(dc.diffs.size(), 0), deaths(dc.diffs.size(), 0);
    for (std::size_t i = 0; i < store.episodes.size(); ++i) {
      const auto& e = store.episodes[i];
      for (std::size_t t = 0; t < e.frames.size(); ++t) {
        const int diff = e.frames[t].action.levels[k] - decisions.at(i).at(t).action.levels[k];
        const auto b = static_cast<std::size_t>(diff + extreme);
        ++n[b];
        deaths[b] += e.died() ? 1 : 0;
      }
    }
    for (std::size_t b = 0; b < n.size(); ++b) push_bin(dc.curve, dc.diffs[b], dc.diffs[b], n[b], deaths[b]);
    const std::size_t zero = static_cast<std::size_t>(extreme), lo = 0, hi = n.size() - 1;
    double ext = 0.0;
    int used = 0;
    for (std::size_t b : {lo, hi})
      if (n[b] > 0) {
        ext += dc.curve.mortality[b];
        ++used;
      }
    if (used > 0 && n[zero] > 0) dc.v_score = ext / used - dc.curve.mortality[zero];
  }
  return out;
}

const char* severity_name(Severity s) {
  switch (s) {
    case Severity::low: return "low";
    case Severity::med: return "med";
    case Severity::high: return "high";
  }
  return "?";
}

CorrelationMatrix treatment_correlation(std::span<const JointAction> actions) {
  CorrelationMatrix m;
  m.n = actions.size();
  std::array<Vector, kTreatmentCount> cols;
  for (std::size_t k = 0; k < kTreatmentCount; ++k) {
    cols[k].reserve(actions.size());
    for (const auto& a : actions) cols[k].push_back(a.levels[k]);
    m.constant[k] = cols[k].empty() || std::all_of(cols[k].begin(), cols[k].end(),
                                                   [&](double v) { return v == cols[k].front(); });
  }
  for (std::size_t i = 0; i < kTreatmentCount; ++i) {
    m.r[i][i] = 1.0;
    for (std::size_t j = i + 1; j < kTreatmentCount; ++j) {
      const double r = m.constant[i] || m.constant[j] ? 0.0 : pearson(cols[i], cols[j]);
      m.r[i][j] = m.r[j][i] = r;
    }
  }
  return m;
}

CorrelationSet treatment_correlations(const EpisodeStore& store, const DecisionTable& decisions) {
  CorrelationSet cs;
  const std::size_t sofa = store.schema.index_of("sofa");
  Vector all;
  for (const auto& e : store.episodes)
    for (const auto& f : e.frames) all.push_back(f.raw[sofa]);
  if (all.empty()) throw AnalysisError("no frames for treatment correlations");
  Vector sorted = all;
  std::sort(sorted.begin(), sorted.end());
  cs.sofa_t1 = sorted[(sorted.size() - 1) / 3];
  cs.sofa_t2 = sorted[2 * (sorted.size() - 1) / 3];

  std::array<std::array<std::vector<JointAction>, 2>, 3> clin, pol;
  for (std::size_t i = 0; i < store.episodes.size(); ++i) {
    const auto& e = store.episodes[i];
    const std::size_t o = e.died() ? 1 : 0;
    for (std::size_t t = 0; t < e.frames.size(); ++t) {
      const double s = e.frames[t].raw[sofa];
      const std::size_t sev = s <= cs.sofa_t1 ? 0 : (s <= cs.sofa_t2 ? 1 : 2);
      clin[sev][o].push_back(e.frames[t].action);
      pol[sev][o].push_back(decisions.at(i).at(t).action);
    }
  }
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t o = 0; o < 2; ++o) {
      cs.clinician[s][o] = treatment_correlation(clin[s][o]);
      cs.policy[s][o] = treatment_correlation(pol[s][o]);
    }
  return cs;
}

// Reports --------------------------------------------------------------------------

DatasetReport evaluate_dataset(const OfflinePolicy& policy, const EpisodeStore& store, const EvaluationContext& ctx) {
  if (store.episodes.empty()) throw DataError("cannot evaluate on an empty store");
  DatasetReport r;
  r.split = store.split;
  r.patients = store.episodes.size();
  r.frames = store.frame_count();
  r.clinician_mortality = store.mortality();

  const auto rewards = episode_rewards(store, ctx.terminal_reward);
  const DecisionTable decisions = decide_all(policy, store);
  const ClinicianPolicy clinician(store.schema, ctx.terminal_reward, ctx.gamma);
  const DecisionTable logged = decide_all(clinician, store);

  bool have_logged = true;
  for (const auto& e : store.episodes)
    for (const auto& f : e.frames) have_logged = have_logged && std::isfinite(f.behavior_prob) && f.behavior_prob > 0;
  if (!have_logged && !ctx.fitted) throw DataError("no logged behavior probabilities and no fitted behavior model");

  const auto clinician_is = is_trajectories(store, rewards, logged, have_logged ? nullptr : ctx.fitted);
  r.clinician_value = empirical_value(clinician_is, ctx.gamma);

  const auto is = is_trajectories(store, rewards, decisions, have_logged ? nullptr : ctx.fitted);
  r.v_cwpdis = cwpdis(is, ctx.gamma);
  r.behavior_source = have_logged ? "logged" : "fitted";
  if (ctx.fitted) {
    r.v_cwpdis_fitted = cwpdis(is_trajectories(store, rewards, decisions, ctx.fitted), ctx.gamma);
    r.behavior_kl = logged_fitted_kl(*ctx.fitted, store);
  }

  for (std::size_t i = 0; i < store.episodes.size(); ++i)
    for (std::size_t t = 0; t < decisions[i].size(); ++t)
      r.match_rate_steps += decisions[i][t].action == store.episodes[i].frames[t].action ? 1 : 0;

  Vector clin_returns, eval_returns;
  std::vector<std::uint8_t> died;
  for (std::size_t i = 0; i < store.episodes.size(); ++i) {
    clin_returns.push_back(logged[i].front().value);
    eval_returns.push_back(decisions[i].front().value);
    died.push_back(store.episodes[i].died() ? 1 : 0);
  }
  const MortalityCalibration cal = calibrate_mortality(clin_returns, died, ctx.bins);
  r.estimated_mortality = mortality_from_returns(cal, eval_returns, ctx.resamples, ctx.seed);

  Vector values;
  std::vector<std::uint8_t> step_died;
  decision_values(store, decisions, values, step_died);
  r.return_curve = mortality_vs_return(values, step_died, ctx.bins);
  r.dosage = dosage_difference_curves(store, decisions);
  r.correlations = treatment_correlations(store, decisions);
  return r;
}

void write_curve_csv(const std::filesystem::path& path, const BinnedCurve& c) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "bin_lo,bin_hi,n,mortality,stderr\n";
  for (std::size_t b = 0; b < c.bins(); ++b)
    out << fmt(c.lo[b]) << ',' << fmt(c.hi[b]) << ',' << c.n[b] << ',' << fmt(c.mortality[b]) << ','
        << fmt(c.stderr_[b]) << '\n';
}

BinnedCurve read_curve_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "bin_lo,bin_hi,n,mortality,stderr") throw DataError(path.string() + ": unexpected curve header");
  BinnedCurve c;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell[5];
    for (auto& s : cell)
      if (!std::getline(ss, s, ',')) throw DataError(path.string() + ":" + std::to_string(lineno) + ": short row");
    try {
      c.lo.push_back(std::stod(cell[0]));
      c.hi.push_back(std::stod(cell[1]));
      c.n.push_back(std::stoull(cell[2]));
      c.mortality.push_back(std::stod(cell[3]));
      c.stderr_.push_back(std::stod(cell[4]));
    } catch (const std::exception&) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": malformed number");
    }
  }
  return c;
}

namespace {

json curve_json(const BinnedCurve& c) {
  json j = json::array();
  for (std::size_t b = 0; b < c.bins(); ++b)
    j.push_back({{"bin_lo", c.lo[b]}, {"bin_hi", c.hi[b]}, {"n", c.n[b]}, {"mortality", c.mortality[b]},
                 {"stderr", c.stderr_[b]}});
  return j;
}

void write_matrix_csv(const std::filesystem::path& path, const CorrelationMatrix& m) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "treatment";
  for (std::size_t k = 0; k < kTreatmentCount; ++k) out << ',' << treatment_name(static_cast<Treatment>(k));
  out << ",constant\n";
  for (std::size_t i = 0; i < kTreatmentCount; ++i) {
    out << treatment_name(static_cast<Treatment>(i));
    for (std::size_t j = 0; j < kTreatmentCount; ++j) out << ',' << fmt(m.r[i][j]);
    out << ',' << (m.constant[i] ? 1 : 0) << '\n';
  }
}

template <class T>
json opt(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

}  // namespace

void write_report(const std::filesystem::path& dir, const std::string& model, const std::string& model_kind,
                  const std::vector<DatasetReport>& rows) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  json j;
  j["format"] = kReportFormat;
  j["model"] = model;
  j["model_kind"] = model_kind;
  j["datasets"] = json::array();
  for (const auto& r : rows) {
    const fs::path cdir = dir / "curves" / r.split;
    fs::create_directories(cdir);
    json d;
    d["split"] = r.split;
    d["patients"] = r.patients;
    d["frames"] = r.frames;
    d["clinician_value"] = r.clinician_value;
    d["clinician_mortality"] = r.clinician_mortality;
    d["v_cwpdis"] = r.v_cwpdis;
    d["v_cwpdis_fitted"] = opt(r.v_cwpdis_fitted);
    d["behavior_source"] = r.behavior_source;
    d["behavior_kl"] = opt(r.behavior_kl);
    d["agreement"] = r.frames ? static_cast<double>(r.match_rate_steps) / static_cast<double>(r.frames) : 0.0;
    d["estimated_mortality"] = r.estimated_mortality.mortality;
    d["estimated_mortality_stderr"] = r.estimated_mortality.stderr_;
    d["calibration_clamped"] = r.estimated_mortality.clamped;
    d["true_value"] = opt(r.true_value);
    d["true_mortality"] = opt(r.true_mortality);
    d["mortality_vs_return"] = {{"spearman", r.return_curve.spearman},
                                {"ci95", {r.return_curve.ci.lo, r.return_curve.ci.hi}},
                                {"bins", curve_json(r.return_curve.curve)}};
    write_curve_csv(cdir / "mortality_vs_return.csv", r.return_curve.curve);
    json dos = json::object();
    for (const auto& dc : r.dosage) {
      const std::string name = treatment_name(dc.treatment);
      dos[name] = {{"v_score", opt(dc.v_score)}, {"bins", curve_json(dc.curve)}};
      write_curve_csv(cdir / ("dosage_" + name + ".csv"), dc.curve);
    }
    d["dosage_difference"] = dos;
    d["sofa_tertiles"] = {r.correlations.sofa_t1, r.correlations.sofa_t2};
    json files = json::array();
    for (std::size_t s = 0; s < 3; ++s)
      for (std::size_t o = 0; o < 2; ++o)
        for (int who = 0; who < 2; ++who) {
          const auto& m = who == 0 ? r.correlations.clinician[s][o] : r.correlations.policy[s][o];
          const std::string name = std::string("correlation_") + (who == 0 ? "clinician" : "policy") + "_" +
                                   severity_name(static_cast<Severity>(s)) + "_" +
                                   (o == 0 ? "survived" : "deceased") + ".csv";
          write_matrix_csv(cdir / name, m);
          files.push_back({{"file", "curves/" + r.split + "/" + name}, {"n", m.n}});
        }
    d["correlations"] = files;
    j["datasets"].push_back(d);
  }
  std::ofstream out(dir / "report.json");
  if (!out) throw DataError("cannot write " + (dir / "report.json").string());
  out << j.dump(2) << '\n';
}

}  // namespace hmarl
