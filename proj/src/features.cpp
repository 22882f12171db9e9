#include "hmarl/features.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

namespace hmarl {

std::string to_string(FeatureKind k) {
  switch (k) {
    case FeatureKind::binary: return "binary";
    case FeatureKind::normal: return "normal";
    case FeatureKind::lognormal: return "lognormal";
  }
  return "normal";
}

std::string to_string(Aggregation a) { return a == Aggregation::sum ? "sum" : "mean"; }

namespace {

FeatureKind kind_from_string(const std::string& s) {
  if (s == "binary") return FeatureKind::binary;
  if (s == "normal") return FeatureKind::normal;
  if (s == "lognormal") return FeatureKind::lognormal;
  throw SchemaError("unknown feature kind " + s);
}

Aggregation aggregation_from_string(const std::string& s) {
  if (s == "mean") return Aggregation::mean;
  if (s == "sum") return Aggregation::sum;
  throw SchemaError("unknown aggregation " + s);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string trim_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

double parse_double(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw DataError("");
    return v;
  } catch (const std::exception&) {
    throw DataError("cannot parse " + what + " value '" + s + "'");
  }
}

std::string outcome_string(Outcome o) {
  switch (o) {
    case Outcome::survived: return "survived";
    case Outcome::deceased: return "deceased";
    case Outcome::none: return "";
  }
  return "";
}

Outcome outcome_from_string(const std::string& s) {
  if (s.empty()) return Outcome::none;
  if (s == "survived") return Outcome::survived;
  if (s == "deceased") return Outcome::deceased;
  throw DataError("unknown outcome '" + s + "'");
}

double outcome_code(Outcome o) { return o == Outcome::none ? 0.0 : (o == Outcome::survived ? 1.0 : 2.0); }
Outcome outcome_from_code(double c) {
  if (c == 0.0) return Outcome::none;
  if (c == 1.0) return Outcome::survived;
  if (c == 2.0) return Outcome::deceased;
  throw DataError("bad outcome code in episode payload");
}

}  // namespace

FeatureSchema::FeatureSchema(std::vector<FeatureSpec> features) : features_(std::move(features)) {
  if (features_.size() < 2) throw SchemaError("schema needs at least two features");
  for (std::size_t i = 0; i < features_.size(); ++i) {
    if (!index_.emplace(features_[i].name, i).second) throw SchemaError("duplicate feature name " + features_[i].name);
  }
}

FeatureSchema FeatureSchema::synthetic() {
  using K = FeatureKind;
  using A = Aggregation;
  return FeatureSchema({
      {"gender", K::binary, A::mean},
      {"mech_vent", K::binary, A::mean},
      {"age", K::normal, A::mean},
      {"gcs", K::normal, A::mean},
      {"mbp", K::normal, A::mean},
      {"heart_rate", K::normal, A::mean},
      {"spo2", K::normal, A::mean},
      {"sofa", K::normal, A::mean},
      {"timestep", K::normal, A::mean},
      {"lactate", K::lognormal, A::mean},
      {"creatinine", K::lognormal, A::mean},
      {"urine_output", K::lognormal, A::sum},
  });
}

std::size_t FeatureSchema::index_of(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw SchemaError("unknown feature " + name);
  return it->second;
}

bool FeatureSchema::operator==(const FeatureSchema& other) const {
  if (features_.size() != other.features_.size()) return false;
  for (std::size_t i = 0; i < features_.size(); ++i) {
    const auto& a = features_[i];
    const auto& b = other.features_[i];
    if (a.name != b.name || a.kind != b.kind || a.aggregation != b.aggregation) return false;
  }
  return true;
}

WindowMatrix::WindowMatrix(std::string id, std::size_t w, std::size_t d)
    : patient_id(std::move(id)), windows(w), width(d), values(w * d, 0.0), missing(w * d, 1) {}

void WindowMatrix::resize_windows(std::size_t n) {
  values.resize(n * width, 0.0);
  missing.resize(n * width, 1);
  windows = n;
}

std::vector<WindowMatrix> aggregate_windows(const std::vector<RawEvent>& events, const FeatureSchema& schema,
                                            int window_minutes) {
  if (window_minutes <= 0) throw ContractError("window length must be positive");
  const std::size_t d = schema.size();
  struct Acc {
    std::vector<Vector> sums;
    std::vector<std::vector<int>> counts;
  };
  std::vector<std::string> order;
  std::unordered_map<std::string, Acc> acc;
  for (const auto& e : events) {
    if (!(e.timestamp_min >= 0.0)) throw DataError("negative timestamp for patient " + e.patient_id);
    const std::size_t f = schema.index_of(e.feature);
    const auto w = static_cast<std::size_t>(e.timestamp_min / window_minutes);
    auto [it, inserted] = acc.try_emplace(e.patient_id);
    if (inserted) order.push_back(e.patient_id);
    auto& a = it->second;
    if (a.sums.size() <= w) {
      a.sums.resize(w + 1, Vector(d, 0.0));
      a.counts.resize(w + 1, std::vector<int>(d, 0));
    }
    a.sums[w][f] += e.value;
    a.counts[w][f] += 1;
  }
  std::vector<WindowMatrix> out;
  out.reserve(order.size());
  for (const auto& id : order) {
    const auto& a = acc.at(id);
    WindowMatrix m(id, a.sums.size(), d);
    for (std::size_t w = 0; w < a.sums.size(); ++w) {
      for (std::size_t f = 0; f < d; ++f) {
        const int n = a.counts[w][f];
        if (n == 0) continue;
        m.at(w, f) = schema[f].aggregation == Aggregation::sum ? a.sums[w][f] : a.sums[w][f] / n;
        m.missing[w * d + f] = 0;
      }
    }
    out.push_back(std::move(m));
  }
  return out;
}

WindowMatrix impute_locf(const WindowMatrix& m, std::span<const double> defaults) {
  if (defaults.size() != m.width) throw DimensionError("population defaults width mismatch");
  WindowMatrix out = m;
  for (std::size_t f = 0; f < m.width; ++f) {
    bool seen = false;
    double last = defaults[f];
    for (std::size_t w = 0; w < m.windows; ++w) {
      if (!m.is_missing(w, f)) {
        last = m.at(w, f);
        seen = true;
      } else {
        out.at(w, f) = seen ? last : defaults[f];
      }
    }
  }
  return out;
}

Vector population_medians(const std::vector<WindowMatrix>& train, std::size_t width) {
  Vector med(width, 0.0);
  for (std::size_t f = 0; f < width; ++f) {
    Vector vals;
    for (const auto& m : train) {
      for (std::size_t w = 0; w < m.windows; ++w)
        if (!m.is_missing(w, f)) vals.push_back(m.at(w, f));
    }
    if (vals.empty()) continue;
    std::sort(vals.begin(), vals.end());
    const std::size_t n = vals.size();
    med[f] = n % 2 ? vals[n / 2] : 0.5 * (vals[n / 2 - 1] + vals[n / 2]);
  }
  return med;
}

NormalizationConstants NormalizationConstants::identity(const FeatureSchema& schema) {
  NormalizationConstants c;
  for (const auto& f : schema.features()) {
    FeatureScaling s;
    if (f.kind == FeatureKind::binary) {
      s.kind = FeatureKind::binary;
      s.lo = -0.5;
      s.hi = 0.5;
    } else {
      s.kind = FeatureKind::normal;
      s.lo = 0.0;
      s.hi = 1.0;
    }
    c.scaling.push_back(s);
  }
  c.population_default.assign(schema.size(), 0.0);
  return c;
}

NormalizationConstants fit_normalization(const std::vector<WindowMatrix>& train_imputed, const FeatureSchema& schema,
                                         Vector population_default) {
  NormalizationConstants c;
  c.population_default = std::move(population_default);
  for (std::size_t f = 0; f < schema.size(); ++f) {
    FeatureScaling s;
    s.kind = schema[f].kind;
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (const auto& m : train_imputed) {
      for (std::size_t w = 0; w < m.windows; ++w) {
        double v = m.at(w, f);
        if (s.kind == FeatureKind::lognormal) v = std::log1p(std::max(v, 0.0));
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
    if (!(hi > lo)) {
      s.degenerate = true;
      s.lo = std::isfinite(lo) ? lo : 0.0;
      s.hi = s.lo;
      c.warnings.push_back("feature " + schema[f].name + " is degenerate on the train split; mapped to 0.5");
    } else {
      s.lo = lo;
      s.hi = hi;
    }
    c.scaling.push_back(s);
  }
  return c;
}

double normalize_value(double raw, const FeatureScaling& s) {
  if (s.degenerate) return 0.5;
  switch (s.kind) {
    case FeatureKind::binary:
      if (raw == s.hi) return 0.5;
      if (raw == s.lo) return -0.5;
      throw DataError("binary feature value outside its two levels");
    case FeatureKind::normal: return (raw - s.lo) / (s.hi - s.lo);
    case FeatureKind::lognormal: return (std::log1p(std::max(raw, 0.0)) - s.lo) / (s.hi - s.lo);
  }
  return raw;
}

WindowMatrix normalize(const WindowMatrix& m, const FeatureSchema& schema, const NormalizationConstants& c) {
  if (c.scaling.size() != schema.size() || m.width != schema.size()) throw DimensionError("normalization width mismatch");
  WindowMatrix out = m;
  for (std::size_t w = 0; w < m.windows; ++w)
    for (std::size_t f = 0; f < m.width; ++f) out.at(w, f) = normalize_value(m.at(w, f), c.scaling[f]);
  return out;
}

void save_normalization(const std::filesystem::path& path, const FeatureSchema& schema,
                        const NormalizationConstants& c) {
  nlohmann::json j;
  j["format"] = "hmarl-normalization-v1";
  nlohmann::json feats = nlohmann::json::array();
  for (std::size_t f = 0; f < schema.size(); ++f) {
    const auto& s = c.scaling[f];
    feats.push_back({{"name", schema[f].name},
                     {"kind", to_string(s.kind)},
                     {"lo", s.lo},
                     {"hi", s.hi},
                     {"degenerate", s.degenerate},
                     {"population_default", c.population_default[f]}});
  }
  j["features"] = feats;
  j["warnings"] = c.warnings;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

NormalizationConstants load_normalization(const std::filesystem::path& path, const FeatureSchema& schema) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  const auto j = nlohmann::json::parse(in);
  NormalizationConstants c;
  const auto& feats = j.at("features");
  if (feats.size() != schema.size()) throw SchemaError("normalization constants do not match schema width");
  for (std::size_t f = 0; f < schema.size(); ++f) {
    const auto& e = feats[f];
    if (e.at("name").get<std::string>() != schema[f].name) throw SchemaError("normalization feature order mismatch");
    FeatureScaling s;
    s.kind = kind_from_string(e.at("kind").get<std::string>());
    s.lo = e.at("lo").get<double>();
    s.hi = e.at("hi").get<double>();
    s.degenerate = e.at("degenerate").get<bool>();
    c.scaling.push_back(s);
    c.population_default.push_back(e.at("population_default").get<double>());
  }
  c.warnings = j.value("warnings", std::vector<std::string>{});
  return c;
}

void validate_episode(const Episode& e, std::size_t width) {
  if (e.frames.empty()) throw DataError("episode " + e.patient_id + " has no frames");
  for (std::size_t t = 0; t < e.frames.size(); ++t) {
    const auto& fr = e.frames[t];
    if (fr.step != static_cast<int>(t)) throw DataError("episode " + e.patient_id + " steps are not contiguous from 0");
    if (fr.raw.size() != width || fr.x.size() != width) throw DimensionError("episode frame width mismatch");
    const bool last = t + 1 == e.frames.size();
    if (fr.terminal != last) throw DataError("episode " + e.patient_id + " must have exactly one terminal frame, last");
    if ((fr.outcome != Outcome::none) != last) throw DataError("episode " + e.patient_id + " outcome must be on the terminal frame");
    validate(fr.action);
  }
}

std::size_t EpisodeStore::frame_count() const {
  std::size_t n = 0;
  for (const auto& e : episodes) n += e.frames.size();
  return n;
}

double EpisodeStore::mortality() const {
  if (episodes.empty()) return 0.0;
  std::size_t dead = 0;
  for (const auto& e : episodes) dead += e.died() ? 1 : 0;
  return static_cast<double>(dead) / static_cast<double>(episodes.size());
}

double EpisodeStore::mean_length() const {
  return episodes.empty() ? 0.0 : static_cast<double>(frame_count()) / static_cast<double>(episodes.size());
}

namespace {

nlohmann::json schema_to_json(const FeatureSchema& schema) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& f : schema.features()) {
    arr.push_back({{"name", f.name}, {"kind", to_string(f.kind)}, {"aggregation", to_string(f.aggregation)}});
  }
  return arr;
}

FeatureSchema schema_from_json(const nlohmann::json& arr) {
  std::vector<FeatureSpec> specs;
  for (const auto& f : arr) {
    specs.push_back({f.at("name").get<std::string>(), kind_from_string(f.at("kind").get<std::string>()),
                     aggregation_from_string(f.at("aggregation").get<std::string>())});
  }
  return FeatureSchema(std::move(specs));
}

std::filesystem::path with_ext(const std::filesystem::path& stem, const char* ext) {
  auto p = stem;
  p += ext;
  return p;
}

}  // namespace

void save_episode_store(const std::filesystem::path& stem, const EpisodeStore& store) {
  const std::size_t d = store.schema.size();
  nlohmann::json manifest;
  manifest["format"] = kEpisodesFormat;
  manifest["split"] = store.split;
  manifest["schema"] = schema_to_json(store.schema);
  manifest["frame_layout"] = {"step",   "raw[d]",        "x[d]",     "missing[d]",
                              "action[6]", "behavior_prob", "terminal", "outcome"};
  manifest["frame_width"] = 1 + 3 * d + kTreatmentCount + 3;
  manifest["payload"] = with_ext(stem, ".bin").filename().string();
  nlohmann::json eps = nlohmann::json::array();
  Vector payload;
  payload.reserve(store.frame_count() * (1 + 3 * d + kTreatmentCount + 3));
  for (const auto& e : store.episodes) {
    validate_episode(e, d);
    eps.push_back({{"patient_id", e.patient_id}, {"frames", e.frames.size()}});
    for (const auto& fr : e.frames) {
      payload.push_back(fr.step);
      payload.insert(payload.end(), fr.raw.begin(), fr.raw.end());
      payload.insert(payload.end(), fr.x.begin(), fr.x.end());
      for (auto m : fr.missing) payload.push_back(m);
      for (int l : fr.action.levels) payload.push_back(l);
      payload.push_back(fr.behavior_prob);
      payload.push_back(fr.terminal ? 1.0 : 0.0);
      payload.push_back(outcome_code(fr.outcome));
    }
  }
  manifest["episodes"] = eps;
  std::ofstream out(with_ext(stem, ".json"), std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + with_ext(stem, ".json").string());
  out << manifest.dump(1) << "\n";
  out.close();
  write_f64_payload(with_ext(stem, ".bin"), payload);
}

EpisodeStore load_episode_store(const std::filesystem::path& stem) {
  std::ifstream in(with_ext(stem, ".json"));
  if (!in) throw std::runtime_error("cannot read " + with_ext(stem, ".json").string());
  const auto manifest = nlohmann::json::parse(in);
  if (manifest.value("format", "") != kEpisodesFormat) throw ContractError("not an hmarl-episodes-v1 store");
  EpisodeStore store;
  store.schema = schema_from_json(manifest.at("schema"));
  store.split = manifest.value("split", "");
  const std::size_t d = store.schema.size();
  const std::size_t fw = 1 + 3 * d + kTreatmentCount + 3;
  const auto payload = read_f64_payload(stem.parent_path() / manifest.at("payload").get<std::string>());
  std::size_t pos = 0;
  for (const auto& je : manifest.at("episodes")) {
    Episode e;
    e.patient_id = je.at("patient_id").get<std::string>();
    const auto n = je.at("frames").get<std::size_t>();
    if (pos + n * fw > payload.size()) throw DataError("episode payload truncated");
    for (std::size_t t = 0; t < n; ++t) {
      const double* p = payload.data() + pos;
      EpisodeFrame fr;
      fr.patient_id = e.patient_id;
      fr.step = static_cast<int>(p[0]);
      fr.raw.assign(p + 1, p + 1 + d);
      fr.x.assign(p + 1 + d, p + 1 + 2 * d);
      fr.missing.resize(d);
      for (std::size_t i = 0; i < d; ++i) fr.missing[i] = static_cast<std::uint8_t>(p[1 + 2 * d + i]);
      for (std::size_t i = 0; i < kTreatmentCount; ++i) fr.action.levels[i] = static_cast<int>(p[1 + 3 * d + i]);
      fr.behavior_prob = p[1 + 3 * d + kTreatmentCount];
      fr.terminal = p[2 + 3 * d + kTreatmentCount] != 0.0;
      fr.outcome = outcome_from_code(p[3 + 3 * d + kTreatmentCount]);
      e.frames.push_back(std::move(fr));
      pos += fw;
    }
    validate_episode(e, d);
    store.episodes.push_back(std::move(e));
  }
  return store;
}

void write_events_csv(const std::filesystem::path& path, const std::vector<RawEvent>& events) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << kEventsHeader << "\n";
  out.precision(17);
  for (const auto& e : events) out << e.patient_id << "," << e.timestamp_min << "," << e.feature << "," << e.value << "\n";
}

std::vector<RawEvent> read_events_csv(const std::filesystem::path& path, const FeatureSchema& schema) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || trim_cr(line) != kEventsHeader) throw DataError("events CSV header must be " + std::string(kEventsHeader));
  std::vector<RawEvent> events;
  while (std::getline(in, line)) {
    line = trim_cr(line);
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != 4) throw DataError("events CSV row has " + std::to_string(cells.size()) + " cells");
    RawEvent e{cells[0], parse_double(cells[1], "timestamp_min"), cells[2], parse_double(cells[3], "value")};
    schema.index_of(e.feature);
    if (e.timestamp_min < 0.0) throw DataError("negative timestamp in events CSV");
    events.push_back(std::move(e));
  }
  return events;
}

void write_actions_csv(const std::filesystem::path& path, const std::vector<ActionRow>& rows) {
  const bool with_prob = std::any_of(rows.begin(), rows.end(), [](const ActionRow& r) { return !std::isnan(r.behavior_prob); });
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << kActionsHeader << (with_prob ? ",behavior_prob" : "") << "\n";
  out.precision(17);
  for (const auto& r : rows) {
    out << r.patient_id << "," << r.step;
    for (double d : r.doses) out << "," << d;
    out << "," << (r.terminal ? 1 : 0) << "," << outcome_string(r.outcome);
    if (with_prob) out << "," << r.behavior_prob;
    out << "\n";
  }
}

std::vector<ActionRow> read_actions_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string header;
  if (!std::getline(in, header)) throw DataError("empty actions CSV");
  header = trim_cr(header);
  bool with_prob = false;
  if (header == std::string(kActionsHeader) + ",behavior_prob") {
    with_prob = true;
  } else if (header != kActionsHeader) {
    throw DataError("actions CSV header must be " + std::string(kActionsHeader));
  }
  const std::size_t cols = with_prob ? 11 : 10;
  std::vector<ActionRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    line = trim_cr(line);
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != cols) throw DataError("actions CSV row has " + std::to_string(cells.size()) + " cells");
    ActionRow r;
    r.patient_id = cells[0];
    r.step = static_cast<int>(parse_double(cells[1], "step"));
    for (std::size_t i = 0; i < kTreatmentCount; ++i) r.doses[i] = parse_double(cells[2 + i], "dose");
    r.terminal = parse_double(cells[8], "terminal") != 0.0;
    r.outcome = outcome_from_string(cells[9]);
    if (with_prob) r.behavior_prob = cells[10].empty() || cells[10] == "nan" ? std::numeric_limits<double>::quiet_NaN()
                                                                             : parse_double(cells[10], "behavior_prob");
    rows.push_back(r);
  }
  return rows;
}

namespace {

struct GroupedActions {
  std::vector<std::string> order;
  std::unordered_map<std::string, std::vector<const ActionRow*>> rows;
};

GroupedActions group_actions(const std::vector<ActionRow>& actions) {
  GroupedActions g;
  for (const auto& r : actions) {
    auto [it, inserted] = g.rows.try_emplace(r.patient_id);
    if (inserted) g.order.push_back(r.patient_id);
    it->second.push_back(&r);
  }
  for (auto& [id, rs] : g.rows) {
    std::stable_sort(rs.begin(), rs.end(), [](const ActionRow* a, const ActionRow* b) { return a->step < b->step; });
  }
  return g;
}

}  // namespace

std::vector<WindowMatrix> windowed_patients(const CohortInputs& in, const FeatureSchema& schema, int window_minutes) {
  auto mats = aggregate_windows(in.events, schema, window_minutes);
  std::unordered_map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < mats.size(); ++i) by_id[mats[i].patient_id] = i;
  const auto grouped = group_actions(in.actions);
  std::vector<WindowMatrix> out;
  for (const auto& id : grouped.order) {
    const std::size_t steps = grouped.rows.at(id).size();
    WindowMatrix m = by_id.count(id) ? mats[by_id[id]] : WindowMatrix(id, 0, schema.size());
    m.resize_windows(steps);
    out.push_back(std::move(m));
  }
  return out;
}

NormalizationConstants fit_on_train(const CohortInputs& train, const FeatureSchema& schema, int window_minutes) {
  const auto mats = windowed_patients(train, schema, window_minutes);
  auto medians = population_medians(mats, schema.size());
  std::vector<WindowMatrix> imputed;
  imputed.reserve(mats.size());
  for (const auto& m : mats) imputed.push_back(impute_locf(m, medians));
  return fit_normalization(imputed, schema, std::move(medians));
}

EpisodeStore build_episode_store(const CohortInputs& in, const FeatureSchema& schema,
                                 const NormalizationConstants& constants, const std::string& split,
                                 int window_minutes) {
  const auto axes = default_axes();
  const auto mats = windowed_patients(in, schema, window_minutes);
  const auto grouped = group_actions(in.actions);
  EpisodeStore store;
  store.schema = schema;
  store.split = split;
  for (const auto& m : mats) {
    const auto imputed = impute_locf(m, constants.population_default);
    const auto normed = normalize(imputed, schema, constants);
    const auto& rows = grouped.rows.at(m.patient_id);
    Episode e;
    e.patient_id = m.patient_id;
    for (std::size_t t = 0; t < rows.size(); ++t) {
      const ActionRow& r = *rows[t];
      EpisodeFrame fr;
      fr.patient_id = m.patient_id;
      fr.step = r.step;
      fr.raw.assign(imputed.values.begin() + t * m.width, imputed.values.begin() + (t + 1) * m.width);
      fr.x.assign(normed.values.begin() + t * m.width, normed.values.begin() + (t + 1) * m.width);
      fr.missing.assign(m.missing.begin() + t * m.width, m.missing.begin() + (t + 1) * m.width);
      for (std::size_t i = 0; i < kTreatmentCount; ++i) fr.action.levels[i] = discretize(axes[i], r.doses[i]);
      fr.behavior_prob = r.behavior_prob;
      fr.terminal = r.terminal;
      fr.outcome = r.outcome;
      e.frames.push_back(std::move(fr));
    }
    validate_episode(e, schema.size());
    store.episodes.push_back(std::move(e));
  }
  return store;
}

OnlineFeaturePipeline::OnlineFeaturePipeline(const FeatureSchema& schema, const NormalizationConstants& c)
    : schema_(&schema), constants_(&c), last_(schema.size(), 0.0), seen_(schema.size(), false) {}

std::pair<Vector, Vector> OnlineFeaturePipeline::push(std::span<const double> values,
                                                      std::span<const std::uint8_t> missing) {
  const std::size_t d = schema_->size();
  if (values.size() != d || missing.size() != d) throw DimensionError("online pipeline width mismatch");
  Vector raw(d), x(d);
  for (std::size_t f = 0; f < d; ++f) {
    if (!missing[f]) {
      last_[f] = values[f];
      seen_[f] = true;
    }
    raw[f] = seen_[f] ? last_[f] : constants_->population_default[f];
    x[f] = normalize_value(raw[f], constants_->scaling[f]);
  }
  return {raw, x};
}

}  // namespace hmarl
