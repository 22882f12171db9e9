// hmarl: cohort generation, training, evaluation and single-decision recommendations.
// Exit codes: 0 success, 2 usage or input error, 3 numeric failure, 1 anything else.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <future>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hmarl/baselines.hpp"
#include "hmarl/ope.hpp"
#include "hmarl/training.hpp"
#include "run_manifest.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hmarl;
using hmarl::cli::RunManifest;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;
constexpr const char* kModelInfoFormat = "hmarl-model-info-v1";
constexpr const char* kSummaryFormat = "hmarl-cohort-summary-v1";
constexpr const char* kRecommendationFormat = "hmarl-recommendation-v1";

/// Input problems detected by the CLI itself.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  bool deterministic = false;
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
  std::vector<std::string> argv;
};

std::string default_data_dir() {
  const char* env = std::getenv("HMARL_DATA_DIR");
  return env && *env ? env : "data";
}

const std::vector<std::string>& model_kinds() {
  static const std::vector<std::string> kinds{"proposed", "prop-noc", "prop-nosr", "prop-noc-nosr", "d3qn-s",
                                              "d3qn-o",   "d3qn-t",   "qmix-o",    "qmix-t"};
  return kinds;
}

std::string join(const std::vector<std::string>& v, const char* sep) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? sep : "") + v[i];
  return out;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw UsageError("cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << j.dump(2) << "\n";
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw UsageError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string text_hash(const std::string& s) {
  return cli::hex64(fnv1a(std::as_bytes(std::span<const char>(s.data(), s.size()))));
}

fs::path store_stem(const fs::path& data, const std::string& split) { return data / split; }

bool has_store(const fs::path& data, const std::string& split) {
  return fs::exists(store_stem(data, split).string() + ".json");
}

EpisodeStore load_split(const fs::path& data, const std::string& split) {
  if (!has_store(data, split)) throw UsageError("no '" + split + "' episode store in " + data.string());
  return load_episode_store(store_stem(data, split));
}

std::map<std::string, std::string> all_formats() {
  return {{"episodes", kEpisodesFormat},   {"weights", kWeightsFormat},     {"hierarchy", kHierarchyFormat},
          {"baseline", kBaselineFormat},   {"report", kReportFormat},       {"model_info", kModelInfoFormat},
          {"summary", kSummaryFormat},     {"recommendation", kRecommendationFormat},
          {"run_manifest", cli::kRunManifestFormat}, {"normalization", "hmarl-normalization-v1"}};
}

RunManifest manifest_for(const std::string& command, const Globals& g) {
  RunManifest m;
  m.command = command;
  m.argv = g.argv;
  m.deterministic = g.deterministic;
  m.threads = g.threads;
  m.formats = all_formats();
  return m;
}

// generate -------------------------------------------------------------------------

struct GenerateArgs {
  std::string config;
  std::string out;
  std::size_t train = 2000;
  std::size_t test = 700;
  std::size_t external = 700;
};

json split_summary(const EpisodeStore& s) {
  return {{"patients", s.episodes.size()},
          {"frames", s.frame_count()},
          {"mortality", s.mortality()},
          {"mean_length_steps", s.mean_length()}};
}

int cmd_generate(const GenerateArgs& a, const Globals& g) {
  const cli::Stopwatch clock;
  DynamicsConfig cfg;
  try {
    cfg = dynamics_from_json(read_text(a.config));
    if (g.seed) cfg.seed = *g.seed;
    validate(cfg);
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("bad dynamics config: ") + e.what());
  } catch (const json::exception& e) {
    throw UsageError(std::string("bad dynamics config: ") + e.what());
  }
  if (a.train == 0) throw UsageError("--train must be positive");

  const fs::path out = a.out;
  fs::create_directories(out);
  const auto schema = FeatureSchema::synthetic();
  const DynamicsConfig ext = external_dynamics(cfg);

  const Oracle oracle(cfg);
  const auto train_in = to_cohort_inputs(generate_cohort(a.train, cfg, oracle, schema, "p"), schema);
  const NormalizationConstants constants = fit_on_train(train_in, schema);

  json summary;
  summary["format"] = kSummaryFormat;
  summary["seed"] = cfg.seed;
  const auto emit = [&](const CohortInputs& in, const std::string& split) {
    const EpisodeStore store = build_episode_store(in, schema, constants, split);
    save_episode_store(store_stem(out, split), store);
    summary["splits"][split] = split_summary(store);
  };
  emit(train_in, "train");
  if (a.test > 0) emit(to_cohort_inputs(generate_cohort(a.test, cfg, oracle, schema, "q", a.train), schema), "test");
  if (a.external > 0) {
    const Oracle ext_oracle(ext);
    emit(to_cohort_inputs(generate_cohort(a.external, ext, ext_oracle, schema, "e", a.train + a.test), schema),
         "external");
  }
  save_normalization(out / "normalization.json", schema, constants);
  dynamics_to_json_file(out / "dynamics.json", cfg);
  dynamics_to_json_file(out / "external_dynamics.json", ext);
  write_json(out / "summary.json", summary);

  std::printf("%-9s %9s %8s %10s %12s\n", "split", "patients", "frames", "mortality", "mean_steps");
  for (const auto& [split, s] : summary["splits"].items()) {
    std::printf("%-9s %9zu %8zu %9.1f%% %12.2f\n", split.c_str(), s["patients"].get<std::size_t>(),
                s["frames"].get<std::size_t>(), 100.0 * s["mortality"].get<double>(),
                s["mean_length_steps"].get<double>());
  }

  RunManifest m = manifest_for("generate", g);
  m.seed = cfg.seed;
  m.config_hash = text_hash(dynamics_to_json(cfg));
  m.inputs = {a.config};
  m.outputs = {out.string()};
  m.flags = {{"train", a.train}, {"test", a.test}, {"external", a.external}};
  m.duration_s = clock.seconds();
  m.write(out);
  return 0;
}

// train ----------------------------------------------------------------------------

struct TrainArgs {
  std::string model;
  std::string data;
  std::string out;
  std::string config;
};

int cmd_train(const TrainArgs& a, const Globals& g) {
  const cli::Stopwatch clock;
  const auto& kinds = model_kinds();
  if (std::find(kinds.begin(), kinds.end(), a.model) == kinds.end()) {
    throw UsageError("unknown model kind '" + a.model + "'; valid kinds: " + join(kinds, ", "));
  }
  TrainConfig cfg;
  if (!a.config.empty()) {
    try {
      cfg = train_config_from_json(read_text(a.config));
    } catch (const json::exception& e) {
      throw UsageError(std::string("bad train config: ") + e.what());
    }
  }
  if (g.seed) cfg.seed = *g.seed;
  const auto baseline = baseline_from_name(a.model);
  if (!baseline) {
    cfg.no_communication = a.model == "prop-noc" || a.model == "prop-noc-nosr";
    cfg.no_state_repr = a.model == "prop-nosr" || a.model == "prop-noc-nosr";
  }

  const fs::path data_dir = a.data;
  const EpisodeStore store = load_split(data_dir, "train");
  const TrainingData data = make_training_data(store, cfg.terminal_reward);
  const fs::path out = a.out;
  fs::create_directories(out);

  json info;
  info["format"] = kModelInfoFormat;
  info["kind"] = a.model;
  info["family"] = baseline ? "baseline" : "hierarchy";
  info["no_communication"] = cfg.no_communication;
  info["no_state_repr"] = cfg.no_state_repr;
  info["train_patients"] = store.episodes.size();
  info["train_transitions"] = data.records.size();
  if (baseline) {
    const BaselineModel m = train_baseline(*baseline, data, cfg);
    save_baseline(out / "model", m);
    std::ofstream curves(out / "loss_curves.csv");
    curves << "agent,epoch,loss\n";
    curves.precision(10);
    for (std::size_t e = 0; e < m.loss_curve.size(); ++e) curves << a.model << ',' << e << ',' << m.loss_curve[e] << '\n';
    info["heads"] = m.heads.size();
    info["flat_action_order"] = "canonical flat index (S1 major, renal option minor)";
  } else {
    const AgentSet set = train_hierarchy(data, cfg);
    save_agent_set(out / "model", set);
    write_loss_curves(out / "loss_curves.csv", set);
    json skipped = json::array();
    for (AgentId id : all_agents()) {
      if (set.status[static_cast<std::size_t>(id)].skipped) skipped.push_back(agent_name(id));
    }
    info["skipped_agents"] = skipped;
  }
  write_json(out / "model_info.json", info);
  std::printf("trained %s on %zu transitions -> %s\n", a.model.c_str(), data.records.size(), out.string().c_str());

  RunManifest m = manifest_for("train", g);
  m.seed = cfg.seed;
  m.config_hash = cli::hex64(config_hash(cfg));
  m.inputs = {(data_dir / "train.json").string()};
  if (!a.config.empty()) m.inputs.push_back(a.config);
  m.outputs = {out.string()};
  m.flags = {{"model", a.model}, {"no_communication", cfg.no_communication}, {"no_state_repr", cfg.no_state_repr}};
  m.duration_s = clock.seconds();
  m.write(out);
  return 0;
}

// Loaded models -------------------------------------------------------------------

struct LoadedModel {
  std::string kind;
  std::optional<AgentSet> hierarchy;
  std::optional<BaselineModel> baseline;

  std::unique_ptr<OfflinePolicy> offline() const {
    if (hierarchy) return std::make_unique<HierarchyOfflinePolicy>(*hierarchy);
    return std::make_unique<BaselineOfflinePolicy>(*baseline);
  }
  std::unique_ptr<Policy> online() const {
    if (hierarchy) return std::make_unique<HierarchyPolicy>(*hierarchy, kind);
    return std::make_unique<BaselinePolicy>(*baseline);
  }
  std::size_t d() const { return hierarchy ? hierarchy->d : baseline->d; }
  std::uint64_t seed() const { return hierarchy ? hierarchy->config.seed : baseline->config.seed; }
};

LoadedModel load_model(const fs::path& dir) {
  if (!fs::exists(dir / "model_info.json")) throw UsageError("no trained model in " + dir.string());
  const json info = read_json(dir / "model_info.json");
  if (info.value("format", "") != kModelInfoFormat) throw UsageError("unsupported model info in " + dir.string());
  LoadedModel m;
  m.kind = info.value("kind", "");
  if (info.value("family", "") == "baseline") {
    m.baseline = load_baseline(dir / "model");
  } else {
    m.hierarchy = load_agent_set(dir / "model");
  }
  return m;
}

// evaluate -------------------------------------------------------------------------

struct EvaluateArgs {
  std::string model;
  std::string data;
  std::string out;
  std::vector<std::string> splits;
  bool true_value = false;
  std::size_t rollouts = 2000;
  std::size_t bins = 20;
  std::size_t resamples = 1000;
};

int cmd_evaluate(const EvaluateArgs& a, const Globals& g) {
  const cli::Stopwatch clock;
  const LoadedModel model = load_model(a.model);
  const fs::path data_dir = a.data;
  std::vector<std::string> splits = a.splits;
  if (splits.empty()) {
    for (const char* s : {"test", "external"}) {
      if (has_store(data_dir, s)) splits.push_back(s);
    }
    if (splits.empty()) throw UsageError("no test or external store in " + data_dir.string());
  }
  const EpisodeStore train = load_split(data_dir, "train");
  if (train.schema.size() != model.d()) throw UsageError("model and data disagree on the feature width");
  const std::uint64_t seed = g.seed.value_or(5);
  BehaviorFitConfig bcfg;
  bcfg.seed = seed ^ 0xb5ull;
  const BehaviorModel behavior = fit_behavior(train, bcfg);

  std::optional<NormalizationConstants> constants;
  if (a.true_value) constants = load_normalization(data_dir / "normalization.json", train.schema);

  const auto run = [&](const std::string& split) {
    const EpisodeStore store = load_split(data_dir, split);
    if (!(store.schema == train.schema)) throw UsageError("schema of '" + split + "' differs from train");
    const auto policy = model.offline();
    EvaluationContext ctx;
    ctx.fitted = &behavior;
    ctx.bins = a.bins;
    ctx.resamples = a.resamples;
    ctx.seed = seed;
    DatasetReport row = evaluate_dataset(*policy, store, ctx);
    if (a.true_value) {
      const fs::path dyn = data_dir / (split == "external" ? "external_dynamics.json" : "dynamics.json");
      if (!fs::exists(dyn)) throw UsageError("--true-value needs " + dyn.string());
      const DynamicsConfig cfg = dynamics_from_json_file(dyn);
      const auto live = model.online();
      const PolicyValue v = true_policy_value(*live, cfg, store.schema, *constants, a.rollouts, seed);
      row.true_value = v.mean;
      row.true_mortality = v.mortality;
    }
    return row;
  };

  std::vector<DatasetReport> rows;
  if (g.threads > 1 && splits.size() > 1) {
    std::vector<std::future<DatasetReport>> jobs;
    for (const auto& s : splits) jobs.push_back(std::async(std::launch::async, run, s));
    for (auto& j : jobs) rows.push_back(j.get());
  } else {
    for (const auto& s : splits) rows.push_back(run(s));
  }

  const fs::path out = a.out;
  fs::create_directories(out);
  write_report(out, fs::path(a.model).filename().string(), model.kind, rows);

  std::printf("%-9s %10s %12s %16s %10s\n", "split", "V_cwpdis", "clinician_V", "est_mortality", "true_V");
  for (const auto& r : rows) {
    std::printf("%-9s %10.3f %12.3f %9.1f%% ±%4.1f %10s\n", r.split.c_str(), r.v_cwpdis, r.clinician_value,
                100.0 * r.estimated_mortality.mortality, 100.0 * r.estimated_mortality.stderr_,
                r.true_value ? std::to_string(*r.true_value).c_str() : "-");
  }

  RunManifest m = manifest_for("evaluate", g);
  m.seed = seed;
  const std::string settings = json{{"splits", splits}, {"true_value", a.true_value}, {"rollouts", a.rollouts},
                                    {"bins", a.bins},     {"resamples", a.resamples}, {"seed", seed}}
                                   .dump();
  m.config_hash = text_hash(settings);
  m.inputs = {a.model, data_dir.string()};
  m.outputs = {out.string()};
  m.flags = {{"model_kind", model.kind}, {"true_value", a.true_value}, {"rollouts", a.rollouts}};
  m.duration_s = clock.seconds();
  m.write(out);
  return 0;
}

// recommend ------------------------------------------------------------------------

struct RecommendArgs {
  std::string model;
  std::vector<std::string> rows;
  std::string state_file;
  std::string out;
};

Vector parse_row(const std::string& line, std::size_t d) {
  Vector v;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    if (b == std::string::npos) throw UsageError("empty cell in state row");
    const std::string t = cell.substr(b, e - b + 1);
    char* end = nullptr;
    const double x = std::strtod(t.c_str(), &end);
    if (end != t.c_str() + t.size() || !std::isfinite(x)) throw UsageError("non-numeric cell '" + t + "' in state row");
    v.push_back(x);
  }
  if (v.size() != d) {
    throw UsageError("state row has " + std::to_string(v.size()) + " values, the model expects " + std::to_string(d));
  }
  return v;
}

/// Rows are oldest first; the last is x_t. A header naming the schema features may lead the file.
std::vector<Vector> read_state_rows(const RecommendArgs& a, const FeatureSchema* schema, std::size_t d) {
  std::vector<std::string> lines = a.rows;
  if (!a.state_file.empty()) {
    std::stringstream ss(read_text(a.state_file));
    std::string line;
    bool first = true;
    while (std::getline(ss, line)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      if (first && schema && line.find_first_of("abcdefghijklmnopqrstuvwxyz_") != std::string::npos) {
        first = false;
        std::vector<std::string> names;
        std::stringstream hs(line);
        std::string cell;
        while (std::getline(hs, cell, ',')) names.push_back(cell.substr(0, cell.find_last_not_of(" \r") + 1));
        if (names.size() != schema->size()) throw UsageError("state header does not match the feature schema");
        for (std::size_t i = 0; i < names.size(); ++i) {
          if (names[i] != (*schema)[i].name) throw UsageError("state header column '" + names[i] + "' out of order");
        }
        continue;
      }
      first = false;
      lines.push_back(line);
    }
  }
  if (lines.empty()) throw UsageError("no state row given (use --row or --state)");
  if (lines.size() > kContextSteps + 1) lines.erase(lines.begin(), lines.end() - (kContextSteps + 1));
  std::vector<Vector> out;
  for (const auto& l : lines) out.push_back(parse_row(l, d));
  return out;
}

json levels_json(const JointAction& a) {
  json j;
  for (std::size_t t = 0; t < kTreatmentCount; ++t) j[treatment_name(static_cast<Treatment>(t))] = a.levels[t];
  return j;
}

int cmd_recommend(const RecommendArgs& a, const Globals& g) {
  const cli::Stopwatch clock;
  const LoadedModel model = load_model(a.model);
  const FeatureSchema schema = FeatureSchema::synthetic();
  const FeatureSchema* named = schema.size() == model.d() ? &schema : nullptr;
  const std::vector<Vector> rows = read_state_rows(a, named, model.d());

  WindowHistory history;
  const XWindow* w = nullptr;
  for (const auto& r : rows) w = &history.push(r);

  json j;
  j["format"] = kRecommendationFormat;
  j["model_kind"] = model.kind;
  j["history_rows"] = rows.size();
  json trace = json::array();
  JointAction action;
  double value = 0.0;
  if (model.hierarchy) {
    const AgentSet& set = *model.hierarchy;
    const Recommendation rec = recommend(set, bundle_for(set, *w));
    action = rec.action;
    const NodeTrace& root = rec.trace.front();
    value = root.q[root.choice];
    j["root_q"] = root.q;
    for (const auto& n : rec.trace) {
      trace.push_back({{"agent", agent_name(n.agent)},
                       {"options", agent_options(n.agent)},
                       {"q", n.q},
                       {"valid", n.valid},
                       {"choice", n.choice}});
    }
    j["agent_evaluations"] = rec.evaluations;
  } else {
    const BaselineModel& m = *model.baseline;
    const BaselineDecision dec = baseline_decide(m, m.state(*w));
    action = dec.action;
    value = dec.value;
    for (std::size_t h = 0; h < m.heads.size(); ++h) {
      std::vector<std::string> options;
      for (std::size_t c = 0; c < dec.q[h].size(); ++c) options.push_back(std::to_string(c));
      trace.push_back({{"agent", std::string(baseline_name(m.kind)) + "/" + axis_name(m.heads[h].axis)},
                       {"options", options},
                       {"q", dec.q[h]},
                       {"valid", m.heads[h].valid},
                       {"choice", dec.choice[h]}});
    }
  }
  j["action"] = levels_json(action);
  j["action_string"] = to_string(action);
  j["flat_index"] = flat_index(action);
  j["root_option"] = root_option_name(decompose(action).root);
  j["value"] = value;
  j["trace"] = trace;
  j["advisory"] = true;

  const std::string text = j.dump(2);
  std::cout << text << "\n";
  if (!a.out.empty()) {
    const fs::path out = a.out;
    fs::create_directories(out);
    write_json(out / "recommendation.json", j);
    RunManifest m = manifest_for("recommend", g);
    m.seed = model.seed();
    m.config_hash = text_hash(text);
    m.inputs = {a.model};
    if (!a.state_file.empty()) m.inputs.push_back(a.state_file);
    m.outputs = {out.string()};
    m.flags = {{"model_kind", model.kind}};
    m.duration_s = clock.seconds();
    m.write(out);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical multi-agent offline RL for multi-organ treatment recommendation"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  for (int i = 0; i < argc; ++i) g.argv.push_back(argv[i]);
  std::uint64_t seed = 0;
  app.add_flag("--deterministic", g.deterministic, "Single-threaded, seeded execution");
  auto* seed_opt = app.add_option("--seed", seed, "Seed overriding the config files");
  app.add_option("--threads", g.threads, "Worker threads (forced to 1 with --deterministic)")->check(CLI::PositiveNumber);

  GenerateArgs ga;
  ga.out = default_data_dir();
  auto* gen = app.add_subcommand("generate", "Simulate train/test/external cohorts");
  gen->add_option("--config", ga.config, "Dynamics config JSON")->required();
  gen->add_option("--out", ga.out, "Output directory (default $HMARL_DATA_DIR or ./data)");
  gen->add_option("--train", ga.train, "Train patients");
  gen->add_option("--test", ga.test, "Test patients");
  gen->add_option("--external", ga.external, "External-cohort patients");

  TrainArgs ta;
  ta.data = default_data_dir();
  auto* tr = app.add_subcommand("train", "Train the hierarchy, an ablation or a baseline");
  tr->add_option("--model", ta.model, "One of: " + join(model_kinds(), ", "))->required();
  tr->add_option("--data", ta.data, "Data directory (default $HMARL_DATA_DIR or ./data)");
  tr->add_option("--out", ta.out, "Model directory")->required();
  tr->add_option("--config", ta.config, "TrainConfig JSON");

  EvaluateArgs ea;
  ea.data = default_data_dir();
  auto* ev = app.add_subcommand("evaluate", "Off-policy evaluation report");
  ev->add_option("--model", ea.model, "Model directory")->required();
  ev->add_option("--data", ea.data, "Data directory (default $HMARL_DATA_DIR or ./data)");
  ev->add_option("--out", ea.out, "Report directory")->required();
  ev->add_option("--splits", ea.splits, "Splits to evaluate (default: test and external when present)")
      ->delimiter(',');
  ev->add_flag("--true-value", ea.true_value, "Add the simulator's Monte Carlo value");
  ev->add_option("--rollouts", ea.rollouts, "Monte Carlo rollouts for --true-value")->check(CLI::PositiveNumber);
  ev->add_option("--bins", ea.bins, "Return bins for the mortality curves")->check(CLI::PositiveNumber);
  ev->add_option("--resamples", ea.resamples, "Bootstrap resamples")->check(CLI::PositiveNumber);

  RecommendArgs ra;
  auto* rc = app.add_subcommand("recommend", "Advisory recommendation for one state");
  rc->add_option("--model", ra.model, "Model directory")->required();
  rc->add_option("--row", ra.rows, "Normalized feature row, comma separated; repeat for history (oldest first)");
  rc->add_option("--state", ra.state_file, "CSV of normalized rows, oldest first, optional header");
  rc->add_option("--out", ra.out, "Also write recommendation.json and a run manifest here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc_code = app.exit(e);
    return rc_code == 0 ? 0 : kExitUsage;
  }
  if (*seed_opt) g.seed = seed;
  if (g.deterministic) g.threads = 1;

  try {
    if (*gen) return cmd_generate(ga, g);
    if (*tr) return cmd_train(ta, g);
    if (*ev) return cmd_evaluate(ea, g);
    if (*rc) return cmd_recommend(ra, g);
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::invalid_argument& e) {  // DataError, SchemaError, DimensionError, ConstraintError
    std::fprintf(stderr, "input error: %s\n", e.what());
    return kExitUsage;
  } catch (const AnalysisError& e) {
    std::fprintf(stderr, "input error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 1;
  }
  return kExitUsage;
}
