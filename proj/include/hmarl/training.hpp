#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "hmarl/agents.hpp"
#include "hmarl/features.hpp"
#include "hmarl/simulator.hpp"
#include "hmarl/state_repr.hpp"

namespace hmarl {

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::adam;  // networks; embeddings always use momentum SGD
  double lr = 3e-4;
  double embedding_lr = 1e-4;  // step size for the embedding tables
  double momentum = 0.9;
  double max_grad_norm = 10.0;
  double gamma = 0.99;
  std::size_t batch = 128;
  std::size_t epochs = 8;          // phase 1, per agent
  std::size_t phase2_epochs = 12;  // root retraining
  std::size_t target_sync = 200;   // updates between hard target copies
  std::uint64_t seed = 7;
  NetworkConfig net;
  std::size_t mixer_hidden = 32;
  std::size_t k = kDefaultEmbeddingWidth;
  double terminal_reward = kDefaultTerminalReward;
  bool no_communication = false;
  bool no_state_repr = false;
  std::size_t min_agent_samples = 32;  // smaller subsets skip the agent
  std::size_t min_option_samples = 5;  // rarer options are masked at selection
  double divergence_limit = 1e6;
};

std::string train_config_to_json(const TrainConfig& c);
OptimizerConfig network_optimizer(const TrainConfig& c);
TrainConfig train_config_from_json(const std::string& text);
std::uint64_t config_hash(const TrainConfig& c);

/// Raised when an agent's training loss exceeds the divergence limit.
class DivergenceError : public NumericError {
 public:
  DivergenceError(AgentId id, double loss);
  AgentId agent;
};

struct TransitionRecord {
  std::size_t episode = 0;
  std::size_t step = 0;
  XWindow w{};
  XWindow w_next{};  // all null for terminal transitions
  JointAction action;
  HierarchyPath path;
  double reward = 0.0;
  bool terminal = false;
  double behavior_prob = 0.0;
};

/// Window ending at `step` (x_t first, earlier steps after, null before the episode start).
XWindow window_at(const Episode& e, std::size_t step);

/// Reward of the transition out of frame `step`, recomputed from the SOFA and lactate features.
double transition_reward(const Episode& e, std::size_t step, const FeatureSchema& schema, double terminal_reward);

struct TrainingData {
  const EpisodeStore* store = nullptr;
  std::vector<TransitionRecord> records;
};

/// The store must outlive the returned data (records point into its frames).
TrainingData make_training_data(const EpisodeStore& store, double terminal_reward);

/// Training subset per agent. OMix and its sub-agents share one subset.
struct Routing {
  std::array<std::vector<std::size_t>, kAgentCount> samples;
  std::size_t size(AgentId id) const { return samples[static_cast<std::size_t>(id)].size(); }
};
Routing route_samples(const TrainingData& data);

/// Option index an agent would be trained on for a logged path (nullopt if not routed).
std::optional<std::size_t> logged_option(AgentId id, const HierarchyPath& path);

struct AgentStatus {
  bool trained = false;
  bool skipped = false;
  std::size_t samples = 0;
  std::vector<double> loss_curve;  // mean loss per epoch
  std::string note;
};

struct AgentSet {
  TrainConfig config;
  std::size_t d = 0;
  EmbeddingSet embeddings;
  std::map<AgentId, QAgent> agents;
  MixingNetwork mixer;
  MixingNetwork mixer_target;
  std::array<AgentStatus, kAgentCount> status;
  std::array<std::vector<std::uint8_t>, kAgentCount> valid;  // per-option selection mask

  StateWidths widths() const { return state_widths(d, config.k, config.no_state_repr); }
  bool available(AgentId id) const;
  const QAgent& agent(AgentId id) const;
  QAgent& agent(AgentId id);
  std::span<const std::uint8_t> mask(AgentId id) const { return valid[static_cast<std::size_t>(id)]; }
  /// Hash over every network, embedding table and mask; used for freeze and determinism checks.
  std::uint64_t hash() const;
  std::uint64_t agent_hash(AgentId id) const;
};

/// Untrained set with every agent initialized from `cfg.seed`.
AgentSet make_agent_set(std::size_t d, const TrainConfig& cfg);

StateBundle bundle_for(const AgentSet& set, const XWindow& w);

/// Greedy within-organ choices with the set's masks.
PairChoice greedy_pair(const AgentSet& set, Organ organ, const Vector& organ_state, std::size_t* evaluations = nullptr);
int greedy_renal(const AgentSet& set, const Vector& ren_state, std::size_t* evaluations = nullptr);
PeerOutputs single_organ_peers(const AgentSet& set, const StateBundle& b, std::size_t* evaluations = nullptr);

struct OMixDecision {
  std::array<Vector, kOrganCount> sub_q;
  std::vector<std::size_t> choice;  // neu pair index, car pair index, renal option
  double q_mixed = 0.0;
  JointAction action;
};

/// Factored argmax of the OMix sub-agents under the >= 2 active organs rule.
OMixDecision omix_decide(const AgentSet& set, const StateBundle& b, const PeerOutputs& peers);

struct NodeTrace {
  AgentId agent = AgentId::Rt;
  Vector q;
  std::vector<std::uint8_t> valid;
  std::size_t choice = 0;
};

struct Recommendation {
  JointAction action;
  HierarchyPath path;
  std::vector<NodeTrace> trace;
  std::size_t evaluations = 0;  // agent network evaluations (mixer excluded)
};

Recommendation recommend(const AgentSet& set, const StateBundle& b);

/// Rolling feature history for live decisions; the window points into it.
class WindowHistory {
 public:
  void reset() { xs_.clear(); }
  const XWindow& push(const Vector& x);

 private:
  std::vector<Vector> xs_;
  XWindow w_{};
};

/// Simulator policy backed by a trained hierarchy.
class HierarchyPolicy : public Policy {
 public:
  explicit HierarchyPolicy(const AgentSet& set, std::string name = "hierarchy") : set_(&set), name_(std::move(name)) {}
  void reset() override { history_.reset(); }
  JointAction act(const StepContext& ctx) override;
  std::string name() const override { return name_; }

 private:
  const AgentSet* set_;
  std::string name_;
  WindowHistory history_;
};

void train_phase1(const TrainingData& data, AgentSet& set);
void train_phase2(const TrainingData& data, AgentSet& set);
AgentSet train_hierarchy(const TrainingData& data, const TrainConfig& cfg);

inline constexpr const char* kHierarchyFormat = "hmarl-hierarchy-v1";

void save_agent_set(const std::filesystem::path& dir, const AgentSet& set);
AgentSet load_agent_set(const std::filesystem::path& dir);

/// Loss curves as CSV rows: agent,epoch,loss.
void write_loss_curves(const std::filesystem::path& path, const AgentSet& set);

}  // namespace hmarl
