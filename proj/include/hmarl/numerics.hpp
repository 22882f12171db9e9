#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hmarl {

using Vector = std::vector<double>;

/// Raised when input widths do not match a network's declared widths.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a caller violates an API precondition (stale tape, topology mismatch).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised on non-finite values during training.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Activation { relu, tanh, identity, abs };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& name);

struct LayerShape {
  std::size_t in = 0;
  std::size_t out = 0;
  Activation act = Activation::identity;
};

/// Dense layer. Weights are row-major with shape out x in.
struct Layer {
  std::size_t in = 0;
  std::size_t out = 0;
  Vector weights;
  Vector bias;
  Activation act = Activation::identity;

  double& w(std::size_t row, std::size_t col) { return weights[row * in + col]; }
  double w(std::size_t row, std::size_t col) const { return weights[row * in + col]; }
};

/// Fixed-topology feedforward network.
class Approximator {
 public:
  Approximator() = default;
  /// Weights uniform in +-1/sqrt(fan_in), biases zero.
  Approximator(std::span<const LayerShape> shapes, std::uint64_t seed);
  explicit Approximator(std::vector<Layer> layers);

  std::size_t input_width() const;
  std::size_t output_width() const;
  std::size_t parameter_count() const;
  bool empty() const { return layers_.empty(); }

  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& mutable_layers() {
    ++generation_;
    return layers_;
  }
  std::vector<LayerShape> shapes() const;

  /// Incremented whenever parameters are mutated; tapes record it.
  std::uint64_t generation() const { return generation_; }
  void touch() { ++generation_; }

  /// Flat parameter view, layer order, weights before biases.
  Vector flat_parameters() const;
  void set_flat_parameters(std::span<const double> flat);

  /// FNV-1a over the raw parameter bytes.
  std::uint64_t parameter_hash() const;

 private:
  std::vector<Layer> layers_;
  std::uint64_t generation_ = 0;
};

/// Per-parameter gradient accumulators shaped like an Approximator.
struct Gradients {
  std::vector<Vector> weights;
  std::vector<Vector> bias;

  Gradients() = default;
  explicit Gradients(const Approximator& net);
  void zero();
  void scale(double factor);
  void add(const Gradients& other);
  bool all_zero() const;
  double squared_norm() const;
};

/// Activations cached by one recorded forward pass plus gradient accumulators.
struct GradientTape {
  const Approximator* owner = nullptr;
  std::uint64_t generation = 0;
  std::vector<Vector> inputs;       // input to each layer
  std::vector<Vector> pre;          // pre-activation of each layer
  std::vector<Vector> post;         // post-activation of each layer
  Gradients grads;
  bool recorded = false;

  GradientTape() = default;
  explicit GradientTape(const Approximator& net) : owner(&net), generation(net.generation()), grads(net) {}
};

Vector forward(const Approximator& net, std::span<const double> x);

/// Forward pass that caches activations in `tape`. Gradient accumulators
/// in the tape are preserved so several samples may be accumulated.
Vector forward(const Approximator& net, std::span<const double> x, GradientTape& tape);

/// Accumulates dLoss/dtheta into tape.grads and returns dLoss/dx.
Vector backward(const Approximator& net, GradientTape& tape, std::span<const double> loss_grad);

enum class OptimizerKind { sgd, adam };

std::string to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(const std::string& name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd;
  double lr = 1e-3;
  double momentum = 0.0;       // sgd only (heavy ball)
  double max_grad_norm = 0.0;  // 0 disables clipping; applied before either update rule
  double beta1 = 0.9;          // adam moment decay rates
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// SGD (optionally with heavy-ball momentum) or Adam with bias correction. Moment
/// buffers are created on the first step and tied to that network's topology.
class Optimizer {
 public:
  Optimizer() = default;
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}
  void step(Approximator& net, const Gradients& grads);
  const OptimizerConfig& config() const { return cfg_; }
  std::size_t steps() const { return steps_; }

 private:
  OptimizerConfig cfg_;
  Gradients first_;
  Gradients second_;
  std::size_t steps_ = 0;
};

/// theta <- theta - lr * grad. Throws NumericError naming the first non-finite gradient.
void sgd_step(Approximator& net, const Gradients& grads, double lr);
void sgd_step(Approximator& net, const GradientTape& tape, double lr);

/// Hard copy of parameters. Topologies must be identical.
void soft_copy(const Approximator& src, Approximator& dst);

bool same_topology(const Approximator& a, const Approximator& b);

/// Central-difference gradient of a scalar function of a flat parameter vector.
Vector finite_difference_gradient(const std::function<double(std::span<const double>)>& fn,
                                  std::span<const double> at, double step = 1e-5);

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
double max_relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-6);

/// Flat view of a Gradients object matching Approximator::flat_parameters order.
Vector flatten(const Gradients& g);

// Persistence: "hmarl-weights-v1" -- <stem>.json manifest and <stem>.bin payload of
// little-endian float64, concatenated in layer order, weights before biases.
inline constexpr const char* kWeightsFormat = "hmarl-weights-v1";

struct NamedMatrix {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  Vector values;
};

void save_weights(const std::filesystem::path& stem, const Approximator& net, const std::string& tag = "");
Approximator load_weights(const std::filesystem::path& stem);

void save_matrices(const std::filesystem::path& stem, const std::vector<NamedMatrix>& mats,
                   const std::string& tag = "");
std::vector<NamedMatrix> load_matrices(const std::filesystem::path& stem);

void write_f64_payload(const std::filesystem::path& path, std::span<const double> values);
Vector read_f64_payload(const std::filesystem::path& path);

std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t seed = 14695981039346656037ull);
std::uint64_t hash_doubles(std::span<const double> values, std::uint64_t seed = 14695981039346656037ull);

}  // namespace hmarl
