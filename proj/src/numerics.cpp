#include "hmarl/numerics.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

namespace hmarl {

static_assert(std::endian::native == std::endian::little,
              "weight payloads are written as native little-endian float64");

std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::identity: return "identity";
    case Activation::abs: return "abs";
  }
  return "identity";
}

Activation activation_from_string(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  if (name == "identity") return Activation::identity;
  if (name == "abs") return Activation::abs;
  throw ContractError("unknown activation tag: " + name);
}

namespace {

double activate(Activation a, double v) {
  switch (a) {
    case Activation::relu: return v > 0.0 ? v : 0.0;
    case Activation::tanh: return std::tanh(v);
    case Activation::identity: return v;
    case Activation::abs: return std::fabs(v);
  }
  return v;
}

double activation_derivative(Activation a, double pre, double post) {
  switch (a) {
    case Activation::relu: return pre > 0.0 ? 1.0 : 0.0;
    case Activation::tanh: return 1.0 - post * post;
    case Activation::identity: return 1.0;
    case Activation::abs: return pre > 0.0 ? 1.0 : (pre < 0.0 ? -1.0 : 0.0);
  }
  return 1.0;
}

void check_width(const Approximator& net, std::size_t width) {
  if (net.empty()) throw ContractError("forward on an empty approximator");
  if (width != net.input_width()) {
    std::ostringstream os;
    os << "input width " << width << " does not match network input width " << net.input_width();
    throw DimensionError(os.str());
  }
}

void affine(const Layer& layer, std::span<const double> x, Vector& out) {
  out.assign(layer.bias.begin(), layer.bias.end());
  const double* w = layer.weights.data();
  for (std::size_t r = 0; r < layer.out; ++r) {
    const double* row = w + r * layer.in;
    double acc = 0.0;
    for (std::size_t c = 0; c < layer.in; ++c) acc += row[c] * x[c];
    out[r] += acc;
  }
}

}  // namespace

Approximator::Approximator(std::span<const LayerShape> shapes, std::uint64_t seed) {
  if (shapes.empty()) throw ContractError("approximator needs at least one layer");
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto& s = shapes[i];
    if (s.in == 0 || s.out == 0) throw DimensionError("layer widths must be positive");
    if (i > 0 && shapes[i - 1].out != s.in) {
      throw DimensionError("layer " + std::to_string(i) + " input width does not match previous output width");
    }
    Layer layer;
    layer.in = s.in;
    layer.out = s.out;
    layer.act = s.act;
    layer.weights.resize(s.in * s.out);
    layer.bias.assign(s.out, 0.0);
    const double bound = 1.0 / std::sqrt(static_cast<double>(s.in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& w : layer.weights) w = dist(rng);
    layers_.push_back(std::move(layer));
  }
}

Approximator::Approximator(std::vector<Layer> layers) : layers_(std::move(layers)) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    if (l.weights.size() != l.in * l.out || l.bias.size() != l.out) {
      throw DimensionError("layer " + std::to_string(i) + " parameter sizes disagree with its widths");
    }
    if (i > 0 && layers_[i - 1].out != l.in) {
      throw DimensionError("layer " + std::to_string(i) + " input width does not match previous output width");
    }
  }
}

std::size_t Approximator::input_width() const { return layers_.empty() ? 0 : layers_.front().in; }
std::size_t Approximator::output_width() const { return layers_.empty() ? 0 : layers_.back().out; }

std::size_t Approximator::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.weights.size() + l.bias.size();
  return n;
}

std::vector<LayerShape> Approximator::shapes() const {
  std::vector<LayerShape> out;
  for (const auto& l : layers_) out.push_back({l.in, l.out, l.act});
  return out;
}

Vector Approximator::flat_parameters() const {
  Vector flat;
  flat.reserve(parameter_count());
  for (const auto& l : layers_) {
    flat.insert(flat.end(), l.weights.begin(), l.weights.end());
    flat.insert(flat.end(), l.bias.begin(), l.bias.end());
  }
  return flat;
}

void Approximator::set_flat_parameters(std::span<const double> flat) {
  if (flat.size() != parameter_count()) throw DimensionError("flat parameter length mismatch");
  std::size_t pos = 0;
  for (auto& l : layers_) {
    std::copy_n(flat.begin() + pos, l.weights.size(), l.weights.begin());
    pos += l.weights.size();
    std::copy_n(flat.begin() + pos, l.bias.size(), l.bias.begin());
    pos += l.bias.size();
  }
  ++generation_;
}

std::uint64_t Approximator::parameter_hash() const {
  std::uint64_t h = 14695981039346656037ull;
  for (const auto& l : layers_) {
    h = hash_doubles(l.weights, h);
    h = hash_doubles(l.bias, h);
  }
  return h;
}

Gradients::Gradients(const Approximator& net) {
  for (const auto& l : net.layers()) {
    weights.emplace_back(l.weights.size(), 0.0);
    bias.emplace_back(l.bias.size(), 0.0);
  }
}

void Gradients::zero() {
  for (auto& w : weights) std::fill(w.begin(), w.end(), 0.0);
  for (auto& b : bias) std::fill(b.begin(), b.end(), 0.0);
}

void Gradients::scale(double factor) {
  for (auto& w : weights)
    for (auto& v : w) v *= factor;
  for (auto& b : bias)
    for (auto& v : b) v *= factor;
}

void Gradients::add(const Gradients& other) {
  if (other.weights.size() != weights.size()) throw ContractError("gradient shape mismatch");
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (other.weights[i].size() != weights[i].size()) throw ContractError("gradient shape mismatch");
    for (std::size_t j = 0; j < weights[i].size(); ++j) weights[i][j] += other.weights[i][j];
    for (std::size_t j = 0; j < bias[i].size(); ++j) bias[i][j] += other.bias[i][j];
  }
}

bool Gradients::all_zero() const {
  for (const auto& w : weights)
    for (double v : w)
      if (v != 0.0) return false;
  for (const auto& b : bias)
    for (double v : b)
      if (v != 0.0) return false;
  return true;
}

double Gradients::squared_norm() const {
  double s = 0.0;
  for (const auto& w : weights)
    for (double v : w) s += v * v;
  for (const auto& b : bias)
    for (double v : b) s += v * v;
  return s;
}

Vector forward(const Approximator& net, std::span<const double> x) {
  check_width(net, x.size());
  Vector cur(x.begin(), x.end());
  Vector next;
  for (const auto& layer : net.layers()) {
    affine(layer, cur, next);
    for (auto& v : next) v = activate(layer.act, v);
    cur.swap(next);
  }
  return cur;
}

Vector forward(const Approximator& net, std::span<const double> x, GradientTape& tape) {
  check_width(net, x.size());
  if (tape.owner != &net || tape.grads.weights.size() != net.layers().size()) {
    tape = GradientTape(net);
  }
  tape.generation = net.generation();
  const auto& layers = net.layers();
  tape.inputs.resize(layers.size());
  tape.pre.resize(layers.size());
  tape.post.resize(layers.size());
  Vector cur(x.begin(), x.end());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    tape.inputs[i] = cur;
    affine(layers[i], cur, tape.pre[i]);
    tape.post[i].resize(tape.pre[i].size());
    for (std::size_t j = 0; j < tape.pre[i].size(); ++j) tape.post[i][j] = activate(layers[i].act, tape.pre[i][j]);
    cur = tape.post[i];
  }
  tape.recorded = true;
  return cur;
}

Vector backward(const Approximator& net, GradientTape& tape, std::span<const double> loss_grad) {
  if (!tape.recorded || tape.owner != &net) throw ContractError("gradient tape was not recorded on this network");
  if (tape.generation != net.generation()) throw ContractError("stale gradient tape: network changed since forward");
  if (loss_grad.size() != net.output_width()) throw DimensionError("loss gradient width mismatch");
  const auto& layers = net.layers();
  Vector delta(loss_grad.begin(), loss_grad.end());
  for (std::size_t li = layers.size(); li-- > 0;) {
    const Layer& layer = layers[li];
    for (std::size_t r = 0; r < layer.out; ++r) {
      delta[r] *= activation_derivative(layer.act, tape.pre[li][r], tape.post[li][r]);
    }
    auto& gw = tape.grads.weights[li];
    auto& gb = tape.grads.bias[li];
    const Vector& input = tape.inputs[li];
    Vector upstream(layer.in, 0.0);
    for (std::size_t r = 0; r < layer.out; ++r) {
      const double d = delta[r];
      gb[r] += d;
      if (d == 0.0) continue;
      double* grow = gw.data() + r * layer.in;
      const double* wrow = layer.weights.data() + r * layer.in;
      for (std::size_t c = 0; c < layer.in; ++c) {
        grow[c] += d * input[c];
        upstream[c] += d * wrow[c];
      }
    }
    delta.swap(upstream);
  }
  return delta;
}

namespace {

void check_finite(const Gradients& grads) {
  for (std::size_t l = 0; l < grads.weights.size(); ++l) {
    for (std::size_t j = 0; j < grads.weights[l].size(); ++j) {
      if (!std::isfinite(grads.weights[l][j])) {
        throw NumericError("non-finite gradient at layer " + std::to_string(l) + " weight " + std::to_string(j));
      }
    }
    for (std::size_t j = 0; j < grads.bias[l].size(); ++j) {
      if (!std::isfinite(grads.bias[l][j])) {
        throw NumericError("non-finite gradient at layer " + std::to_string(l) + " bias " + std::to_string(j));
      }
    }
  }
}

}  // namespace

void sgd_step(Approximator& net, const Gradients& grads, double lr) {
  if (!(lr > 0.0)) throw ContractError("learning rate must be positive");
  if (grads.weights.size() != net.layers().size()) throw ContractError("gradient shape mismatch");
  check_finite(grads);
  auto& layers = net.mutable_layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (std::size_t j = 0; j < layers[l].weights.size(); ++j) layers[l].weights[j] -= lr * grads.weights[l][j];
    for (std::size_t j = 0; j < layers[l].bias.size(); ++j) layers[l].bias[j] -= lr * grads.bias[l][j];
  }
}

void sgd_step(Approximator& net, const GradientTape& tape, double lr) { sgd_step(net, tape.grads, lr); }

std::string to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

OptimizerKind optimizer_from_string(const std::string& name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adam") return OptimizerKind::adam;
  throw ContractError("unknown optimizer: " + name);
}

void Optimizer::step(Approximator& net, const Gradients& grads) {
  check_finite(grads);
  if (steps_ == 0) {
    first_ = Gradients(net);
    if (cfg_.kind == OptimizerKind::adam) second_ = Gradients(net);
  } else if (first_.weights.size() != net.layers().size()) {
    throw ContractError("optimizer reused on a different topology");
  }
  ++steps_;
  double factor = 1.0;
  if (cfg_.max_grad_norm > 0.0) {
    const double norm = std::sqrt(grads.squared_norm());
    if (norm > cfg_.max_grad_norm) factor = cfg_.max_grad_norm / norm;
  }

  if (cfg_.kind == OptimizerKind::adam) {
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
    Gradients direction = grads;
    auto update = [&](Vector& m, Vector& v, const Vector& g, Vector& out) {
      for (std::size_t j = 0; j < g.size(); ++j) {
        const double gj = factor * g[j];
        m[j] = b1 * m[j] + (1 - b1) * gj;
        v[j] = b2 * v[j] + (1 - b2) * gj * gj;
        out[j] = (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
      }
    };
    for (std::size_t l = 0; l < first_.weights.size(); ++l) {
      update(first_.weights[l], second_.weights[l], grads.weights[l], direction.weights[l]);
      update(first_.bias[l], second_.bias[l], grads.bias[l], direction.bias[l]);
    }
    sgd_step(net, direction, cfg_.lr);
    return;
  }

  if (cfg_.momentum <= 0.0) {
    if (factor == 1.0) {
      sgd_step(net, grads, cfg_.lr);
    } else {
      Gradients scaled = grads;
      scaled.scale(factor);
      sgd_step(net, scaled, cfg_.lr);
    }
    return;
  }
  for (std::size_t l = 0; l < first_.weights.size(); ++l) {
    for (std::size_t j = 0; j < first_.weights[l].size(); ++j)
      first_.weights[l][j] = cfg_.momentum * first_.weights[l][j] + factor * grads.weights[l][j];
    for (std::size_t j = 0; j < first_.bias[l].size(); ++j)
      first_.bias[l][j] = cfg_.momentum * first_.bias[l][j] + factor * grads.bias[l][j];
  }
  sgd_step(net, first_, cfg_.lr);
}

bool same_topology(const Approximator& a, const Approximator& b) {
  if (a.layers().size() != b.layers().size()) return false;
  for (std::size_t i = 0; i < a.layers().size(); ++i) {
    const auto& la = a.layers()[i];
    const auto& lb = b.layers()[i];
    if (la.in != lb.in || la.out != lb.out || la.act != lb.act) return false;
  }
  return true;
}

void soft_copy(const Approximator& src, Approximator& dst) {
  if (!same_topology(src, dst)) throw ContractError("soft_copy requires identical topologies");
  auto& out = dst.mutable_layers();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].weights = src.layers()[i].weights;
    out[i].bias = src.layers()[i].bias;
  }
}

Vector finite_difference_gradient(const std::function<double(std::span<const double>)>& fn,
                                  std::span<const double> at, double step) {
  Vector x(at.begin(), at.end());
  Vector g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double up = fn(x);
    x[i] = orig - step;
    const double down = fn(x);
    x[i] = orig;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

double max_relative_error(std::span<const double> a, std::span<const double> b, double floor) {
  if (a.size() != b.size()) throw DimensionError("relative error on vectors of different length");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::fabs(a[i]), std::fabs(b[i]), floor});
    worst = std::max(worst, std::fabs(a[i] - b[i]) / denom);
  }
  return worst;
}

Vector flatten(const Gradients& g) {
  Vector flat;
  for (std::size_t l = 0; l < g.weights.size(); ++l) {
    flat.insert(flat.end(), g.weights[l].begin(), g.weights[l].end());
    flat.insert(flat.end(), g.bias[l].begin(), g.bias[l].end());
  }
  return flat;
}

std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (auto b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t hash_doubles(std::span<const double> values, std::uint64_t seed) {
  return fnv1a(std::as_bytes(values), seed);
}

void write_f64_payload(const std::filesystem::path& path, std::span<const double> values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
}

Vector read_f64_payload(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  const auto size = static_cast<std::size_t>(in.tellg());
  if (size % sizeof(double) != 0) throw std::runtime_error("payload size is not a multiple of 8: " + path.string());
  Vector values(size / sizeof(double));
  in.seekg(0);
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(size));
  return values;
}

namespace {

std::filesystem::path with_ext(const std::filesystem::path& stem, const char* ext) {
  auto p = stem;
  p += ext;
  return p;
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return nlohmann::json::parse(in);
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

}  // namespace

void save_weights(const std::filesystem::path& stem, const Approximator& net, const std::string& tag) {
  nlohmann::json manifest;
  manifest["format"] = kWeightsFormat;
  manifest["kind"] = "approximator";
  manifest["tag"] = tag;
  manifest["payload"] = with_ext(stem, ".bin").filename().string();
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : net.layers()) {
    layers.push_back({{"in", l.in}, {"out", l.out}, {"activation", to_string(l.act)}});
  }
  manifest["layers"] = layers;
  manifest["parameter_count"] = net.parameter_count();
  write_json(with_ext(stem, ".json"), manifest);
  write_f64_payload(with_ext(stem, ".bin"), net.flat_parameters());
}

Approximator load_weights(const std::filesystem::path& stem) {
  const auto manifest = read_json(with_ext(stem, ".json"));
  if (manifest.value("format", "") != kWeightsFormat) throw ContractError("not an " + std::string(kWeightsFormat) + " manifest");
  std::vector<LayerShape> shapes;
  for (const auto& l : manifest.at("layers")) {
    shapes.push_back({l.at("in").get<std::size_t>(), l.at("out").get<std::size_t>(),
                      activation_from_string(l.at("activation").get<std::string>())});
  }
  Approximator net(shapes, 0);
  const auto payload = read_f64_payload(stem.parent_path() / manifest.at("payload").get<std::string>());
  net.set_flat_parameters(payload);
  return net;
}

void save_matrices(const std::filesystem::path& stem, const std::vector<NamedMatrix>& mats, const std::string& tag) {
  nlohmann::json manifest;
  manifest["format"] = kWeightsFormat;
  manifest["kind"] = "matrices";
  manifest["tag"] = tag;
  manifest["payload"] = with_ext(stem, ".bin").filename().string();
  nlohmann::json entries = nlohmann::json::array();
  Vector flat;
  for (const auto& m : mats) {
    if (m.values.size() != m.rows * m.cols) throw DimensionError("matrix " + m.name + " has inconsistent size");
    entries.push_back({{"name", m.name}, {"rows", m.rows}, {"cols", m.cols}});
    flat.insert(flat.end(), m.values.begin(), m.values.end());
  }
  manifest["matrices"] = entries;
  write_json(with_ext(stem, ".json"), manifest);
  write_f64_payload(with_ext(stem, ".bin"), flat);
}

std::vector<NamedMatrix> load_matrices(const std::filesystem::path& stem) {
  const auto manifest = read_json(with_ext(stem, ".json"));
  if (manifest.value("format", "") != kWeightsFormat) throw ContractError("not an " + std::string(kWeightsFormat) + " manifest");
  const auto payload = read_f64_payload(stem.parent_path() / manifest.at("payload").get<std::string>());
  std::vector<NamedMatrix> mats;
  std::size_t pos = 0;
  for (const auto& e : manifest.at("matrices")) {
    NamedMatrix m;
    m.name = e.at("name").get<std::string>();
    m.rows = e.at("rows").get<std::size_t>();
    m.cols = e.at("cols").get<std::size_t>();
    if (pos + m.rows * m.cols > payload.size()) throw DimensionError("payload too short for " + m.name);
    m.values.assign(payload.begin() + pos, payload.begin() + pos + m.rows * m.cols);
    pos += m.rows * m.cols;
    mats.push_back(std::move(m));
  }
  return mats;
}

}  // namespace hmarl
