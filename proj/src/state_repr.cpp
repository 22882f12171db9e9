#include "hmarl/state_repr.hpp"

#include <cmath>
#include <random>

namespace hmarl {

namespace {
constexpr std::array<double, kContextSteps + 1> kDecay{1.0, 0.36787944117144233, 0.1353352832366127,
                                                      0.049787068367863944};
}

const char* level_name(Level l) {
  switch (l) {
    case Level::Rt: return "Rt";
    case Level::Neu: return "Neu";
    case Level::Car: return "Car";
    case Level::Ren: return "Ren";
  }
  return "?";
}

Level level_from_string(const std::string& s) {
  if (s == "Rt") return Level::Rt;
  if (s == "Neu") return Level::Neu;
  if (s == "Car") return Level::Car;
  if (s == "Ren") return Level::Ren;
  throw ContractError("unknown embedding level " + s);
}

EmbeddingTable random_embedding(Level level, std::size_t d, std::size_t k, std::uint64_t seed, double scale) {
  if (d == 0 || k == 0) throw DimensionError("embedding table needs d, k >= 1");
  if (scale <= 0.0) scale = 1.0 / std::sqrt(static_cast<double>(d));
  EmbeddingTable t(level, d, k);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& v : t.e) v = u(rng);
  return t;
}

EmbeddingTable copy_as(const EmbeddingTable& src, Level level) {
  EmbeddingTable t = src;
  t.level = level;
  return t;
}

Matrix embed(std::span<const double> x, const EmbeddingTable& table) {
  if (x.size() != table.d) throw DimensionError("embed: feature vector length does not match table rows");
  Matrix F(table.d, table.k);
  for (std::size_t i = 0; i < table.d; ++i)
    for (std::size_t c = 0; c < table.k; ++c) F.at(i, c) = x[i] * table.at(i, c);
  return F;
}

Matrix interactions(const Matrix& F) {
  const std::size_t d = F.rows;
  const std::size_t k = F.cols;
  Matrix G(k, pair_count(d));
  std::size_t col = 0;
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i; j < d; ++j, ++col) {
      for (std::size_t c = 0; c < k; ++c) G.at(c, col) = F.at(i, c) * F.at(j, c);
    }
  }
  return G;
}

Vector observe(const Matrix& F, const Matrix& G) {
  if (G.rows != F.cols || G.cols != pair_count(F.rows)) throw DimensionError("observe: F and G shapes disagree");
  Vector o(F.cols, 0.0);
  for (std::size_t i = 0; i < F.rows; ++i)
    for (std::size_t c = 0; c < F.cols; ++c) o[c] += F.at(i, c);
  for (std::size_t c = 0; c < G.rows; ++c)
    for (std::size_t p = 0; p < G.cols; ++p) o[c] += G.at(c, p);
  return o;
}

Vector observe_direct(std::span<const double> x, const EmbeddingTable& table) {
  if (x.size() != table.d) throw DimensionError("observe: feature vector length does not match table rows");
  Vector o(table.k, 0.0);
  for (std::size_t c = 0; c < table.k; ++c) {
    double s = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < table.d; ++i) {
      const double f = x[i] * table.at(i, c);
      s += f;
      sq += f * f;
    }
    o[c] = s + 0.5 * (s * s + sq);
  }
  return o;
}

Vector temporal_context(std::span<const Vector> history) {
  if (history.empty()) return {};
  const std::size_t k = history.back().size();
  Vector c(k, 0.0);
  const std::size_t n = std::min(history.size(), kContextSteps);
  for (std::size_t m = 1; m <= n; ++m) {
    const Vector& o = history[history.size() - m];
    if (o.size() != k) throw DimensionError("temporal_context: history widths differ");
    for (std::size_t j = 0; j < k; ++j) c[j] += kDecay[m] * o[j];
  }
  return c;
}

Vector encode_window(const XWindow& w, const EmbeddingTable& table) {
  if (w[0] == nullptr) throw ContractError("encode_window needs the current feature vector");
  const std::size_t k = table.k;
  Vector s(2 * k, 0.0);
  const Vector o = observe_direct(*w[0], table);
  std::copy(o.begin(), o.end(), s.begin());
  for (std::size_t m = 1; m <= kContextSteps; ++m) {
    if (w[m] == nullptr) continue;
    const Vector om = observe_direct(*w[m], table);
    for (std::size_t j = 0; j < k; ++j) s[k + j] += kDecay[m] * om[j];
  }
  return s;
}

void encode_window_backward(const XWindow& w, const EmbeddingTable& table, std::span<const double> grad_s,
                            Vector& grad_e) {
  const std::size_t d = table.d;
  const std::size_t k = table.k;
  if (grad_s.size() != 2 * k) throw DimensionError("encode_window_backward: gradient width mismatch");
  if (grad_e.size() != d * k) grad_e.assign(d * k, 0.0);
  for (std::size_t m = 0; m <= kContextSteps; ++m) {
    if (w[m] == nullptr) continue;
    const Vector& x = *w[m];
    if (x.size() != d) throw DimensionError("encode_window_backward: feature width mismatch");
    for (std::size_t c = 0; c < k; ++c) {
      const double g = m == 0 ? grad_s[c] : kDecay[m] * grad_s[k + c];
      if (g == 0.0) continue;
      double s = 0.0;
      for (std::size_t i = 0; i < d; ++i) s += x[i] * table.at(i, c);
      // do_c/df_ic = 1 + S_c + f_ic, df_ic/dE_ic = x_i
      for (std::size_t i = 0; i < d; ++i) {
        const double f = x[i] * table.at(i, c);
        grad_e[i * k + c] += g * x[i] * (1.0 + s + f);
      }
    }
  }
}

Vector unified_state(std::span<const double> x, std::span<const Vector> o_history, const EmbeddingTable& table) {
  const Matrix F = embed(x, table);
  const Vector o = observe(F, interactions(F));
  Vector c = o_history.empty() ? Vector(table.k, 0.0) : temporal_context(o_history);
  if (c.size() != table.k) throw DimensionError("unified_state: history width does not match k");
  Vector s = o;
  s.insert(s.end(), c.begin(), c.end());
  return s;
}

const Vector& StateBundle::organ(Level l) const {
  switch (l) {
    case Level::Rt: return rt;
    case Level::Neu: return neu;
    case Level::Car: return car;
    case Level::Ren: return ren;
  }
  return rt;
}

const EmbeddingTable& EmbeddingSet::at(Level l) const {
  switch (l) {
    case Level::Rt: return rt;
    case Level::Neu: return neu;
    case Level::Car: return car;
    case Level::Ren: return ren;
  }
  return rt;
}

EmbeddingTable& EmbeddingSet::at(Level l) {
  return const_cast<EmbeddingTable&>(static_cast<const EmbeddingSet&>(*this).at(l));
}

StateBundle targeted_states(const XWindow& w, const EmbeddingSet& tables) {
  for (Level l : {Level::Neu, Level::Car, Level::Ren}) {
    if (tables.at(l).e.empty()) throw ContractError(std::string("missing embedding table for ") + level_name(l));
  }
  StateBundle b;
  b.neu = encode_window(w, tables.neu);
  b.car = encode_window(w, tables.car);
  b.ren = encode_window(w, tables.ren);
  b.omix = b.neu;
  b.omix.insert(b.omix.end(), b.car.begin(), b.car.end());
  b.omix.insert(b.omix.end(), b.ren.begin(), b.ren.end());
  return b;
}

StateBundle build_state_bundle(const XWindow& w, const EmbeddingSet& tables, bool raw_features) {
  if (w[0] == nullptr) throw ContractError("state bundle needs the current feature vector");
  if (raw_features) {
    StateBundle b;
    b.rt = b.neu = b.car = b.ren = b.omix = *w[0];
    return b;
  }
  StateBundle b = targeted_states(w, tables);
  b.rt = encode_window(w, tables.rt);
  return b;
}

StateWidths state_widths(std::size_t d, std::size_t k, bool raw_features) {
  if (raw_features) return {d, d};
  return {2 * k, 6 * k};
}

void save_embeddings(const std::filesystem::path& stem, const EmbeddingSet& set) {
  std::vector<NamedMatrix> mats;
  for (Level l : {Level::Rt, Level::Neu, Level::Car, Level::Ren}) {
    const auto& t = set.at(l);
    mats.push_back({level_name(l), t.d, t.k, t.e});
  }
  save_matrices(stem, mats, "embeddings");
}

EmbeddingSet load_embeddings(const std::filesystem::path& stem) {
  EmbeddingSet set;
  for (auto& m : load_matrices(stem)) {
    const Level l = level_from_string(m.name);
    auto& t = set.at(l);
    t = EmbeddingTable(l, m.rows, m.cols);
    t.e = std::move(m.values);
  }
  return set;
}

}  // namespace hmarl
