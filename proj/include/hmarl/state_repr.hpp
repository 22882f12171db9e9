#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "hmarl/numerics.hpp"

namespace hmarl {

enum class Level : std::uint8_t { Rt = 0, Neu = 1, Car = 2, Ren = 3 };
const char* level_name(Level l);
Level level_from_string(const std::string& s);

inline constexpr std::size_t kDefaultEmbeddingWidth = 8;
inline constexpr std::size_t kContextSteps = 3;

/// Dense row-major matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  Vector v;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
  double& at(std::size_t r, std::size_t c) { return v[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
};

/// d x k latent table; row i is feature i's embedding.
struct EmbeddingTable {
  Level level = Level::Rt;
  std::size_t d = 0;
  std::size_t k = 0;
  Vector e;

  EmbeddingTable() = default;
  EmbeddingTable(Level lvl, std::size_t d, std::size_t k) : level(lvl), d(d), k(k), e(d * k, 0.0) {}
  double& at(std::size_t i, std::size_t c) { return e[i * k + c]; }
  double at(std::size_t i, std::size_t c) const { return e[i * k + c]; }
};

/// Uniform in +-scale, seeded. scale <= 0 selects 1/sqrt(d).
EmbeddingTable random_embedding(Level level, std::size_t d, std::size_t k, std::uint64_t seed, double scale = 0.0);

/// Copy of `src` relabelled as `level` (organ tables start from the trained root table).
EmbeddingTable copy_as(const EmbeddingTable& src, Level level);

/// F (d x k): row i = x_i * e_i.
Matrix embed(std::span<const double> x, const EmbeddingTable& table);

/// Number of unordered pairs with self-pairs, d(d+1)/2.
inline std::size_t pair_count(std::size_t d) { return d * (d + 1) / 2; }
/// Pooled terms in H, d(d+3)/2.
inline std::size_t pooled_term_count(std::size_t d) { return d * (d + 3) / 2; }

/// G (k x d(d+1)/2): column for pair (i, j), i <= j, lexicographic, is f_i * f_j elementwise.
Matrix interactions(const Matrix& F);

/// Sum pooling over the columns of H = (F^T | G).
Vector observe(const Matrix& F, const Matrix& G);

/// observe(embed(x), interactions(embed(x))) without materializing G:
/// o_c = S_c + (S_c^2 + sum_i f_ic^2) / 2 with S_c = sum_i f_ic.
Vector observe_direct(std::span<const double> x, const EmbeddingTable& table);

/// c = sum_m e^{-m} o_{t-m}. `history` is oldest first; only the last three entries count.
Vector temporal_context(std::span<const Vector> history);

/// Feature vectors x_t, x_{t-1}, x_{t-2}, x_{t-3}; null where the episode has not started.
using XWindow = std::array<const Vector*, kContextSteps + 1>;

/// s = (o_t | c_t), length 2k, computed from raw feature vectors.
Vector encode_window(const XWindow& w, const EmbeddingTable& table);

/// Accumulates dL/dE into `grad_e` (d*k, row-major) given dL/ds.
void encode_window_backward(const XWindow& w, const EmbeddingTable& table, std::span<const double> grad_s,
                            Vector& grad_e);

/// s^Rt from the current vector and an o-history (oldest first).
Vector unified_state(std::span<const double> x, std::span<const Vector> o_history, const EmbeddingTable& table);

struct StateBundle {
  Vector rt;
  Vector neu;
  Vector car;
  Vector ren;
  Vector omix;

  const Vector& organ(Level l) const;
};

struct EmbeddingSet {
  EmbeddingTable rt;
  EmbeddingTable neu;
  EmbeddingTable car;
  EmbeddingTable ren;

  const EmbeddingTable& at(Level l) const;
  EmbeddingTable& at(Level l);
};

/// Targeted states (s^Neu, s^Car, s^Ren, s^OMix) with per-organ histories.
StateBundle targeted_states(const XWindow& w, const EmbeddingSet& tables);

/// Full bundle. With `raw_features` every state is x_t itself (no learned representation).
StateBundle build_state_bundle(const XWindow& w, const EmbeddingSet& tables, bool raw_features = false);

/// Widths of the states consumed by agents.
struct StateWidths {
  std::size_t organ = 0;  // s^Rt and each organ state
  std::size_t omix = 0;
};
StateWidths state_widths(std::size_t d, std::size_t k, bool raw_features);

void save_embeddings(const std::filesystem::path& stem, const EmbeddingSet& set);
EmbeddingSet load_embeddings(const std::filesystem::path& stem);

}  // namespace hmarl
