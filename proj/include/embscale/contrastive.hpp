#pragma once

// Mean-pooled embedding readout and the symmetric in-batch contrastive loss.
// Pair i is the positive for row i and column i; every other in-batch pair is
// a negative. Logits are cosine similarities scaled by exp(temperature).

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "embscale/error.hpp"

namespace embscale {

using Embedding = std::vector<double>;

struct ContrastiveConfig {
  double temperature = 0.025;
};

inline Embedding mean_pool(std::span<const Embedding> states) {
  if (states.empty()) throw ValidationError("mean_pool: empty token sequence");
  const std::size_t m = states.front().size();
  if (m == 0) throw ValidationError("mean_pool: hidden states have dimension 0");
  Embedding out(m, 0.0);
  for (std::size_t i = 0; i < states.size(); ++i) {
    if (states[i].size() != m) {
      throw ValidationError("mean_pool: state " + std::to_string(i) + " has dimension " +
                            std::to_string(states[i].size()) + ", expected " + std::to_string(m));
    }
    for (std::size_t k = 0; k < m; ++k) out[k] += states[i][k];
  }
  const double inv = 1.0 / static_cast<double>(states.size());
  for (double& x : out) x *= inv;
  return out;
}

namespace detail {

inline std::vector<Embedding> normalized(std::span<const Embedding> vs, std::size_t dim,
                                         const char* side) {
  std::vector<Embedding> out;
  out.reserve(vs.size());
  for (std::size_t i = 0; i < vs.size(); ++i) {
    if (vs[i].size() != dim) {
      throw ValidationError(std::string("contrastive_loss: ") + side + "[" + std::to_string(i) +
                            "] has mismatched dimension");
    }
    double sq = 0.0;
    for (double x : vs[i]) sq += x * x;
    if (!(sq > 0.0) || !std::isfinite(sq)) {
      throw ValidationError(std::string("contrastive_loss: ") + side + "[" + std::to_string(i) +
                            "] has zero or non-finite norm");
    }
    const double inv = 1.0 / std::sqrt(sq);
    Embedding u(vs[i]);
    for (double& x : u) x *= inv;
    out.push_back(std::move(u));
  }
  return out;
}

// Mean over rows of -log softmax(row)[i], max-subtracted.
inline double mean_row_cross_entropy(const std::vector<double>& logits, std::size_t n,
                                     bool transpose) {
  auto at = [&](std::size_t r, std::size_t c) {
    return transpose ? logits[c * n + r] : logits[r * n + c];
  };
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t arg = 0;
    for (std::size_t c = 1; c < n; ++c)
      if (at(r, c) > at(r, arg)) arg = c;
    const double mx = at(r, arg);
    // log1p keeps tiny off-max mass from rounding away.
    double rest = 0.0;
    for (std::size_t c = 0; c < n; ++c)
      if (c != arg) rest += std::exp(at(r, c) - mx);
    total += (mx - at(r, r)) + std::log1p(rest);
  }
  return total / static_cast<double>(n);
}

}  // namespace detail

// Returns (row cross-entropy + column cross-entropy) / 2, each mean-reduced.
inline double contrastive_loss(std::span<const Embedding> queries, std::span<const Embedding> values,
                               const ContrastiveConfig& cfg = {}) {
  const double scale = std::exp(cfg.temperature);
  if (!std::isfinite(scale)) throw ValidationError("contrastive_loss: exp(temperature) overflows");
  if (queries.empty()) throw ValidationError("contrastive_loss: empty batch");
  if (queries.size() != values.size()) {
    throw ValidationError("contrastive_loss: " + std::to_string(queries.size()) + " queries but " +
                          std::to_string(values.size()) + " values");
  }
  const std::size_t n = queries.size();
  const std::size_t dim = queries.front().size();
  if (dim == 0) throw ValidationError("contrastive_loss: embeddings have dimension 0");
  const auto q = detail::normalized(queries, dim, "queries");
  const auto v = detail::normalized(values, dim, "values");

  std::vector<double> logits(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < dim; ++k) dot += q[i][k] * v[j][k];
      logits[i * n + j] = dot * scale;
    }
  }
  const double rows = detail::mean_row_cross_entropy(logits, n, false);
  const double cols = detail::mean_row_cross_entropy(logits, n, true);
  return 0.5 * (rows + cols);
}

}  // namespace embscale
