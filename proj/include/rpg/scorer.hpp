#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include "rpg/core.hpp"
#include "rpg/model.hpp"

namespace rpg {

/// Per-digit log-probabilities log p^(j) for one encoded sequence (m x M, row-major).
template <class Scalar = float>
struct LogitCache {
  RowMatrix<Scalar> log_probs;
  std::uint64_t source_digest = 0;

  std::size_t digits() const { return static_cast<std::size_t>(log_probs.rows()); }
  std::size_t codes() const { return static_cast<std::size_t>(log_probs.cols()); }

  /// Sum of m cached entries; no validation.
  Scalar score_unchecked(const Code* id) const {
    const Scalar* base = log_probs.data();
    const std::size_t M = codes();
    Scalar acc = 0;
    for (std::size_t j = 0; j < digits(); ++j) acc += base[j * M + id[j]];
    return acc;
  }
};

/// Log-softmax of E_j g_j(s) / tau per digit, computed in double, stored as Scalar.
template <class Scalar>
LogitCache<Scalar> build_logit_cache(const Vector<Scalar>& s, const Checkpoint<Scalar>& ckpt) {
  if (!all_finite(s)) throw DataError("build_logit_cache: non-finite sequence representation");
  if (static_cast<std::size_t>(s.size()) != ckpt.d()) {
    throw ContractViolation("build_logit_cache: s has wrong dimension");
  }
  if (!(ckpt.shape.tau > 0.0)) throw ConfigError("temperature must be > 0");
  const auto m = static_cast<Eigen::Index>(ckpt.m());
  const auto M = static_cast<Eigen::Index>(ckpt.scheme().M);
  LogitCache<Scalar> cache;
  cache.log_probs.resize(m, M);
  cache.source_digest = 0;
  const VectorXd sd = s.template cast<double>();
  for (Eigen::Index j = 0; j < m; ++j) {
    const auto& h = ckpt.heads[j];
    const VectorXd hidden =
        (h.w1.template cast<double>() * sd + h.b1.template cast<double>()).cwiseMax(0.0);
    const VectorXd g = h.w2.template cast<double>() * hidden + h.b2.template cast<double>();
    const VectorXd z = ckpt.tables[j].template cast<double>() * g / ckpt.shape.tau;
    cache.log_probs.row(j) = log_softmax(z).transpose().template cast<Scalar>();
  }
  return cache;
}

template <class Scalar>
Scalar score_id_cached(const LogitCache<Scalar>& cache, std::span<const Code> id) {
  if (id.size() != cache.digits()) throw ContractViolation("score_id_cached: wrong id length");
  for (Code c : id) {
    if (c >= cache.codes()) throw ContractViolation("score_id_cached: code out of range");
  }
  return cache.score_unchecked(id.data());
}

/// Recomputes every digit's full softmax for this one id, in double with plain loops.
template <class Scalar>
double score_id_naive(const Vector<Scalar>& s, std::span<const Code> id,
                      const Checkpoint<Scalar>& ckpt) {
  require_valid_id(id, ckpt.scheme());
  if (!(ckpt.shape.tau > 0.0)) throw ConfigError("temperature must be > 0");
  const std::size_t d = ckpt.d();
  const std::size_t M = ckpt.scheme().M;
  double total = 0.0;
  for (std::size_t j = 0; j < ckpt.m(); ++j) {
    const auto& head = ckpt.heads[j];
    const std::size_t h = static_cast<std::size_t>(head.w1.rows());
    std::vector<double> hidden(h), g(d);
    for (std::size_t r = 0; r < h; ++r) {
      double acc = static_cast<double>(head.b1[r]);
      for (std::size_t c = 0; c < d; ++c) acc += static_cast<double>(head.w1(r, c)) * s[c];
      hidden[r] = acc > 0.0 ? acc : 0.0;
    }
    for (std::size_t r = 0; r < d; ++r) {
      double acc = static_cast<double>(head.b2[r]);
      for (std::size_t c = 0; c < h; ++c) acc += static_cast<double>(head.w2(r, c)) * hidden[c];
      g[r] = acc;
    }
    std::vector<double> logits(M);
    for (std::size_t code = 0; code < M; ++code) {
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        acc += static_cast<double>(ckpt.tables[j](code, c)) * g[c];
      }
      logits[code] = acc / ckpt.shape.tau;
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double z : logits) sum += std::exp(z - mx);
    total += logits[id[j]] - mx - std::log(sum);
  }
  return total;
}

struct Scored {
  ItemId item = 0;
  float logit = 0.0f;

  friend bool operator==(const Scored&, const Scored&) = default;
};

/// Descending logit, ascending item id on ties.
inline bool ranks_before(const Scored& a, const Scored& b) {
  if (a.logit != b.logit) return a.logit > b.logit;
  return a.item < b.item;
}

/// Scores every catalog item and returns the K best.
std::vector<Scored> exact_topk(const LogitCache<float>& cache, const ItemCatalog& catalog,
                               std::size_t K);

/// All N scores in item order.
std::vector<float> score_catalog(const LogitCache<float>& cache, const ItemCatalog& catalog);

/// Catalog size above which the cached path beats per-item enumeration: d/(d-1) * M.
double crossover_threshold(const SemanticScheme& scheme);

}  // namespace rpg
