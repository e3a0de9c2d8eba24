#include "rpg/scorer.hpp"

namespace rpg {

std::vector<float> score_catalog(const LogitCache<float>& cache, const ItemCatalog& catalog) {
  if (cache.digits() != catalog.scheme().m || cache.codes() != catalog.scheme().M) {
    throw ContractViolation("score_catalog: cache does not match catalog scheme");
  }
  const std::size_t n = catalog.size();
  const std::size_t m = catalog.scheme().m;
  std::vector<float> scores(n);
  const Code* codes = catalog.codes().data();
  for (std::size_t i = 0; i < n; ++i) scores[i] = cache.score_unchecked(codes + i * m);
  return scores;
}

std::vector<Scored> exact_topk(const LogitCache<float>& cache, const ItemCatalog& catalog,
                               std::size_t K) {
  if (K > catalog.size()) {
    throw ConfigError("exact_topk: K=" + std::to_string(K) + " exceeds N=" +
                      std::to_string(catalog.size()));
  }
  const auto scores = score_catalog(cache, catalog);
  std::vector<Scored> all(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) all[i] = {static_cast<ItemId>(i), scores[i]};
  if (K < all.size()) {
    std::nth_element(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(K), all.end(),
                     ranks_before);
    all.resize(K);
  }
  std::sort(all.begin(), all.end(), ranks_before);
  return all;
}

double crossover_threshold(const SemanticScheme& scheme) {
  if (scheme.d < 2) throw ConfigError("crossover_threshold: d must be >= 2");
  const double d = static_cast<double>(scheme.d);
  return d / (d - 1.0) * static_cast<double>(scheme.M);
}

}  // namespace rpg
