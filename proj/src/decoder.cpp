#include "rpg/decoder.hpp"

#include <algorithm>
#include <numeric>
#include <unordered_set>

namespace rpg {

namespace {

// Uniform subset of [0, n) of the given size, in draw order.
std::vector<ItemId> sample_without_replacement(std::size_t n, std::size_t count,
                                               std::mt19937_64& rng) {
  std::vector<ItemId> out;
  out.reserve(count);
  if (count * 4 >= n) {
    std::vector<ItemId> all(n);
    std::iota(all.begin(), all.end(), ItemId{0});
    for (std::size_t i = 0; i < count; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, n - 1);
      std::swap(all[i], all[pick(rng)]);
    }
    out.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(count));
    return out;
  }
  // Floyd's algorithm: O(count) draws regardless of n.
  std::unordered_set<ItemId> seen;
  seen.reserve(count * 2);
  for (std::size_t j = n - count; j < n; ++j) {
    std::uniform_int_distribution<std::size_t> pick(0, j);
    auto t = static_cast<ItemId>(pick(rng));
    if (!seen.insert(t).second) {
      t = static_cast<ItemId>(j);
      seen.insert(t);
    }
    out.push_back(t);
  }
  return out;
}

std::vector<Scored> score_items(std::span<const ItemId> items, const LogitCache<float>& cache,
                                const ItemCatalog& catalog) {
  const std::size_t m = catalog.scheme().m;
  const Code* codes = catalog.codes().data();
  constexpr std::size_t kAhead = 8;
  std::vector<Scored> out(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i + kAhead < items.size()) __builtin_prefetch(codes + items[i + kAhead] * m);
    out[i] = {items[i], cache.score_unchecked(codes + static_cast<std::size_t>(items[i]) * m)};
  }
  return out;
}

void keep_best(std::vector<Scored>& scored, std::size_t b) {
  if (scored.size() > b) {
    std::nth_element(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(b), scored.end(),
                     ranks_before);
    scored.resize(b);
  }
  std::sort(scored.begin(), scored.end(), ranks_before);
}

void check_cache(const LogitCache<float>& cache, const ItemCatalog& catalog) {
  if (cache.digits() != catalog.scheme().m || cache.codes() != catalog.scheme().M) {
    throw ContractViolation("logit cache does not match catalog scheme");
  }
}

StepLogits summarize(const Beam& beam) {
  StepLogits s;
  if (beam.empty()) return s;
  double sum = 0.0;
  for (const auto& e : beam.entries) sum += e.logit;
  s.max = beam.entries.front().logit;
  s.min = beam.entries.back().logit;
  s.avg = static_cast<float>(sum / static_cast<double>(beam.size()));
  return s;
}

}  // namespace

std::vector<ItemId> Beam::items() const {
  std::vector<ItemId> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(e.item);
  return out;
}

std::vector<float> Beam::logits() const {
  std::vector<float> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(e.logit);
  return out;
}

void DecodeConfig::validate(std::size_t catalog_size) const {
  if (top_k < 1) throw ConfigError("decode: K must be >= 1");
  if (top_k > beam) throw ConfigError("decode: K must not exceed beam size b");
  if (beam > catalog_size) {
    throw ConfigError("decode: beam size b=" + std::to_string(beam) + " exceeds N=" +
                      std::to_string(catalog_size));
  }
}

Beam sample_initial_beam(const ItemCatalog& catalog, const LogitCache<float>& cache,
                         std::size_t b, std::mt19937_64& rng) {
  if (b > catalog.size()) {
    throw ConfigError("sample_initial_beam: b=" + std::to_string(b) + " exceeds N=" +
                      std::to_string(catalog.size()));
  }
  check_cache(cache, catalog);
  const auto picked = sample_without_replacement(catalog.size(), b, rng);
  Beam beam{score_items(picked, cache, catalog)};
  std::sort(beam.entries.begin(), beam.entries.end(), ranks_before);
  return beam;
}

std::vector<ItemId> propagate(const DecodingGraph& graph, const Beam& beam) {
  std::vector<ItemId> out;
  out.reserve(beam.size() * graph.degree);
  for (const auto& e : beam.entries) {
    const auto row = neighbors(graph, e.item);
    out.insert(out.end(), row.begin(), row.end());
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

Beam select_top(std::span<const ItemId> candidates, const LogitCache<float>& cache,
                const ItemCatalog& catalog, std::size_t b) {
  check_cache(cache, catalog);
  for (ItemId c : candidates) {
    if (c >= catalog.size()) throw ContractViolation("select_top: candidate outside catalog");
  }
  Beam beam{score_items(candidates, cache, catalog)};
  keep_best(beam.entries, b);
  return beam;
}

DecodeResult decode(const DecodingGraph& graph, const LogitCache<float>& cache,
                    const ItemCatalog& catalog, const DecodeConfig& config) {
  config.validate(catalog.size());
  if (graph.size() != catalog.size()) {
    throw ContractViolation("decode: graph has " + std::to_string(graph.size()) +
                            " nodes, catalog has " + std::to_string(catalog.size()));
  }
  std::mt19937_64 rng(config.seed);
  DecodeResult result;
  auto& stats = result.stats;

  Beam beam = sample_initial_beam(catalog, cache, config.beam, rng);
  stats.visited_count = beam.size();
  stats.scored_count = beam.size();
  stats.per_step.push_back(summarize(beam));
  if (config.record_trace) stats.beam_trace.push_back(beam.logits());

  for (std::size_t step = 0; step < config.steps; ++step) {
    const auto candidates = propagate(graph, beam);
    stats.visited_count += beam.size() * graph.degree;
    stats.scored_count += candidates.size();
    Beam next = select_top(candidates, cache, catalog, config.beam);
    ++stats.steps_run;
    stats.per_step.push_back(summarize(next));
    if (config.record_trace) stats.beam_trace.push_back(next.logits());
    const bool unchanged = next.entries == beam.entries;
    beam = std::move(next);
    if (config.early_exit && unchanged) break;
  }

  const std::size_t keep = std::min(config.top_k, beam.size());
  result.items.assign(beam.entries.begin(), beam.entries.begin() + static_cast<std::ptrdiff_t>(keep));
  return result;
}

std::vector<Scored> decode_unconstrained(const ItemCatalog& catalog, const LogitCache<float>& cache,
                                         std::size_t budget, std::mt19937_64& rng, std::size_t K) {
  if (budget > catalog.size()) {
    throw ConfigError("decode_unconstrained: budget=" + std::to_string(budget) + " exceeds N=" +
                      std::to_string(catalog.size()));
  }
  if (K > budget) throw ConfigError("decode_unconstrained: K exceeds budget");
  check_cache(cache, catalog);
  const auto picked = sample_without_replacement(catalog.size(), budget, rng);
  auto scored = score_items(picked, cache, catalog);
  keep_best(scored, K);
  return scored;
}

}  // namespace rpg
