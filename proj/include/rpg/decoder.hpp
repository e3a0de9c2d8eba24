#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "rpg/core.hpp"
#include "rpg/graph.hpp"
#include "rpg/scorer.hpp"

namespace rpg {

/// Up to b distinct items, ordered by ranks_before.
struct Beam {
  std::vector<Scored> entries;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
  std::vector<ItemId> items() const;
  std::vector<float> logits() const;
};

struct DecodeConfig {
  std::size_t beam = 10;    // b
  std::size_t steps = 3;    // q
  std::size_t top_k = 10;   // K
  std::uint64_t seed = 0;
  /// Stop once a step leaves the beam unchanged; the output is identical either way.
  bool early_exit = true;
  /// Keep the sorted beam logits of every step in DecodeStats::beam_trace.
  bool record_trace = false;

  void validate(std::size_t catalog_size) const;
};

struct StepLogits {
  float min = 0, avg = 0, max = 0;
};

struct DecodeStats {
  /// Neighbor slots expanded plus the initial sample: b + sum over steps of |beam| * degree.
  std::size_t visited_count = 0;
  /// Distinct items actually scored (initial sample + deduplicated candidates per step).
  std::size_t scored_count = 0;
  std::size_t steps_run = 0;
  std::vector<StepLogits> per_step;               // entry 0 is the initial beam
  std::vector<std::vector<float>> beam_trace;     // only with record_trace
};

struct DecodeResult {
  std::vector<Scored> items;  // top-K, ranked
  DecodeStats stats;
};

/// b distinct items drawn uniformly without replacement, scored and sorted.
Beam sample_initial_beam(const ItemCatalog& catalog, const LogitCache<float>& cache,
                         std::size_t b, std::mt19937_64& rng);

/// Union of the neighbor lists of the beam members, ascending ids.
std::vector<ItemId> propagate(const DecodingGraph& graph, const Beam& beam);

/// Scores `candidates` with the cache and keeps the best b.
Beam select_top(std::span<const ItemId> candidates, const LogitCache<float>& cache,
                const ItemCatalog& catalog, std::size_t b);

/// Sample, then q rounds of propagate + select; returns the first K of the final beam.
DecodeResult decode(const DecodingGraph& graph, const LogitCache<float>& cache,
                    const ItemCatalog& catalog, const DecodeConfig& config);

/// Scores `budget` uniformly sampled items and returns their top K (no graph).
std::vector<Scored> decode_unconstrained(const ItemCatalog& catalog, const LogitCache<float>& cache,
                                         std::size_t budget, std::mt19937_64& rng, std::size_t K);

/// Upper bound on DecodeStats::visited_count: b + q * b * k.
inline std::size_t visited_budget(const DecodeConfig& c, std::size_t degree) {
  return c.beam + c.steps * c.beam * degree;
}

}  // namespace rpg
