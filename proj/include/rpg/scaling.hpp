#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rpg/core.hpp"
#include "rpg/decoder.hpp"
#include "rpg/graph.hpp"
#include "rpg/model.hpp"
#include "rpg/scorer.hpp"

namespace rpg {

struct ScalingConfig {
  std::vector<std::size_t> sizes{20000, 100000, 500000};  // total catalog sizes
  std::size_t beam = 10;
  std::size_t k = 100;
  std::size_t steps = 3;
  std::size_t top_k = 10;
  std::size_t repetitions = 5;  // timed runs after one warm-up; the median is reported
  std::size_t queries = 20;
  std::uint64_t seed = 7;
  std::size_t graph_threads = 1;  // graph construction only; timed sections are single-threaded
};

struct ScalingRow {
  std::size_t catalog_size = 0;
  double decode_seconds = 0;  // median per-query wall time
  double exact_seconds = 0;
  std::size_t visited_count = 0;  // b + q*b*k (early exit disabled)
  double mean_scored = 0;         // distinct items scored per decode
  std::size_t transient_bytes = 0;  // upper bound on decode working memory per query
};

/// Appends `total - base.size()` items with uniformly random semantic IDs.
ItemCatalog with_dummy_items(const ItemCatalog& base, std::size_t total, std::uint64_t seed);

/// Times graph decoding and exact_topk on catalogs padded with dummy items. `caches` is a fixed
/// query set; the decoding graph is rebuilt for each size with the approximate builder.
std::vector<ScalingRow> bench_decode_scaling(const ItemCatalog& base, const TokenTables& tables,
                                             const std::vector<LogitCache<float>>& caches,
                                             const ScalingConfig& config);

std::string scaling_tsv(const std::vector<ScalingRow>& rows);

/// Log-log line chart of per-query wall time against catalog size.
std::string scaling_svg(const std::vector<ScalingRow>& rows);

/// Parses "2e4,1e5,5e5" style lists.
std::vector<std::size_t> parse_size_list(const std::string& text);

}  // namespace rpg
