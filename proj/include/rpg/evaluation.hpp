#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rpg/core.hpp"
#include "rpg/decoder.hpp"
#include "rpg/graph.hpp"
#include "rpg/model.hpp"
#include "rpg/scorer.hpp"

namespace rpg {

// ---------------------------------------------------------------------------
// Leave-last-out split
// ---------------------------------------------------------------------------

struct SplitView {
  std::vector<Example> train;  // every (prefix -> next) pair inside the training prefix
  std::vector<Example> valid;  // one per retained user: second-to-last item
  std::vector<Example> test;   // one per retained user: last item
  std::vector<std::vector<ItemId>> train_prefixes;  // sequence minus its last two items
  std::size_t excluded = 0;    // users with fewer than 3 interactions
};

SplitView split_leave_last_out(const InteractionDataset& dataset);

/// Occurrences of each item across the training prefixes.
std::vector<std::size_t> item_train_frequency(const SplitView& split, std::size_t num_items);

// ---------------------------------------------------------------------------
// Ranking metrics (single ground truth)
// ---------------------------------------------------------------------------

/// 1-based position of `truth` in `ranked`, if present.
std::optional<std::size_t> rank_of(std::span<const Scored> ranked, ItemId truth);

double recall_at_k(std::span<const Scored> ranked, ItemId truth, std::size_t K);
double ndcg_at_k(std::span<const Scored> ranked, ItemId truth, std::size_t K);

/// Metric from a 1-based rank (0 = not retrieved).
double recall_from_rank(std::size_t rank, std::size_t K);
double ndcg_from_rank(std::size_t rank, std::size_t K);

/// Expected metrics of a uniformly random ranking of N items.
double random_recall(std::size_t N, std::size_t K);
double random_ndcg(std::size_t N, std::size_t K);

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct Metrics {
  double recall5 = 0, recall10 = 0, ndcg5 = 0, ndcg10 = 0;
};

struct QueryLog {
  ItemId target = 0;
  std::size_t decode_rank = 0;  // 0 = outside the returned list
  std::size_t exact_rank = 0;
  std::size_t visited_count = 0;
  double overlap10 = 0;         // |decode top-10 intersect exact top-10| / 10
};

struct EvalReport {
  Metrics decode;
  Metrics exact;  // oracle ceiling on the same queries
  std::size_t query_count = 0;
  double mean_visited = 0;
  double mean_overlap10 = 0;
  std::uint64_t config_digest = 0;
  std::vector<QueryLog> queries;

  std::string to_json() const;
};

struct EvalOptions {
  /// Rank with exact_topk in place of the graph decoder.
  bool exact_decoder = false;
  std::size_t threads = 1;
};

/// Scores every query with graph decoding and with exact_topk. The decoder seed for query i is
/// derived from config.seed and i, so results do not depend on thread count.
EvalReport evaluate(const Checkpoint<float>& ckpt, const DecodingGraph& graph,
                    const ItemCatalog& catalog, std::span<const Example> queries,
                    const DecodeConfig& config, const EvalOptions& options = {});

std::uint64_t decode_seed(std::uint64_t base, std::size_t query);

struct BucketMetrics {
  std::size_t lo = 0, hi = 0;  // inclusive frequency range; hi == SIZE_MAX for the open bucket
  std::size_t count = 0;
  Metrics decode;
};

/// Groups test targets by training frequency. Buckets with no queries are omitted.
std::vector<BucketMetrics> cold_start_report(std::span<const QueryLog> logs,
                                             std::span<const std::size_t> train_frequency,
                                             std::span<const std::size_t> upper_edges = {});

// ---------------------------------------------------------------------------
// Logit difference vs. number of differing digits
// ---------------------------------------------------------------------------

struct TrendReport {
  std::vector<double> mean_abs_delta;  // index = number of differing digits, 0..m
  std::vector<std::size_t> counts;
  std::vector<double> max_digit_spread;  // per query cache: max_j (max p_j - min p_j), averaged
  double rank_correlation = 0;           // Spearman between distance (1..m) and mean |delta|
};

/// For each query cache, perturbs catalog items in h random digits and records |delta logit|.
/// With no queries, single random catalog items serve as histories.
TrendReport hamming_logit_trend(const Checkpoint<float>& ckpt, const ItemCatalog& catalog,
                                std::size_t samples_per_distance, std::mt19937_64& rng,
                                std::span<const Example> queries = {},
                                std::size_t num_queries = 32);

/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

}  // namespace rpg
