#include "rpg/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <thread>

#include <json.hpp>

namespace rpg {

SplitView split_leave_last_out(const InteractionDataset& dataset) {
  SplitView split;
  for (const auto& seq : dataset.sequences) {
    const std::size_t n = seq.size();
    if (n < 3) {
      ++split.excluded;
      continue;
    }
    for (ItemId item : seq) {
      if (item >= dataset.num_items) throw DataError("split: item id outside catalog");
    }
    for (std::size_t t = 1; t + 2 < n; ++t) {
      split.train.push_back({{seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(t)}, seq[t]});
    }
    split.train_prefixes.emplace_back(seq.begin(), seq.end() - 2);
    split.valid.push_back({{seq.begin(), seq.end() - 2}, seq[n - 2]});
    split.test.push_back({{seq.begin(), seq.end() - 1}, seq[n - 1]});
  }
  return split;
}

std::vector<std::size_t> item_train_frequency(const SplitView& split, std::size_t num_items) {
  std::vector<std::size_t> freq(num_items, 0);
  for (const auto& prefix : split.train_prefixes) {
    for (ItemId item : prefix) {
      if (item < num_items) ++freq[item];
    }
  }
  return freq;
}

std::optional<std::size_t> rank_of(std::span<const Scored> ranked, ItemId truth) {
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    if (ranked[i].item == truth) return i + 1;
  }
  return std::nullopt;
}

double recall_from_rank(std::size_t rank, std::size_t K) {
  return rank >= 1 && rank <= K ? 1.0 : 0.0;
}

double ndcg_from_rank(std::size_t rank, std::size_t K) {
  return rank >= 1 && rank <= K ? 1.0 / std::log2(1.0 + static_cast<double>(rank)) : 0.0;
}

double recall_at_k(std::span<const Scored> ranked, ItemId truth, std::size_t K) {
  if (K < 1) throw ConfigError("recall_at_k: K must be >= 1");
  return recall_from_rank(rank_of(ranked, truth).value_or(0), K);
}

double ndcg_at_k(std::span<const Scored> ranked, ItemId truth, std::size_t K) {
  if (K < 1) throw ConfigError("ndcg_at_k: K must be >= 1");
  return ndcg_from_rank(rank_of(ranked, truth).value_or(0), K);
}

double random_recall(std::size_t N, std::size_t K) {
  if (N == 0) return 0.0;
  return static_cast<double>(std::min(K, N)) / static_cast<double>(N);
}

double random_ndcg(std::size_t N, std::size_t K) {
  if (N == 0) return 0.0;
  double sum = 0.0;
  for (std::size_t r = 1; r <= std::min(K, N); ++r) sum += ndcg_from_rank(r, K);
  return sum / static_cast<double>(N);
}

std::uint64_t decode_seed(std::uint64_t base, std::size_t query) {
  // splitmix64 of (base, query)
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(query) + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

void accumulate(Metrics& m, std::size_t rank) {
  m.recall5 += recall_from_rank(rank, 5);
  m.recall10 += recall_from_rank(rank, 10);
  m.ndcg5 += ndcg_from_rank(rank, 5);
  m.ndcg10 += ndcg_from_rank(rank, 10);
}

void finish(Metrics& m, std::size_t n) {
  if (n == 0) return;
  const double inv = 1.0 / static_cast<double>(n);
  m.recall5 *= inv;
  m.recall10 *= inv;
  m.ndcg5 *= inv;
  m.ndcg10 *= inv;
}

nlohmann::json metrics_json(const Metrics& m) {
  return {{"recall@5", m.recall5}, {"recall@10", m.recall10}, {"ndcg@5", m.ndcg5},
          {"ndcg@10", m.ndcg10}};
}

}  // namespace

std::string EvalReport::to_json() const {
  nlohmann::json j = {{"query_count", query_count},
                      {"decode", metrics_json(decode)},
                      {"exact", metrics_json(exact)},
                      {"mean_visited", mean_visited},
                      {"mean_overlap@10", mean_overlap10},
                      {"config_digest", digest_hex(config_digest)}};
  return j.dump(2);
}

EvalReport evaluate(const Checkpoint<float>& ckpt, const DecodingGraph& graph,
                    const ItemCatalog& catalog, std::span<const Example> queries,
                    const DecodeConfig& config, const EvalOptions& options) {
  require_fresh(graph, ckpt.digest(), catalog.digest());
  config.validate(catalog.size());
  const std::size_t list = std::min<std::size_t>(10, catalog.size());

  EvalReport report;
  report.queries.resize(queries.size());
  auto run = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const auto& q = queries[i];
      const auto s = encode_history<float>(q.history, catalog, ckpt);
      const auto cache = build_logit_cache(s, ckpt);
      const auto exact = exact_topk(cache, catalog, list);
      QueryLog& log = report.queries[i];
      log.target = q.target;
      log.exact_rank = rank_of(exact, q.target).value_or(0);
      if (options.exact_decoder) {
        log.decode_rank = log.exact_rank;
        log.overlap10 = 1.0;
        continue;
      }
      DecodeConfig c = config;
      c.seed = decode_seed(config.seed, i);
      const auto decoded = decode(graph, cache, catalog, c);
      log.decode_rank = rank_of(decoded.items, q.target).value_or(0);
      log.visited_count = decoded.stats.visited_count;
      std::size_t hits = 0;
      for (const auto& e : decoded.items) {
        if (rank_of(exact, e.item)) ++hits;
      }
      log.overlap10 = static_cast<double>(hits) / static_cast<double>(list);
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(options.threads, queries.size()));
  if (threads <= 1) {
    run(0, queries.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (queries.size() + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t lo = t * chunk, hi = std::min(queries.size(), lo + chunk);
      if (lo < hi) pool.emplace_back(run, lo, hi);
    }
    for (auto& th : pool) th.join();
  }

  for (const auto& log : report.queries) {
    accumulate(report.decode, log.decode_rank);
    accumulate(report.exact, log.exact_rank);
    report.mean_visited += static_cast<double>(log.visited_count);
    report.mean_overlap10 += log.overlap10;
  }
  report.query_count = queries.size();
  finish(report.decode, report.query_count);
  finish(report.exact, report.query_count);
  if (report.query_count) {
    report.mean_visited /= static_cast<double>(report.query_count);
    report.mean_overlap10 /= static_cast<double>(report.query_count);
  }

  const std::uint64_t fields[8] = {config.beam,           config.steps,
                                   config.top_k,          config.seed,
                                   config.early_exit,     options.exact_decoder,
                                   ckpt.digest(),         graph.k};
  std::uint64_t h = fnv1a(fields, sizeof(fields));
  h = fnv1a(&report.query_count, sizeof(report.query_count), h);
  report.config_digest = fnv1a(&graph.catalog_digest, sizeof(graph.catalog_digest), h);
  return report;
}

std::vector<BucketMetrics> cold_start_report(std::span<const QueryLog> logs,
                                             std::span<const std::size_t> train_frequency,
                                             std::span<const std::size_t> upper_edges) {
  static const std::size_t kDefaultEdges[] = {5, 10, 15, 20};
  if (upper_edges.empty()) upper_edges = kDefaultEdges;
  std::vector<BucketMetrics> buckets;
  std::size_t lo = 0;
  for (std::size_t hi : upper_edges) {
    buckets.push_back({lo, hi, 0, {}});
    lo = hi + 1;
  }
  buckets.push_back({lo, std::numeric_limits<std::size_t>::max(), 0, {}});

  for (const auto& log : logs) {
    const std::size_t f = log.target < train_frequency.size() ? train_frequency[log.target] : 0;
    for (auto& b : buckets) {
      if (f >= b.lo && f <= b.hi) {
        accumulate(b.decode, log.decode_rank);
        ++b.count;
        break;
      }
    }
  }
  std::vector<BucketMetrics> out;
  for (auto& b : buckets) {
    if (b.count == 0) continue;
    finish(b.decode, b.count);
    out.push_back(b);
  }
  return out;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw ContractViolation("spearman: need two equal-length series of size >= 2");
  }
  auto ranks = [](std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t t = i; t <= j; ++t) r[idx[t]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

TrendReport hamming_logit_trend(const Checkpoint<float>& ckpt, const ItemCatalog& catalog,
                                std::size_t samples_per_distance, std::mt19937_64& rng,
                                std::span<const Example> queries, std::size_t num_queries) {
  const std::size_t m = catalog.scheme().m;
  const std::size_t M = catalog.scheme().M;
  if (catalog.size() == 0) throw ContractViolation("hamming_logit_trend: empty catalog");
  if (num_queries == 0) num_queries = 1;

  std::vector<LogitCache<float>> caches;
  std::uniform_int_distribution<std::size_t> pick_item(0, catalog.size() - 1);
  if (!queries.empty()) {
    std::uniform_int_distribution<std::size_t> pick_query(0, queries.size() - 1);
    for (std::size_t q = 0; q < num_queries; ++q) {
      const auto& ex = queries[pick_query(rng)];
      caches.push_back(build_logit_cache(encode_history<float>(ex.history, catalog, ckpt), ckpt));
    }
  } else {
    for (std::size_t q = 0; q < num_queries; ++q) {
      const ItemId item = static_cast<ItemId>(pick_item(rng));
      caches.push_back(build_logit_cache(encode_history<float>({&item, 1}, catalog, ckpt), ckpt));
    }
  }

  TrendReport report;
  report.mean_abs_delta.assign(m + 1, 0.0);
  report.counts.assign(m + 1, 0);
  double spread_sum = 0.0;
  for (const auto& cache : caches) {
    double spread = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const auto row = cache.log_probs.row(static_cast<Eigen::Index>(j));
      spread = std::max(spread, static_cast<double>(row.maxCoeff() - row.minCoeff()));
    }
    spread_sum += spread;
  }
  report.max_digit_spread.assign(1, spread_sum / static_cast<double>(caches.size()));

  std::vector<std::size_t> digits(m);
  std::vector<Code> perturbed(m);
  std::uniform_int_distribution<std::size_t> pick_cache(0, caches.size() - 1);
  std::uniform_int_distribution<Code> shift(1, static_cast<Code>(M - 1));
  for (std::size_t h = 0; h <= m; ++h) {
    for (std::size_t s = 0; s < samples_per_distance; ++s) {
      const auto& cache = caches[pick_cache(rng)];
      const auto base = catalog.id(static_cast<ItemId>(pick_item(rng)));
      std::copy(base.begin(), base.end(), perturbed.begin());
      std::iota(digits.begin(), digits.end(), 0);
      for (std::size_t t = 0; t < h; ++t) {
        std::uniform_int_distribution<std::size_t> pick(t, m - 1);
        std::swap(digits[t], digits[pick(rng)]);
        const std::size_t j = digits[t];
        perturbed[j] = static_cast<Code>((perturbed[j] + shift(rng)) % M);
      }
      const double delta = static_cast<double>(cache.score_unchecked(base.data())) -
                           static_cast<double>(cache.score_unchecked(perturbed.data()));
      report.mean_abs_delta[h] += std::abs(delta);
      ++report.counts[h];
    }
  }
  for (std::size_t h = 0; h <= m; ++h) {
    if (report.counts[h]) report.mean_abs_delta[h] /= static_cast<double>(report.counts[h]);
  }
  if (m >= 2) {
    std::vector<double> dist, mean;
    for (std::size_t h = 1; h <= m; ++h) {
      dist.push_back(static_cast<double>(h));
      mean.push_back(report.mean_abs_delta[h]);
    }
    report.rank_correlation = spearman(dist, mean);
  }
  return report;
}

}  // namespace rpg
