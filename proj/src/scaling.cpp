#include "rpg/scaling.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

namespace rpg {

ItemCatalog with_dummy_items(const ItemCatalog& base, std::size_t total, std::uint64_t seed) {
  const auto& scheme = base.scheme();
  if (total < base.size()) {
    throw ConfigError("dummy catalog size " + std::to_string(total) + " is below the base size " +
                      std::to_string(base.size()));
  }
  CodeMatrix codes(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(scheme.m));
  codes.topRows(static_cast<Eigen::Index>(base.size())) = base.codes();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Code> code(0, static_cast<Code>(scheme.M - 1));
  for (auto i = static_cast<Eigen::Index>(base.size()); i < codes.rows(); ++i) {
    for (Eigen::Index j = 0; j < codes.cols(); ++j) codes(i, j) = code(rng);
  }
  return ItemCatalog(scheme, std::move(codes));
}

namespace {

using Clock = std::chrono::steady_clock;

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <class F>
double median_seconds(std::size_t reps, F&& run) {
  run();  // warm-up
  std::vector<double> t;
  for (std::size_t r = 0; r < reps; ++r) {
    const auto start = Clock::now();
    run();
    t.push_back(std::chrono::duration<double>(Clock::now() - start).count());
  }
  return median(std::move(t));
}

}  // namespace

std::vector<ScalingRow> bench_decode_scaling(const ItemCatalog& base, const TokenTables& tables,
                                             const std::vector<LogitCache<float>>& caches,
                                             const ScalingConfig& config) {
  if (caches.empty()) throw ConfigError("bench: empty query set");
  if (config.repetitions < 1) throw ConfigError("bench: repetitions must be >= 1");
  DecodeConfig dc;
  dc.beam = config.beam;
  dc.steps = config.steps;
  dc.top_k = config.top_k;
  dc.early_exit = false;

  std::vector<ScalingRow> rows;
  for (std::size_t size : config.sizes) {
    const auto catalog = with_dummy_items(base, size, config.seed);
    ApproxGraphConfig gc;
    gc.threads = config.graph_threads;
    gc.seed = config.seed;
    const auto graph = build_decoding_graph_approx(catalog, tables, config.k, gc);

    ScalingRow row;
    row.catalog_size = size;
    double scored = 0.0;
    std::size_t sink = 0;
    row.decode_seconds = median_seconds(config.repetitions, [&] {
      scored = 0.0;
      for (std::size_t q = 0; q < caches.size(); ++q) {
        dc.seed = config.seed + q;
        const auto r = decode(graph, caches[q], catalog, dc);
        row.visited_count = r.stats.visited_count;
        scored += static_cast<double>(r.stats.scored_count);
        sink += r.items.front().item;
      }
    }) / static_cast<double>(caches.size());
    row.mean_scored = scored / static_cast<double>(caches.size());
    row.transient_bytes = row.visited_count * (sizeof(ItemId) + sizeof(Scored));
    const std::size_t K = std::min(config.top_k, catalog.size());
    row.exact_seconds = median_seconds(config.repetitions, [&] {
      for (const auto& cache : caches) sink += exact_topk(cache, catalog, K).front().item;
    }) / static_cast<double>(caches.size());
    if (sink == 0xFFFFFFFFFFFFull) std::fputc(' ', stderr);  // keep results observable
    rows.push_back(row);
  }
  return rows;
}

std::string scaling_tsv(const std::vector<ScalingRow>& rows) {
  std::ostringstream out;
  out << "catalog_size\tdecode_seconds\texact_seconds\tvisited_count\tmean_scored\t"
         "transient_bytes\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%zu\t%.9f\t%.9f\t%zu\t%.2f\t%zu\n", r.catalog_size,
                  r.decode_seconds, r.exact_seconds, r.visited_count, r.mean_scored,
                  r.transient_bytes);
    out << buf;
  }
  return out.str();
}

std::string scaling_svg(const std::vector<ScalingRow>& rows) {
  const double W = 640, H = 400, L = 70, R = 20, T = 30, B = 50;
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (rows.empty()) {
    out << "</svg>\n";
    return out.str();
  }
  double xmin = 1e300, xmax = 0, ymin = 1e300, ymax = 0;
  for (const auto& r : rows) {
    const double x = static_cast<double>(r.catalog_size);
    xmin = std::min(xmin, x);
    xmax = std::max(xmax, x);
    for (double y : {r.decode_seconds, r.exact_seconds}) {
      if (y > 0) {
        ymin = std::min(ymin, y);
        ymax = std::max(ymax, y);
      }
    }
  }
  if (ymax <= 0) ymin = 1e-6, ymax = 1e-5;
  const double lx0 = std::log10(xmin) - 0.1, lx1 = std::log10(xmax) + 0.1;
  const double ly0 = std::floor(std::log10(ymin)), ly1 = std::ceil(std::log10(ymax));
  auto px = [&](double x) { return L + (std::log10(x) - lx0) / (lx1 - lx0) * (W - L - R); };
  auto py = [&](double y) {
    const double ly = std::log10(std::max(y, 1e-12));
    return H - B - (ly - ly0) / std::max(ly1 - ly0, 1e-9) * (H - T - B);
  };
  out << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n";
  for (double e = ly0; e <= ly1; e += 1.0) {
    out << "<text x=\"" << L - 6 << "\" y=\"" << py(std::pow(10.0, e)) + 4
        << "\" text-anchor=\"end\">1e" << static_cast<int>(e) << " s</text>\n";
  }
  for (const auto& r : rows) {
    out << "<text x=\"" << px(static_cast<double>(r.catalog_size)) << "\" y=\"" << H - B + 18
        << "\" text-anchor=\"middle\">" << r.catalog_size << "</text>\n";
  }
  out << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10
      << "\" text-anchor=\"middle\">catalog size (items)</text>\n";
  auto series = [&](const char* name, const char* color, double ScalingRow::*field, double ly) {
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (const auto& r : rows) {
      out << px(static_cast<double>(r.catalog_size)) << "," << py(r.*field) << " ";
    }
    out << "\"/>\n";
    for (const auto& r : rows) {
      out << "<circle cx=\"" << px(static_cast<double>(r.catalog_size)) << "\" cy=\"" << py(r.*field)
          << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    }
    out << "<text x=\"" << L + 10 << "\" y=\"" << ly << "\" fill=\"" << color << "\">" << name
        << "</text>\n";
  };
  series("graph decode", "#1f77b4", &ScalingRow::decode_seconds, T + 12);
  series("exact top-k", "#d62728", &ScalingRow::exact_seconds, T + 28);
  out << "</svg>\n";
  return out.str();
}

std::vector<std::size_t> parse_size_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size() || !(v >= 1) || v != std::floor(v) || v > 1e10) {
      throw ConfigError("invalid catalog size '" + item + "'");
    }
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw ConfigError("empty catalog size list");
  return out;
}

}  // namespace rpg
