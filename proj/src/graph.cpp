#include "rpg/graph.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <thread>

#include "rpg/container.hpp"

namespace rpg {

namespace {

// Shared by the similarity tables and id_similarity so both round identically.
[[gnu::noinline]] double token_dot(const float* a, const float* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t t = 0; t < n; ++t) acc += static_cast<double>(a[t]) * static_cast<double>(b[t]);
  return acc;
}

void check_tables(const TokenTables& tables, const SemanticScheme& scheme) {
  if (tables.size() != scheme.m) throw ContractViolation("token tables: count != m");
  for (const auto& t : tables) {
    if (static_cast<std::size_t>(t.rows()) != scheme.M) {
      throw ContractViolation("token tables: row count != M");
    }
  }
}

// T_j(a, b) = e_{j,a} . e_{j,b}, one M x M table per digit.
std::vector<RowMatrix<double>> similarity_tables(const TokenTables& tables) {
  std::vector<RowMatrix<double>> out;
  for (const auto& E : tables) {
    const auto M = E.rows();
    const auto d = static_cast<std::size_t>(E.cols());
    RowMatrix<double> T(M, M);
    for (Eigen::Index a = 0; a < M; ++a) {
      for (Eigen::Index b = 0; b < M; ++b) T(a, b) = token_dot(E.row(a).data(), E.row(b).data(), d);
    }
    out.push_back(std::move(T));
  }
  return out;
}

struct Candidate {
  double sim;
  ItemId item;
};

bool better(const Candidate& a, const Candidate& b) {
  if (a.sim != b.sim) return a.sim > b.sim;
  return a.item < b.item;
}

// Writes self followed by the best (degree - 1) candidates.
void fill_row(ItemId self, std::vector<Candidate>& cands, std::size_t degree, ItemId* out) {
  const std::size_t keep = std::min(degree - 1, cands.size());
  if (keep < cands.size()) {
    std::nth_element(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                     better);
  }
  std::sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), better);
  out[0] = self;
  for (std::size_t i = 0; i < keep; ++i) out[i + 1] = cands[i].item;
}

template <class F>
void parallel_rows(std::size_t n, std::size_t threads, F&& body) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    body(0, n);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t lo = t * chunk, hi = std::min(n, lo + chunk);
    if (lo < hi) pool.emplace_back([&, lo, hi] { body(lo, hi); });
  }
  for (auto& th : pool) th.join();
}

}  // namespace

std::span<const ItemId> neighbors(const DecodingGraph& graph, ItemId item) {
  if (item >= graph.size()) {
    throw ContractViolation("neighbors: item " + std::to_string(item) + " outside graph of " +
                            std::to_string(graph.size()));
  }
  return graph.row(item);
}

double id_similarity(std::span<const Code> a, std::span<const Code> b, const TokenTables& tables) {
  if (a.size() != tables.size() || b.size() != tables.size()) {
    throw ContractViolation("id_similarity: id length != digit count");
  }
  double total = 0.0;
  for (std::size_t j = 0; j < tables.size(); ++j) {
    const auto& E = tables[j];
    if (a[j] >= E.rows() || b[j] >= E.rows()) {
      throw ContractViolation("id_similarity: code out of range at digit " + std::to_string(j));
    }
    total += token_dot(E.row(a[j]).data(), E.row(b[j]).data(), static_cast<std::size_t>(E.cols()));
  }
  return total;
}

DecodingGraph build_decoding_graph(const ItemCatalog& catalog, const TokenTables& tables,
                                   std::size_t k, const GraphBuildOptions& options) {
  if (k < 1) throw ConfigError("build_decoding_graph: k must be >= 1");
  const auto& scheme = catalog.scheme();
  check_tables(tables, scheme);
  const std::size_t n = catalog.size();
  const std::size_t m = scheme.m;

  DecodingGraph g;
  g.k = k;
  g.degree = std::min(k, n);
  g.catalog_digest = catalog.digest();
  g.adjacency.resize(n * g.degree);
  if (n == 0) return g;

  const auto sims = similarity_tables(tables);
  const RowMatrix<Code> by_digit = catalog.codes().transpose();  // m x N

  parallel_rows(n, options.threads, [&](std::size_t lo, std::size_t hi) {
    std::vector<double> acc(n);
    std::vector<Candidate> cands;
    cands.reserve(n);
    for (std::size_t a = lo; a < hi; ++a) {
      std::fill(acc.begin(), acc.end(), 0.0);
      const auto id = catalog.id(static_cast<ItemId>(a));
      for (std::size_t j = 0; j < m; ++j) {
        const double* trow = sims[j].row(id[j]).data();
        const Code* col = by_digit.row(static_cast<Eigen::Index>(j)).data();
        for (std::size_t b = 0; b < n; ++b) acc[b] += trow[col[b]];
      }
      cands.clear();
      for (std::size_t b = 0; b < n; ++b) {
        if (b != a) cands.push_back({acc[b], static_cast<ItemId>(b)});
      }
      fill_row(static_cast<ItemId>(a), cands, g.degree, g.adjacency.data() + a * g.degree);
    }
  });
  return g;
}

DecodingGraph build_decoding_graph(const ItemCatalog& catalog, const Checkpoint<float>& ckpt,
                                   std::size_t k, const GraphBuildOptions& options) {
  DecodingGraph g = build_decoding_graph(catalog, ckpt.tables, k, options);
  g.checkpoint_digest = ckpt.digest();
  return g;
}

DecodingGraph build_decoding_graph_approx(const ItemCatalog& catalog, const TokenTables& tables,
                                          std::size_t k, const ApproxGraphConfig& config) {
  if (k < 1) throw ConfigError("build_decoding_graph_approx: k must be >= 1");
  if (config.tables < 1 || config.bits < 1 || config.bits > 63) {
    throw ConfigError("build_decoding_graph_approx: need tables >= 1 and 1 <= bits <= 63");
  }
  const auto& scheme = catalog.scheme();
  check_tables(tables, scheme);
  const std::size_t n = catalog.size();
  const std::size_t m = scheme.m;
  const std::size_t window = config.window ? config.window : k;

  DecodingGraph g;
  g.k = k;
  g.degree = std::min(k, n);
  g.catalog_digest = catalog.digest();
  g.builder = "approx";
  g.adjacency.resize(n * g.degree);
  if (n == 0) return g;

  const auto sims = similarity_tables(tables);
  const auto d = tables[0].cols();

  // Orderings of item positions, one per hash table.
  std::vector<std::vector<ItemId>> orders(config.tables);
  std::vector<std::vector<std::uint32_t>> position(config.tables, std::vector<std::uint32_t>(n));
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t t = 0; t < config.tables; ++t) {
    // Per-digit token projections onto `bits` random hyperplanes: proj[j] is M x bits.
    std::vector<RowMatrix<double>> proj(m);
    for (std::size_t j = 0; j < m; ++j) {
      MatrixXd planes(d, static_cast<Eigen::Index>(config.bits));
      for (Eigen::Index i = 0; i < planes.size(); ++i) planes.data()[i] = gauss(rng);
      proj[j] = tables[j].cast<double>() * planes;
    }
    std::vector<std::uint64_t> hash(n);
    VectorXd acc(static_cast<Eigen::Index>(config.bits));
    for (std::size_t i = 0; i < n; ++i) {
      const auto id = catalog.id(static_cast<ItemId>(i));
      acc.setZero();
      for (std::size_t j = 0; j < m; ++j) acc += proj[j].row(id[j]).transpose();
      std::uint64_t h = 0;
      for (Eigen::Index b = 0; b < acc.size(); ++b) h = (h << 1) | (acc[b] > 0.0 ? 1u : 0u);
      hash[i] = h;
    }
    auto& order = orders[t];
    order.resize(n);
    std::iota(order.begin(), order.end(), ItemId{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](ItemId a, ItemId b) { return hash[a] < hash[b]; });
    for (std::size_t p = 0; p < n; ++p) position[t][order[p]] = static_cast<std::uint32_t>(p);
  }

  parallel_rows(n, config.threads, [&](std::size_t lo, std::size_t hi) {
    std::vector<ItemId> pool;
    std::vector<Candidate> cands;
    for (std::size_t a = lo; a < hi; ++a) {
      pool.clear();
      for (std::size_t t = 0; t < config.tables; ++t) {
        const std::size_t p = position[t][a];
        const std::size_t begin = p >= window ? p - window : 0;
        const std::size_t end = std::min(n, p + window + 1);
        for (std::size_t q = begin; q < end; ++q) {
          if (orders[t][q] != a) pool.push_back(orders[t][q]);
        }
      }
      std::sort(pool.begin(), pool.end());
      pool.erase(std::unique(pool.begin(), pool.end()), pool.end());
      const auto id = catalog.id(static_cast<ItemId>(a));
      cands.clear();
      for (ItemId b : pool) {
        const auto other = catalog.id(b);
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) s += sims[j](id[j], other[j]);
        cands.push_back({s, b});
      }
      ItemId* out = g.adjacency.data() + a * g.degree;
      fill_row(static_cast<ItemId>(a), cands, g.degree, out);
      // Small windows may leave a short row; pad with the nearest unused ids so the degree is fixed.
      std::size_t filled = 1 + std::min(g.degree - 1, cands.size());
      for (std::size_t step = 1; filled < g.degree; ++step) {
        for (long sign : {1L, -1L}) {
          const long c = static_cast<long>(a) + sign * static_cast<long>(step);
          if (filled == g.degree || c < 0 || c >= static_cast<long>(n)) continue;
          if (std::find(out, out + filled, static_cast<ItemId>(c)) == out + filled) {
            out[filled++] = static_cast<ItemId>(c);
          }
        }
      }
    }
  });
  return g;
}

void require_fresh(const DecodingGraph& graph, std::uint64_t checkpoint_digest,
                   std::uint64_t catalog_digest) {
  if (graph.catalog_digest != catalog_digest) {
    throw StalenessError("decoding graph was built for catalog " +
                         digest_hex(graph.catalog_digest) + ", current catalog is " +
                         digest_hex(catalog_digest) + "; rebuild the graph");
  }
  if (graph.checkpoint_digest != checkpoint_digest) {
    throw StalenessError("decoding graph was built for checkpoint " +
                         digest_hex(graph.checkpoint_digest) + ", current checkpoint is " +
                         digest_hex(checkpoint_digest) + "; rebuild the graph");
  }
}

void validate_graph(const DecodingGraph& graph, std::size_t catalog_size) {
  if (graph.degree != std::min(graph.k, catalog_size) ||
      graph.adjacency.size() != catalog_size * graph.degree) {
    throw DataError("graph: degree/size does not match catalog");
  }
  std::vector<ItemId> row;
  for (std::size_t i = 0; i < catalog_size; ++i) {
    auto r = graph.row(static_cast<ItemId>(i));
    if (r.empty() || r[0] != i) throw DataError("graph: row " + std::to_string(i) + " lacks self");
    row.assign(r.begin(), r.end());
    std::sort(row.begin(), row.end());
    if (std::adjacent_find(row.begin(), row.end()) != row.end()) {
      throw DataError("graph: duplicate neighbor in row " + std::to_string(i));
    }
    if (!row.empty() && row.back() >= catalog_size) {
      throw DataError("graph: neighbor out of range in row " + std::to_string(i));
    }
  }
}

std::uint64_t save_graph(const std::string& path, const DecodingGraph& graph,
                         const SemanticScheme& scheme) {
  ArtifactWriter w("graph", scheme);
  w.meta()["k"] = graph.k;
  w.meta()["degree"] = graph.degree;
  w.meta()["builder"] = graph.builder;
  w.meta()["checkpoint_digest"] = digest_hex(graph.checkpoint_digest);
  w.meta()["catalog_digest"] = digest_hex(graph.catalog_digest);
  w.add_u32("adjacency", {graph.size(), graph.degree}, graph.adjacency);
  return w.write(path);
}

DecodingGraph load_graph(const std::string& path) {
  auto a = Artifact::read(path, "graph");
  DecodingGraph g;
  try {
    g.k = a.meta().at("k").get<std::size_t>();
    g.degree = a.meta().at("degree").get<std::size_t>();
    g.builder = a.meta().value("builder", std::string("exact"));
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError(path + ": malformed graph meta: " + e.what());
  }
  g.checkpoint_digest = a.meta_digest("checkpoint_digest");
  g.catalog_digest = a.meta_digest("catalog_digest");
  g.adjacency = a.u32("adjacency");
  const auto& shape = a.shape("adjacency");
  if (shape.size() != 2 || shape[1] != g.degree) throw ArtifactError(path + ": adjacency shape");
  try {
    validate_graph(g, shape[0]);
  } catch (const DataError& e) {
    throw ArtifactError(path + ": " + e.what());
  }
  return g;
}

}  // namespace rpg
