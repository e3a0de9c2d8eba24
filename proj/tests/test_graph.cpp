#include <doctest.h>

#include <algorithm>
#include <set>

#include "helpers.hpp"
#include "rpg/container.hpp"
#include "rpg/graph.hpp"

using namespace rpg;

namespace {

TokenTables random_tables(const SemanticScheme& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g(0.0f, 1.0f);
  TokenTables t;
  for (std::size_t j = 0; j < s.m; ++j) {
    EmbeddingMatrix<float> e(static_cast<Eigen::Index>(s.M), static_cast<Eigen::Index>(s.d));
    for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = g(rng);
    t.push_back(e);
  }
  return t;
}

double brute_similarity(std::span<const Code> a, std::span<const Code> b, const TokenTables& t) {
  double total = 0.0;
  for (std::size_t j = 0; j < t.size(); ++j) {
    double dot = 0.0;
    for (Eigen::Index c = 0; c < t[j].cols(); ++c) {
      dot += static_cast<double>(t[j](a[j], c)) * static_cast<double>(t[j](b[j], c));
    }
    total += dot;
  }
  return total;
}

// Self followed by the k-1 most similar others, ties by ascending id.
std::vector<ItemId> brute_row(ItemId a, const ItemCatalog& catalog, const TokenTables& t,
                              std::size_t k) {
  std::vector<std::pair<double, ItemId>> all;
  for (ItemId b = 0; b < catalog.size(); ++b) {
    if (b != a) all.emplace_back(id_similarity(catalog.id(a), catalog.id(b), t), b);
  }
  std::sort(all.begin(), all.end(), [](const auto& x, const auto& y) {
    return x.first != y.first ? x.first > y.first : x.second < y.second;
  });
  std::vector<ItemId> row{a};
  for (std::size_t i = 0; i + 1 < k && i < all.size(); ++i) row.push_back(all[i].second);
  return row;
}

void check_row_invariants(const DecodingGraph& g, std::size_t n) {
  CHECK(g.degree == std::min(g.k, n));
  CHECK_NOTHROW(validate_graph(g, n));
  for (ItemId i = 0; i < n; ++i) {
    const auto row = neighbors(g, i);
    CHECK(row[0] == i);
    CHECK(std::set<ItemId>(row.begin(), row.end()).size() == row.size());
  }
}

}  // namespace

TEST_SUITE("graph") {

TEST_CASE("id_similarity") {
  const SemanticScheme s{2, 2, 2};
  TokenTables unit(2, EmbeddingMatrix<float>(2, 2));
  unit[0] << 1, 0, 0, 1;
  unit[1] << 1, 0, 0, 1;
  const std::vector<Code> a{0, 0}, b{0, 0}, c{1, 1};
  CHECK(id_similarity(a, b, unit) == 2.0);
  CHECK(id_similarity(a, c, unit) == 0.0);

  const SemanticScheme r{4, 16, 12};
  const auto tables = random_tables(r, 1);
  const auto catalog = test::random_catalog(r, 50, 2);
  for (ItemId i = 0; i < 50; ++i) {
    for (ItemId j = 0; j < 50; j += 7) {
      CHECK(id_similarity(catalog.id(i), catalog.id(j), tables) ==
            doctest::Approx(brute_similarity(catalog.id(i), catalog.id(j), tables)).epsilon(1e-6));
      CHECK(id_similarity(catalog.id(i), catalog.id(j), tables) ==
            id_similarity(catalog.id(j), catalog.id(i), tables));
    }
  }
  const std::vector<Code> bad{0, 16, 0, 0};
  CHECK_THROWS_AS(id_similarity(bad, catalog.id(0), tables), ContractViolation);
}

TEST_CASE("small and degenerate catalogs") {
  const SemanticScheme s{2, 4, 4};
  const auto tables = random_tables(s, 3);

  const auto one = build_decoding_graph(test::random_catalog(s, 1, 4), tables, 5);
  CHECK(one.degree == 1);
  CHECK(neighbors(one, 0).size() == 1);
  CHECK(neighbors(one, 0)[0] == 0);

  const auto catalog = test::random_catalog(s, 12, 5);
  for (std::size_t k : {12u, 13u, 100u}) {
    const auto full = build_decoding_graph(catalog, tables, k);
    check_row_invariants(full, 12);
    for (ItemId i = 0; i < 12; ++i) {
      const auto row = neighbors(full, i);
      CHECK(std::set<ItemId>(row.begin(), row.end()).size() == 12);
    }
  }
  CHECK_THROWS_AS(build_decoding_graph(catalog, tables, 0), ConfigError);
  CHECK_THROWS_AS(neighbors(build_decoding_graph(catalog, tables, 3), 12), ContractViolation);
}

TEST_CASE("exact builder matches a brute-force oracle") {
  const SemanticScheme s{4, 8, 16};
  const auto tables = random_tables(s, 6);
  const auto catalog = test::random_catalog(s, 200, 7);  // many shared tokens, so ties occur
  for (std::size_t threads : {1u, 3u}) {
    const auto g = build_decoding_graph(catalog, tables, 10, {threads});
    check_row_invariants(g, 200);
    for (ItemId i = 0; i < 200; ++i) {
      const auto row = neighbors(g, i);
      const auto expect = brute_row(i, catalog, tables, 10);
      CHECK(std::vector<ItemId>(row.begin(), row.end()) == expect);
    }
  }
}

TEST_CASE("digests, staleness and persistence") {
  const SemanticScheme s{2, 8, 8};
  const auto catalog = test::random_catalog(s, 200, 8);
  auto shape = test::small_shape(2, 8, 8, 16);
  const auto ckpt = Checkpoint<float>::random(shape, 9);
  const auto g = build_decoding_graph(catalog, ckpt, 10);
  CHECK(g.catalog_digest == catalog.digest());
  CHECK(g.checkpoint_digest == ckpt.digest());
  CHECK_NOTHROW(require_fresh(g, ckpt.digest(), catalog.digest()));
  CHECK_THROWS_AS(require_fresh(g, ckpt.digest() ^ 1, catalog.digest()), StalenessError);
  CHECK_THROWS_AS(require_fresh(g, ckpt.digest(), catalog.digest() ^ 1), StalenessError);

  const auto again = build_decoding_graph(catalog, ckpt, 10);
  CHECK(again.adjacency == g.adjacency);

  const auto dir = test::temp_dir("graph_io");
  const auto p1 = (dir / "g1.rpg").string(), p2 = (dir / "g2.rpg").string();
  save_graph(p1, g, s);
  const auto back = load_graph(p1);
  CHECK(back.adjacency == g.adjacency);
  CHECK(back.k == 10);
  CHECK(back.degree == 10);
  CHECK(back.catalog_digest == g.catalog_digest);
  CHECK(back.checkpoint_digest == g.checkpoint_digest);
  save_graph(p2, back, s);
  CHECK(test::slurp(p1) == test::slurp(p2));

  const auto a = Artifact::read(p1, "graph");
  CHECK(std::filesystem::file_size(p1) == a.header_bytes() + 200 * 10 * 4);

  // A self-consistent artifact whose rows break the invariants is rejected on load.
  auto broken = g;
  broken.adjacency[10] = 5;  // row 1 no longer starts with itself
  save_graph((dir / "bad.rpg").string(), broken, s);
  CHECK_THROWS_AS(load_graph((dir / "bad.rpg").string()), ArtifactError);
  CHECK_THROWS_AS(validate_graph(broken, 200), DataError);
}

TEST_CASE("approximate builder keeps the row invariants and finds most true neighbors") {
  const SemanticScheme s{4, 16, 16};
  const auto tables = random_tables(s, 10);
  const auto catalog = test::random_catalog(s, 2000, 11);
  const auto exact = build_decoding_graph(catalog, tables, 20);
  ApproxGraphConfig cfg;
  cfg.window = 200;
  const auto approx = build_decoding_graph_approx(catalog, tables, 20, cfg);
  CHECK(approx.builder == "approx");
  check_row_invariants(approx, 2000);

  std::size_t hit = 0;
  for (ItemId i = 0; i < 2000; ++i) {
    const auto e = neighbors(exact, i);
    const std::set<ItemId> truth(e.begin(), e.end());
    for (ItemId v : neighbors(approx, i)) hit += truth.count(v);
  }
  const double recall = static_cast<double>(hit) / (2000.0 * 20.0);
  MESSAGE("approximate graph recall@20: " << recall);
  CHECK(recall >= 0.5);

  const auto again = build_decoding_graph_approx(catalog, tables, 20, cfg);
  CHECK(again.adjacency == approx.adjacency);
  cfg.threads = 4;
  CHECK(build_decoding_graph_approx(catalog, tables, 20, cfg).adjacency == approx.adjacency);

  // A window too small to fill the row is padded.
  cfg.window = 1;
  cfg.tables = 1;
  check_row_invariants(build_decoding_graph_approx(catalog, tables, 20, cfg), 2000);
  CHECK_THROWS_AS(build_decoding_graph_approx(catalog, tables, 0), ConfigError);
}

}  // TEST_SUITE
