#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rpg/core.hpp"
#include "rpg/model.hpp"

namespace rpg {

using TokenTables = std::vector<EmbeddingMatrix<float>>;

/// Fixed-degree directed adjacency; row i starts with i itself.
struct DecodingGraph {
  std::size_t k = 0;       // requested degree (self included)
  std::size_t degree = 0;  // min(k, N)
  std::vector<ItemId> adjacency;  // N x degree
  std::uint64_t checkpoint_digest = 0;
  std::uint64_t catalog_digest = 0;
  std::string builder = "exact";

  std::size_t size() const { return degree ? adjacency.size() / degree : 0; }
  std::span<const ItemId> row(ItemId item) const {
    return {adjacency.data() + static_cast<std::size_t>(item) * degree, degree};
  }
};

/// Stored neighbor list of `item`, self first.
std::span<const ItemId> neighbors(const DecodingGraph& graph, ItemId item);

/// sum_j e_{j,a_j} . e_{j,b_j}, accumulated in double.
double id_similarity(std::span<const Code> a, std::span<const Code> b, const TokenTables& tables);

struct GraphBuildOptions {
  std::size_t threads = 1;
};

/// Exact per-node top-(k-1) by id_similarity plus the self loop; ties by ascending id.
DecodingGraph build_decoding_graph(const ItemCatalog& catalog, const TokenTables& tables,
                                   std::size_t k, const GraphBuildOptions& options = {});

/// Same, recording the digests the graph depends on.
DecodingGraph build_decoding_graph(const ItemCatalog& catalog, const Checkpoint<float>& ckpt,
                                   std::size_t k, const GraphBuildOptions& options = {});

struct ApproxGraphConfig {
  std::size_t tables = 4;    // independent sign-hash orderings
  std::size_t bits = 16;     // hash bits per ordering
  std::size_t window = 0;    // items on each side of a node per ordering; 0 -> k
  std::uint64_t seed = 17;
  std::size_t threads = 1;
};

/// Candidate-restricted builder for catalogs where the quadratic scan is too slow. Items are
/// ordered by random-hyperplane sign hashes of their concatenated token embeddings; each node
/// scores its window neighbors exactly and keeps the best k-1. Same row invariants as the exact
/// builder.
DecodingGraph build_decoding_graph_approx(const ItemCatalog& catalog, const TokenTables& tables,
                                          std::size_t k, const ApproxGraphConfig& config = {});

/// Throws StalenessError if the graph was built from a different checkpoint or catalog.
void require_fresh(const DecodingGraph& graph, std::uint64_t checkpoint_digest,
                   std::uint64_t catalog_digest);

/// Throws DataError if any row breaks the self-first / degree / uniqueness invariants.
void validate_graph(const DecodingGraph& graph, std::size_t catalog_size);

std::uint64_t save_graph(const std::string& path, const DecodingGraph& graph,
                         const SemanticScheme& scheme);
DecodingGraph load_graph(const std::string& path);

}  // namespace rpg
