#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rpg/core.hpp"

namespace rpg {

enum class EmptyClusterPolicy {
  kFarthestPoint,  // re-seed from the point farthest from its centroid
};

struct KMeansResult {
  RowMatrix<double> centroids;      // M x dim
  std::vector<Code> assignments;    // N
  std::vector<double> sse_history;  // SSE after every assignment step
};

/// Lloyd's k-means with k-means++ seeding.
KMeansResult kmeans_subspace(const RowMatrix<double>& vectors, std::size_t M, std::size_t iters,
                             std::uint64_t seed,
                             EmptyClusterPolicy policy = EmptyClusterPolicy::kFarthestPoint);

/// Lloyd's k-means starting from the given centroids.
KMeansResult kmeans_refine(const RowMatrix<double>& vectors, RowMatrix<double> centroids,
                           std::size_t iters,
                           EmptyClusterPolicy policy = EmptyClusterPolicy::kFarthestPoint);

/// Index of the closest row of `centroids` to `x`; lowest index wins ties.
Code nearest_centroid(std::span<const double> x, const RowMatrix<double>& centroids,
                      double* best_distance = nullptr);

struct OPQTrainConfig {
  std::size_t outer_iters = 10;
  std::size_t kmeans_iters = 25;
  std::uint64_t seed = 0;
  EmptyClusterPolicy empty_clusters = EmptyClusterPolicy::kFarthestPoint;
  /// Keep R = I throughout; with outer_iters = 1 this is plain PQ.
  bool skip_rotation = false;
  /// Scale each input vector to unit L2 norm before rotation.
  bool normalize = false;

  void validate() const;
};

/// Orthogonal rotation followed by per-subspace codebooks.
struct OPQModel {
  SemanticScheme scheme;
  MatrixXd rotation;                         // d x d, applied as R * x
  std::vector<RowMatrix<double>> codebooks;  // m tables of M x (d/m)
  bool normalize = false;

  /// Rotated (and optionally normalized) copy of `vectors`, one row per item.
  RowMatrix<double> rotate(const EmbeddingMatrix<float>& vectors) const;

  /// max |R^T R - I|.
  double orthogonality_error() const;

  std::uint64_t digest() const;
  void validate() const;
};

struct OPQTrainLog {
  /// Mean quantization error after each outer iteration.
  std::vector<double> error_history;
};

OPQModel train_opq(const EmbeddingMatrix<float>& vectors, const SemanticScheme& scheme,
                   const OPQTrainConfig& config, OPQTrainLog* log = nullptr);

/// Digit j of item i is the nearest codebook-j centroid to subvector j of R x_i.
ItemCatalog encode_items(const OPQModel& model, const EmbeddingMatrix<float>& vectors);

/// (1/N) sum_i |R x_i - q(R x_i)|^2.
double quantization_error(const OPQModel& model, const EmbeddingMatrix<float>& vectors);

std::uint64_t save_opq(const std::string& path, const OPQModel& model);
OPQModel load_opq(const std::string& path);

}  // namespace rpg
