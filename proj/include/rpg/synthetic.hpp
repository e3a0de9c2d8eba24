#pragma once

#include <cstdint>

#include "rpg/core.hpp"

namespace rpg {

/// Desk-scale stand-in for a real interaction corpus.
///
/// Clusters sit at A z_c where z_c is a point in a low-dimensional latent space, so nearby
/// clusters have nearby item vectors. Items are noisy copies of their cluster center. Users walk a
/// cluster-level Markov chain: with probability 1 - noise the next cluster is a fixed successor of
/// the current one, otherwise it is uniform; the next item is uniform within the chosen cluster.
struct SyntheticConfig {
  std::size_t num_items = 10000;
  std::size_t num_users = 5000;
  std::size_t min_length = 5;
  std::size_t max_length = 20;
  std::size_t clusters = 500;
  std::size_t latent_dim = 8;
  double noise = 0.1;
  double item_spread = 0.3;  // std of item offsets relative to unit-scale cluster centers
  std::size_t d = 64;
  std::uint64_t seed = 7;

  void validate(std::size_t codebook_size = 2) const;
};

struct SyntheticWorld {
  EmbeddingMatrix<float> item_vectors;  // N x d
  InteractionDataset dataset;
  std::vector<std::uint32_t> item_cluster;   // N
  std::vector<std::uint32_t> successor;      // clusters
};

SyntheticWorld gen_synthetic(const SyntheticConfig& config);

}  // namespace rpg
