#include "rpg/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace rpg {

void SyntheticConfig::validate(std::size_t codebook_size) const {
  if (num_items < codebook_size) throw ConfigError("synthetic: need N >= M");
  if (num_users < 1 || clusters < 1 || latent_dim < 1 || d < 1) {
    throw ConfigError("synthetic: counts must be positive");
  }
  if (clusters > num_items) throw ConfigError("synthetic: more clusters than items");
  if (min_length < 3 || max_length < min_length) {
    throw ConfigError("synthetic: need 3 <= min_length <= max_length");
  }
  if (noise < 0.0 || noise > 1.0) throw ConfigError("synthetic: noise must be in [0, 1]");
  if (item_spread < 0.0) throw ConfigError("synthetic: item_spread must be >= 0");
}

SyntheticWorld gen_synthetic(const SyntheticConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const std::size_t C = config.clusters;
  const std::size_t N = config.num_items;
  const auto d = static_cast<Eigen::Index>(config.d);
  const auto r = static_cast<Eigen::Index>(config.latent_dim);

  // Latent cluster positions and a fixed linear embedding into R^d scaled so centers have unit
  // expected norm.
  MatrixXd latent(r, static_cast<Eigen::Index>(C));
  for (Eigen::Index i = 0; i < latent.size(); ++i) latent.data()[i] = gauss(rng);
  MatrixXd mixing(d, r);
  for (Eigen::Index i = 0; i < mixing.size(); ++i) mixing.data()[i] = gauss(rng);
  mixing /= std::sqrt(static_cast<double>(d * r));
  const MatrixXd centers = mixing * latent;  // d x C

  SyntheticWorld world;
  world.item_cluster.resize(N);
  std::vector<std::vector<ItemId>> members(C);
  for (std::size_t i = 0; i < N; ++i) {
    world.item_cluster[i] = static_cast<std::uint32_t>(i % C);
    members[i % C].push_back(static_cast<ItemId>(i));
  }
  const double spread = config.item_spread / std::sqrt(static_cast<double>(d));
  world.item_vectors.resize(static_cast<Eigen::Index>(N), d);
  for (std::size_t i = 0; i < N; ++i) {
    const auto c = static_cast<Eigen::Index>(world.item_cluster[i]);
    for (Eigen::Index t = 0; t < d; ++t) {
      world.item_vectors(static_cast<Eigen::Index>(i), t) =
          static_cast<float>(centers(t, c) + spread * gauss(rng));
    }
  }

  world.successor.resize(C);
  std::iota(world.successor.begin(), world.successor.end(), 0u);
  std::shuffle(world.successor.begin(), world.successor.end(), rng);

  auto& ds = world.dataset;
  ds.num_items = N;
  ds.sequences.resize(config.num_users);
  std::uniform_int_distribution<std::size_t> length(config.min_length, config.max_length);
  std::uniform_int_distribution<std::size_t> any_cluster(0, C - 1);
  for (auto& seq : ds.sequences) {
    const std::size_t len = length(rng);
    std::size_t cluster = any_cluster(rng);
    for (std::size_t t = 0; t < len; ++t) {
      if (t > 0) {
        cluster = unit(rng) < config.noise ? any_cluster(rng) : world.successor[cluster];
      }
      const auto& pool = members[cluster];
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      seq.push_back(pool[pick(rng)]);
    }
  }
  return world;
}

}  // namespace rpg
