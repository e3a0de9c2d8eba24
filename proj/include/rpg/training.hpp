#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rpg/core.hpp"
#include "rpg/evaluation.hpp"
#include "rpg/model.hpp"

namespace rpg {

enum class OptimizerKind { kSgd, kAdam };

std::string to_string(OptimizerKind o);
OptimizerKind parse_optimizer(const std::string& text);

struct TrainConfig {
  double lr = 0.05;
  std::size_t epochs = 30;
  std::size_t batch = 256;
  std::uint64_t seed = 7;
  ModelShape shape;
  OptimizerKind optimizer = OptimizerKind::kSgd;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::size_t patience = 20;
  std::size_t valid_users = 0;  // 0 = whole validation split
  std::size_t eval_every = 1;   // epochs between validation passes

  void validate() const;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0;
  double valid_ndcg10 = -1;  // -1 when not evaluated this epoch
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;
  double best_valid_ndcg10 = 0;
  bool stopped_early = false;
};

/// Exact-ranking NDCG@10 over `queries` (first `limit` of them when limit > 0).
double exact_ndcg10(const Checkpoint<float>& ckpt, const ItemCatalog& catalog,
                    std::span<const Example> queries, std::size_t limit = 0);

/// Mini-batch training on split.train; keeps the checkpoint with the best validation NDCG@10.
Checkpoint<float> train(const SplitView& split, const ItemCatalog& catalog,
                        const TrainConfig& config, TrainLog* log = nullptr);

}  // namespace rpg
