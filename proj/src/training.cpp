#include "rpg/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "rpg/scorer.hpp"

namespace rpg {

std::string to_string(OptimizerKind o) { return o == OptimizerKind::kSgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer(const std::string& text) {
  if (text == "sgd") return OptimizerKind::kSgd;
  if (text == "adam") return OptimizerKind::kAdam;
  throw ConfigError("unknown optimizer '" + text + "' (expected sgd or adam)");
}

void TrainConfig::validate() const {
  shape.scheme.validate();
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch < 1) throw ConfigError("train: batch must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be > 0");
  if (!(shape.tau > 0.0)) throw ConfigError("temperature must be > 0");
  if (eval_every < 1) throw ConfigError("train: eval_every must be >= 1");
  if (optimizer == OptimizerKind::kAdam &&
      !(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && adam_eps > 0)) {
    throw ConfigError("train: invalid adam hyperparameters");
  }
}

double exact_ndcg10(const Checkpoint<float>& ckpt, const ItemCatalog& catalog,
                    std::span<const Example> queries, std::size_t limit) {
  const std::size_t n = limit ? std::min(limit, queries.size()) : queries.size();
  if (n == 0) return 0.0;
  const std::size_t K = std::min<std::size_t>(10, catalog.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = encode_history<float>(queries[i].history, catalog, ckpt);
    const auto top = exact_topk(build_logit_cache(s, ckpt), catalog, K);
    sum += ndcg_at_k(top, queries[i].target, 10);
  }
  return sum / static_cast<double>(n);
}

namespace {

struct Slice {
  float* data;
  Eigen::Index size;
};

std::vector<Slice> slices(Checkpoint<float>& c) {
  std::vector<Slice> out;
  for_each_tensor(c, [&](const std::string&, auto& t) { out.push_back({t.data(), t.size()}); });
  return out;
}

class Optimizer {
 public:
  Optimizer(const TrainConfig& config, const Checkpoint<float>& like) : config_(config) {
    if (config.optimizer == OptimizerKind::kAdam) {
      m1_ = like.zeros_like();
      m2_ = like.zeros_like();
    }
  }

  void step(Checkpoint<float>& params, Checkpoint<float>& grad) {
    auto p = slices(params);
    auto g = slices(grad);
    const auto lr = static_cast<float>(config_.lr);
    if (config_.optimizer == OptimizerKind::kSgd) {
      for (std::size_t t = 0; t < p.size(); ++t) {
        for (Eigen::Index i = 0; i < p[t].size; ++i) p[t].data[i] -= lr * g[t].data[i];
      }
      return;
    }
    ++steps_;
    auto a = slices(m1_);
    auto b = slices(m2_);
    const auto b1 = static_cast<float>(config_.beta1);
    const auto b2 = static_cast<float>(config_.beta2);
    const auto eps = static_cast<float>(config_.adam_eps);
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    const auto step = static_cast<float>(config_.lr * std::sqrt(c2) / c1);
    for (std::size_t t = 0; t < p.size(); ++t) {
      for (Eigen::Index i = 0; i < p[t].size; ++i) {
        const float gi = g[t].data[i];
        a[t].data[i] = b1 * a[t].data[i] + (1 - b1) * gi;
        b[t].data[i] = b2 * b[t].data[i] + (1 - b2) * gi * gi;
        p[t].data[i] -= step * a[t].data[i] / (std::sqrt(b[t].data[i]) + eps);
      }
    }
  }

 private:
  const TrainConfig& config_;
  Checkpoint<float> m1_, m2_;
  std::uint64_t steps_ = 0;
};

bool finite(Checkpoint<float>& c) {
  for (const auto& s : slices(c)) {
    for (Eigen::Index i = 0; i < s.size; ++i) {
      if (!std::isfinite(s.data[i])) return false;
    }
  }
  return true;
}

void zero(Checkpoint<float>& c) {
  for (auto& s : slices(c)) std::fill(s.data, s.data + s.size, 0.0f);
}

}  // namespace

Checkpoint<float> train(const SplitView& split, const ItemCatalog& catalog,
                        const TrainConfig& config, TrainLog* log) {
  config.validate();
  if (!(config.shape.scheme == catalog.scheme())) {
    throw ConfigError("train: model scheme does not match catalog scheme");
  }
  if (split.train.empty() || split.valid.empty()) {
    throw DataError("train: dataset has no usable train/validation split");
  }

  auto params = Checkpoint<float>::random(config.shape, config.seed);
  Checkpoint<float> grad = params.zeros_like();
  Optimizer opt(config, params);
  std::mt19937_64 rng(config.seed ^ 0x5eed5eedULL);

  std::vector<std::size_t> order(split.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<Example> batch;
  batch.reserve(config.batch);

  TrainLog local;
  TrainLog& out = log ? *log : local;
  out = {};
  Checkpoint<float> best = params;
  double best_score = -1.0;
  std::size_t since_best = 0;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += config.batch) {
      const std::size_t hi = std::min(order.size(), lo + config.batch);
      batch.clear();
      for (std::size_t i = lo; i < hi; ++i) batch.push_back(split.train[order[i]]);
      zero(grad);
      loss_sum += static_cast<double>(mtp_backward<float>(batch, catalog, params, &grad));
      ++batches;
      opt.step(params, grad);
    }
    if (!finite(params)) {
      throw DataError("train: parameters diverged at epoch " + std::to_string(epoch) +
                      " (lower the learning rate)");
    }

    EpochLog entry{epoch, loss_sum / static_cast<double>(batches), -1.0};
    const bool last = epoch == config.epochs;
    if (epoch % config.eval_every == 0 || last) {
      entry.valid_ndcg10 = exact_ndcg10(params, catalog, split.valid, config.valid_users);
      if (entry.valid_ndcg10 > best_score) {
        best_score = entry.valid_ndcg10;
        best = params;
        out.best_epoch = epoch;
        since_best = 0;
      } else {
        since_best += config.eval_every;
      }
    }
    out.epochs.push_back(entry);
    if (config.patience && since_best >= config.patience) {
      out.stopped_early = true;
      break;
    }
  }
  out.best_valid_ndcg10 = best_score;
  return best;
}

}  // namespace rpg
