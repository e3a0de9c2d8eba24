#pragma once

// Command implementations behind the `rpg` binary. Each command reads its inputs from the paths in
// a PipelineConfig, verifies the digests that link artifacts together, and writes outputs
// atomically.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rpg/core.hpp"
#include "rpg/opq.hpp"
#include "rpg/scaling.hpp"
#include "rpg/synthetic.hpp"
#include "rpg/training.hpp"

namespace rpg {

/// Flat `section.key -> value` view of a sectioned key/value file:
///
///   seed = 7
///   [scheme]
///   m = 16     # comment
///   [paths]
///   catalog = "out/catalog.rpg"
class KeyValueFile {
 public:
  static KeyValueFile parse(const std::string& text, const std::string& origin = "<config>");
  static KeyValueFile read(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

struct PipelinePaths {
  std::string vectors = "data/items.vec";
  std::string dataset = "data/interactions.txt";
  std::string opq = "out/opq.rpg";
  std::string catalog = "out/catalog.rpg";
  std::string checkpoint = "out/model.rpg";
  std::string graph = "out/graph.rpg";
  std::string train_log = "out/train_log.tsv";
  std::string eval = "out/eval.json";
  std::string bench_tsv = "out/bench.tsv";
  std::string bench_svg = "out/bench.svg";
  std::string bench_json = "out/bench.json";
};

struct PipelineConfig {
  std::uint64_t seed = 7;
  std::size_t threads = 1;
  SemanticScheme scheme{16, 64, 64};
  PipelinePaths paths;
  SyntheticConfig synthetic;
  OPQTrainConfig opq;
  TrainConfig train;
  std::size_t graph_k = 100;
  std::string graph_builder = "exact";  // exact | approx
  DecodeConfig decode{10, 3, 10};
  ScalingConfig bench;

  /// Throws ConfigError on unknown keys or unparsable values. Relative paths are resolved
  /// against `base_dir`.
  static PipelineConfig from_file(const KeyValueFile& file, const std::string& base_dir = "");
  static PipelineConfig load(const std::string& path);

  /// Pushes scheme, seed and thread count into the per-module sub-configs.
  void propagate();
  /// Digest over every field that influences outputs.
  std::uint64_t digest() const;
};

/// RPG_SEED, when set, replaces the configured seed.
void apply_seed_env(PipelineConfig& config);

void cmd_synth(const PipelineConfig& config, std::ostream& log);
void cmd_tokenize(const PipelineConfig& config, std::ostream& log);
void cmd_train(const PipelineConfig& config, std::ostream& log);
void cmd_build_graph(const PipelineConfig& config, std::ostream& log);

/// Ranked `item\tlogit` lines for one history. With `k_graph` different from the stored graph's
/// k, a graph with that degree is rebuilt in memory.
std::string cmd_recommend(const PipelineConfig& config, const std::vector<ItemId>& history,
                          std::optional<std::size_t> k_graph = std::nullopt);
/// exact_topk for one history, same output format.
std::string cmd_score(const PipelineConfig& config, const std::vector<ItemId>& history);
std::string cmd_eval(const PipelineConfig& config, std::ostream& log);
void cmd_bench(const PipelineConfig& config, std::ostream& log);

/// Whitespace-separated ids; the catalog size bounds them.
std::vector<ItemId> parse_history(const std::string& text, std::size_t num_items);

/// Exit code for an exception escaping a command.
int exit_code_for(const std::exception& e);

}  // namespace rpg
