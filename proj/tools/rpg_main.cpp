// rpg: tokenize -> train -> build-graph -> recommend / eval / bench-scaling.

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "rpg/container.hpp"
#include "rpg/pipeline.hpp"

namespace {

std::string read_input(const std::string& path) {
  std::stringstream buf;
  if (path.empty() || path == "-") {
    buf << std::cin.rdbuf();
  } else {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw rpg::ArtifactError("cannot open input: " + path);
    buf << in.rdbuf();
  }
  return buf.str();
}

void emit(const std::string& text, const std::string& output) {
  if (output.empty()) {
    std::cout << text;
  } else {
    rpg::write_file_atomic(output, text);
  }
}

template <class T>
void override_with(T& field, const std::optional<T>& flag) {
  if (flag) field = *flag;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semantic-ID generative retrieval with graph-constrained decoding"};
  app.require_subcommand(1);
  std::string config_path = "rpg.toml";
  std::optional<std::size_t> threads;
  std::optional<std::uint64_t> seed;
  app.add_option("-c,--config", config_path, "pipeline config file")->capture_default_str();
  app.add_option("--threads", threads, "worker threads for graph building and evaluation");
  app.add_option("--seed", seed, "global seed (overrides config and RPG_SEED)");

  auto* synth = app.add_subcommand("synth", "generate a synthetic item/interaction corpus");
  auto* tokenize = app.add_subcommand("tokenize", "train OPQ and write semantic IDs");

  auto* train = app.add_subcommand("train", "train the MTP model");
  std::optional<double> lr, tau;
  std::optional<std::size_t> epochs, batch;
  std::optional<std::string> agg, encoder, optimizer;
  train->add_option("--lr", lr);
  train->add_option("--epochs", epochs);
  train->add_option("--batch", batch);
  train->add_option("--tau", tau);
  train->add_option("--agg", agg)->check(CLI::IsMember({"mean", "max"}));
  train->add_option("--encoder", encoder)->check(CLI::IsMember({"reference", "attention"}));
  train->add_option("--optimizer", optimizer)->check(CLI::IsMember({"sgd", "adam"}));

  auto* build = app.add_subcommand("build-graph", "build the item decoding graph");
  std::optional<std::size_t> k;
  build->add_option("--k", k, "neighbors per item, self included");

  std::optional<std::size_t> b, k_graph, q, topk;
  std::string input, output;
  auto add_decode_flags = [&](CLI::App* sub) {
    sub->add_option("--b", b, "beam size");
    sub->add_option("--q", q, "decoding steps");
    sub->add_option("--topk", topk, "items returned");
  };
  auto* recommend = app.add_subcommand("recommend", "graph-constrained decoding for one history");
  add_decode_flags(recommend);
  recommend->add_option("--k-graph", k_graph, "graph degree (rebuilt in memory if different)");
  recommend->add_option("-i,--input", input, "history file (default stdin)");
  recommend->add_option("-o,--output", output, "write TSV here instead of stdout");

  auto* score = app.add_subcommand("score", "exact top-K by full enumeration (debugging)");
  score->add_option("--topk", topk, "items returned");
  score->add_option("-i,--input", input, "history file (default stdin)");
  score->add_option("-o,--output", output, "write TSV here instead of stdout");

  auto* eval = app.add_subcommand("eval", "leave-last-out evaluation report (JSON)");
  add_decode_flags(eval);

  auto* bench = app.add_subcommand("bench-scaling", "decode vs exact top-K time over catalog size");
  std::optional<std::string> dummy;
  std::optional<std::size_t> repetitions, queries;
  bench->add_option("--dummy", dummy, "total catalog sizes, e.g. 2e4,1e5,5e5");
  bench->add_option("--repetitions", repetitions);
  bench->add_option("--queries", queries);
  add_decode_flags(bench);
  bench->add_option("--k-graph", k_graph, "graph degree");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 4;
  }

  try {
    auto config = rpg::PipelineConfig::load(config_path);
    rpg::apply_seed_env(config);
    override_with(config.seed, seed);
    override_with(config.threads, threads);
    override_with(config.train.lr, lr);
    override_with(config.train.epochs, epochs);
    override_with(config.train.batch, batch);
    override_with(config.train.shape.tau, tau);
    if (agg) config.train.shape.aggregation = rpg::parse_aggregation(*agg);
    if (encoder) config.train.shape.encoder = rpg::parse_encoder(*encoder);
    if (optimizer) config.train.optimizer = rpg::parse_optimizer(*optimizer);
    override_with(config.graph_k, k);
    override_with(config.decode.beam, b);
    override_with(config.decode.steps, q);
    override_with(config.decode.top_k, topk);
    if (dummy) config.bench.sizes = rpg::parse_size_list(*dummy);
    override_with(config.bench.repetitions, repetitions);
    override_with(config.bench.queries, queries);
    if (k_graph && *bench) config.graph_k = *k_graph;
    config.propagate();

    if (*synth) {
      rpg::cmd_synth(config, std::cerr);
    } else if (*tokenize) {
      rpg::cmd_tokenize(config, std::cerr);
    } else if (*train) {
      rpg::cmd_train(config, std::cerr);
    } else if (*build) {
      rpg::cmd_build_graph(config, std::cerr);
    } else if (*recommend || *score) {
      const auto catalog = rpg::load_catalog(config.paths.catalog);
      const auto history = rpg::parse_history(read_input(input), catalog.size());
      emit(*recommend ? rpg::cmd_recommend(config, history, k_graph)
                      : rpg::cmd_score(config, history),
           output);
    } else if (*eval) {
      std::cout << rpg::cmd_eval(config, std::cerr);
    } else if (*bench) {
      rpg::cmd_bench(config, std::cerr);
    }
  } catch (const std::exception& e) {
    std::cerr << "rpg: error: " << e.what() << "\n";
    return rpg::exit_code_for(e);
  }
  return 0;
}
