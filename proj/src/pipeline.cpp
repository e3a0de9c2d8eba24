#include "rpg/pipeline.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <limits>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "rpg/container.hpp"
#include "rpg/evaluation.hpp"
#include "rpg/graph.hpp"
#include "rpg/model.hpp"
#include "rpg/scorer.hpp"

namespace rpg {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config file
// ---------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool valid_name(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) return false;
  }
  return true;
}

}  // namespace

KeyValueFile KeyValueFile::parse(const std::string& text, const std::string& origin) {
  KeyValueFile out;
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& what) {
    throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++lineno;
    // Strip comments outside quotes.
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail("unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (!valid_name(section)) fail("bad section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected key = value");
    const std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (!valid_name(key)) fail("bad key '" + key + "'");
    if (!value.empty() && value.front() == '"') {
      if (value.size() < 2 || value.back() != '"') fail("unterminated string");
      value = value.substr(1, value.size() - 2);
    }
    const std::string full = section.empty() ? key : section + "." + key;
    if (!out.values_.emplace(full, value).second) fail("duplicate key '" + full + "'");
  }
  return out;
}

KeyValueFile KeyValueFile::read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse(buf.str(), path);
}

namespace {

class Fields {
 public:
  explicit Fields(const KeyValueFile& file) : file_(file) {}

  template <class T>
  void get(const std::string& key, T& out) {
    const auto it = file_.values().find(key);
    if (it == file_.values().end()) return;
    used_.insert(key);
    parse(key, it->second, out);
  }

  void finish() const {
    for (const auto& [key, value] : file_.values()) {
      if (!used_.count(key)) throw ConfigError("unknown config key '" + key + "'");
    }
  }

 private:
  static void parse(const std::string& key, const std::string& v, std::string& out) {
    if (v.empty()) throw ConfigError("config key '" + key + "' is empty");
    out = v;
  }
  static void parse(const std::string& key, const std::string& v, bool& out) {
    if (v == "true") out = true;
    else if (v == "false") out = false;
    else throw ConfigError("config key '" + key + "': expected true or false");
  }
  static void parse(const std::string& key, const std::string& v, double& out) {
    std::size_t used = 0;
    try {
      out = std::stod(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != v.size() || !std::isfinite(out)) {
      throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
    }
  }
  template <class T>
    requires std::is_unsigned_v<T>
  static void parse(const std::string& key, const std::string& v, T& out) {
    double x = 0;
    parse(key, v, x);
    if (x < 0 || x != std::floor(x) || x > 1.8e19) {
      throw ConfigError("config key '" + key + "': expected a non-negative integer");
    }
    if (v.find_first_of(".eE") == std::string::npos) {
      T exact{};
      const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), exact);
      if (ec != std::errc{} || p != v.data() + v.size()) {
        throw ConfigError("config key '" + key + "': integer out of range");
      }
      out = exact;
    } else {
      out = static_cast<T>(x);
    }
  }

  const KeyValueFile& file_;
  std::set<std::string> used_;
};

std::string resolve(const std::string& base, const std::string& p) {
  if (p.empty() || base.empty() || fs::path(p).is_absolute()) return p;
  return (fs::path(base) / p).lexically_normal().string();
}

}  // namespace

PipelineConfig PipelineConfig::from_file(const KeyValueFile& file, const std::string& base_dir) {
  PipelineConfig c;
  Fields f(file);
  f.get("seed", c.seed);
  f.get("threads", c.threads);
  f.get("scheme.m", c.scheme.m);
  f.get("scheme.M", c.scheme.M);
  f.get("scheme.d", c.scheme.d);

  auto& p = c.paths;
  for (auto [key, field] : {std::pair{"vectors", &p.vectors}, {"dataset", &p.dataset},
                            {"opq", &p.opq}, {"catalog", &p.catalog},
                            {"checkpoint", &p.checkpoint}, {"graph", &p.graph},
                            {"train_log", &p.train_log}, {"eval", &p.eval},
                            {"bench_tsv", &p.bench_tsv}, {"bench_svg", &p.bench_svg},
                            {"bench_json", &p.bench_json}}) {
    f.get(std::string("paths.") + key, *field);
    *field = resolve(base_dir, *field);
  }

  auto& s = c.synthetic;
  f.get("synthetic.items", s.num_items);
  f.get("synthetic.users", s.num_users);
  f.get("synthetic.min_length", s.min_length);
  f.get("synthetic.max_length", s.max_length);
  f.get("synthetic.clusters", s.clusters);
  f.get("synthetic.latent_dim", s.latent_dim);
  f.get("synthetic.noise", s.noise);
  f.get("synthetic.item_spread", s.item_spread);

  f.get("opq.outer_iters", c.opq.outer_iters);
  f.get("opq.kmeans_iters", c.opq.kmeans_iters);
  f.get("opq.normalize", c.opq.normalize);
  f.get("opq.skip_rotation", c.opq.skip_rotation);

  auto& t = c.train;
  std::string agg = to_string(t.shape.aggregation), enc = to_string(t.shape.encoder);
  std::string opt = to_string(t.optimizer);
  f.get("train.lr", t.lr);
  f.get("train.epochs", t.epochs);
  f.get("train.batch", t.batch);
  f.get("train.tau", t.shape.tau);
  f.get("train.agg", agg);
  f.get("train.encoder", enc);
  f.get("train.hidden", t.shape.hidden);
  f.get("train.max_history", t.shape.max_history);
  f.get("train.optimizer", opt);
  f.get("train.patience", t.patience);
  f.get("train.valid_users", t.valid_users);
  f.get("train.eval_every", t.eval_every);
  t.shape.aggregation = parse_aggregation(agg);
  t.shape.encoder = parse_encoder(enc);
  t.optimizer = parse_optimizer(opt);

  f.get("graph.k", c.graph_k);
  f.get("graph.builder", c.graph_builder);
  if (c.graph_builder != "exact" && c.graph_builder != "approx") {
    throw ConfigError("graph.builder must be exact or approx");
  }

  f.get("decode.b", c.decode.beam);
  f.get("decode.q", c.decode.steps);
  f.get("decode.topk", c.decode.top_k);

  std::string dummy;
  f.get("bench.dummy", dummy);
  if (!dummy.empty()) c.bench.sizes = parse_size_list(dummy);
  f.get("bench.repetitions", c.bench.repetitions);
  f.get("bench.queries", c.bench.queries);
  f.finish();
  c.propagate();
  return c;
}

PipelineConfig PipelineConfig::load(const std::string& path) {
  const auto base = fs::path(path).parent_path().string();
  return from_file(KeyValueFile::read(path), base.empty() ? "." : base);
}

void PipelineConfig::propagate() {
  scheme.validate();
  if (threads < 1) threads = 1;
  synthetic.d = scheme.d;
  synthetic.seed = seed;
  opq.seed = seed;
  train.seed = seed;
  train.shape.scheme = scheme;
  decode.seed = seed;
  bench.seed = seed;
  bench.beam = decode.beam;
  bench.steps = decode.steps;
  bench.top_k = decode.top_k;
  bench.k = graph_k;
  bench.graph_threads = threads;
}

std::uint64_t PipelineConfig::digest() const {
  json j = {{"seed", seed},
            {"scheme", {scheme.m, scheme.M, scheme.d}},
            {"opq", {opq.outer_iters, opq.kmeans_iters, opq.normalize, opq.skip_rotation}},
            {"train",
             {train.lr, train.epochs, train.batch, train.shape.tau, to_string(train.shape.aggregation),
              to_string(train.shape.encoder), train.shape.hidden_width(), train.shape.max_history,
              to_string(train.optimizer), train.patience, train.valid_users, train.eval_every}},
            {"graph", {graph_k, graph_builder}},
            {"decode", {decode.beam, decode.steps, decode.top_k}},
            {"bench", {bench.sizes, bench.repetitions, bench.queries}}};
  const std::string s = j.dump();
  return fnv1a(s.data(), s.size());
}

void apply_seed_env(PipelineConfig& config) {
  const char* env = std::getenv("RPG_SEED");
  if (!env) return;
  const std::string v = env;
  std::uint64_t seed = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), seed);
  if (v.empty() || ec != std::errc{} || p != v.data() + v.size()) {
    throw ConfigError("RPG_SEED must be a non-negative integer, got '" + v + "'");
  }
  config.seed = seed;
  config.propagate();
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

namespace {

void ensure_parent(const std::string& path) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

struct Loaded {
  ItemCatalog catalog;
  LoadedCheckpoint model;
};

Loaded load_model(const PipelineConfig& config) {
  Loaded out{load_catalog(config.paths.catalog), load_checkpoint(config.paths.checkpoint)};
  if (out.model.catalog_digest != out.catalog.digest()) {
    throw StalenessError("checkpoint " + config.paths.checkpoint + " was trained on catalog " +
                         digest_hex(out.model.catalog_digest) + ", but " + config.paths.catalog +
                         " has digest " + digest_hex(out.catalog.digest()));
  }
  if (!(out.model.checkpoint.scheme() == out.catalog.scheme())) {
    throw StalenessError("checkpoint and catalog schemes differ");
  }
  return out;
}

TokenTables float_tables(const Checkpoint<float>& ckpt) { return ckpt.tables; }

DecodingGraph make_graph(const PipelineConfig& config, const ItemCatalog& catalog,
                         const Checkpoint<float>& ckpt, std::size_t k) {
  if (config.graph_builder == "exact") {
    return build_decoding_graph(catalog, ckpt, k, {config.threads});
  }
  ApproxGraphConfig ac;
  ac.seed = config.seed;
  ac.threads = config.threads;
  auto g = build_decoding_graph_approx(catalog, float_tables(ckpt), k, ac);
  g.checkpoint_digest = ckpt.digest();
  return g;
}

std::string ranked_tsv(const std::vector<Scored>& items) {
  std::string out = "item\tlogit\n";
  char buf[64];
  for (const auto& e : items) {
    std::snprintf(buf, sizeof(buf), "%u\t%.9g\n", e.item, static_cast<double>(e.logit));
    out += buf;
  }
  return out;
}

SplitView load_split(const PipelineConfig& config, std::size_t num_items, std::ostream& log) {
  const auto dataset = read_dataset(config.paths.dataset, num_items);
  auto split = split_leave_last_out(dataset);
  if (split.excluded) {
    log << "warning: " << split.excluded << " users with fewer than 3 interactions excluded\n";
  }
  return split;
}

json metrics_json(const Metrics& m) {
  return {{"recall@5", m.recall5}, {"recall@10", m.recall10}, {"ndcg@5", m.ndcg5},
          {"ndcg@10", m.ndcg10}};
}

}  // namespace

void cmd_synth(const PipelineConfig& config, std::ostream& log) {
  config.synthetic.validate(config.scheme.M);
  const auto world = gen_synthetic(config.synthetic);
  ensure_parent(config.paths.vectors);
  ensure_parent(config.paths.dataset);
  save_vectors(config.paths.vectors, world.item_vectors);
  write_file_atomic(config.paths.dataset, format_dataset(world.dataset));
  log << "synth: " << world.item_vectors.rows() << " items, " << world.dataset.sequences.size()
      << " users -> " << config.paths.vectors << ", " << config.paths.dataset << "\n";
}

void cmd_tokenize(const PipelineConfig& config, std::ostream& log) {
  const auto vectors = load_vectors(config.paths.vectors);
  if (static_cast<std::size_t>(vectors.cols()) != config.scheme.d) {
    throw ConfigError("item vectors have d=" + std::to_string(vectors.cols()) +
                      " but scheme.d=" + std::to_string(config.scheme.d));
  }
  OPQTrainLog tlog;
  const auto model = train_opq(vectors, config.scheme, config.opq, &tlog);
  const auto catalog = encode_items(model, vectors);
  ensure_parent(config.paths.opq);
  ensure_parent(config.paths.catalog);
  const auto opq_digest = save_opq(config.paths.opq, model);
  save_catalog(config.paths.catalog, catalog, model.digest());
  log << "tokenize: quantization error " << tlog.error_history.front() << " -> "
      << tlog.error_history.back() << "; opq " << digest_hex(opq_digest) << ", catalog "
      << digest_hex(catalog.digest()) << "\n";
}

void cmd_train(const PipelineConfig& config, std::ostream& log) {
  const auto catalog = load_catalog(config.paths.catalog);
  const auto split = load_split(config, catalog.size(), log);
  TrainLog tlog;
  const auto ckpt = train(split, catalog, config.train, &tlog);
  ensure_parent(config.paths.checkpoint);
  save_checkpoint(config.paths.checkpoint, ckpt, catalog.digest());
  std::string tsv = "epoch\ttrain_loss\tvalid_ndcg@10\n";
  char buf[128];
  for (const auto& e : tlog.epochs) {
    std::snprintf(buf, sizeof(buf), "%zu\t%.9g\t%.9g\n", e.epoch, e.train_loss, e.valid_ndcg10);
    tsv += buf;
    log << "epoch " << e.epoch << " loss " << e.train_loss;
    if (e.valid_ndcg10 >= 0) log << " valid ndcg@10 " << e.valid_ndcg10;
    log << "\n";
  }
  ensure_parent(config.paths.train_log);
  write_file_atomic(config.paths.train_log, tsv);
  log << "train: best epoch " << tlog.best_epoch << " (valid ndcg@10 " << tlog.best_valid_ndcg10
      << "), checkpoint " << digest_hex(ckpt.digest()) << "\n";
}

void cmd_build_graph(const PipelineConfig& config, std::ostream& log) {
  const auto loaded = load_model(config);
  const auto graph = make_graph(config, loaded.catalog, loaded.model.checkpoint, config.graph_k);
  ensure_parent(config.paths.graph);
  const auto digest = save_graph(config.paths.graph, graph, loaded.catalog.scheme());
  log << "build-graph: " << graph.size() << " nodes, degree " << graph.degree << " ("
      << graph.builder << "), " << digest_hex(digest) << "\n";
}

std::vector<ItemId> parse_history(const std::string& text, std::size_t num_items) {
  std::string flat = text;
  for (char& c : flat) {
    if (c == '\n' || c == ',') c = ' ';
  }
  const auto ds = parse_dataset(flat, num_items);
  if (ds.sequences.empty()) throw DataError("empty interaction history");
  return ds.sequences.front();
}

std::string cmd_recommend(const PipelineConfig& config, const std::vector<ItemId>& history,
                          std::optional<std::size_t> k_graph) {
  const auto loaded = load_model(config);
  const auto& ckpt = loaded.model.checkpoint;
  DecodingGraph graph = load_graph(config.paths.graph);
  require_fresh(graph, ckpt.digest(), loaded.catalog.digest());
  if (k_graph && *k_graph != graph.k) graph = make_graph(config, loaded.catalog, ckpt, *k_graph);
  for (ItemId item : history) {
    if (item >= loaded.catalog.size()) throw DataError("history item outside catalog");
  }
  const auto cache = build_logit_cache(encode_history<float>(history, loaded.catalog, ckpt), ckpt);
  return ranked_tsv(decode(graph, cache, loaded.catalog, config.decode).items);
}

std::string cmd_score(const PipelineConfig& config, const std::vector<ItemId>& history) {
  const auto loaded = load_model(config);
  const auto& ckpt = loaded.model.checkpoint;
  for (ItemId item : history) {
    if (item >= loaded.catalog.size()) throw DataError("history item outside catalog");
  }
  const auto cache = build_logit_cache(encode_history<float>(history, loaded.catalog, ckpt), ckpt);
  return ranked_tsv(exact_topk(cache, loaded.catalog, std::min(config.decode.top_k,
                                                                loaded.catalog.size())));
}

std::string cmd_eval(const PipelineConfig& config, std::ostream& log) {
  const auto loaded = load_model(config);
  const auto& ckpt = loaded.model.checkpoint;
  const auto graph = load_graph(config.paths.graph);
  const auto split = load_split(config, loaded.catalog.size(), log);
  const auto report = evaluate(ckpt, graph, loaded.catalog, split.test, config.decode,
                               {false, config.threads});
  const auto freq = item_train_frequency(split, loaded.catalog.size());
  const auto buckets = cold_start_report(report.queries, freq);
  std::mt19937_64 rng(config.seed);
  const auto trend = hamming_logit_trend(ckpt, loaded.catalog, 200, rng, split.test);

  const std::size_t N = loaded.catalog.size();
  json j = json::parse(report.to_json());
  j["random_baseline"] = {{"recall@5", random_recall(N, 5)}, {"recall@10", random_recall(N, 10)},
                          {"ndcg@5", random_ndcg(N, 5)}, {"ndcg@10", random_ndcg(N, 10)}};
  j["excluded_users"] = split.excluded;
  json jb = json::array();
  for (const auto& b : buckets) {
    jb.push_back({{"min_frequency", b.lo},
                  {"max_frequency", b.hi == std::numeric_limits<std::size_t>::max()
                                        ? json(nullptr)
                                        : json(b.hi)},
                  {"count", b.count},
                  {"decode", metrics_json(b.decode)}});
  }
  j["cold_start"] = jb;
  j["hamming_trend"] = {{"mean_abs_delta", trend.mean_abs_delta},
                        {"counts", trend.counts},
                        {"rank_correlation", trend.rank_correlation}};
  j["decode_config"] = {{"b", config.decode.beam}, {"q", config.decode.steps},
                        {"topk", config.decode.top_k}, {"k_graph", graph.k},
                        {"seed", config.decode.seed}};
  j["digests"] = {{"pipeline_config", digest_hex(config.digest())},
                  {"catalog", digest_hex(loaded.catalog.digest())},
                  {"checkpoint", digest_hex(ckpt.digest())},
                  {"graph_checkpoint", digest_hex(graph.checkpoint_digest)}};
  std::string text = j.dump(2) + "\n";
  ensure_parent(config.paths.eval);
  write_file_atomic(config.paths.eval, text);
  log << "eval: " << report.query_count << " queries, decode ndcg@10 " << report.decode.ndcg10
      << ", exact ndcg@10 " << report.exact.ndcg10 << "\n";
  return text;
}

void cmd_bench(const PipelineConfig& config, std::ostream& log) {
  const auto loaded = load_model(config);
  const auto& ckpt = loaded.model.checkpoint;
  const auto split = load_split(config, loaded.catalog.size(), log);
  if (split.test.empty()) throw DataError("bench: no test queries");
  std::vector<LogitCache<float>> caches;
  for (std::size_t i = 0; i < std::min(config.bench.queries, split.test.size()); ++i) {
    caches.push_back(build_logit_cache(
        encode_history<float>(split.test[i].history, loaded.catalog, ckpt), ckpt));
  }
  const auto rows = bench_decode_scaling(loaded.catalog, float_tables(ckpt), caches, config.bench);
  for (const auto* p : {&config.paths.bench_tsv, &config.paths.bench_svg, &config.paths.bench_json}) {
    ensure_parent(*p);
  }
  write_file_atomic(config.paths.bench_tsv, scaling_tsv(rows));
  write_file_atomic(config.paths.bench_svg, scaling_svg(rows));
  json jr = json::array();
  for (const auto& r : rows) {
    jr.push_back({{"catalog_size", r.catalog_size},
                  {"decode_seconds", r.decode_seconds},
                  {"exact_seconds", r.exact_seconds},
                  {"visited_count", r.visited_count},
                  {"mean_scored", r.mean_scored},
                  {"transient_bytes", r.transient_bytes}});
  }
  json j = {{"rows", jr},
            {"queries", caches.size()},
            {"repetitions", config.bench.repetitions},
            {"digests",
             {{"pipeline_config", digest_hex(config.digest())},
              {"catalog", digest_hex(loaded.catalog.digest())},
              {"checkpoint", digest_hex(ckpt.digest())}}}};
  write_file_atomic(config.paths.bench_json, j.dump(2) + "\n");
  log << scaling_tsv(rows);
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const StalenessError*>(&e)) return 3;
  if (dynamic_cast<const ArtifactError*>(&e)) return 2;
  if (dynamic_cast<const ConfigError*>(&e)) return 4;
  if (dynamic_cast<const DataError*>(&e)) return 5;
  return 1;
}

}  // namespace rpg
