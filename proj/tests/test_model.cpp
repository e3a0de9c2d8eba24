#include <doctest.h>

#include <numeric>

#include "helpers.hpp"
#include "oracle.hpp"
#include "rpg/evaluation.hpp"
#include "rpg/model.hpp"
#include "rpg/scorer.hpp"
#include "rpg/training.hpp"

using namespace rpg;

namespace {

std::vector<Example> random_batch(std::size_t n_items, std::size_t count, std::size_t max_len,
                                  std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> len(1, max_len);
  std::uniform_int_distribution<ItemId> item(0, static_cast<ItemId>(n_items - 1));
  std::vector<Example> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back({test::random_history(n_items, len(rng), rng), item(rng)});
  return out;
}

// Deterministic cycle i -> i + 1 (mod N) over items with distinct semantic IDs.
struct CycleWorld {
  ItemCatalog catalog;
  InteractionDataset dataset;
};

CycleWorld cycle_world(std::size_t n, std::size_t users, std::uint64_t seed) {
  const SemanticScheme s{4, 8, 16};
  CodeMatrix codes(static_cast<Eigen::Index>(n), 4);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    codes(r, 0) = static_cast<Code>(i % 8);
    codes(r, 1) = static_cast<Code>((i / 8) % 8);
    codes(r, 2) = static_cast<Code>((3 * i) % 8);
    codes(r, 3) = static_cast<Code>((5 * i + 1) % 8);
  }
  CycleWorld w{ItemCatalog(s, codes), {n, {}}};
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> start(0, n - 1), len(4, 10);
  for (std::size_t u = 0; u < users; ++u) {
    std::vector<ItemId> seq;
    std::size_t at = start(rng);
    for (std::size_t t = len(rng); t > 0; --t, at = (at + 1) % n) seq.push_back(static_cast<ItemId>(at));
    w.dataset.sequences.push_back(seq);
  }
  return w;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("aggregate_item") {
  ModelShape shape = test::small_shape(2, 2, 2, 4);
  auto c = Checkpoint<double>::zeros(shape);
  c.tables[0].row(0) << 1, 0;
  c.tables[1].row(1) << 0, 1;
  const std::vector<Code> id{0, 1};
  CHECK(aggregate_item<double>(id, c) == Eigen::Vector2d(0.5, 0.5));
  c.shape.aggregation = Aggregation::kMax;
  CHECK(aggregate_item<double>(id, c) == Eigen::Vector2d(1, 1));

  c.tables[1].row(1) << 1, 0;  // identical rows
  CHECK(aggregate_item<double>(id, c) == Eigen::Vector2d(1, 0));
  c.shape.aggregation = Aggregation::kMean;
  CHECK(aggregate_item<double>(id, c) == Eigen::Vector2d(1, 0));

  const std::vector<Code> bad{0, 2};
  CHECK_THROWS_AS(aggregate_item<double>(bad, c), ContractViolation);
}

TEST_CASE("encode_sequence contracts") {
  const auto catalog = test::random_catalog({2, 4, 8}, 10, 1);
  auto shape = test::small_shape();
  const auto c = Checkpoint<double>::random(shape, 3);

  SUBCASE("empty sequence") {
    CHECK_THROWS_AS(encode_history<double>({}, catalog, c), ContractViolation);
  }
  SUBCASE("single item: mean term equals last term") {
    const std::vector<ItemId> one{4};
    const std::vector<ItemId> twice{4, 4};
    CHECK(encode_history<double>(one, catalog, c).isApprox(encode_history<double>(twice, catalog, c), 1e-14));
  }
  SUBCASE("zero parameters give s = b2") {
    auto z = Checkpoint<double>::zeros(shape);
    z.enc_b2.setLinSpaced(-1.0, 1.0);
    const std::vector<ItemId> h{1, 2, 3};
    CHECK(encode_history<double>(h, catalog, z) == z.enc_b2);
  }
  SUBCASE("reference encoder ignores the order of all but the last item") {
    std::vector<ItemId> h{0, 1, 2, 3, 4, 5, 9};
    const auto s = encode_history<double>(h, catalog, c);
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 10; ++trial) {
      std::shuffle(h.begin(), h.end() - 1, rng);
      CHECK(encode_history<double>(h, catalog, c).isApprox(s, 1e-13));
    }
  }
  SUBCASE("history truncated to max_history") {
    auto capped = c;
    capped.shape.max_history = 3;
    const std::vector<ItemId> long_h{7, 8, 1, 2, 3};
    const std::vector<ItemId> tail{1, 2, 3};
    CHECK(encode_history<double>(long_h, catalog, capped) == encode_history<double>(tail, catalog, capped));
  }
  SUBCASE("library forward matches the plain-loop oracle") {
    std::mt19937_64 rng(8);
    for (auto enc : {EncoderKind::kReference, EncoderKind::kAttention}) {
      for (auto agg : {Aggregation::kMean, Aggregation::kMax}) {
        auto sh = shape;
        sh.encoder = enc;
        sh.aggregation = agg;
        const auto cc = Checkpoint<double>::random(sh, 4);
        const auto h = test::random_history(10, 6, rng);
        const auto s = encode_history<double>(h, catalog, cc);
        const auto ref = oracle::sequence_repr(h, catalog, cc);
        for (std::size_t t = 0; t < ref.size(); ++t) CHECK(s[static_cast<Eigen::Index>(t)] == doctest::Approx(ref[t]).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("mtp_loss analytic values") {
  SUBCASE("zero tables give m ln M") {
    ModelShape shape;
    shape.scheme = {4, 256, 8};
    auto c = Checkpoint<double>::random(shape, 1);
    for (auto& t : c.tables) t.setZero();
    const Eigen::VectorXd s = Eigen::VectorXd::Random(8);
    const std::vector<Code> target{0, 255, 17, 3};
    const auto l = mtp_loss<double>(s, target, c);
    CHECK(std::abs(l.total - 4 * std::log(256.0)) < 1e-9);
    CHECK(l.total == doctest::Approx(22.1807).epsilon(1e-5));
  }
  SUBCASE("m=1, M=2, logits (ln 3, 0)") {
    ModelShape shape;
    shape.scheme = {1, 2, 1};
    shape.hidden = 1;
    shape.tau = 1.0;
    auto c = Checkpoint<double>::zeros(shape);
    c.heads[0].b2 << 1.0;  // g = 1
    c.tables[0] << std::log(3.0), 0.0;
    const Eigen::VectorXd s = Eigen::VectorXd::Zero(1);
    const std::vector<Code> target{0};
    CHECK(mtp_loss<double>(s, target, c).total == doctest::Approx(-std::log(0.75)).epsilon(1e-12));
    CHECK(-std::log(0.75) == doctest::Approx(0.28768).epsilon(1e-5));
  }
  SUBCASE("tau <= 0 is a configuration error") {
    auto c = Checkpoint<double>::random(test::small_shape(), 2);
    c.shape.tau = 0.0;
    const Eigen::VectorXd s = Eigen::VectorXd::Zero(8);
    const std::vector<Code> target{0, 0};
    CHECK_THROWS_AS(mtp_loss<double>(s, target, c), ConfigError);
  }
}

TEST_CASE("mtp_loss matches brute force and decomposes over digits") {
  const auto catalog = test::random_catalog({4, 16, 8}, 30, 4);
  auto shape = test::small_shape(4, 16, 8, 16);
  shape.tau = 0.2;
  const auto c = Checkpoint<double>::random(shape, 6);
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto h = test::random_history(30, 5, rng);
    const ItemId target = static_cast<ItemId>(rng() % 30);
    const auto s = encode_history<double>(h, catalog, c);
    const auto l = mtp_loss<double>(s, catalog.id(target), c);
    CHECK(l.total == doctest::Approx(oracle::loss(oracle::sequence_repr(h, catalog, c), catalog.id(target), c)).epsilon(1e-12));
    double sum = 0.0;
    for (double v : l.per_digit) sum += v;
    CHECK(l.total == sum);
    CHECK(l.total > 0.0);

    const std::vector<Example> one{{h, target}};
    CHECK(mtp_backward<double>(one, catalog, c, nullptr) == doctest::Approx(l.total).epsilon(1e-12));
  }
}

TEST_CASE("log_softmax is shift invariant") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.0, 5.0);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::VectorXd z(17);
    for (auto& v : z) v = g(rng);
    const Eigen::VectorXd shifted = (z.array() + g(rng) * 10).matrix();
    CHECK((log_softmax(z) - log_softmax(shifted)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(log_softmax(z).array().exp().sum() == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("analytic gradients match central differences") {
  const auto catalog = test::random_catalog({2, 4, 8}, 10, 11);
  std::mt19937_64 rng(12);
  const auto batch = random_batch(10, 6, 5, rng);
  for (auto enc : {EncoderKind::kReference, EncoderKind::kAttention}) {
    for (auto agg : {Aggregation::kMean, Aggregation::kMax}) {
      for (double tau : {1.0, 0.03}) {
        auto shape = test::small_shape(2, 4, 8, 16);
        shape.encoder = enc;
        shape.aggregation = agg;
        shape.tau = tau;
        const auto c = oracle::smooth_checkpoint(shape, batch, catalog, 13);
        const auto grad = backward<double>(batch, catalog, c);
        const auto numeric = oracle::finite_difference(batch, catalog, c, 1e-5);
        // Gradients below 1e-6 are compared absolutely; roundoff in the difference is ~1e-11.
        const double err = oracle::max_relative_error(oracle::flatten(grad), numeric, 1e-6);
        INFO("encoder=" << to_string(enc) << " agg=" << to_string(agg) << " tau=" << tau);
        CHECK(err <= 1e-4);
      }
    }
  }
}

TEST_CASE("parameters without upstream signal get zero gradient") {
  const auto catalog = test::random_catalog({2, 4, 8}, 10, 21);
  std::mt19937_64 rng(22);
  const auto batch = random_batch(10, 4, 4, rng);
  auto c = Checkpoint<double>::random(test::small_shape(), 23);
  c.heads[1].b1.setConstant(-1e3);  // every hidden unit of head 1 is dead
  const auto g = backward<double>(batch, catalog, c);
  CHECK(g.heads[1].w1.cwiseAbs().maxCoeff() == 0.0);
  CHECK(g.heads[1].b1.cwiseAbs().maxCoeff() == 0.0);
  CHECK(g.heads[1].w2.cwiseAbs().maxCoeff() == 0.0);
  CHECK(g.heads[0].w1.cwiseAbs().maxCoeff() > 0.0);
  // The inactive encoder carries no gradient.
  CHECK((g.att_wq.size() == 0 || g.att_wq.cwiseAbs().maxCoeff() == 0.0));
  CHECK((g.att_bo.size() == 0 || g.att_bo.cwiseAbs().maxCoeff() == 0.0));
}

TEST_CASE("doubling tau at uniform init halves head gradients") {
  const auto catalog = test::random_catalog({2, 4, 8}, 10, 31);
  std::mt19937_64 rng(32);
  const auto batch = random_batch(10, 5, 4, rng);
  auto c = Checkpoint<double>::random(test::small_shape(), 33);
  for (auto& h : c.heads) {
    h.w2.setZero();
    h.b2.setZero();
  }
  c.shape.tau = 0.5;
  const auto g1 = backward<double>(batch, catalog, c);
  c.shape.tau = 1.0;
  const auto g2 = backward<double>(batch, catalog, c);
  for (std::size_t j = 0; j < 2; ++j) {
    CHECK((g2.heads[j].b2 - 0.5 * g1.heads[j].b2).cwiseAbs().maxCoeff() < 1e-14);
    CHECK((g2.heads[j].w2 - 0.5 * g1.heads[j].w2).cwiseAbs().maxCoeff() < 1e-14);
    CHECK(g1.heads[j].b2.cwiseAbs().maxCoeff() > 0.0);
  }
}

TEST_CASE("float and double paths agree") {
  const auto catalog = test::random_catalog({4, 16, 8}, 40, 41);
  std::mt19937_64 rng(42);
  const auto batch = random_batch(40, 16, 8, rng);
  const auto cd = Checkpoint<double>::random(test::small_shape(4, 16, 8, 16), 43);
  const auto cf = cd.cast<float>();
  const double ld = mtp_backward<double>(batch, catalog, cd, nullptr);
  const double lf = mtp_backward<float>(batch, catalog, cf, nullptr);
  CHECK(lf == doctest::Approx(ld).epsilon(1e-5));
}

TEST_CASE("checkpoint persistence and validation") {
  const auto dir = test::temp_dir("model_io");
  auto shape = test::small_shape(4, 16, 8, 12);
  shape.encoder = EncoderKind::kAttention;
  shape.aggregation = Aggregation::kMax;
  shape.tau = 0.07;
  shape.max_history = 9;
  const auto c = Checkpoint<float>::random(shape, 51);
  CHECK(c.parameter_count() > 0);
  save_checkpoint((dir / "m.rpg").string(), c, 0xabcdef);
  const auto back = load_checkpoint((dir / "m.rpg").string());
  CHECK(back.catalog_digest == 0xabcdef);
  CHECK(back.checkpoint.digest() == c.digest());
  CHECK(back.checkpoint.shape.encoder == EncoderKind::kAttention);
  CHECK(back.checkpoint.shape.aggregation == Aggregation::kMax);
  CHECK(back.checkpoint.shape.max_history == 9);
  CHECK(back.checkpoint.heads[3].w2 == c.heads[3].w2);

  auto bad = c;
  bad.heads[0].b1[0] = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(bad.validate(), DataError);
  CHECK_THROWS_AS(save_checkpoint((dir / "bad.rpg").string(), bad, 0), DataError);
  CHECK_FALSE(std::filesystem::exists(dir / "bad.rpg"));

  CHECK(Checkpoint<float>::random(shape, 51).digest() == c.digest());
  CHECK(Checkpoint<float>::random(shape, 52).digest() != c.digest());
  CHECK_THROWS_AS(parse_encoder("transformer"), ConfigError);
  CHECK_THROWS_AS(parse_aggregation("sum"), ConfigError);
}

TEST_CASE("train: deterministic cycle world is learned") {
  const auto world = cycle_world(48, 300, 61);
  const auto split = split_leave_last_out(world.dataset);
  TrainConfig cfg;
  cfg.shape.scheme = world.catalog.scheme();
  cfg.shape.tau = 0.1;
  cfg.optimizer = OptimizerKind::kAdam;
  cfg.lr = 0.01;
  cfg.epochs = 40;
  cfg.batch = 64;
  cfg.seed = 62;
  TrainLog log;
  const auto ckpt = train(split, world.catalog, cfg, &log);
  CHECK(log.epochs.front().train_loss > log.epochs.back().train_loss);
  std::size_t hits = 0;
  for (const auto& ex : split.valid) {
    const auto top = exact_topk(build_logit_cache(encode_history<float>(ex.history, world.catalog, ckpt), ckpt), world.catalog, 1);
    hits += top[0].item == ex.target;
  }
  const double recall1 = static_cast<double>(hits) / static_cast<double>(split.valid.size());
  CHECK(recall1 >= 0.9);

  SUBCASE("fixed seed gives bit-identical checkpoints") {
    cfg.epochs = 3;
    CHECK(train(split, world.catalog, cfg).digest() == train(split, world.catalog, cfg).digest());
  }
}

TEST_CASE("train: errors") {
  const auto world = cycle_world(16, 20, 71);
  const auto split = split_leave_last_out(world.dataset);
  TrainConfig cfg;
  cfg.shape.scheme = world.catalog.scheme();
  cfg.epochs = 0;
  CHECK_THROWS_AS(train(split, world.catalog, cfg), ConfigError);
  cfg.epochs = 1;
  cfg.lr = -1;
  CHECK_THROWS_AS(train(split, world.catalog, cfg), ConfigError);
  cfg.lr = 0.01;
  CHECK_THROWS_AS(train(SplitView{}, world.catalog, cfg), DataError);
  cfg.shape.scheme = {2, 8, 16};
  CHECK_THROWS_AS(train(split, world.catalog, cfg), ConfigError);
}

TEST_CASE("train: early stopping honours patience") {
  const auto world = cycle_world(32, 100, 81);
  const auto split = split_leave_last_out(world.dataset);
  TrainConfig cfg;
  cfg.shape.scheme = world.catalog.scheme();
  cfg.lr = 1e-9;  // nothing improves after the first evaluation
  cfg.epochs = 50;
  cfg.patience = 3;
  TrainLog log;
  train(split, world.catalog, cfg, &log);
  CHECK(log.stopped_early);
  CHECK(log.epochs.size() == 4);
  CHECK(log.best_epoch == 1);
}

}  // TEST_SUITE
