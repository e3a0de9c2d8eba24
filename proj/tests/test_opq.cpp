#include <doctest.h>

#include <random>

#include "helpers.hpp"
#include "rpg/opq.hpp"

using namespace rpg;

namespace {

// Subspace j of each item is a randomly chosen center from that subspace's own set plus
// noise. Optionally mixed by an orthogonal Q.
EmbeddingMatrix<float> clustered(std::size_t n, std::size_t m, std::size_t w, std::size_t clusters,
                                 double noise, std::uint64_t seed, const MatrixXd* mix = nullptr) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<RowMatrix<double>> centers(m, RowMatrix<double>(clusters, w));
  for (auto& c : centers) {
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = 3.0 * g(rng);
  }
  std::uniform_int_distribution<std::size_t> pick(0, clusters - 1);
  RowMatrix<double> y(n, m * w);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const auto c = static_cast<Eigen::Index>(pick(rng));
      for (std::size_t t = 0; t < w; ++t) {
        y(i, j * w + t) = centers[j](c, t) + noise * g(rng);
      }
    }
  }
  if (mix) y = y * mix->transpose();
  return y.cast<float>();
}

MatrixXd random_orthogonal(std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  MatrixXd a(d, d);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = g(rng);
  Eigen::HouseholderQR<MatrixXd> qr(a);
  return qr.householderQ();
}

// Independent quantization error: for each row and subspace scan all centroids.
double brute_force_error(const OPQModel& model, const EmbeddingMatrix<float>& x) {
  const std::size_t w = model.scheme.subspace_dim();
  double total = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    VectorXd v = x.row(i).cast<double>().transpose();
    if (model.normalize && v.norm() > 0) v /= v.norm();
    const VectorXd r = model.rotation * v;
    for (std::size_t j = 0; j < model.scheme.m; ++j) {
      double best = std::numeric_limits<double>::infinity();
      for (Eigen::Index c = 0; c < model.codebooks[j].rows(); ++c) {
        double dist = 0.0;
        for (std::size_t t = 0; t < w; ++t) {
          const double diff = r[static_cast<Eigen::Index>(j * w + t)] - model.codebooks[j](c, static_cast<Eigen::Index>(t));
          dist += diff * diff;
        }
        best = std::min(best, dist);
      }
      total += best;
    }
  }
  return total / static_cast<double>(x.rows());
}

OPQModel identity_model(const SemanticScheme& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  OPQModel model;
  model.scheme = s;
  model.rotation = MatrixXd::Identity(s.d, s.d);
  for (std::size_t j = 0; j < s.m; ++j) {
    RowMatrix<double> cb(s.M, s.subspace_dim());
    for (Eigen::Index i = 0; i < cb.size(); ++i) cb.data()[i] = static_cast<float>(g(rng));
    model.codebooks.push_back(cb);
  }
  return model;
}

}  // namespace

TEST_SUITE("opq") {

TEST_CASE("kmeans: N == M distinct points gives zero error") {
  RowMatrix<double> x(6, 2);
  x << 0, 0, 1, 0, 0, 1, 5, 5, -3, 2, 7, -1;
  const auto r = kmeans_subspace(x, 6, 10, 1);
  CHECK(r.sse_history.back() == doctest::Approx(0.0).epsilon(1e-12));
  std::vector<Code> sorted = r.assignments;
  std::sort(sorted.begin(), sorted.end());
  for (Code c = 0; c < 6; ++c) CHECK(sorted[c] == c);
  for (Eigen::Index i = 0; i < 6; ++i) {
    CHECK((r.centroids.row(r.assignments[i]) - x.row(i)).norm() == doctest::Approx(0.0));
  }
}

TEST_CASE("kmeans: two separated blobs recover the sample means") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g(0.0, 1.0);
  RowMatrix<double> x(1000, 2);
  Eigen::RowVector2d mean_a(0, 0), mean_b(0, 0);
  for (Eigen::Index i = 0; i < 1000; ++i) {
    const double off = i < 500 ? -10.0 : 10.0;
    x(i, 0) = off + g(rng);
    x(i, 1) = g(rng);
    (i < 500 ? mean_a : mean_b) += x.row(i) / 500.0;
  }
  const auto r = kmeans_subspace(x, 2, 20, 3);
  const auto& c = r.centroids;
  const bool a_first = c(0, 0) < c(1, 0);
  CHECK((c.row(a_first ? 0 : 1) - mean_a).norm() < 0.1);
  CHECK((c.row(a_first ? 1 : 0) - mean_b).norm() < 0.1);
}

TEST_CASE("kmeans: more iterations never hurt and SSE is monotone") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(0.0, 1.0);
  RowMatrix<double> x(400, 3);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = g(rng);
  const auto one = kmeans_subspace(x, 16, 1, 9);
  const auto twenty = kmeans_subspace(x, 16, 20, 9);
  CHECK(twenty.sse_history.back() <= one.sse_history.back());
  for (std::size_t i = 1; i < twenty.sse_history.size(); ++i) {
    CHECK(twenty.sse_history[i] <= twenty.sse_history[i - 1] * (1 + 1e-12));
  }
  // Final assignments are nearest-centroid assignments.
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    std::span<const double> row(x.data() + i * 3, 3);
    CHECK(nearest_centroid(row, twenty.centroids) == twenty.assignments[i]);
  }
}

TEST_CASE("kmeans: errors and determinism") {
  RowMatrix<double> x = RowMatrix<double>::Random(5, 2);
  CHECK_THROWS_AS(kmeans_subspace(x, 6, 5, 1), ConfigError);
  CHECK_THROWS_AS(kmeans_subspace(x, 2, 0, 1), ConfigError);
  RowMatrix<double> y = RowMatrix<double>::Random(200, 2);
  const auto a = kmeans_subspace(y, 8, 10, 42);
  const auto b = kmeans_subspace(y, 8, 10, 42);
  CHECK(a.centroids == b.centroids);
  CHECK(a.assignments == b.assignments);
}

TEST_CASE("kmeans: an unused centroid is re-seeded") {
  RowMatrix<double> x(40, 1);
  for (Eigen::Index i = 0; i < 40; ++i) x(i, 0) = static_cast<double>(i % 4);
  RowMatrix<double> init(4, 1);
  init << 0.0, 1.0, 2.0, 1000.0;  // the last centroid attracts nothing
  const auto r = kmeans_refine(x, init, 5);
  std::vector<int> counts(4, 0);
  for (Code a : r.assignments) ++counts[a];
  for (int c : counts) CHECK(c > 0);
  CHECK(r.sse_history.back() == doctest::Approx(0.0));
}

TEST_CASE("nearest_centroid breaks ties toward the lowest index") {
  RowMatrix<double> c = RowMatrix<double>::Constant(8, 2, 100.0);
  c.row(2) << 1.0, 0.0;
  c.row(7) << -1.0, 0.0;
  const std::vector<double> x{0.0, 0.0};
  double dist = 0;
  CHECK(nearest_centroid(x, c, &dist) == 2);
  CHECK(dist == doctest::Approx(1.0));
}

TEST_CASE("encode_items: exact centroid hit under identity rotation") {
  const SemanticScheme s{4, 16, 8};
  const auto model = identity_model(s, 3);
  const std::vector<Code> want{5, 9, 0, 15};
  EmbeddingMatrix<float> x(1, 8);
  for (std::size_t j = 0; j < 4; ++j) {
    for (std::size_t t = 0; t < 2; ++t) {
      x(0, static_cast<Eigen::Index>(j * 2 + t)) =
          static_cast<float>(model.codebooks[j](want[j], static_cast<Eigen::Index>(t)));
    }
  }
  const auto cat = encode_items(model, x);
  for (std::size_t j = 0; j < 4; ++j) CHECK(cat.id(0)[j] == want[j]);
  CHECK(quantization_error(model, x) == doctest::Approx(0.0).epsilon(1e-12));
  EmbeddingMatrix<float> wrong(1, 6);
  wrong.setZero();
  CHECK_THROWS_AS(encode_items(model, wrong), DataError);
  CHECK_THROWS_AS(quantization_error(model, wrong), DataError);
}

TEST_CASE("quantization_error: analytic and brute force") {
  OPQModel model;
  model.scheme = {1, 2, 2};
  model.rotation = MatrixXd::Identity(2, 2);
  RowMatrix<double> cb(2, 2);
  cb << 0.0, 0.0, 100.0, 100.0;
  model.codebooks = {cb};
  EmbeddingMatrix<float> x(1, 2);
  x << 0.0f, 2.0f;
  CHECK(quantization_error(model, x) == doctest::Approx(4.0));

  const SemanticScheme s{4, 8, 16};
  const auto vecs = clustered(300, 4, 4, 10, 0.5, 8);
  OPQTrainLog log;
  const auto trained = train_opq(vecs, s, {3, 10, 1}, &log);
  const double fast = quantization_error(trained, vecs);
  const double slow = brute_force_error(trained, vecs);
  CHECK(std::abs(fast - slow) <= 1e-6 * slow);
  // Re-encoding the training set reproduces the last logged error.
  CHECK(std::abs(fast - log.error_history.back()) <= 1e-9 * fast);
}

TEST_CASE("train_opq: orthogonal rotation and monotone error") {
  const SemanticScheme s{4, 16, 16};
  const auto mix = random_orthogonal(16, 4);
  const auto x = clustered(800, 4, 4, 12, 0.3, 2, &mix);
  OPQTrainLog log;
  const auto model = train_opq(x, s, {10, 15, 3}, &log);
  CHECK(model.orthogonality_error() <= 1e-4);
  CHECK_NOTHROW(model.validate());
  REQUIRE(log.error_history.size() == 10);
  for (std::size_t i = 1; i < log.error_history.size(); ++i) {
    CHECK(log.error_history[i] <= log.error_history[i - 1] * (1 + 1e-9));
  }
  CHECK(train_opq(x, s, {10, 15, 3}).digest() == model.digest());
}

TEST_CASE("train_opq: axis-aligned separable data needs no rotation") {
  const SemanticScheme s{4, 8, 8};
  const auto x = clustered(400, 4, 2, 8, 0.0, 6);
  OPQTrainLog log;
  const auto model = train_opq(x, s, {2, 20, 0}, &log);
  CHECK(log.error_history.back() <= 1e-6);
}

TEST_CASE("train_opq: beats plain PQ on orthogonally mixed data") {
  const SemanticScheme s{4, 8, 16};
  const auto mix = random_orthogonal(16, 12);
  const auto x = clustered(1000, 4, 4, 8, 0.2, 13, &mix);
  const double opq = quantization_error(train_opq(x, s, {10, 25, 5}), x);
  OPQTrainConfig pq{1, 250, 5};
  pq.skip_rotation = true;
  const auto plain = train_opq(x, s, pq);
  CHECK((plain.rotation - MatrixXd::Identity(16, 16)).norm() == 0.0);
  CHECK(opq <= quantization_error(plain, x));
}

TEST_CASE("train_opq: configuration and data errors") {
  const SemanticScheme s{2, 8, 4};
  EmbeddingMatrix<float> few = EmbeddingMatrix<float>::Random(5, 4);
  CHECK_THROWS_AS(train_opq(few, s, {}), ConfigError);
  EmbeddingMatrix<float> x = EmbeddingMatrix<float>::Random(50, 4);
  CHECK_THROWS_AS(train_opq(x, s, {0, 5, 0}), ConfigError);
  CHECK_THROWS_AS(train_opq(x, s, {3, 0, 0}), ConfigError);
  x(3, 2) = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(train_opq(x, s, {}), DataError);
  EmbeddingMatrix<float> wrong = EmbeddingMatrix<float>::Random(50, 6);
  CHECK_THROWS_AS(train_opq(wrong, s, {}), DataError);
}

TEST_CASE("encode_items: a subvector perturbation changes at most its digit") {
  const SemanticScheme s{4, 16, 16};
  const auto mix = random_orthogonal(16, 21);
  const auto x = clustered(500, 4, 4, 10, 0.5, 22, &mix);
  const auto model = train_opq(x, s, {4, 10, 1});
  const auto base = encode_items(model, x);
  std::mt19937_64 rng(23);
  std::normal_distribution<double> g(0.0, 2.0);
  for (std::size_t j = 0; j < s.m; ++j) {
    VectorXd delta = VectorXd::Zero(16);
    for (std::size_t t = 0; t < 4; ++t) delta[static_cast<Eigen::Index>(j * 4 + t)] = g(rng);
    // Perturb in rotated space: x' = x + R^T delta.
    const Eigen::RowVectorXf shift = (model.rotation.transpose() * delta).transpose().cast<float>();
    EmbeddingMatrix<float> moved = x;
    moved.rowwise() += shift;
    const auto after = encode_items(model, moved);
    for (std::size_t i = 0; i < 500; ++i) {
      for (std::size_t k = 0; k < s.m; ++k) {
        if (k != j) CHECK(after.id(static_cast<ItemId>(i))[k] == base.id(static_cast<ItemId>(i))[k]);
      }
    }
  }
}

TEST_CASE("normalize flag makes codes scale invariant") {
  const SemanticScheme s{2, 8, 4};
  EmbeddingMatrix<float> x = EmbeddingMatrix<float>::Random(100, 4);
  OPQTrainConfig cfg{3, 10, 4};
  cfg.normalize = true;
  const auto model = train_opq(x, s, cfg);
  EmbeddingMatrix<float> scaled = x * 7.0f;
  CHECK(encode_items(model, x).codes() == encode_items(model, scaled).codes());
}

TEST_CASE("opq model persistence") {
  const auto dir = test::temp_dir("opq_io");
  const SemanticScheme s{4, 8, 8};
  const auto x = clustered(200, 4, 2, 8, 0.3, 31);
  const auto model = train_opq(x, s, {2, 5, 1});
  save_opq((dir / "opq.rpg").string(), model);
  const auto back = load_opq((dir / "opq.rpg").string());
  CHECK((back.rotation - model.rotation).cwiseAbs().maxCoeff() < 1e-6);
  // Stored values are float32, so a second round trip is exact.
  save_opq((dir / "opq2.rpg").string(), back);
  CHECK(load_opq((dir / "opq2.rpg").string()).digest() == back.digest());
  CHECK(encode_items(back, x).codes() == encode_items(model, x).codes());
}

}  // TEST_SUITE
