#include "rpg/opq.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "rpg/container.hpp"

namespace rpg {

namespace {

// Centroids transposed to dim x M so the per-point scan runs over contiguous centroid slots.
struct CentroidScan {
  explicit CentroidScan(const RowMatrix<double>& centroids)
      : transposed(centroids.transpose()), dist(centroids.rows()) {}

  Code nearest(const double* x, double* best_distance) {
    dist.setZero();
    for (Eigen::Index t = 0; t < transposed.rows(); ++t) {
      dist += (transposed.row(t).transpose().array() - x[t]).square().matrix();
    }
    Code best = 0;
    double best_d = dist[0];
    for (Eigen::Index c = 1; c < dist.size(); ++c) {
      if (dist[c] < best_d) {
        best_d = dist[c];
        best = static_cast<Code>(c);
      }
    }
    if (best_distance) *best_distance = best_d;
    return best;
  }

  RowMatrix<double> transposed;
  VectorXd dist;
};

// One assignment pass; returns SSE.
double assign(const RowMatrix<double>& vectors, const RowMatrix<double>& centroids,
              std::vector<Code>& assignments, std::vector<double>& distances) {
  CentroidScan scan(centroids);
  double sse = 0.0;
  for (Eigen::Index i = 0; i < vectors.rows(); ++i) {
    assignments[i] = scan.nearest(vectors.row(i).data(), &distances[i]);
    sse += distances[i];
  }
  return sse;
}

RowMatrix<double> kmeanspp_seed(const RowMatrix<double>& vectors, std::size_t M,
                                std::mt19937_64& rng) {
  const auto n = static_cast<std::size_t>(vectors.rows());
  RowMatrix<double> centroids(M, vectors.cols());
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::size_t first = pick(rng);
  centroids.row(0) = vectors.row(first);
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = (vectors.row(i) - centroids.row(0)).squaredNorm();

  for (std::size_t c = 1; c < M; ++c) {
    double total = 0.0;
    for (double v : d2) total += v;
    std::size_t chosen = 0;
    if (total > 0.0) {
      const double target = unit(rng) * total;
      double acc = 0.0;
      chosen = n;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc > target && d2[i] > 0.0) {
          chosen = i;
          break;
        }
      }
      if (chosen == n) {
        // rounding left target past the last positive weight
        for (std::size_t i = n; i-- > 0;) {
          if (d2[i] > 0.0) {
            chosen = i;
            break;
          }
        }
      }
    } else {
      chosen = pick(rng);
    }
    centroids.row(c) = vectors.row(chosen);
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], (vectors.row(i) - centroids.row(c)).squaredNorm());
    }
  }
  return centroids;
}

}  // namespace

Code nearest_centroid(std::span<const double> x, const RowMatrix<double>& centroids,
                      double* best_distance) {
  if (x.size() != static_cast<std::size_t>(centroids.cols())) {
    throw ContractViolation("nearest_centroid: dimension mismatch");
  }
  CentroidScan scan(centroids);
  return scan.nearest(x.data(), best_distance);
}

KMeansResult kmeans_refine(const RowMatrix<double>& vectors, RowMatrix<double> centroids,
                           std::size_t iters, EmptyClusterPolicy policy) {
  if (iters < 1) throw ConfigError("kmeans: iters must be >= 1");
  const auto n = static_cast<std::size_t>(vectors.rows());
  const auto k = static_cast<std::size_t>(centroids.rows());
  if (n < k) {
    throw ConfigError("kmeans: need N >= M (N=" + std::to_string(n) +
                      ", M=" + std::to_string(k) + ")");
  }
  KMeansResult result;
  result.assignments.assign(n, 0);
  std::vector<double> distances(n);
  std::vector<std::size_t> counts(k);

  for (std::size_t it = 0; it < iters; ++it) {
    result.sse_history.push_back(assign(vectors, centroids, result.assignments, distances));

    RowMatrix<double> sums = RowMatrix<double>::Zero(k, vectors.cols());
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums.row(result.assignments[i]) += vectors.row(i);
      ++counts[result.assignments[i]];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        centroids.row(c) = sums.row(c) / static_cast<double>(counts[c]);
        continue;
      }
      switch (policy) {
        case EmptyClusterPolicy::kFarthestPoint: {
          auto far = static_cast<std::size_t>(
              std::max_element(distances.begin(), distances.end()) - distances.begin());
          centroids.row(c) = vectors.row(far);
          distances[far] = 0.0;
          break;
        }
      }
    }
  }
  // Final assignment against the last centroids so assignments are optimal for them.
  result.sse_history.push_back(assign(vectors, centroids, result.assignments, distances));
  result.centroids = std::move(centroids);
  return result;
}

KMeansResult kmeans_subspace(const RowMatrix<double>& vectors, std::size_t M, std::size_t iters,
                             std::uint64_t seed, EmptyClusterPolicy policy) {
  if (iters < 1) throw ConfigError("kmeans: iters must be >= 1");
  if (static_cast<std::size_t>(vectors.rows()) < M) {
    throw ConfigError("kmeans: need N >= M (N=" + std::to_string(vectors.rows()) +
                      ", M=" + std::to_string(M) + ")");
  }
  std::mt19937_64 rng(seed);
  return kmeans_refine(vectors, kmeanspp_seed(vectors, M, rng), iters, policy);
}

void OPQTrainConfig::validate() const {
  if (outer_iters < 1) throw ConfigError("opq: outer_iters must be >= 1");
  if (kmeans_iters < 1) throw ConfigError("opq: kmeans_iters must be >= 1");
}

RowMatrix<double> OPQModel::rotate(const EmbeddingMatrix<float>& vectors) const {
  if (static_cast<std::size_t>(vectors.cols()) != scheme.d) {
    throw DataError("opq: vectors have dim " + std::to_string(vectors.cols()) + ", expected " +
                    std::to_string(scheme.d));
  }
  RowMatrix<double> x = vectors.cast<double>();
  if (normalize) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double norm = x.row(i).norm();
      if (norm > 0.0) x.row(i) /= norm;
    }
  }
  return x * rotation.transpose();
}

double OPQModel::orthogonality_error() const {
  return (rotation.transpose() * rotation - MatrixXd::Identity(rotation.rows(), rotation.cols()))
      .cwiseAbs()
      .maxCoeff();
}

std::uint64_t OPQModel::digest() const {
  const std::uint64_t dims[4] = {scheme.m, scheme.M, scheme.d, normalize ? 1u : 0u};
  std::uint64_t h = fnv1a(dims, sizeof(dims));
  h = fnv1a(rotation.data(), sizeof(double) * rotation.size(), h);
  for (const auto& cb : codebooks) h = fnv1a(cb.data(), sizeof(double) * cb.size(), h);
  return h;
}

void OPQModel::validate() const {
  scheme.validate();
  const auto d = static_cast<Eigen::Index>(scheme.d);
  if (rotation.rows() != d || rotation.cols() != d) throw DataError("opq: rotation shape");
  if (!all_finite(rotation)) throw DataError("opq: non-finite rotation");
  if (orthogonality_error() > 1e-4) throw DataError("opq: rotation is not orthogonal");
  if (codebooks.size() != scheme.m) throw DataError("opq: codebook count != m");
  for (const auto& cb : codebooks) {
    if (static_cast<std::size_t>(cb.rows()) != scheme.M ||
        static_cast<std::size_t>(cb.cols()) != scheme.subspace_dim()) {
      throw DataError("opq: codebook shape");
    }
    if (!all_finite(cb)) throw DataError("opq: non-finite centroid");
  }
}

namespace {

// Per-subspace nearest codes and the summed squared error over all items.
double encode_rotated(const OPQModel& model, const RowMatrix<double>& rotated, CodeMatrix* codes) {
  const std::size_t m = model.scheme.m;
  const std::size_t w = model.scheme.subspace_dim();
  const auto n = rotated.rows();
  if (codes) codes->resize(n, static_cast<Eigen::Index>(m));
  double total = 0.0;
  RowMatrix<double> sub(n, w);
  for (std::size_t j = 0; j < m; ++j) {
    sub = rotated.middleCols(static_cast<Eigen::Index>(j * w), static_cast<Eigen::Index>(w));
    CentroidScan scan(model.codebooks[j]);
    for (Eigen::Index i = 0; i < n; ++i) {
      double dist = 0.0;
      Code c = scan.nearest(sub.row(i).data(), &dist);
      if (codes) (*codes)(i, static_cast<Eigen::Index>(j)) = c;
      total += dist;
    }
  }
  return total;
}

}  // namespace

OPQModel train_opq(const EmbeddingMatrix<float>& vectors, const SemanticScheme& scheme,
                   const OPQTrainConfig& config, OPQTrainLog* log) {
  scheme.validate();
  config.validate();
  if (static_cast<std::size_t>(vectors.cols()) != scheme.d) {
    throw DataError("opq: vectors have dim " + std::to_string(vectors.cols()) + ", scheme d=" +
                    std::to_string(scheme.d));
  }
  if (static_cast<std::size_t>(vectors.rows()) < scheme.M) {
    throw ConfigError("opq: need N >= M (N=" + std::to_string(vectors.rows()) +
                      ", M=" + std::to_string(scheme.M) + ")");
  }
  if (!all_finite(vectors)) throw DataError("opq: non-finite input vector");

  const std::size_t m = scheme.m;
  const std::size_t w = scheme.subspace_dim();
  const auto n = vectors.rows();

  OPQModel model;
  model.scheme = scheme;
  model.normalize = config.normalize;
  model.rotation = MatrixXd::Identity(scheme.d, scheme.d);
  model.codebooks.resize(m);

  // Unrotated inputs (normalized if requested) for the Procrustes step.
  OPQModel identity = model;
  const RowMatrix<double> inputs = identity.rotate(vectors);

  std::vector<std::vector<Code>> assignments(m);
  for (std::size_t outer = 0; outer < config.outer_iters; ++outer) {
    const RowMatrix<double> rotated = inputs * model.rotation.transpose();
    RowMatrix<double> recon(n, scheme.d);
    for (std::size_t j = 0; j < m; ++j) {
      const RowMatrix<double> sub =
          rotated.middleCols(static_cast<Eigen::Index>(j * w), static_cast<Eigen::Index>(w));
      KMeansResult km =
          outer == 0 ? kmeans_subspace(sub, scheme.M, config.kmeans_iters,
                                       config.seed + 0x9e3779b97f4a7c15ULL * (j + 1),
                                       config.empty_clusters)
                     : kmeans_refine(sub, model.codebooks[j], config.kmeans_iters,
                                     config.empty_clusters);
      model.codebooks[j] = std::move(km.centroids);
      for (Eigen::Index i = 0; i < n; ++i) {
        recon.row(i).segment(static_cast<Eigen::Index>(j * w), static_cast<Eigen::Index>(w)) =
            model.codebooks[j].row(km.assignments[i]);
      }
    }
    if (!config.skip_rotation) {
      // argmin_R sum |R x_i - y_i|^2 over orthogonal R: R = V U^T with X^T Y = U S V^T.
      const MatrixXd cross = inputs.transpose() * recon;
      Eigen::JacobiSVD<MatrixXd> svd(cross, Eigen::ComputeFullU | Eigen::ComputeFullV);
      model.rotation = svd.matrixV() * svd.matrixU().transpose();
    }
    if (log) {
      const RowMatrix<double> now = inputs * model.rotation.transpose();
      log->error_history.push_back(encode_rotated(model, now, nullptr) / static_cast<double>(n));
    }
  }
  return model;
}

ItemCatalog encode_items(const OPQModel& model, const EmbeddingMatrix<float>& vectors) {
  CodeMatrix codes;
  encode_rotated(model, model.rotate(vectors), &codes);
  return ItemCatalog(model.scheme, std::move(codes));
}

double quantization_error(const OPQModel& model, const EmbeddingMatrix<float>& vectors) {
  if (vectors.rows() == 0) return 0.0;
  return encode_rotated(model, model.rotate(vectors), nullptr) /
         static_cast<double>(vectors.rows());
}

std::uint64_t save_opq(const std::string& path, const OPQModel& model) {
  model.validate();
  ArtifactWriter w("opq", model.scheme);
  w.meta()["normalize"] = model.normalize;
  w.meta()["content_digest"] = digest_hex(model.digest());
  const std::vector<float> rot(model.rotation.data(), model.rotation.data() + model.rotation.size());
  w.add_f32("rotation", {model.scheme.d, model.scheme.d}, rot);
  for (std::size_t j = 0; j < model.scheme.m; ++j) {
    const auto& cb = model.codebooks[j];
    const std::vector<float> values(cb.data(), cb.data() + cb.size());
    w.add_f32("codebook_" + std::to_string(j), {model.scheme.M, model.scheme.subspace_dim()},
              values);
  }
  return w.write(path);
}

OPQModel load_opq(const std::string& path) {
  auto a = Artifact::read(path, "opq");
  OPQModel model;
  model.scheme = a.scheme();
  model.normalize = a.meta().value("normalize", false);
  const auto d = static_cast<Eigen::Index>(model.scheme.d);
  auto rot = a.f32("rotation");
  if (rot.size() != static_cast<std::size_t>(d * d)) throw ArtifactError(path + ": rotation size");
  model.rotation = Eigen::Map<const Matrix<float>>(rot.data(), d, d).cast<double>();
  for (std::size_t j = 0; j < model.scheme.m; ++j) {
    auto values = a.f32("codebook_" + std::to_string(j));
    if (values.size() != model.scheme.M * model.scheme.subspace_dim()) {
      throw ArtifactError(path + ": codebook size");
    }
    model.codebooks.push_back(
        Eigen::Map<const RowMatrix<float>>(values.data(), model.scheme.M,
                                           model.scheme.subspace_dim())
            .cast<double>());
  }
  try {
    model.validate();
  } catch (const Error& e) {
    throw ArtifactError(path + ": " + e.what());
  }
  return model;
}

}  // namespace rpg
