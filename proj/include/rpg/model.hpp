#pragma once

// Item aggregation, sequence encoders, projection heads and the multi-token prediction loss.
//
// Column convention: a batch of B sequence representations is a d x B matrix.
// Token tables are row-major M x d so that a token lookup is a contiguous row.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rpg/core.hpp"

namespace rpg {

enum class Aggregation { kMean, kMax };
enum class EncoderKind { kReference, kAttention };

std::string to_string(Aggregation a);
std::string to_string(EncoderKind e);
Aggregation parse_aggregation(const std::string& text);
EncoderKind parse_encoder(const std::string& text);

/// g_j: d -> h -> d with relu.
template <class Scalar>
struct ProjectionHead {
  Matrix<Scalar> w1;  // h x d
  Vector<Scalar> b1;  // h
  Matrix<Scalar> w2;  // d x h
  Vector<Scalar> b2;  // d
};

struct ModelShape {
  SemanticScheme scheme;
  Aggregation aggregation = Aggregation::kMean;
  EncoderKind encoder = EncoderKind::kReference;
  std::size_t hidden = 0;  // 0 -> 2d
  double tau = 0.03;
  std::size_t max_history = 50;

  std::size_t hidden_width() const { return hidden ? hidden : 2 * scheme.d; }
};

template <class Scalar>
struct Checkpoint {
  ModelShape shape;

  std::vector<EmbeddingMatrix<Scalar>> tables;  // m x (M x d)

  // Reference encoder: s = W2 relu(W1 [mean(v) ; v_last] + b1) + b2.
  Matrix<Scalar> enc_w1;  // h x 2d
  Vector<Scalar> enc_b1;  // h
  Matrix<Scalar> enc_w2;  // d x h
  Vector<Scalar> enc_b2;  // d

  // Attention encoder: single head, query from the last item, residual on v_last.
  Matrix<Scalar> att_wq, att_wk, att_wv, att_wo;  // d x d
  Vector<Scalar> att_bo;                          // d

  std::vector<ProjectionHead<Scalar>> heads;  // m

  const SemanticScheme& scheme() const { return shape.scheme; }
  std::size_t d() const { return shape.scheme.d; }
  std::size_t m() const { return shape.scheme.m; }

  /// All tensors zero-valued with the right shapes.
  static Checkpoint zeros(const ModelShape& shape);
  /// Uniform(-1/sqrt(d), 1/sqrt(d)) weights and tables, zero biases.
  static Checkpoint random(const ModelShape& shape, std::uint64_t seed);

  Checkpoint zeros_like() const { return zeros(shape); }

  template <class To>
  Checkpoint<To> cast() const;

  /// Throws DataError/ConfigError on shape, finiteness or tau violations.
  void validate() const;

  /// Content hash over float32-rounded parameters and shape.
  std::uint64_t digest() const;

  std::size_t parameter_count() const;
};

/// Visits (name, tensor) for every trainable tensor of the active encoder, in a fixed order.
template <class Ckpt, class F>
void for_each_tensor(Ckpt& c, F&& f) {
  for (std::size_t j = 0; j < c.tables.size(); ++j) f("table_" + std::to_string(j), c.tables[j]);
  if (c.shape.encoder == EncoderKind::kReference) {
    f(std::string("enc_w1"), c.enc_w1);
    f(std::string("enc_b1"), c.enc_b1);
    f(std::string("enc_w2"), c.enc_w2);
    f(std::string("enc_b2"), c.enc_b2);
  } else {
    f(std::string("att_wq"), c.att_wq);
    f(std::string("att_wk"), c.att_wk);
    f(std::string("att_wv"), c.att_wv);
    f(std::string("att_wo"), c.att_wo);
    f(std::string("att_bo"), c.att_bo);
  }
  for (std::size_t j = 0; j < c.heads.size(); ++j) {
    const std::string p = "head_" + std::to_string(j) + "_";
    f(p + "w1", c.heads[j].w1);
    f(p + "b1", c.heads[j].b1);
    f(p + "w2", c.heads[j].w2);
    f(p + "b2", c.heads[j].b2);
  }
}

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

/// v = Aggr(E_1[c_1], ..., E_m[c_m]).
template <class Scalar>
Vector<Scalar> aggregate_item(std::span<const Code> id, const Checkpoint<Scalar>& ckpt) {
  require_valid_id(id, ckpt.scheme());
  Vector<Scalar> v = ckpt.tables[0].row(id[0]).transpose();
  for (std::size_t j = 1; j < id.size(); ++j) {
    if (ckpt.shape.aggregation == Aggregation::kMean) {
      v += ckpt.tables[j].row(id[j]).transpose();
    } else {
      v = v.cwiseMax(ckpt.tables[j].row(id[j]).transpose());
    }
  }
  if (ckpt.shape.aggregation == Aggregation::kMean) v /= static_cast<Scalar>(id.size());
  return v;
}

/// Item vectors for the most recent `max_history` items of `history`, one column each.
template <class Scalar>
Matrix<Scalar> history_vectors(std::span<const ItemId> history, const ItemCatalog& catalog,
                               const Checkpoint<Scalar>& ckpt) {
  if (history.empty()) throw ContractViolation("encode_sequence: empty sequence");
  const std::size_t cap = ckpt.shape.max_history ? ckpt.shape.max_history : history.size();
  const std::size_t start = history.size() > cap ? history.size() - cap : 0;
  Matrix<Scalar> out(ckpt.d(), history.size() - start);
  for (std::size_t i = start; i < history.size(); ++i) {
    if (history[i] >= catalog.size()) throw ContractViolation("history item outside catalog");
    out.col(static_cast<Eigen::Index>(i - start)) = aggregate_item(catalog.id(history[i]), ckpt);
  }
  return out;
}

/// s from a d x L matrix of item vectors (oldest first).
template <class Scalar>
Vector<Scalar> encode_sequence(const Matrix<Scalar>& items, const Checkpoint<Scalar>& ckpt) {
  if (items.cols() == 0) throw ContractViolation("encode_sequence: empty sequence");
  const Eigen::Index d = items.rows();
  const Vector<Scalar> last = items.col(items.cols() - 1);
  if (ckpt.shape.encoder == EncoderKind::kReference) {
    Vector<Scalar> x(2 * d);
    x.head(d) = items.rowwise().mean();
    x.tail(d) = last;
    const Vector<Scalar> hidden = (ckpt.enc_w1 * x + ckpt.enc_b1).cwiseMax(Scalar(0));
    return ckpt.enc_w2 * hidden + ckpt.enc_b2;
  }
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
  const Vector<Scalar> q = ckpt.att_wq * last;
  const Matrix<Scalar> keys = ckpt.att_wk * items;
  Vector<Scalar> scores = keys.transpose() * q * scale;
  scores.array() -= scores.maxCoeff();
  Vector<Scalar> alpha = scores.array().exp();
  alpha /= alpha.sum();
  const Vector<Scalar> ctx = ckpt.att_wv * (items * alpha);
  return last + ckpt.att_wo * ctx + ckpt.att_bo;
}

template <class Scalar>
Vector<Scalar> encode_history(std::span<const ItemId> history, const ItemCatalog& catalog,
                              const Checkpoint<Scalar>& ckpt) {
  return encode_sequence(history_vectors(history, catalog, ckpt), ckpt);
}

/// g_j(s).
template <class Scalar>
Vector<Scalar> head_output(const Vector<Scalar>& s, std::size_t digit,
                           const Checkpoint<Scalar>& ckpt) {
  const auto& h = ckpt.heads.at(digit);
  return h.w2 * (h.w1 * s + h.b1).cwiseMax(Scalar(0)) + h.b2;
}

/// E_j g_j(s) / tau.
template <class Scalar>
Vector<Scalar> digit_logits(const Vector<Scalar>& s, std::size_t digit,
                            const Checkpoint<Scalar>& ckpt) {
  if (!(ckpt.shape.tau > 0.0)) throw ConfigError("temperature must be > 0");
  return ckpt.tables.at(digit) * head_output(s, digit, ckpt) / static_cast<Scalar>(ckpt.shape.tau);
}

/// Numerically stable log-softmax.
template <class Derived>
Vector<typename Derived::Scalar> log_softmax(const Eigen::MatrixBase<Derived>& z) {
  using Scalar = typename Derived::Scalar;
  const Scalar mx = z.maxCoeff();
  const Scalar lse = mx + std::log((z.array() - mx).exp().sum());
  return (z.array() - lse).matrix();
}

template <class Scalar>
struct MtpLoss {
  Scalar total = 0;
  std::vector<Scalar> per_digit;
};

/// -sum_j log softmax(E_j g_j(s) / tau)[c_j].
template <class Scalar>
MtpLoss<Scalar> mtp_loss(const Vector<Scalar>& s, std::span<const Code> target,
                         const Checkpoint<Scalar>& ckpt) {
  require_valid_id(target, ckpt.scheme());
  if (!(ckpt.shape.tau > 0.0)) throw ConfigError("temperature must be > 0");
  MtpLoss<Scalar> out;
  for (std::size_t j = 0; j < ckpt.m(); ++j) {
    const Vector<Scalar> lp = log_softmax(digit_logits(s, j, ckpt));
    out.per_digit.push_back(-lp[target[j]]);
  }
  for (Scalar v : out.per_digit) out.total += v;
  return out;
}

// ---------------------------------------------------------------------------
// Batched forward / backward
// ---------------------------------------------------------------------------

struct Example {
  std::vector<ItemId> history;  // oldest first, non-empty
  ItemId target = 0;
};

/// Mean MTP loss over `batch`. When `grad` is non-null it must be shaped like `ckpt`;
/// gradients of the mean loss are added into it.
template <class Scalar>
Scalar mtp_backward(std::span<const Example> batch, const ItemCatalog& catalog,
                    const Checkpoint<Scalar>& ckpt, Checkpoint<Scalar>* grad);

template <class Scalar>
Checkpoint<Scalar> backward(std::span<const Example> batch, const ItemCatalog& catalog,
                            const Checkpoint<Scalar>& ckpt, Scalar* loss = nullptr) {
  Checkpoint<Scalar> grad = ckpt.zeros_like();
  Scalar l = mtp_backward(batch, catalog, ckpt, &grad);
  if (loss) *loss = l;
  return grad;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// `catalog_digest` records which tokenization the model was trained on.
std::uint64_t save_checkpoint(const std::string& path, const Checkpoint<float>& ckpt,
                              std::uint64_t catalog_digest);

struct LoadedCheckpoint {
  Checkpoint<float> checkpoint;
  std::uint64_t catalog_digest = 0;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

extern template struct Checkpoint<float>;
extern template struct Checkpoint<double>;
extern template float mtp_backward<float>(std::span<const Example>, const ItemCatalog&,
                                          const Checkpoint<float>&, Checkpoint<float>*);
extern template double mtp_backward<double>(std::span<const Example>, const ItemCatalog&,
                                            const Checkpoint<double>&, Checkpoint<double>*);

}  // namespace rpg
