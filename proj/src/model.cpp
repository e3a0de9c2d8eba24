#include "rpg/model.hpp"

#include "rpg/container.hpp"

namespace rpg {

std::string to_string(Aggregation a) { return a == Aggregation::kMean ? "mean" : "max"; }
std::string to_string(EncoderKind e) {
  return e == EncoderKind::kReference ? "reference" : "attention";
}

Aggregation parse_aggregation(const std::string& text) {
  if (text == "mean") return Aggregation::kMean;
  if (text == "max") return Aggregation::kMax;
  throw ConfigError("unknown aggregation '" + text + "' (mean|max)");
}

EncoderKind parse_encoder(const std::string& text) {
  if (text == "reference") return EncoderKind::kReference;
  if (text == "attention") return EncoderKind::kAttention;
  throw ConfigError("unknown encoder '" + text + "' (reference|attention)");
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

template <class Scalar>
Checkpoint<Scalar> Checkpoint<Scalar>::zeros(const ModelShape& shape) {
  shape.scheme.validate();
  if (!(shape.tau > 0.0)) throw ConfigError("temperature must be > 0");
  const auto d = static_cast<Eigen::Index>(shape.scheme.d);
  const auto M = static_cast<Eigen::Index>(shape.scheme.M);
  const auto h = static_cast<Eigen::Index>(shape.hidden_width());
  Checkpoint c;
  c.shape = shape;
  c.tables.assign(shape.scheme.m, EmbeddingMatrix<Scalar>::Zero(M, d));
  if (shape.encoder == EncoderKind::kReference) {
    c.enc_w1 = Matrix<Scalar>::Zero(h, 2 * d);
    c.enc_b1 = Vector<Scalar>::Zero(h);
    c.enc_w2 = Matrix<Scalar>::Zero(d, h);
    c.enc_b2 = Vector<Scalar>::Zero(d);
  } else {
    c.att_wq = Matrix<Scalar>::Zero(d, d);
    c.att_wk = Matrix<Scalar>::Zero(d, d);
    c.att_wv = Matrix<Scalar>::Zero(d, d);
    c.att_wo = Matrix<Scalar>::Zero(d, d);
    c.att_bo = Vector<Scalar>::Zero(d);
  }
  c.heads.assign(shape.scheme.m, ProjectionHead<Scalar>{Matrix<Scalar>::Zero(h, d),
                                                        Vector<Scalar>::Zero(h),
                                                        Matrix<Scalar>::Zero(d, h),
                                                        Vector<Scalar>::Zero(d)});
  return c;
}

template <class Scalar>
Checkpoint<Scalar> Checkpoint<Scalar>::random(const ModelShape& shape, std::uint64_t seed) {
  Checkpoint c = zeros(shape);
  std::mt19937_64 rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(shape.scheme.d));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for_each_tensor(c, [&](const std::string& name, auto& t) {
    if (name.find("_b") != std::string::npos) return;  // biases start at zero
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<Scalar>(dist(rng));
  });
  return c;
}

template <class Scalar>
template <class To>
Checkpoint<To> Checkpoint<Scalar>::cast() const {
  Checkpoint<To> out;
  out.shape = shape;
  for (const auto& t : tables) out.tables.push_back(t.template cast<To>());
  out.enc_w1 = enc_w1.template cast<To>();
  out.enc_b1 = enc_b1.template cast<To>();
  out.enc_w2 = enc_w2.template cast<To>();
  out.enc_b2 = enc_b2.template cast<To>();
  out.att_wq = att_wq.template cast<To>();
  out.att_wk = att_wk.template cast<To>();
  out.att_wv = att_wv.template cast<To>();
  out.att_wo = att_wo.template cast<To>();
  out.att_bo = att_bo.template cast<To>();
  for (const auto& h : heads) {
    out.heads.push_back({h.w1.template cast<To>(), h.b1.template cast<To>(),
                         h.w2.template cast<To>(), h.b2.template cast<To>()});
  }
  return out;
}

template <class Scalar>
void Checkpoint<Scalar>::validate() const {
  shape.scheme.validate();
  if (!(shape.tau > 0.0)) throw ConfigError("temperature must be > 0");
  if (tables.size() != m() || heads.size() != m()) {
    throw DataError("checkpoint: table/head count does not match m");
  }
  const Checkpoint reference = zeros(shape);
  std::vector<std::pair<Eigen::Index, Eigen::Index>> expected;
  for_each_tensor(reference, [&](const std::string&, const auto& t) {
    expected.emplace_back(t.rows(), t.cols());
  });
  std::size_t i = 0;
  for_each_tensor(*this, [&](const std::string& name, const auto& t) {
    if (t.rows() != expected[i].first || t.cols() != expected[i].second) {
      throw DataError("checkpoint: tensor " + name + " has wrong shape");
    }
    if (!all_finite(t)) throw DataError("checkpoint: tensor " + name + " is not finite");
    ++i;
  });
}

template <class Scalar>
std::uint64_t Checkpoint<Scalar>::digest() const {
  const std::uint64_t fields[7] = {shape.scheme.m,          shape.scheme.M,
                                   shape.scheme.d,          shape.hidden_width(),
                                   shape.max_history,       static_cast<std::uint64_t>(shape.aggregation),
                                   static_cast<std::uint64_t>(shape.encoder)};
  std::uint64_t h = fnv1a(fields, sizeof(fields));
  const float tau = static_cast<float>(shape.tau);
  h = fnv1a(&tau, sizeof(tau), h);
  for_each_tensor(*this, [&](const std::string&, const auto& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      const float v = static_cast<float>(t.data()[i]);
      h = fnv1a(&v, sizeof(v), h);
    }
  });
  return h;
}

template <class Scalar>
std::size_t Checkpoint<Scalar>::parameter_count() const {
  std::size_t n = 0;
  for_each_tensor(*this, [&](const std::string&, const auto& t) { n += t.size(); });
  return n;
}

template struct Checkpoint<float>;
template struct Checkpoint<double>;
template Checkpoint<double> Checkpoint<float>::cast<double>() const;
template Checkpoint<float> Checkpoint<double>::cast<float>() const;
template Checkpoint<float> Checkpoint<float>::cast<float>() const;
template Checkpoint<double> Checkpoint<double>::cast<double>() const;

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

namespace {

template <class Scalar>
void aggregate_backward(std::span<const Code> id, const Vector<Scalar>& dv,
                        const Checkpoint<Scalar>& ckpt, Checkpoint<Scalar>& grad) {
  const std::size_t m = id.size();
  if (ckpt.shape.aggregation == Aggregation::kMean) {
    const Scalar inv = Scalar(1) / static_cast<Scalar>(m);
    for (std::size_t j = 0; j < m; ++j) grad.tables[j].row(id[j]) += inv * dv.transpose();
    return;
  }
  for (Eigen::Index t = 0; t < dv.size(); ++t) {
    std::size_t best = 0;
    Scalar best_v = ckpt.tables[0](id[0], t);
    for (std::size_t j = 1; j < m; ++j) {
      if (ckpt.tables[j](id[j], t) > best_v) {
        best_v = ckpt.tables[j](id[j], t);
        best = j;
      }
    }
    grad.tables[best](id[best], t) += dv[t];
  }
}

// Forward state for the attention encoder, one entry per example.
template <class Scalar>
struct AttentionState {
  Vector<Scalar> q;
  Matrix<Scalar> keys;    // d x L
  Matrix<Scalar> values;  // d x L
  Vector<Scalar> alpha;   // L
  Vector<Scalar> ctx;     // d
};

}  // namespace

template <class Scalar>
Scalar mtp_backward(std::span<const Example> batch, const ItemCatalog& catalog,
                    const Checkpoint<Scalar>& ckpt, Checkpoint<Scalar>* grad) {
  if (batch.empty()) return Scalar(0);
  if (!(ckpt.shape.tau > 0.0)) throw ConfigError("temperature must be > 0");
  if (catalog.scheme().m != ckpt.m() || catalog.scheme().M != ckpt.scheme().M) {
    throw ContractViolation("catalog scheme does not match checkpoint");
  }
  const auto B = static_cast<Eigen::Index>(batch.size());
  const auto d = static_cast<Eigen::Index>(ckpt.d());
  const std::size_t m = ckpt.m();
  const Scalar inv_tau = Scalar(1) / static_cast<Scalar>(ckpt.shape.tau);
  const Scalar inv_b = Scalar(1) / static_cast<Scalar>(B);

  // Item vectors and sequence representations.
  std::vector<Matrix<Scalar>> items(batch.size());
  std::vector<std::size_t> starts(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& hist = batch[b].history;
    if (batch[b].target >= catalog.size()) throw ContractViolation("target outside catalog");
    items[b] = history_vectors<Scalar>(hist, catalog, ckpt);
    starts[b] = hist.size() - static_cast<std::size_t>(items[b].cols());
  }

  Matrix<Scalar> S(d, B);
  Matrix<Scalar> X, pre_enc, hidden_enc;
  std::vector<AttentionState<Scalar>> att;
  const bool reference = ckpt.shape.encoder == EncoderKind::kReference;
  const Scalar att_scale = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
  if (reference) {
    X.resize(2 * d, B);
    for (Eigen::Index b = 0; b < B; ++b) {
      X.col(b).head(d) = items[b].rowwise().mean();
      X.col(b).tail(d) = items[b].col(items[b].cols() - 1);
    }
    pre_enc = (ckpt.enc_w1 * X).colwise() + ckpt.enc_b1;
    hidden_enc = pre_enc.cwiseMax(Scalar(0));
    S = (ckpt.enc_w2 * hidden_enc).colwise() + ckpt.enc_b2;
  } else {
    att.resize(batch.size());
    for (Eigen::Index b = 0; b < B; ++b) {
      auto& st = att[b];
      const auto& V = items[b];
      const Vector<Scalar> last = V.col(V.cols() - 1);
      st.q = ckpt.att_wq * last;
      st.keys = ckpt.att_wk * V;
      st.values = ckpt.att_wv * V;
      Vector<Scalar> scores = st.keys.transpose() * st.q * att_scale;
      scores.array() -= scores.maxCoeff();
      st.alpha = scores.array().exp();
      st.alpha /= st.alpha.sum();
      st.ctx = st.values * st.alpha;
      S.col(b) = last + ckpt.att_wo * st.ctx + ckpt.att_bo;
    }
  }

  // Heads, per-digit softmax and the loss.
  Scalar loss = 0;
  Matrix<Scalar> dS;
  if (grad) dS = Matrix<Scalar>::Zero(d, B);
  for (std::size_t j = 0; j < m; ++j) {
    const auto& head = ckpt.heads[j];
    const Matrix<Scalar> pre = (head.w1 * S).colwise() + head.b1;
    const Matrix<Scalar> H = pre.cwiseMax(Scalar(0));
    const Matrix<Scalar> G = (head.w2 * H).colwise() + head.b2;
    Matrix<Scalar> Z = (ckpt.tables[j] * G) * inv_tau;  // M x B
    for (Eigen::Index b = 0; b < B; ++b) {
      const Code target = catalog.id(batch[b].target)[j];
      const Scalar mx = Z.col(b).maxCoeff();
      const Scalar lse = mx + std::log((Z.col(b).array() - mx).exp().sum());
      loss -= Z(target, b) - lse;
      if (grad) {
        Z.col(b) = (Z.col(b).array() - lse).exp().matrix();
        Z(target, b) -= Scalar(1);
      }
    }
    if (!grad) continue;
    // Z now holds (p - y); scale by 1/B for the batch mean.
    const Matrix<Scalar> dZ = Z * inv_b;
    auto& g = grad->heads[j];
    grad->tables[j] += (dZ * G.transpose()) * inv_tau;
    const Matrix<Scalar> dG = (ckpt.tables[j].transpose() * dZ) * inv_tau;
    g.w2 += dG * H.transpose();
    g.b2 += dG.rowwise().sum();
    const Matrix<Scalar> dH =
        (head.w2.transpose() * dG).cwiseProduct((pre.array() > Scalar(0)).template cast<Scalar>().matrix());
    g.w1 += dH * S.transpose();
    g.b1 += dH.rowwise().sum();
    dS += head.w1.transpose() * dH;
  }
  loss *= inv_b;
  if (!grad) return loss;

  // Encoder backward down to per-item vector gradients.
  std::vector<Matrix<Scalar>> d_items(batch.size());
  if (reference) {
    grad->enc_w2 += dS * hidden_enc.transpose();
    grad->enc_b2 += dS.rowwise().sum();
    const Matrix<Scalar> dpre = (ckpt.enc_w2.transpose() * dS)
                                    .cwiseProduct((pre_enc.array() > Scalar(0)).template cast<Scalar>().matrix());
    grad->enc_w1 += dpre * X.transpose();
    grad->enc_b1 += dpre.rowwise().sum();
    const Matrix<Scalar> dX = ckpt.enc_w1.transpose() * dpre;
    for (Eigen::Index b = 0; b < B; ++b) {
      const Eigen::Index L = items[b].cols();
      d_items[b] = (dX.col(b).head(d) / static_cast<Scalar>(L)).replicate(1, L);
      d_items[b].col(L - 1) += dX.col(b).tail(d);
    }
  } else {
    for (Eigen::Index b = 0; b < B; ++b) {
      const auto& st = att[b];
      const auto& V = items[b];
      const Eigen::Index L = V.cols();
      const Vector<Scalar> ds = dS.col(b);
      grad->att_wo += ds * st.ctx.transpose();
      grad->att_bo += ds;
      const Vector<Scalar> dctx = ckpt.att_wo.transpose() * ds;
      const Matrix<Scalar> dvalues = dctx * st.alpha.transpose();
      const Vector<Scalar> dalpha = st.values.transpose() * dctx;
      const Vector<Scalar> dscores =
          (st.alpha.array() * (dalpha.array() - st.alpha.dot(dalpha))).matrix() * att_scale;
      const Matrix<Scalar> dkeys = st.q * dscores.transpose();
      const Vector<Scalar> dq = st.keys * dscores;
      const Vector<Scalar> last = V.col(L - 1);
      grad->att_wv += dvalues * V.transpose();
      grad->att_wk += dkeys * V.transpose();
      grad->att_wq += dq * last.transpose();
      d_items[b] = ckpt.att_wv.transpose() * dvalues + ckpt.att_wk.transpose() * dkeys;
      d_items[b].col(L - 1) += ckpt.att_wq.transpose() * dq + ds;
    }
  }

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& hist = batch[b].history;
    for (Eigen::Index l = 0; l < d_items[b].cols(); ++l) {
      const ItemId item = hist[starts[b] + static_cast<std::size_t>(l)];
      aggregate_backward<Scalar>(catalog.id(item), d_items[b].col(l), ckpt, *grad);
    }
  }
  return loss;
}

template float mtp_backward<float>(std::span<const Example>, const ItemCatalog&,
                                   const Checkpoint<float>&, Checkpoint<float>*);
template double mtp_backward<double>(std::span<const Example>, const ItemCatalog&,
                                     const Checkpoint<double>&, Checkpoint<double>*);

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

std::uint64_t save_checkpoint(const std::string& path, const Checkpoint<float>& ckpt,
                              std::uint64_t catalog_digest) {
  ckpt.validate();
  ArtifactWriter w("checkpoint", ckpt.scheme());
  w.meta()["aggregation"] = to_string(ckpt.shape.aggregation);
  w.meta()["encoder"] = to_string(ckpt.shape.encoder);
  w.meta()["hidden"] = ckpt.shape.hidden_width();
  w.meta()["tau"] = ckpt.shape.tau;
  w.meta()["max_history"] = ckpt.shape.max_history;
  w.meta()["catalog_digest"] = digest_hex(catalog_digest);
  w.meta()["content_digest"] = digest_hex(ckpt.digest());
  for_each_tensor(ckpt, [&](const std::string& name, const auto& t) {
    const RowMatrix<float> rm = t;
    w.add_f32(name, {static_cast<std::size_t>(t.rows()), static_cast<std::size_t>(t.cols())},
              {rm.data(), static_cast<std::size_t>(rm.size())});
  });
  return w.write(path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  auto a = Artifact::read(path, "checkpoint");
  LoadedCheckpoint out;
  try {
    ModelShape shape;
    shape.scheme = a.scheme();
    shape.aggregation = parse_aggregation(a.meta().at("aggregation").get<std::string>());
    shape.encoder = parse_encoder(a.meta().at("encoder").get<std::string>());
    shape.hidden = a.meta().at("hidden").get<std::size_t>();
    shape.tau = a.meta().at("tau").get<double>();
    shape.max_history = a.meta().at("max_history").get<std::size_t>();
    out.checkpoint = Checkpoint<float>::zeros(shape);
    for_each_tensor(out.checkpoint, [&](const std::string& name, auto& t) {
      const auto& sh = a.shape(name);
      if (sh.size() != 2 || sh[0] != static_cast<std::size_t>(t.rows()) ||
          sh[1] != static_cast<std::size_t>(t.cols())) {
        throw ArtifactError(path + ": tensor " + name + " has wrong shape");
      }
      const auto values = a.f32(name);
      t = Eigen::Map<const RowMatrix<float>>(values.data(), t.rows(), t.cols());
    });
    out.checkpoint.validate();
    out.catalog_digest = a.meta_digest("catalog_digest");
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError(path + ": malformed checkpoint meta: " + e.what());
  } catch (const ArtifactError&) {
    throw;
  } catch (const Error& e) {
    throw ArtifactError(path + ": " + e.what());
  }
  return out;
}

}  // namespace rpg
