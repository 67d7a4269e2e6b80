#pragma once

// Object-centric scene encoding: a permutation-invariant per-object point
// encoder, a relation-biased self-attention transformer over object features,
// and the two-layer GeLU connector into the LM embedding space.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "pointlm/autograd.hpp"
#include "pointlm/errors.hpp"
#include "pointlm/geometry.hpp"
#include "pointlm/params.hpp"

namespace pointlm {

struct EncoderConfig {
  int d_obj = 64;
  int n_layers = 3;
  int n_heads = 8;
  int d_llm = 96;
  int d_point_hidden = 32;
  bool frozen_point_encoder = true;

  void validate() const {
    if (d_obj % n_heads != 0)
      throw NumericError("EncoderConfig: d_obj must be divisible by n_heads");
  }
};

struct PairwiseRelation {
  double distance = 0;   // >= 0
  double azimuth = 0;    // (-pi, pi]
  double elevation = 0;  // [-pi/2, pi/2]
};

inline std::vector<std::vector<PairwiseRelation>> pairwise_relations(
    const std::vector<Vec3>& centroids) {
  if (centroids.empty())
    throw NumericError("pairwise_relations: need at least one centroid");
  const size_t n = centroids.size();
  std::vector<std::vector<PairwiseRelation>> rel(
      n, std::vector<PairwiseRelation>(n));
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double dx = centroids[j][0] - centroids[i][0];
      const double dy = centroids[j][1] - centroids[i][1];
      const double dz = centroids[j][2] - centroids[i][2];
      const double dh = std::hypot(dx, dy);
      PairwiseRelation& r = rel[i][j];
      r.distance = std::sqrt(dx * dx + dy * dy + dz * dz);
      r.azimuth = (dh > 0 || dx != 0 || dy != 0) ? std::atan2(dy, dx) : 0.0;
      if (r.azimuth <= -M_PI) r.azimuth = M_PI;  // fold -pi onto +pi
      r.elevation = (r.distance > 0) ? std::atan2(dz, dh) : 0.0;
    }
  return rel;
}

class SceneEncoder {
 public:
  SceneEncoder() = default;

  void init(ParamStore& store, std::mt19937_64& rng, EncoderConfig cfg) {
    cfg.validate();
    cfg_ = cfg;
    const int h = cfg.d_point_hidden, d = cfg.d_obj;
    store.create("point_encoder.w1", "point_encoder", 6, h, rng, 6);
    store.create_const("point_encoder.b1", "point_encoder", 1, h, 0.0);
    store.create("point_encoder.w2", "point_encoder", h, d, rng, h);
    store.create_const("point_encoder.b2", "point_encoder", 1, d, 0.0);

    store.create("spatial.rel_w", "spatial_transformer", 4, cfg.n_heads, rng, 4);
    store.create_const("spatial.rel_b", "spatial_transformer", 1, cfg.n_heads,
                       0.0);
    for (int l = 0; l < cfg.n_layers; ++l) {
      const std::string p = "spatial.l" + std::to_string(l) + ".";
      store.create_const(p + "ln1_g", "spatial_transformer", 1, d, 1.0);
      store.create_const(p + "ln1_b", "spatial_transformer", 1, d, 0.0);
      store.create(p + "wq", "spatial_transformer", d, d, rng, d);
      store.create_const(p + "bq", "spatial_transformer", 1, d, 0.0);
      store.create(p + "wk", "spatial_transformer", d, d, rng, d);
      store.create_const(p + "bk", "spatial_transformer", 1, d, 0.0);
      store.create(p + "wv", "spatial_transformer", d, d, rng, d);
      store.create_const(p + "bv", "spatial_transformer", 1, d, 0.0);
      store.create(p + "wo", "spatial_transformer", d, d, rng, d);
      store.create_const(p + "bo", "spatial_transformer", 1, d, 0.0);
      store.create_const(p + "ln2_g", "spatial_transformer", 1, d, 1.0);
      store.create_const(p + "ln2_b", "spatial_transformer", 1, d, 0.0);
      store.create(p + "mlp_w1", "spatial_transformer", d, 2 * d, rng, d);
      store.create_const(p + "mlp_b1", "spatial_transformer", 1, 2 * d, 0.0);
      store.create(p + "mlp_w2", "spatial_transformer", 2 * d, d, rng, 2 * d);
      store.create_const(p + "mlp_b2", "spatial_transformer", 1, d, 0.0);
    }

    store.create("connector.w1", "connector", d, cfg.d_llm, rng, d);
    store.create_const("connector.b1", "connector", 1, cfg.d_llm, 0.0);
    store.create("connector.w2", "connector", cfg.d_llm, cfg.d_llm, rng,
                 cfg.d_llm);
    store.create_const("connector.b2", "connector", 1, cfg.d_llm, 0.0);
  }

  const EncoderConfig& config() const { return cfg_; }

  // Per-point shared MLP + coordinatewise max pooling -> [1, d_obj].
  // Exactly permutation invariant over point order. Missing colors enter as
  // zeros.
  Tensor encode_object(Graph& g, const ObjectCloud& cloud,
                       const ParamStore& store) const {
    if (cloud.points.empty()) throw DataError("encode_object: empty cloud");
    const int p = static_cast<int>(cloud.points.size());
    Tensor in = make_tensor(p, 6);
    for (int i = 0; i < p; ++i) {
      const Point& pt = cloud.points[i];
      in->at(i, 0) = pt.x;
      in->at(i, 1) = pt.y;
      in->at(i, 2) = pt.z;
      if (pt.has_color) {
        in->at(i, 3) = pt.r;
        in->at(i, 4) = pt.g;
        in->at(i, 5) = pt.b;
      }
    }
    Tensor h = g.gelu(g.add_rowvec(g.matmul(in, store.get("point_encoder.w1")),
                                   store.get("point_encoder.b1")));
    Tensor f = g.add_rowvec(g.matmul(h, store.get("point_encoder.w2")),
                            store.get("point_encoder.b2"));
    return g.col_max(f);
  }

  // Relation features per ordered pair: (distance, sin az, cos az, sin elev).
  static Tensor relation_features(
      const std::vector<std::vector<PairwiseRelation>>& rel) {
    const int n = static_cast<int>(rel.size());
    Tensor feat = make_tensor(n * n, 4);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const PairwiseRelation& r = rel[i][j];
        const int row = i * n + j;
        feat->at(row, 0) = r.distance;
        feat->at(row, 1) = std::sin(r.azimuth);
        feat->at(row, 2) = std::cos(r.azimuth);
        feat->at(row, 3) = std::sin(r.elevation);
      }
    return feat;
  }

  // Self-attention over object features with a learned per-head scalar bias
  // on the pre-softmax logits, derived from the pairwise relations.
  Tensor spatial_transformer(
      Graph& g, const Tensor& features,
      const std::vector<std::vector<PairwiseRelation>>& rel,
      const ParamStore& store) const {
    const int n = features->rows;
    if (static_cast<size_t>(n) != rel.size())
      throw NumericError("spatial_transformer: relation matrix dim mismatch");
    if (features->cols != cfg_.d_obj)
      throw NumericError("spatial_transformer: feature dim mismatch");
    const int d = cfg_.d_obj, nh = cfg_.n_heads, dh = d / nh;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor rel_bias = g.add_rowvec(
        g.matmul(relation_features(rel), store.get("spatial.rel_w")),
        store.get("spatial.rel_b"));  // [n*n, nh]

    Tensor x = features;
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const std::string p = "spatial.l" + std::to_string(l) + ".";
      Tensor xn = g.layer_norm(x, store.get(p + "ln1_g"), store.get(p + "ln1_b"));
      Tensor q = g.add_rowvec(g.matmul(xn, store.get(p + "wq")),
                              store.get(p + "bq"));
      Tensor k = g.add_rowvec(g.matmul(xn, store.get(p + "wk")),
                              store.get(p + "bk"));
      Tensor v = g.add_rowvec(g.matmul(xn, store.get(p + "wv")),
                              store.get(p + "bv"));
      std::vector<Tensor> heads;
      for (int hh = 0; hh < nh; ++hh) {
        Tensor qh = g.slice_cols(q, hh * dh, (hh + 1) * dh);
        Tensor kh = g.slice_cols(k, hh * dh, (hh + 1) * dh);
        Tensor vh = g.slice_cols(v, hh * dh, (hh + 1) * dh);
        Tensor scores = g.scale(g.matmul_nt(qh, kh), scale);
        Tensor bias_h = g.reshape(g.slice_cols(rel_bias, hh, hh + 1), n, n);
        scores = g.add(scores, bias_h);
        heads.push_back(g.matmul(g.row_softmax(scores), vh));
      }
      Tensor attn = g.add_rowvec(
          g.matmul(g.concat_cols(heads), store.get(p + "wo")),
          store.get(p + "bo"));
      x = g.add(x, attn);
      Tensor xn2 =
          g.layer_norm(x, store.get(p + "ln2_g"), store.get(p + "ln2_b"));
      Tensor mlp = g.add_rowvec(
          g.matmul(g.gelu(g.add_rowvec(g.matmul(xn2, store.get(p + "mlp_w1")),
                                       store.get(p + "mlp_b1"))),
                   store.get(p + "mlp_w2")),
          store.get(p + "mlp_b2"));
      x = g.add(x, mlp);
    }
    return x;
  }

  // Per-token linear -> GeLU -> linear into the LM embedding space.
  Tensor connector(Graph& g, const Tensor& tokens,
                   const ParamStore& store) const {
    if (tokens->cols != cfg_.d_obj)
      throw NumericError("connector: token dim mismatch");
    Tensor h = g.gelu(g.add_rowvec(g.matmul(tokens, store.get("connector.w1")),
                                   store.get("connector.b1")));
    return g.add_rowvec(g.matmul(h, store.get("connector.w2")),
                        store.get("connector.b2"));
  }

  // Full path: normalize + encode each object, relation-biased attention over
  // the stack, connector projection -> [N, d_llm].
  Tensor encode_scene(Graph& g, const Scene& scene,
                      const ParamStore& store) const {
    validate_scene(scene);
    std::vector<Tensor> feats;
    std::vector<Vec3> centroids;
    for (const auto& obj : scene.objects) {
      feats.push_back(encode_object(g, normalize_object(obj), store));
      centroids.push_back(obj.centroid);
    }
    Tensor stacked = g.concat_rows(feats);
    Tensor tokens =
        spatial_transformer(g, stacked, pairwise_relations(centroids), store);
    return connector(g, tokens, store);
  }

 private:
  EncoderConfig cfg_;
};

}  // namespace pointlm
