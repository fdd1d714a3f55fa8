#pragma once

#include "polarbev/autodiff.hpp"
#include "polarbev/camera.hpp"
#include "polarbev/params.hpp"
#include "polarbev/polar_grid.hpp"
#include "polarbev/sampler.hpp"

namespace polarbev {

struct CpbtConfig {
  int channels = 32;   // C, divisible by heads
  int depth_bins = 8;  // D
  int heads = 2;
  int feat_h = 8;   // H_f: image height / patch
  int feat_w = 16;  // W_f: image width / patch
  int patch = 4;    // encoder stride (non-overlapping patch embedding)
};

// Learned pieces of the column-wise PV-to-BEV transformer. One attention
// layer per ray; queries are Polar queries (learned radial embedding plus
// sinusoidal azimuth code), keys/values are column pixels enriched with a
// depth positional embedding and a vertical-position sinusoid.
struct CpbtParams {
  Var enc_W, enc_b;                // patch embedding (backbone stand-in)
  Var depth_W, depth_b;            // C -> D depth head
  Var dmlp_W1, dmlp_b1, dmlp_W2, dmlp_b2;  // D -> C depth embedding MLP
  Var Wq, bq, Wk, bk, Wv, bv, Wo, bo;
  Var gate_w, gate_b;              // overlap gate g(c) = sigmoid(w ln c + b)
  Var ln_g, ln_b;
  Var mlp_W1, mlp_b1, mlp_W2, mlp_b2;
  Var radial;  // [R_p, C] learned radial embedding
  Var no_obs;  // [C] emitted for rays outside every camera FOV
  int heads = 1;
};

inline CpbtParams create_cpbt_params(ParamStore& ps, const CpbtConfig& cfg,
                                     int radial_bins, Rng& rng,
                                     const std::string& prefix = "cpbt.") {
  const int64_t C = cfg.channels, D = cfg.depth_bins;
  if (C % cfg.heads != 0) throw std::invalid_argument("CpbtConfig: heads must divide C");
  if (D < 2) throw std::invalid_argument("CpbtConfig: need >= 2 depth bins");
  CpbtParams p;
  p.heads = cfg.heads;
  auto mk = [&](const std::string& n, std::vector<int64_t> s, bool xavier) {
    Var v = ps.create(prefix + n, std::move(s));
    if (xavier) init_xavier(v->val, rng);
    return v;
  };
  const int64_t patch_in = 3LL * cfg.patch * cfg.patch;
  p.enc_W = mk("enc_W", {patch_in, C}, true);
  p.enc_b = mk("enc_b", {C}, false);
  p.depth_W = mk("depth_W", {C, D}, true);
  p.depth_b = mk("depth_b", {D}, false);
  p.dmlp_W1 = mk("dmlp_W1", {D, C}, true);
  p.dmlp_b1 = mk("dmlp_b1", {C}, false);
  p.dmlp_W2 = mk("dmlp_W2", {C, C}, true);
  p.dmlp_b2 = mk("dmlp_b2", {C}, false);
  p.Wq = mk("Wq", {C, C}, true);
  p.bq = mk("bq", {C}, false);
  p.Wk = mk("Wk", {C, C}, true);
  p.bk = mk("bk", {C}, false);
  p.Wv = mk("Wv", {C, C}, true);
  p.bv = mk("bv", {C}, false);
  p.Wo = mk("Wo", {C, C}, true);
  p.bo = mk("bo", {C}, false);
  p.gate_w = mk("gate_w", {1}, false);
  p.gate_w->val[0] = 1.0;  // g(1) = sigmoid(b); init b=0 => 0.5
  p.gate_b = mk("gate_b", {1}, false);
  p.ln_g = mk("ln_g", {C}, false);
  p.ln_g->val.fill(1.0);
  p.ln_b = mk("ln_b", {C}, false);
  p.mlp_W1 = mk("mlp_W1", {C, 4 * C}, true);
  p.mlp_b1 = mk("mlp_b1", {4 * C}, false);
  p.mlp_W2 = mk("mlp_W2", {4 * C, C}, true);
  p.mlp_b2 = mk("mlp_b2", {C}, false);
  p.radial = mk("radial", {radial_bins, C}, false);
  for (auto& v : p.radial->val.data) v = 0.02 * rng.gaussian();
  p.no_obs = mk("no_obs", {C}, false);
  for (auto& v : p.no_obs->val.data) v = 0.02 * rng.gaussian();
  return p;
}

// Non-overlapping patch embedding of an RGB image (row-major [H,W,3] in
// [0,1]) into a [H_f * W_f, C] feature map.
inline Var patch_embed(const Tensor& image, const CpbtConfig& cfg,
                       const CpbtParams& p) {
  const int H = cfg.feat_h * cfg.patch, W = cfg.feat_w * cfg.patch;
  if (image.shape != std::vector<int64_t>{H, W, 3})
    throw std::invalid_argument("patch_embed: image extents disagree with config");
  const int64_t pin = 3LL * cfg.patch * cfg.patch;
  Tensor patches({static_cast<int64_t>(cfg.feat_h) * cfg.feat_w, pin});
  for (int i = 0; i < cfg.feat_h; ++i)
    for (int j = 0; j < cfg.feat_w; ++j) {
      double* row = &patches[(static_cast<int64_t>(i) * cfg.feat_w + j) * pin];
      int64_t o = 0;
      for (int pi = 0; pi < cfg.patch; ++pi)
        for (int pj = 0; pj < cfg.patch; ++pj)
          for (int c = 0; c < 3; ++c)
            row[o++] = image[((static_cast<int64_t>(i) * cfg.patch + pi) * W +
                              (j * cfg.patch + pj)) * 3 + c];
    }
  return linear(constant(std::move(patches)), p.enc_W, p.enc_b);
}

// softmax over depth-bin logits per pixel
inline Var depth_distribution(const Var& pixel_features, const CpbtParams& p) {
  return softmax(linear(pixel_features, p.depth_W, p.depth_b));
}

inline Var depth_pos_embed(const Var& dist, const CpbtParams& p) {
  return linear(relu(linear(dist, p.dmlp_W1, p.dmlp_b1)), p.dmlp_W2, p.dmlp_b2);
}

inline Var mlp_block(const Var& x, const Var& W1, const Var& b1, const Var& W2,
                     const Var& b2) {
  return linear(relu(linear(x, W1, b1)), W2, b2);
}

// Multi-head cross-attention of R_p Polar ray queries over the joint key
// set of every covering camera's column pixels; residual scaled by the
// coverage gate, then layer norm and an MLP residual.
inline Var ray_cross_attention(const Var& queries, const Var& keys, int coverage,
                               const CpbtParams& p) {
  if (keys->val.rows() < 1) throw std::invalid_argument("ray_cross_attention: empty keys");
  if (coverage < 1) throw std::invalid_argument("ray_cross_attention: coverage < 1");
  const int64_t C = queries->val.cols();
  const int64_t H = p.heads, dh = C / H;
  Var q = linear(queries, p.Wq, p.bq);
  Var k = linear(keys, p.Wk, p.bk);
  Var v = linear(keys, p.Wv, p.bv);
  std::vector<Var> heads;
  heads.reserve(static_cast<size_t>(H));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int64_t h = 0; h < H; ++h) {
    Var qh = col_slice(q, h * dh, (h + 1) * dh);
    Var kh = col_slice(k, h * dh, (h + 1) * dh);
    Var vh = col_slice(v, h * dh, (h + 1) * dh);
    Var att = softmax(scale(matmul_nt(qh, kh), inv_sqrt));
    heads.push_back(matmul(att, vh));
  }
  Var o = linear(H == 1 ? heads[0] : concat_cols(heads), p.Wo, p.bo);
  Var gate = sigmoid(add(scale(p.gate_w, std::log(static_cast<double>(coverage))),
                         p.gate_b));
  Var h1 = layer_norm(add(queries, mul_scalar(o, gate)), p.ln_g, p.ln_b);
  return add(h1, mlp_block(h1, p.mlp_W1, p.mlp_b1, p.mlp_W2, p.mlp_b2));
}

// Full module: per azimuth bin, gather assigned columns across cameras,
// enrich with depth embeddings + vertical sinusoid, attend, emit [A_p*R_p, C].
// features: one [H_f*W_f, C] map per rig camera.
inline Var cpbt_forward(const std::vector<Var>& features,
                        const RayAssignment& assignment, const CpbtConfig& cfg,
                        int radial_bins, const CpbtParams& p) {
  const int64_t C = cfg.channels;
  for (const auto& f : features)
    if (f->val.rows() != static_cast<int64_t>(cfg.feat_h) * cfg.feat_w ||
        f->val.cols() != C)
      throw std::invalid_argument("cpbt_forward: feature map extents disagree");

  // vertical-position sinusoid, one row per feature-map row
  Tensor vpos({cfg.feat_h, C});
  for (int vrow = 0; vrow < cfg.feat_h; ++vrow) {
    Tensor e = sinusoidal_embed((vrow + 0.5) / cfg.feat_h, C);
    std::copy(e.data.begin(), e.data.end(), vpos.data.begin() + static_cast<int64_t>(vrow) * C);
  }

  std::vector<Var> bins;
  bins.reserve(assignment.columns.size());
  for (int a = 0; a < assignment.azimuth_bins; ++a) {
    const double phi_hat = (a + 0.5) / assignment.azimuth_bins;
    Var queries = add_row(p.radial, constant(sinusoidal_embed(phi_hat, C)));
    const auto& cols = assignment.columns[a];
    if (cols.empty()) {
      bins.push_back(repeat_row(p.no_obs, radial_bins));
      continue;
    }
    std::vector<Var> parts;
    parts.reserve(cols.size());
    Tensor vtiled({static_cast<int64_t>(cols.size()) * cfg.feat_h, C});
    int64_t off = 0;
    for (const auto& cr : cols) {
      std::vector<int64_t> idx(static_cast<size_t>(cfg.feat_h));
      for (int vrow = 0; vrow < cfg.feat_h; ++vrow)
        idx[static_cast<size_t>(vrow)] = static_cast<int64_t>(vrow) * cfg.feat_w + cr.column;
      parts.push_back(gather_rows(features[static_cast<size_t>(cr.camera)], idx));
      std::copy(vpos.data.begin(), vpos.data.end(), vtiled.data.begin() + off);
      off += static_cast<int64_t>(cfg.feat_h) * C;
    }
    Var base = parts.size() == 1 ? parts[0] : concat_rows(parts);
    Var keys = add(base, depth_pos_embed(depth_distribution(base, p), p));
    keys = add(keys, constant(vtiled));
    bins.push_back(ray_cross_attention(queries, keys, assignment.coverage[a], p));
  }
  return concat_rows(bins);
}

}  // namespace polarbev
