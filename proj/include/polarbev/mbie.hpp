#pragma once

#include "polarbev/params.hpp"
#include "polarbev/sampler.hpp"

namespace polarbev {

// Multi-scale BEV pyramid; maps ordered by strictly increasing resolution,
// all sharing the same physical extent and channel count.
struct MbiePyramid {
  std::vector<BevFeatureMap> maps;

  void validate() const {
    if (maps.size() < 2) throw std::invalid_argument("MbiePyramid: need >= 2 scales");
    const double L = maps.front().spec.extent;
    const int64_t C = maps.front().data->val.cols();
    for (size_t s = 0; s < maps.size(); ++s) {
      if (maps[s].spec.extent != L) throw std::invalid_argument("MbiePyramid: extent mismatch");
      if (maps[s].data->val.cols() != C) throw std::invalid_argument("MbiePyramid: channel mismatch");
      if (s > 0 && !(maps[s].spec.height > maps[s - 1].spec.height &&
                     maps[s].spec.width > maps[s - 1].spec.width))
        throw std::invalid_argument("MbiePyramid: resolutions not strictly increasing");
    }
  }
};

struct MbieConfig {
  int channels = 32;
  int heads = 2;
  int points = 2;  // R: sampling points per scale per head
  int layers = 1;
  std::vector<int> scales = {16, 32, 64};
};

struct MbieLayerParams {
  Var ln1_g, ln1_b;
  Var off_W, off_b;  // C -> H*S*R*2, zero-init (offsets start at the reference)
  Var wt_W, wt_b;    // C -> H*S*R, zero-init (uniform attention)
  Var val_W, val_b;  // W' value projection
  Var out_W, out_b;  // W  output projection, zero-init (layer starts as identity)
  Var ln2_g, ln2_b;
  Var mlp_W1, mlp_b1, mlp_W2, mlp_b2;  // mlp_W2 zero-init
};

struct MbieParams {
  std::vector<MbieLayerParams> layers;
  std::vector<Var> fuse_off_W, fuse_off_b;  // per scale, zero-init
  Var fuse_W, fuse_b;  // [S*C, C], initialized to cross-scale averaging
  int heads = 1, points = 1, n_scales = 2;
};

inline MbieParams create_mbie_params(ParamStore& ps, const MbieConfig& cfg, Rng& rng,
                                     const std::string& prefix = "mbie.") {
  const int64_t C = cfg.channels;
  if (C % cfg.heads != 0) throw std::invalid_argument("MbieConfig: heads must divide C");
  const int64_t S = static_cast<int64_t>(cfg.scales.size());
  const int64_t HSR = static_cast<int64_t>(cfg.heads) * S * cfg.points;
  MbieParams p;
  p.heads = cfg.heads;
  p.points = cfg.points;
  p.n_scales = static_cast<int>(S);
  auto mk = [&](const std::string& n, std::vector<int64_t> s, bool xavier) {
    Var v = ps.create(prefix + n, std::move(s));
    if (xavier) init_xavier(v->val, rng);
    return v;
  };
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string lp = "l" + std::to_string(l) + ".";
    MbieLayerParams lr;
    lr.ln1_g = mk(lp + "ln1_g", {C}, false);
    lr.ln1_g->val.fill(1.0);
    lr.ln1_b = mk(lp + "ln1_b", {C}, false);
    lr.off_W = mk(lp + "off_W", {C, HSR * 2}, false);
    lr.off_b = mk(lp + "off_b", {HSR * 2}, false);
    lr.wt_W = mk(lp + "wt_W", {C, HSR}, false);
    lr.wt_b = mk(lp + "wt_b", {HSR}, false);
    lr.val_W = mk(lp + "val_W", {C, C}, true);
    lr.val_b = mk(lp + "val_b", {C}, false);
    lr.out_W = mk(lp + "out_W", {C, C}, false);
    lr.out_b = mk(lp + "out_b", {C}, false);
    lr.ln2_g = mk(lp + "ln2_g", {C}, false);
    lr.ln2_g->val.fill(1.0);
    lr.ln2_b = mk(lp + "ln2_b", {C}, false);
    lr.mlp_W1 = mk(lp + "mlp_W1", {C, 4 * C}, true);
    lr.mlp_b1 = mk(lp + "mlp_b1", {4 * C}, false);
    lr.mlp_W2 = mk(lp + "mlp_W2", {4 * C, C}, false);
    lr.mlp_b2 = mk(lp + "mlp_b2", {C}, false);
    p.layers.push_back(lr);
  }
  for (int s = 0; s < S; ++s) {
    p.fuse_off_W.push_back(mk("fuse_off_W" + std::to_string(s), {C, 2}, false));
    p.fuse_off_b.push_back(mk("fuse_off_b" + std::to_string(s), {2}, false));
  }
  p.fuse_W = mk("fuse_W", {S * C, C}, false);
  for (int s = 0; s < S; ++s)
    for (int64_t j = 0; j < C; ++j) p.fuse_W->val[(s * C + j) * C + j] = 1.0 / static_cast<double>(S);
  p.fuse_b = mk("fuse_b", {C}, false);
  return p;
}

// normalized centers of every cell of a grid, ordered row-major
inline Tensor grid_ref_points(int H, int W) {
  Tensor ref({static_cast<int64_t>(H) * W, 2});
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      ref[(static_cast<int64_t>(i) * W + j) * 2] = (i + 0.5) / H;
      ref[(static_cast<int64_t>(i) * W + j) * 2 + 1] = (j + 0.5) / W;
    }
  return ref;
}

// MSBEVDeformAttn(b_q, ref, {b^s}): per head h, sum over scales s and
// points r of A_hsqr * W'_h b^s(sigma_s(ref) + delta_hsqr), then the
// output projection over concatenated heads. A is a per-head softmax over
// (s,r). Offsets are predicted in scale-s pixels and clamped to the scale
// extent; sampling is the bilinear kernel, zero-padded, no wrap.
inline Var ms_deform_attn(const Var& b_q, const Tensor& ref,
                          const MbiePyramid& pyramid, const MbieLayerParams& lp,
                          int heads, int points) {
  const int64_t N = b_q->val.rows(), C = b_q->val.cols();
  if (ref.rows() != N || ref.cols() != 2)
    throw std::invalid_argument("ms_deform_attn: ref must be [N,2]");
  for (int64_t i = 0; i < ref.numel(); ++i)
    if (ref[i] < 0.0 || ref[i] > 1.0)
      throw std::invalid_argument("ms_deform_attn: reference point outside [0,1]^2");
  const int64_t S = static_cast<int64_t>(pyramid.maps.size());
  const int64_t dh = C / heads;

  Var off = linear(b_q, lp.off_W, lp.off_b);  // [N, H*S*R*2]
  Var wt = linear(b_q, lp.wt_W, lp.wt_b);     // [N, H*S*R]

  // project every scale's value map once
  std::vector<Var> values;
  values.reserve(static_cast<size_t>(S));
  for (const auto& m : pyramid.maps) values.push_back(linear(m.data, lp.val_W, lp.val_b));

  Var ref_c = constant(ref);
  std::vector<Var> head_ctx;
  head_ctx.reserve(static_cast<size_t>(heads));
  for (int64_t h = 0; h < heads; ++h) {
    Var att = softmax(col_slice(wt, h * S * points, (h + 1) * S * points));
    Var ctx;  // [N, dh]
    for (int64_t s = 0; s < S; ++s) {
      const int Hs = pyramid.maps[static_cast<size_t>(s)].spec.height;
      const int Ws = pyramid.maps[static_cast<size_t>(s)].spec.width;
      Var vh = col_slice(values[static_cast<size_t>(s)], h * dh, (h + 1) * dh);
      for (int64_t r = 0; r < points; ++r) {
        const int64_t base = ((h * S + s) * points + r) * 2;
        Var oc = clamp(col_slice(off, base, base + 2),
                       -static_cast<double>(std::max(Hs, Ws)),
                       static_cast<double>(std::max(Hs, Ws)));
        Var onorm = concat_cols({scale(col_slice(oc, 0, 1), 1.0 / Hs),
                                 scale(col_slice(oc, 1, 2), 1.0 / Ws)});
        Var coords = add(ref_c, onorm);
        Var sampled = bilinear_sample(vh, Hs, Ws, coords, /*wrap=*/false);
        Var weighted = mul_rows(sampled, col_slice(att, s * points + r, s * points + r + 1));
        ctx = ctx ? add(ctx, weighted) : weighted;
      }
    }
    head_ctx.push_back(ctx);
  }
  Var joined = heads == 1 ? head_ctx[0] : concat_cols(head_ctx);
  return linear(joined, lp.out_W, lp.out_b);
}

// Every cell of every scale queries the pyramid at its own center;
// pre-norm residual attention followed by a pre-norm MLP residual.
inline MbiePyramid mbie_forward(const MbiePyramid& pyramid, const MbieParams& p) {
  pyramid.validate();
  MbiePyramid cur = pyramid;
  for (const auto& lp : p.layers) {
    MbiePyramid next;
    for (const auto& m : cur.maps) {
      Tensor ref = grid_ref_points(m.spec.height, m.spec.width);
      Var q = layer_norm(m.data, lp.ln1_g, lp.ln1_b);
      Var x = add(m.data, ms_deform_attn(q, ref, cur, lp, p.heads, p.points));
      Var x2 = layer_norm(x, lp.ln2_g, lp.ln2_b);
      x = add(x, linear(relu(linear(x2, lp.mlp_W1, lp.mlp_b1)), lp.mlp_W2, lp.mlp_b2));
      next.maps.push_back({x, m.spec});
    }
    cur = std::move(next);
  }
  return cur;
}

// Resample every scale to the target grid with offsets predicted from the
// scale's own (coarser) map at the target cell, then fuse scales per cell
// with a linear map. Total over target resolutions.
inline BevFeatureMap fuse_to_target(const MbiePyramid& pyramid,
                                    const CartesianGridSpec& target,
                                    const MbieParams& p) {
  if (pyramid.maps.empty()) throw std::invalid_argument("fuse_to_target: empty pyramid");
  if (pyramid.maps.front().spec.extent != target.extent)
    throw std::invalid_argument("fuse_to_target: extent mismatch");
  target.validate();
  Tensor ref = grid_ref_points(target.height, target.width);
  Var ref_c = constant(ref);
  std::vector<Var> resampled;
  for (size_t s = 0; s < pyramid.maps.size(); ++s) {
    const auto& m = pyramid.maps[s];
    const int Hs = m.spec.height, Ws = m.spec.width;
    Var at_ref = bilinear_sample(m.data, Hs, Ws, ref, /*wrap=*/false);
    Var off = clamp(linear(at_ref, p.fuse_off_W[s], p.fuse_off_b[s]),
                    -static_cast<double>(std::max(Hs, Ws)),
                    static_cast<double>(std::max(Hs, Ws)));
    Var onorm = concat_cols({scale(col_slice(off, 0, 1), 1.0 / Hs),
                             scale(col_slice(off, 1, 2), 1.0 / Ws)});
    resampled.push_back(bilinear_sample(m.data, Hs, Ws, add(ref_c, onorm), false));
  }
  if (static_cast<int>(resampled.size()) != p.n_scales)
    throw std::invalid_argument("fuse_to_target: scale count disagrees with params");
  Var joined = resampled.size() == 1 ? resampled[0] : concat_cols(resampled);
  return {linear(joined, p.fuse_W, p.fuse_b), target};
}

}  // namespace polarbev
