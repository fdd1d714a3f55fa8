#pragma once

#include <map>
#include <memory>
#include <vector>

#include "polarbev/camera.hpp"
#include "polarbev/det_head.hpp"
#include "polarbev/mbie.hpp"
#include "polarbev/params.hpp"
#include "polarbev/polar_grid.hpp"
#include "polarbev/sampler.hpp"
#include "polarbev/synth_scene.hpp"
#include "polarbev/view_transformer.hpp"

namespace polarbev {

// Everything the network architecture depends on. Two deployment paths share
// one parameter set:
//  - polar (default): the polar map is resampled at whatever output
//    resolution is requested, so the pyramid carries resolution-native reads;
//  - baseline: at the training resolution the computation is identical, but
//    the fused Cartesian map is frozen there and every other resolution is
//    reached by bilinear interpolation of that map.
// The ablation switches degrade the polar stage to mean-pooled ray
// aggregation (use_cpbt=false) and skip the cross-scale interaction layers
// (use_mbie=false); fusion always runs so every variant reaches arbitrary
// output resolutions.
struct ModelConfig {
  int cameras = 4;
  double fov_deg = 100.0;
  int image_width = 64;
  int image_height = 32;
  int patch = 4;
  double extent = 8.0;
  int azimuth_bins = 64;
  int radial_bins = 24;
  int channels = 32;
  int depth_bins = 8;
  int heads = 2;
  std::vector<int> scales = {16, 32, 64};
  int mbie_points = 2;
  int mbie_layers = 1;
  int head_resolution = 32;
  int num_classes = 2;
  bool baseline = false;
  bool use_cpbt = true;
  bool use_mbie = true;

  void validate() const {
    if (cameras < 1) throw std::invalid_argument("ModelConfig: cameras < 1");
    if (patch < 1 || image_width % patch != 0 || image_height % patch != 0)
      throw std::invalid_argument("ModelConfig: patch must divide image dimensions");
    if (extent <= 0.0) throw std::invalid_argument("ModelConfig: extent <= 0");
    if (channels % heads != 0) throw std::invalid_argument("ModelConfig: heads must divide channels");
    if (num_classes < 1) throw std::invalid_argument("ModelConfig: num_classes < 1");
    if (scales.empty()) throw std::invalid_argument("ModelConfig: empty scale list");
    bool found = false;
    for (int s : scales) found = found || s == head_resolution;
    if (!found)
      throw std::invalid_argument("ModelConfig: head_resolution must be one of the pyramid scales");
  }
};

struct HeadOutput {
  Var heat_logits;  // [res*res, num_classes]
  Var reg;          // [res*res, 6]
  CartesianGridSpec grid;
};

class Model {
 public:
  Model(const ModelConfig& config, uint64_t seed) : cfg(config) {
    cfg.validate();
    for (int i = 0; i < cfg.cameras; ++i)
      rig.cameras.push_back(Camera::make_yaw(2.0 * M_PI * i / cfg.cameras, cfg.fov_deg,
                                             cfg.image_width, cfg.image_height));
    rig.validate();

    cpbt_cfg.channels = cfg.channels;
    cpbt_cfg.depth_bins = cfg.depth_bins;
    cpbt_cfg.heads = cfg.heads;
    cpbt_cfg.feat_h = cfg.image_height / cfg.patch;
    cpbt_cfg.feat_w = cfg.image_width / cfg.patch;
    cpbt_cfg.patch = cfg.patch;

    assignment = assign_columns_to_rays(rig, cfg.azimuth_bins, cpbt_cfg.feat_w,
                                        static_cast<double>(cfg.patch));

    polar_spec.azimuth_bins = cfg.azimuth_bins;
    polar_spec.radial_bins = cfg.radial_bins;
    polar_spec.sigma_min = 0.0;
    polar_spec.sigma_max = default_sigma_max(cfg.extent);
    polar_spec.validate();

    mbie_cfg.channels = cfg.channels;
    mbie_cfg.heads = cfg.heads;
    mbie_cfg.points = cfg.mbie_points;
    mbie_cfg.layers = cfg.mbie_layers;
    mbie_cfg.scales = cfg.scales;

    Rng rng(seed);
    cpbt = create_cpbt_params(ps, cpbt_cfg, cfg.radial_bins, rng);
    mbie = create_mbie_params(ps, mbie_cfg, rng);

    const int64_t C = cfg.channels, K = cfg.num_classes;
    heat_W1 = ps.create("head.heat_W1", {C, C});
    heat_b1 = ps.create("head.heat_b1", {C});
    heat_W2 = ps.create("head.heat_W2", {C, K});
    heat_b2 = ps.create("head.heat_b2", {K});
    reg_W1 = ps.create("head.reg_W1", {C, C});
    reg_b1 = ps.create("head.reg_b1", {C});
    reg_W2 = ps.create("head.reg_W2", {C, 6});
    reg_b2 = ps.create("head.reg_b2", {6});
    init_xavier(heat_W1->val, rng);
    init_xavier(heat_W2->val, rng);
    init_xavier(reg_W1->val, rng);
    // negative heatmap bias so the initial peak probability is low (~0.1);
    // keeps the focal loss from being swamped by the background cells early
    for (auto& v : heat_b2->val.data) v = std::log(1.0 / 9.0);
    // zero regression tail: initial sizes decode to exp(0)=1 m, offsets to 0
  }

  // full forward pass at the requested output resolution
  HeadOutput forward(const std::vector<Tensor>& images, int resolution) const {
    if (resolution < 8) throw std::invalid_argument("forward: resolution < 8");
    if (static_cast<int>(images.size()) != cfg.cameras)
      throw std::invalid_argument("forward: image count does not match rig");
    std::vector<Var> feats;
    feats.reserve(images.size());
    for (const auto& img : images) feats.push_back(patch_embed(img, cpbt_cfg, cpbt));

    Var polar = cfg.use_cpbt ? cpbt_forward(feats, assignment, cpbt_cfg, cfg.radial_bins, cpbt)
                             : meanpool_forward(feats);
    PolarFeatureMap pmap{polar, polar_spec};

    MbiePyramid pyr;
    for (int s : cfg.scales)
      pyr.maps.push_back(polar_to_cartesian(pmap, sampling_grid(s), grid_at(s)));

    if (cfg.use_mbie && cfg.scales.size() >= 2) pyr = mbie_forward(pyr, mbie);

    BevFeatureMap fused;
    if (cfg.baseline && resolution != cfg.head_resolution) {
      // interpolation deployment: the fused map is frozen at the training
      // resolution and any other output grid is a bilinear resample of it
      BevFeatureMap fixed = fuse_to_target(pyr, grid_at(cfg.head_resolution), mbie);
      Var m = bilinear_sample(fixed.data, cfg.head_resolution, cfg.head_resolution,
                              resize_ref(resolution), false);
      fused = {m, grid_at(resolution)};
    } else {
      fused = fuse_to_target(pyr, grid_at(resolution), mbie);
    }

    Var heat = linear(relu(linear(fused.data, heat_W1, heat_b1)), heat_W2, heat_b2);
    Var reg = linear(relu(linear(fused.data, reg_W1, reg_b1)), reg_W2, reg_b2);
    return {heat, reg, fused.spec};
  }

  Var loss(const HeadOutput& out, const SceneGT& gt, double lambda_reg = 0.25) const {
    Tensor hm = heatmap_targets(gt, out.grid, cfg.num_classes);
    RegTargets rt = regression_targets(gt, out.grid);
    return add(focal_loss(out.heat_logits, hm), scale(regression_loss(out.reg, rt), lambda_reg));
  }

  std::vector<Detection> detect(const std::vector<Tensor>& images, int resolution,
                                double score_thresh = 0.3, int max_dets = 64) const {
    HeadOutput out = forward(images, resolution);
    Var probs = sigmoid(out.heat_logits);
    return decode(probs->val, out.reg->val, out.grid, score_thresh, max_dets);
  }

  CartesianGridSpec grid_at(int resolution) const {
    return {resolution, resolution, cfg.extent};
  }

  ModelConfig cfg;
  ParamStore ps;
  CameraRig rig;
  RayAssignment assignment;
  PolarGridSpec polar_spec;
  CpbtConfig cpbt_cfg;
  CpbtParams cpbt;
  MbieConfig mbie_cfg;
  MbieParams mbie;
  Var heat_W1, heat_b1, heat_W2, heat_b2;
  Var reg_W1, reg_b1, reg_W2, reg_b2;

 private:
  // ablation stand-in for the cross-attention stage: each azimuth bin's
  // columns are mean-pooled into one context vector which is broadcast over
  // the radial slots; the post-attention norm+MLP block is reused so the
  // variant differs only in how image evidence reaches the polar slots
  Var meanpool_forward(const std::vector<Var>& feats) const {
    const int64_t C = cfg.channels;
    std::vector<Var> bins;
    bins.reserve(static_cast<size_t>(assignment.azimuth_bins));
    for (int a = 0; a < assignment.azimuth_bins; ++a) {
      const auto& cols = assignment.columns[static_cast<size_t>(a)];
      if (cols.empty()) {
        bins.push_back(repeat_row(cpbt.no_obs, cfg.radial_bins));
        continue;
      }
      const double phi_hat = (a + 0.5) / assignment.azimuth_bins;
      Var queries = add_row(cpbt.radial, constant(sinusoidal_embed(phi_hat, C)));
      std::vector<Var> parts;
      for (const auto& cr : cols) {
        std::vector<int64_t> idx(static_cast<size_t>(cpbt_cfg.feat_h));
        for (int v = 0; v < cpbt_cfg.feat_h; ++v)
          idx[static_cast<size_t>(v)] = static_cast<int64_t>(v) * cpbt_cfg.feat_w + cr.column;
        parts.push_back(gather_rows(feats[static_cast<size_t>(cr.camera)], idx));
      }
      Var keys = parts.size() == 1 ? parts[0] : concat_rows(parts);
      Tensor avg({1, keys->val.rows()});
      for (auto& v : avg.data) v = 1.0 / static_cast<double>(keys->val.rows());
      Var pooled = matmul(constant(avg), keys);
      Var h1 = layer_norm(add(queries, repeat_row(pooled, cfg.radial_bins)), cpbt.ln_g, cpbt.ln_b);
      bins.push_back(add(h1, mlp_block(h1, cpbt.mlp_W1, cpbt.mlp_b1, cpbt.mlp_W2, cpbt.mlp_b2)));
    }
    return concat_rows(bins);
  }

  const SamplingGrid& sampling_grid(int resolution) const {
    auto it = grid_cache_.find(resolution);
    if (it == grid_cache_.end())
      it = grid_cache_.emplace(resolution, build_sampling_grid(grid_at(resolution), polar_spec)).first;
    return it->second;
  }

  const Tensor& resize_ref(int resolution) const {
    auto it = ref_cache_.find(resolution);
    if (it == ref_cache_.end())
      it = ref_cache_.emplace(resolution, grid_ref_points(resolution, resolution)).first;
    return it->second;
  }

  mutable std::map<int, SamplingGrid> grid_cache_;
  mutable std::map<int, Tensor> ref_cache_;
};

}  // namespace polarbev
