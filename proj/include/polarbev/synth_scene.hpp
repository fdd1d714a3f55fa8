#pragma once

#include <fstream>

#include "polarbev/camera.hpp"
#include "polarbev/det_head.hpp"
#include "polarbev/rng.hpp"

namespace polarbev {

// Per-class box size prior, meters.
struct ClassPrior {
  double w_min = 0.4, w_max = 1.2;
  double l_min = 0.4, l_max = 1.6;
};

struct SceneSpec {
  uint64_t seed = 1;
  int min_objects = 1;
  int max_objects = 4;
  double extent = 8.0;
  int num_classes = 2;
  std::vector<ClassPrior> priors;  // one per class; default prior if empty
  int rejection_budget = 1000;

  void validate() const {
    if (min_objects < 0 || max_objects < min_objects)
      throw std::invalid_argument("SceneSpec: bad object count range");
    if (extent <= 0.0) throw std::invalid_argument("SceneSpec: extent must be positive");
    if (num_classes < 1) throw std::invalid_argument("SceneSpec: need >= 1 class");
    if (!priors.empty() && static_cast<int>(priors.size()) != num_classes)
      throw std::invalid_argument("SceneSpec: priors must match class count");
  }
};

// Deterministic function of (seed, index): counted rejection sampling of
// boxes whose pairwise center distance stays above half the larger of the
// two diagonals. Centers confined to [-0.9L, 0.9L]^2.
inline SceneGT gen_scene(const SceneSpec& spec, int64_t index) {
  spec.validate();
  Rng rng(spec.seed ^ (0x9E3779B97F4A7C15ULL * static_cast<uint64_t>(index + 1)));
  const int n = spec.min_objects +
                static_cast<int>(rng.uniform() * (spec.max_objects - spec.min_objects + 1));
  SceneGT scene;
  int budget = spec.rejection_budget;
  const double lo = -0.9 * spec.extent, hi = 0.9 * spec.extent;
  while (static_cast<int>(scene.boxes.size()) < n) {
    if (budget-- <= 0)
      throw std::runtime_error("gen_scene: rejection budget exhausted");
    GtBox b;
    b.cls = static_cast<int>(rng.uniform() * spec.num_classes);
    if (b.cls >= spec.num_classes) b.cls = spec.num_classes - 1;
    const ClassPrior pr =
        spec.priors.empty() ? ClassPrior{} : spec.priors[static_cast<size_t>(b.cls)];
    b.x = rng.uniform(lo, hi);
    b.y = rng.uniform(lo, hi);
    b.w = rng.uniform(pr.w_min, pr.w_max);
    b.l = rng.uniform(pr.l_min, pr.l_max);
    b.yaw = rng.uniform(-M_PI, M_PI);
    const double diag = std::hypot(b.w, b.l);
    bool ok = true;
    for (const auto& o : scene.boxes) {
      const double min_d = 0.5 * std::max(diag, std::hypot(o.w, o.l));
      if (std::hypot(o.x - b.x, o.y - b.y) < min_d) {
        ok = false;
        break;
      }
    }
    if (ok) scene.boxes.push_back(b);
  }
  return scene;
}

// fixed palette, cycled per class
inline void class_color(int cls, double* rgb) {
  static const double palette[6][3] = {{0.95, 0.25, 0.2},  {0.2, 0.5, 0.95},
                                       {0.25, 0.85, 0.3},  {0.9, 0.8, 0.2},
                                       {0.75, 0.3, 0.85},  {0.2, 0.85, 0.85}};
  const double* p = palette[cls % 6];
  rgb[0] = p[0];
  rgb[1] = p[1];
  rgb[2] = p[2];
}

constexpr double kSceneBackground = 0.5;
constexpr double kBoxHeight = 1.5;  // meters; fixed band so image height encodes range

// Render each box as an upright filled rectangle: the image-plane bounding
// box of its 4 BEV corners projected at heights 0 and kBoxHeight. Flat
// per-class color with 1/depth shading, drawn far to near over a mid-gray
// background. Returns one [H, W, 3] image per camera, values in [0, 1].
inline std::vector<Tensor> render_views(const SceneGT& scene, const CameraRig& rig) {
  rig.validate();
  std::vector<Tensor> images;
  for (const auto& cam : rig.cameras) {
    Tensor img({cam.height, cam.width, 3});
    img.fill(kSceneBackground);

    // painter's order: far to near, by center distance from the camera
    std::vector<size_t> order(scene.boxes.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      const auto& ba = scene.boxes[a];
      const auto& bb = scene.boxes[b];
      const double da = std::hypot(ba.x - cam.t[0], ba.y - cam.t[1]);
      const double db = std::hypot(bb.x - cam.t[0], bb.y - cam.t[1]);
      return da > db;
    });

    for (size_t oi : order) {
      const GtBox& b = scene.boxes[oi];
      const double cy = std::cos(b.yaw), sy = std::sin(b.yaw);
      double umin = 1e300, umax = -1e300, vmin = 1e300, vmax = -1e300;
      int visible = 0;
      for (int cx = -1; cx <= 1; cx += 2)
        for (int cw = -1; cw <= 1; cw += 2) {
          const double px = b.x + 0.5 * (cx * b.l * cy - cw * b.w * sy);
          const double py = b.y + 0.5 * (cx * b.l * sy + cw * b.w * cy);
          for (double z : {0.0, kBoxHeight}) {
            try {
              ImagePoint ip = project_to_image({px, py, z}, cam);
              umin = std::min(umin, ip.u);
              umax = std::max(umax, ip.u);
              vmin = std::min(vmin, ip.v);
              vmax = std::max(vmax, ip.v);
              ++visible;
            } catch (const std::domain_error&) {
            }
          }
        }
      if (visible < 4) continue;  // mostly behind the camera
      const int u0 = std::max(0, static_cast<int>(std::floor(umin)));
      const int u1 = std::min(cam.width - 1, static_cast<int>(std::ceil(umax)));
      const int v0 = std::max(0, static_cast<int>(std::floor(vmin)));
      const int v1 = std::min(cam.height - 1, static_cast<int>(std::ceil(vmax)));
      if (u0 > u1 || v0 > v1) continue;
      const double depth = std::hypot(b.x - cam.t[0], b.y - cam.t[1]);
      const double shade = 1.0 / (1.0 + 0.15 * depth);
      double rgb[3];
      class_color(b.cls, rgb);
      for (int v = v0; v <= v1; ++v)
        for (int u = u0; u <= u1; ++u)
          for (int c = 0; c < 3; ++c)
            img[(static_cast<int64_t>(v) * cam.width + u) * 3 + c] = rgb[c] * shade;
    }
    images.push_back(std::move(img));
  }
  return images;
}

// debug dump of one rendered view as binary PPM
inline void write_ppm(const Tensor& img, const std::string& path) {
  if (img.shape.size() != 3 || img.shape[2] != 3)
    throw std::invalid_argument("write_ppm: image must be [H,W,3]");
  const int64_t h = img.shape[0], w = img.shape[1];
  std::ofstream os(path, std::ios::binary);
  os << "P6\n" << w << " " << h << "\n255\n";
  for (int64_t i = 0; i < h * w * 3; ++i) {
    const double v = std::clamp(img[i], 0.0, 1.0);
    os.put(static_cast<char>(std::lround(v * 255.0)));
  }
}

}  // namespace polarbev
