#pragma once

#include <algorithm>

#include "polarbev/autodiff.hpp"
#include "polarbev/polar_grid.hpp"

namespace polarbev {

struct GtBox {
  double x, y;   // BEV center, meters (x along h/forward, y along w/left)
  double w, l;   // width (along y at yaw 0), length (along x at yaw 0), meters
  double yaw;    // radians in (-pi, pi]
  int cls;
};

struct SceneGT {
  std::vector<GtBox> boxes;
};

struct Detection {
  double x, y, w, l, yaw;
  int cls;
  double score;
};

// CenterNet gaussian radius for the given footprint (cells) at IoU overlap 0.7
inline double gaussian_radius(double height, double width, double min_overlap = 0.7) {
  const double a1 = 1.0, b1 = height + width;
  const double c1 = width * height * (1 - min_overlap) / (1 + min_overlap);
  const double r1 = (b1 - std::sqrt(b1 * b1 - 4 * a1 * c1)) / 2;
  const double a2 = 4.0, b2 = 2 * (height + width);
  const double c2 = (1 - min_overlap) * width * height;
  const double r2 = (b2 - std::sqrt(b2 * b2 - 4 * a2 * c2)) / 2;
  const double a3 = 4 * min_overlap, b3 = -2 * min_overlap * (height + width);
  const double c3 = (min_overlap - 1) * width * height;
  const double r3 = (b3 + std::sqrt(b3 * b3 - 4 * a3 * c3)) / (2 * a3);
  return std::min({r1, r2, r3});
}

// Per-class Gaussian heatmap targets [H*W, K]; overlaps combine by max.
inline Tensor heatmap_targets(const SceneGT& gt, const CartesianGridSpec& grid,
                              int num_classes) {
  Tensor t({static_cast<int64_t>(grid.height) * grid.width, num_classes});
  for (const auto& b : gt.boxes) {
    const int ci = static_cast<int>(std::floor((b.x + grid.extent) / grid.cell_size_h()));
    const int cj = static_cast<int>(std::floor((b.y + grid.extent) / grid.cell_size_w()));
    if (ci < 0 || ci >= grid.height || cj < 0 || cj >= grid.width) continue;
    const double r = std::max(
        1.0, gaussian_radius(b.l / grid.cell_size_h(), b.w / grid.cell_size_w()));
    const double sigma = r / 3.0;
    const int ir = static_cast<int>(std::ceil(r));
    for (int di = -ir; di <= ir; ++di)
      for (int dj = -ir; dj <= ir; ++dj) {
        const int i = ci + di, j = cj + dj;
        if (i < 0 || i >= grid.height || j < 0 || j >= grid.width) continue;
        const double v = std::exp(-(di * di + dj * dj) / (2 * sigma * sigma));
        double& cell = t[(static_cast<int64_t>(i) * grid.width + j) * num_classes + b.cls];
        cell = std::max(cell, v);
      }
  }
  return t;
}

// Regression targets (dx, dy, log w, log l, sin yaw, cos yaw) and the flat
// peak-cell indices they live at. dx/dy are sub-cell offsets in [0,1).
struct RegTargets {
  Tensor values;                    // [H*W, 6], zero off-peak
  std::vector<int64_t> peak_cells;  // flat indices, sorted ascending
};

inline RegTargets regression_targets(const SceneGT& gt, const CartesianGridSpec& grid) {
  RegTargets out;
  out.values = Tensor({static_cast<int64_t>(grid.height) * grid.width, 6});
  for (const auto& b : gt.boxes) {
    const double fi = (b.x + grid.extent) / grid.cell_size_h();
    const double fj = (b.y + grid.extent) / grid.cell_size_w();
    const int ci = static_cast<int>(std::floor(fi));
    const int cj = static_cast<int>(std::floor(fj));
    if (ci < 0 || ci >= grid.height || cj < 0 || cj >= grid.width) continue;
    const int64_t cell = static_cast<int64_t>(ci) * grid.width + cj;
    double* v = &out.values[cell * 6];
    v[0] = fi - ci;
    v[1] = fj - cj;
    v[2] = std::log(b.w);
    v[3] = std::log(b.l);
    v[4] = std::sin(b.yaw);
    v[5] = std::cos(b.yaw);
    out.peak_cells.push_back(cell);
  }
  std::sort(out.peak_cells.begin(), out.peak_cells.end());
  out.peak_cells.erase(std::unique(out.peak_cells.begin(), out.peak_cells.end()),
                       out.peak_cells.end());
  return out;
}

// Penalty-reduced focal loss (alpha=2, beta=4) on heatmap logits against
// Gaussian targets. pred = sigmoid(logit) clamped to [1e-6, 1-1e-6].
constexpr double kFocalClamp = 1e-6;

inline Var focal_loss(const Var& logits, const Tensor& target) {
  if (!logits->val.same_shape(target))
    throw std::invalid_argument("focal_loss: shape mismatch");
  const int64_t n = logits->val.numel();
  int64_t n_pos = 0;
  for (int64_t i = 0; i < n; ++i)
    if (target[i] == 1.0) ++n_pos;
  const double inv_pos = 1.0 / static_cast<double>(std::max<int64_t>(1, n_pos));
  auto probs = std::make_shared<Tensor>(logits->val.shape);
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double p =
        std::clamp(1.0 / (1.0 + std::exp(-logits->val[i])), kFocalClamp, 1.0 - kFocalClamp);
    (*probs)[i] = p;
    const double t = target[i];
    if (t == 1.0)
      acc += (1 - p) * (1 - p) * std::log(p);
    else
      acc += std::pow(1 - t, 4.0) * p * p * std::log(1 - p);
  }
  Tensor out({1});
  out[0] = -acc * inv_pos;
  auto tgt = std::make_shared<Tensor>(target);
  return make_op(std::move(out), {logits}, [n, inv_pos, probs, tgt](Node& nd) {
    if (!nd.parents[0]->requires_grad) return;
    double* g = nd.parents[0]->g().data.data();
    const double gy = nd.grad[0];
    for (int64_t i = 0; i < n; ++i) {
      const double p = (*probs)[i];
      if (p <= kFocalClamp || p >= 1.0 - kFocalClamp) continue;  // clamped: no gradient
      const double t = (*tgt)[i];
      double dterm_dp;
      if (t == 1.0)
        dterm_dp = -2 * (1 - p) * std::log(p) + (1 - p) * (1 - p) / p;
      else
        dterm_dp = std::pow(1 - t, 4.0) * (2 * p * std::log(1 - p) - p * p / (1 - p));
      // d(loss)/dp = -inv_pos * dterm_dp; dp/dlogit = p(1-p)
      g[i] += gy * (-inv_pos) * dterm_dp * p * (1 - p);
    }
  });
}

// Mean absolute error over the 6 regression channels at peak cells only;
// defined as 0 for an empty scene.
inline Var regression_loss(const Var& pred, const RegTargets& targets) {
  if (pred->val.cols() != 6) throw std::invalid_argument("regression_loss: pred not [N,6]");
  const auto peaks = std::make_shared<std::vector<int64_t>>(targets.peak_cells);
  const auto tgt = std::make_shared<Tensor>(targets.values);
  const int64_t np = static_cast<int64_t>(peaks->size());
  Tensor out({1});
  if (np > 0) {
    double acc = 0.0;
    for (int64_t cell : *peaks)
      for (int c = 0; c < 6; ++c)
        acc += std::abs(pred->val[cell * 6 + c] - (*tgt)[cell * 6 + c]);
    out[0] = acc / (6.0 * static_cast<double>(np));
  }
  return make_op(std::move(out), {pred}, [peaks, tgt, np](Node& nd) {
    if (np == 0 || !nd.parents[0]->requires_grad) return;
    double* g = nd.parents[0]->g().data.data();
    const double s = nd.grad[0] / (6.0 * static_cast<double>(np));
    const Tensor& pv = nd.parents[0]->val;
    for (int64_t cell : *peaks)
      for (int c = 0; c < 6; ++c) {
        const double d = pv[cell * 6 + c] - (*tgt)[cell * 6 + c];
        if (d > 0)
          g[cell * 6 + c] += s;
        else if (d < 0)
          g[cell * 6 + c] -= s;
      }
  });
}

// 3x3 local-max suppression, then top-max_dets peaks above score_thresh.
// heatmap: sigmoid probabilities [H*W, K]; reg: [H*W, 6].
inline std::vector<Detection> decode(const Tensor& heatmap, const Tensor& reg,
                                     const CartesianGridSpec& grid,
                                     double score_thresh = 0.3, int max_dets = 64) {
  const int H = grid.height, W = grid.width;
  const int64_t K = heatmap.cols();
  struct Peak {
    double score;
    int64_t cell;
    int cls;
  };
  std::vector<Peak> peaks;
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      const int64_t cell = static_cast<int64_t>(i) * W + j;
      for (int64_t k = 0; k < K; ++k) {
        const double p = heatmap[cell * K + k];
        if (p < score_thresh) continue;
        bool is_max = true;
        for (int di = -1; di <= 1 && is_max; ++di)
          for (int dj = -1; dj <= 1 && is_max; ++dj) {
            if (di == 0 && dj == 0) continue;
            const int ni = i + di, nj = j + dj;
            if (ni < 0 || ni >= H || nj < 0 || nj >= W) continue;
            const int64_t ncell = static_cast<int64_t>(ni) * W + nj;
            const double q = heatmap[ncell * K + k];
            // ties survive only at the lower flat index
            if (q > p || (q == p && ncell < cell)) is_max = false;
          }
        if (is_max) peaks.push_back({p, cell, static_cast<int>(k)});
      }
    }
  std::sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.cell != b.cell) return a.cell < b.cell;
    return a.cls < b.cls;
  });
  if (static_cast<int>(peaks.size()) > max_dets) peaks.resize(static_cast<size_t>(max_dets));
  std::vector<Detection> dets;
  dets.reserve(peaks.size());
  for (const auto& pk : peaks) {
    const int i = static_cast<int>(pk.cell / W), j = static_cast<int>(pk.cell % W);
    const double* r = &reg.data[static_cast<size_t>(pk.cell * 6)];
    Detection d;
    d.x = (i + r[0]) * grid.cell_size_h() - grid.extent;
    d.y = (j + r[1]) * grid.cell_size_w() - grid.extent;
    d.w = std::exp(r[2]);
    d.l = std::exp(r[3]);
    d.yaw = std::atan2(r[4], r[5]);
    d.cls = pk.cls;
    d.score = pk.score;
    dets.push_back(d);
  }
  return dets;
}

}  // namespace polarbev
