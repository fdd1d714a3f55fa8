#pragma once

#include "polarbev/autodiff.hpp"
#include "polarbev/polar_grid.hpp"

namespace polarbev {

// Differentiable bilinear sampling from a [A, R, C] map (rows = A*R) at
// normalized coordinates. Half-pixel convention: continuous index
// a = c0*A - 0.5, r = c1*R - 0.5. Axis 0 optionally wraps (azimuth
// periodicity); inside [0,1] edge neighbors clamp so the four blend
// weights always sum to 1; any coordinate outside [0,1] on a non-wrapped
// axis zeroes the whole query (zero padding).
//
// coords: [N,2] Var (may require grad, e.g. deformable offsets).
inline Var bilinear_sample(const Var& map, int A, int R, const Var& coords,
                           bool wrap_axis0) {
  const int64_t C = map->val.cols();
  if (map->val.rows() != static_cast<int64_t>(A) * R)
    throw std::invalid_argument("bilinear_sample: map extents disagree with A*R");
  const int64_t N = coords->val.rows();
  if (coords->val.cols() != 2) throw std::invalid_argument("bilinear_sample: coords not [N,2]");
  coords->val.check_finite("bilinear_sample coords");

  struct Q {
    int i00, i01, i10, i11;  // row indices into the map (a*R + r)
    double w00, w01, w10, w11;
    double dfa_scale, dfr_scale;  // d(index)/d(normalized coord) or 0 when padded
    int ia0, ia1, ir0, ir1;
    double fa, fr;
    bool live;
  };
  auto qs = std::make_shared<std::vector<Q>>(static_cast<size_t>(N));

  Tensor out({N, C});
  for (int64_t n = 0; n < N; ++n) {
    const double c0 = coords->val[n * 2];
    const double c1 = coords->val[n * 2 + 1];
    Q& q = (*qs)[static_cast<size_t>(n)];
    q.live = !(c1 < 0.0 || c1 > 1.0) && (wrap_axis0 || (c0 >= 0.0 && c0 <= 1.0));
    if (!q.live) continue;
    double a = c0 * A - 0.5;
    double r = c1 * R - 0.5;
    int ia0, ia1;
    if (wrap_axis0) {
      a -= A * std::floor(a / A);
      ia0 = static_cast<int>(std::floor(a));
      if (ia0 >= A) ia0 = A - 1;  // guard fp edge
      ia1 = (ia0 + 1) % A;
    } else {
      ia0 = static_cast<int>(std::floor(a));
      ia1 = ia0 + 1;
      ia0 = std::min(std::max(ia0, 0), A - 1);
      ia1 = std::min(std::max(ia1, 0), A - 1);
    }
    int ir0 = static_cast<int>(std::floor(r));
    int ir1 = ir0 + 1;
    const double fa = a - std::floor(a);
    const double fr = r - std::floor(r);
    ir0 = std::min(std::max(ir0, 0), R - 1);
    ir1 = std::min(std::max(ir1, 0), R - 1);
    q.ia0 = ia0; q.ia1 = ia1; q.ir0 = ir0; q.ir1 = ir1;
    q.fa = fa; q.fr = fr;
    q.i00 = ia0 * R + ir0;
    q.i01 = ia0 * R + ir1;
    q.i10 = ia1 * R + ir0;
    q.i11 = ia1 * R + ir1;
    q.w00 = (1.0 - fa) * (1.0 - fr);
    q.w01 = (1.0 - fa) * fr;
    q.w10 = fa * (1.0 - fr);
    q.w11 = fa * fr;
    q.dfa_scale = static_cast<double>(A);
    q.dfr_scale = static_cast<double>(R);
    const double* m = map->val.data.data();
    double* o = &out[n * C];
    for (int64_t c = 0; c < C; ++c)
      o[c] = q.w00 * m[q.i00 * C + c] + q.w01 * m[q.i01 * C + c] +
             q.w10 * m[q.i10 * C + c] + q.w11 * m[q.i11 * C + c];
  }
  return make_op(std::move(out), {map, coords}, [qs, N, C](Node& node) {
    const Var& map = node.parents[0];
    const Var& coords = node.parents[1];
    const double* g = node.grad.data.data();
    double* gm = map->requires_grad ? map->g().data.data() : nullptr;
    double* gc = coords->requires_grad ? coords->g().data.data() : nullptr;
    const double* m = map->val.data.data();
    for (int64_t n = 0; n < N; ++n) {
      const Q& q = (*qs)[static_cast<size_t>(n)];
      if (!q.live) continue;
      const double* gr = &g[n * C];
      if (gm) {
        for (int64_t c = 0; c < C; ++c) {
          const double gv = gr[c];
          if (gv == 0.0) continue;
          gm[q.i00 * C + c] += q.w00 * gv;
          gm[q.i01 * C + c] += q.w01 * gv;
          gm[q.i10 * C + c] += q.w10 * gv;
          gm[q.i11 * C + c] += q.w11 * gv;
        }
      }
      if (gc) {
        double dfa = 0.0, dfr = 0.0;
        for (int64_t c = 0; c < C; ++c) {
          const double gv = gr[c];
          if (gv == 0.0) continue;
          const double m00 = m[q.i00 * C + c], m01 = m[q.i01 * C + c];
          const double m10 = m[q.i10 * C + c], m11 = m[q.i11 * C + c];
          dfa += gv * ((1.0 - q.fr) * (m10 - m00) + q.fr * (m11 - m01));
          dfr += gv * ((1.0 - q.fa) * (m01 - m00) + q.fa * (m11 - m10));
        }
        gc[n * 2] += dfa * q.dfa_scale;
        gc[n * 2 + 1] += dfr * q.dfr_scale;
      }
    }
  });
}

inline Var bilinear_sample(const Var& map, int A, int R, const Tensor& coords,
                           bool wrap_axis0) {
  return bilinear_sample(map, A, R, constant(coords), wrap_axis0);
}

struct PolarFeatureMap {
  Var data;  // [A_p * R_p, C]
  PolarGridSpec spec;
};

struct BevFeatureMap {
  Var data;  // [H * W, C]
  CartesianGridSpec spec;
};

// Resample the polar map onto a Cartesian grid: per-cell bilinear read
// with azimuth wrap; cells beyond the radial range come out zero.
inline BevFeatureMap polar_to_cartesian(const PolarFeatureMap& pmap,
                                        const SamplingGrid& grid,
                                        const CartesianGridSpec& cart) {
  if (grid.height != cart.height || grid.width != cart.width)
    throw std::invalid_argument("polar_to_cartesian: grid/spec mismatch");
  const int n = grid.height * grid.width;
  Tensor coords({n, 2});
  for (int k = 0; k < n; ++k) {
    coords[k * 2] = grid.phi_hat[k];
    coords[k * 2 + 1] = grid.sigma_hat[k];
  }
  BevFeatureMap out;
  out.spec = cart;
  out.data = bilinear_sample(pmap.data, pmap.spec.azimuth_bins,
                             pmap.spec.radial_bins, coords, /*wrap=*/true);
  return out;
}

}  // namespace polarbev
