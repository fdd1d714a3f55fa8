#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "golden_util.hpp"
#include "polarbev/gradcheck.hpp"
#include "polarbev/mbie.hpp"

using namespace polarbev;
using Catch::Approx;

namespace {

BevFeatureMap random_map(int H, int W, int C, double extent, Rng& rng) {
  Tensor t({static_cast<int64_t>(H) * W, C});
  for (auto& v : t.data) v = rng.gaussian();
  return {leaf(std::move(t)), {H, W, extent}};
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.same_shape(b));
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// scalar bilinear lookup matching the sampling kernel: half-cell index
// convention, clamp at the edges, zero outside [0,1]^2, no wrap
double bilerp(const Tensor& map, int H, int W, int64_t ch, int64_t C, double c0,
              double c1) {
  if (c0 < 0.0 || c0 > 1.0 || c1 < 0.0 || c1 > 1.0) return 0.0;
  const double a = c0 * H - 0.5, r = c1 * W - 0.5;
  int ia0 = static_cast<int>(std::floor(a)), ir0 = static_cast<int>(std::floor(r));
  const double fa = a - std::floor(a), fr = r - std::floor(r);
  int ia1 = ia0 + 1, ir1 = ir0 + 1;
  ia0 = std::clamp(ia0, 0, H - 1);
  ia1 = std::clamp(ia1, 0, H - 1);
  ir0 = std::clamp(ir0, 0, W - 1);
  ir1 = std::clamp(ir1, 0, W - 1);
  auto at = [&](int i, int j) { return map[(static_cast<int64_t>(i) * W + j) * C + ch]; };
  return (1 - fa) * ((1 - fr) * at(ia0, ir0) + fr * at(ia0, ir1)) +
         fa * ((1 - fr) * at(ia1, ir0) + fr * at(ia1, ir1));
}

}  // namespace

TEST_CASE("pyramid validation") {
  Rng rng(3);
  SECTION("single scale rejected") {
    MbiePyramid p;
    p.maps.push_back(random_map(4, 4, 2, 8.0, rng));
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  }
  SECTION("extent mismatch rejected") {
    MbiePyramid p;
    p.maps.push_back(random_map(4, 4, 2, 8.0, rng));
    p.maps.push_back(random_map(8, 8, 2, 9.0, rng));
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  }
  SECTION("non-increasing resolution rejected") {
    MbiePyramid p;
    p.maps.push_back(random_map(8, 8, 2, 8.0, rng));
    p.maps.push_back(random_map(4, 4, 2, 8.0, rng));
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  }
  SECTION("channel mismatch rejected") {
    MbiePyramid p;
    p.maps.push_back(random_map(4, 4, 2, 8.0, rng));
    p.maps.push_back(random_map(8, 8, 3, 8.0, rng));
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  }
}

TEST_CASE("deformable attention degenerate cases") {
  const int C = 4;
  Rng rng(17);

  SECTION("zero offsets, uniform weights, identity projections: mean of samples") {
    MbieConfig cfg;
    cfg.channels = C;
    cfg.heads = 1;
    cfg.points = 2;
    cfg.scales = {2, 4};
    ParamStore ps;
    auto p = create_mbie_params(ps, cfg, rng);
    auto& lp = p.layers[0];
    lp.val_W->val.fill(0.0);
    lp.out_W->val.fill(0.0);
    for (int i = 0; i < C; ++i) {
      lp.val_W->val[i * C + i] = 1.0;
      lp.out_W->val[i * C + i] = 1.0;
    }
    MbiePyramid pyr;
    pyr.maps.push_back(random_map(2, 2, C, 8.0, rng));
    pyr.maps.push_back(random_map(4, 4, C, 8.0, rng));

    Tensor ref({2, 2});
    ref[0] = 0.3; ref[1] = 0.6;
    ref[2] = 0.75; ref[3] = 0.25;
    Tensor q({2, C});
    for (auto& v : q.data) v = rng.gaussian();
    Var out = ms_deform_attn(constant(q), ref, pyr, lp, cfg.heads, cfg.points);

    for (int64_t n = 0; n < 2; ++n)
      for (int64_t c = 0; c < C; ++c) {
        double mean = 0.0;
        for (size_t s = 0; s < 2; ++s) {
          const auto& m = pyr.maps[s];
          mean += 2.0 * bilerp(m.data->val, m.spec.height, m.spec.width, c, C,
                               ref[n * 2], ref[n * 2 + 1]);
        }
        mean /= 4.0;  // uniform attention over (s, r): 2 scales x 2 points
        CHECK(out->val[n * C + c] == Approx(mean).margin(1e-12));
      }
  }

  SECTION("S=1, R=1, H=1: one sample through the two linear maps") {
    MbieConfig cfg;
    cfg.channels = C;
    cfg.heads = 1;
    cfg.points = 1;
    cfg.scales = {4};
    ParamStore ps;
    auto p = create_mbie_params(ps, cfg, rng);
    auto& lp = p.layers[0];
    init_xavier(lp.out_W->val, rng);  // zero-init would hide the projection
    MbiePyramid pyr;
    pyr.maps.push_back(random_map(4, 4, C, 8.0, rng));

    Tensor ref({1, 2});
    ref[0] = 0.4; ref[1] = 0.55;
    Tensor q({1, C});
    for (auto& v : q.data) v = rng.gaussian();
    Var out = ms_deform_attn(constant(q), ref, pyr, lp, 1, 1);

    Var want = linear(bilinear_sample(linear(pyr.maps[0].data, lp.val_W, lp.val_b),
                                      4, 4, ref, false),
                      lp.out_W, lp.out_b);
    CHECK(max_abs_diff(out->val, want->val) <= 1e-12);
  }

  SECTION("reference outside the unit square is rejected") {
    MbieConfig cfg;
    cfg.channels = C;
    cfg.heads = 1;
    cfg.points = 1;
    cfg.scales = {4};
    ParamStore ps;
    auto p = create_mbie_params(ps, cfg, rng);
    MbiePyramid pyr;
    pyr.maps.push_back(random_map(4, 4, C, 8.0, rng));
    Tensor ref({1, 2});
    ref[0] = 1.2; ref[1] = 0.5;
    Tensor q({1, C});
    CHECK_THROWS_AS(ms_deform_attn(constant(q), ref, pyr, p.layers[0], 1, 1),
                    std::invalid_argument);
  }
}

TEST_CASE("deformable attention equals the nested-loop oracle") {
  const int C = 4, H = 2, R = 2;
  Rng rng(41);
  MbieConfig cfg;
  cfg.channels = C;
  cfg.heads = H;
  cfg.points = R;
  cfg.scales = {2, 4};
  ParamStore ps;
  auto p = create_mbie_params(ps, cfg, rng);
  auto& lp = p.layers[0];
  // exercise real offsets and non-uniform attention
  init_xavier(lp.off_W->val, rng);
  init_xavier(lp.wt_W->val, rng);
  init_xavier(lp.out_W->val, rng);
  for (auto& v : lp.off_b->val.data) v = rng.uniform(-0.5, 0.5);
  for (auto& v : lp.wt_b->val.data) v = rng.uniform(-0.5, 0.5);

  MbiePyramid pyr;
  pyr.maps.push_back(random_map(2, 2, C, 8.0, rng));
  pyr.maps.push_back(random_map(4, 4, C, 8.0, rng));
  const int S = 2, dh = C / H;

  Tensor ref({2, 2});
  ref[0] = 0.35; ref[1] = 0.6;
  ref[2] = 0.2; ref[3] = 0.8;
  Tensor bq({2, C});
  for (auto& v : bq.data) v = rng.gaussian();
  Var out = ms_deform_attn(constant(bq), ref, pyr, lp, H, R);

  auto apply = [](const Tensor& W, const Tensor& b, const double* x) {
    const int64_t K = W.shape[0], M = W.shape[1];
    std::vector<double> y(static_cast<size_t>(M));
    for (int64_t j = 0; j < M; ++j) {
      double acc = b[j];
      for (int64_t k = 0; k < K; ++k) acc += x[k] * W[k * M + j];
      y[static_cast<size_t>(j)] = acc;
    }
    return y;
  };

  for (int64_t n = 0; n < 2; ++n) {
    auto off = apply(lp.off_W->val, lp.off_b->val, &bq[n * C]);
    auto wt = apply(lp.wt_W->val, lp.wt_b->val, &bq[n * C]);
    std::vector<double> joined(C);
    for (int h = 0; h < H; ++h) {
      // per-head softmax over all (s, r)
      std::vector<double> A(static_cast<size_t>(S * R));
      double mx = -1e300;
      for (int i = 0; i < S * R; ++i) mx = std::max(mx, wt[static_cast<size_t>(h * S * R + i)]);
      double sum = 0.0;
      for (int i = 0; i < S * R; ++i)
        sum += (A[static_cast<size_t>(i)] =
                    std::exp(wt[static_cast<size_t>(h * S * R + i)] - mx));
      double asum = 0.0;
      for (auto& a : A) {
        a /= sum;
        CHECK(a >= 0.0);
        asum += a;
      }
      CHECK(asum == Approx(1.0).margin(1e-6));
      for (int s = 0; s < S; ++s) {
        const auto& m = pyr.maps[static_cast<size_t>(s)];
        const int Hs = m.spec.height, Ws = m.spec.width;
        const double lim = static_cast<double>(std::max(Hs, Ws));
        // oracle value projection of the whole scale map
        for (int r = 0; r < R; ++r) {
          const size_t ob = static_cast<size_t>(((h * S + s) * R + r) * 2);
          const double d0 = std::clamp(off[ob], -lim, lim) / Hs;
          const double d1 = std::clamp(off[ob + 1], -lim, lim) / Ws;
          const double c0 = ref[n * 2] + d0, c1 = ref[n * 2 + 1] + d1;
          for (int d = 0; d < dh; ++d) {
            // sample channel (h*dh + d) of W'-projected map
            double sampled = 0.0;
            if (!(c0 < 0.0 || c0 > 1.0 || c1 < 0.0 || c1 > 1.0)) {
              Tensor proj({static_cast<int64_t>(Hs) * Ws, 1});
              for (int64_t cell = 0; cell < proj.rows(); ++cell) {
                double acc = lp.val_b->val[h * dh + d];
                for (int64_t k = 0; k < C; ++k)
                  acc += m.data->val[cell * C + k] * lp.val_W->val[k * C + h * dh + d];
                proj[cell] = acc;
              }
              sampled = bilerp(proj, Hs, Ws, 0, 1, c0, c1);
            }
            joined[static_cast<size_t>(h * dh + d)] +=
                A[static_cast<size_t>(s * R + r)] * sampled;
          }
        }
      }
    }
    auto want = apply(lp.out_W->val, lp.out_b->val, joined.data());
    for (int64_t c = 0; c < C; ++c)
      CHECK(out->val[n * C + c] == Approx(want[static_cast<size_t>(c)]).margin(1e-12));
  }
}

TEST_CASE("zero-initialized encoder is an exact identity") {
  const int C = 4;
  Rng rng(55);
  MbieConfig cfg;
  cfg.channels = C;
  cfg.heads = 2;
  cfg.points = 2;
  cfg.scales = {4, 8};
  ParamStore ps;
  auto p = create_mbie_params(ps, cfg, rng);
  MbiePyramid pyr;
  pyr.maps.push_back(random_map(4, 4, C, 8.0, rng));
  pyr.maps.push_back(random_map(8, 8, C, 8.0, rng));
  MbiePyramid out = mbie_forward(pyr, p);
  REQUIRE(out.maps.size() == 2);
  for (size_t s = 0; s < 2; ++s)
    for (int64_t i = 0; i < pyr.maps[s].data->val.numel(); ++i)
      REQUIRE(out.maps[s].data->val[i] == pyr.maps[s].data->val[i]);
}

TEST_CASE("one-layer gradient check") {
  const int C = 4;
  Rng rng(77);
  MbieConfig cfg;
  cfg.channels = C;
  cfg.heads = 2;
  cfg.points = 1;
  cfg.scales = {2, 4};
  ParamStore ps;
  auto p = create_mbie_params(ps, cfg, rng);
  auto& lp = p.layers[0];
  init_xavier(lp.out_W->val, rng);
  init_xavier(lp.mlp_W2->val, rng);
  // nudge sample points off the cell lattice so the bilinear kernel is
  // locally smooth around every probe
  for (auto& v : lp.off_b->val.data) v = rng.uniform(0.05, 0.2);
  for (auto& v : lp.wt_b->val.data) v = rng.uniform(-0.3, 0.3);

  MbiePyramid pyr;
  pyr.maps.push_back(random_map(2, 2, C, 8.0, rng));
  pyr.maps.push_back(random_map(4, 4, C, 8.0, rng));

  auto loss = [&] {
    MbiePyramid out = mbie_forward(pyr, p);
    Var acc = sum_all(out.maps[0].data);
    return add(acc, sum_all(out.maps[1].data));
  };
  std::vector<Var> params = {pyr.maps[0].data, pyr.maps[1].data};
  for (const auto& v : ps.all())
    if (v->val.numel() > 0) params.push_back(v);
  auto rep = grad_check(loss, params);
  INFO("max_abs=" << rep.max_abs_err << " max_sig_rel=" << rep.max_sig_rel_err
                  << " worst=" << rep.worst_index);
  CHECK(rep.passes());
}

TEST_CASE("golden regression fixture for the encoder") {
  const int C = 4;
  Rng rng(2024);
  MbieConfig cfg;
  cfg.channels = C;
  cfg.heads = 2;
  cfg.points = 2;
  cfg.scales = {8, 16};
  ParamStore ps;
  auto p = create_mbie_params(ps, cfg, rng);
  auto& lp = p.layers[0];
  init_xavier(lp.off_W->val, rng);
  init_xavier(lp.wt_W->val, rng);
  init_xavier(lp.out_W->val, rng);
  init_xavier(lp.mlp_W2->val, rng);
  MbiePyramid pyr;
  pyr.maps.push_back(random_map(8, 8, C, 8.0, rng));
  pyr.maps.push_back(random_map(16, 16, C, 8.0, rng));
  MbiePyramid out = mbie_forward(pyr, p);
  Tensor flat({out.maps[0].data->val.numel() + out.maps[1].data->val.numel()});
  std::copy(out.maps[0].data->val.data.begin(), out.maps[0].data->val.data.end(),
            flat.data.begin());
  std::copy(out.maps[1].data->val.data.begin(), out.maps[1].data->val.data.end(),
            flat.data.begin() + out.maps[0].data->val.numel());
  std::vector<double> want;
  if (!load_golden("mbie_tiny.txt", want)) {
    store_golden("mbie_tiny.txt", flat);
    WARN("recorded golden fixture mbie_tiny.txt; rerun to compare");
  } else {
    REQUIRE(static_cast<int64_t>(want.size()) == flat.numel());
    for (int64_t i = 0; i < flat.numel(); ++i)
      REQUIRE(flat[i] == Approx(want[static_cast<size_t>(i)]).margin(1e-12));
  }
}

TEST_CASE("fusion to a target resolution") {
  const int C = 3;
  Rng rng(91);

  SECTION("single scale, zero offsets: plain bilinear resize") {
    MbieConfig cfg;
    cfg.channels = C;
    cfg.scales = {4};
    cfg.heads = 1;
    cfg.points = 1;
    ParamStore ps;
    auto p = create_mbie_params(ps, cfg, rng);
    MbiePyramid pyr;
    pyr.maps.push_back(random_map(4, 4, C, 8.0, rng));
    CartesianGridSpec target{7, 5, 8.0};
    BevFeatureMap out = fuse_to_target(pyr, target, p);
    REQUIRE(out.spec.height == 7);
    REQUIRE(out.spec.width == 5);
    Var want = bilinear_sample(pyr.maps[0].data, 4, 4, grid_ref_points(7, 5), false);
    CHECK(max_abs_diff(out.data->val, want->val) <= 1e-12);
  }

  SECTION("constant pyramid stays constant at any target resolution") {
    MbieConfig cfg;
    cfg.channels = C;
    cfg.heads = 1;
    cfg.points = 1;
    cfg.scales = {4, 8};
    ParamStore ps;
    auto p = create_mbie_params(ps, cfg, rng);
    const double v = 1.75;
    MbiePyramid pyr;
    for (int H : {4, 8}) {
      Tensor t({static_cast<int64_t>(H) * H, C});
      t.fill(v);
      pyr.maps.push_back({constant(std::move(t)), {H, H, 8.0}});
    }
    for (int res : {6, 16, 33}) {
      BevFeatureMap out = fuse_to_target(pyr, {res, res, 8.0}, p);
      for (int64_t i = 0; i < out.data->val.numel(); ++i)
        REQUIRE(out.data->val[i] == Approx(v).margin(1e-12));
    }
  }

  SECTION("native resolution, zero offsets: identity resample pre-fusion") {
    MbieConfig cfg;
    cfg.channels = C;
    cfg.heads = 1;
    cfg.points = 1;
    cfg.scales = {4};
    ParamStore ps;
    auto p = create_mbie_params(ps, cfg, rng);  // fuse_W = identity when S=1
    MbiePyramid pyr;
    pyr.maps.push_back(random_map(4, 4, C, 8.0, rng));
    BevFeatureMap out = fuse_to_target(pyr, pyr.maps[0].spec, p);
    CHECK(max_abs_diff(out.data->val, pyr.maps[0].data->val) <= 1e-12);
  }

  SECTION("total over target resolutions in [8, 512]") {
    MbieConfig cfg;
    cfg.channels = C;
    cfg.heads = 1;
    cfg.points = 1;
    cfg.scales = {4, 8};
    ParamStore ps;
    auto p = create_mbie_params(ps, cfg, rng);
    MbiePyramid pyr;
    pyr.maps.push_back(random_map(4, 4, C, 8.0, rng));
    pyr.maps.push_back(random_map(8, 8, C, 8.0, rng));
    for (auto [h, w] : std::vector<std::pair<int, int>>{{8, 8}, {17, 23}, {512, 512}}) {
      BevFeatureMap out = fuse_to_target(pyr, {h, w, 8.0}, p);
      REQUIRE(out.data->val.rows() == static_cast<int64_t>(h) * w);
      out.data->val.check_finite("fused map");
    }
  }

  SECTION("extent mismatch rejected") {
    MbieConfig cfg;
    cfg.channels = C;
    cfg.heads = 1;
    cfg.points = 1;
    cfg.scales = {4};
    ParamStore ps;
    auto p = create_mbie_params(ps, cfg, rng);
    MbiePyramid pyr;
    pyr.maps.push_back(random_map(4, 4, C, 8.0, rng));
    CHECK_THROWS_AS(fuse_to_target(pyr, {8, 8, 9.0}, p), std::invalid_argument);
  }
}
