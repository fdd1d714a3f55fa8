#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "polarbev/metrics.hpp"

using namespace polarbev;
using Catch::Approx;

namespace {

Detection det(double x, double y, int cls, double score, double w = 1.0,
              double l = 2.0, double yaw = 0.0) {
  return {x, y, w, l, yaw, cls, score};
}

GtBox box(double x, double y, int cls, double w = 1.0, double l = 2.0,
          double yaw = 0.0) {
  return {x, y, w, l, yaw, cls};
}

}  // namespace

TEST_CASE("greedy matching") {
  SECTION("perfect detections: all matched") {
    std::vector<GtBox> gts = {box(1, 1, 0), box(-2, 3, 1)};
    std::vector<Detection> dets = {det(1, 1, 0, 0.9), det(-2, 3, 1, 0.8)};
    MatchResult m = match_detections(dets, gts, 1.0);
    CHECK(m.matches.size() == 2);
    CHECK(m.false_positives.empty());
    CHECK(m.false_negatives.empty());
  }

  SECTION("empty detections: everything is a miss") {
    std::vector<GtBox> gts = {box(0, 0, 0), box(1, 1, 1)};
    MatchResult m = match_detections({}, gts, 1.0);
    CHECK(m.matches.empty());
    CHECK(m.false_negatives.size() == 2);
  }

  SECTION("one-to-one: second detection of the same box is a false positive") {
    std::vector<GtBox> gts = {box(0, 0, 0)};
    std::vector<Detection> dets = {det(0.1, 0, 0, 0.9), det(-0.1, 0, 0, 0.7)};
    MatchResult m = match_detections(dets, gts, 1.0);
    REQUIRE(m.matches.size() == 1);
    CHECK(m.matches[0].first == 0);  // higher score wins
    REQUIRE(m.false_positives.size() == 1);
    CHECK(m.false_positives[0] == 1);
  }

  SECTION("class must agree") {
    std::vector<GtBox> gts = {box(0, 0, 1)};
    std::vector<Detection> dets = {det(0, 0, 0, 0.9)};
    MatchResult m = match_detections(dets, gts, 1.0);
    CHECK(m.matches.empty());
    CHECK(m.false_positives.size() == 1);
    CHECK(m.false_negatives.size() == 1);
  }

  SECTION("distance gate") {
    std::vector<GtBox> gts = {box(0, 0, 0)};
    std::vector<Detection> dets = {det(0, 2.1, 0, 0.9)};
    CHECK(match_detections(dets, gts, 2.0).matches.empty());
  }

  SECTION("unsorted detections rejected") {
    std::vector<Detection> dets = {det(0, 0, 0, 0.5), det(1, 1, 0, 0.9)};
    CHECK_THROWS_AS(match_detections(dets, {}, 1.0), std::invalid_argument);
  }
}

TEST_CASE("average precision") {
  const std::vector<double> th = {0.5, 1.0, 2.0, 4.0};

  SECTION("perfect detections: mAP = 1") {
    std::vector<SceneGT> gts = {{{box(1, 1, 0), box(-3, 2, 1)}}, {{box(0, 4, 0)}}};
    std::vector<std::vector<Detection>> dets = {
        {det(1, 1, 0, 0.9), det(-3, 2, 1, 0.8)}, {det(0, 4, 0, 0.95)}};
    ApResult ap = average_precision(dets, gts, 2, th);
    CHECK(ap.mAP == Approx(1.0).margin(1e-12));
  }

  SECTION("no detections: mAP = 0") {
    std::vector<SceneGT> gts = {{{box(1, 1, 0)}}};
    std::vector<std::vector<Detection>> dets = {{}};
    CHECK(average_precision(dets, gts, 1, th).mAP == 0.0);
  }

  SECTION("1 TP above 1 FP: interpolated AP = 1") {
    // recall 1 is reached at the higher-scored TP, so max precision at
    // every recall point is 1
    std::vector<SceneGT> gts = {{{box(0, 0, 0)}}};
    std::vector<std::vector<Detection>> dets = {
        {det(0, 0, 0, 0.9), det(5, 5, 0, 0.8)}};
    CHECK(average_precision(dets, gts, 1, th).mAP == Approx(1.0).margin(1e-12));
  }

  SECTION("1 FP above 1 TP: AP = (1/101) * sum of max precision") {
    // curve: rank 1 FP (p=0, r=0), rank 2 TP (p=0.5, r=1). Max precision
    // is 0.5 at every recall point.
    std::vector<SceneGT> gts = {{{box(0, 0, 0)}}};
    std::vector<std::vector<Detection>> dets = {
        {det(5, 5, 0, 0.9), det(0, 0, 0, 0.8)}};
    CHECK(average_precision(dets, gts, 1, th).mAP == Approx(0.5).margin(1e-12));
  }

  SECTION("zero-GT classes are excluded and reported") {
    std::vector<SceneGT> gts = {{{box(0, 0, 0)}}};
    std::vector<std::vector<Detection>> dets = {{det(0, 0, 0, 0.9)}};
    ApResult ap = average_precision(dets, gts, 3, th);
    CHECK(ap.mAP == Approx(1.0).margin(1e-12));
    REQUIRE(ap.skipped_classes.size() == 2);
    CHECK(std::isnan(ap.per_class_ap[1]));
    CHECK(std::isnan(ap.per_class_ap[2]));
  }

  SECTION("relabeling a TP as FP never raises AP") {
    std::vector<SceneGT> gts = {{{box(0, 0, 0), box(4, 4, 0)}}};
    std::vector<std::vector<Detection>> with_tp = {
        {det(0, 0, 0, 0.9), det(4, 4, 0, 0.8)}};
    std::vector<std::vector<Detection>> with_fp = {
        {det(0, 0, 0, 0.9), det(-8, -8, 0, 0.8)}};
    CHECK(average_precision(with_fp, gts, 1, th).mAP <=
          average_precision(with_tp, gts, 1, th).mAP);
  }

  SECTION("equal-score permutation invariance") {
    std::vector<SceneGT> gts = {{{box(0, 0, 0), box(4, 4, 0)}}};
    std::vector<std::vector<Detection>> a = {
        {det(0, 0, 0, 0.8), det(4, 4, 0, 0.8)}};
    std::vector<std::vector<Detection>> b = {
        {det(4, 4, 0, 0.8), det(0, 0, 0, 0.8)}};
    CHECK(average_precision(a, gts, 1, th).mAP ==
          average_precision(b, gts, 1, th).mAP);
  }

  SECTION("empty thresholds rejected") {
    CHECK_THROWS_AS(average_precision({}, {}, 1, {}), std::invalid_argument);
  }
}

TEST_CASE("true-positive errors") {
  SECTION("identical boxes: zero error") {
    std::vector<std::pair<Detection, GtBox>> m = {{det(1, 2, 0, 0.9), box(1, 2, 0)}};
    TpErrors e = tp_errors(m);
    CHECK(e.mATE == 0.0);
    CHECK(e.mASE == Approx(0.0).margin(1e-12));
    CHECK(e.mAOE == 0.0);
  }

  SECTION("center offset only") {
    std::vector<std::pair<Detection, GtBox>> m = {
        {det(1.5, 2, 0, 0.9), box(1, 2, 0)}};
    TpErrors e = tp_errors(m);
    CHECK(e.mATE == Approx(0.5).margin(1e-12));
    CHECK(e.mASE == Approx(0.0).margin(1e-12));
    CHECK(e.mAOE == 0.0);
  }

  SECTION("aligned 2x4 vs 1x2: ASE = 0.75") {
    std::vector<std::pair<Detection, GtBox>> m = {
        {det(0, 0, 0, 0.9, 2.0, 4.0), box(0, 0, 0, 1.0, 2.0)}};
    CHECK(tp_errors(m).mASE == Approx(0.75).margin(1e-12));
  }

  SECTION("yaw difference wraps into [0, pi]") {
    std::vector<std::pair<Detection, GtBox>> m = {
        {det(0, 0, 0, 0.9, 1, 2, 3.0), box(0, 0, 0, 1, 2, -3.0)}};
    CHECK(tp_errors(m).mAOE == Approx(2.0 * M_PI - 6.0).margin(1e-12));
  }

  SECTION("no matches: worst-case 1.0") {
    TpErrors e = tp_errors({});
    CHECK(e.mATE == 1.0);
    CHECK(e.mASE == 1.0);
    CHECK(e.mAOE == 1.0);
  }
}

TEST_CASE("detection score composite") {
  SECTION("perfect score") {
    CHECK(nds5(1.0, {0, 0, 0, 0, 0}) == Approx(1.0).margin(1e-12));
    CHECK(nds3(1.0, 0, 0, 0) == Approx(1.0).margin(1e-12));
  }

  SECTION("errors above 1 saturate") {
    CHECK(nds5(0.5, {2.0, 2.0, 2.0, 2.0, 2.0}) == Approx(0.25).margin(1e-12));
    CHECK(nds3(0.5, 2.0, 2.0, 2.0) == Approx(5.0 * 0.5 / 8.0).margin(1e-12));
  }

  SECTION("published table regression, all 12 rows to 0.001") {
    struct Row {
      double nds, mAP, mate, mase, maoe, mave, maae;
    };
    const Row rows[] = {
        {0.328, 0.306, 0.716, 0.264, 0.609, 1.426, 0.658},
        {0.368, 0.288, 0.777, 0.266, 0.544, 1.228, 0.170},
        {0.373, 0.302, 0.811, 0.282, 0.493, 0.979, 0.212},
        {0.394, 0.320, 0.735, 0.266, 0.492, 1.114, 0.170},
        {0.380, 0.332, 0.706, 0.281, 0.663, 0.964, 0.249},
        {0.381, 0.313, 0.768, 0.278, 0.564, 0.923, 0.225},
        {0.379, 0.298, 0.725, 0.279, 0.589, 0.860, 0.245},
        {0.381, 0.302, 0.722, 0.269, 0.543, 0.900, 0.269},
        {0.392, 0.312, 0.691, 0.272, 0.523, 0.909, 0.247},
        {0.389, 0.319, 0.676, 0.284, 0.589, 0.924, 0.229},
        {0.370, 0.294, 0.702, 0.283, 0.579, 0.988, 0.222},
        {0.398, 0.321, 0.669, 0.275, 0.494, 0.956, 0.231},
    };
    for (const auto& r : rows) {
      const double got = nds5(r.mAP, {r.mate, r.mase, r.maoe, r.mave, r.maae});
      INFO("row nds=" << r.nds);
      CHECK(got == Approx(r.nds).margin(0.001));
    }
  }
}

TEST_CASE("corpus evaluation and report emission") {
  const double L = 8.0;
  std::vector<SceneGT> gts = {{{box(1, 1, 0), box(-3, 2, 1)}}, {{box(0, 4, 0)}}};
  std::vector<std::vector<Detection>> dets = {
      {det(1.02, 1, 0, 0.9), det(-3, 2.03, 1, 0.8)}, {det(0, 4, 0, 0.95)}};
  MetricsReport rep = evaluate_detections(dets, gts, 2, L, 32);

  SECTION("thresholds scale with extent") {
    REQUIRE(rep.thresholds.size() == 4);
    CHECK(rep.thresholds[0] == Approx(0.5 * L / 51.2).margin(1e-12));
    CHECK(rep.thresholds[3] == Approx(4.0 * L / 51.2).margin(1e-12));
  }

  SECTION("near-perfect detections score high") {
    CHECK(rep.mAP > 0.8);
    CHECK(rep.mATE < 0.05);
    CHECK(rep.mASE == Approx(0.0).margin(1e-12));
    CHECK(rep.nds3 > 0.8);
    CHECK(rep.nds3 <= 1.0);
  }

  SECTION("csv row layout") {
    CHECK(metrics_csv_header() == "resolution,mAP,mATE,mASE,mAOE,NDS3,NDS5");
    std::string row = metrics_csv_row(rep);
    CHECK(row.substr(0, 3) == "32,");
    CHECK(std::count(row.begin(), row.end(), ',') == 6);
    CHECK(row.back() == ',');  // NDS5 absent outside verification mode
    MetricsReport with5 = rep;
    with5.nds5 = 0.5;
    std::string row5 = metrics_csv_row(with5);
    CHECK(row5.substr(row5.rfind(',') + 1) == "0.500000");
  }

  SECTION("deterministic re-evaluation") {
    MetricsReport again = evaluate_detections(dets, gts, 2, L, 32);
    CHECK(metrics_csv_row(again) == metrics_csv_row(rep));
  }
}
