#pragma once

#include <array>
#include <optional>
#include <sstream>

#include "polarbev/det_head.hpp"

namespace polarbev {

struct MatchResult {
  std::vector<std::pair<size_t, size_t>> matches;  // (det index, gt index)
  std::vector<size_t> false_positives;             // det indices
  std::vector<size_t> false_negatives;             // gt indices
};

// Greedy one-to-one matching: detections in descending-score order each
// take the nearest unmatched same-class ground truth within d_thresh
// (BEV center distance).
inline MatchResult match_detections(const std::vector<Detection>& dets,
                                    const std::vector<GtBox>& gts, double d_thresh) {
  for (size_t i = 1; i < dets.size(); ++i)
    if (dets[i].score > dets[i - 1].score)
      throw std::invalid_argument("match_detections: detections must be score-sorted");
  MatchResult out;
  std::vector<bool> taken(gts.size(), false);
  for (size_t di = 0; di < dets.size(); ++di) {
    double best = d_thresh;
    int64_t best_gt = -1;
    for (size_t gi = 0; gi < gts.size(); ++gi) {
      if (taken[gi] || gts[gi].cls != dets[di].cls) continue;
      const double d = std::hypot(dets[di].x - gts[gi].x, dets[di].y - gts[gi].y);
      if (d <= best) {
        best = d;
        best_gt = static_cast<int64_t>(gi);
      }
    }
    if (best_gt >= 0) {
      taken[static_cast<size_t>(best_gt)] = true;
      out.matches.push_back({di, static_cast<size_t>(best_gt)});
    } else {
      out.false_positives.push_back(di);
    }
  }
  for (size_t gi = 0; gi < gts.size(); ++gi)
    if (!taken[gi]) out.false_negatives.push_back(gi);
  return out;
}

struct ApResult {
  std::vector<double> per_class_ap;  // NaN for classes with no ground truth
  std::vector<int> skipped_classes;  // zero-GT classes, excluded from the mean
  double mAP = 0.0;
};

// 101-point interpolated average precision per class, averaged over the
// distance thresholds, then over classes that have ground truth.
inline ApResult average_precision(const std::vector<std::vector<Detection>>& dets,
                                  const std::vector<SceneGT>& gts, int num_classes,
                                  const std::vector<double>& thresholds) {
  if (thresholds.empty())
    throw std::invalid_argument("average_precision: thresholds empty");
  if (dets.size() != gts.size())
    throw std::invalid_argument("average_precision: scene count mismatch");
  ApResult out;
  out.per_class_ap.assign(static_cast<size_t>(num_classes),
                          std::numeric_limits<double>::quiet_NaN());
  double ap_sum = 0.0;
  int evaluated = 0;
  for (int cls = 0; cls < num_classes; ++cls) {
    int64_t n_gt = 0;
    for (const auto& s : gts)
      for (const auto& b : s.boxes) n_gt += b.cls == cls ? 1 : 0;
    if (n_gt == 0) {
      out.skipped_classes.push_back(cls);
      continue;
    }
    // all detections of the class, sorted by score desc with a stable
    // (scene, position) tie-break so evaluation is permutation-invariant
    struct D {
      double score;
      size_t scene, pos;
      double x, y;
    };
    std::vector<D> all;
    for (size_t si = 0; si < dets.size(); ++si)
      for (size_t pi = 0; pi < dets[si].size(); ++pi)
        if (dets[si][pi].cls == cls)
          all.push_back({dets[si][pi].score, si, pi, dets[si][pi].x, dets[si][pi].y});
    std::sort(all.begin(), all.end(), [](const D& a, const D& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.scene != b.scene) return a.scene < b.scene;
      return a.pos < b.pos;
    });

    double class_ap = 0.0;
    for (double th : thresholds) {
      // greedy nearest-unmatched per scene, in global score order
      std::vector<std::vector<bool>> taken(gts.size());
      for (size_t si = 0; si < gts.size(); ++si)
        taken[si].assign(gts[si].boxes.size(), false);
      std::vector<bool> is_tp(all.size(), false);
      for (size_t k = 0; k < all.size(); ++k) {
        const auto& d = all[k];
        double best = th;
        int64_t best_gt = -1;
        const auto& boxes = gts[d.scene].boxes;
        for (size_t gi = 0; gi < boxes.size(); ++gi) {
          if (taken[d.scene][gi] || boxes[gi].cls != cls) continue;
          const double dist = std::hypot(d.x - boxes[gi].x, d.y - boxes[gi].y);
          if (dist <= best) {
            best = dist;
            best_gt = static_cast<int64_t>(gi);
          }
        }
        if (best_gt >= 0) {
          taken[d.scene][static_cast<size_t>(best_gt)] = true;
          is_tp[k] = true;
        }
      }
      // precision at each recall point, 101-point interpolation
      std::vector<double> prec, rec;
      int64_t tp = 0;
      for (size_t k = 0; k < all.size(); ++k) {
        tp += is_tp[k] ? 1 : 0;
        prec.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
        rec.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
      }
      double ap = 0.0;
      for (int r = 0; r <= 100; ++r) {
        const double want = r / 100.0;
        double pmax = 0.0;
        for (size_t k = 0; k < all.size(); ++k)
          if (rec[k] >= want) pmax = std::max(pmax, prec[k]);
        ap += pmax;
      }
      class_ap += ap / 101.0;
    }
    class_ap /= static_cast<double>(thresholds.size());
    out.per_class_ap[static_cast<size_t>(cls)] = class_ap;
    ap_sum += class_ap;
    ++evaluated;
  }
  out.mAP = evaluated > 0 ? ap_sum / evaluated : 0.0;
  return out;
}

struct TpErrors {
  double mATE = 1.0;
  double mASE = 1.0;
  double mAOE = 1.0;
};

// IoU of two boxes after aligning centers and yaw: overlap of two
// concentric axis-aligned rectangles
inline double aligned_iou(double w1, double l1, double w2, double l2) {
  const double inter = std::min(w1, w2) * std::min(l1, l2);
  return inter / (w1 * l1 + w2 * l2 - inter);
}

// Mean TP errors over matched (detection, ground truth) pairs. An empty
// match set reports the worst value 1.0 for every error.
inline TpErrors tp_errors(const std::vector<std::pair<Detection, GtBox>>& matches) {
  if (matches.empty()) return {};
  TpErrors e;
  e.mATE = e.mASE = e.mAOE = 0.0;
  for (const auto& [d, g] : matches) {
    e.mATE += std::hypot(d.x - g.x, d.y - g.y);
    e.mASE += 1.0 - aligned_iou(d.w, d.l, g.w, g.l);
    double dyaw = std::abs(d.yaw - g.yaw);
    dyaw = std::fmod(dyaw, kTwoPi);
    if (dyaw > M_PI) dyaw = kTwoPi - dyaw;
    e.mAOE += dyaw;
  }
  const double n = static_cast<double>(matches.size());
  e.mATE /= n;
  e.mASE /= n;
  e.mAOE /= n;
  return e;
}

// full 5-error composite, for verification against published tables
inline double nds5(double mAP, const std::array<double, 5>& errors) {
  double acc = 5.0 * mAP;
  for (double e : errors) acc += 1.0 - std::min(1.0, e);
  return acc / 10.0;
}

// 3-error variant over the errors this pipeline measures (no velocity or
// attribute heads), normalized to [0,1]
inline double nds3(double mAP, double mate, double mase, double maoe) {
  double acc = 5.0 * mAP;
  for (double e : {mate, mase, maoe}) acc += 1.0 - std::min(1.0, e);
  return acc / 8.0;
}

struct MetricsReport {
  int resolution = 0;  // BEV grid side
  double mAP = 0.0;
  double mATE = 1.0;
  double mASE = 1.0;
  double mAOE = 1.0;
  double nds3 = 0.0;
  std::optional<double> nds5;  // only in paper-verification mode
  std::vector<double> per_class_ap;
  std::vector<int> skipped_classes;
  std::vector<double> thresholds;
};

// Corpus evaluation: distance thresholds {0.5, 1, 2, 4} m scaled by
// extent/51.2; TP errors taken at the scaled 2 m threshold, per class,
// averaged over classes that have ground truth.
inline MetricsReport evaluate_detections(const std::vector<std::vector<Detection>>& dets,
                                         const std::vector<SceneGT>& gts,
                                         int num_classes, double extent,
                                         int resolution) {
  MetricsReport rep;
  rep.resolution = resolution;
  const double s = extent / 51.2;
  rep.thresholds = {0.5 * s, 1.0 * s, 2.0 * s, 4.0 * s};
  ApResult ap = average_precision(dets, gts, num_classes, rep.thresholds);
  rep.mAP = ap.mAP;
  rep.per_class_ap = ap.per_class_ap;
  rep.skipped_classes = ap.skipped_classes;

  const double tp_thresh = 2.0 * s;
  double ate = 0.0, ase = 0.0, aoe = 0.0;
  int evaluated = 0;
  for (int cls = 0; cls < num_classes; ++cls) {
    bool has_gt = false;
    std::vector<std::pair<Detection, GtBox>> matches;
    for (size_t si = 0; si < gts.size(); ++si) {
      std::vector<Detection> cd;
      std::vector<GtBox> cg;
      for (const auto& d : dets[si])
        if (d.cls == cls) cd.push_back(d);
      for (const auto& g : gts[si].boxes)
        if (g.cls == cls) cg.push_back(g);
      if (!cg.empty()) has_gt = true;
      MatchResult m = match_detections(cd, cg, tp_thresh);
      for (const auto& [di, gi] : m.matches) matches.push_back({cd[di], cg[gi]});
    }
    if (!has_gt) continue;
    TpErrors e = tp_errors(matches);
    ate += e.mATE;
    ase += e.mASE;
    aoe += e.mAOE;
    ++evaluated;
  }
  if (evaluated > 0) {
    rep.mATE = ate / evaluated;
    rep.mASE = ase / evaluated;
    rep.mAOE = aoe / evaluated;
  }
  rep.nds3 = nds3(rep.mAP, rep.mATE, rep.mASE, rep.mAOE);
  return rep;
}

// fixed-precision number formatting so reports are byte-stable
inline std::string fmt_metric(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

inline std::string metrics_csv_header() {
  return "resolution,mAP,mATE,mASE,mAOE,NDS3,NDS5";
}

inline std::string metrics_csv_row(const MetricsReport& r) {
  std::ostringstream os;
  os << r.resolution << ',' << fmt_metric(r.mAP) << ',' << fmt_metric(r.mATE) << ','
     << fmt_metric(r.mASE) << ',' << fmt_metric(r.mAOE) << ',' << fmt_metric(r.nds3)
     << ',';
  if (r.nds5) os << fmt_metric(*r.nds5);
  return os.str();
}

}  // namespace polarbev
