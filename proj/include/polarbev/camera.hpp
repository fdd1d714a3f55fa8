#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace polarbev {

constexpr double kTwoPi = 6.283185307179586476925286766559;

inline double wrap_angle(double a) {
  a = std::fmod(a, kTwoPi);
  if (a < 0.0) a += kTwoPi;
  return a;
}

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<std::array<double, 3>, 3>;

inline Vec3 mat_vec(const Mat3& m, const Vec3& v) {
  return {m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
          m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
          m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2]};
}

inline Vec3 mat_t_vec(const Mat3& m, const Vec3& v) {
  return {m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
          m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
          m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2]};
}

// Pinhole camera. Ego frame: x forward, y left, z up.
// Camera frame: z forward, x right (image u), y down (image v).
struct Camera {
  double fx, fy;      // focal lengths, pixels
  double cx, cy;      // principal point, pixels
  Mat3 R;             // rotation camera -> ego
  Vec3 t;             // camera origin in ego frame, meters
  int width, height;  // image size, pixels

  void validate() const {
    if (fx <= 0.0 || fy <= 0.0) throw std::invalid_argument("Camera: focal must be positive");
    if (cx < 0.0 || cx > width || cy < 0.0 || cy > height)
      throw std::invalid_argument("Camera: principal point outside image");
    // R orthonormal with det +1
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double dot = 0.0;
        for (int k = 0; k < 3; ++k) dot += R[k][i] * R[k][j];
        const double want = i == j ? 1.0 : 0.0;
        if (std::abs(dot - want) > 1e-9)
          throw std::invalid_argument("Camera: R not orthonormal");
      }
    const double det =
        R[0][0] * (R[1][1] * R[2][2] - R[1][2] * R[2][1]) -
        R[0][1] * (R[1][0] * R[2][2] - R[1][2] * R[2][0]) +
        R[0][2] * (R[1][0] * R[2][1] - R[1][1] * R[2][0]);
    if (std::abs(det - 1.0) > 1e-9) throw std::invalid_argument("Camera: det(R) != +1");
  }

  // Yaw-only camera looking along ego heading (radians), level horizon.
  static Camera make_yaw(double heading, double fov_deg, int w, int h,
                         Vec3 origin = {0, 0, 0}) {
    Camera c;
    c.width = w;
    c.height = h;
    const double half = fov_deg * M_PI / 360.0;
    c.fx = (w / 2.0) / std::tan(half);
    c.fy = c.fx;
    c.cx = w / 2.0;
    c.cy = h / 2.0;
    const double ch = std::cos(heading), sh = std::sin(heading);
    // columns of R: camera axes in ego coordinates.
    // forward (cam z) -> (ch, sh, 0); right (cam x) -> (sh, -ch, 0); down (cam y) -> (0,0,-1)
    c.R = {{{sh, 0.0, ch}, {-ch, 0.0, sh}, {0.0, -1.0, 0.0}}};
    c.t = origin;
    c.validate();
    return c;
  }
};

struct ImagePoint {
  double u, v;
  double depth;  // camera-frame forward distance, meters
};

inline ImagePoint project_to_image(const Vec3& p_ego, const Camera& cam) {
  const Vec3 d = {p_ego[0] - cam.t[0], p_ego[1] - cam.t[1], p_ego[2] - cam.t[2]};
  const Vec3 pc = mat_t_vec(cam.R, d);
  if (pc[2] <= 0.0) throw std::domain_error("project_to_image: point behind camera");
  return {cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy, pc[2]};
}

// inverse of project_to_image at a given depth
inline Vec3 backproject(double u, double v, double depth, const Camera& cam) {
  const Vec3 pc = {(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth};
  const Vec3 pe = mat_vec(cam.R, pc);
  return {pe[0] + cam.t[0], pe[1] + cam.t[1], pe[2] + cam.t[2]};
}

// Azimuth of the ray through horizontal pixel position u at the vertical
// image center, measured in the ego BEV plane. Distance-independent: only
// the ray direction enters the atan2.
inline double azimuth_of_pixel(const Camera& cam, double u) {
  const Vec3 dir_cam = {(u - cam.cx) / cam.fx, 0.0, 1.0};
  const Vec3 dir_ego = mat_vec(cam.R, dir_cam);
  return wrap_angle(std::atan2(dir_ego[1], dir_ego[0]));
}

inline double column_azimuth(const Camera& cam, int column) {
  if (column < 0 || column >= cam.width)
    throw std::out_of_range("column_azimuth: column outside image");
  return azimuth_of_pixel(cam, column + 0.5);
}

struct CameraRig {
  std::vector<Camera> cameras;

  void validate() const {
    if (cameras.empty()) throw std::invalid_argument("CameraRig: empty");
    for (const auto& c : cameras) c.validate();
  }
};

struct ColumnRef {
  int camera;
  int column;  // column index in the assignment's column space
};

// Azimuth-bin -> image-column pairing. Column space is configurable via
// stride so the same machinery serves raw pixels and patch-embedded
// feature columns.
struct RayAssignment {
  int azimuth_bins = 0;
  std::vector<std::vector<ColumnRef>> columns;  // per bin
  std::vector<int> coverage;                    // distinct cameras per bin

  int bin_of(double azimuth) const {
    int b = static_cast<int>(std::floor(wrap_angle(azimuth) / kTwoPi * azimuth_bins));
    return std::min(b, azimuth_bins - 1);
  }
};

// Assign every column of every camera to the azimuth bin containing its
// back-projected ray. columns_per_camera columns of width stride pixels;
// azimuth taken at each column's pixel center.
inline RayAssignment assign_columns_to_rays(const CameraRig& rig, int azimuth_bins,
                                            int columns_per_camera, double stride) {
  if (azimuth_bins < 4) throw std::invalid_argument("assign_columns_to_rays: need >= 4 bins");
  rig.validate();
  RayAssignment out;
  out.azimuth_bins = azimuth_bins;
  out.columns.resize(azimuth_bins);
  out.coverage.assign(azimuth_bins, 0);
  for (int ci = 0; ci < static_cast<int>(rig.cameras.size()); ++ci) {
    const Camera& cam = rig.cameras[ci];
    for (int col = 0; col < columns_per_camera; ++col) {
      const double u = (col + 0.5) * stride;
      const double az = azimuth_of_pixel(cam, u);
      out.columns[out.bin_of(az)].push_back({ci, col});
    }
  }
  for (int b = 0; b < azimuth_bins; ++b) {
    std::vector<bool> present(rig.cameras.size(), false);
    for (const auto& cr : out.columns[b]) present[cr.camera] = true;
    int c = 0;
    for (bool p : present) c += p ? 1 : 0;
    out.coverage[b] = c;
  }
  return out;
}

// pixel-column assignment (stride 1, one column per image pixel column)
inline RayAssignment assign_columns_to_rays(const CameraRig& rig, int azimuth_bins) {
  return assign_columns_to_rays(rig, azimuth_bins, rig.cameras.front().width, 1.0);
}

}  // namespace polarbev
