#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "polarbev/camera.hpp"

namespace polarbev {

struct PolarGridSpec {
  int azimuth_bins = 64;   // A_p
  int radial_bins = 24;    // R_p
  double sigma_min = 0.0;  // meters
  double sigma_max = 72.0;

  void validate() const {
    if (azimuth_bins < 4) throw std::invalid_argument("PolarGridSpec: azimuth_bins < 4");
    if (radial_bins < 2) throw std::invalid_argument("PolarGridSpec: radial_bins < 2");
    if (!(sigma_min >= 0.0 && sigma_min < sigma_max))
      throw std::invalid_argument("PolarGridSpec: need 0 <= sigma_min < sigma_max");
  }
};

// Square BEV grid over [-extent, extent]^2. Row index i runs along the
// ego-forward axis h, column index j along the lateral axis w.
struct CartesianGridSpec {
  int height = 32;  // H bins (h axis)
  int width = 32;   // W bins (w axis)
  double extent = 51.2;

  void validate() const {
    if (height < 2 || width < 2) throw std::invalid_argument("CartesianGridSpec: bins < 2");
    if (extent <= 0.0) throw std::invalid_argument("CartesianGridSpec: extent <= 0");
  }

  double cell_h(int i) const { return (i + 0.5) / height * 2.0 * extent - extent; }
  double cell_w(int j) const { return (j + 0.5) / width * 2.0 * extent - extent; }
  double cell_size_h() const { return 2.0 * extent / height; }
  double cell_size_w() const { return 2.0 * extent / width; }
};

// phi = atan2(w, h) wrapped to [0,2pi), sigma = hypot; phi=0 along +h.
inline std::pair<double, double> cart_to_polar(double w, double h) {
  const double sigma = std::hypot(w, h);
  const double phi = sigma == 0.0 ? 0.0 : wrap_angle(std::atan2(w, h));
  return {phi, sigma};
}

inline std::pair<double, double> polar_to_cart(double phi, double sigma) {
  return {sigma * std::sin(phi), sigma * std::cos(phi)};
}

// min-max normalization; no clamping, out-of-range values flow through
inline std::pair<double, double> normalize_polar(double phi, double sigma,
                                                 const PolarGridSpec& spec) {
  if (spec.sigma_max <= spec.sigma_min)
    throw std::invalid_argument("normalize_polar: degenerate sigma range");
  return {phi / kTwoPi, (sigma - spec.sigma_min) / (spec.sigma_max - spec.sigma_min)};
}

// Normalized polar coordinates of every Cartesian cell center, plus an
// out-of-range mask for cells beyond sigma_max (square corners).
struct SamplingGrid {
  int height = 0, width = 0;
  std::vector<double> phi_hat;    // H*W
  std::vector<double> sigma_hat;  // H*W
  std::vector<uint8_t> in_range;  // H*W
};

inline SamplingGrid build_sampling_grid(const CartesianGridSpec& cart,
                                        const PolarGridSpec& polar) {
  cart.validate();
  polar.validate();
  SamplingGrid g;
  g.height = cart.height;
  g.width = cart.width;
  const int n = cart.height * cart.width;
  g.phi_hat.resize(n);
  g.sigma_hat.resize(n);
  g.in_range.resize(n);
  for (int i = 0; i < cart.height; ++i)
    for (int j = 0; j < cart.width; ++j) {
      const auto [phi, sigma] = cart_to_polar(cart.cell_w(j), cart.cell_h(i));
      const auto [ph, sh] = normalize_polar(phi, sigma, polar);
      const int k = i * cart.width + j;
      g.phi_hat[k] = ph;
      g.sigma_hat[k] = sh;
      g.in_range[k] = (sigma <= polar.sigma_max && sigma >= polar.sigma_min) ? 1 : 0;
    }
  return g;
}

// sigma_max that covers the square: sqrt(2)*extent rounded up to 0.1 m
inline double default_sigma_max(double extent) {
  return std::ceil(std::sqrt(2.0) * extent * 10.0) / 10.0;
}

}  // namespace polarbev
