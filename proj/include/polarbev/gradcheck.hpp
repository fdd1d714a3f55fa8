#pragma once

#include <functional>

#include "polarbev/autodiff.hpp"

namespace polarbev {

struct GradCheckReport {
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  int64_t worst_index = 0;  // flat index across the concatenated parameter set
  // rel error over coordinates with max(|analytic|,|numeric|) >= 1e-6.
  // Coordinates below that carry no usable signal for a relative test:
  // central-difference roundoff is ~ulp(|f|)/eps, which the 1e-8 floor in
  // max_rel_err cannot absorb; they are covered by max_abs_err instead.
  double max_sig_rel_err = 0.0;

  bool passes(double rel_tol = 1e-4, double abs_tol = 1e-6) const {
    return max_sig_rel_err <= rel_tol && max_abs_err <= abs_tol;
  }
};

// Central finite differences against the analytic backward pass.
// f must rebuild the scalar loss from the current parameter values.
inline GradCheckReport grad_check(const std::function<Var()>& f,
                                  const std::vector<Var>& params,
                                  double eps = 1e-5) {
  for (auto& p : params) p->zero_grad();
  Var loss = f();
  loss->val.check_finite("grad_check loss");
  backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p->g().data);

  GradCheckReport rep;
  int64_t flat = 0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& t = params[pi]->val;
    for (int64_t i = 0; i < t.numel(); ++i, ++flat) {
      const double saved = t[i];
      t[i] = saved + eps;
      const double fp = f()->val[0];
      t[i] = saved - eps;
      const double fm = f()->val[0];
      t[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw std::runtime_error("grad_check: non-finite probe value");
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[pi][static_cast<size_t>(i)];
      const double abs_err = std::abs(a - numeric);
      const double rel_err =
          abs_err / std::max(std::max(std::abs(a), std::abs(numeric)), 1e-8);
      if (rel_err > rep.max_rel_err) {
        rep.max_rel_err = rel_err;
        rep.worst_index = flat;
      }
      if (std::max(std::abs(a), std::abs(numeric)) >= 1e-6)
        rep.max_sig_rel_err = std::max(rep.max_sig_rel_err, rel_err);
      rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
    }
  }
  return rep;
}

}  // namespace polarbev
