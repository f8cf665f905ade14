#pragma once

// Central finite-difference verification of reverse-mode gradients. Runs in
// 64-bit so the comparison is not dominated by float round-off. Uses the
// fourth-order central stencil, so truncation error is O(h^4).

#include "avdit/numerics/autodiff.hpp"

#include <cmath>
#include <sstream>
#include <string>

namespace avdit {

struct GradCheckReport {
  double max_rel_error = 0.0;
  Index worst_index = -1;
  std::string worst_label;
  Index checked = 0;
  bool finite = true;
  bool passed = false;
  std::string diagnostic;
};

/// Relative error with an absolute floor so near-zero gradients compare
/// absolutely: |a - n| / max(|a|, |n|, floor).
inline double grad_rel_error(double analytic, double numeric, double floor = 1e-2) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

namespace detail {
template <typename Eval>
double central_difference(Eval&& eval_at, double& coord, double h) {
  const double orig = coord;
  coord = orig + 2 * h;
  const double f2p = eval_at();
  coord = orig + h;
  const double f1p = eval_at();
  coord = orig - h;
  const double f1m = eval_at();
  coord = orig - 2 * h;
  const double f2m = eval_at();
  coord = orig;
  return (-f2p + 8 * f1p - 8 * f1m + f2m) / (12 * h);
}

inline void finish_report(GradCheckReport& r, double tol) {
  r.passed = r.finite && r.max_rel_error <= tol;
  std::ostringstream os;
  if (!r.finite) {
    os << "non-finite intermediate";
  } else {
    os << "max rel error " << r.max_rel_error << " at " << r.worst_label << "[" << r.worst_index << "] over "
       << r.checked << " coordinates (tol " << tol << ")";
  }
  r.diagnostic = os.str();
}
}  // namespace detail

/// Checks d f / d x for a scalar-valued `f(Graph&, Var x) -> Var` at `x`.
template <typename Fn>
GradCheckReport grad_check(Fn&& f, const MatrixX<double>& x, double h = 1e-3, double tol = 1e-4) {
  GradCheckReport report;
  try {
    Graph<double> g;
    Var<double> xv = g.input(x, true);
    Var<double> y = f(g, xv);
    g.backward(y);
    const MatrixX<double> analytic = g.grad(xv);
    MatrixX<double> probe = x;
    auto eval = [&](const MatrixX<double>& at) {
      Graph<double> gg;
      return gg.value(f(gg, gg.input(at, false)))(0, 0);
    };
    for (Index i = 0; i < x.size(); ++i) {
      const double numeric =
          detail::central_difference([&] { return eval(probe); }, probe.data()[i], h);
      if (!std::isfinite(numeric)) throw NumericError("finite difference is not finite");
      const double err = grad_rel_error(analytic.data()[i], numeric);
      ++report.checked;
      if (err > report.max_rel_error || report.worst_index < 0) {
        report.max_rel_error = err;
        report.worst_index = i;
        report.worst_label = "x";
      }
    }
  } catch (const NumericError&) {
    report.finite = false;
  }
  detail::finish_report(report, tol);
  return report;
}

/// Checks the gradient of `f(Graph&, ParamBinding&) -> Var` with respect to
/// every entry of `store` (all entries, regardless of trainable flags).
template <typename Fn>
GradCheckReport grad_check_params(Fn&& f, ParamStore<double>& store, double h = 1e-3, double tol = 1e-4) {
  GradCheckReport report;
  try {
    Graph<double> g;
    ParamBinding<double> bind(g, store, true);
    Var<double> y = f(g, bind);
    g.backward(y);
    std::vector<MatrixX<double>> analytic;
    for (Index p = 0; p < store.size(); ++p) analytic.push_back(bind.grad(p));
    auto eval = [&]() {
      Graph<double> gg;
      ParamBinding<double> bb(gg, store, false);
      return gg.value(f(gg, bb))(0, 0);
    };
    for (Index p = 0; p < store.size(); ++p) {
      auto& data = store[p].value.data();
      for (Index i = 0; i < data.size(); ++i) {
        const double numeric = detail::central_difference(eval, data[i], h);
        if (!std::isfinite(numeric)) throw NumericError("finite difference is not finite");
        const double err = grad_rel_error(analytic[static_cast<std::size_t>(p)].data()[i], numeric);
        ++report.checked;
        if (err > report.max_rel_error || report.worst_index < 0) {
          report.max_rel_error = err;
          report.worst_index = i;
          report.worst_label = store[p].name;
        }
      }
    }
  } catch (const NumericError&) {
    report.finite = false;
  }
  detail::finish_report(report, tol);
  return report;
}

}  // namespace avdit
