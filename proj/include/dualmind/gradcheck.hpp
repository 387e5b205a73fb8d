#pragma once
// Central-finite-difference gradient verification. The analytic gradient is
// produced by one tape backward; the numeric gradient perturbs each
// coordinate of x in place by +/- step and re-evaluates f under no_grad.
// Relative error per coordinate is |a - n| / (|a| + |n| + 1e-12).
//
// f may ignore its argument and close over a model whose parameter tensor IS
// x (handles share storage), which is how whole-model losses are checked
// parameter by parameter.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>

#include "dualmind/autodiff.hpp"

namespace dm {

struct fd_report {
  double max_rel_err = 0.0;
  std::int64_t worst_index = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  bool all_finite = true;
  std::int64_t coords = 0;
};

template <class F>
fd_report finite_difference_check(F f, tensor<double> x, double step = 1e-5) {
  fd_report rep;
  rep.coords = x.numel();

  const bool had_rg = x.requires_grad();
  x.set_requires_grad(true);
  x.clear_grad();
  std::vector<double> analytic(std::size_t(x.numel()), 0.0);
  {
    tape<double> t;
    tape_scope<double> scope(t);
    tensor<double> loss = f(x);
    check(loss.numel() == 1, "finite_difference_check: f must return a scalar, got " +
                                 shape_str(loss.shape()));
    t.backward_from(loss);
    if (x.has_grad()) analytic = x.grad_view();
    x.clear_grad();
  }

  {
    no_grad ng;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      const double xi = x.value()[std::size_t(i)];
      x.value()[std::size_t(i)] = xi + step;
      const double fp = f(x).item();
      x.value()[std::size_t(i)] = xi - step;
      const double fm = f(x).item();
      x.value()[std::size_t(i)] = xi;
      const double num = (fp - fm) / (2.0 * step);
      const double ana = analytic[std::size_t(i)];
      if (!std::isfinite(num) || !std::isfinite(ana)) {
        rep.all_finite = false;
        rep.max_rel_err = std::numeric_limits<double>::infinity();
        rep.worst_index = i;
        rep.analytic_at_worst = ana;
        rep.numeric_at_worst = num;
        break;
      }
      const double rel = std::abs(ana - num) / (std::abs(ana) + std::abs(num) + 1e-12);
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_index = i;
        rep.analytic_at_worst = ana;
        rep.numeric_at_worst = num;
      }
    }
  }
  x.set_requires_grad(had_rg);
  return rep;
}

}  // namespace dm
