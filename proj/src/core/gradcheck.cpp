// SPDX-License-Identifier: Apache-2.0
#include "core/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace trydit::ad {

namespace {

double eval_scalar(const ScalarFn& f, const Tensor& x) {
  Tape tape;
  Var in = tape.leaf(x, false);
  Var out = f(tape, in);
  const Tensor& v = tape.val(out);
  if (v.numel() != 1) throw ContractError("grad_check: function output is not scalar");
  return v.data[0];
}

}  // namespace

Tensor autodiff_gradient(const ScalarFn& f, const Tensor& x) {
  Tape tape;
  Var in = tape.leaf(x, true);
  Var out = f(tape, in);
  if (tape.val(out).numel() != 1) throw ContractError("grad_check: function output is not scalar");
  tape.backward(out);
  return tape.grad_or_zeros(in);
}

Tensor central_difference_gradient(const ScalarFn& f, const Tensor& x, double h) {
  Tensor g = Tensor::zeros(x.shape);
  Tensor probe = x;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double orig = probe.data[i];
    probe.data[i] = orig + h;
    const double fp = eval_scalar(f, probe);
    probe.data[i] = orig - h;
    const double fm = eval_scalar(f, probe);
    probe.data[i] = orig;
    g.data[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

double grad_check(const ScalarFn& f, const Tensor& x, double h) {
  const Tensor ad = autodiff_gradient(f, x);
  const Tensor cd = central_difference_gradient(f, x, h);
  double worst = 0.0;
  for (std::size_t i = 0; i < ad.data.size(); ++i) {
    const double denom = std::max(1.0, std::abs(cd.data[i]));
    worst = std::max(worst, std::abs(ad.data[i] - cd.data[i]) / denom);
  }
  return worst;
}

}  // namespace trydit::ad
