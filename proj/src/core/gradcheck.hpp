// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>

#include "core/tape.hpp"

namespace trydit::ad {

// Scalar-valued function built from tape ops so it can be both
// differentiated and re-evaluated at perturbed points.
using ScalarFn = std::function<Var(Tape&, Var)>;

// Max over coordinates of |autodiff - central difference| / max(1, |cd|).
// 64-bit only; h is the central-difference step.
double grad_check(const ScalarFn& f, const Tensor& x, double h);

// The two pieces, exposed for tests that want them separately.
Tensor autodiff_gradient(const ScalarFn& f, const Tensor& x);
Tensor central_difference_gradient(const ScalarFn& f, const Tensor& x, double h);

}  // namespace trydit::ad
