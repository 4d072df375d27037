// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "core/rng.hpp"
#include "core/tape.hpp"
#include "core/tensor.hpp"

namespace trydit::flow {

// Velocity parameterization the network is trained against.
//   PaperEq2:        target = (x0 - xt) / (1 - t)
//   ConstantVelocity: target = x0 - eps
enum class Param { PaperEq2, ConstantVelocity };

Param param_from_string(const std::string& s);
std::string to_string(Param p);

struct RfConfig {
  Param parameterization = Param::ConstantVelocity;
  double t_max = 0.99;
  std::int64_t sampler_steps = 20;
  void validate() const;
};

// Per-sample training record: xt = (1-t) x0 + t eps, t strictly below 1.
struct RfBatchItem {
  Tensor x0, eps, xt;
  double t = 0.0;
};

RfBatchItem make_batch_item(const Tensor& x0, double t, Rng& rng);

Tensor rf_interpolate(const Tensor& x0, const Tensor& eps, double t);

// eps is part of the batch record; PaperEq2 ignores it, ConstantVelocity
// ignores xt.
Tensor rf_target(const Tensor& x0, const Tensor& xt, const Tensor& eps, double t,
                 const RfConfig& cfg);

// Mean squared error over all elements.
double rf_loss(const Tensor& pred, const Tensor& target);
ad::Var rf_loss_on_tape(ad::Tape& tp, ad::Var pred, ad::Var target);

using VelocityFn = std::function<Tensor(const Tensor& x, double t)>;

// Integrates from t_max down to 0 in cfg.sampler_steps uniform steps.
// PaperEq2 predictions are converted to constant-velocity form
// u = ((1-t)/t) v before stepping; on the final step (t <= dt) the last
// valid u is reused to avoid the division blowing up.
Tensor euler_sample(const VelocityFn& model, const Tensor& x_init, const RfConfig& cfg);

}  // namespace trydit::flow
