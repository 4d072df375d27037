// SPDX-License-Identifier: Apache-2.0
#include "core/flow.hpp"

#include <cmath>

namespace trydit::flow {

Param param_from_string(const std::string& s) {
  if (s == "paper_eq2") return Param::PaperEq2;
  if (s == "constant_velocity") return Param::ConstantVelocity;
  throw ContractError("unknown rf parameterization: " + s);
}

std::string to_string(Param p) {
  return p == Param::PaperEq2 ? "paper_eq2" : "constant_velocity";
}

void RfConfig::validate() const {
  if (!(t_max > 0.0 && t_max < 1.0)) throw ContractError("rf t_max must be in (0,1)");
  if (sampler_steps < 1) throw ContractError("rf sampler_steps must be >= 1");
}

Tensor rf_interpolate(const Tensor& x0, const Tensor& eps, double t) {
  if (!x0.same_shape(eps)) {
    throw DimensionError("rf_interpolate: shape mismatch " + shape_str(x0.shape) + " vs " +
                         shape_str(eps.shape));
  }
  if (t < 0.0 || t > 1.0) throw ContractError("rf_interpolate: t must be in [0,1]");
  Tensor xt = Tensor::zeros(x0.shape);
  for (std::size_t i = 0; i < xt.data.size(); ++i) {
    xt.data[i] = (1.0 - t) * x0.data[i] + t * eps.data[i];
  }
  return xt;
}

RfBatchItem make_batch_item(const Tensor& x0, double t, Rng& rng) {
  if (!(t >= 0.0 && t < 1.0)) throw ContractError("batch item t must be in [0,1)");
  RfBatchItem item;
  item.x0 = x0;
  item.eps = Tensor::zeros(x0.shape);
  for (double& v : item.eps.data) v = rng.normal();
  item.t = t;
  item.xt = rf_interpolate(x0, item.eps, t);
  return item;
}

Tensor rf_target(const Tensor& x0, const Tensor& xt, const Tensor& eps, double t,
                 const RfConfig& cfg) {
  if (!(t < 1.0)) throw ContractError("rf_target: t must be < 1");
  Tensor out = Tensor::zeros(x0.shape);
  if (cfg.parameterization == Param::PaperEq2) {
    if (t >= cfg.t_max) {
      throw ContractError("rf_target: t >= t_max under paper_eq2 (divergence guard)");
    }
    if (!x0.same_shape(xt)) throw DimensionError("rf_target: x0/xt shape mismatch");
    const double inv = 1.0 / (1.0 - t);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = (x0.data[i] - xt.data[i]) * inv;
  } else {
    if (!x0.same_shape(eps)) throw DimensionError("rf_target: x0/eps shape mismatch");
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = x0.data[i] - eps.data[i];
  }
  return out;
}

double rf_loss(const Tensor& pred, const Tensor& target) {
  if (!pred.same_shape(target)) {
    throw DimensionError("rf_loss: shape mismatch " + shape_str(pred.shape) + " vs " +
                         shape_str(target.shape));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const double d = pred.data[i] - target.data[i];
    s += d * d;
  }
  return s / static_cast<double>(pred.numel());
}

ad::Var rf_loss_on_tape(ad::Tape& tp, ad::Var pred, ad::Var target) {
  ad::Var d = tp.sub(pred, target);
  return tp.mean_all(tp.mul(d, d));
}

Tensor euler_sample(const VelocityFn& model, const Tensor& x_init, const RfConfig& cfg) {
  cfg.validate();
  const std::int64_t steps = cfg.sampler_steps;
  const double dt = cfg.t_max / static_cast<double>(steps);
  Tensor x = x_init;
  Tensor last_u;
  bool has_last = false;
  for (std::int64_t s = 0; s < steps; ++s) {
    const double t = cfg.t_max - static_cast<double>(s) * dt;
    Tensor v = model(x, t);
    if (!v.same_shape(x)) throw DimensionError("sampler: model output shape mismatch");
    if (!v.all_finite()) {
      throw NonFiniteError("sampler: non-finite model output at t=" + std::to_string(t));
    }
    Tensor u;
    if (cfg.parameterization == Param::ConstantVelocity) {
      u = std::move(v);
    } else if (t <= dt * (1.0 + 1e-12) && has_last) {
      u = last_u;  // final step: conversion factor (1-t)/t is unusable
    } else {
      u = std::move(v);
      const double f = (1.0 - t) / t;
      for (double& e : u.data) e *= f;
    }
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += dt * u.data[i];
    last_u = std::move(u);
    has_last = true;
  }
  return x;
}

}  // namespace trydit::flow
