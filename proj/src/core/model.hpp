// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "core/attention.hpp"
#include "core/data.hpp"
#include "core/flow.hpp"
#include "core/image.hpp"
#include "core/rope.hpp"
#include "core/tape.hpp"

namespace trydit::model {

enum class Policy { Full, ConditionalOnly, ConditionalLora };
Policy policy_from_string(const std::string& s);
std::string to_string(Policy p);

struct ModelConfig {
  std::int64_t d = 64, heads = 4, blocks = 4, patch = 4;
  std::int64_t noise_h = 32, noise_w = 24;   // reference person shares these dims
  std::int64_t garment_h = 16, garment_w = 16;
  std::int64_t channels = 3, text_len = 4, mlp_ratio = 2;
  rope::Scheme pos_scheme = rope::Scheme::II;
  bool mask_enabled = true;
  double rope_theta = 10000.0;
  std::int64_t lora_rank = 0;  // 0 disables the adapters
  double lora_alpha = 8.0;
  double norm_eps = 1e-6;

  void validate() const;
  std::int64_t patch_len() const { return patch * patch * channels; }
  rope::GridDims noise_grid() const { return {noise_h / patch, noise_w / patch}; }
  rope::GridDims garment_grid() const { return {garment_h / patch, garment_w / patch}; }
  attn::Segmentation segmentation() const;
  rope::RopeConfig rope_config() const { return {d / heads, rope_theta}; }
};

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json rf_config_to_json(const flow::RfConfig& cfg);
flow::RfConfig rf_config_from_json(const nlohmann::json& j);

struct AdamConfig {
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

struct AdamState {
  AdamConfig cfg;
  std::int64_t t = 0;
  std::map<std::string, Tensor> m, v;
};

// The assembled network: shared patch embedder, learned prompt block,
// timestep modulation, `blocks` joint attention blocks, and a linear
// velocity decode of the noise span.
class Model {
 public:
  struct Param {
    std::string name;
    Tensor value;
    bool trainable = true;
  };

  Model(const ModelConfig& cfg, const flow::RfConfig& rf, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const flow::RfConfig& rf_config() const { return rf_; }
  std::uint64_t seed() const { return seed_; }
  std::int64_t step() const { return step_; }
  Policy policy() const { return policy_; }

  const std::vector<Param>& params() const { return params_; }
  const Tensor& param(const std::string& name) const;
  Tensor& param_mut(const std::string& name);
  bool param_trainable(const std::string& name) const;
  std::int64_t trainable_scalar_count() const;

  void set_policy(Policy p);
  void init_conditional_branches();

  // Predicted velocity for the noise branch, same dims as `noisy`.
  img::Image forward(const img::Image& noisy, const img::Image& person, const img::Image& garment,
                     double t, std::vector<Tensor>* attn_weight_sink = nullptr) const;

  // Euler integration from pure noise, conditioned on (person, garment).
  img::Image sample(const img::Image& person, const img::Image& garment, std::uint64_t noise_seed,
                    std::int64_t steps_override = 0) const;

  // One optimizer update over the batch; returns the loss. Deterministic
  // in (parameters, batch, step_seed).
  double train_step(const std::vector<data::TripletSample>& batch, AdamState& opt,
                    std::uint64_t step_seed);

  void save(const std::string& dir) const;
  static Model load(const std::string& dir);

  // Same architecture at new image dims; weights are reused unchanged and
  // position grids are rebuilt.
  Model transfer_resolution(std::int64_t noise_h, std::int64_t noise_w, std::int64_t garment_h,
                            std::int64_t garment_w) const;

  // MAC counts for one full forward's worth of attention (all blocks).
  attn::FlopCounter attention_flops(attn::AttnImpl impl) const;

  std::string config_hash() const;

  // ---- gradient-audit surface ----
  // One tape node per parameter, in params() order; requires_grad follows
  // the trainability flags when `training` is set.
  std::vector<ad::Var> make_leafs(ad::Tape& tp, bool training) const;
  // Rectified-flow loss of one sample at fixed (t, eps), built on the
  // caller's tape from the given parameter nodes.
  ad::Var sample_loss(ad::Tape& tp, const std::vector<ad::Var>& param_vars,
                      const data::TripletSample& sample, double t, const Tensor& eps) const;
  std::size_t param_index(const std::string& name) const;

 private:
  void register_params();
  ad::Var build_forward(ad::Tape& tp, const std::vector<ad::Var>& pv, const Tensor& xt_patches,
                        const Tensor& person_patches, const Tensor& garment_patches, double t,
                        std::vector<Tensor>* sink) const;
  attn::BranchVars branch_vars(ad::Tape& tp, const std::vector<ad::Var>& pv, std::int64_t block) const;
  Tensor time_embedding(double t) const;

  ModelConfig cfg_;
  flow::RfConfig rf_;
  std::uint64_t seed_ = 0;
  std::int64_t step_ = 0;
  Policy policy_ = Policy::Full;
  std::vector<Param> params_;
  std::map<std::string, std::size_t> index_;
  attn::Segmentation seg_;
  rope::PositionGrid pos_;
  Tensor mask_;
};

}  // namespace trydit::model
