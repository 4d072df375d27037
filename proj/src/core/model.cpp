// SPDX-License-Identifier: Apache-2.0
#include "core/model.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "core/json_util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace trydit::model {

Policy policy_from_string(const std::string& s) {
  if (s == "full") return Policy::Full;
  if (s == "conditional_only") return Policy::ConditionalOnly;
  if (s == "conditional_lora") return Policy::ConditionalLora;
  throw ContractError("unknown trainability policy: " + s);
}

std::string to_string(Policy p) {
  switch (p) {
    case Policy::Full: return "full";
    case Policy::ConditionalOnly: return "conditional_only";
    default: return "conditional_lora";
  }
}

void ModelConfig::validate() const {
  if (d <= 0 || heads <= 0 || blocks <= 0 || patch <= 0) throw ContractError("model dims must be positive");
  if (d % heads != 0) throw ContractError("d must be divisible by heads");
  if ((d / heads) % 4 != 0) throw ContractError("head dim must be divisible by 4 for 2D rotary encoding");
  if (channels <= 0 || text_len < 0 || mlp_ratio < 1) throw ContractError("bad model config");
  if (noise_h % patch != 0 || noise_w % patch != 0 || garment_h % patch != 0 || garment_w % patch != 0) {
    throw DimensionError("patch size must divide every image extent");
  }
  if (lora_rank < 0 || lora_rank > d) throw ContractError("lora rank out of range");
  if (norm_eps < 0) throw ContractError("norm_eps must be non-negative");
}

attn::Segmentation ModelConfig::segmentation() const {
  return {text_len, noise_grid().count(), noise_grid().count(), garment_grid().count()};
}

json model_config_to_json(const ModelConfig& c) {
  return {{"d", c.d},
          {"heads", c.heads},
          {"blocks", c.blocks},
          {"patch", c.patch},
          {"noise_h", c.noise_h},
          {"noise_w", c.noise_w},
          {"garment_h", c.garment_h},
          {"garment_w", c.garment_w},
          {"channels", c.channels},
          {"text_len", c.text_len},
          {"mlp_ratio", c.mlp_ratio},
          {"pos_scheme", c.pos_scheme == rope::Scheme::I ? "I" : "II"},
          {"mask_enabled", c.mask_enabled},
          {"rope_theta", c.rope_theta},
          {"lora_rank", c.lora_rank},
          {"lora_alpha", c.lora_alpha},
          {"norm_eps", c.norm_eps}};
}

ModelConfig model_config_from_json(const json& j) {
  require_known_keys(j,
                     {"d", "heads", "blocks", "patch", "noise_h", "noise_w", "garment_h", "garment_w",
                      "channels", "text_len", "mlp_ratio", "pos_scheme", "mask_enabled", "rope_theta",
                      "lora_rank", "lora_alpha", "norm_eps"},
                     "model config");
  ModelConfig c;
  c.d = json_get_or<std::int64_t>(j, "d", c.d);
  c.heads = json_get_or<std::int64_t>(j, "heads", c.heads);
  c.blocks = json_get_or<std::int64_t>(j, "blocks", c.blocks);
  c.patch = json_get_or<std::int64_t>(j, "patch", c.patch);
  c.noise_h = json_get_or<std::int64_t>(j, "noise_h", c.noise_h);
  c.noise_w = json_get_or<std::int64_t>(j, "noise_w", c.noise_w);
  c.garment_h = json_get_or<std::int64_t>(j, "garment_h", c.garment_h);
  c.garment_w = json_get_or<std::int64_t>(j, "garment_w", c.garment_w);
  c.channels = json_get_or<std::int64_t>(j, "channels", c.channels);
  c.text_len = json_get_or<std::int64_t>(j, "text_len", c.text_len);
  c.mlp_ratio = json_get_or<std::int64_t>(j, "mlp_ratio", c.mlp_ratio);
  const std::string scheme = json_get_or<std::string>(j, "pos_scheme", "II");
  if (scheme == "I") {
    c.pos_scheme = rope::Scheme::I;
  } else if (scheme == "II") {
    c.pos_scheme = rope::Scheme::II;
  } else {
    throw ContractError("pos_scheme must be \"I\" or \"II\"");
  }
  c.mask_enabled = json_get_or<bool>(j, "mask_enabled", c.mask_enabled);
  c.rope_theta = json_get_or<double>(j, "rope_theta", c.rope_theta);
  c.lora_rank = json_get_or<std::int64_t>(j, "lora_rank", c.lora_rank);
  c.lora_alpha = json_get_or<double>(j, "lora_alpha", c.lora_alpha);
  c.norm_eps = json_get_or<double>(j, "norm_eps", c.norm_eps);
  c.validate();
  return c;
}

json rf_config_to_json(const flow::RfConfig& c) {
  return {{"parameterization", flow::to_string(c.parameterization)},
          {"t_max", c.t_max},
          {"sampler_steps", c.sampler_steps}};
}

flow::RfConfig rf_config_from_json(const json& j) {
  require_known_keys(j, {"parameterization", "t_max", "sampler_steps"}, "rf config");
  flow::RfConfig c;
  c.parameterization =
      flow::param_from_string(json_get_or<std::string>(j, "parameterization", flow::to_string(c.parameterization)));
  c.t_max = json_get_or<double>(j, "t_max", c.t_max);
  c.sampler_steps = json_get_or<std::int64_t>(j, "sampler_steps", c.sampler_steps);
  c.validate();
  return c;
}

namespace {

const char* kBranchNames[3] = {"tn", "c1", "c2"};
const char* kMatNames[4] = {"wq", "wk", "wv", "wo"};

constexpr double kDecodeHighwayScale = 2.0;

std::string block_prefix(std::int64_t b) { return "blocks." + std::to_string(b) + "."; }

Tensor uniform_tensor(Shape s, double bound, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(s));
  for (double& v : t.data) v = rng.uniform(-bound, bound);
  return t;
}

Tensor normal_tensor(Shape s, double stddev, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(s));
  for (double& v : t.data) v = rng.normal() * stddev;
  return t;
}

Tensor gauss_jordan_inverse(const Tensor& m) {
  const std::int64_t n = m.shape[0];
  std::vector<std::vector<double>> aug(static_cast<std::size_t>(n),
                                       std::vector<double>(static_cast<std::size_t>(2 * n), 0.0));
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < n; ++j) aug[i][j] = m.at2(i, j);
    aug[i][static_cast<std::size_t>(n + i)] = 1.0;
  }
  for (std::int64_t col = 0; col < n; ++col) {
    std::int64_t piv = col;
    for (std::int64_t r = col + 1; r < n; ++r) {
      if (std::abs(aug[r][col]) > std::abs(aug[piv][col])) piv = r;
    }
    std::swap(aug[static_cast<std::size_t>(col)], aug[static_cast<std::size_t>(piv)]);
    const double diag = aug[col][col];
    if (std::abs(diag) < 1e-12) throw ContractError("degenerate patch embedding init");
    for (std::int64_t j = 0; j < 2 * n; ++j) aug[col][j] /= diag;
    for (std::int64_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = aug[r][col];
      for (std::int64_t j = 0; j < 2 * n; ++j) aug[r][j] -= f * aug[col][j];
    }
  }
  Tensor inv = Tensor::zeros({n, n});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j) inv.at2(i, j) = aug[i][static_cast<std::size_t>(n + j)];
  return inv;
}

// -scale * pinv(W): embed(p) . out comes back as -scale * p (exactly when
// the embedding widens, in the least-squares sense when it narrows)
Tensor decode_init(const Tensor& embed_w, double scale) {
  const std::int64_t plen = embed_w.shape[0], d = embed_w.shape[1];
  Tensor out;
  if (plen <= d) {
    out = mm_tn(embed_w, gauss_jordan_inverse(mm_nt(embed_w, embed_w)));
  } else {
    out = mm_nt(gauss_jordan_inverse(mm_tn(embed_w, embed_w)), embed_w);
  }
  for (double& v : out.data) v *= -scale;
  return out;
}

}  // namespace

Model::Model(const ModelConfig& cfg, const flow::RfConfig& rf, std::uint64_t seed)
    : cfg_(cfg), rf_(rf), seed_(seed) {
  cfg_.validate();
  rf_.validate();
  register_params();
  init_conditional_branches();
  seg_ = cfg_.segmentation();
  pos_ = rope::build_positions(cfg_.pos_scheme, cfg_.noise_grid(), cfg_.noise_grid(),
                               cfg_.garment_grid(), cfg_.text_len);
  mask_ = attn::build_mask(seg_);
}

void Model::register_params() {
  const std::int64_t d = cfg_.d, plen = cfg_.patch_len(), m = cfg_.d * cfg_.mlp_ratio;
  const double inv_sqrt_plen = 1.0 / std::sqrt(static_cast<double>(plen));
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double inv_sqrt_m = 1.0 / std::sqrt(static_cast<double>(m));

  // every parameter draws from its own named stream, so adding or
  // removing parameters (e.g. adapters) cannot disturb the others
  auto reg = [this](std::string name, Tensor value) {
    index_[name] = params_.size();
    params_.push_back({std::move(name), std::move(value), true});
  };
  auto stream = [this](const std::string& name) {
    return Rng(mix_seed(mix_seed(seed_, 0x6d6f64656cull), fnv1a64(name)));
  };
  auto reg_uniform = [&](const std::string& name, Shape s, double bound) {
    Rng rng = stream(name);
    reg(name, uniform_tensor(std::move(s), bound, rng));
  };
  auto reg_normal = [&](const std::string& name, Shape s, double stddev) {
    Rng rng = stream(name);
    reg(name, normal_tensor(std::move(s), stddev, rng));
  };

  reg_uniform("embed.weight", {plen, d}, inv_sqrt_plen);
  reg("embed.bias", Tensor::zeros({d}));
  reg_normal("prompt.tokens", {cfg_.text_len, d}, 0.02);
  reg_uniform("time.w1", {d, d}, inv_sqrt_d);
  reg("time.b1", Tensor::zeros({d}));
  for (std::int64_t b = 0; b < cfg_.blocks; ++b) {
    const std::string pre = block_prefix(b);
    reg_uniform(pre + "mod.weight", {d, 2 * d}, inv_sqrt_d);
    reg(pre + "mod.bias", Tensor::zeros({2 * d}));
    reg(pre + "attn_norm.gain", Tensor::full({d}, 1.0));
    for (const char* br : kBranchNames) {
      for (const char* mat : kMatNames) {
        // conditional branches start as copies of tn (see
        // init_conditional_branches)
        if (std::string(br) == "tn") {
          reg_uniform(pre + "attn.tn." + mat, {d, d}, inv_sqrt_d);
        } else {
          reg(pre + "attn." + br + "." + mat, Tensor::zeros({d, d}));
        }
      }
    }
    if (cfg_.lora_rank > 0) {
      for (const char* br : {"c1", "c2"}) {
        for (const char* mat : kMatNames) {
          reg_uniform(pre + "attn." + br + "." + mat + ".lora_down", {d, cfg_.lora_rank}, inv_sqrt_d);
          reg(pre + "attn." + br + "." + mat + ".lora_up", Tensor::zeros({cfg_.lora_rank, d}));
        }
      }
    }
    reg(pre + "mlp_norm.gain", Tensor::full({d}, 1.0));
    reg_uniform(pre + "mlp.gate", {d, m}, inv_sqrt_d);
    reg_uniform(pre + "mlp.up", {d, m}, inv_sqrt_d);
    reg_uniform(pre + "mlp.down", {m, d}, inv_sqrt_m);
  }
  // The decode starts as a scaled negative right-inverse of the patch
  // embedder, so the frozen embed->decode highway contributes -c * x_t to
  // the predicted velocity. The conditional branches then only have to
  // inject the conditioning term, which keeps the velocity field
  // contractive when the backbone is frozen.
  reg("decode.weight", decode_init(param("embed.weight"), kDecodeHighwayScale));
  reg("decode.bias", Tensor::zeros({plen}));
}

std::size_t Model::param_index(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter: " + name);
  return it->second;
}

const Tensor& Model::param(const std::string& name) const { return params_[param_index(name)].value; }

Tensor& Model::param_mut(const std::string& name) { return params_[param_index(name)].value; }

bool Model::param_trainable(const std::string& name) const {
  return params_[param_index(name)].trainable;
}

std::int64_t Model::trainable_scalar_count() const {
  std::int64_t n = 0;
  for (const Param& p : params_) {
    if (p.trainable) n += p.value.numel();
  }
  return n;
}

void Model::set_policy(Policy p) {
  if (p == Policy::ConditionalLora && cfg_.lora_rank <= 0) {
    throw ContractError("conditional_lora policy needs lora_rank > 0");
  }
  policy_ = p;
  for (Param& prm : params_) {
    const bool conditional = prm.name.find(".attn.c1.") != std::string::npos ||
                             prm.name.find(".attn.c2.") != std::string::npos;
    const bool lora = prm.name.find(".lora_") != std::string::npos;
    switch (p) {
      case Policy::Full: prm.trainable = true; break;
      case Policy::ConditionalOnly: prm.trainable = conditional && !lora; break;
      case Policy::ConditionalLora: prm.trainable = conditional && lora; break;
    }
  }
}

void Model::init_conditional_branches() {
  for (std::int64_t b = 0; b < cfg_.blocks; ++b) {
    const std::string pre = block_prefix(b) + "attn.";
    for (const char* mat : kMatNames) {
      const Tensor& src = param(pre + "tn." + mat);
      param_mut(pre + "c1." + mat) = src;
      param_mut(pre + "c2." + mat) = src;
    }
  }
}

Tensor Model::time_embedding(double t) const {
  const std::int64_t d = cfg_.d;
  Tensor e = Tensor::zeros({1, d});
  const std::int64_t half = d / 2;
  for (std::int64_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    const double arg = t * 1000.0 * freq;
    e.data[static_cast<std::size_t>(i)] = std::sin(arg);
    e.data[static_cast<std::size_t>(half + i)] = std::cos(arg);
  }
  return e;
}

std::vector<ad::Var> Model::make_leafs(ad::Tape& tp, bool training) const {
  std::vector<ad::Var> pv;
  pv.reserve(params_.size());
  for (const Param& p : params_) {
    pv.push_back(tp.leaf(p.value, training && p.trainable));
  }
  return pv;
}

attn::BranchVars Model::branch_vars(ad::Tape&, const std::vector<ad::Var>& pv,
                                    std::int64_t block) const {
  const std::string pre = block_prefix(block) + "attn.";
  auto get = [&](const std::string& n) { return pv[param_index(n)]; };
  auto proj = [&](const char* br) {
    attn::ProjVars v;
    v.q = get(pre + br + ".wq");
    v.k = get(pre + br + ".wk");
    v.v = get(pre + br + ".wv");
    v.o = get(pre + br + ".wo");
    if (cfg_.lora_rank > 0 && std::string(br) != "tn") {
      auto lora = [&](const char* mat) {
        attn::LoraVars l;
        l.down = get(pre + br + "." + mat + ".lora_down");
        l.up = get(pre + br + "." + mat + ".lora_up");
        l.rank = cfg_.lora_rank;
        l.alpha = cfg_.lora_alpha;
        return l;
      };
      v.lq = lora("wq");
      v.lk = lora("wk");
      v.lv = lora("wv");
      v.lo = lora("wo");
    }
    return v;
  };
  return {proj("tn"), proj("c1"), proj("c2")};
}

ad::Var Model::build_forward(ad::Tape& tp, const std::vector<ad::Var>& pv, const Tensor& xt_patches,
                             const Tensor& person_patches, const Tensor& garment_patches, double t,
                             std::vector<Tensor>* sink) const {
  auto get = [&](const std::string& n) { return pv[param_index(n)]; };

  ad::Var embed_w = get("embed.weight");
  ad::Var embed_b = get("embed.bias");
  auto embed = [&](const Tensor& patches) {
    return tp.add(tp.matmul(tp.constant(patches), embed_w), embed_b);
  };

  ad::Var tokens_x = embed(xt_patches);
  ad::Var tokens_c1 = embed(person_patches);
  ad::Var tokens_c2 = embed(garment_patches);
  ad::Var s = tp.concat({get("prompt.tokens"), tokens_x, tokens_c1, tokens_c2}, 0);

  ad::Var tvec = tp.silu(tp.add(tp.matmul(tp.constant(time_embedding(t)), get("time.w1")), get("time.b1")));

  std::optional<ad::Var> mask;
  if (cfg_.mask_enabled) mask = tp.constant(mask_);

  const rope::RopeConfig rcfg = cfg_.rope_config();
  for (std::int64_t b = 0; b < cfg_.blocks; ++b) {
    const std::string pre = block_prefix(b);
    ad::Var mod = tp.add(tp.matmul(tvec, get(pre + "mod.weight")), get(pre + "mod.bias"));
    ad::Var scale_row = tp.slice(mod, 1, 0, cfg_.d);
    ad::Var shift_row = tp.slice(mod, 1, cfg_.d, cfg_.d);

    ad::Var h = tp.rms_norm(s, cfg_.norm_eps, get(pre + "attn_norm.gain"));
    h = tp.add(tp.mul(h, tp.add_scalar(scale_row, 1.0)), shift_row);
    ad::Var a = attn::joint_attention(tp, h, seg_, branch_vars(tp, pv, b), pos_, rcfg, cfg_.heads,
                                      mask, sink);
    s = tp.add(s, a);

    ad::Var n2 = tp.rms_norm(s, cfg_.norm_eps, get(pre + "mlp_norm.gain"));
    ad::Var gated = tp.mul(tp.silu(tp.matmul(n2, get(pre + "mlp.gate"))), tp.matmul(n2, get(pre + "mlp.up")));
    s = tp.add(s, tp.matmul(gated, get(pre + "mlp.down")));
  }

  ad::Var x_span = tp.slice(s, 0, cfg_.text_len, seg_.noise);
  return tp.add(tp.matmul(x_span, get("decode.weight")), get("decode.bias"));
}

namespace {

void check_image_dims(const img::Image& im, std::int64_t c, std::int64_t h, std::int64_t w,
                      const char* who) {
  if (im.c != c || im.h != h || im.w != w) {
    throw ContractError(std::string(who) + ": got " + std::to_string(im.c) + "x" +
                        std::to_string(im.h) + "x" + std::to_string(im.w) + ", config wants " +
                        std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w));
  }
}

}  // namespace

img::Image Model::forward(const img::Image& noisy, const img::Image& person,
                          const img::Image& garment, double t,
                          std::vector<Tensor>* attn_weight_sink) const {
  check_image_dims(noisy, cfg_.channels, cfg_.noise_h, cfg_.noise_w, "forward: noisy");
  check_image_dims(person, cfg_.channels, cfg_.noise_h, cfg_.noise_w, "forward: person");
  check_image_dims(garment, cfg_.channels, cfg_.garment_h, cfg_.garment_w, "forward: garment");
  ad::Tape tp;
  std::vector<ad::Var> pv = make_leafs(tp, false);
  ad::Var out = build_forward(tp, pv, img::patchify(noisy, cfg_.patch),
                              img::patchify(person, cfg_.patch), img::patchify(garment, cfg_.patch),
                              t, attn_weight_sink);
  const img::PatchGrid grid{cfg_.noise_grid().rows, cfg_.noise_grid().cols};
  return img::unpatchify(tp.val(out), grid, cfg_.patch, cfg_.channels);
}

img::Image Model::sample(const img::Image& person, const img::Image& garment,
                         std::uint64_t noise_seed, std::int64_t steps_override) const {
  flow::RfConfig rc = rf_;
  if (steps_override > 0) rc.sampler_steps = steps_override;
  Rng rng(mix_seed(noise_seed, 0x73616d706c65ull));
  Tensor x0 = Tensor::zeros({cfg_.channels, cfg_.noise_h, cfg_.noise_w});
  for (double& v : x0.data) v = rng.normal();
  flow::VelocityFn vf = [this, &person, &garment](const Tensor& x, double t) {
    return forward(img::Image::from_tensor(x), person, garment, t).to_tensor();
  };
  return img::Image::from_tensor(flow::euler_sample(vf, x0, rc));
}

ad::Var Model::sample_loss(ad::Tape& tp, const std::vector<ad::Var>& param_vars,
                           const data::TripletSample& sample, double t, const Tensor& eps) const {
  check_image_dims(sample.reference, cfg_.channels, cfg_.noise_h, cfg_.noise_w, "sample_loss: reference");
  const Tensor x0 = sample.reference.to_tensor();
  const Tensor xt = flow::rf_interpolate(x0, eps, t);
  const Tensor target = flow::rf_target(x0, xt, eps, t, rf_);
  const Tensor target_patches = img::patchify(img::Image::from_tensor(target), cfg_.patch);
  ad::Var pred = build_forward(tp, param_vars, img::patchify(img::Image::from_tensor(xt), cfg_.patch),
                               img::patchify(sample.person, cfg_.patch),
                               img::patchify(sample.garment, cfg_.patch), t, nullptr);
  return flow::rf_loss_on_tape(tp, pred, tp.constant(target_patches));
}

double Model::train_step(const std::vector<data::TripletSample>& batch, AdamState& opt,
                         std::uint64_t step_seed) {
  if (batch.empty()) throw ContractError("train_step: empty batch");
  ad::Tape tp;
  std::vector<ad::Var> pv = make_leafs(tp, true);
  ad::Var total;
  std::int64_t total_elems = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const data::TripletSample& smp = batch[i];
    check_image_dims(smp.reference, cfg_.channels, cfg_.noise_h, cfg_.noise_w, "train: reference");
    Rng rng(mix_seed(step_seed, static_cast<std::uint64_t>(i)));
    const double t = rng.uniform(0.0, rf_.t_max);
    flow::RfBatchItem item = flow::make_batch_item(smp.reference.to_tensor(), t, rng);
    const Tensor target = flow::rf_target(item.x0, item.xt, item.eps, t, rf_);
    const Tensor target_patches = img::patchify(img::Image::from_tensor(target), cfg_.patch);
    const Tensor xt_patches = img::patchify(img::Image::from_tensor(item.xt), cfg_.patch);
    ad::Var pred = build_forward(tp, pv, xt_patches, img::patchify(smp.person, cfg_.patch),
                                 img::patchify(smp.garment, cfg_.patch), t, nullptr);
    ad::Var diff = tp.sub(pred, tp.constant(target_patches));
    ad::Var sq = tp.sum_all(tp.mul(diff, diff));
    total = total.valid() ? tp.add(total, sq) : sq;
    total_elems += target_patches.numel();
  }
  ad::Var loss = tp.scale(total, 1.0 / static_cast<double>(total_elems));
  const double loss_value = tp.val(loss).data[0];
  if (!std::isfinite(loss_value)) {
    throw NonFiniteError("train_step: non-finite loss at step " + std::to_string(step_) +
                         " (step_seed " + std::to_string(step_seed) + ")");
  }
  tp.backward(loss);

  opt.t += 1;
  const AdamConfig& ac = opt.cfg;
  const double bc1 = 1.0 - std::pow(ac.beta1, static_cast<double>(opt.t));
  const double bc2 = 1.0 - std::pow(ac.beta2, static_cast<double>(opt.t));
  for (std::size_t pi = 0; pi < params_.size(); ++pi) {
    Param& prm = params_[pi];
    if (!prm.trainable) continue;
    const Tensor g = tp.grad_or_zeros(pv[pi]);
    Tensor& m = opt.m.try_emplace(prm.name, Tensor::zeros(prm.value.shape)).first->second;
    Tensor& v = opt.v.try_emplace(prm.name, Tensor::zeros(prm.value.shape)).first->second;
    for (std::size_t k = 0; k < g.data.size(); ++k) {
      const double gk = g.data[k];
      m.data[k] = ac.beta1 * m.data[k] + (1.0 - ac.beta1) * gk;
      v.data[k] = ac.beta2 * v.data[k] + (1.0 - ac.beta2) * gk * gk;
      const double mhat = m.data[k] / bc1;
      const double vhat = v.data[k] / bc2;
      prm.value.data[k] -= ac.lr * mhat / (std::sqrt(vhat) + ac.eps);
    }
  }
  ++step_;
  return loss_value;
}

std::string Model::config_hash() const {
  json doc = {{"model", model_config_to_json(cfg_)}, {"rf", rf_config_to_json(rf_)}};
  return fnv1a64_hex(doc.dump());
}

void Model::save(const std::string& dir) const {
  fs::create_directories(dir + "/params");
  json manifest;
  manifest["format"] = "trydit-checkpoint-v1";
  manifest["config"] = model_config_to_json(cfg_);
  manifest["rf"] = rf_config_to_json(rf_);
  manifest["config_hash"] = config_hash();
  manifest["policy"] = to_string(policy_);
  manifest["seed"] = seed_;
  manifest["step"] = step_;
  json plist = json::array();
  for (const Param& p : params_) {
    const std::string file = "params/" + p.name + ".ptnsr";
    write_tensor_file(dir + "/" + file, p.value);
    json shape = json::array();
    for (auto e : p.value.shape) shape.push_back(e);
    plist.push_back({{"name", p.name}, {"shape", shape}, {"file", file}});
  }
  manifest["params"] = plist;
  std::ofstream f(dir + "/manifest.json", std::ios::trunc);
  if (!f) throw IoError("cannot write " + dir + "/manifest.json");
  f << manifest.dump(2) << "\n";
}

Model Model::load(const std::string& dir) {
  std::ifstream f(dir + "/manifest.json");
  if (!f) throw IoError("cannot read " + dir + "/manifest.json (not a checkpoint?)");
  json manifest = json::parse(f);
  if (manifest.value("format", "") != "trydit-checkpoint-v1") {
    throw IoError("unsupported checkpoint format in " + dir);
  }
  ModelConfig cfg = model_config_from_json(manifest.at("config"));
  flow::RfConfig rf = rf_config_from_json(manifest.at("rf"));
  Model m(cfg, rf, manifest.at("seed").get<std::uint64_t>());
  m.step_ = manifest.at("step").get<std::int64_t>();
  m.policy_ = policy_from_string(manifest.at("policy").get<std::string>());
  m.set_policy(m.policy_);
  std::size_t seen = 0;
  for (const json& e : manifest.at("params")) {
    const std::string name = e.at("name").get<std::string>();
    Tensor t = read_tensor_file(dir + "/" + e.at("file").get<std::string>());
    Tensor& dst = m.param_mut(name);
    if (!t.same_shape(dst)) {
      throw IoError("checkpoint parameter " + name + " has shape " + shape_str(t.shape) +
                    ", model wants " + shape_str(dst.shape));
    }
    dst = std::move(t);
    ++seen;
  }
  if (seen != m.params_.size()) {
    throw IoError("checkpoint parameter count mismatch in " + dir);
  }
  return m;
}

Model Model::transfer_resolution(std::int64_t noise_h, std::int64_t noise_w, std::int64_t garment_h,
                                 std::int64_t garment_w) const {
  ModelConfig cfg = cfg_;
  cfg.noise_h = noise_h;
  cfg.noise_w = noise_w;
  cfg.garment_h = garment_h;
  cfg.garment_w = garment_w;
  cfg.validate();  // same patch/d/heads/blocks by construction
  Model m(cfg, rf_, seed_);
  for (std::size_t i = 0; i < params_.size(); ++i) m.params_[i].value = params_[i].value;
  m.step_ = step_;
  m.set_policy(policy_);
  return m;
}

attn::FlopCounter Model::attention_flops(attn::AttnImpl impl) const {
  attn::FlopCounter fc;
  const Tensor tokens = Tensor::zeros({seg_.total(), cfg_.d});
  for (std::int64_t b = 0; b < cfg_.blocks; ++b) {
    const std::string pre = block_prefix(b) + "attn.";
    auto mats = [&](const char* br) {
      attn::ProjMats pm{param(pre + br + ".wq"), param(pre + br + ".wk"), param(pre + br + ".wv"),
                        param(pre + br + ".wo")};
      if (cfg_.lora_rank > 0 && std::string(br) != "tn") {
        for (auto [mat, dst] : {std::pair{"wq", &pm.q}, {"wk", &pm.k}, {"wv", &pm.v}, {"wo", &pm.o}}) {
          const Tensor& down = param(pre + br + "." + mat + ".lora_down");
          const Tensor& up = param(pre + br + "." + mat + ".lora_up");
          Tensor delta = mm_nn(down, up);
          const double s = cfg_.lora_alpha / static_cast<double>(cfg_.lora_rank);
          for (std::size_t k = 0; k < delta.data.size(); ++k) dst->data[k] += s * delta.data[k];
        }
      }
      return pm;
    };
    attn::BranchMats bm{mats("tn"), mats("c1"), mats("c2")};
    attn::joint_attention_plain(tokens, seg_, bm, pos_, cfg_.rope_config(), cfg_.heads,
                                cfg_.mask_enabled, impl, &fc, nullptr);
  }
  return fc;
}

}  // namespace trydit::model
