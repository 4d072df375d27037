// SPDX-License-Identifier: Apache-2.0
#include "core/runner.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "core/json_util.hpp"
#include "core/metrics.hpp"
#include "core/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace trydit::run {

namespace {

std::atomic<int> g_max_threads{0};

json train_settings_to_json(const TrainSettings& t) {
  return {{"lr", t.lr},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"adam_eps", t.adam_eps},
          {"batch_size", t.batch_size},
          {"policy", t.policy},
          {"loss_ma_window", t.loss_ma_window}};
}

TrainSettings train_settings_from_json(const json& j) {
  require_known_keys(j, {"lr", "beta1", "beta2", "adam_eps", "batch_size", "policy", "loss_ma_window"},
                     "train config");
  TrainSettings t;
  t.lr = json_get_or<double>(j, "lr", t.lr);
  t.beta1 = json_get_or<double>(j, "beta1", t.beta1);
  t.beta2 = json_get_or<double>(j, "beta2", t.beta2);
  t.adam_eps = json_get_or<double>(j, "adam_eps", t.adam_eps);
  t.batch_size = json_get_or<std::int64_t>(j, "batch_size", t.batch_size);
  t.policy = json_get_or<std::string>(j, "policy", t.policy);
  t.loss_ma_window = json_get_or<std::int64_t>(j, "loss_ma_window", t.loss_ma_window);
  if (t.batch_size < 1 || t.loss_ma_window < 1) throw ContractError("bad train config");
  model::policy_from_string(t.policy);
  return t;
}

json data_settings_to_json(const RunConfig& cfg) {
  return {{"person_h", cfg.data.person_h},
          {"person_w", cfg.data.person_w},
          {"garment_h", cfg.data.garment_h},
          {"garment_w", cfg.data.garment_w},
          {"thresholds",
           {{"garment", cfg.thresholds.garment},
            {"person", cfg.thresholds.person},
            {"realism", cfg.thresholds.realism}}}};
}

void data_settings_from_json(const json& j, RunConfig& cfg) {
  require_known_keys(j, {"person_h", "person_w", "garment_h", "garment_w", "thresholds"}, "data config");
  cfg.data.person_h = json_get_or<std::int64_t>(j, "person_h", cfg.data.person_h);
  cfg.data.person_w = json_get_or<std::int64_t>(j, "person_w", cfg.data.person_w);
  cfg.data.garment_h = json_get_or<std::int64_t>(j, "garment_h", cfg.data.garment_h);
  cfg.data.garment_w = json_get_or<std::int64_t>(j, "garment_w", cfg.data.garment_w);
  if (j.contains("thresholds")) {
    const json& th = j.at("thresholds");
    require_known_keys(th, {"garment", "person", "realism"}, "thresholds");
    cfg.thresholds.garment = json_get_or<double>(th, "garment", cfg.thresholds.garment);
    cfg.thresholds.person = json_get_or<double>(th, "person", cfg.thresholds.person);
    cfg.thresholds.realism = json_get_or<double>(th, "realism", cfg.thresholds.realism);
  }
}

}  // namespace

void set_max_threads(int n) { g_max_threads.store(n > 0 ? n : 0); }
int max_threads() { return g_max_threads.load(); }

RunConfig default_run_config() { return RunConfig{}; }

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ContractError(std::string("config is not valid JSON: ") + e.what());
  }
  require_known_keys(j, {"model", "rf", "train", "data", "seed"}, "run config");
  RunConfig cfg;
  if (j.contains("model")) cfg.model = model::model_config_from_json(j.at("model"));
  if (j.contains("rf")) cfg.rf = model::rf_config_from_json(j.at("rf"));
  if (j.contains("train")) cfg.train = train_settings_from_json(j.at("train"));
  if (j.contains("data")) data_settings_from_json(j.at("data"), cfg);
  cfg.seed = json_get_or<std::uint64_t>(j, "seed", cfg.seed);
  cfg.model.validate();
  cfg.rf.validate();
  cfg.data.validate();
  return cfg;
}

json run_config_to_json(const RunConfig& cfg) {
  return {{"model", model::model_config_to_json(cfg.model)},
          {"rf", model::rf_config_to_json(cfg.rf)},
          {"train", train_settings_to_json(cfg.train)},
          {"data", data_settings_to_json(cfg)},
          {"seed", cfg.seed}};
}

std::string config_hash(const RunConfig& cfg) { return fnv1a64_hex(run_config_to_json(cfg).dump()); }

void cmd_gen_data(const RunConfig& cfg, std::uint64_t seed, std::int64_t count,
                  const std::string& out_dir, bool force) {
  if (count < 0) throw ContractError("gen-data: count must be >= 0");
  const fs::path round_dir = fs::path(out_dir) / "round_0";
  if (fs::exists(round_dir) && !fs::is_empty(round_dir)) {
    if (!force) {
      throw ContractError("gen-data: " + round_dir.string() + " exists and is not empty (use force)");
    }
    fs::remove_all(round_dir);
  }
  data::Pool pool;
  for (std::int64_t i = 0; i < count; ++i) {
    data::PoolRecord rec;
    rec.sample = data::gen_triplet(mix_seed(seed, static_cast<std::uint64_t>(i)), cfg.data);
    rec.scores = data::score_triplet(rec.sample);
    rec.id = i;
    rec.round = 0;
    rec.provenance = data::Provenance::Stage1;
    pool.push_back(std::move(rec));
  }
  data::save_pool(round_dir.string(), pool, config_hash(cfg), seed, 0);
}

namespace {

std::string newest_round_dir(const std::string& data_dir) {
  std::int64_t best = -1;
  if (!fs::is_directory(data_dir)) throw IoError("dataset directory not found: " + data_dir);
  for (const auto& e : fs::directory_iterator(data_dir)) {
    if (!e.is_directory()) continue;
    const std::string name = e.path().filename().string();
    if (name.rfind("round_", 0) != 0) continue;
    best = std::max(best, static_cast<std::int64_t>(std::stoll(name.substr(6))));
  }
  if (best < 0) throw IoError("no round_* directory under " + data_dir);
  return (fs::path(data_dir) / ("round_" + std::to_string(best))).string();
}

void check_pool_matches(const data::Pool& pool, const model::ModelConfig& mc) {
  if (pool.empty()) throw ContractError("dataset is empty");
  const auto& s = pool.front().sample;
  if (s.person.c != mc.channels || s.person.h != mc.noise_h || s.person.w != mc.noise_w ||
      s.garment.h != mc.garment_h || s.garment.w != mc.garment_w) {
    throw ContractError("config/data mismatch: pool images are " + std::to_string(s.person.h) + "x" +
                        std::to_string(s.person.w) + " person, " + std::to_string(s.garment.h) + "x" +
                        std::to_string(s.garment.w) + " garment; config wants " +
                        std::to_string(mc.noise_h) + "x" + std::to_string(mc.noise_w) + " / " +
                        std::to_string(mc.garment_h) + "x" + std::to_string(mc.garment_w));
  }
}

struct TrainedResult {
  model::Model model;
  std::vector<double> losses;
  double initial_ma = 0.0, final_ma = 0.0;
  bool frozen_audit_ok = true;
};

double window_mean(const std::vector<double>& xs, std::size_t from, std::size_t to) {
  double s = 0.0;
  for (std::size_t i = from; i < to; ++i) s += xs[i];
  return to > from ? s / static_cast<double>(to - from) : 0.0;
}

TrainedResult train_in_memory(model::Model model, const data::Pool& pool, const RunConfig& cfg,
                              std::int64_t steps, model::Policy policy) {
  check_pool_matches(pool, model.config());
  model.set_policy(policy);

  std::vector<std::pair<std::string, Tensor>> frozen_before;
  if (policy != model::Policy::Full) {
    for (const auto& p : model.params()) {
      if (!p.trainable) frozen_before.emplace_back(p.name, p.value);
    }
  }

  model::AdamState opt;
  opt.cfg.lr = cfg.train.lr;
  opt.cfg.beta1 = cfg.train.beta1;
  opt.cfg.beta2 = cfg.train.beta2;
  opt.cfg.eps = cfg.train.adam_eps;

  TrainedResult out{std::move(model), {}, 0.0, 0.0, true};
  const std::int64_t n = static_cast<std::int64_t>(pool.size());
  for (std::int64_t s = 0; s < steps; ++s) {
    Rng picker(mix_seed(cfg.seed, 0x626174636800ull, static_cast<std::uint64_t>(s)));
    std::vector<data::TripletSample> batch;
    for (std::int64_t b = 0; b < cfg.train.batch_size; ++b) {
      batch.push_back(pool[static_cast<std::size_t>(picker.uniform_int(0, n - 1))].sample);
    }
    const double loss =
        out.model.train_step(batch, opt, mix_seed(cfg.seed, 0x737465700000ull, static_cast<std::uint64_t>(s)));
    out.losses.push_back(loss);
  }

  const std::size_t w = static_cast<std::size_t>(std::max<std::int64_t>(1, cfg.train.loss_ma_window));
  if (!out.losses.empty()) {
    out.initial_ma = window_mean(out.losses, 0, std::min(w, out.losses.size()));
    out.final_ma = window_mean(out.losses, out.losses.size() - std::min(w, out.losses.size()),
                               out.losses.size());
  }

  for (const auto& [name, before] : frozen_before) {
    const Tensor& after = out.model.param(name);
    if (before.data != after.data) {
      out.frozen_audit_ok = false;
      break;
    }
  }
  return out;
}

}  // namespace

TrainOutcome cmd_train(const RunConfig& cfg, const std::string& data_dir, std::int64_t steps,
                       const std::string& out_ckpt, const std::string& init_from,
                       const std::string& policy_override) {
  if (steps < 0) throw ContractError("train: steps must be >= 0");
  const data::Pool pool = data::load_pool(newest_round_dir(data_dir));

  model::Model m = [&]() {
    if (init_from.empty()) return model::Model(cfg.model, cfg.rf, cfg.seed);
    model::Model loaded = model::Model::load(init_from);
    const model::ModelConfig& lc = loaded.config();
    if (lc.d != cfg.model.d || lc.heads != cfg.model.heads || lc.blocks != cfg.model.blocks ||
        lc.patch != cfg.model.patch || lc.channels != cfg.model.channels ||
        lc.text_len != cfg.model.text_len || lc.mlp_ratio != cfg.model.mlp_ratio ||
        lc.lora_rank != cfg.model.lora_rank || lc.pos_scheme != cfg.model.pos_scheme ||
        lc.mask_enabled != cfg.model.mask_enabled) {
      throw ContractError("train: checkpoint architecture does not match config (only image dims may differ)");
    }
    return loaded.transfer_resolution(cfg.model.noise_h, cfg.model.noise_w, cfg.model.garment_h,
                                      cfg.model.garment_w);
  }();

  const model::Policy policy =
      model::policy_from_string(policy_override.empty() ? cfg.train.policy : policy_override);
  TrainedResult res = train_in_memory(std::move(m), pool, cfg, steps, policy);

  fs::create_directories(out_ckpt);
  res.model.save(out_ckpt);
  {
    std::ofstream csv(out_ckpt + "/loss_curve.csv", std::ios::trunc);
    if (!csv) throw IoError("cannot write loss curve");
    csv << "step,loss,moving_average\n";
    const std::size_t w = static_cast<std::size_t>(std::max<std::int64_t>(1, cfg.train.loss_ma_window));
    for (std::size_t i = 0; i < res.losses.size(); ++i) {
      const std::size_t from = i + 1 >= w ? i + 1 - w : 0;
      csv << i << "," << res.losses[i] << "," << window_mean(res.losses, from, i + 1) << "\n";
    }
  }

  TrainOutcome out;
  out.steps = steps;
  out.initial_ma = res.initial_ma;
  out.final_ma = res.final_ma;
  out.frozen_audit_ok = res.frozen_audit_ok;
  out.trainable_params = res.model.trainable_scalar_count();
  out.checkpoint_dir = out_ckpt;
  {
    json summary = {{"config_hash", config_hash(cfg)},
                    {"steps", out.steps},
                    {"policy", model::to_string(policy)},
                    {"initial_loss_ma", out.initial_ma},
                    {"final_loss_ma", out.final_ma},
                    {"frozen_audit_ok", out.frozen_audit_ok},
                    {"trainable_params", out.trainable_params},
                    {"pool_size", pool.size()}};
    std::ofstream f(out_ckpt + "/train_summary.json", std::ios::trunc);
    if (!f) throw IoError("cannot write train summary");
    f << summary.dump(2) << "\n";
  }
  return out;
}

void cmd_sample(const std::string& ckpt_dir, const std::string& person_ppm,
                const std::string& garment_ppm, std::int64_t steps, std::uint64_t seed,
                const std::string& out_ppm) {
  model::Model m = model::Model::load(ckpt_dir);
  const img::Image person = img::read_ppm(person_ppm);
  const img::Image garment = img::read_ppm(garment_ppm);
  img::Image out = m.sample(person, garment, seed, steps);
  if (!out.all_finite()) throw NonFiniteError("sample produced non-finite pixels");
  img::write_ppm(out_ppm, out);
  json sidecar = {{"steps", steps > 0 ? steps : m.rf_config().sampler_steps},
                  {"seed", seed},
                  {"config_hash", m.config_hash()}};
  std::ofstream f(out_ppm + ".json", std::ios::trunc);
  if (!f) throw IoError("cannot write sample sidecar");
  f << sidecar.dump(2) << "\n";
}

namespace {

json psnr_json(double v) {
  if (std::isinf(v)) return json("inf");
  return json(v);
}

}  // namespace

json eval_pool(const data::Pool& pool, const data::SampleFn& sampler, const std::string& hash) {
  if (pool.empty()) throw ContractError("eval: dataset is empty");
  json per_sample = json::array();
  std::vector<img::Image> generated, truth;
  double ssim_sum = 0.0, psnr_sum = 0.0;
  for (const data::PoolRecord& rec : pool) {
    const img::Image out = sampler(rec.sample, mix_seed(0x6576616cull, static_cast<std::uint64_t>(rec.id)));
    const double s = metrics::ssim(out, rec.sample.reference);
    const double p = metrics::psnr(out, rec.sample.reference);
    ssim_sum += s;
    psnr_sum += p;
    per_sample.push_back({{"id", rec.id}, {"ssim", s}, {"psnr_db", psnr_json(p)}});
    generated.push_back(out);
    truth.push_back(rec.sample.reference);
  }
  const double n = static_cast<double>(pool.size());
  json report = {{"config_hash", hash},
                 {"count", pool.size()},
                 {"ssim_mean", ssim_sum / n},
                 {"psnr_db_mean", psnr_json(psnr_sum / n)},
                 {"per_sample", per_sample}};
  report["frechet"] = pool.size() >= 2 ? json(metrics::toy_frechet(generated, truth)) : json();
  return report;
}

json cmd_eval(const std::string& ckpt_dir, const std::string& data_dir,
              const std::string& report_path) {
  model::Model m = model::Model::load(ckpt_dir);
  const data::Pool pool = data::load_pool(newest_round_dir(data_dir));
  check_pool_matches(pool, m.config());
  data::SampleFn sampler = [&m](const data::TripletSample& s, std::uint64_t seed) {
    return m.sample(s.person, s.garment, seed);
  };
  json report = eval_pool(pool, sampler, m.config_hash());
  if (!report_path.empty()) {
    std::ofstream f(report_path, std::ios::trunc);
    if (!f) throw IoError("cannot write eval report: " + report_path);
    f << report.dump(2) << "\n";
  }
  return report;
}

json cmd_ablate(const RunConfig& cfg, const std::string& data_dir, const std::string& axis,
                std::int64_t steps, const std::string& report_path) {
  if (axis != "mask" && axis != "pos_scheme" && axis != "policy") {
    throw ContractError("ablate: unknown axis \"" + axis + "\" (mask, pos_scheme, policy)");
  }
  const data::Pool pool = data::load_pool(newest_round_dir(data_dir));

  struct Variant {
    std::string tag;
    RunConfig cfg;
    model::Policy policy;
  };
  std::vector<Variant> variants;
  const model::Policy base_policy = model::policy_from_string(cfg.train.policy);
  if (axis == "mask") {
    Variant on{"mask_on", cfg, base_policy};
    Variant off{"mask_off", cfg, base_policy};
    on.cfg.model.mask_enabled = true;
    off.cfg.model.mask_enabled = false;
    variants = {on, off};
  } else if (axis == "pos_scheme") {
    Variant s1{"scheme_I", cfg, base_policy};
    Variant s2{"scheme_II", cfg, base_policy};
    s1.cfg.model.pos_scheme = rope::Scheme::I;
    s2.cfg.model.pos_scheme = rope::Scheme::II;
    variants = {s1, s2};
  } else {
    RunConfig with_lora = cfg;
    if (with_lora.model.lora_rank <= 0) with_lora.model.lora_rank = 4;
    Variant full{"conditional_only", with_lora, model::Policy::ConditionalOnly};
    Variant lora{"conditional_lora", with_lora, model::Policy::ConditionalLora};
    variants = {full, lora};
  }

  json rows = json::array();
  json flops;
  for (const Variant& v : variants) {
    model::Model m(v.cfg.model, v.cfg.rf, v.cfg.seed);
    TrainedResult res = train_in_memory(std::move(m), pool, v.cfg, steps, v.policy);
    const std::size_t eval_n = std::min<std::size_t>(8, pool.size());
    data::Pool subset(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(eval_n));
    data::SampleFn sampler = [&res](const data::TripletSample& s, std::uint64_t seed) {
      return res.model.sample(s.person, s.garment, seed);
    };
    json eval = eval_pool(subset, sampler, config_hash(v.cfg));
    rows.push_back({{"tag", v.tag},
                    {"final_loss_ma", res.final_ma},
                    {"initial_loss_ma", res.initial_ma},
                    {"ssim_mean", eval.at("ssim_mean")},
                    {"psnr_db_mean", eval.at("psnr_db_mean")},
                    {"trainable_params", res.model.trainable_scalar_count()},
                    {"frozen_audit_ok", res.frozen_audit_ok}});
    if (axis == "mask" && v.tag == "mask_on") {
      const attn::FlopCounter dense = res.model.attention_flops(attn::AttnImpl::Dense);
      const attn::FlopCounter skip = res.model.attention_flops(attn::AttnImpl::BlockSkip);
      const attn::Segmentation seg = v.cfg.model.segmentation();
      const std::int64_t dk = v.cfg.model.d / v.cfg.model.heads;
      flops = {{"dense", dense.as_map()},
               {"blockskip", skip.as_map()},
               {"saved_score_macs", dense.score - skip.score},
               {"saved_score_macs_per_head_per_block",
                (dense.score - skip.score) / (v.cfg.model.heads * v.cfg.model.blocks)},
               {"expected_saved_per_head_per_block", 2 * seg.reference * seg.garment * dk}};
    }
  }

  json report = {{"axis", axis}, {"config_hash", config_hash(cfg)}, {"rows", rows}};
  if (!flops.is_null()) report["flops"] = flops;
  if (!report_path.empty()) {
    std::ofstream f(report_path, std::ios::trunc);
    if (!f) throw IoError("cannot write ablate report: " + report_path);
    f << report.dump(2) << "\n";
  }
  return report;
}

}  // namespace trydit::run
