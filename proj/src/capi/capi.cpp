// SPDX-License-Identifier: Apache-2.0
#include "trydit/trydit.h"

#include <cstring>
#include <string>

#include "core/errors.hpp"
#include "core/rng.hpp"
#include "core/runner.hpp"

namespace {

thread_local std::string g_last_error;

const char* kVersion = "0.1.0";

trydit::run::RunConfig config_from(const char* config_json) {
  if (config_json == nullptr || std::strlen(config_json) == 0) {
    return trydit::run::default_run_config();
  }
  return trydit::run::parse_run_config(config_json);
}

template <typename F>
trydit_status wrap(F&& f) noexcept {
  try {
    f();
    g_last_error.clear();
    return TRYDIT_OK;
  } catch (const trydit::DimensionError& e) {
    g_last_error = e.what();
    return TRYDIT_ERR_DIMENSION;
  } catch (const trydit::ContractError& e) {
    g_last_error = e.what();
    return TRYDIT_ERR_CONTRACT;
  } catch (const trydit::IoError& e) {
    g_last_error = e.what();
    return TRYDIT_ERR_IO;
  } catch (const trydit::NonFiniteError& e) {
    g_last_error = e.what();
    return TRYDIT_ERR_NONFINITE;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return TRYDIT_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return TRYDIT_ERR_INTERNAL;
  }
}

trydit_status require(bool ok, const char* msg) {
  if (ok) return TRYDIT_OK;
  g_last_error = msg;
  return TRYDIT_ERR_INVALID_ARGUMENT;
}

}  // namespace

struct trydit_model {
  trydit::model::Model impl;
};

struct trydit_pool {
  trydit::data::Pool impl;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::int64_t round = 0;
};

extern "C" {

const char* trydit_version(void) { return kVersion; }

const char* trydit_last_error(void) { return g_last_error.c_str(); }

void trydit_set_max_threads(int n) { trydit::run::set_max_threads(n); }

trydit_status trydit_gen_data(const char* config_json, uint64_t seed, int64_t count,
                              const char* out_dir, int force) {
  if (auto st = require(out_dir != nullptr, "out_dir is null")) return st;
  return wrap([&] {
    trydit::run::cmd_gen_data(config_from(config_json), seed, count, out_dir, force != 0);
  });
}

trydit_status trydit_train(const char* config_json, const char* data_dir, int64_t steps,
                           const char* out_ckpt, const char* init_from, const char* policy) {
  if (auto st = require(data_dir && out_ckpt, "data_dir/out_ckpt is null")) return st;
  return wrap([&] {
    trydit::run::cmd_train(config_from(config_json), data_dir, steps, out_ckpt,
                           init_from ? init_from : "", policy ? policy : "");
  });
}

trydit_status trydit_sample(const char* ckpt_dir, const char* person_ppm, const char* garment_ppm,
                            int64_t steps, uint64_t seed, const char* out_ppm) {
  if (auto st = require(ckpt_dir && person_ppm && garment_ppm && out_ppm, "null path argument")) {
    return st;
  }
  return wrap([&] { trydit::run::cmd_sample(ckpt_dir, person_ppm, garment_ppm, steps, seed, out_ppm); });
}

trydit_status trydit_eval(const char* ckpt_dir, const char* data_dir, const char* report_json_path) {
  if (auto st = require(ckpt_dir && data_dir && report_json_path, "null path argument")) return st;
  return wrap([&] { trydit::run::cmd_eval(ckpt_dir, data_dir, report_json_path); });
}

trydit_status trydit_ablate(const char* config_json, const char* data_dir, const char* axis,
                            int64_t steps, const char* report_json_path) {
  if (auto st = require(data_dir && axis && report_json_path, "null argument")) return st;
  return wrap([&] {
    trydit::run::cmd_ablate(config_from(config_json), data_dir, axis, steps, report_json_path);
  });
}

trydit_status trydit_model_create(const char* config_json, uint64_t seed, trydit_model** out) {
  if (auto st = require(out != nullptr, "out is null")) return st;
  *out = nullptr;
  return wrap([&] {
    const trydit::run::RunConfig cfg = config_from(config_json);
    *out = new trydit_model{trydit::model::Model(cfg.model, cfg.rf, seed)};
  });
}

trydit_status trydit_model_load(const char* ckpt_dir, trydit_model** out) {
  if (auto st = require(ckpt_dir && out, "null argument")) return st;
  *out = nullptr;
  return wrap([&] { *out = new trydit_model{trydit::model::Model::load(ckpt_dir)}; });
}

trydit_status trydit_model_save(const trydit_model* model, const char* ckpt_dir) {
  if (auto st = require(model && ckpt_dir, "null argument")) return st;
  return wrap([&] { model->impl.save(ckpt_dir); });
}

trydit_status trydit_model_sample_file(const trydit_model* model, const char* person_ppm,
                                       const char* garment_ppm, int64_t steps, uint64_t seed,
                                       const char* out_ppm) {
  if (auto st = require(model && person_ppm && garment_ppm && out_ppm, "null argument")) return st;
  return wrap([&] {
    const trydit::img::Image person = trydit::img::read_ppm(person_ppm);
    const trydit::img::Image garment = trydit::img::read_ppm(garment_ppm);
    const trydit::img::Image sampled = model->impl.sample(person, garment, seed, steps);
    trydit::img::write_ppm(out_ppm, sampled);
  });
}

int64_t trydit_model_step(const trydit_model* model) { return model ? model->impl.step() : -1; }

void trydit_model_free(trydit_model* model) { delete model; }

trydit_status trydit_pool_generate(const char* config_json, uint64_t seed, int64_t count,
                                   trydit_pool** out) {
  if (auto st = require(out != nullptr && count >= 0, "bad arguments")) return st;
  *out = nullptr;
  return wrap([&] {
    const trydit::run::RunConfig cfg = config_from(config_json);
    auto pool = new trydit_pool{};
    pool->config_hash = trydit::run::config_hash(cfg);
    pool->seed = seed;
    for (int64_t i = 0; i < count; ++i) {
      trydit::data::PoolRecord rec;
      rec.sample = trydit::data::gen_triplet(trydit::mix_seed(seed, static_cast<std::uint64_t>(i)),
                                             cfg.data);
      rec.scores = trydit::data::score_triplet(rec.sample);
      rec.id = i;
      pool->impl.push_back(std::move(rec));
    }
    *out = pool;
  });
}

trydit_status trydit_pool_load(const char* round_dir, trydit_pool** out) {
  if (auto st = require(round_dir && out, "null argument")) return st;
  *out = nullptr;
  return wrap([&] {
    auto pool = new trydit_pool{};
    pool->impl = trydit::data::load_pool(round_dir);
    *out = pool;
  });
}

trydit_status trydit_pool_save(const trydit_pool* pool, const char* round_dir) {
  if (auto st = require(pool && round_dir, "null argument")) return st;
  return wrap([&] {
    trydit::data::save_pool(round_dir, pool->impl, pool->config_hash, pool->seed, pool->round);
  });
}

int64_t trydit_pool_size(const trydit_pool* pool) {
  return pool ? static_cast<int64_t>(pool->impl.size()) : -1;
}

trydit_status trydit_pool_scores(const trydit_pool* pool, int64_t index, double* garment_consistency,
                                 double* person_consistency, double* realism) {
  if (auto st = require(pool != nullptr, "pool is null")) return st;
  if (auto st = require(index >= 0 && index < static_cast<int64_t>(pool->impl.size()),
                        "pool index out of range")) {
    return st;
  }
  const trydit::data::Scores& s = pool->impl[static_cast<std::size_t>(index)].scores;
  if (garment_consistency) *garment_consistency = s.garment_consistency;
  if (person_consistency) *person_consistency = s.person_consistency;
  if (realism) *realism = s.realism;
  return TRYDIT_OK;
}

void trydit_pool_free(trydit_pool* pool) { delete pool; }

}  // extern "C"
