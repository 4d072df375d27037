// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "core/data.hpp"
#include "core/model.hpp"

namespace trydit::run {

struct TrainSettings {
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::int64_t batch_size = 4;
  std::string policy = "conditional_only";
  std::int64_t loss_ma_window = 50;
};

struct RunConfig {
  model::ModelConfig model;
  flow::RfConfig rf;
  TrainSettings train;
  data::GenConfig data;
  data::Thresholds thresholds;
  std::uint64_t seed = 1234;
};

// Strict parse: unknown keys anywhere are an error. Missing keys fall
// back to the desk-scale defaults above.
RunConfig parse_run_config(const std::string& json_text);
RunConfig default_run_config();
nlohmann::json run_config_to_json(const RunConfig& cfg);
std::string config_hash(const RunConfig& cfg);

// Worker cap honored by any internal parallelism (the current
// implementation is single-threaded; the cap is recorded and respected).
void set_max_threads(int n);
int max_threads();

// ---- command implementations; the C API and CLI are wrappers ----

// Writes DIR/round_0 with `count` scored stage-1 triplets.
void cmd_gen_data(const RunConfig& cfg, std::uint64_t seed, std::int64_t count,
                  const std::string& out_dir, bool force);

struct TrainOutcome {
  std::int64_t steps = 0;
  double initial_ma = 0.0, final_ma = 0.0;
  bool frozen_audit_ok = true;
  std::int64_t trainable_params = 0;
  std::string checkpoint_dir;
};

// Trains for `steps` on the newest round under data_dir and writes the
// checkpoint, a loss-curve CSV and a summary JSON next to it.
TrainOutcome cmd_train(const RunConfig& cfg, const std::string& data_dir, std::int64_t steps,
                       const std::string& out_ckpt, const std::string& init_from,
                       const std::string& policy_override);

void cmd_sample(const std::string& ckpt_dir, const std::string& person_ppm,
                const std::string& garment_ppm, std::int64_t steps, std::uint64_t seed,
                const std::string& out_ppm);

// Scores model samples against every record in the pool. Returns the
// report that was also written to report_path (when non-empty).
nlohmann::json cmd_eval(const std::string& ckpt_dir, const std::string& data_dir,
                        const std::string& report_path);

// Paired runs differing only on one axis: "mask", "pos_scheme", "policy".
nlohmann::json cmd_ablate(const RunConfig& cfg, const std::string& data_dir, const std::string& axis,
                          std::int64_t steps, const std::string& report_path);

// Shared helper: evaluation loop against an arbitrary sampler (the
// oracle-replay tests inject a fake one here).
nlohmann::json eval_pool(const data::Pool& pool, const data::SampleFn& sampler,
                         const std::string& hash);

}  // namespace trydit::run
