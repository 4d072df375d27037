// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Links only the public C API.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "trydit/trydit.h"

namespace {

std::string read_file_or_die(const std::string& path) {
  std::ifstream f(path);
  if (!f) {
    std::fprintf(stderr, "{\"error\":\"cannot read config file: %s\",\"code\":\"io\"}\n", path.c_str());
    std::exit(4);
  }
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

const char* status_name(trydit_status st) {
  switch (st) {
    case TRYDIT_OK: return "ok";
    case TRYDIT_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case TRYDIT_ERR_DIMENSION: return "dimension";
    case TRYDIT_ERR_CONTRACT: return "contract";
    case TRYDIT_ERR_IO: return "io";
    case TRYDIT_ERR_NONFINITE: return "nonfinite";
    default: return "internal";
  }
}

std::string json_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') {
      out.push_back('\\');
      out.push_back(c);
    } else if (c == '\n') {
      out += "\\n";
    } else {
      out.push_back(c);
    }
  }
  return out;
}

int finish(trydit_status st) {
  if (st == TRYDIT_OK) return 0;
  std::fprintf(stderr, "{\"error\":\"%s\",\"code\":\"%s\"}\n", json_escape(trydit_last_error()).c_str(),
               status_name(st));
  return static_cast<int>(st);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale multi-conditional diffusion-transformer try-on testbed"};
  app.require_subcommand(1);

  int threads = 0;
  app.add_option("--threads", threads, "cap internal worker threads (0 = default)");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a scored synthetic triplet pool");
  std::uint64_t gen_seed = 1234;
  std::int64_t gen_count = 64;
  std::string gen_out, gen_config;
  bool gen_force = false;
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--count", gen_count, "number of triplets")->required();
  gen->add_option("--out", gen_out, "output dataset directory")->required();
  gen->add_option("--config", gen_config, "run-config JSON file (defaults apply when omitted)");
  gen->add_flag("--force", gen_force, "overwrite an existing non-empty round_0");

  // train
  auto* train = app.add_subcommand("train", "train a model on a dataset");
  std::string train_config, train_data, train_out, train_init, train_policy;
  std::int64_t train_steps = 0;
  train->add_option("--config", train_config, "run-config JSON file")->required();
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_option("--steps", train_steps, "optimizer steps")->required();
  train->add_option("--out", train_out, "checkpoint output directory")->required();
  train->add_option("--init-from", train_init, "checkpoint to transfer weights from");
  train->add_option("--policy", train_policy, "full | conditional_only | conditional_lora");

  // sample
  auto* sample = app.add_subcommand("sample", "generate one try-on image");
  std::string smp_ckpt, smp_person, smp_garment, smp_out;
  std::int64_t smp_steps = 0;
  std::uint64_t smp_seed = 0;
  sample->add_option("--ckpt", smp_ckpt, "checkpoint directory")->required();
  sample->add_option("--person", smp_person, "person image (PPM P6)")->required();
  sample->add_option("--garment", smp_garment, "garment image (PPM P6)")->required();
  sample->add_option("--steps", smp_steps, "sampler steps (0 = checkpoint default)");
  sample->add_option("--seed", smp_seed, "noise seed");
  sample->add_option("--out", smp_out, "output PPM path")->required();

  // ablate
  auto* ablate = app.add_subcommand("ablate", "paired runs differing on one axis");
  std::string abl_axis, abl_config, abl_data, abl_out;
  std::int64_t abl_steps = 200;
  ablate->add_option("--axis", abl_axis, "mask | pos_scheme | policy")->required();
  ablate->add_option("--config", abl_config, "run-config JSON file")->required();
  ablate->add_option("--data", abl_data, "dataset directory")->required();
  ablate->add_option("--steps", abl_steps, "training steps per side");
  ablate->add_option("--out", abl_out, "report JSON path")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "score generated samples against a dataset");
  std::string ev_ckpt, ev_data, ev_report;
  eval->add_option("--ckpt", ev_ckpt, "checkpoint directory")->required();
  eval->add_option("--data", ev_data, "dataset directory")->required();
  eval->add_option("--report", ev_report, "report JSON path")->required();

  CLI11_PARSE(app, argc, argv);

  if (threads > 0) trydit_set_max_threads(threads);

  if (gen->parsed()) {
    const std::string cfg = gen_config.empty() ? "" : read_file_or_die(gen_config);
    return finish(trydit_gen_data(cfg.empty() ? nullptr : cfg.c_str(), gen_seed, gen_count,
                                  gen_out.c_str(), gen_force ? 1 : 0));
  }
  if (train->parsed()) {
    const std::string cfg = read_file_or_die(train_config);
    return finish(trydit_train(cfg.c_str(), train_data.c_str(), train_steps, train_out.c_str(),
                               train_init.empty() ? nullptr : train_init.c_str(),
                               train_policy.empty() ? nullptr : train_policy.c_str()));
  }
  if (sample->parsed()) {
    return finish(trydit_sample(smp_ckpt.c_str(), smp_person.c_str(), smp_garment.c_str(), smp_steps,
                                smp_seed, smp_out.c_str()));
  }
  if (ablate->parsed()) {
    const std::string cfg = read_file_or_die(abl_config);
    return finish(trydit_ablate(cfg.c_str(), abl_data.c_str(), abl_axis.c_str(), abl_steps,
                                abl_out.c_str()));
  }
  if (eval->parsed()) {
    return finish(trydit_eval(ev_ckpt.c_str(), ev_data.c_str(), ev_report.c_str()));
  }
  return 1;
}
