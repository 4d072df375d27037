// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "core/image.hpp"

namespace trydit::data {

struct GenConfig {
  std::int64_t person_h = 32, person_w = 24;
  std::int64_t garment_h = 16, garment_w = 16;
  void validate() const;
};

// Supervised unit: garment G, source person P, post-try-on reference R,
// plus the rectangle of P where the garment is worn. For generated
// samples R == composite(P, G, region) holds exactly.
struct TripletSample {
  img::Image garment, person, reference;
  img::Rect region;
  std::uint64_t seed = 0;
};

struct Scores {
  double garment_consistency = 0.0;
  double person_consistency = 0.0;
  double realism = 0.0;
  bool flagged = false;
};

enum class Provenance { Stage1, Regenerated, StyleExpanded };
std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

struct PoolRecord {
  TripletSample sample;
  Scores scores;
  std::int64_t round = 0;
  Provenance provenance = Provenance::Stage1;
  std::int64_t id = 0;
};

using Pool = std::vector<PoolRecord>;

// R = P outside the region; inside, G resampled to the region extent.
img::Image composite(const img::Image& person, const img::Image& garment, img::Rect region);

// Fully deterministic per seed: gradient background, torso/head/limb
// rectangles, a patterned garment, and a garment-sized region on the
// torso. All values land on the 1/255 grid so PPM round-trips exactly.
TripletSample gen_triplet(std::uint64_t seed, const GenConfig& cfg);

// Desk-scale stand-in for a try-off model: lift the worn garment back to
// its own canvas.
img::Image tryoff_oracle(const img::Image& reference, img::Rect region, std::int64_t garment_h,
                         std::int64_t garment_w);

Scores score_triplet(const TripletSample& s);

struct Thresholds {
  double garment = 0.99, person = 0.99, realism = 0.99;
};

struct FilterStats {
  std::int64_t kept = 0;
  std::int64_t rejected_garment = 0, rejected_person = 0, rejected_realism = 0;
};

Pool filter_pool(const Pool& pool, const Thresholds& th, FilterStats* stats = nullptr);

// Palette/pattern-shift transforms applied to P and G with R rebuilt by
// compositing, so the oracle identity survives by construction.
Pool style_expand(const Pool& pool, std::int64_t n, std::uint64_t seed);

using SampleFn = std::function<img::Image(const TripletSample&, std::uint64_t seed)>;

struct RoundReport {
  std::int64_t round = 0;
  std::int64_t input_count = 0, regenerated = 0, retained = 0, failed = 0;
  double retention_rate = 0.0;
  double mean_garment = 0.0, mean_person = 0.0, mean_realism = 0.0;
};

// Regenerate R' for every input record, rescore, filter, and merge the
// survivors (tagged Regenerated) into the pool. Sampling failures drop
// the item and the round continues.
Pool bootstrap_round(const Pool& pool, const SampleFn& sampler, const Thresholds& th,
                     std::uint64_t seed, std::int64_t round_index, RoundReport* report = nullptr);

// round_dir/{index.json, meta.json, NNNNN_{G,P,R}.ppm}
void save_pool(const std::string& round_dir, const Pool& pool, const std::string& config_hash,
               std::uint64_t seed, std::int64_t round_index);
Pool load_pool(const std::string& round_dir);

}  // namespace trydit::data
