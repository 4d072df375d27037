// SPDX-License-Identifier: Apache-2.0
#include "core/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "core/metrics.hpp"
#include "core/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace trydit::data {

void GenConfig::validate() const {
  if (person_h < 16 || person_w < 16 || garment_h < 4 || garment_w < 4) {
    throw ContractError("generator dims too small");
  }
  if (garment_h > person_h - 8 || garment_w > person_w - 6) {
    throw ContractError("garment does not fit on the person canvas");
  }
}

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::Stage1: return "stage1";
    case Provenance::Regenerated: return "regenerated";
    default: return "style_expanded";
  }
}

Provenance provenance_from_string(const std::string& s) {
  if (s == "stage1") return Provenance::Stage1;
  if (s == "regenerated") return Provenance::Regenerated;
  if (s == "style_expanded") return Provenance::StyleExpanded;
  throw ContractError("unknown provenance tag: " + s);
}

img::Image composite(const img::Image& person, const img::Image& garment, img::Rect region) {
  if (!region.inside(person.h, person.w)) throw ContractError("composite: region out of bounds");
  img::Image out = person;
  const img::Image patch = img::resample_nn(garment, region.h, region.w);
  for (std::int64_t ch = 0; ch < out.c; ++ch)
    for (std::int64_t y = 0; y < region.h; ++y)
      for (std::int64_t x = 0; x < region.w; ++x)
        out.at(ch, region.y + y, region.x + x) = patch.at(ch, y, x);
  return out;
}

namespace {

struct Color {
  double r, g, b;
};

Color quantized(Color c) {
  return {img::quantize255(c.r), img::quantize255(c.g), img::quantize255(c.b)};
}

Color light_color(Rng& rng) {
  return quantized({rng.uniform(0.45, 0.95), rng.uniform(0.45, 0.95), rng.uniform(0.45, 0.95)});
}

Color dark_color(Rng& rng) {
  return quantized({rng.uniform(0.05, 0.50), rng.uniform(0.05, 0.50), rng.uniform(0.05, 0.50)});
}

void fill_rect(img::Image& im, img::Rect r, Color c) {
  for (std::int64_t y = r.y; y < r.y + r.h; ++y)
    for (std::int64_t x = r.x; x < r.x + r.w; ++x) {
      im.at(0, y, x) = c.r;
      im.at(1, y, x) = c.g;
      im.at(2, y, x) = c.b;
    }
}

img::Image draw_person(Rng& rng, const GenConfig& cfg, img::Rect& torso_out) {
  const std::int64_t H = cfg.person_h, W = cfg.person_w;
  img::Image p(3, H, W);
  const Color top = light_color(rng), bottom = light_color(rng);
  for (std::int64_t y = 0; y < H; ++y) {
    const double a = H > 1 ? static_cast<double>(y) / static_cast<double>(H - 1) : 0.0;
    const Color row = quantized({top.r + (bottom.r - top.r) * a, top.g + (bottom.g - top.g) * a,
                                 top.b + (bottom.b - top.b) * a});
    for (std::int64_t x = 0; x < W; ++x) {
      p.at(0, y, x) = row.r;
      p.at(1, y, x) = row.g;
      p.at(2, y, x) = row.b;
    }
  }

  // torso large enough to carry a garment-sized region anywhere on it
  const std::int64_t tw = std::min(W - 4, cfg.garment_w + 2 + rng.uniform_int(0, 2));
  const std::int64_t th = std::min(H - 8, cfg.garment_h + 2 + rng.uniform_int(0, 4));
  const std::int64_t tx = rng.uniform_int(2, W - tw - 2);
  const std::int64_t ty = rng.uniform_int(5, H - th - 3);
  const Color torso_c = light_color(rng);
  img::Rect torso{tx, ty, tw, th};
  fill_rect(p, torso, torso_c);

  const Color skin = light_color(rng);
  // head
  const std::int64_t head_w = 6;
  fill_rect(p, {tx + (tw - head_w) / 2, ty - 5, head_w, 4}, skin);
  // arms
  fill_rect(p, {tx - 2, ty, 2, std::min<std::int64_t>(10, th)}, skin);
  fill_rect(p, {tx + tw, ty, 2, std::min<std::int64_t>(10, th)}, skin);
  // legs
  const std::int64_t leg_h = std::min<std::int64_t>(2 + rng.uniform_int(0, 2), H - (ty + th));
  if (leg_h >= 2) {
    const Color leg = dark_color(rng);
    const std::int64_t leg_w = std::max<std::int64_t>(2, tw / 3);
    fill_rect(p, {tx + 1, ty + th, leg_w, leg_h}, leg);
    fill_rect(p, {tx + tw - 1 - leg_w, ty + th, leg_w, leg_h}, leg);
  }
  torso_out = torso;
  return p;
}

img::Image draw_garment(Rng& rng, const GenConfig& cfg) {
  const std::int64_t H = cfg.garment_h, W = cfg.garment_w;
  img::Image g(3, H, W);
  const Color ca = dark_color(rng);
  Color cb = dark_color(rng);
  // keep the two pattern colors visually distinct
  if (std::abs(ca.r - cb.r) + std::abs(ca.g - cb.g) + std::abs(ca.b - cb.b) < 0.25) {
    cb = quantized({1.0 - cb.r * 0.5, cb.g, 1.0 - cb.b * 0.5});
  }
  const std::int64_t kind = rng.uniform_int(0, 9);
  const std::int64_t period = rng.uniform_int(0, 1) == 0 ? 2 : 4;
  for (std::int64_t y = 0; y < H; ++y)
    for (std::int64_t x = 0; x < W; ++x) {
      Color c;
      if (kind == 0) {
        // solid body with a 2px border in the second color
        const bool border = y < 2 || x < 2 || y >= H - 2 || x >= W - 2;
        c = border ? cb : ca;
      } else if (kind <= 4) {
        c = ((x / period) % 2 == 0) ? ca : cb;  // vertical stripes
      } else if (kind <= 7) {
        c = ((y / period) % 2 == 0) ? ca : cb;  // horizontal stripes
      } else {
        c = (((x / period) + (y / period)) % 2 == 0) ? ca : cb;  // checks
      }
      g.at(0, y, x) = c.r;
      g.at(1, y, x) = c.g;
      g.at(2, y, x) = c.b;
    }
  return g;
}

}  // namespace

TripletSample gen_triplet(std::uint64_t seed, const GenConfig& cfg) {
  cfg.validate();
  Rng rng(mix_seed(seed, 0x7472697001ull));
  TripletSample s;
  s.seed = seed;
  img::Rect torso;
  s.person = draw_person(rng, cfg, torso);
  s.garment = draw_garment(rng, cfg);
  const std::int64_t rx = rng.uniform_int(torso.x, torso.x + torso.w - cfg.garment_w);
  const std::int64_t ry = rng.uniform_int(torso.y, torso.y + torso.h - cfg.garment_h);
  s.region = {rx, ry, cfg.garment_w, cfg.garment_h};
  s.reference = composite(s.person, s.garment, s.region);
  return s;
}

img::Image tryoff_oracle(const img::Image& reference, img::Rect region, std::int64_t garment_h,
                         std::int64_t garment_w) {
  if (!region.inside(reference.h, reference.w)) {
    throw ContractError("tryoff_oracle: region out of bounds");
  }
  if (garment_h <= 0 || garment_w <= 0) throw ContractError("tryoff_oracle: empty garment canvas");
  return img::resample_nn(img::crop(reference, region), garment_h, garment_w);
}

namespace {

// Fraction of pixels that differ from every 4-neighbour by more than
// delta. Zero on the synthetic scenes (all features are >= 2px wide and
// gradients are shallow); dense i.i.d. noise lights it up.
double isolated_pixel_fraction(const img::Image& im, double delta) {
  std::int64_t hits = 0;
  for (std::int64_t ch = 0; ch < im.c; ++ch)
    for (std::int64_t y = 0; y < im.h; ++y)
      for (std::int64_t x = 0; x < im.w; ++x) {
        const double v = im.at(ch, y, x);
        bool isolated = true;
        if (x > 0 && std::abs(v - im.at(ch, y, x - 1)) <= delta) isolated = false;
        if (isolated && x + 1 < im.w && std::abs(v - im.at(ch, y, x + 1)) <= delta) isolated = false;
        if (isolated && y > 0 && std::abs(v - im.at(ch, y - 1, x)) <= delta) isolated = false;
        if (isolated && y + 1 < im.h && std::abs(v - im.at(ch, y + 1, x)) <= delta) isolated = false;
        if (isolated) ++hits;
      }
  return static_cast<double>(hits) / static_cast<double>(im.numel());
}

}  // namespace

Scores score_triplet(const TripletSample& s) {
  Scores sc;
  const img::Image& R = s.reference;
  for (double v : R.px) {
    if (std::isnan(v)) {
      sc.flagged = true;
      sc.realism = 0.0;
      break;
    }
  }
  const img::Image worn = img::crop(R, s.region);
  const img::Image want = img::resample_nn(s.garment, s.region.h, s.region.w);
  sc.garment_consistency = metrics::ssim(worn, want);
  sc.person_consistency = metrics::ssim_excluding(R, s.person, s.region);
  if (!sc.flagged) {
    std::int64_t bad = 0;
    for (double v : R.px) {
      if (!std::isfinite(v) || v < -1e-9 || v > 1.0 + 1e-9) ++bad;
    }
    const double frac_bad = static_cast<double>(bad) / static_cast<double>(R.numel());
    const double hf = 4.0 * isolated_pixel_fraction(R, 0.06);
    const double penalty = std::min(1.0, std::max(0.0, frac_bad + hf));
    sc.realism = 1.0 - penalty;
  }
  return sc;
}

Pool filter_pool(const Pool& pool, const Thresholds& th, FilterStats* stats) {
  Pool out;
  FilterStats st;
  for (const PoolRecord& r : pool) {
    const bool g_ok = r.scores.garment_consistency >= th.garment;
    const bool p_ok = r.scores.person_consistency >= th.person;
    const bool r_ok = r.scores.realism >= th.realism;
    if (g_ok && p_ok && r_ok) {
      out.push_back(r);
      ++st.kept;
    } else {
      if (!g_ok) ++st.rejected_garment;
      if (!p_ok) ++st.rejected_person;
      if (!r_ok) ++st.rejected_realism;
    }
  }
  if (stats) *stats = st;
  return out;
}

namespace {

img::Image restyle(const img::Image& src, const int perm[3], const double a[3], const double b[3]) {
  img::Image out = src;
  for (std::int64_t ch = 0; ch < 3; ++ch)
    for (std::int64_t y = 0; y < src.h; ++y)
      for (std::int64_t x = 0; x < src.w; ++x)
        out.at(ch, y, x) = img::quantize255(a[ch] * src.at(perm[ch], y, x) + b[ch]);
  return out;
}

}  // namespace

Pool style_expand(const Pool& pool, std::int64_t n, std::uint64_t seed) {
  Pool out = pool;
  if (pool.empty() || n <= 0) return out;
  std::int64_t next_id = 0;
  for (const PoolRecord& r : pool) next_id = std::max(next_id, r.id + 1);
  static const int kPerms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
  for (std::int64_t i = 0; i < n; ++i) {
    Rng rng(mix_seed(seed, 0x7374796cull, static_cast<std::uint64_t>(i)));
    const PoolRecord& src = pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))];
    const int* perm = kPerms[rng.uniform_int(0, 5)];
    double a[3], b[3];
    for (int ch = 0; ch < 3; ++ch) {
      a[ch] = rng.uniform(0.7, 1.0);
      b[ch] = rng.uniform(0.0, 1.0 - a[ch]);
    }
    PoolRecord rec;
    rec.sample.seed = mix_seed(src.sample.seed, static_cast<std::uint64_t>(i));
    rec.sample.person = restyle(src.sample.person, perm, a, b);
    rec.sample.garment = restyle(src.sample.garment, perm, a, b);
    rec.sample.region = src.sample.region;
    rec.sample.reference = composite(rec.sample.person, rec.sample.garment, rec.sample.region);
    rec.scores = score_triplet(rec.sample);
    rec.round = src.round;
    rec.provenance = Provenance::StyleExpanded;
    rec.id = next_id++;
    out.push_back(std::move(rec));
  }
  return out;
}

Pool bootstrap_round(const Pool& pool, const SampleFn& sampler, const Thresholds& th,
                     std::uint64_t seed, std::int64_t round_index, RoundReport* report) {
  Pool out = pool;
  RoundReport rep;
  rep.round = round_index;
  rep.input_count = static_cast<std::int64_t>(pool.size());
  std::int64_t next_id = 0;
  for (const PoolRecord& r : pool) next_id = std::max(next_id, r.id + 1);
  double sum_g = 0, sum_p = 0, sum_r = 0;
  for (const PoolRecord& r : pool) {
    img::Image regen;
    try {
      regen = sampler(r.sample, mix_seed(seed, static_cast<std::uint64_t>(r.id)));
    } catch (const std::exception&) {
      ++rep.failed;
      continue;
    }
    ++rep.regenerated;
    PoolRecord rec;
    rec.sample = r.sample;
    rec.sample.reference = std::move(regen);
    rec.scores = score_triplet(rec.sample);
    sum_g += rec.scores.garment_consistency;
    sum_p += rec.scores.person_consistency;
    sum_r += rec.scores.realism;
    const bool keep = rec.scores.garment_consistency >= th.garment &&
                      rec.scores.person_consistency >= th.person && rec.scores.realism >= th.realism;
    if (!keep) continue;
    rec.round = round_index;
    rec.provenance = Provenance::Regenerated;
    rec.id = next_id++;
    out.push_back(std::move(rec));
    ++rep.retained;
  }
  if (rep.regenerated > 0) {
    rep.mean_garment = sum_g / static_cast<double>(rep.regenerated);
    rep.mean_person = sum_p / static_cast<double>(rep.regenerated);
    rep.mean_realism = sum_r / static_cast<double>(rep.regenerated);
  }
  rep.retention_rate =
      rep.input_count > 0 ? static_cast<double>(rep.retained) / static_cast<double>(rep.input_count) : 0.0;
  if (report) *report = rep;
  return out;
}

namespace {

std::string sample_name(std::int64_t id, const char* kind) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05lld_%s.ppm", static_cast<long long>(id), kind);
  return buf;
}

}  // namespace

void save_pool(const std::string& round_dir, const Pool& pool, const std::string& config_hash,
               std::uint64_t seed, std::int64_t round_index) {
  fs::create_directories(round_dir);
  json index = json::array();
  for (const PoolRecord& r : pool) {
    img::write_ppm(round_dir + "/" + sample_name(r.id, "G"), r.sample.garment);
    img::write_ppm(round_dir + "/" + sample_name(r.id, "P"), r.sample.person);
    img::write_ppm(round_dir + "/" + sample_name(r.id, "R"), r.sample.reference);
    index.push_back({{"id", r.id},
                     {"seed", r.sample.seed},
                     {"region", {r.sample.region.x, r.sample.region.y, r.sample.region.w, r.sample.region.h}},
                     {"scores",
                      {{"g", r.scores.garment_consistency},
                       {"p", r.scores.person_consistency},
                       {"r", r.scores.realism}}},
                     {"provenance", to_string(r.provenance)}});
  }
  {
    std::ofstream f(round_dir + "/index.json", std::ios::trunc);
    if (!f) throw IoError("cannot write " + round_dir + "/index.json");
    f << index.dump(2) << "\n";
  }
  {
    json meta = {{"config_hash", config_hash},
                 {"seed", seed},
                 {"round", round_index},
                 {"count", pool.size()}};
    std::ofstream f(round_dir + "/meta.json", std::ios::trunc);
    if (!f) throw IoError("cannot write " + round_dir + "/meta.json");
    f << meta.dump(2) << "\n";
  }
}

Pool load_pool(const std::string& round_dir) {
  std::ifstream f(round_dir + "/index.json");
  if (!f) throw IoError("cannot read " + round_dir + "/index.json");
  json index = json::parse(f);
  if (!index.is_array()) throw IoError("index.json is not an array: " + round_dir);
  Pool pool;
  for (const json& e : index) {
    PoolRecord r;
    r.id = e.at("id").get<std::int64_t>();
    r.sample.seed = e.at("seed").get<std::uint64_t>();
    const auto& reg = e.at("region");
    r.sample.region = {reg.at(0).get<std::int64_t>(), reg.at(1).get<std::int64_t>(),
                       reg.at(2).get<std::int64_t>(), reg.at(3).get<std::int64_t>()};
    r.scores.garment_consistency = e.at("scores").at("g").get<double>();
    r.scores.person_consistency = e.at("scores").at("p").get<double>();
    r.scores.realism = e.at("scores").at("r").get<double>();
    r.provenance = provenance_from_string(e.at("provenance").get<std::string>());
    r.sample.garment = img::read_ppm(round_dir + "/" + sample_name(r.id, "G"));
    r.sample.person = img::read_ppm(round_dir + "/" + sample_name(r.id, "P"));
    r.sample.reference = img::read_ppm(round_dir + "/" + sample_name(r.id, "R"));
    pool.push_back(std::move(r));
  }
  return pool;
}

}  // namespace trydit::data
