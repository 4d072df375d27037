// SPDX-License-Identifier: Apache-2.0
#include "core/rope.hpp"

#include <algorithm>
#include <cmath>

namespace trydit::rope {

PositionGrid build_positions(Scheme scheme, GridDims noise, GridDims ref, GridDims garment,
                             std::int64_t text_len) {
  if (noise.rows < 0 || noise.cols < 0 || ref.rows < 0 || ref.cols < 0 || garment.rows < 0 ||
      garment.cols < 0 || text_len < 0) {
    throw ContractError("build_positions: negative extent");
  }
  if (scheme == Scheme::II && (noise.rows != ref.rows || noise.cols != ref.cols)) {
    throw ContractError("scheme II requires matching noise and reference grids");
  }
  PositionGrid out;
  out.reserve(static_cast<std::size_t>(text_len + noise.count() + ref.count() + garment.count()));

  const std::int64_t max_rows = std::max({noise.rows, ref.rows, garment.rows});
  // text band: one reserved row above every image row
  for (std::int64_t i = 0; i < text_len; ++i) {
    out.push_back({static_cast<std::int32_t>(max_rows), static_cast<std::int32_t>(i)});
  }

  auto push_grid = [&out](GridDims g, std::int64_t col_off) {
    for (std::int64_t r = 0; r < g.rows; ++r)
      for (std::int64_t c = 0; c < g.cols; ++c)
        out.push_back({static_cast<std::int32_t>(r), static_cast<std::int32_t>(col_off + c)});
  };

  if (scheme == Scheme::I) {
    push_grid(noise, 0);
    push_grid(ref, noise.cols);
    push_grid(garment, noise.cols + ref.cols);
  } else {
    push_grid(noise, 0);
    push_grid(ref, 0);  // shares the noise coordinate space
    push_grid(garment, noise.cols);
  }
  return out;
}

namespace {

void check_cfg(const RopeConfig& cfg) {
  if (cfg.head_dim <= 0 || cfg.head_dim % 4 != 0) {
    throw ContractError("rope head_dim must be positive and divisible by 4, got " +
                        std::to_string(cfg.head_dim));
  }
}

}  // namespace

void rotate_token(double* vec, std::int64_t heads, const RopeConfig& cfg, Pos pos, int direction) {
  const std::int64_t dk = cfg.head_dim;
  const std::int64_t half = dk / 2;
  const std::int64_t pairs = half / 2;
  for (std::int64_t h = 0; h < heads; ++h) {
    double* base = vec + h * dk;
    for (std::int64_t j = 0; j < pairs; ++j) {
      const double freq = std::pow(cfg.theta0, -2.0 * static_cast<double>(j) / static_cast<double>(half));
      // row axis: first half of the head
      {
        const double ang = direction * static_cast<double>(pos.row) * freq;
        const double ca = std::cos(ang), sa = std::sin(ang);
        const double a = base[2 * j], b = base[2 * j + 1];
        base[2 * j] = a * ca - b * sa;
        base[2 * j + 1] = a * sa + b * ca;
      }
      // column axis: second half
      {
        const double ang = direction * static_cast<double>(pos.col) * freq;
        const double ca = std::cos(ang), sa = std::sin(ang);
        const double a = base[half + 2 * j], b = base[half + 2 * j + 1];
        base[half + 2 * j] = a * ca - b * sa;
        base[half + 2 * j + 1] = a * sa + b * ca;
      }
    }
  }
}

static void check_tokens(const Tensor& qk, const PositionGrid& pos, std::int64_t heads,
                         const RopeConfig& cfg) {
  check_cfg(cfg);
  if (qk.rank() != 2) throw DimensionError("rope input must be rank-2, got " + shape_str(qk.shape));
  if (qk.shape[1] != heads * cfg.head_dim) {
    throw DimensionError("rope width " + std::to_string(qk.shape[1]) + " != heads*head_dim " +
                         std::to_string(heads * cfg.head_dim));
  }
  if (qk.shape[0] != static_cast<std::int64_t>(pos.size())) {
    throw DimensionError("rope: " + std::to_string(qk.shape[0]) + " tokens vs " +
                         std::to_string(pos.size()) + " positions");
  }
}

Tensor apply_rope_plain(const Tensor& qk, const PositionGrid& pos, std::int64_t heads,
                        const RopeConfig& cfg) {
  check_tokens(qk, pos, heads, cfg);
  Tensor out = qk;
  const std::int64_t width = qk.shape[1];
  for (std::int64_t i = 0; i < qk.shape[0]; ++i) {
    rotate_token(out.data.data() + i * width, heads, cfg, pos[static_cast<std::size_t>(i)], +1);
  }
  return out;
}

ad::Var apply_rope(ad::Tape& tape, ad::Var qk, const PositionGrid& pos, std::int64_t heads,
                   const RopeConfig& cfg) {
  Tensor out = apply_rope_plain(tape.val(qk), pos, heads, cfg);
  PositionGrid pos_copy = pos;
  return tape.record(std::move(out), {qk},
                     [qk, pos_copy, heads, cfg](ad::Tape& t, const Tensor& g, ad::Var) {
    Tensor ga = g;
    const std::int64_t width = g.shape[1];
    for (std::int64_t i = 0; i < g.shape[0]; ++i) {
      rotate_token(ga.data.data() + i * width, heads, cfg, pos_copy[static_cast<std::size_t>(i)], -1);
    }
    t.accum_grad(qk, ga);
  });
}

}  // namespace trydit::rope
