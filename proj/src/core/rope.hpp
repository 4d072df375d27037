// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "core/tape.hpp"
#include "core/tensor.hpp"

namespace trydit::rope {

struct Pos {
  std::int32_t row = 0, col = 0;
  bool operator==(const Pos&) const = default;
};

// One (row, col) pair per token, in sequence order [text; noise; reference; garment].
using PositionGrid = std::vector<Pos>;

struct RopeConfig {
  std::int64_t head_dim = 16;  // must be divisible by 4: two axes, pair rotation
  double theta0 = 10000.0;
};

struct GridDims {
  std::int64_t rows = 0, cols = 0;
  std::int64_t count() const { return rows * cols; }
};

enum class Scheme { I, II };

// Scheme I: every segment gets its own disjoint coordinate block, images
// laid out left-to-right. Scheme II: noise and reference share one
// coordinate space; the garment is column-offset by the noise width.
// Text always sits on a reserved row band above all image rows.
PositionGrid build_positions(Scheme scheme, GridDims noise, GridDims ref, GridDims garment,
                             std::int64_t text_len);

// In-place rotation of one token vector of heads*head_dim scalars.
// direction=+1 forward, -1 the transpose (used by the backward pass).
void rotate_token(double* vec, std::int64_t heads, const RopeConfig& cfg, Pos pos, int direction);

// Plain (non-tape) application to a [L, heads*head_dim] matrix.
Tensor apply_rope_plain(const Tensor& qk, const PositionGrid& pos, std::int64_t heads,
                        const RopeConfig& cfg);

// Tape op; gradient is the inverse rotation.
ad::Var apply_rope(ad::Tape& tape, ad::Var qk, const PositionGrid& pos, std::int64_t heads,
                   const RopeConfig& cfg);

}  // namespace trydit::rope
