// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <utility>

#include "core/rng.hpp"
#include "core/tensor.hpp"

namespace trydit::img {

// (channels, height, width) scalar image. Values are in [0,1] for loaded
// images; decoded velocity fields are unclamped.
struct Image {
  std::int64_t c = 0, h = 0, w = 0;
  std::vector<double> px;  // row-major (c, y, x)

  Image() = default;
  Image(std::int64_t c_, std::int64_t h_, std::int64_t w_)
      : c(c_), h(h_), w(w_), px(static_cast<std::size_t>(c_ * h_ * w_), 0.0) {}

  double& at(std::int64_t ch, std::int64_t y, std::int64_t x) {
    return px[static_cast<std::size_t>((ch * h + y) * w + x)];
  }
  double at(std::int64_t ch, std::int64_t y, std::int64_t x) const {
    return px[static_cast<std::size_t>((ch * h + y) * w + x)];
  }
  std::int64_t numel() const { return c * h * w; }
  bool all_finite() const;

  Tensor to_tensor() const;                 // shape {c,h,w}
  static Image from_tensor(const Tensor&);  // rank-3 required
};

// PPM P6, maxval 255. Round-trips exactly for values on the 1/255 grid.
void write_ppm(const std::string& path, const Image& img);  // 3 channels; clamps to [0,1]
Image read_ppm(const std::string& path);

// Nearest representable value after a P6 write/read cycle.
inline double quantize255(double v) {
  if (v < 0.0) v = 0.0;
  if (v > 1.0) v = 1.0;
  return std::int64_t(v * 255.0 + 0.5) / 255.0;
}

// Pixel rectangle: x is the left column, y the top row.
struct Rect {
  std::int64_t x = 0, y = 0, w = 0, h = 0;
  bool operator==(const Rect&) const = default;
  bool inside(std::int64_t img_h, std::int64_t img_w) const {
    return x >= 0 && y >= 0 && w > 0 && h > 0 && x + w <= img_w && y + h <= img_h;
  }
  bool contains(std::int64_t yy, std::int64_t xx) const {
    return yy >= y && yy < y + h && xx >= x && xx < x + w;
  }
};

Image crop(const Image& img, Rect r);

// Nearest-neighbour resample; src index = floor(i * src_extent / dst_extent).
Image resample_nn(const Image& src, std::int64_t out_h, std::int64_t out_w);

struct PatchGrid {
  std::int64_t rows = 0, cols = 0;
  std::int64_t count() const { return rows * cols; }
};

PatchGrid patch_grid(std::int64_t h, std::int64_t w, std::int64_t patch);

// Rows are patches in row-major grid order; each row is the row-major
// (y, x, channel) flattening of its P x P x C block.
Tensor patchify(const Image& img, std::int64_t patch);
Image unpatchify(const Tensor& patches, PatchGrid grid, std::int64_t patch, std::int64_t channels);

// Learnable linear patch embedding. weight is (P^2*C) x d so that
// tokens = patches * weight + bias.
struct PatchEmbedder {
  std::int64_t patch = 0, channels = 0, dim = 0;
  Tensor weight;  // [patch^2 * channels, dim]
  Tensor bias;    // [dim]

  static PatchEmbedder init(std::int64_t patch, std::int64_t channels, std::int64_t dim, Rng& rng);
};

Tensor embed_patches(const Tensor& patches, const PatchEmbedder& emb);

// Linear decode back to pixel space; output is not clamped.
Image unembed_to_image(const Tensor& tokens, PatchGrid grid, std::int64_t patch, std::int64_t channels,
                       const Tensor& weight_out, const Tensor& bias_out);

}  // namespace trydit::img
