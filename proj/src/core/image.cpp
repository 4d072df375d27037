// SPDX-License-Identifier: Apache-2.0
#include "core/image.hpp"

#include <cmath>
#include <fstream>

namespace trydit::img {

bool Image::all_finite() const {
  for (double v : px) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Image::to_tensor() const { return Tensor({c, h, w}, px); }

Image Image::from_tensor(const Tensor& t) {
  if (t.rank() != 3) throw DimensionError("image tensor must be rank-3, got " + shape_str(t.shape));
  Image out(t.shape[0], t.shape[1], t.shape[2]);
  out.px = t.data;
  return out;
}

void write_ppm(const std::string& path, const Image& img) {
  if (img.c != 3) throw DimensionError("ppm output needs 3 channels, got " + std::to_string(img.c));
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for write: " + path);
  f << "P6\n" << img.w << " " << img.h << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(img.w * 3));
  for (std::int64_t y = 0; y < img.h; ++y) {
    for (std::int64_t x = 0; x < img.w; ++x) {
      for (std::int64_t ch = 0; ch < 3; ++ch) {
        double v = img.at(ch, y, x);
        if (!(v >= 0.0)) v = 0.0;  // also catches NaN
        if (v > 1.0) v = 1.0;
        row[static_cast<std::size_t>(x * 3 + ch)] = static_cast<unsigned char>(v * 255.0 + 0.5);
      }
    }
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!f) throw IoError("short write: " + path);
}

Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for read: " + path);
  std::string magic;
  f >> magic;
  if (magic != "P6") throw IoError("not a P6 ppm: " + path);
  auto next_int = [&f, &path]() {
    // skip whitespace and '#' comments
    int c = f.get();
    while (c == '#' || std::isspace(c)) {
      if (c == '#') {
        while (c != '\n' && c != EOF) c = f.get();
      }
      c = f.get();
    }
    std::int64_t v = 0;
    bool any = false;
    while (std::isdigit(c)) {
      v = v * 10 + (c - '0');
      any = true;
      c = f.get();
    }
    if (!any) throw IoError("bad ppm header: " + path);
    return v;
  };
  const std::int64_t w = next_int();
  const std::int64_t h = next_int();
  const std::int64_t maxval = next_int();
  if (maxval != 255) throw IoError("unsupported ppm maxval: " + path);
  if (w <= 0 || h <= 0 || w > 1 << 20 || h > 1 << 20) throw IoError("bad ppm dims: " + path);
  Image out(3, h, w);
  std::vector<unsigned char> row(static_cast<std::size_t>(w * 3));
  for (std::int64_t y = 0; y < h; ++y) {
    f.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!f) throw IoError("truncated ppm payload: " + path);
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t ch = 0; ch < 3; ++ch)
        out.at(ch, y, x) = row[static_cast<std::size_t>(x * 3 + ch)] / 255.0;
  }
  return out;
}

Image crop(const Image& img, Rect r) {
  if (!r.inside(img.h, img.w)) throw ContractError("crop: rectangle out of image bounds");
  Image out(img.c, r.h, r.w);
  for (std::int64_t ch = 0; ch < img.c; ++ch)
    for (std::int64_t y = 0; y < r.h; ++y)
      for (std::int64_t x = 0; x < r.w; ++x) out.at(ch, y, x) = img.at(ch, r.y + y, r.x + x);
  return out;
}

Image resample_nn(const Image& src, std::int64_t out_h, std::int64_t out_w) {
  if (out_h <= 0 || out_w <= 0) throw ContractError("resample_nn: empty output");
  Image out(src.c, out_h, out_w);
  for (std::int64_t ch = 0; ch < src.c; ++ch)
    for (std::int64_t y = 0; y < out_h; ++y) {
      const std::int64_t sy = y * src.h / out_h;
      for (std::int64_t x = 0; x < out_w; ++x) {
        const std::int64_t sx = x * src.w / out_w;
        out.at(ch, y, x) = src.at(ch, sy, sx);
      }
    }
  return out;
}

PatchGrid patch_grid(std::int64_t h, std::int64_t w, std::int64_t patch) {
  if (patch <= 0 || h % patch != 0 || w % patch != 0) {
    throw DimensionError("patch size " + std::to_string(patch) + " does not divide " +
                         std::to_string(h) + "x" + std::to_string(w));
  }
  return {h / patch, w / patch};
}

Tensor patchify(const Image& img, std::int64_t patch) {
  const PatchGrid grid = patch_grid(img.h, img.w, patch);
  const std::int64_t plen = patch * patch * img.c;
  Tensor out = Tensor::zeros({grid.count(), plen});
  for (std::int64_t gr = 0; gr < grid.rows; ++gr) {
    for (std::int64_t gc = 0; gc < grid.cols; ++gc) {
      double* dst = out.data.data() + (gr * grid.cols + gc) * plen;
      std::int64_t k = 0;
      for (std::int64_t py = 0; py < patch; ++py)
        for (std::int64_t px = 0; px < patch; ++px)
          for (std::int64_t ch = 0; ch < img.c; ++ch)
            dst[k++] = img.at(ch, gr * patch + py, gc * patch + px);
    }
  }
  return out;
}

Image unpatchify(const Tensor& patches, PatchGrid grid, std::int64_t patch, std::int64_t channels) {
  const std::int64_t plen = patch * patch * channels;
  if (patches.rank() != 2 || patches.shape[0] != grid.count() || patches.shape[1] != plen) {
    throw DimensionError("unpatchify: got " + shape_str(patches.shape) + ", want [" +
                         std::to_string(grid.count()) + "," + std::to_string(plen) + "]");
  }
  Image out(channels, grid.rows * patch, grid.cols * patch);
  for (std::int64_t gr = 0; gr < grid.rows; ++gr) {
    for (std::int64_t gc = 0; gc < grid.cols; ++gc) {
      const double* src = patches.data.data() + (gr * grid.cols + gc) * plen;
      std::int64_t k = 0;
      for (std::int64_t py = 0; py < patch; ++py)
        for (std::int64_t px = 0; px < patch; ++px)
          for (std::int64_t ch = 0; ch < channels; ++ch)
            out.at(ch, gr * patch + py, gc * patch + px) = src[k++];
    }
  }
  return out;
}

PatchEmbedder PatchEmbedder::init(std::int64_t patch, std::int64_t channels, std::int64_t dim, Rng& rng) {
  PatchEmbedder e;
  e.patch = patch;
  e.channels = channels;
  e.dim = dim;
  const std::int64_t fan_in = patch * patch * channels;
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  e.weight = Tensor::zeros({fan_in, dim});
  for (double& v : e.weight.data) v = rng.uniform(-bound, bound);
  e.bias = Tensor::zeros({dim});
  return e;
}

Tensor embed_patches(const Tensor& patches, const PatchEmbedder& emb) {
  if (patches.rank() != 2 || patches.shape[1] != emb.weight.shape[0]) {
    throw DimensionError("embed_patches: patch width " + shape_str(patches.shape) +
                         " does not match embedder " + shape_str(emb.weight.shape));
  }
  Tensor tokens = mm_nn(patches, emb.weight);
  for (std::int64_t i = 0; i < tokens.shape[0]; ++i)
    for (std::int64_t j = 0; j < tokens.shape[1]; ++j) tokens.at2(i, j) += emb.bias.data[static_cast<std::size_t>(j)];
  return tokens;
}

Image unembed_to_image(const Tensor& tokens, PatchGrid grid, std::int64_t patch, std::int64_t channels,
                       const Tensor& weight_out, const Tensor& bias_out) {
  if (tokens.rank() != 2 || tokens.shape[0] != grid.count()) {
    throw DimensionError("unembed: token count " + shape_str(tokens.shape) + " does not match grid " +
                         std::to_string(grid.count()));
  }
  Tensor patches = mm_nn(tokens, weight_out);
  if (bias_out.numel() != patches.shape[1]) throw DimensionError("unembed: bias length mismatch");
  for (std::int64_t i = 0; i < patches.shape[0]; ++i)
    for (std::int64_t j = 0; j < patches.shape[1]; ++j)
      patches.at2(i, j) += bias_out.data[static_cast<std::size_t>(j)];
  return unpatchify(patches, grid, patch, channels);
}

}  // namespace trydit::img
