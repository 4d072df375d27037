// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "core/image.hpp"
#include "core/tensor.hpp"

namespace trydit::metrics {

// Windowed SSIM: uniform 8x8 tiles (partial tiles at the edges count with
// their actual pixel count), C1=(0.01)^2, C2=(0.03)^2 at dynamic range 1,
// averaged over tiles and channels.
double ssim(const img::Image& a, const img::Image& b);

// Same, restricted to tiles that do not intersect `excluded`. Returns 1
// when nothing remains to compare.
double ssim_excluding(const img::Image& a, const img::Image& b, img::Rect excluded);

// 10*log10(1/mse); +inf when the images are identical.
double psnr(const img::Image& a, const img::Image& b);

struct FeatureStats {
  Tensor mean;  // [k]
  Tensor cov;   // [k,k], symmetric PSD up to round-off
};

// Handcrafted per-image descriptor: per 8x8 tile and channel (mean,
// variance, gradient energy), then a pinned-seed random projection to 8
// dims.
Tensor image_features(const img::Image& img);

FeatureStats feature_stats(const std::vector<Tensor>& features);  // needs >= 2 rows

// d^2 = |mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}), matrix square
// root by symmetric eigendecomposition with eigenvalues clamped at 0.
double frechet_from_stats(const FeatureStats& a, const FeatureStats& b);

double toy_frechet(const std::vector<img::Image>& a, const std::vector<img::Image>& b);

// Cyclic Jacobi for symmetric matrices; exposed for reuse in tests.
void jacobi_eigen_sym(const Tensor& m, Tensor& eigenvalues, Tensor& eigenvectors);

}  // namespace trydit::metrics
