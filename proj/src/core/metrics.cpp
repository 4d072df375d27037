// SPDX-License-Identifier: Apache-2.0
#include "core/metrics.hpp"

#include <cmath>
#include <limits>

#include "core/rng.hpp"

namespace trydit::metrics {

namespace {

constexpr std::int64_t kWindow = 8;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

double window_ssim(const img::Image& a, const img::Image& b, std::int64_t ch, std::int64_t y0,
                   std::int64_t x0, std::int64_t wh, std::int64_t ww) {
  const double n = static_cast<double>(wh * ww);
  double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
  for (std::int64_t y = y0; y < y0 + wh; ++y)
    for (std::int64_t x = x0; x < x0 + ww; ++x) {
      const double va = a.at(ch, y, x), vb = b.at(ch, y, x);
      sa += va;
      sb += vb;
      saa += va * va;
      sbb += vb * vb;
      sab += va * vb;
    }
  const double mua = sa / n, mub = sb / n;
  const double vara = saa / n - mua * mua;
  const double varb = sbb / n - mub * mub;
  const double cov = sab / n - mua * mub;
  return ((2.0 * mua * mub + kC1) * (2.0 * cov + kC2)) /
         ((mua * mua + mub * mub + kC1) * (vara + varb + kC2));
}

void check_dims(const img::Image& a, const img::Image& b, const char* who) {
  if (a.c != b.c || a.h != b.h || a.w != b.w) {
    throw ContractError(std::string(who) + ": image dims differ");
  }
  if (a.numel() == 0) throw ContractError(std::string(who) + ": empty image");
}

}  // namespace

double ssim(const img::Image& a, const img::Image& b) {
  check_dims(a, b, "ssim");
  double acc = 0.0;
  std::int64_t count = 0;
  for (std::int64_t ch = 0; ch < a.c; ++ch)
    for (std::int64_t y0 = 0; y0 < a.h; y0 += kWindow)
      for (std::int64_t x0 = 0; x0 < a.w; x0 += kWindow) {
        const std::int64_t wh = std::min(kWindow, a.h - y0);
        const std::int64_t ww = std::min(kWindow, a.w - x0);
        acc += window_ssim(a, b, ch, y0, x0, wh, ww);
        ++count;
      }
  return acc / static_cast<double>(count);
}

double ssim_excluding(const img::Image& a, const img::Image& b, img::Rect excluded) {
  check_dims(a, b, "ssim");
  double acc = 0.0;
  std::int64_t count = 0;
  for (std::int64_t ch = 0; ch < a.c; ++ch)
    for (std::int64_t y0 = 0; y0 < a.h; y0 += kWindow)
      for (std::int64_t x0 = 0; x0 < a.w; x0 += kWindow) {
        const std::int64_t wh = std::min(kWindow, a.h - y0);
        const std::int64_t ww = std::min(kWindow, a.w - x0);
        const bool overlaps = !(x0 + ww <= excluded.x || excluded.x + excluded.w <= x0 ||
                                y0 + wh <= excluded.y || excluded.y + excluded.h <= y0);
        if (overlaps) continue;
        acc += window_ssim(a, b, ch, y0, x0, wh, ww);
        ++count;
      }
  if (count == 0) return 1.0;
  return acc / static_cast<double>(count);
}

double psnr(const img::Image& a, const img::Image& b) {
  check_dims(a, b, "psnr");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.px.size(); ++i) {
    const double d = a.px[i] - b.px[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.numel());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

namespace {

constexpr std::uint64_t kFeatureSeed = 0x66726563686574ull;  // pins the projection
constexpr std::int64_t kFeatureDim = 8;

}  // namespace

Tensor image_features(const img::Image& im) {
  if (im.numel() == 0) throw ContractError("image_features: empty image");
  std::vector<double> raw;
  for (std::int64_t ch = 0; ch < im.c; ++ch)
    for (std::int64_t y0 = 0; y0 < im.h; y0 += kWindow)
      for (std::int64_t x0 = 0; x0 < im.w; x0 += kWindow) {
        const std::int64_t wh = std::min(kWindow, im.h - y0);
        const std::int64_t ww = std::min(kWindow, im.w - x0);
        const double n = static_cast<double>(wh * ww);
        double s = 0, ss = 0, ge = 0;
        for (std::int64_t y = y0; y < y0 + wh; ++y)
          for (std::int64_t x = x0; x < x0 + ww; ++x) {
            const double v = im.at(ch, y, x);
            s += v;
            ss += v * v;
            if (x + 1 < im.w) {
              const double dx = im.at(ch, y, x + 1) - v;
              ge += dx * dx;
            }
            if (y + 1 < im.h) {
              const double dy = im.at(ch, y + 1, x) - v;
              ge += dy * dy;
            }
          }
        const double mu = s / n;
        raw.push_back(mu);
        raw.push_back(ss / n - mu * mu);
        raw.push_back(ge / n);
      }
  const std::int64_t len = static_cast<std::int64_t>(raw.size());
  Rng rng(mix_seed(kFeatureSeed, static_cast<std::uint64_t>(len)));
  Tensor out = Tensor::zeros({kFeatureDim});
  const double scale = 1.0 / std::sqrt(static_cast<double>(len));
  for (std::int64_t k = 0; k < kFeatureDim; ++k) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < len; ++i) acc += rng.normal() * raw[static_cast<std::size_t>(i)];
    out.data[static_cast<std::size_t>(k)] = acc * scale;
  }
  return out;
}

FeatureStats feature_stats(const std::vector<Tensor>& features) {
  if (features.size() < 2) throw ContractError("feature_stats: need at least 2 samples");
  const std::int64_t k = features[0].numel();
  const double n = static_cast<double>(features.size());
  FeatureStats st;
  st.mean = Tensor::zeros({k});
  for (const Tensor& f : features) {
    if (f.numel() != k) throw DimensionError("feature_stats: inconsistent feature length");
    for (std::int64_t i = 0; i < k; ++i) st.mean.data[static_cast<std::size_t>(i)] += f.data[static_cast<std::size_t>(i)];
  }
  for (double& v : st.mean.data) v /= n;
  st.cov = Tensor::zeros({k, k});
  for (const Tensor& f : features) {
    for (std::int64_t i = 0; i < k; ++i)
      for (std::int64_t j = 0; j < k; ++j)
        st.cov.at2(i, j) += (f.data[static_cast<std::size_t>(i)] - st.mean.data[static_cast<std::size_t>(i)]) *
                            (f.data[static_cast<std::size_t>(j)] - st.mean.data[static_cast<std::size_t>(j)]);
  }
  for (double& v : st.cov.data) v /= (n - 1.0);
  return st;
}

void jacobi_eigen_sym(const Tensor& m, Tensor& eigenvalues, Tensor& eigenvectors) {
  if (m.rank() != 2 || m.shape[0] != m.shape[1]) throw DimensionError("jacobi: matrix must be square");
  const std::int64_t n = m.shape[0];
  Tensor a = m;
  Tensor v = Tensor::zeros({n, n});
  for (std::int64_t i = 0; i < n; ++i) v.at2(i, i) = 1.0;
  for (int sweep = 0; sweep < 128; ++sweep) {
    double off = 0.0;
    for (std::int64_t p = 0; p < n; ++p)
      for (std::int64_t q = p + 1; q < n; ++q) off += a.at2(p, q) * a.at2(p, q);
    if (off < 1e-26) break;
    for (std::int64_t p = 0; p < n; ++p) {
      for (std::int64_t q = p + 1; q < n; ++q) {
        const double apq = a.at2(p, q);
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (a.at2(q, q) - a.at2(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::int64_t i = 0; i < n; ++i) {
          const double aip = a.at2(i, p), aiq = a.at2(i, q);
          a.at2(i, p) = c * aip - s * aiq;
          a.at2(i, q) = s * aip + c * aiq;
        }
        for (std::int64_t i = 0; i < n; ++i) {
          const double api = a.at2(p, i), aqi = a.at2(q, i);
          a.at2(p, i) = c * api - s * aqi;
          a.at2(q, i) = s * api + c * aqi;
        }
        for (std::int64_t i = 0; i < n; ++i) {
          const double vip = v.at2(i, p), viq = v.at2(i, q);
          v.at2(i, p) = c * vip - s * viq;
          v.at2(i, q) = s * vip + c * viq;
        }
      }
    }
  }
  eigenvalues = Tensor::zeros({n});
  for (std::int64_t i = 0; i < n; ++i) eigenvalues.data[static_cast<std::size_t>(i)] = a.at2(i, i);
  eigenvectors = std::move(v);
}

namespace {

// V diag(sqrt(max(lambda,0))) V^T
Tensor psd_sqrt(const Tensor& m) {
  Tensor vals, vecs;
  jacobi_eigen_sym(m, vals, vecs);
  const std::int64_t n = m.shape[0];
  Tensor out = Tensor::zeros({n, n});
  for (std::int64_t k = 0; k < n; ++k) {
    const double lam = vals.data[static_cast<std::size_t>(k)];
    const double s = lam > 0.0 ? std::sqrt(lam) : 0.0;
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < n; ++j) out.at2(i, j) += s * vecs.at2(i, k) * vecs.at2(j, k);
  }
  return out;
}

}  // namespace

double frechet_from_stats(const FeatureStats& a, const FeatureStats& b) {
  const std::int64_t k = a.mean.numel();
  if (b.mean.numel() != k || a.cov.shape != Shape{k, k} || b.cov.shape != Shape{k, k}) {
    throw DimensionError("frechet_from_stats: inconsistent stats shapes");
  }
  double mean_term = 0.0;
  for (std::int64_t i = 0; i < k; ++i) {
    const double d = a.mean.data[static_cast<std::size_t>(i)] - b.mean.data[static_cast<std::size_t>(i)];
    mean_term += d * d;
  }
  double tr_a = 0.0, tr_b = 0.0;
  for (std::int64_t i = 0; i < k; ++i) {
    tr_a += a.cov.at2(i, i);
    tr_b += b.cov.at2(i, i);
  }
  // Tr((Sa Sb)^{1/2}) via the symmetric form (Sa^{1/2} Sb Sa^{1/2})^{1/2}
  const Tensor ra = psd_sqrt(a.cov);
  Tensor m = mm_nn(mm_nn(ra, b.cov), ra);
  for (std::int64_t i = 0; i < k; ++i)
    for (std::int64_t j = i + 1; j < k; ++j) {
      const double s = 0.5 * (m.at2(i, j) + m.at2(j, i));
      m.at2(i, j) = s;
      m.at2(j, i) = s;
    }
  Tensor vals, vecs;
  jacobi_eigen_sym(m, vals, vecs);
  double tr_sqrt = 0.0;
  for (std::int64_t i = 0; i < k; ++i) {
    const double lam = vals.data[static_cast<std::size_t>(i)];
    if (lam > 0.0) tr_sqrt += std::sqrt(lam);
  }
  const double d2 = mean_term + tr_a + tr_b - 2.0 * tr_sqrt;
  return d2 > 0.0 ? d2 : 0.0;
}

double toy_frechet(const std::vector<img::Image>& a, const std::vector<img::Image>& b) {
  if (a.size() < 2 || b.size() < 2) throw ContractError("toy_frechet: each set needs >= 2 images");
  std::vector<Tensor> fa, fb;
  fa.reserve(a.size());
  fb.reserve(b.size());
  for (const auto& im : a) fa.push_back(image_features(im));
  for (const auto& im : b) fb.push_back(image_features(im));
  return frechet_from_stats(feature_stats(fa), feature_stats(fb));
}

}  // namespace trydit::metrics
