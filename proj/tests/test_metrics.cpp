// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "core/metrics.hpp"
#include "core/rng.hpp"

using namespace trydit;
using img::Image;
using metrics::FeatureStats;

namespace {

Image random_image(std::int64_t c, std::int64_t h, std::int64_t w, Rng& rng) {
  Image im(c, h, w);
  for (double& v : im.px) v = rng.uniform();
  return im;
}

Image noisy_copy(const Image& src, double sigma, Rng& rng) {
  Image out = src;
  for (double& v : out.px) v = std::min(1.0, std::max(0.0, v + sigma * rng.normal()));
  return out;
}

// independent matrix square root for the frechet cross-check:
// Denman-Beavers iteration on the symmetrized product
Tensor db_sqrt(const Tensor& m) {
  const std::int64_t n = m.shape[0];
  Tensor y = m;
  Tensor z = Tensor::zeros({n, n});
  for (std::int64_t i = 0; i < n; ++i) z.at2(i, i) = 1.0;
  auto inverse = [n](const Tensor& a) {
    std::vector<std::vector<double>> aug(static_cast<std::size_t>(n),
                                         std::vector<double>(static_cast<std::size_t>(2 * n), 0.0));
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t j = 0; j < n; ++j) aug[i][j] = a.at2(i, j);
      aug[i][static_cast<std::size_t>(n + i)] = 1.0;
    }
    for (std::int64_t col = 0; col < n; ++col) {
      std::int64_t piv = col;
      for (std::int64_t r = col + 1; r < n; ++r) {
        if (std::abs(aug[r][col]) > std::abs(aug[piv][col])) piv = r;
      }
      std::swap(aug[static_cast<std::size_t>(col)], aug[static_cast<std::size_t>(piv)]);
      const double d = aug[col][col];
      for (std::int64_t j = 0; j < 2 * n; ++j) aug[col][j] /= d;
      for (std::int64_t r = 0; r < n; ++r) {
        if (r == col) continue;
        const double f = aug[r][col];
        for (std::int64_t j = 0; j < 2 * n; ++j) aug[r][j] -= f * aug[col][j];
      }
    }
    Tensor inv = Tensor::zeros({n, n});
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < n; ++j) inv.at2(i, j) = aug[i][static_cast<std::size_t>(n + j)];
    return inv;
  };
  for (int it = 0; it < 64; ++it) {
    const Tensor yi = inverse(y);
    const Tensor zi = inverse(z);
    Tensor y2 = Tensor::zeros({n, n});
    Tensor z2 = Tensor::zeros({n, n});
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < n; ++j) {
        y2.at2(i, j) = 0.5 * (y.at2(i, j) + zi.at2(i, j));
        z2.at2(i, j) = 0.5 * (z.at2(i, j) + yi.at2(i, j));
      }
    y = std::move(y2);
    z = std::move(z2);
  }
  return y;
}

}  // namespace

TEST_CASE("ssim of an image with itself is one") {
  Rng rng(1);
  const Image x = random_image(3, 16, 24, rng);
  CHECK(metrics::ssim(x, x) == doctest::Approx(1.0).epsilon(1e-12));
  const Image flat_a(3, 8, 8);
  Image flat_b(3, 8, 8);
  for (double& v : flat_b.px) v = 0.0;
  CHECK(metrics::ssim(flat_a, flat_b) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("ssim against the inverted test card matches the direct formula") {
  // one 8x8 window, mid-contrast ramp
  Image a(1, 8, 8), b(1, 8, 8);
  for (std::int64_t y = 0; y < 8; ++y)
    for (std::int64_t x = 0; x < 8; ++x) {
      const double v = 0.25 + 0.5 * (static_cast<double>(y * 8 + x) / 63.0);
      a.at(0, y, x) = v;
      b.at(0, y, x) = 1.0 - v;
    }
  // direct single-window computation
  double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
  for (std::int64_t i = 0; i < 64; ++i) {
    sa += a.px[static_cast<std::size_t>(i)];
    sb += b.px[static_cast<std::size_t>(i)];
    saa += a.px[static_cast<std::size_t>(i)] * a.px[static_cast<std::size_t>(i)];
    sbb += b.px[static_cast<std::size_t>(i)] * b.px[static_cast<std::size_t>(i)];
    sab += a.px[static_cast<std::size_t>(i)] * b.px[static_cast<std::size_t>(i)];
  }
  const double mua = sa / 64, mub = sb / 64;
  const double va = saa / 64 - mua * mua, vb = sbb / 64 - mub * mub;
  const double cov = sab / 64 - mua * mub;
  const double c1 = 1e-4, c2 = 9e-4;
  const double want =
      (2 * mua * mub + c1) * (2 * cov + c2) / ((mua * mua + mub * mub + c1) * (va + vb + c2));
  CHECK(metrics::ssim(a, b) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("ssim is symmetric") {
  Rng rng(2);
  const Image a = random_image(3, 24, 16, rng);
  const Image b = random_image(3, 24, 16, rng);
  CHECK(std::abs(metrics::ssim(a, b) - metrics::ssim(b, a)) <= 1e-12);
}

TEST_CASE("ssim rejects mismatched dims") {
  Rng rng(3);
  const Image a = random_image(3, 8, 8, rng);
  const Image b = random_image(3, 8, 16, rng);
  CHECK_THROWS_AS(metrics::ssim(a, b), ContractError);
}

TEST_CASE("psnr basics") {
  Rng rng(4);
  const Image a = random_image(3, 8, 8, rng);
  CHECK(std::isinf(metrics::psnr(a, a)));
  // fixed mse of 0.01 -> 20 dB
  Image b = a;
  for (double& v : b.px) v = v > 0.5 ? v - 0.1 : v + 0.1;
  CHECK(metrics::psnr(a, b) == doctest::Approx(20.0).epsilon(1e-12));
  const Image c = random_image(3, 8, 8, rng);
  double mse = 0;
  for (std::size_t i = 0; i < a.px.size(); ++i) mse += (a.px[i] - c.px[i]) * (a.px[i] - c.px[i]);
  mse /= static_cast<double>(a.px.size());
  CHECK(metrics::psnr(a, c) == doctest::Approx(10.0 * std::log10(1.0 / mse)).epsilon(1e-12));
}

TEST_CASE("psnr decreases monotonically with noise level") {
  Rng rng(5);
  const Image base = random_image(3, 16, 16, rng);
  double prev = 1e18;
  for (double sigma : {0.01, 0.05, 0.1}) {
    Rng noise_rng(99);
    const double p = metrics::psnr(base, noisy_copy(base, sigma, noise_rng));
    CHECK(p < prev);
    prev = p;
  }
}

TEST_CASE("frechet distance of a set against itself vanishes") {
  Rng rng(6);
  std::vector<Image> set;
  for (int i = 0; i < 6; ++i) set.push_back(random_image(3, 16, 16, rng));
  CHECK(metrics::toy_frechet(set, set) <= 1e-6);
}

TEST_CASE("frechet is symmetric") {
  Rng rng(7);
  std::vector<Image> a, b;
  for (int i = 0; i < 5; ++i) a.push_back(random_image(3, 16, 16, rng));
  for (int i = 0; i < 5; ++i) b.push_back(random_image(3, 16, 16, rng));
  CHECK(std::abs(metrics::toy_frechet(a, b) - metrics::toy_frechet(b, a)) <= 1e-8);
}

TEST_CASE("one-dimensional diagnostic: equal variances, mean shift delta") {
  const double delta = 0.37;
  FeatureStats a, b;
  a.mean = Tensor({1}, {0.2});
  b.mean = Tensor({1}, {0.2 + delta});
  a.cov = Tensor({1, 1}, {0.5});
  b.cov = Tensor({1, 1}, {0.5});
  CHECK(metrics::frechet_from_stats(a, b) == doctest::Approx(delta * delta).epsilon(1e-12));
}

TEST_CASE("frechet matches an independent dense computation") {
  Rng rng(8);
  const std::int64_t k = 8;
  auto random_stats = [&](std::uint64_t seed) {
    Rng r(seed);
    FeatureStats st;
    st.mean = Tensor::zeros({k});
    for (double& v : st.mean.data) v = r.normal();
    Tensor a = Tensor::zeros({k, k});
    for (double& v : a.data) v = r.normal();
    st.cov = mm_nt(a, a);  // PSD by construction
    for (std::int64_t i = 0; i < k; ++i) st.cov.at2(i, i) += 0.05;
    return st;
  };
  const FeatureStats sa = random_stats(101);
  const FeatureStats sb = random_stats(202);
  const double got = metrics::frechet_from_stats(sa, sb);

  // independent route: Denman-Beavers square root of Sa Sb
  const Tensor prod = mm_nn(sa.cov, sb.cov);
  const Tensor root = db_sqrt(prod);
  double mean_term = 0, tr = 0;
  for (std::int64_t i = 0; i < k; ++i) {
    const double d = sa.mean.data[static_cast<std::size_t>(i)] - sb.mean.data[static_cast<std::size_t>(i)];
    mean_term += d * d;
    tr += sa.cov.at2(i, i) + sb.cov.at2(i, i) - 2.0 * root.at2(i, i);
  }
  CHECK(got == doctest::Approx(mean_term + tr).epsilon(1e-6));
}

TEST_CASE("degenerate set sizes are rejected") {
  Rng rng(9);
  std::vector<Image> one{random_image(3, 8, 8, rng)};
  std::vector<Image> two{random_image(3, 8, 8, rng), random_image(3, 8, 8, rng)};
  CHECK_THROWS_AS(metrics::toy_frechet(one, two), ContractError);
}

TEST_CASE("jacobi eigensolver reproduces a known decomposition") {
  // [[2,1],[1,2]] has eigenvalues 1 and 3
  Tensor m({2, 2}, {2, 1, 1, 2});
  Tensor vals, vecs;
  metrics::jacobi_eigen_sym(m, vals, vecs);
  std::vector<double> v = vals.data;
  std::sort(v.begin(), v.end());
  CHECK(v[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(v[1] == doctest::Approx(3.0).epsilon(1e-12));
}
