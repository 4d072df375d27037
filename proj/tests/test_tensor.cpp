// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "core/gradcheck.hpp"
#include "core/rng.hpp"
#include "core/tape.hpp"
#include "core/tensor.hpp"

using namespace trydit;
using ad::Tape;
using ad::Var;

namespace {

Tensor random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor t = Tensor::zeros(std::move(s));
  for (double& v : t.data) v = rng.normal() * scale;
  return t;
}

}  // namespace

TEST_CASE("matmul identity leaves operand unchanged") {
  Tape tp;
  Var eye = tp.constant(Tensor({2, 2}, {1, 0, 0, 1}));
  Rng rng(11);
  Tensor x = random_tensor({2, 5}, rng);
  Var out = tp.matmul(eye, tp.constant(x));
  CHECK(tp.val(out).data == x.data);
}

TEST_CASE("matmul hand-computed case") {
  Tape tp;
  Var a = tp.constant(Tensor({2, 2}, {1, 2, 3, 4}));
  Var b = tp.constant(Tensor({2, 1}, {1, 1}));
  const Tensor& c = tp.val(tp.matmul(a, b));
  CHECK(c.shape == Shape{2, 1});
  CHECK(c.data[0] == 3.0);
  CHECK(c.data[1] == 7.0);
}

TEST_CASE("matmul shape mismatch raises dimension error") {
  Tape tp;
  Var a = tp.constant(Tensor::zeros({2, 3}));
  Var b = tp.constant(Tensor::zeros({2, 3}));
  CHECK_THROWS_AS(tp.matmul(a, b), DimensionError);
}

TEST_CASE("matmul backward matches central differences") {
  Rng rng(42);
  const Tensor a = random_tensor({3, 4}, rng);
  const Tensor b = random_tensor({4, 2}, rng);
  // d/dA of sum(A*B)
  const double err_a = ad::grad_check(
      [&b](Tape& tp, Var x) { return tp.sum_all(tp.matmul(x, tp.constant(b))); }, a, 1e-5);
  CHECK(err_a < 1e-6);
  const double err_b = ad::grad_check(
      [&a](Tape& tp, Var x) { return tp.sum_all(tp.matmul(tp.constant(a), x)); }, b, 1e-5);
  CHECK(err_b < 1e-6);
}

TEST_CASE("softmax of a constant row is uniform") {
  Tape tp;
  const Tensor& y = tp.val(tp.softmax_lastdim(tp.constant(Tensor({3}, {0, 0, 0}))));
  for (double v : y.data) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("softmax respects a forced mask") {
  Tape tp;
  Var x = tp.constant(Tensor({2}, {5, 5}));
  Var m = tp.constant(Tensor({2}, {0.0, ad::kMaskedSentinel}));
  const Tensor& y = tp.val(tp.softmax_lastdim(x, m));
  CHECK(y.data[0] == 1.0);
  CHECK(y.data[1] == 0.0);  // bitwise zero
}

TEST_CASE("masked softmax equals direct formula over survivors") {
  Rng rng(7);
  Tensor x = random_tensor({1, 6}, rng, 2.0);
  Tensor m = Tensor::zeros({1, 6});
  m.data[1] = ad::kMaskedSentinel;
  m.data[4] = ad::kMaskedSentinel;
  Tape tp;
  const Tensor& y = tp.val(tp.softmax_lastdim(tp.constant(x), tp.constant(m)));
  // independent direct exp/sum computation over the 4 surviving logits
  double denom = 0.0;
  for (int j : {0, 2, 3, 5}) denom += std::exp(x.data[j]);
  for (int j : {0, 2, 3, 5}) CHECK(y.data[j] == doctest::Approx(std::exp(x.data[j]) / denom).epsilon(1e-12));
  CHECK(y.data[1] == 0.0);
  CHECK(y.data[4] == 0.0);
}

TEST_CASE("softmax rows sum to one and masked entries are bitwise zero") {
  Rng rng(19);
  for (int trial = 0; trial < 50; ++trial) {
    const std::int64_t n = 2 + static_cast<std::int64_t>(rng.uniform_int(0, 6));
    Tensor x = random_tensor({4, n}, rng, 3.0);
    Tensor m = Tensor::zeros({4, n});
    for (std::int64_t r = 0; r < 4; ++r) {
      // keep at least one entry alive per row
      for (std::int64_t j = 0; j < n - 1; ++j) {
        if (rng.uniform() < 0.4) m.at2(r, j) = ad::kMaskedSentinel;
      }
    }
    Tape tp;
    const Tensor& y = tp.val(tp.softmax_lastdim(tp.constant(x), tp.constant(m)));
    for (std::int64_t r = 0; r < 4; ++r) {
      double sum = 0.0;
      for (std::int64_t j = 0; j < n; ++j) {
        if (ad::is_masked_logit(m.at2(r, j))) {
          CHECK(y.at2(r, j) == 0.0);
        }
        sum += y.at2(r, j);
      }
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("fully masked softmax row yields zeros and a flag") {
  Tape tp;
  Var x = tp.constant(Tensor({1, 3}, {1, 2, 3}));
  Tensor m = Tensor::full({1, 3}, ad::kMaskedSentinel);
  CHECK(tp.fully_masked_rows() == 0);
  const Tensor& y = tp.val(tp.softmax_lastdim(x, tp.constant(m)));
  for (double v : y.data) CHECK(v == 0.0);
  CHECK(tp.fully_masked_rows() == 1);
}

TEST_CASE("rms_norm of a constant vector normalizes to unit scale") {
  Tape tp;
  const double c = -2.5;
  Var x = tp.constant(Tensor({4}, {c, c, c, c}));
  Var gain = tp.constant(Tensor::full({4}, 1.0));
  const Tensor& y = tp.val(tp.rms_norm(x, 0.0, gain));
  for (double v : y.data) CHECK(v == doctest::Approx(c / std::abs(c)).epsilon(1e-15));
}

TEST_CASE("concat on axis 0 joins vectors") {
  Tape tp;
  Var a = tp.constant(Tensor({2}, {1, 2}));
  Var b = tp.constant(Tensor({1}, {3}));
  const Tensor& y = tp.val(tp.concat({a, b}, 0));
  CHECK(y.shape == Shape{3});
  CHECK(y.data == std::vector<double>{1, 2, 3});
}

TEST_CASE("silu backward matches central differences") {
  Rng rng(5);
  const Tensor x = random_tensor({7}, rng, 2.0);
  const double err =
      ad::grad_check([](Tape& tp, Var v) { return tp.sum_all(tp.silu(v)); }, x, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("grad_check on an analytic quadratic") {
  const Tensor x({2}, {1, 2});
  const Tensor g = ad::autodiff_gradient(
      [](Tape& tp, Var v) { return tp.sum_all(tp.mul(v, v)); }, x);
  CHECK(g.data[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(g.data[1] == doctest::Approx(4.0).epsilon(1e-12));
  const double err =
      ad::grad_check([](Tape& tp, Var v) { return tp.sum_all(tp.mul(v, v)); }, x, 1e-5);
  CHECK(err < 1e-8);
}

TEST_CASE("grad_check rejects non-scalar outputs") {
  const Tensor x({2}, {1, 2});
  CHECK_THROWS_AS(ad::grad_check([](Tape& tp, Var v) { return tp.mul(v, v); }, x, 1e-5),
                  ContractError);
}

TEST_CASE("every differentiable op passes randomized gradient checks") {
  Rng rng(1234);
  int trials_per_op = 12;
  double worst = 0.0;
  for (int trial = 0; trial < trials_per_op; ++trial) {
    const std::int64_t m = 2 + rng.uniform_int(0, 2);
    const std::int64_t n = 4 + 2 * rng.uniform_int(0, 2);
    const Tensor x = random_tensor({m, n}, rng);
    const Tensor other = random_tensor({m, n}, rng);
    const Tensor row = random_tensor({n}, rng);
    const Tensor gain = random_tensor({n}, rng, 0.5);
    const Tensor mm = random_tensor({n, 3}, rng);
    Tensor mask = Tensor::zeros({m, n});
    for (std::int64_t j = 0; j + 1 < n; ++j) {
      if (rng.uniform() < 0.3) {
        for (std::int64_t r = 0; r < m; ++r) mask.at2(r, j) = ad::kMaskedSentinel;
      }
    }

    const std::vector<std::pair<const char*, ad::ScalarFn>> cases = {
        {"add", [&](Tape& tp, Var v) { return tp.sum_all(tp.add(v, tp.constant(other))); }},
        {"add_row", [&](Tape& tp, Var v) { return tp.sum_all(tp.add(v, tp.constant(row))); }},
        {"sub", [&](Tape& tp, Var v) { return tp.sum_all(tp.sub(tp.constant(other), v)); }},
        {"mul", [&](Tape& tp, Var v) { return tp.sum_all(tp.mul(v, tp.constant(other))); }},
        {"mul_row",
         [&](Tape& tp, Var v) { return tp.sum_all(tp.mul(v, tp.constant(row))); }},
        {"scale", [&](Tape& tp, Var v) { return tp.sum_all(tp.scale(v, -1.7)); }},
        {"matmul", [&](Tape& tp, Var v) { return tp.sum_all(tp.matmul(v, tp.constant(mm))); }},
        {"transpose", [&](Tape& tp, Var v) { return tp.sum_all(tp.transpose(v)); }},
        {"reshape", [&](Tape& tp, Var v) { return tp.sum_all(tp.reshape(v, {n, m})); }},
        {"concat",
         [&](Tape& tp, Var v) { return tp.sum_all(tp.concat({v, tp.constant(other)}, 1)); }},
        {"slice", [&](Tape& tp, Var v) { return tp.sum_all(tp.slice(v, 1, 1, n - 2)); }},
        {"silu", [&](Tape& tp, Var v) { return tp.sum_all(tp.silu(v)); }},
        {"rms_norm",
         [&](Tape& tp, Var v) { return tp.sum_all(tp.rms_norm(v, 1e-6, tp.constant(gain))); }},
        {"rms_norm_gain",
         [&](Tape& tp, Var v) { return tp.sum_all(tp.rms_norm(tp.constant(x), 1e-6, v)); }},
        {"softmax",
         [&](Tape& tp, Var v) {
           return tp.sum_all(tp.mul(tp.softmax_lastdim(v), tp.constant(other)));
         }},
        {"softmax_masked",
         [&](Tape& tp, Var v) {
           return tp.sum_all(tp.mul(tp.softmax_lastdim(v, tp.constant(mask)), tp.constant(other)));
         }},
        {"mean", [&](Tape& tp, Var v) { return tp.mean_all(tp.mul(v, v)); }},
    };
    for (const auto& [name, fn] : cases) {
      const Tensor& probe = std::string(name) == "rms_norm_gain" ? gain : x;
      const double err = ad::grad_check(fn, probe, 1e-5);
      INFO("op ", name, " trial ", trial);
      CHECK(err < 1e-4);
      worst = std::max(worst, err);
    }
  }
  MESSAGE("worst op grad rel-err: ", worst);
}

TEST_CASE("ops are deterministic given identical inputs") {
  auto run_once = [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor a = random_tensor({6, 8}, rng);
    Tensor b = random_tensor({8, 6}, rng);
    Tape tp;
    Var y = tp.softmax_lastdim(tp.matmul(tp.constant(a), tp.constant(b)));
    return tp.val(tp.rms_norm(y, 1e-6, tp.constant(Tensor::full({6}, 1.0)))).data;
  };
  CHECK(run_once(99) == run_once(99));
}

TEST_CASE("tensor file round trips through PTNSR1") {
  Rng rng(3);
  Tensor t = random_tensor({3, 4, 2}, rng);
  // keep payload exactly representable in f32
  for (double& v : t.data) v = static_cast<float>(v);
  const std::string path = (std::filesystem::temp_directory_path() / "trydit_t.ptnsr").string();
  write_tensor_file(path, t);
  const Tensor back = read_tensor_file(path);
  CHECK(back.shape == t.shape);
  CHECK(back.data == t.data);
  std::filesystem::remove(path);
}

TEST_CASE("tensor file rejects bad magic") {
  const std::string path = (std::filesystem::temp_directory_path() / "trydit_bad.ptnsr").string();
  {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    std::fputs("NOTTNSR", f);
    std::fclose(f);
  }
  CHECK_THROWS_AS(read_tensor_file(path), IoError);
  std::filesystem::remove(path);
}

TEST_CASE("backward runs once per tape") {
  Tape tp;
  Var x = tp.leaf(Tensor({2}, {1, 2}), true);
  Var loss = tp.sum_all(tp.mul(x, x));
  tp.backward(loss);
  CHECK_THROWS_AS(tp.backward(loss), ContractError);
}
