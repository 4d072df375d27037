// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "core/attention.hpp"
#include "core/gradcheck.hpp"
#include "core/rng.hpp"

using namespace trydit;
using attn::AttnImpl;
using attn::BranchMats;
using attn::BranchVars;
using attn::FlopCounter;
using attn::ProjMats;
using attn::Segmentation;

namespace {

Tensor random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor t = Tensor::zeros(std::move(s));
  for (double& v : t.data) v = rng.normal() * scale;
  return t;
}

Tensor identity(std::int64_t n) {
  Tensor t = Tensor::zeros({n, n});
  for (std::int64_t i = 0; i < n; ++i) t.at2(i, i) = 1.0;
  return t;
}

ProjMats random_proj(std::int64_t d, Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  return {random_tensor({d, d}, rng, s), random_tensor({d, d}, rng, s),
          random_tensor({d, d}, rng, s), random_tensor({d, d}, rng, s)};
}

BranchVars to_vars(ad::Tape& tp, const BranchMats& m, bool trainable = false) {
  auto conv = [&](const ProjMats& p) {
    attn::ProjVars v;
    v.q = tp.leaf(p.q, trainable);
    v.k = tp.leaf(p.k, trainable);
    v.v = tp.leaf(p.v, trainable);
    v.o = tp.leaf(p.o, trainable);
    return v;
  };
  return {conv(m.tn), conv(m.c1), conv(m.c2)};
}

// Independent single-branch reference: one weight set for every token,
// plain loops, optional mask. Used as the oracle for branch plumbing.
Tensor reference_attention(const Tensor& tokens, const ProjMats& w, std::int64_t heads,
                           const Segmentation& seg, bool use_mask) {
  const std::int64_t L = tokens.shape[0], d = tokens.shape[1], dk = d / heads;
  const Tensor q = mm_nn(tokens, w.q), k = mm_nn(tokens, w.k), v = mm_nn(tokens, w.v);
  Tensor out = Tensor::zeros({L, d});
  for (std::int64_t h = 0; h < heads; ++h) {
    for (std::int64_t i = 0; i < L; ++i) {
      std::vector<double> logits(static_cast<std::size_t>(L));
      double mx = -1e308;
      for (std::int64_t j = 0; j < L; ++j) {
        double s = 0.0;
        for (std::int64_t c = 0; c < dk; ++c) s += q.at2(i, h * dk + c) * k.at2(j, h * dk + c);
        s /= std::sqrt(static_cast<double>(dk));
        bool masked = false;
        if (use_mask) {
          const bool ic1 = i >= seg.c1_start() && i < seg.c1_end();
          const bool ic2 = i >= seg.c2_start();
          const bool jc1 = j >= seg.c1_start() && j < seg.c1_end();
          const bool jc2 = j >= seg.c2_start();
          masked = (ic1 && jc2) || (ic2 && jc1);
        }
        logits[static_cast<std::size_t>(j)] = masked ? -1e308 : s;
        if (!masked) mx = std::max(mx, s);
      }
      double denom = 0.0;
      for (std::int64_t j = 0; j < L; ++j) {
        if (logits[static_cast<std::size_t>(j)] <= -1e307) continue;
        denom += std::exp(logits[static_cast<std::size_t>(j)] - mx);
      }
      for (std::int64_t j = 0; j < L; ++j) {
        if (logits[static_cast<std::size_t>(j)] <= -1e307) continue;
        const double wj = std::exp(logits[static_cast<std::size_t>(j)] - mx) / denom;
        for (std::int64_t c = 0; c < dk; ++c) out.at2(i, h * dk + c) += wj * v.at2(j, h * dk + c);
      }
    }
  }
  return mm_nn(out, w.o);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace

TEST_CASE("mask blocks exactly the c1/c2 cross blocks") {
  const Segmentation seg{2, 2, 3, 3};
  const Tensor m = attn::build_mask(seg);
  REQUIRE(m.shape == Shape{10, 10});
  std::int64_t blocked = 0;
  for (std::int64_t i = 0; i < 10; ++i)
    for (std::int64_t j = 0; j < 10; ++j) {
      if (ad::is_masked_logit(m.at2(i, j))) ++blocked;
    }
  CHECK(blocked == 18);
  // the two off-diagonal 3x3 blocks
  for (std::int64_t i = 4; i < 7; ++i)
    for (std::int64_t j = 7; j < 10; ++j) {
      CHECK(ad::is_masked_logit(m.at2(i, j)));
      CHECK(ad::is_masked_logit(m.at2(j, i)));
    }
}

TEST_CASE("empty garment span yields an all-zero mask") {
  const Tensor m = attn::build_mask({2, 3, 4, 0});
  for (double v : m.data) CHECK(v == 0.0);
}

TEST_CASE("blocked entry count and symmetry hold on random segmentations") {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const Segmentation seg{rng.uniform_int(0, 4), 1 + rng.uniform_int(0, 4), rng.uniform_int(0, 5),
                           rng.uniform_int(0, 5)};
    const Tensor m = attn::build_mask(seg);
    std::int64_t blocked = 0;
    const std::int64_t L = seg.total();
    for (std::int64_t i = 0; i < L; ++i)
      for (std::int64_t j = 0; j < L; ++j) {
        CHECK(m.at2(i, j) == m.at2(j, i));
        if (ad::is_masked_logit(m.at2(i, j))) ++blocked;
      }
    CHECK(blocked == 2 * seg.reference * seg.garment);
  }
}

TEST_CASE("identity projections, one token per segment: c1 ignores c2") {
  const std::int64_t d = 4;
  const Segmentation seg{1, 1, 1, 1};
  Rng rng(8);
  const Tensor tokens = random_tensor({4, d}, rng);
  ProjMats eye{identity(d), identity(d), identity(d), identity(d)};
  BranchMats w{eye, eye, eye};
  const Tensor out = attn::joint_attention_plain(tokens, seg, w, {}, {4, 10000.0}, 1, true,
                                                 AttnImpl::Dense, nullptr, nullptr);
  // direct softmax over {T, X, C1} for the C1 row
  double logits[3];
  for (int j = 0; j < 3; ++j) {
    double s = 0.0;
    for (std::int64_t c = 0; c < d; ++c) s += tokens.at2(2, c) * tokens.at2(j, c);
    logits[j] = s / std::sqrt(static_cast<double>(d));
  }
  const double mx = std::max({logits[0], logits[1], logits[2]});
  double denom = 0.0;
  for (double l : logits) denom += std::exp(l - mx);
  for (std::int64_t c = 0; c < d; ++c) {
    double want = 0.0;
    for (int j = 0; j < 3; ++j) want += std::exp(logits[j] - mx) / denom * tokens.at2(j, c);
    CHECK(out.at2(2, c) == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("single-token sequence returns its value projection") {
  const std::int64_t d = 6;
  Rng rng(9);
  const Tensor tokens = random_tensor({1, d}, rng);
  ProjMats w{random_tensor({d, d}, rng), random_tensor({d, d}, rng), random_tensor({d, d}, rng),
             identity(d)};
  const Tensor out = attn::joint_attention_plain(tokens, {1, 0, 0, 0}, {w, w, w}, {}, {6, 1e4}, 1,
                                                 true, AttnImpl::Dense, nullptr, nullptr);
  const Tensor want = mm_nn(tokens, w.v);
  CHECK(max_abs_diff(out, want) < 1e-12);
}

TEST_CASE("shared weights across branches match a single-branch reference") {
  Rng rng(10);
  const std::int64_t d = 8, heads = 2;
  const Segmentation seg{2, 2, 2, 2};
  const Tensor tokens = random_tensor({8, d}, rng);
  const ProjMats shared = random_proj(d, rng);
  const BranchMats w{shared, shared, shared};
  const Tensor got = attn::joint_attention_plain(tokens, seg, w, {}, {4, 1e4}, heads, true,
                                                 AttnImpl::Dense, nullptr, nullptr);
  const Tensor want = reference_attention(tokens, shared, heads, seg, true);
  CHECK(max_abs_diff(got, want) < 1e-12);

  // tape path agrees with the same oracle
  ad::Tape tp;
  const ad::Var out = attn::joint_attention(tp, tp.constant(tokens), seg, to_vars(tp, w), {},
                                            {4, 1e4}, heads, tp.constant(attn::build_mask(seg)));
  CHECK(max_abs_diff(tp.val(out), want) < 1e-12);
}

TEST_CASE("block-skip attention equals dense-masked attention") {
  Rng rng(11);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::int64_t heads = 1 + rng.uniform_int(0, 2);
    const std::int64_t dk = 4 * (1 + rng.uniform_int(0, 2));
    const std::int64_t d = heads * dk;
    const Segmentation seg{rng.uniform_int(0, 3), 1 + rng.uniform_int(0, 4), rng.uniform_int(0, 4),
                           rng.uniform_int(0, 4)};
    const Tensor tokens = random_tensor({seg.total(), d}, rng);
    const BranchMats w{random_proj(d, rng), random_proj(d, rng), random_proj(d, rng)};
    rope::PositionGrid pos;
    if (trial % 2 == 0) {
      pos = rope::build_positions(rope::Scheme::I, {1, seg.noise}, {1, seg.reference},
                                  {1, seg.garment}, seg.text);
    }
    const Tensor dense = attn::joint_attention_plain(tokens, seg, w, pos, {dk, 1e4}, heads, true,
                                                     AttnImpl::Dense, nullptr, nullptr);
    const Tensor skip = attn::joint_attention_plain(tokens, seg, w, pos, {dk, 1e4}, heads, true,
                                                    AttnImpl::BlockSkip, nullptr, nullptr);
    worst = std::max(worst, max_abs_diff(dense, skip));
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("block-skip saves exactly the cross-block score MACs") {
  Rng rng(12);
  const std::int64_t n = 5, heads = 2, dk = 8, d = heads * dk;
  const Segmentation seg{2, 3, n, n};
  const Tensor tokens = random_tensor({seg.total(), d}, rng);
  const BranchMats w{random_proj(d, rng), random_proj(d, rng), random_proj(d, rng)};
  FlopCounter dense, skip;
  attn::joint_attention_plain(tokens, seg, w, {}, {dk, 1e4}, heads, true, AttnImpl::Dense, &dense,
                              nullptr);
  attn::joint_attention_plain(tokens, seg, w, {}, {dk, 1e4}, heads, true, AttnImpl::BlockSkip, &skip,
                              nullptr);
  CHECK(dense.score - skip.score == heads * 2 * n * n * dk);
  CHECK(dense.qkv_proj == skip.qkv_proj);
  CHECK(dense.out_proj == skip.out_proj);

  // empty c2 removes the savings entirely
  const Segmentation seg0{2, 3, n, 0};
  const Tensor tokens0 = random_tensor({seg0.total(), d}, rng);
  FlopCounter dense0, skip0;
  attn::joint_attention_plain(tokens0, seg0, w, {}, {dk, 1e4}, heads, true, AttnImpl::Dense, &dense0,
                              nullptr);
  attn::joint_attention_plain(tokens0, seg0, w, {}, {dk, 1e4}, heads, true, AttnImpl::BlockSkip,
                              &skip0, nullptr);
  CHECK(dense0.score == skip0.score);
  CHECK(dense0.total() == skip0.total());
}

TEST_CASE("zero-init lora leaves the projection untouched") {
  Rng rng(13);
  const std::int64_t d = 8, r = 2;
  const Tensor base = random_tensor({d, d}, rng);
  const Tensor tokens = random_tensor({5, d}, rng);
  ad::Tape tp;
  attn::LoraVars lora{tp.constant(random_tensor({d, r}, rng)), tp.constant(Tensor::zeros({r, d})), r,
                      16.0};
  const ad::Var out = attn::apply_lora(tp, tp.constant(base), lora, tp.constant(tokens));
  CHECK(max_abs_diff(tp.val(out), mm_nn(tokens, base)) == 0.0);
}

TEST_CASE("lora adapter parameter count is r*(d_in + d_out)") {
  const std::int64_t d_in = 16, d_out = 16, r = 3;
  const Tensor down = Tensor::zeros({d_in, r});
  const Tensor up = Tensor::zeros({r, d_out});
  CHECK(down.numel() + up.numel() == r * (d_in + d_out));
}

TEST_CASE("full-rank identity lora equals a dense weight update") {
  Rng rng(14);
  const std::int64_t d = 6;
  const Tensor base = random_tensor({d, d}, rng);
  const Tensor delta = random_tensor({d, d}, rng);
  const Tensor tokens = random_tensor({4, d}, rng);
  ad::Tape tp;
  attn::LoraVars lora{tp.constant(identity(d)), tp.constant(delta), d, static_cast<double>(d)};
  const ad::Var out = attn::apply_lora(tp, tp.constant(base), lora, tp.constant(tokens));
  Tensor updated = base;
  add_inplace(updated, delta);
  CHECK(max_abs_diff(tp.val(out), mm_nn(tokens, updated)) < 1e-12);
}

TEST_CASE("lora rank beyond the base dimension is rejected") {
  ad::Tape tp;
  const std::int64_t d = 4;
  attn::LoraVars lora{tp.constant(Tensor::zeros({d, 5})), tp.constant(Tensor::zeros({5, d})), 5, 1.0};
  CHECK_THROWS_AS(attn::apply_lora(tp, tp.constant(Tensor::zeros({d, d})), lora,
                                   tp.constant(Tensor::zeros({2, d}))),
                  ContractError);
}

TEST_CASE("post-softmax cross-condition weights are bitwise zero with the right support") {
  Rng rng(15);
  for (int trial = 0; trial < 25; ++trial) {
    const std::int64_t heads = 1 + rng.uniform_int(0, 1);
    const std::int64_t dk = 4;
    const std::int64_t d = heads * dk;
    const Segmentation seg{1 + rng.uniform_int(0, 2), 1 + rng.uniform_int(0, 3),
                           1 + rng.uniform_int(0, 3), 1 + rng.uniform_int(0, 3)};
    const Tensor tokens = random_tensor({seg.total(), d}, rng);
    const BranchMats w{random_proj(d, rng), random_proj(d, rng), random_proj(d, rng)};
    std::vector<Tensor> weights;
    attn::joint_attention_plain(tokens, seg, w, {}, {dk, 1e4}, heads, true, AttnImpl::Dense, nullptr,
                                &weights);
    REQUIRE(weights.size() == static_cast<std::size_t>(heads));
    for (const Tensor& wm : weights) {
      for (std::int64_t i = 0; i < seg.total(); ++i) {
        const bool ic1 = i >= seg.c1_start() && i < seg.c1_end();
        const bool ic2 = i >= seg.c2_start();
        for (std::int64_t j = 0; j < seg.total(); ++j) {
          const bool jc1 = j >= seg.c1_start() && j < seg.c1_end();
          const bool jc2 = j >= seg.c2_start();
          if ((ic1 && jc2) || (ic2 && jc1)) {
            CHECK(wm.at2(i, j) == 0.0);  // bitwise
          } else {
            CHECK(wm.at2(i, j) > 0.0);  // support matches the mask exactly
          }
        }
      }
    }
  }
}

TEST_CASE("gradients flow correctly through joint attention") {
  Rng rng(16);
  const std::int64_t d = 8, heads = 2, dk = 4;
  const Segmentation seg{1, 2, 2, 1};
  const Tensor tokens = random_tensor({seg.total(), d}, rng, 0.7);
  const BranchMats w{random_proj(d, rng), random_proj(d, rng), random_proj(d, rng)};
  const rope::PositionGrid pos =
      rope::build_positions(rope::Scheme::II, {1, 2}, {1, 2}, {1, 1}, 1);
  const Tensor mask = attn::build_mask(seg);
  const Tensor weight_probe = random_tensor({d, d}, rng, 0.4);

  // w.r.t. the token matrix
  auto token_fn = [&](ad::Tape& tp, ad::Var x) {
    const ad::Var out = attn::joint_attention(tp, x, seg, to_vars(tp, w), pos, {dk, 1e4}, heads,
                                              tp.constant(mask));
    return tp.sum_all(tp.mul(out, out));
  };
  CHECK(ad::grad_check(token_fn, tokens, 1e-5) < 1e-4);

  // w.r.t. one conditional key projection
  auto weight_fn = [&](ad::Tape& tp, ad::Var wk_c1) {
    BranchVars bv = to_vars(tp, w);
    bv.c1.k = wk_c1;
    const ad::Var out = attn::joint_attention(tp, tp.constant(tokens), seg, bv, pos, {dk, 1e4},
                                              heads, tp.constant(mask));
    return tp.sum_all(tp.mul(out, out));
  };
  CHECK(ad::grad_check(weight_fn, weight_probe, 1e-5) < 1e-4);
}

TEST_CASE("permuting tokens within a segment permutes only that segment's outputs") {
  Rng rng(17);
  const std::int64_t d = 8, heads = 2, dk = 4;
  const Segmentation seg{2, 3, 3, 2};
  const Tensor tokens = random_tensor({seg.total(), d}, rng);
  const BranchMats w{random_proj(d, rng), random_proj(d, rng), random_proj(d, rng)};
  rope::PositionGrid pos = rope::build_positions(rope::Scheme::II, {1, 3}, {1, 3}, {1, 2}, 2);
  const Tensor mask = attn::build_mask(seg);

  // swap noise tokens 0 and 2 (rows 2 and 4), with their positions
  Tensor permuted = tokens;
  rope::PositionGrid pos2 = pos;
  for (std::int64_t c = 0; c < d; ++c) std::swap(permuted.at2(2, c), permuted.at2(4, c));
  std::swap(pos2[2], pos2[4]);

  const Tensor base = attn::joint_attention_plain(tokens, seg, w, pos, {dk, 1e4}, heads, true,
                                                  AttnImpl::Dense, nullptr, nullptr);
  const Tensor perm = attn::joint_attention_plain(permuted, seg, w, pos2, {dk, 1e4}, heads, true,
                                                  AttnImpl::Dense, nullptr, nullptr);
  for (std::int64_t i = 0; i < seg.total(); ++i) {
    std::int64_t src = i;
    if (i == 2) src = 4;
    if (i == 4) src = 2;
    for (std::int64_t c = 0; c < d; ++c) {
      CHECK(perm.at2(i, c) == doctest::Approx(base.at2(src, c)).epsilon(1e-11));
    }
  }
}
