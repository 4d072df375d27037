// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "core/rope.hpp"
#include "core/tape.hpp"
#include "core/tensor.hpp"

namespace trydit::attn {

// Contiguous spans of the joint sequence, in order:
// text, noise, reference (c1), garment (c2).
struct Segmentation {
  std::int64_t text = 0, noise = 0, reference = 0, garment = 0;

  std::int64_t total() const { return text + noise + reference + garment; }
  std::int64_t tn_len() const { return text + noise; }        // primary branch rows
  std::int64_t c1_start() const { return text + noise; }
  std::int64_t c1_end() const { return text + noise + reference; }
  std::int64_t c2_start() const { return c1_end(); }
  std::int64_t c2_end() const { return total(); }
  void validate() const;
};

// Additive L x L mask: sentinel at (i in c1, j in c2) and (i in c2, j in c1),
// zero everywhere else.
Tensor build_mask(const Segmentation& seg);

// Multiply-accumulate counts per stage of the attention computation.
struct FlopCounter {
  std::int64_t qkv_proj = 0;
  std::int64_t score = 0;
  std::int64_t weighted_sum = 0;
  std::int64_t out_proj = 0;

  std::int64_t total() const { return qkv_proj + score + weighted_sum + out_proj; }
  std::map<std::string, std::int64_t> as_map() const;
};

// Low-rank adapter on a frozen base weight: effective = base + (alpha/rank) * down * up
// with down [d_in, rank], up [rank, d_out]; up starts at zero.
struct LoraVars {
  ad::Var down, up;
  std::int64_t rank = 0;
  double alpha = 1.0;
};

ad::Var apply_lora(ad::Tape& tp, ad::Var base, const LoraVars& lora, ad::Var tokens);

struct ProjVars {
  ad::Var q, k, v, o;
  std::optional<LoraVars> lq, lk, lv, lo;
};

struct BranchVars {
  ProjVars tn, c1, c2;
};

// Joint masked attention over S = [T; X; C1; C2]. Each segment is
// projected by its branch (text and noise share the primary branch),
// rotary positions are applied to Q and K, the mask is added before the
// softmax, and each segment's output goes through its branch's output
// projection. Empty `pos` skips positional encoding. `weight_sink`, when
// given, receives each head's post-softmax weight matrix.
ad::Var joint_attention(ad::Tape& tp, ad::Var tokens, const Segmentation& seg, const BranchVars& w,
                        const rope::PositionGrid& pos, const rope::RopeConfig& rcfg,
                        std::int64_t heads, std::optional<ad::Var> mask,
                        std::vector<Tensor>* weight_sink = nullptr);

enum class AttnImpl { Dense, BlockSkip };

struct ProjMats {
  Tensor q, k, v, o;
};

struct BranchMats {
  ProjMats tn, c1, c2;
};

// Inference-path twin of joint_attention on raw tensors. Dense computes
// the full score matrix and masks it; BlockSkip never computes the
// c1<->c2 score blocks at all. Outputs agree within fp tolerance.
Tensor joint_attention_plain(const Tensor& tokens, const Segmentation& seg, const BranchMats& w,
                             const rope::PositionGrid& pos, const rope::RopeConfig& rcfg,
                             std::int64_t heads, bool use_mask, AttnImpl impl,
                             FlopCounter* flops = nullptr,
                             std::vector<Tensor>* weights_out = nullptr);

}  // namespace trydit::attn
