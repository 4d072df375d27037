// SPDX-License-Identifier: Apache-2.0
#include "core/attention.hpp"

#include <cmath>

namespace trydit::attn {

void Segmentation::validate() const {
  if (text < 0 || noise < 0 || reference < 0 || garment < 0) {
    throw ContractError("segmentation spans must be non-negative");
  }
  if (total() <= 0) throw ContractError("segmentation covers no tokens");
}

Tensor build_mask(const Segmentation& seg) {
  seg.validate();
  const std::int64_t L = seg.total();
  Tensor m = Tensor::zeros({L, L});
  for (std::int64_t i = seg.c1_start(); i < seg.c1_end(); ++i)
    for (std::int64_t j = seg.c2_start(); j < seg.c2_end(); ++j) {
      m.at2(i, j) = ad::kMaskedSentinel;
      m.at2(j, i) = ad::kMaskedSentinel;
    }
  return m;
}

std::map<std::string, std::int64_t> FlopCounter::as_map() const {
  return {{"qkv_proj", qkv_proj},
          {"score", score},
          {"weighted_sum", weighted_sum},
          {"out_proj", out_proj},
          {"total", total()}};
}

ad::Var apply_lora(ad::Tape& tp, ad::Var base, const LoraVars& lora, ad::Var tokens) {
  const Tensor& bw = tp.val(base);
  const Tensor& dn = tp.val(lora.down);
  const Tensor& up = tp.val(lora.up);
  if (bw.rank() != 2) throw DimensionError("lora base must be rank-2");
  if (lora.rank <= 0 || lora.rank > std::min(bw.shape[0], bw.shape[1])) {
    throw ContractError("lora rank " + std::to_string(lora.rank) + " out of range for base " +
                        shape_str(bw.shape));
  }
  if (dn.shape != Shape{bw.shape[0], lora.rank} || up.shape != Shape{lora.rank, bw.shape[1]}) {
    throw DimensionError("lora factor shapes do not match base " + shape_str(bw.shape));
  }
  ad::Var main = tp.matmul(tokens, base);
  ad::Var low = tp.matmul(tp.matmul(tokens, lora.down), lora.up);
  return tp.add(main, tp.scale(low, lora.alpha / static_cast<double>(lora.rank)));
}

namespace {

ad::Var project(ad::Tape& tp, ad::Var tokens, ad::Var weight, const std::optional<LoraVars>& lora) {
  if (lora) return apply_lora(tp, weight, *lora, tokens);
  return tp.matmul(tokens, weight);
}

struct SegSpan {
  std::int64_t start, len;
  const ProjVars* proj;
};

}  // namespace

ad::Var joint_attention(ad::Tape& tp, ad::Var tokens, const Segmentation& seg, const BranchVars& w,
                        const rope::PositionGrid& pos, const rope::RopeConfig& rcfg,
                        std::int64_t heads, std::optional<ad::Var> mask,
                        std::vector<Tensor>* weight_sink) {
  seg.validate();
  const Tensor& tv = tp.val(tokens);
  const std::int64_t L = seg.total();
  if (tv.rank() != 2 || tv.shape[0] != L) {
    throw ContractError("joint_attention: tokens " + shape_str(tv.shape) +
                        " do not match segmentation length " + std::to_string(L));
  }
  const std::int64_t d = tv.shape[1];
  if (heads <= 0 || d % heads != 0) {
    throw ContractError("width " + std::to_string(d) + " not divisible by heads " + std::to_string(heads));
  }
  const std::int64_t dk = d / heads;
  if (!pos.empty() && rcfg.head_dim != dk) {
    throw ContractError("rope head_dim " + std::to_string(rcfg.head_dim) + " != d/heads " +
                        std::to_string(dk));
  }

  const SegSpan spans[3] = {{0, seg.tn_len(), &w.tn},
                            {seg.c1_start(), seg.reference, &w.c1},
                            {seg.c2_start(), seg.garment, &w.c2}};

  std::vector<ad::Var> q_parts, k_parts, v_parts;
  for (const SegSpan& s : spans) {
    if (s.len == 0) continue;
    ad::Var z = tp.slice(tokens, 0, s.start, s.len);
    q_parts.push_back(project(tp, z, s.proj->q, s.proj->lq));
    k_parts.push_back(project(tp, z, s.proj->k, s.proj->lk));
    v_parts.push_back(project(tp, z, s.proj->v, s.proj->lv));
  }
  ad::Var q = q_parts.size() == 1 ? q_parts[0] : tp.concat(q_parts, 0);
  ad::Var k = k_parts.size() == 1 ? k_parts[0] : tp.concat(k_parts, 0);
  ad::Var v = v_parts.size() == 1 ? v_parts[0] : tp.concat(v_parts, 0);

  if (!pos.empty()) {
    q = rope::apply_rope(tp, q, pos, heads, rcfg);
    k = rope::apply_rope(tp, k, pos, heads, rcfg);
  }

  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<ad::Var> head_outs;
  head_outs.reserve(static_cast<std::size_t>(heads));
  for (std::int64_t h = 0; h < heads; ++h) {
    ad::Var qh = tp.slice(q, 1, h * dk, dk);
    ad::Var kh = tp.slice(k, 1, h * dk, dk);
    ad::Var vh = tp.slice(v, 1, h * dk, dk);
    ad::Var scores = tp.scale(tp.matmul(qh, tp.transpose(kh)), inv_sqrt_dk);
    ad::Var weights = mask ? tp.softmax_lastdim(scores, *mask) : tp.softmax_lastdim(scores);
    if (weight_sink) weight_sink->push_back(tp.val(weights));
    head_outs.push_back(tp.matmul(weights, vh));
  }
  ad::Var o = head_outs.size() == 1 ? head_outs[0] : tp.concat(head_outs, 1);

  std::vector<ad::Var> out_parts;
  for (const SegSpan& s : spans) {
    if (s.len == 0) continue;
    ad::Var ob = tp.slice(o, 0, s.start, s.len);
    out_parts.push_back(project(tp, ob, s.proj->o, s.proj->lo));
  }
  return out_parts.size() == 1 ? out_parts[0] : tp.concat(out_parts, 0);
}

namespace {

struct Interval {
  std::int64_t start, end;
};

// Key ranges a query row may attend to. With the mask on, c1 rows see
// [0, c2_start) and c2 rows see [0, tn_len) plus their own span.
int allowed_intervals(const Segmentation& seg, std::int64_t i, bool use_mask, Interval out[2]) {
  const std::int64_t L = seg.total();
  if (!use_mask || i < seg.c1_start()) {
    out[0] = {0, L};
    return 1;
  }
  if (i < seg.c1_end()) {
    out[0] = {0, seg.c2_start()};
    return 1;
  }
  out[0] = {0, seg.tn_len()};
  out[1] = {seg.c2_start(), L};
  return 2;
}

Tensor project_plain(const Tensor& tokens, std::int64_t start, std::int64_t len, const Tensor& w,
                     FlopCounter* flops) {
  Tensor z = Tensor::zeros({len, tokens.shape[1]});
  for (std::int64_t i = 0; i < len; ++i)
    for (std::int64_t j = 0; j < tokens.shape[1]; ++j) z.at2(i, j) = tokens.at2(start + i, j);
  if (flops) flops->qkv_proj += len * w.shape[0] * w.shape[1];
  return mm_nn(z, w);
}

}  // namespace

Tensor joint_attention_plain(const Tensor& tokens, const Segmentation& seg, const BranchMats& w,
                             const rope::PositionGrid& pos, const rope::RopeConfig& rcfg,
                             std::int64_t heads, bool use_mask, AttnImpl impl, FlopCounter* flops,
                             std::vector<Tensor>* weights_out) {
  seg.validate();
  const std::int64_t L = seg.total();
  if (tokens.rank() != 2 || tokens.shape[0] != L) {
    throw ContractError("joint_attention_plain: tokens " + shape_str(tokens.shape) +
                        " do not match segmentation length " + std::to_string(L));
  }
  const std::int64_t d = tokens.shape[1];
  if (heads <= 0 || d % heads != 0) {
    throw ContractError("width " + std::to_string(d) + " not divisible by heads " + std::to_string(heads));
  }
  const std::int64_t dk = d / heads;
  if (!pos.empty() && rcfg.head_dim != dk) {
    throw ContractError("rope head_dim " + std::to_string(rcfg.head_dim) + " != d/heads " +
                        std::to_string(dk));
  }

  struct Span {
    std::int64_t start, len;
    const ProjMats* m;
  };
  const Span spans[3] = {{0, seg.tn_len(), &w.tn},
                         {seg.c1_start(), seg.reference, &w.c1},
                         {seg.c2_start(), seg.garment, &w.c2}};

  Tensor q = Tensor::zeros({L, d}), k = Tensor::zeros({L, d}), v = Tensor::zeros({L, d});
  for (const Span& s : spans) {
    if (s.len == 0) continue;
    Tensor qb = project_plain(tokens, s.start, s.len, s.m->q, flops);
    Tensor kb = project_plain(tokens, s.start, s.len, s.m->k, flops);
    Tensor vb = project_plain(tokens, s.start, s.len, s.m->v, flops);
    for (std::int64_t i = 0; i < s.len; ++i)
      for (std::int64_t j = 0; j < d; ++j) {
        q.at2(s.start + i, j) = qb.at2(i, j);
        k.at2(s.start + i, j) = kb.at2(i, j);
        v.at2(s.start + i, j) = vb.at2(i, j);
      }
  }

  if (!pos.empty()) {
    q = rope::apply_rope_plain(q, pos, heads, rcfg);
    k = rope::apply_rope_plain(k, pos, heads, rcfg);
  }

  const bool skip = impl == AttnImpl::BlockSkip;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  Tensor attn_out = Tensor::zeros({L, d});
  std::vector<double> logits(static_cast<std::size_t>(L));
  for (std::int64_t h = 0; h < heads; ++h) {
    Tensor* wmat = nullptr;
    if (weights_out) {
      weights_out->push_back(Tensor::zeros({L, L}));
      wmat = &weights_out->back();
    }
    for (std::int64_t i = 0; i < L; ++i) {
      Interval iv[2];
      const int niv = skip ? allowed_intervals(seg, i, use_mask, iv) : 1;
      if (!skip) iv[0] = {0, L};
      const double* qi = q.data.data() + i * d + h * dk;

      double mx = 0.0;
      bool any = false;
      for (int t = 0; t < niv; ++t) {
        for (std::int64_t j = iv[t].start; j < iv[t].end; ++j) {
          if (!skip && use_mask) {
            // dense path: compute everything, mask afterwards
          }
          const double* kj = k.data.data() + j * d + h * dk;
          double s = 0.0;
          for (std::int64_t c = 0; c < dk; ++c) s += qi[c] * kj[c];
          s *= inv_sqrt_dk;
          if (flops) flops->score += dk;
          bool masked = false;
          if (!skip && use_mask) {
            const bool i_c1 = i >= seg.c1_start() && i < seg.c1_end();
            const bool i_c2 = i >= seg.c2_start();
            const bool j_c1 = j >= seg.c1_start() && j < seg.c1_end();
            const bool j_c2 = j >= seg.c2_start();
            masked = (i_c1 && j_c2) || (i_c2 && j_c1);
          }
          logits[static_cast<std::size_t>(j)] = masked ? ad::kMaskedSentinel : s;
          if (!masked && (!any || s > mx)) {
            mx = s;
            any = true;
          }
        }
      }
      if (!any) continue;  // cannot happen under this mask; every row sees tn

      double sum = 0.0;
      for (int t = 0; t < niv; ++t) {
        for (std::int64_t j = iv[t].start; j < iv[t].end; ++j) {
          double& lg = logits[static_cast<std::size_t>(j)];
          if (ad::is_masked_logit(lg)) {
            lg = 0.0;
            continue;
          }
          lg = std::exp(lg - mx);
          sum += lg;
        }
      }
      double* orow = attn_out.data.data() + i * d + h * dk;
      for (int t = 0; t < niv; ++t) {
        for (std::int64_t j = iv[t].start; j < iv[t].end; ++j) {
          const double wj = logits[static_cast<std::size_t>(j)] / sum;
          if (wmat) wmat->at2(i, j) = wj;
          const double* vj = v.data.data() + j * d + h * dk;
          for (std::int64_t c = 0; c < dk; ++c) orow[c] += wj * vj[c];
          if (flops) flops->weighted_sum += dk;
        }
      }
    }
  }

  Tensor out = Tensor::zeros({L, d});
  for (const Span& s : spans) {
    if (s.len == 0) continue;
    Tensor ob = Tensor::zeros({s.len, d});
    for (std::int64_t i = 0; i < s.len; ++i)
      for (std::int64_t j = 0; j < d; ++j) ob.at2(i, j) = attn_out.at2(s.start + i, j);
    Tensor yb = mm_nn(ob, s.m->o);
    if (flops) flops->out_proj += s.len * d * d;
    for (std::int64_t i = 0; i < s.len; ++i)
      for (std::int64_t j = 0; j < d; ++j) out.at2(s.start + i, j) = yb.at2(i, j);
  }
  return out;
}

}  // namespace trydit::attn
