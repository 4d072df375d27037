// SPDX-License-Identifier: Apache-2.0
#include "core/tape.hpp"

#include <algorithm>
#include <cmath>

namespace trydit::ad {

const Tape::Node& Tape::node(Var v) const {
  if (!v.valid() || static_cast<std::size_t>(v.idx) >= nodes_.size()) {
    throw ContractError("invalid tape handle");
  }
  return nodes_[static_cast<std::size_t>(v.idx)];
}

Tape::Node& Tape::node(Var v) {
  return const_cast<Node&>(static_cast<const Tape*>(this)->node(v));
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(static_cast<std::int32_t>(nodes_.size() - 1));
}

const Tensor& Tape::val(Var v) const { return node(v).value; }

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

bool Tape::has_grad(Var v) const { return node(v).grad_set; }

const Tensor& Tape::grad(Var v) const {
  const Node& n = node(v);
  if (!n.grad_set) throw ContractError("no gradient accumulated for this node");
  return n.grad;
}

Tensor Tape::grad_or_zeros(Var v) const {
  const Node& n = node(v);
  if (n.grad_set) return n.grad;
  return Tensor::zeros(n.value.shape);
}

Var Tape::record(Tensor value, const std::vector<Var>& parents, BackwardFn fn) {
  bool rg = false;
  for (const Var& p : parents) rg = rg || node(p).requires_grad;
  Node n;
  n.value = std::move(value);
  n.requires_grad = rg;
  if (rg) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(static_cast<std::int32_t>(nodes_.size() - 1));
}

void Tape::accum_grad(Var v, const Tensor& g) {
  Node& n = node(v);
  if (!n.requires_grad) return;
  if (!g.same_shape(n.value)) {
    throw DimensionError("gradient shape " + shape_str(g.shape) + " does not match value shape " +
                         shape_str(n.value.shape));
  }
  if (!n.grad_set) {
    n.grad = g;
    n.grad_set = true;
  } else {
    add_inplace(n.grad, g);
  }
}

void Tape::backward(Var scalar_loss) {
  const Node& loss = node(scalar_loss);
  if (loss.value.numel() != 1) throw ContractError("backward: loss must be scalar");
  if (backward_done_) throw ContractError("backward: tape already differentiated");
  backward_done_ = true;
  if (!loss.requires_grad) return;
  accum_grad(scalar_loss, Tensor::full(loss.value.shape, 1.0));
  for (std::int32_t i = scalar_loss.idx; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || !n.grad_set || !n.backward) continue;
    n.backward(*this, n.grad, Var(i));
  }
}

// ---- elementwise with optional trailing-row broadcast ----

namespace {

struct Bcast {
  bool broadcast = false;     // b repeats across rows of a
  std::int64_t rows = 0, cols = 0;
};

Bcast bcast_info(const Tensor& a, const Tensor& b, const char* who) {
  if (a.same_shape(b)) {
    return {false, 1, a.numel()};
  }
  const std::int64_t cols = a.shape.empty() ? 1 : a.shape.back();
  const bool row_like = b.rank() == 1 || (b.rank() == 2 && b.shape[0] == 1);
  if (row_like && b.numel() == cols && a.numel() % cols == 0) {
    return {true, a.numel() / cols, cols};
  }
  throw DimensionError(std::string(who) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                       shape_str(b.shape));
}

}  // namespace

Var Tape::add(Var a, Var b) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  const Bcast bc = bcast_info(av, bv, "add");
  Tensor out = av;
  if (!bc.broadcast) {
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
  } else {
    for (std::int64_t r = 0; r < bc.rows; ++r)
      for (std::int64_t c = 0; c < bc.cols; ++c)
        out.data[static_cast<std::size_t>(r * bc.cols + c)] += bv.data[static_cast<std::size_t>(c)];
  }
  return record(std::move(out), {a, b}, [a, b, bc](Tape& t, const Tensor& g, Var) {
    t.accum_grad(a, g);
    if (!t.requires_grad(b)) return;
    if (!bc.broadcast) {
      t.accum_grad(b, g);
    } else {
      Tensor gb = Tensor::zeros(t.val(b).shape);
      for (std::int64_t r = 0; r < bc.rows; ++r)
        for (std::int64_t c = 0; c < bc.cols; ++c)
          gb.data[static_cast<std::size_t>(c)] += g.data[static_cast<std::size_t>(r * bc.cols + c)];
      t.accum_grad(b, gb);
    }
  });
}

Var Tape::sub(Var a, Var b) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  const Bcast bc = bcast_info(av, bv, "sub");
  Tensor out = av;
  if (!bc.broadcast) {
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv.data[i];
  } else {
    for (std::int64_t r = 0; r < bc.rows; ++r)
      for (std::int64_t c = 0; c < bc.cols; ++c)
        out.data[static_cast<std::size_t>(r * bc.cols + c)] -= bv.data[static_cast<std::size_t>(c)];
  }
  return record(std::move(out), {a, b}, [a, b, bc](Tape& t, const Tensor& g, Var) {
    t.accum_grad(a, g);
    if (!t.requires_grad(b)) return;
    Tensor gb = Tensor::zeros(t.val(b).shape);
    if (!bc.broadcast) {
      for (std::size_t i = 0; i < gb.data.size(); ++i) gb.data[i] = -g.data[i];
    } else {
      for (std::int64_t r = 0; r < bc.rows; ++r)
        for (std::int64_t c = 0; c < bc.cols; ++c)
          gb.data[static_cast<std::size_t>(c)] -= g.data[static_cast<std::size_t>(r * bc.cols + c)];
    }
    t.accum_grad(b, gb);
  });
}

Var Tape::mul(Var a, Var b) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  const Bcast bc = bcast_info(av, bv, "mul");
  Tensor out = av;
  if (!bc.broadcast) {
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
  } else {
    for (std::int64_t r = 0; r < bc.rows; ++r)
      for (std::int64_t c = 0; c < bc.cols; ++c)
        out.data[static_cast<std::size_t>(r * bc.cols + c)] *= bv.data[static_cast<std::size_t>(c)];
  }
  return record(std::move(out), {a, b}, [a, b, bc](Tape& t, const Tensor& g, Var) {
    const Tensor& avv = t.val(a);
    const Tensor& bvv = t.val(b);
    if (t.requires_grad(a)) {
      Tensor ga = Tensor::zeros(avv.shape);
      if (!bc.broadcast) {
        for (std::size_t i = 0; i < ga.data.size(); ++i) ga.data[i] = g.data[i] * bvv.data[i];
      } else {
        for (std::int64_t r = 0; r < bc.rows; ++r)
          for (std::int64_t c = 0; c < bc.cols; ++c)
            ga.data[static_cast<std::size_t>(r * bc.cols + c)] =
                g.data[static_cast<std::size_t>(r * bc.cols + c)] * bvv.data[static_cast<std::size_t>(c)];
      }
      t.accum_grad(a, ga);
    }
    if (t.requires_grad(b)) {
      Tensor gb = Tensor::zeros(bvv.shape);
      if (!bc.broadcast) {
        for (std::size_t i = 0; i < gb.data.size(); ++i) gb.data[i] = g.data[i] * avv.data[i];
      } else {
        for (std::int64_t r = 0; r < bc.rows; ++r)
          for (std::int64_t c = 0; c < bc.cols; ++c)
            gb.data[static_cast<std::size_t>(c)] +=
                g.data[static_cast<std::size_t>(r * bc.cols + c)] * avv.data[static_cast<std::size_t>(r * bc.cols + c)];
      }
      t.accum_grad(b, gb);
    }
  });
}

Var Tape::scale(Var a, double c) {
  Tensor out = val(a);
  for (double& v : out.data) v *= c;
  return record(std::move(out), {a}, [a, c](Tape& t, const Tensor& g, Var) {
    Tensor ga = g;
    for (double& v : ga.data) v *= c;
    t.accum_grad(a, ga);
  });
}

Var Tape::add_scalar(Var a, double c) {
  Tensor out = val(a);
  for (double& v : out.data) v += c;
  return record(std::move(out), {a},
                [a](Tape& t, const Tensor& g, Var) { t.accum_grad(a, g); });
}

Var Tape::matmul(Var a, Var b) {
  Tensor out = mm_nn(val(a), val(b));
  return record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g, Var) {
    if (t.requires_grad(a)) t.accum_grad(a, mm_nt(g, t.val(b)));
    if (t.requires_grad(b)) t.accum_grad(b, mm_tn(t.val(a), g));
  });
}

namespace {

Tensor transpose2d(const Tensor& x) {
  const std::int64_t m = x.rows(), n = x.cols();
  Tensor out = Tensor::zeros({n, m});
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) out.at2(j, i) = x.at2(i, j);
  return out;
}

void axis_extents(const Shape& s, int axis, std::int64_t& outer, std::int64_t& alen, std::int64_t& inner) {
  if (axis < 0 || axis >= static_cast<int>(s.size())) throw DimensionError("axis out of range");
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  alen = s[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace

Var Tape::transpose(Var a) {
  Tensor out = transpose2d(val(a));
  return record(std::move(out), {a}, [a](Tape& t, const Tensor& g, Var) {
    t.accum_grad(a, transpose2d(g));
  });
}

Var Tape::reshape(Var a, Shape s) {
  const Tensor& av = val(a);
  if (shape_numel(s) != av.numel()) {
    throw DimensionError("reshape: element count mismatch " + shape_str(av.shape) + " -> " + shape_str(s));
  }
  Tensor out(s, av.data);
  return record(std::move(out), {a}, [a](Tape& t, const Tensor& g, Var) {
    t.accum_grad(a, Tensor(t.val(a).shape, g.data));
  });
}

Var Tape::concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no operands");
  const Tensor& first = val(parts[0]);
  Shape out_shape = first.shape;
  std::int64_t outer, alen0, inner;
  axis_extents(first.shape, axis, outer, alen0, inner);
  std::int64_t total_axis = 0;
  for (const Var& p : parts) {
    const Tensor& pv = val(p);
    if (pv.rank() != first.rank()) throw DimensionError("concat: rank mismatch");
    for (int d = 0; d < first.rank(); ++d) {
      if (d != axis && pv.shape[static_cast<std::size_t>(d)] != first.shape[static_cast<std::size_t>(d)]) {
        throw DimensionError("concat: extent mismatch off the concat axis");
      }
    }
    total_axis += pv.shape[static_cast<std::size_t>(axis)];
  }
  out_shape[static_cast<std::size_t>(axis)] = total_axis;
  Tensor out = Tensor::zeros(out_shape);
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const Var& p : parts) {
    const Tensor& pv = val(p);
    const std::int64_t alen = pv.shape[static_cast<std::size_t>(axis)];
    offsets.push_back(off);
    for (std::int64_t o = 0; o < outer; ++o) {
      const double* src = pv.data.data() + o * alen * inner;
      double* dst = out.data.data() + (o * total_axis + off) * inner;
      std::copy(src, src + alen * inner, dst);
    }
    off += alen;
  }
  std::vector<Var> parents = parts;
  const int ax = axis;
  return record(std::move(out), parents,
                [parents, offsets, ax](Tape& t, const Tensor& g, Var) {
    std::int64_t outer2, total, inner2;
    axis_extents(g.shape, ax, outer2, total, inner2);
    for (std::size_t k = 0; k < parents.size(); ++k) {
      if (!t.requires_grad(parents[k])) continue;
      const Tensor& pv = t.val(parents[k]);
      const std::int64_t alen = pv.shape[static_cast<std::size_t>(ax)];
      Tensor gp = Tensor::zeros(pv.shape);
      for (std::int64_t o = 0; o < outer2; ++o) {
        const double* src = g.data.data() + (o * total + offsets[k]) * inner2;
        double* dst = gp.data.data() + o * alen * inner2;
        std::copy(src, src + alen * inner2, dst);
      }
      t.accum_grad(parents[k], gp);
    }
  });
}

Var Tape::slice(Var a, int axis, std::int64_t start, std::int64_t len) {
  const Tensor& av = val(a);
  std::int64_t outer, alen, inner;
  axis_extents(av.shape, axis, outer, alen, inner);
  if (start < 0 || len < 0 || start + len > alen) {
    throw DimensionError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of extent " + std::to_string(alen));
  }
  Shape out_shape = av.shape;
  out_shape[static_cast<std::size_t>(axis)] = len;
  Tensor out = Tensor::zeros(out_shape);
  for (std::int64_t o = 0; o < outer; ++o) {
    const double* src = av.data.data() + (o * alen + start) * inner;
    double* dst = out.data.data() + o * len * inner;
    std::copy(src, src + len * inner, dst);
  }
  const int ax = axis;
  return record(std::move(out), {a}, [a, ax, start, len](Tape& t, const Tensor& g, Var) {
    const Tensor& av2 = t.val(a);
    std::int64_t outer2, alen2, inner2;
    axis_extents(av2.shape, ax, outer2, alen2, inner2);
    Tensor ga = Tensor::zeros(av2.shape);
    for (std::int64_t o = 0; o < outer2; ++o) {
      const double* src = g.data.data() + o * len * inner2;
      double* dst = ga.data.data() + (o * alen2 + start) * inner2;
      std::copy(src, src + len * inner2, dst);
    }
    t.accum_grad(a, ga);
  });
}

Var Tape::silu(Var a) {
  Tensor out = val(a);
  for (double& v : out.data) {
    const double s = 1.0 / (1.0 + std::exp(-v));
    v = v * s;
  }
  return record(std::move(out), {a}, [a](Tape& t, const Tensor& g, Var) {
    const Tensor& x = t.val(a);
    Tensor ga = Tensor::zeros(x.shape);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
      const double xv = x.data[i];
      const double s = 1.0 / (1.0 + std::exp(-xv));
      ga.data[i] = g.data[i] * s * (1.0 + xv * (1.0 - s));
    }
    t.accum_grad(a, ga);
  });
}

Var Tape::rms_norm(Var a, double eps, Var gain) {
  const Tensor& x = val(a);
  const Tensor& gn = val(gain);
  if (x.shape.empty()) throw DimensionError("rms_norm: rank-0 input");
  const std::int64_t n = x.shape.back();
  if (gn.numel() != n) {
    throw DimensionError("rms_norm: gain length " + std::to_string(gn.numel()) +
                         " does not match last dim " + std::to_string(n));
  }
  const std::int64_t rows = x.numel() / n;
  Tensor out = Tensor::zeros(x.shape);
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = x.data.data() + r * n;
    double* yr = out.data.data() + r * n;
    double s = 0.0;
    for (std::int64_t j = 0; j < n; ++j) s += xr[j] * xr[j];
    const double rms = std::sqrt(s / static_cast<double>(n) + eps);
    for (std::int64_t j = 0; j < n; ++j) yr[j] = xr[j] / rms * gn.data[static_cast<std::size_t>(j)];
  }
  return record(std::move(out), {a, gain}, [a, gain, eps, n, rows](Tape& t, const Tensor& g, Var) {
    const Tensor& x2 = t.val(a);
    const Tensor& gn2 = t.val(gain);
    Tensor ga = Tensor::zeros(x2.shape);
    Tensor ggain = Tensor::zeros(gn2.shape);
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* xr = x2.data.data() + r * n;
      const double* gr = g.data.data() + r * n;
      double* gar = ga.data.data() + r * n;
      double s = 0.0;
      for (std::int64_t j = 0; j < n; ++j) s += xr[j] * xr[j];
      const double rms = std::sqrt(s / static_cast<double>(n) + eps);
      const double rms3 = rms * rms * rms;
      double dot = 0.0;
      for (std::int64_t j = 0; j < n; ++j) dot += gr[j] * gn2.data[static_cast<std::size_t>(j)] * xr[j];
      for (std::int64_t j = 0; j < n; ++j) {
        gar[j] = gr[j] * gn2.data[static_cast<std::size_t>(j)] / rms -
                 xr[j] * dot / (static_cast<double>(n) * rms3);
        ggain.data[static_cast<std::size_t>(j)] += gr[j] * xr[j] / rms;
      }
    }
    t.accum_grad(a, ga);
    t.accum_grad(gain, ggain);
  });
}

Var Tape::softmax_lastdim(Var a) { return softmax_impl(a, Var(), false); }

Var Tape::softmax_lastdim(Var a, Var additive_mask) { return softmax_impl(a, additive_mask, true); }

Var Tape::softmax_impl(Var a, Var mask, bool has_mask) {
  const Tensor& x = val(a);
  if (x.shape.empty()) throw DimensionError("softmax: rank-0 input");
  const Tensor* mv = has_mask ? &val(mask) : nullptr;
  if (mv && !mv->same_shape(x)) {
    throw DimensionError("softmax: mask shape " + shape_str(mv->shape) + " does not match input " +
                         shape_str(x.shape));
  }
  const std::int64_t n = x.shape.back();
  const std::int64_t rows = x.numel() / n;
  Tensor out = Tensor::zeros(x.shape);
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = x.data.data() + r * n;
    const double* mr = mv ? mv->data.data() + r * n : nullptr;
    double* yr = out.data.data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::int64_t j = 0; j < n; ++j) {
      if (mr && is_masked_logit(mr[j])) continue;
      const double v = xr[j] + (mr ? mr[j] : 0.0);
      if (!any || v > mx) mx = v;
      any = true;
    }
    if (!any) {
      // fully masked row: defined as all-zeros, flagged
      ++fully_masked_rows_;
      continue;
    }
    double sum = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      if (mr && is_masked_logit(mr[j])) {
        yr[j] = 0.0;
        continue;
      }
      const double e = std::exp(xr[j] + (mr ? mr[j] : 0.0) - mx);
      yr[j] = e;
      sum += e;
    }
    for (std::int64_t j = 0; j < n; ++j) {
      if (mr && is_masked_logit(mr[j])) continue;
      yr[j] /= sum;
    }
  }
  std::vector<Var> parents = has_mask ? std::vector<Var>{a, mask} : std::vector<Var>{a};
  return record(std::move(out), parents, [a, n, rows](Tape& t, const Tensor& g, Var out_var) {
    const Tensor& y = t.val(out_var);
    Tensor ga = Tensor::zeros(y.shape);
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* yr = y.data.data() + r * n;
      const double* gr = g.data.data() + r * n;
      double* gar = ga.data.data() + r * n;
      double dot = 0.0;
      for (std::int64_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
      for (std::int64_t j = 0; j < n; ++j) gar[j] = yr[j] * (gr[j] - dot);
    }
    t.accum_grad(a, ga);
    // mask is a constant block structure; it gets no gradient
  });
}

Var Tape::sum_all(Var a) {
  const Tensor& x = val(a);
  double s = 0.0;
  for (double v : x.data) s += v;
  return record(Tensor::scalar(s), {a}, [a](Tape& t, const Tensor& g, Var) {
    t.accum_grad(a, Tensor::full(t.val(a).shape, g.data[0]));
  });
}

Var Tape::mean_all(Var a) {
  const Tensor& x = val(a);
  const double n = static_cast<double>(x.numel());
  double s = 0.0;
  for (double v : x.data) s += v;
  return record(Tensor::scalar(s / n), {a}, [a, n](Tape& t, const Tensor& g, Var) {
    t.accum_grad(a, Tensor::full(t.val(a).shape, g.data[0] / n));
  });
}

}  // namespace trydit::ad
