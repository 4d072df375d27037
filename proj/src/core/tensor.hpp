// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "core/errors.hpp"

namespace trydit {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major value tensor, 64-bit scalars. Gradients live on the
// tape (see tape.hpp), not here.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> d);

  static Tensor zeros(Shape s);
  static Tensor full(Shape s, double v);
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }

  // rank-2 accessors
  std::int64_t rows() const;
  std::int64_t cols() const;
  double& at2(std::int64_t i, std::int64_t j) { return data[static_cast<std::size_t>(i * cols() + j)]; }
  double at2(std::int64_t i, std::int64_t j) const { return data[static_cast<std::size_t>(i * cols() + j)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
};

// C = A[m,k] * B[k,n]
Tensor mm_nn(const Tensor& a, const Tensor& b);
// C = A[m,k] * B[n,k]^T
Tensor mm_nt(const Tensor& a, const Tensor& b);
// C = A[k,m]^T * B[k,n]
Tensor mm_tn(const Tensor& a, const Tensor& b);

// acc += t (shapes must match)
void add_inplace(Tensor& acc, const Tensor& t);

// Portable tensor file: magic "PTNSR1", little-endian u32 rank,
// u32 dims[rank], f32 payload row-major.
void write_tensor_file(const std::string& path, const Tensor& t);
Tensor read_tensor_file(const std::string& path);

}  // namespace trydit
