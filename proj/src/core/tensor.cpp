// SPDX-License-Identifier: Apache-2.0
#include "core/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace trydit {

static_assert(std::endian::native == std::endian::little,
              "tensor file i/o assumes a little-endian host");

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw DimensionError("negative extent in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
}

Tensor Tensor::zeros(Shape s) {
  auto n = shape_numel(s);
  return Tensor(std::move(s), std::vector<double>(static_cast<std::size_t>(n), 0.0));
}

Tensor Tensor::full(Shape s, double v) {
  auto n = shape_numel(s);
  return Tensor(std::move(s), std::vector<double>(static_cast<std::size_t>(n), v));
}

std::int64_t Tensor::rows() const {
  if (rank() != 2) throw DimensionError("rows(): tensor is not rank-2, shape " + shape_str(shape));
  return shape[0];
}

std::int64_t Tensor::cols() const {
  if (rank() != 2) throw DimensionError("cols(): tensor is not rank-2, shape " + shape_str(shape));
  return shape[1];
}

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

static void check_mm(const Tensor& a, const Tensor& b, const char* who) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw DimensionError(std::string(who) + ": operands must be rank-2, got " +
                         shape_str(a.shape) + " and " + shape_str(b.shape));
  }
}

Tensor mm_nn(const Tensor& a, const Tensor& b) {
  check_mm(a, b, "matmul");
  const std::int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  if (b.shape[0] != k) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
  Tensor c = Tensor::zeros({m, n});
  const double* pa = a.data.data();
  const double* pb = b.data.data();
  double* pc = c.data.data();
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t l = 0; l < k; ++l) {
      const double av = pa[i * k + l];
      if (av == 0.0) continue;
      const double* brow = pb + l * n;
      double* crow = pc + i * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

Tensor mm_nt(const Tensor& a, const Tensor& b) {
  check_mm(a, b, "matmul_nt");
  const std::int64_t m = a.shape[0], k = a.shape[1], n = b.shape[0];
  if (b.shape[1] != k) {
    throw DimensionError("matmul_nt: inner extents differ, " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
  Tensor c = Tensor::zeros({m, n});
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a.data.data() + i * k;
    double* crow = c.data.data() + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      const double* brow = b.data.data() + j * k;
      double s = 0.0;
      for (std::int64_t l = 0; l < k; ++l) s += arow[l] * brow[l];
      crow[j] = s;
    }
  }
  return c;
}

Tensor mm_tn(const Tensor& a, const Tensor& b) {
  check_mm(a, b, "matmul_tn");
  const std::int64_t k = a.shape[0], m = a.shape[1], n = b.shape[1];
  if (b.shape[0] != k) {
    throw DimensionError("matmul_tn: inner extents differ, " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
  Tensor c = Tensor::zeros({m, n});
  for (std::int64_t l = 0; l < k; ++l) {
    const double* arow = a.data.data() + l * m;
    const double* brow = b.data.data() + l * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c.data.data() + i * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

void add_inplace(Tensor& acc, const Tensor& t) {
  if (!acc.same_shape(t)) {
    throw DimensionError("add_inplace: shape mismatch " + shape_str(acc.shape) + " vs " + shape_str(t.shape));
  }
  for (std::size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += t.data[i];
}

static constexpr char kMagic[6] = {'P', 'T', 'N', 'S', 'R', '1'};

void write_tensor_file(const std::string& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for write: " + path);
  f.write(kMagic, 6);
  const std::uint32_t rank = static_cast<std::uint32_t>(t.rank());
  f.write(reinterpret_cast<const char*>(&rank), 4);
  for (auto d : t.shape) {
    if (d > 0xFFFFFFFFll) throw IoError("extent too large for tensor file");
    const std::uint32_t e = static_cast<std::uint32_t>(d);
    f.write(reinterpret_cast<const char*>(&e), 4);
  }
  std::vector<float> payload(t.data.size());
  for (std::size_t i = 0; i < t.data.size(); ++i) payload[i] = static_cast<float>(t.data[i]);
  f.write(reinterpret_cast<const char*>(payload.data()),
          static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!f) throw IoError("short write: " + path);
}

Tensor read_tensor_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for read: " + path);
  char magic[6];
  f.read(magic, 6);
  if (!f || std::memcmp(magic, kMagic, 6) != 0) throw IoError("bad tensor file magic: " + path);
  std::uint32_t rank = 0;
  f.read(reinterpret_cast<char*>(&rank), 4);
  if (!f || rank > 8) throw IoError("bad tensor file rank: " + path);
  Shape shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i) {
    std::uint32_t e = 0;
    f.read(reinterpret_cast<char*>(&e), 4);
    if (!f) throw IoError("truncated tensor file header: " + path);
    shape[i] = e;
  }
  const std::int64_t n = shape_numel(shape);
  std::vector<float> payload(static_cast<std::size_t>(n));
  f.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(n * sizeof(float)));
  if (!f) throw IoError("truncated tensor file payload: " + path);
  std::vector<double> data(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) data[static_cast<std::size_t>(i)] = payload[static_cast<std::size_t>(i)];
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace trydit
