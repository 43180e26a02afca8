// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace upcycle {

// Dense rank-1 / rank-2 float32 tensor, row-major. Reductions (matmul, norms,
// softmax, power iteration) accumulate in double and round once on output.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> shape_, std::vector<float> data_);

  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor vec(std::vector<float> values);
  static Tensor mat(std::size_t rows, std::size_t cols, std::vector<float> values);

  std::size_t rank() const { return shape.size(); }
  std::size_t size() const { return data.size(); }
  std::size_t rows() const { return shape.at(0); }
  std::size_t cols() const { return rank() == 2 ? shape.at(1) : 1; }

  float operator[](std::size_t i) const { return data[i]; }
  float& operator[](std::size_t i) { return data[i]; }
  float at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }
  float& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

bool operator==(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

// Standard matrix product, per-cell double accumulation over ascending k.
Tensor matmul(const Tensor& a, const Tensor& b);
// m [r x c] times vector [c] -> [r]
Tensor matvec(const Tensor& m, const Tensor& v);

// Max-subtracted softmax over a rank-1 tensor.
Tensor softmax(const Tensor& logits);

// Unit top right-singular vector of m via power iteration on m^T m from a
// seeded random start. Sign fixed so the largest-magnitude entry is positive
// (lowest index on magnitude ties). Early exit when successive iterates
// differ by < 1e-10 in L2.
Tensor top_right_singular_vector(const Tensor& m, int iters = 64, std::uint64_t seed = 0);

double dot64(std::span<const float> a, std::span<const float> b);
double norm64(std::span<const float> a);

// Throws ArgumentError if any element is non-finite.
void require_finite(const Tensor& t, const char* what);

}  // namespace upcycle
