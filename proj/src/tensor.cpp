// SPDX-License-Identifier: Apache-2.0
#include "upcycle/tensor.hpp"

#include <cmath>
#include <string>

#include "upcycle/errors.hpp"
#include "upcycle/rng.hpp"

namespace upcycle {

namespace {

std::size_t checked_numel(const std::vector<std::size_t>& shape) {
  if (shape.empty() || shape.size() > 2) {
    throw DimensionError("tensor rank must be 1 or 2, got " + std::to_string(shape.size()));
  }
  std::size_t n = 1;
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive");
    n *= d;
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape_, std::vector<float> data_)
    : shape(std::move(shape_)), data(std::move(data_)) {
  if (checked_numel(shape) != data.size()) {
    throw DimensionError("tensor data length does not match shape");
  }
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
  std::size_t n = checked_numel(shape);
  return Tensor(std::move(shape), std::vector<float>(n, 0.0f));
}

Tensor Tensor::vec(std::vector<float> values) {
  std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::mat(std::size_t rows, std::size_t cols, std::vector<float> values) {
  return Tensor({rows, cols}, std::move(values));
}

bool operator==(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape && a.data == b.data;
}

void require_finite(const Tensor& t, const char* what) {
  for (float v : t.data) {
    if (!std::isfinite(v)) {
      throw ArgumentError(std::string(what) + ": non-finite element");
    }
  }
}

namespace {

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, const char* what, F f) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(what) + ": shape mismatch");
  }
  Tensor out = a;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = f(a.data[i], b.data[i]);
  require_finite(out, what);
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return zip(a, b, "add", [](float x, float y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return zip(a, b, "sub", [](float x, float y) { return x - y; });
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = a;
  for (float& v : out.data) v = static_cast<float>(static_cast<double>(v) * s);
  require_finite(out, "scale");
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw DimensionError("matmul: both operands must be rank 2");
  }
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree (" + std::to_string(a.cols()) +
                         " vs " + std::to_string(b.rows()) + ")");
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        acc += static_cast<double>(a.data[i * k + p]) * static_cast<double>(b.data[p * n + j]);
      }
      out.data[i * n + j] = static_cast<float>(acc);
    }
  }
  require_finite(out, "matmul");
  return out;
}

Tensor matvec(const Tensor& m, const Tensor& v) {
  if (m.rank() != 2 || v.rank() != 1) {
    throw DimensionError("matvec: expects rank-2 matrix and rank-1 vector");
  }
  if (m.cols() != v.size()) {
    throw DimensionError("matvec: dimensions disagree");
  }
  Tensor out = Tensor::zeros({m.rows()});
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) {
      acc += static_cast<double>(m.data[i * m.cols() + j]) * static_cast<double>(v.data[j]);
    }
    out.data[i] = static_cast<float>(acc);
  }
  require_finite(out, "matvec");
  return out;
}

Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 1 || logits.size() == 0) {
    throw DimensionError("softmax: expects a nonempty rank-1 tensor");
  }
  double mx = logits.data[0];
  for (float v : logits.data) mx = std::max(mx, static_cast<double>(v));
  std::vector<double> e(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    e[i] = std::exp(static_cast<double>(logits.data[i]) - mx);
    sum += e[i];
  }
  Tensor out = Tensor::zeros({logits.size()});
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out.data[i] = static_cast<float>(e[i] / sum);
  }
  return out;
}

double dot64(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  }
  return acc;
}

double norm64(std::span<const float> a) { return std::sqrt(dot64(a, a)); }

Tensor top_right_singular_vector(const Tensor& m, int iters, std::uint64_t seed) {
  if (m.rank() != 2) throw DimensionError("top_right_singular_vector: expects rank 2");
  if (iters < 1) throw ArgumentError("top_right_singular_vector: iters must be >= 1");
  bool nonzero = false;
  for (float v : m.data) {
    if (v != 0.0f) {
      nonzero = true;
      break;
    }
  }
  if (!nonzero) {
    throw DegenerateInputError("top_right_singular_vector: zero matrix");
  }

  const std::size_t p = m.rows(), q = m.cols();
  // gram = m^T m, exact f32 products accumulated in double
  std::vector<double> gram(q * q, 0.0);
  for (std::size_t r = 0; r < p; ++r) {
    const float* row = &m.data[r * q];
    for (std::size_t i = 0; i < q; ++i) {
      for (std::size_t j = 0; j < q; ++j) {
        gram[i * q + j] += static_cast<double>(row[i]) * static_cast<double>(row[j]);
      }
    }
  }

  SplitMix64 rng(hash_combine(seed, 0x705741ull));
  std::vector<double> v(q), next(q);
  auto randomize = [&] {
    double n2 = 0.0;
    do {
      n2 = 0.0;
      for (double& x : v) {
        x = rng.gaussian();
        n2 += x * x;
      }
    } while (n2 == 0.0);
    double inv = 1.0 / std::sqrt(n2);
    for (double& x : v) x *= inv;
  };
  randomize();

  for (int it = 0; it < iters; ++it) {
    for (std::size_t i = 0; i < q; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < q; ++j) acc += gram[i * q + j] * v[j];
      next[i] = acc;
    }
    double n2 = 0.0;
    for (double x : next) n2 += x * x;
    if (n2 == 0.0) {
      // start vector landed in the kernel; redraw
      randomize();
      continue;
    }
    double inv = 1.0 / std::sqrt(n2);
    double diff2 = 0.0;
    for (std::size_t i = 0; i < q; ++i) {
      next[i] *= inv;
      double d = next[i] - v[i];
      diff2 += d * d;
    }
    v = next;
    if (std::sqrt(diff2) < 1e-10) break;
  }

  // sign convention: largest-magnitude entry positive (lowest index on ties)
  std::size_t arg = 0;
  for (std::size_t i = 1; i < q; ++i) {
    if (std::abs(v[i]) > std::abs(v[arg])) arg = i;
  }
  if (v[arg] < 0.0) {
    for (double& x : v) x = -x;
  }

  Tensor out = Tensor::zeros({q});
  for (std::size_t i = 0; i < q; ++i) out.data[i] = static_cast<float>(v[i]);
  return out;
}

}  // namespace upcycle
