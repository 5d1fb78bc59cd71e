#pragma once

// Dense f32 primitives. Every reduction runs in a fixed loop order so results are
// bit-reproducible run to run; nothing here depends on thread count.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "laco/error.hpp"
#include "laco/tensor.hpp"

namespace laco {

namespace detail {

inline void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(what) + " must be a matrix, got shape " + shape_str(t.shape()));
  }
}

inline float dot(const float* a, const float* b, std::size_t n) {
  float acc = 0.0f;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace detail

/// Standard product a (n x k) times b (k x m).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul lhs");
  detail::require_matrix(b, "matmul rhs");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Tensor out = Tensor::matrix(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    float* dst = out.raw() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = a.at(i, p);
      const float* src = b.raw() + p * m;
      for (std::size_t j = 0; j < m; ++j) dst[j] += av * src[j];
    }
  }
  return out;
}

/// x (n x in) times w^T, where w is stored (out x in) as in HF linear layers.
inline Tensor matmul_transposed(const Tensor& x, const Tensor& w) {
  detail::require_matrix(x, "matmul_transposed lhs");
  detail::require_matrix(w, "matmul_transposed rhs");
  const std::size_t n = x.rows(), in = x.cols(), out_dim = w.rows();
  if (w.cols() != in) {
    throw ShapeError("matmul_transposed inner dimensions differ: " + shape_str(x.shape()) +
                     " x " + shape_str(w.shape()) + "^T");
  }
  Tensor out = Tensor::matrix(n, out_dim);
  for (std::size_t i = 0; i < n; ++i) {
    const float* xr = x.raw() + i * in;
    float* dst = out.raw() + i * out_dim;
    for (std::size_t o = 0; o < out_dim; ++o) dst[o] = detail::dot(xr, w.raw() + o * in, in);
  }
  return out;
}

/// Norms below this are treated as zero vectors.
inline constexpr double kNormFloor = 1e-12;

/// dot(u, v) / (|u| |v|). Throws DegenerateInputError when either norm is below kNormFloor.
inline double cosine_similarity(std::span<const float> u, std::span<const float> v) {
  if (u.size() != v.size()) {
    throw ShapeError("cosine_similarity length mismatch: " + std::to_string(u.size()) + " vs " +
                     std::to_string(v.size()));
  }
  double uv = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uv += double(u[i]) * v[i];
    uu += double(u[i]) * u[i];
    vv += double(v[i]) * v[i];
  }
  const double nu = std::sqrt(uu), nv = std::sqrt(vv);
  if (nu < kNormFloor || nv < kNormFloor) {
    throw DegenerateInputError("cosine_similarity of a zero-norm vector");
  }
  // sqrt(uu * vv) rather than nu * nv: sqrt(x * x) == |x| exactly, so cos(u, u) == 1.
  return std::clamp(uv / std::sqrt(uu * vv), -1.0, 1.0);
}

/// Frobenius norm of (a - b).
inline double l2_distance(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("l2_distance shape mismatch: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    acc += d * d;
  }
  return std::sqrt(acc);
}

inline void rmsnorm_into(std::span<const float> x, std::span<const float> weight, float eps,
                         std::span<float> out) {
  if (x.size() != weight.size() || out.size() != x.size()) {
    throw ShapeError("rmsnorm length mismatch");
  }
  float ss = 0.0f;
  for (float v : x) ss += v * v;
  const float scale = 1.0f / std::sqrt(ss / float(x.size()) + eps);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * scale * weight[i];
}

/// x_i * w_i / sqrt(mean(x^2) + eps). An all-zero x maps to zeros even with eps = 0.
inline std::vector<float> rmsnorm(std::span<const float> x, std::span<const float> weight,
                                  float eps) {
  std::vector<float> out(x.size());
  bool all_zero = std::all_of(x.begin(), x.end(), [](float v) { return v == 0.0f; });
  if (all_zero) {
    if (x.size() != weight.size()) throw ShapeError("rmsnorm length mismatch");
    return out;
  }
  rmsnorm_into(x, weight, eps, out);
  return out;
}

inline void softmax_inplace(std::span<float> x) {
  if (x.empty()) return;
  const float mx = *std::max_element(x.begin(), x.end());
  double sum = 0.0;
  for (float& v : x) {
    v = std::exp(v - mx);
    sum += v;
  }
  const double inv = 1.0 / sum;
  for (float& v : x) v = float(v * inv);
}

/// Max-subtracted softmax.
inline std::vector<float> softmax(std::span<const float> x) {
  std::vector<float> out(x.begin(), x.end());
  softmax_inplace(out);
  return out;
}

/// Floor applied to q inside the logarithm.
inline constexpr double kKlFloor = 1e-12;

/// KL(p || q) = sum p_i ln(p_i / max(q_i, 1e-12)), with 0 ln(0/q) = 0.
inline double kl_divergence(std::span<const float> p, std::span<const float> q) {
  if (p.size() != q.size()) throw ShapeError("kl_divergence length mismatch");
  auto check = [](std::span<const float> v, const char* name) {
    double s = 0.0;
    for (float x : v) {
      if (!(x >= 0.0f)) {
        throw DegenerateInputError(std::string("kl_divergence: ") + name +
                                   " has a negative or non-finite entry");
      }
      s += x;
    }
    if (std::abs(s - 1.0) > 1e-5) {
      throw DegenerateInputError(std::string("kl_divergence: ") + name + " sums to " +
                                 std::to_string(s));
    }
  };
  check(p, "p");
  check(q, "q");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0f) continue;
    kl += double(p[i]) * std::log(double(p[i]) / std::max(double(q[i]), kKlFloor));
  }
  return std::max(kl, 0.0);
}

enum class CkaKind { linear, rbf_kernel };

namespace detail {

// Gram matrix of the rows (n x n, double).
inline std::vector<double> linear_gram(const Tensor& x) {
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<double> g(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) acc += double(x.at(i, c)) * x.at(j, c);
      g[i * n + j] = g[j * n + i] = acc;
    }
  }
  return g;
}

inline std::vector<double> rbf_gram(const Tensor& x) {
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<double> sq(n * n, 0.0);
  std::vector<double> dists;
  dists.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = double(x.at(i, c)) - x.at(j, c);
        acc += diff * diff;
      }
      sq[i * n + j] = sq[j * n + i] = acc;
      dists.push_back(std::sqrt(acc));
    }
  }
  std::sort(dists.begin(), dists.end());
  const std::size_t m = dists.size();
  const double median = m % 2 ? dists[m / 2] : 0.5 * (dists[m / 2 - 1] + dists[m / 2]);
  if (median < kNormFloor) throw DegenerateInputError("rbf CKA: median pairwise distance is zero");
  const double denom = 2.0 * median * median;
  std::vector<double> g(n * n);
  for (std::size_t i = 0; i < n * n; ++i) g[i] = std::exp(-sq[i] / denom);
  return g;
}

// In-place double centering: G <- H G H with H = I - 11^T/n.
inline void center_gram(std::vector<double>& g, std::size_t n) {
  std::vector<double> row_mean(n, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) row_mean[i] += g[i * n + j];
    total += row_mean[i];
    row_mean[i] /= double(n);
  }
  total /= double(n * n);
  // symmetric, so column means equal row means
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) g[i * n + j] += total - row_mean[i] - row_mean[j];
  }
}

}  // namespace detail

/// Centered kernel alignment between two sample sets (rows are samples, columns features).
/// Throws DegenerateInputError when either centered Gram matrix vanishes.
inline double cka(const Tensor& x, const Tensor& y, CkaKind kind) {
  detail::require_matrix(x, "cka x");
  detail::require_matrix(y, "cka y");
  if (x.rows() != y.rows()) {
    throw ShapeError("cka row counts differ: " + std::to_string(x.rows()) + " vs " +
                     std::to_string(y.rows()));
  }
  const std::size_t n = x.rows();
  if (n < 2) throw RangeError("cka needs at least 2 samples, got " + std::to_string(n));

  auto gram = [kind](const Tensor& t) {
    return kind == CkaKind::linear ? detail::linear_gram(t) : detail::rbf_gram(t);
  };
  std::vector<double> k = gram(x);
  std::vector<double> l = gram(y);
  detail::center_gram(k, n);
  detail::center_gram(l, n);

  double kl = 0.0, kk = 0.0, ll = 0.0;
  for (std::size_t i = 0; i < n * n; ++i) {
    kl += k[i] * l[i];
    kk += k[i] * k[i];
    ll += l[i] * l[i];
  }
  const double denom = std::sqrt(kk) * std::sqrt(ll);
  if (denom < kNormFloor) throw DegenerateInputError("cka of a constant representation");
  return std::clamp(kl / denom, 0.0, 1.0);
}

}  // namespace laco
