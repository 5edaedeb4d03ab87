#pragma once

// Differentiable operations over rank-2 values recorded on a Tape.  Every
// reduction runs left to right in a fixed order, so identical inputs give
// bit-identical outputs.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "recat/error.hpp"
#include "recat/numerics/stable.hpp"
#include "recat/numerics/tape.hpp"

namespace recat::ops {

namespace detail {

template <class T>
void check_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (!a.same_shape(b)) {
    throw StructuralError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                          b.shape_string());
  }
}

template <class T>
void add_into(Tensor<T>& dst, const Tensor<T>& src, T scale = T(1)) {
  auto* d = dst.data();
  const auto* s = src.data();
  for (std::size_t i = 0, n = dst.size(); i < n; ++i) d[i] += scale * s[i];
}

template <class T>
Tensor<T> shaped(std::size_t r, std::size_t c) {
  return Tensor<T>::matrix(r, c);
}

// C[r,c] += A[r,k] * B[k,c]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t r, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < r; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[r,n] += A[r,k] * B[n,k]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t r, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < r; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// C[k,n] += A[r,k]^T * B[r,n]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t r, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < r; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(0.5 * std::numbers::sqrt2)));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.5 * std::numbers::sqrt2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

}  // namespace detail

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto& tape = *a.tape;
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.cols() != B.rows()) {
    throw StructuralError("matmul: " + A.shape_string() + " x " + B.shape_string());
  }
  const std::size_t r = A.rows(), k = A.cols(), n = B.cols();
  auto out = detail::shaped<T>(r, n);
  detail::gemm_nn(A.data(), B.data(), out.data(), r, k, n);
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.push(std::move(out), rg, [a, b, r, k, n](Tape<T>& t, std::uint32_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(a)) detail::gemm_nt(g.data(), t.value(b).data(), t.grad(a).data(), r, n, k);
    if (t.requires_grad(b)) detail::gemm_tn(t.value(a).data(), g.data(), t.grad(b).data(), r, k, n);
  });
}

/// a[r,k] * b[n,k]^T
template <class T>
Var<T> matmul_bt(Var<T> a, Var<T> b) {
  auto& tape = *a.tape;
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.cols() != B.cols()) {
    throw StructuralError("matmul_bt: " + A.shape_string() + " x " + B.shape_string() + "^T");
  }
  const std::size_t r = A.rows(), k = A.cols(), n = B.rows();
  auto out = detail::shaped<T>(r, n);
  detail::gemm_nt(A.data(), B.data(), out.data(), r, k, n);
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.push(std::move(out), rg, [a, b, r, k, n](Tape<T>& t, std::uint32_t self) {
    const auto& g = t.grad(self);
    // dA = G B ; dB = G^T A
    if (t.requires_grad(a)) detail::gemm_nn(g.data(), t.value(b).data(), t.grad(a).data(), r, n, k);
    if (t.requires_grad(b)) detail::gemm_tn(g.data(), t.value(a).data(), t.grad(b).data(), r, n, k);
  });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  auto& tape = *a.tape;
  detail::check_same(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  detail::add_into(out, b.value());
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.push(std::move(out), rg, [a, b](Tape<T>& t, std::uint32_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(a)) detail::add_into(t.grad(a), g);
    if (t.requires_grad(b)) detail::add_into(t.grad(b), g);
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  auto& tape = *a.tape;
  detail::check_same(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  detail::add_into(out, b.value(), T(-1));
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.push(std::move(out), rg, [a, b](Tape<T>& t, std::uint32_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(a)) detail::add_into(t.grad(a), g);
    if (t.requires_grad(b)) detail::add_into(t.grad(b), g, T(-1));
  });
}

/// Sum of same-shaped values, accumulated in argument order.
template <class T>
Var<T> add_n(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw StructuralError("add_n: no operands");
  auto& tape = *xs.front().tape;
  Tensor<T> out = xs.front().value();
  bool rg = tape.requires_grad(xs.front());
  for (std::size_t i = 1; i < xs.size(); ++i) {
    detail::check_same(out, xs[i].value(), "add_n");
    detail::add_into(out, xs[i].value());
    rg = rg || tape.requires_grad(xs[i]);
  }
  return tape.push(std::move(out), rg, [xs](Tape<T>& t, std::uint32_t self) {
    const auto& g = t.grad(self);
    for (const auto& x : xs)
      if (t.requires_grad(x)) detail::add_into(t.grad(x), g);
  });
}

/// a[r,c] + row[1,c] broadcast over rows.
template <class T>
Var<T> add_row(Var<T> a, Var<T> row) {
  auto& tape = *a.tape;
  const auto& A = a.value();
  const auto& R = row.value();
  if (R.rows() != 1 || R.cols() != A.cols()) {
    throw StructuralError("add_row: " + A.shape_string() + " + " + R.shape_string());
  }
  Tensor<T> out = A;
  const std::size_t rows = A.rows(), cols = A.cols();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out.at(i, j) += R[j];
  const bool rg = tape.requires_grad(a) || tape.requires_grad(row);
  return tape.push(std::move(out), rg, [a, row, rows, cols](Tape<T>& t, std::uint32_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(a)) detail::add_into(t.grad(a), g);
    if (t.requires_grad(row)) {
      auto& gr = t.grad(row);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) gr[j] += g.at(i, j);
    }
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  auto& tape = *a.tape;
  detail::check_same(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  const auto& B = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.push(std::move(out), rg, [a, b](Tape<T>& t, std::uint32_t self) {
    const auto& g = t.grad(self);
    const auto& A = t.value(a);
    const auto& B = t.value(b);
    if (t.requires_grad(a)) {
      auto& ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
    }
  });
}

/// Multiplication by a fixed constant.
template <class T>
Var<T> scale(Var<T> a, T s) {
  auto& tape = *a.tape;
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v *= s;
  return tape.push(std::move(out), tape.requires_grad(a), [a, s](Tape<T>& t, std::uint32_t self) {
    detail::add_into(t.grad(a), t.grad(self), s);
  });
}

/// a[r,c] times a scalar node s[1,1].
template <class T>
Var<T> mul_scalar(Var<T> a, Var<T> s) {
  auto& tape = *a.tape;
  if (s.value().size() != 1) throw StructuralError("mul_scalar: scalar expected");
  const T sv = s.value()[0];
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v *= sv;
  const bool rg = tape.requires_grad(a) || tape.requires_grad(s);
  return tape.push(std::move(out), rg, [a, s](Tape<T>& t, std::uint32_t self) {
    const auto& g = t.grad(self);
    const T sv = t.value(s)[0];
    if (t.requires_grad(a)) detail::add_into(t.grad(a), g, sv);
    if (t.requires_grad(s)) {
      const auto& A = t.value(a);
      T acc = 0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * A[i];
      t.grad(s)[0] += acc;
    }
  });
}

namespace detail {

template <class T, class F, class DF>
Var<T> unary(Var<T> a, F f, DF df) {
  auto& tape = *a.tape;
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v = f(v);
  return tape.push(std::move(out), tape.requires_grad(a), [a, df](Tape<T>& t, std::uint32_t self) {
    const auto& g = t.grad(self);
    const auto& x = t.value(a);
    const auto& y = t.value(self);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
  });
}

}  // namespace detail

template <class T>
Var<T> gelu(Var<T> a) {
  return detail::unary(a, [](T x) { return detail::gelu_value(x); },
                       [](T x, T) { return detail::gelu_grad(x); });
}

template <class T>
Var<T> tanh(Var<T> a) {
  return detail::unary(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Var<T> sigmoid(Var<T> a) {
  return detail::unary(
      a, [](T x) { return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> exp(Var<T> a) {
  return detail::unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

/// Row-wise layer normalisation with affine gain/bias rows [1,c].
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
  auto& tape = *x.tape;
  const auto& X = x.value();
  const std::size_t rows = X.rows(), cols = X.cols();
  if (gain.value().size() != cols || bias.value().size() != cols) {
    throw StructuralError("layer_norm: affine size mismatch");
  }
  const auto& G = gain.value();
  const auto& B = bias.value();
  Tensor<T> out = Tensor<T>::matrix(rows, cols);
  Tensor<T> xhat = Tensor<T>::matrix(rows, cols);
  std::vector<T> inv_std(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    T mean = 0;
    for (std::size_t j = 0; j < cols; ++j) mean += X.at(i, j);
    mean /= T(cols);
    T var = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      const T dv = X.at(i, j) - mean;
      var += dv * dv;
    }
    var /= T(cols);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < cols; ++j) {
      xhat.at(i, j) = (X.at(i, j) - mean) * inv_std[i];
      out.at(i, j) = xhat.at(i, j) * G[j] + B[j];
    }
  }
  const bool rg = tape.requires_grad(x) || tape.requires_grad(gain) || tape.requires_grad(bias);
  return tape.push(std::move(out), rg,
                   [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, cols](
                       Tape<T>& t, std::uint32_t self) {
                     const auto& g = t.grad(self);
                     const auto& G = t.value(gain);
                     if (t.requires_grad(gain)) {
                       auto& gg = t.grad(gain);
                       for (std::size_t i = 0; i < rows; ++i)
                         for (std::size_t j = 0; j < cols; ++j) gg[j] += g.at(i, j) * xhat.at(i, j);
                     }
                     if (t.requires_grad(bias)) {
                       auto& gb = t.grad(bias);
                       for (std::size_t i = 0; i < rows; ++i)
                         for (std::size_t j = 0; j < cols; ++j) gb[j] += g.at(i, j);
                     }
                     if (t.requires_grad(x)) {
                       auto& gx = t.grad(x);
                       for (std::size_t i = 0; i < rows; ++i) {
                         T mean_dy = 0, mean_dy_xhat = 0;
                         for (std::size_t j = 0; j < cols; ++j) {
                           const T dy = g.at(i, j) * G[j];
                           mean_dy += dy;
                           mean_dy_xhat += dy * xhat.at(i, j);
                         }
                         mean_dy /= T(cols);
                         mean_dy_xhat /= T(cols);
                         for (std::size_t j = 0; j < cols; ++j) {
                           const T dy = g.at(i, j) * G[j];
                           gx.at(i, j) += inv_std[i] * (dy - mean_dy - xhat.at(i, j) * mean_dy_xhat);
                         }
                       }
                     }
                   });
}

/// Multi-head scaled dot-product attention over independent row segments of
/// length `segment`: rows [s*segment, (s+1)*segment) only attend to each
/// other.  q, k, v are already projected, shape [rows, d].
template <class T>
Var<T> segment_attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads, std::size_t segment) {
  auto& tape = *q.tape;
  const auto& Q = q.value();
  const auto& K = k.value();
  const auto& V = v.value();
  detail::check_same(Q, K, "segment_attention");
  detail::check_same(Q, V, "segment_attention");
  const std::size_t rows = Q.rows(), d = Q.cols();
  if (heads == 0 || d % heads != 0) throw ConfigError("attention: d not divisible by heads");
  if (segment == 0 || rows % segment != 0) {
    throw StructuralError("segment_attention: rows not a multiple of segment");
  }
  const std::size_t dh = d / heads, nseg = rows / segment;
  const T inv_scale = T(1) / std::sqrt(T(dh));
  // probs[(s, h, i, j)]
  std::vector<T> probs(nseg * heads * segment * segment);
  Tensor<T> out = Tensor<T>::matrix(rows, d);
  std::vector<T> logits(segment);
  for (std::size_t s = 0; s < nseg; ++s) {
    const std::size_t base = s * segment;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < segment; ++i) {
        const T* qi = Q.data() + (base + i) * d + off;
        T peak = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < segment; ++j) {
          const T* kj = K.data() + (base + j) * d + off;
          T acc = 0;
          for (std::size_t p = 0; p < dh; ++p) acc += qi[p] * kj[p];
          logits[j] = acc * inv_scale;
          peak = std::max(peak, logits[j]);
        }
        T total = 0;
        for (std::size_t j = 0; j < segment; ++j) {
          logits[j] = std::exp(logits[j] - peak);
          total += logits[j];
        }
        T* prow = probs.data() + ((s * heads + h) * segment + i) * segment;
        T* orow = out.data() + (base + i) * d + off;
        for (std::size_t j = 0; j < segment; ++j) {
          prow[j] = logits[j] / total;
          const T* vj = V.data() + (base + j) * d + off;
          for (std::size_t p = 0; p < dh; ++p) orow[p] += prow[j] * vj[p];
        }
      }
    }
  }
  const bool rg = tape.requires_grad(q) || tape.requires_grad(k) || tape.requires_grad(v);
  return tape.push(
      std::move(out), rg,
      [q, k, v, heads, segment, nseg, dh, d, inv_scale, probs = std::move(probs)](Tape<T>& t,
                                                                                  std::uint32_t self) {
        const auto& g = t.grad(self);
        const auto& Q = t.value(q);
        const auto& K = t.value(k);
        const auto& V = t.value(v);
        Tensor<T> gq = Tensor<T>::matrix(Q.rows(), d);
        Tensor<T> gk = Tensor<T>::matrix(Q.rows(), d);
        Tensor<T> gv = Tensor<T>::matrix(Q.rows(), d);
        std::vector<T> dp(segment);
        for (std::size_t s = 0; s < nseg; ++s) {
          const std::size_t base = s * segment;
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * dh;
            for (std::size_t i = 0; i < segment; ++i) {
              const T* prow = probs.data() + ((s * heads + h) * segment + i) * segment;
              const T* gi = g.data() + (base + i) * d + off;
              T dot = 0;
              for (std::size_t j = 0; j < segment; ++j) {
                const T* vj = V.data() + (base + j) * d + off;
                T* gvj = gv.data() + (base + j) * d + off;
                T acc = 0;
                for (std::size_t p = 0; p < dh; ++p) {
                  acc += gi[p] * vj[p];
                  gvj[p] += prow[j] * gi[p];
                }
                dp[j] = acc;
                dot += prow[j] * acc;
              }
              const T* qi = Q.data() + (base + i) * d + off;
              T* gqi = gq.data() + (base + i) * d + off;
              for (std::size_t j = 0; j < segment; ++j) {
                const T ds = prow[j] * (dp[j] - dot) * inv_scale;
                const T* kj = K.data() + (base + j) * d + off;
                T* gkj = gk.data() + (base + j) * d + off;
                for (std::size_t p = 0; p < dh; ++p) {
                  gqi[p] += ds * kj[p];
                  gkj[p] += ds * qi[p];
                }
              }
            }
          }
        }
        if (t.requires_grad(q)) detail::add_into(t.grad(q), gq);
        if (t.requires_grad(k)) detail::add_into(t.grad(k), gk);
        if (t.requires_grad(v)) detail::add_into(t.grad(v), gv);
      });
}

/// Columns [c0, c1).
template <class T>
Var<T> slice_cols(Var<T> a, std::size_t c0, std::size_t c1) {
  auto& tape = *a.tape;
  const auto& A = a.value();
  if (c0 > c1 || c1 > A.cols()) throw StructuralError("slice_cols out of range");
  const std::size_t rows = A.rows(), w = c1 - c0, cols = A.cols();
  Tensor<T> out = Tensor<T>::matrix(rows, w);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < w; ++j) out.at(i, j) = A.at(i, c0 + j);
  return tape.push(std::move(out), tape.requires_grad(a),
                   [a, c0, w, rows, cols](Tape<T>& t, std::uint32_t self) {
                     const auto& g = t.grad(self);
                     auto& ga = t.grad(a);
                     for (std::size_t i = 0; i < rows; ++i)
                       for (std::size_t j = 0; j < w; ++j) ga[i * cols + c0 + j] += g.at(i, j);
                   });
}

template <class T>
Var<T> concat_cols(Var<T> a, Var<T> b) {
  auto& tape = *a.tape;
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.rows() != B.rows()) throw StructuralError("concat_cols: row mismatch");
  const std::size_t rows = A.rows(), ca = A.cols(), cb = B.cols();
  Tensor<T> out = Tensor<T>::matrix(rows, ca + cb);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < ca; ++j) out.at(i, j) = A.at(i, j);
    for (std::size_t j = 0; j < cb; ++j) out.at(i, ca + j) = B.at(i, j);
  }
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.push(std::move(out), rg, [a, b, rows, ca, cb](Tape<T>& t, std::uint32_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(a)) {
      auto& ga = t.grad(a);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < ca; ++j) ga.at(i, j) += g.at(i, j);
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad(b);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cb; ++j) gb.at(i, j) += g.at(i, ca + j);
    }
  });
}

/// Stacks the referenced rows (possibly from different nodes) into one matrix.
template <class T>
Var<T> gather_rows(const std::vector<RowRef<T>>& refs) {
  if (refs.empty()) throw StructuralError("gather_rows: no rows");
  auto& tape = *refs.front().src.tape;
  const std::size_t cols = refs.front().src.cols();
  Tensor<T> out = Tensor<T>::matrix(refs.size(), cols);
  bool rg = false;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto& src = refs[i].src.value();
    if (src.cols() != cols) throw StructuralError("gather_rows: column mismatch");
    if (refs[i].row >= src.rows()) throw StructuralError("gather_rows: row out of range");
    auto r = src.row_span(refs[i].row);
    std::copy(r.begin(), r.end(), out.row_span(i).begin());
    rg = rg || tape.requires_grad(refs[i].src);
  }
  return tape.push(std::move(out), rg, [refs, cols](Tape<T>& t, std::uint32_t self) {
    const auto& g = t.grad(self);
    for (std::size_t i = 0; i < refs.size(); ++i) {
      if (!t.requires_grad(refs[i].src)) continue;
      auto& gs = t.grad(refs[i].src);
      T* dst = gs.data() + refs[i].row * cols;
      const T* src = g.data() + i * cols;
      for (std::size_t j = 0; j < cols; ++j) dst[j] += src[j];
    }
  });
}

/// Rows `rows` of a single node (embedding lookup when `a` is a table).
template <class T>
Var<T> take_rows(Var<T> a, const std::vector<std::uint32_t>& rows) {
  std::vector<RowRef<T>> refs;
  refs.reserve(rows.size());
  for (auto r : rows) refs.push_back({a, r});
  return gather_rows(refs);
}

template <class T>
Var<T> row(Var<T> a, std::uint32_t r) {
  return gather_rows(std::vector<RowRef<T>>{{a, r}});
}

/// Row-wise dot product: [r,c] x [r,c] -> [r,1].
template <class T>
Var<T> row_dot(Var<T> a, Var<T> b) {
  auto& tape = *a.tape;
  const auto& A = a.value();
  const auto& B = b.value();
  detail::check_same(A, B, "row_dot");
  const std::size_t rows = A.rows(), cols = A.cols();
  Tensor<T> out = Tensor<T>::matrix(rows, 1);
  for (std::size_t i = 0; i < rows; ++i) {
    T acc = 0;
    for (std::size_t j = 0; j < cols; ++j) acc += A.at(i, j) * B.at(i, j);
    out[i] = acc;
  }
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.push(std::move(out), rg, [a, b, rows, cols](Tape<T>& t, std::uint32_t self) {
    const auto& g = t.grad(self);
    const auto& A = t.value(a);
    const auto& B = t.value(b);
    if (t.requires_grad(a)) {
      auto& ga = t.grad(a);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) ga.at(i, j) += g[i] * B.at(i, j);
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad(b);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) gb.at(i, j) += g[i] * A.at(i, j);
    }
  });
}

/// Softmax of a column of scores [S,1] within consecutive segments
/// [offsets[c], offsets[c+1]).
template <class T>
Var<T> segment_softmax(Var<T> scores, const std::vector<std::uint32_t>& offsets) {
  auto& tape = *scores.tape;
  const auto& X = scores.value();
  if (X.cols() != 1 || offsets.empty() || offsets.back() != X.rows()) {
    throw StructuralError("segment_softmax: bad segment layout");
  }
  Tensor<T> out = Tensor<T>::matrix(X.rows(), 1);
  for (std::size_t c = 0; c + 1 < offsets.size(); ++c) {
    auto w = softmax_stable(std::span<const T>(X.data() + offsets[c], offsets[c + 1] - offsets[c]));
    std::copy(w.begin(), w.end(), out.data() + offsets[c]);
  }
  return tape.push(std::move(out), tape.requires_grad(scores),
                   [scores, offsets](Tape<T>& t, std::uint32_t self) {
                     const auto& g = t.grad(self);
                     const auto& y = t.value(self);
                     auto& gx = t.grad(scores);
                     for (std::size_t c = 0; c + 1 < offsets.size(); ++c) {
                       T dot = 0;
                       for (auto i = offsets[c]; i < offsets[c + 1]; ++i) dot += g[i] * y[i];
                       for (auto i = offsets[c]; i < offsets[c + 1]; ++i) gx[i] += y[i] * (g[i] - dot);
                     }
                   });
}

/// out[c] = sum_{i in segment c} w[i] * values[i]  (left to right).
template <class T>
Var<T> segment_weighted_sum(Var<T> weights, Var<T> values, const std::vector<std::uint32_t>& offsets) {
  auto& tape = *weights.tape;
  const auto& W = weights.value();
  const auto& V = values.value();
  if (W.cols() != 1 || W.rows() != V.rows() || offsets.empty() || offsets.back() != V.rows()) {
    throw StructuralError("segment_weighted_sum: bad layout");
  }
  const std::size_t segs = offsets.size() - 1, cols = V.cols();
  Tensor<T> out = Tensor<T>::matrix(segs, cols);
  for (std::size_t c = 0; c < segs; ++c) {
    T* o = out.data() + c * cols;
    for (auto i = offsets[c]; i < offsets[c + 1]; ++i) {
      const T* vi = V.data() + i * cols;
      for (std::size_t j = 0; j < cols; ++j) o[j] += W[i] * vi[j];
    }
  }
  const bool rg = tape.requires_grad(weights) || tape.requires_grad(values);
  return tape.push(std::move(out), rg, [weights, values, offsets, segs, cols](Tape<T>& t, std::uint32_t self) {
    const auto& g = t.grad(self);
    const auto& W = t.value(weights);
    const auto& V = t.value(values);
    const bool gw_needed = t.requires_grad(weights);
    const bool gv_needed = t.requires_grad(values);
    for (std::size_t c = 0; c < segs; ++c) {
      const T* gc = g.data() + c * cols;
      for (auto i = offsets[c]; i < offsets[c + 1]; ++i) {
        if (gw_needed) {
          const T* vi = V.data() + i * cols;
          T acc = 0;
          for (std::size_t j = 0; j < cols; ++j) acc += gc[j] * vi[j];
          t.grad(weights)[i] += acc;
        }
        if (gv_needed) {
          T* gvi = t.grad(values).data() + i * cols;
          for (std::size_t j = 0; j < cols; ++j) gvi[j] += W[i] * gc[j];
        }
      }
    }
  });
}

/// log sum exp of a column of scores [S,1] within each segment -> [segs,1].
template <class T>
Var<T> segment_log_sum_exp(Var<T> scores, const std::vector<std::uint32_t>& offsets) {
  auto& tape = *scores.tape;
  const auto& X = scores.value();
  if (X.cols() != 1 || offsets.empty() || offsets.back() != X.rows()) {
    throw StructuralError("segment_log_sum_exp: bad segment layout");
  }
  const std::size_t segs = offsets.size() - 1;
  Tensor<T> out = Tensor<T>::matrix(segs, 1);
  for (std::size_t c = 0; c < segs; ++c) {
    out[c] = recat::log_sum_exp(std::span<const T>(X.data() + offsets[c], offsets[c + 1] - offsets[c]));
  }
  return tape.push(std::move(out), tape.requires_grad(scores),
                   [scores, offsets, segs](Tape<T>& t, std::uint32_t self) {
                     const auto& g = t.grad(self);
                     const auto& y = t.value(self);
                     const auto& x = t.value(scores);
                     auto& gx = t.grad(scores);
                     for (std::size_t c = 0; c < segs; ++c) {
                       if (!std::isfinite(y[c])) continue;
                       for (auto i = offsets[c]; i < offsets[c + 1]; ++i) gx[i] += g[c] * std::exp(x[i] - y[c]);
                     }
                   });
}

/// Element-wise log(exp a + exp b) on scalars; -inf inputs act as identity.
template <class T>
Var<T> log_sum_exp(Var<T> a, Var<T> b) {
  auto& tape = *a.tape;
  if (a.value().size() != 1 || b.value().size() != 1) throw StructuralError("log_sum_exp: scalars expected");
  const T out = recat::log_sum_exp(a.item(), b.item());
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.push(Tensor<T>::scalar(out), rg, [a, b](Tape<T>& t, std::uint32_t self) {
    const T g = t.grad(self)[0];
    const T y = t.value(self)[0];
    if (!std::isfinite(y)) return;
    if (t.requires_grad(a)) t.grad(a)[0] += g * std::exp(t.value(a)[0] - y);
    if (t.requires_grad(b)) t.grad(b)[0] += g * std::exp(t.value(b)[0] - y);
  });
}

/// Sum of all elements -> [1,1].
template <class T>
Var<T> sum(Var<T> a) {
  auto& tape = *a.tape;
  T acc = 0;
  for (T v : a.value().storage()) acc += v;
  return tape.push(Tensor<T>::scalar(acc), tape.requires_grad(a), [a](Tape<T>& t, std::uint32_t self) {
    const T g = t.grad(self)[0];
    for (auto& v : t.grad(a).storage()) v += g;
  });
}

/// Mean token cross-entropy of logits rows [r,V] against class targets.
template <class T>
Var<T> cross_entropy(Var<T> logits, const std::vector<std::uint32_t>& targets) {
  auto& tape = *logits.tape;
  const auto& X = logits.value();
  if (targets.size() != X.rows() || targets.empty()) throw StructuralError("cross_entropy: target count");
  const std::size_t rows = X.rows(), cols = X.cols();
  Tensor<T> probs = Tensor<T>::matrix(rows, cols);
  T total = 0;
  for (std::size_t i = 0; i < rows; ++i) {
    if (targets[i] >= cols) throw InputError("cross_entropy: target id out of range");
    auto p = softmax_stable(X.row_span(i));
    std::copy(p.begin(), p.end(), probs.row_span(i).begin());
    total += -(X.at(i, targets[i]) - recat::log_sum_exp(X.row_span(i)));
  }
  total /= T(rows);
  return tape.push(Tensor<T>::scalar(total), tape.requires_grad(logits),
                   [logits, targets, probs = std::move(probs), rows, cols](Tape<T>& t, std::uint32_t self) {
                     const T g = t.grad(self)[0] / T(rows);
                     auto& gx = t.grad(logits);
                     for (std::size_t i = 0; i < rows; ++i) {
                       for (std::size_t j = 0; j < cols; ++j) gx.at(i, j) += g * probs.at(i, j);
                       gx.at(i, targets[i]) -= g;
                     }
                   });
}

/// log softmax of the flattened entries `support` of x, read at `target`
/// (which must be a member of support).  Result is [1,1].
template <class T>
Var<T> pick_log_softmax(Var<T> x, const std::vector<std::uint32_t>& support, std::uint32_t target) {
  auto& tape = *x.tape;
  const auto& X = x.value();
  if (support.empty()) throw StructuralError("pick_log_softmax: empty support");
  std::vector<T> vals;
  vals.reserve(support.size());
  bool found = false;
  for (auto i : support) {
    if (i >= X.size()) throw StructuralError("pick_log_softmax: index out of range");
    vals.push_back(X[i]);
    found = found || i == target;
  }
  if (!found) throw StructuralError("pick_log_softmax: target outside support");
  auto probs = softmax_stable(std::span<const T>(vals));
  const T out = X[target] - recat::log_sum_exp(std::span<const T>(vals));
  return tape.push(Tensor<T>::scalar(out), tape.requires_grad(x),
                   [x, support, target, probs = std::move(probs)](Tape<T>& t, std::uint32_t self) {
                     const T g = t.grad(self)[0];
                     auto& gx = t.grad(x);
                     gx[target] += g;
                     for (std::size_t i = 0; i < support.size(); ++i) gx[support[i]] -= g * probs[i];
                   });
}

}  // namespace recat::ops
