#pragma once

// Straightforward loop implementations used as independent oracles.  Nothing
// here touches the Tape; values are read directly from parameter tensors.

#include <cmath>
#include <vector>

#include "recat/numerics/layers.hpp"

namespace recat::reference {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

template <class T>
Vec affine(const Vec& x, const Linear<T>& lin) {
  const auto& w = lin.weight->value;
  const auto& b = lin.bias->value;
  Vec y(w.cols());
  for (std::size_t o = 0; o < w.cols(); ++o) {
    double acc = static_cast<double>(b[o]);
    for (std::size_t i = 0; i < w.rows(); ++i) acc += x[i] * static_cast<double>(w.at(i, o));
    y[o] = acc;
  }
  return y;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

template <class T>
Vec layer_norm(const Vec& x, const LayerNormParams<T>& ln) {
  const double n = static_cast<double>(x.size());
  double mean = 0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = (x[i] - mean) / std::sqrt(var + 1e-5) * static_cast<double>(ln.gain->value[i]) +
           static_cast<double>(ln.bias->value[i]);
  }
  return y;
}

template <class T>
Vec mlp(const Vec& x, const Mlp<T>& m) {
  Vec h = x;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    h = affine(h, m.layers[i]);
    if (i + 1 < m.layers.size())
      for (auto& v : h) v = gelu(v);
  }
  return h;
}

/// Full attention over all rows of x.
template <class T>
Mat attention_block(const Mat& x, const AttentionBlock<T>& blk) {
  const std::size_t n = x.size(), d = blk.d, heads = blk.heads, dh = d / heads;
  Mat q(n), k(n), v(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec h = layer_norm(x[i], blk.ln1);
    q[i] = affine(h, blk.wq);
    k[i] = affine(h, blk.wk);
    v[i] = affine(h, blk.wv);
  }
  Mat att(n, Vec(d, 0.0));
  for (std::size_t hd = 0; hd < heads; ++hd) {
    for (std::size_t i = 0; i < n; ++i) {
      Vec s(n);
      for (std::size_t j = 0; j < n; ++j) {
        double dot = 0;
        for (std::size_t p = hd * dh; p < (hd + 1) * dh; ++p) dot += q[i][p] * k[j][p];
        s[j] = dot / std::sqrt(static_cast<double>(dh));
      }
      double mx = s[0];
      for (double e : s) mx = std::max(mx, e);
      double z = 0;
      for (auto& e : s) {
        e = std::exp(e - mx);
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t p = hd * dh; p < (hd + 1) * dh; ++p) att[i][p] += s[j] / z * v[j][p];
    }
  }
  Mat out(n);
  for (std::size_t i = 0; i < n; ++i) {
    Vec o = affine(att[i], blk.wo);
    Vec x1(d);
    for (std::size_t p = 0; p < d; ++p) x1[p] = x[i][p] + o[p];
    Vec f = affine(layer_norm(x1, blk.ln2), blk.ff1);
    for (auto& e : f) e = gelu(e);
    f = affine(f, blk.ff2);
    for (std::size_t p = 0; p < d; ++p) x1[p] += f[p];
    out[i] = std::move(x1);
  }
  return out;
}

}  // namespace recat::reference
