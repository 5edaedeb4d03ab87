#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "recat/error.hpp"
#include "recat/numerics/ops.hpp"
#include "recat/numerics/parameter.hpp"

namespace recat {

inline constexpr double kInitStddev = 0.02;

/// y = x W + b with W [in, out].
template <class T>
struct Linear {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;

  Linear() = default;
  Linear(ParameterSet<T>& ps, const std::string& prefix, std::size_t in, std::size_t out,
         std::mt19937_64& rng, double stddev = kInitStddev) {
    weight = &ps.add_normal(prefix + ".w", {in, out}, stddev, rng);
    bias = &ps.add_constant(prefix + ".b", {1, out}, T(0));
  }

  std::size_t in_dim() const { return weight->value.rows(); }
  std::size_t out_dim() const { return weight->value.cols(); }

  Var<T> operator()(Var<T> x) const {
    auto& tape = *x.tape;
    return ops::add_row(ops::matmul(x, tape.param(*weight)), tape.param(*bias));
  }
};

template <class T>
struct LayerNormParams {
  Parameter<T>* gain = nullptr;
  Parameter<T>* bias = nullptr;

  LayerNormParams() = default;
  LayerNormParams(ParameterSet<T>& ps, const std::string& prefix, std::size_t d) {
    gain = &ps.add_constant(prefix + ".g", {1, d}, T(1));
    bias = &ps.add_constant(prefix + ".b", {1, d}, T(0));
  }

  Var<T> operator()(Var<T> x) const {
    auto& tape = *x.tape;
    return ops::layer_norm(x, tape.param(*gain), tape.param(*bias));
  }
};

/// Affine layers with GELU between them; `layers` == 1 is a single affine map.
template <class T>
struct Mlp {
  std::vector<Linear<T>> layers;

  Mlp() = default;
  Mlp(ParameterSet<T>& ps, const std::string& prefix, std::size_t in, std::size_t hidden,
      std::size_t out, std::size_t depth, std::mt19937_64& rng) {
    if (depth == 0) throw ConfigError("mlp depth must be positive");
    for (std::size_t i = 0; i < depth; ++i) {
      const std::size_t a = i == 0 ? in : hidden;
      const std::size_t b = i + 1 == depth ? out : hidden;
      layers.emplace_back(ps, prefix + "." + std::to_string(i), a, b, rng);
    }
  }

  Var<T> operator()(Var<T> x) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](x);
      if (i + 1 < layers.size()) x = ops::gelu(x);
    }
    return x;
  }
};

/// Pre-norm Transformer block: x + Attn(LN(x)), then + FFN(LN(.)) with a
/// GELU feed-forward of width ffn_mult * d.  Attention is restricted to
/// consecutive segments of `segment` rows, so a batch of independent
/// sequences of equal length runs as one call.
template <class T>
struct AttentionBlock {
  std::size_t d = 0;
  std::size_t heads = 1;
  LayerNormParams<T> ln1, ln2;
  Linear<T> wq, wk, wv, wo, ff1, ff2;

  AttentionBlock() = default;
  AttentionBlock(ParameterSet<T>& ps, const std::string& prefix, std::size_t dim, std::size_t n_heads,
                 std::size_t ffn_mult, std::mt19937_64& rng)
      : d(dim), heads(n_heads) {
    if (dim == 0 || n_heads == 0 || dim % n_heads != 0) {
      throw ConfigError("attention block: d=" + std::to_string(dim) + " not divisible by heads=" +
                        std::to_string(n_heads));
    }
    ln1 = LayerNormParams<T>(ps, prefix + ".ln1", d);
    wq = Linear<T>(ps, prefix + ".wq", d, d, rng);
    wk = Linear<T>(ps, prefix + ".wk", d, d, rng);
    wv = Linear<T>(ps, prefix + ".wv", d, d, rng);
    wo = Linear<T>(ps, prefix + ".wo", d, d, rng);
    ln2 = LayerNormParams<T>(ps, prefix + ".ln2", d);
    ff1 = Linear<T>(ps, prefix + ".ff1", d, ffn_mult * d, rng);
    ff2 = Linear<T>(ps, prefix + ".ff2", ffn_mult * d, d, rng);
  }

  Var<T> operator()(Var<T> x, std::size_t segment) const {
    auto h = ln1(x);
    auto att = ops::segment_attention(wq(h), wk(h), wv(h), heads, segment);
    auto x1 = ops::add(x, wo(att));
    auto f = ff2(ops::gelu(ff1(ln2(x1))));
    return ops::add(x1, f);
  }

  Var<T> operator()(Var<T> x) const { return (*this)(x, x.rows()); }
};

/// Single-direction LSTM layer over the rows of x.
template <class T>
struct LstmLayer {
  std::size_t hidden = 0;
  Linear<T> input;      // [in, 4h] with gate bias
  Parameter<T>* recur = nullptr;  // [h, 4h]

  LstmLayer() = default;
  LstmLayer(ParameterSet<T>& ps, const std::string& prefix, std::size_t in, std::size_t h,
            std::mt19937_64& rng)
      : hidden(h) {
    const double s = 1.0 / std::sqrt(static_cast<double>(h));
    input = Linear<T>(ps, prefix + ".ih", in, 4 * h, rng, s);
    recur = &ps.add_normal(prefix + ".hh", {h, 4 * h}, s, rng);
  }

  /// Returns hidden states [n, h]; `reverse` runs right to left but keeps row
  /// i aligned with input row i.
  Var<T> operator()(Var<T> x, bool reverse) const {
    auto& tape = *x.tape;
    const std::size_t n = x.rows();
    auto projected = input(x);
    auto u = tape.param(*recur);
    std::vector<RowRef<T>> outputs(n);
    Var<T> h{}, c{};
    for (std::size_t step = 0; step < n; ++step) {
      const auto t = static_cast<std::uint32_t>(reverse ? n - 1 - step : step);
      auto gates = ops::row(projected, t);
      if (h.valid()) gates = ops::add(gates, ops::matmul(h, u));
      auto i = ops::sigmoid(ops::slice_cols(gates, 0, hidden));
      auto f = ops::sigmoid(ops::slice_cols(gates, hidden, 2 * hidden));
      auto g = ops::tanh(ops::slice_cols(gates, 2 * hidden, 3 * hidden));
      auto o = ops::sigmoid(ops::slice_cols(gates, 3 * hidden, 4 * hidden));
      c = c.valid() ? ops::add(ops::mul(f, c), ops::mul(i, g)) : ops::mul(i, g);
      h = ops::mul(o, ops::tanh(c));
      outputs[t] = RowRef<T>{h, 0};
    }
    return ops::gather_rows(outputs);
  }
};

}  // namespace recat
