#pragma once

// Contextual inside-outside layers over a pruned chart.  Every batch of the
// schedule is evaluated with a handful of matrix ops: all (cell, split)
// candidates of the batch are stacked and composed together.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "recat/chart.hpp"
#include "recat/error.hpp"
#include "recat/numerics.hpp"
#include "recat/pruner.hpp"

namespace recat {

struct CioConfig {
  std::size_t d = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t compose_depth = 1;
  std::size_t compat_layers = 2;
  std::size_t ffn_mult = 4;
  bool share = false;
};

/// Input slots of a compose call.
enum class Slot : std::uint32_t { left = 0, right = 1, parent = 2 };

/// Attention stack over (left, right, parent) triples plus role embeddings.
template <class T>
struct ComposeParams {
  std::vector<AttentionBlock<T>> blocks;
  Parameter<T>* roles = nullptr;

  ComposeParams() = default;
  ComposeParams(ParameterSet<T>& ps, const std::string& prefix, const CioConfig& cfg, std::mt19937_64& rng) {
    if (cfg.compose_depth == 0) throw ConfigError("compose depth must be positive");
    roles = &ps.add_normal(prefix + ".roles", {3, cfg.d}, kInitStddev, rng);
    for (std::size_t b = 0; b < cfg.compose_depth; ++b) {
      blocks.emplace_back(ps, prefix + ".block." + std::to_string(b), cfg.d, cfg.heads, cfg.ffn_mult, rng);
    }
  }

  /// triples [3S, d] laid out as left, right, parent per call -> [3S, d].
  Var<T> operator()(Var<T> triples) const {
    const auto rows = triples.rows();
    if (rows % 3 != 0) throw StructuralError("compose input must hold whole triples");
    std::vector<std::uint32_t> role_rows(rows);
    for (std::size_t r = 0; r < rows; ++r) role_rows[r] = static_cast<std::uint32_t>(r % 3);
    auto x = ops::add(triples, ops::take_rows(triples.tape->param(*roles), role_rows));
    for (const auto& blk : blocks) x = blk(x, 3);
    return x;
  }
};

/// Single compose call; returns the output row at `read` as [1, d].
template <class T>
Var<T> compose(const ComposeParams<T>& params, RowRef<T> left, RowRef<T> right, RowRef<T> third, Slot read) {
  auto out = params(ops::gather_rows(std::vector<RowRef<T>>{left, right, third}));
  return ops::row(out, static_cast<std::uint32_t>(read));
}

/// phi(x, y) = MLP_L(x) . MLP_R(y) / sqrt(d), row-wise.
template <class T>
struct CompatHead {
  Mlp<T> left, right;
  std::size_t d = 0;

  CompatHead() = default;
  CompatHead(ParameterSet<T>& ps, const std::string& prefix, const CioConfig& cfg, std::mt19937_64& rng)
      : left(ps, prefix + ".left", cfg.d, cfg.d, cfg.d, cfg.compat_layers, rng),
        right(ps, prefix + ".right", cfg.d, cfg.d, cfg.d, cfg.compat_layers, rng),
        d(cfg.d) {}

  Var<T> operator()(Var<T> x, Var<T> y) const {
    return ops::scale(ops::row_dot(left(x), right(y)), T(1) / std::sqrt(T(d)));
  }
};

struct CioCounters {
  std::size_t compose_calls = 0;
  std::size_t cells_encoded = 0;
  std::size_t batches = 0;

  CioCounters& operator+=(const CioCounters& o) {
    compose_calls += o.compose_calls;
    cells_encoded += o.cells_encoded;
    batches += o.batches;
    return *this;
  }
};

template <class T>
using CioChart = ChartLayer<RowRef<T>>;

template <class T>
struct CioResult {
  std::vector<CioChart<T>> layers;
  CioCounters counters;

  const CioChart<T>& last() const { return layers.back(); }
};

template <class T>
class CioStack {
 public:
  CioStack() = default;
  CioStack(ParameterSet<T>& ps, const CioConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    if (cfg.layers == 0 || cfg.d == 0) throw ConfigError("cio needs at least one layer and d > 0");
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::string p = "cio.layer." + std::to_string(l);
      if (cfg.share) {
        compose_.emplace_back(ps, p + ".compose", cfg, rng);
      } else {
        compose_.emplace_back(ps, p + ".compose_in", cfg, rng);
        compose_.emplace_back(ps, p + ".compose_out", cfg, rng);
      }
    }
    compat_in_ = CompatHead<T>(ps, "cio.compat_in", cfg, rng);
    compat_out_ = CompatHead<T>(ps, "cio.compat_out", cfg, rng);
    outside0_ = &ps.add_normal("cio.outside0", {1, cfg.d}, kInitStddev, rng);
    roots_ = &ps.add_normal("cio.root_outside", {cfg.layers, cfg.d}, kInitStddev, rng);
  }

  const CioConfig& config() const noexcept { return cfg_; }
  const ComposeParams<T>& inside_compose(std::size_t l) const { return compose_.at(cfg_.share ? l : 2 * l); }
  const ComposeParams<T>& outside_compose(std::size_t l) const { return compose_.at(cfg_.share ? l : 2 * l + 1); }
  const CompatHead<T>& compat_inside() const { return compat_in_; }
  const CompatHead<T>& compat_outside() const { return compat_out_; }
  Parameter<T>& outside0() const { return *outside0_; }
  Parameter<T>& root_outside() const { return *roots_; }

  /// Runs all layers.  `leaves` holds one embedding row per token.
  CioResult<T> run(Var<T> leaves, const Schedule& schedule) const {
    const int n = static_cast<int>(leaves.rows());
    if (n < 1) throw InputError("cio: empty sentence");
    if (leaves.cols() != cfg_.d) throw StructuralError("cio: embedding width does not match d");
    CioResult<T> res;
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      CioChart<T> chart(n, schedule, static_cast<int>(l));
      inside_pass(chart, schedule, l == 0 ? nullptr : &res.layers.back(), leaves, l, res.counters);
      outside_pass(chart, schedule, l, res.counters);
      res.layers.push_back(std::move(chart));
    }
    return res;
  }

  /// Fills ê and a for every cell, batch by batch.
  void inside_pass(CioChart<T>& chart, const Schedule& schedule, const CioChart<T>* prev, Var<T> leaves,
                   std::size_t l, CioCounters& counters) const {
    auto& tape = *leaves.tape;
    const int n = chart.length();
    auto zeros = tape.constant(Tensor<T>::matrix(static_cast<std::size_t>(n), 1));
    for (int i = 1; i <= n; ++i) {
      auto& c = chart.at(Span{i, i});
      c.inside = {leaves, static_cast<std::uint32_t>(i - 1)};
      c.inside_score = {zeros, static_cast<std::uint32_t>(i - 1)};
      c.has_inside = true;
    }
    const RowRef<T> shared_outside{tape.param(*outside0_), 0};
    const auto& params = inside_compose(l);
    for (const auto& batch : schedule.batches) {
      std::vector<RowRef<T>> triples, lefts, rights, left_scores, right_scores;
      std::vector<std::uint32_t> offsets{0};
      for (const auto& span : batch) {
        auto& cell = chart.at(span);
        const RowRef<T> third = prev ? prev->at(span).outside : shared_outside;
        for (int k : cell.splits) {
          const auto& lc = chart.at(Span{span.i, k});
          const auto& rc = chart.at(Span{k + 1, span.j});
          if (!lc.has_inside || !rc.has_inside) {
            throw StructuralError("schedule violation: sub-span of " + span.str() + " at split " +
                                  std::to_string(k) + " is not encoded");
          }
          triples.insert(triples.end(), {lc.inside, rc.inside, third});
          lefts.push_back(lc.inside);
          rights.push_back(rc.inside);
          left_scores.push_back(lc.inside_score);
          right_scores.push_back(rc.inside_score);
        }
        offsets.push_back(static_cast<std::uint32_t>(lefts.size()));
      }
      const std::size_t calls = lefts.size();
      auto composed = params(ops::gather_rows(triples));
      std::vector<std::uint32_t> parent_rows(calls);
      for (std::size_t c = 0; c < calls; ++c) parent_rows[c] = static_cast<std::uint32_t>(3 * c + 2);
      auto candidates = ops::take_rows(composed, parent_rows);
      auto a_bar = compat_in_(ops::gather_rows(lefts), ops::gather_rows(rights));
      auto a_k = ops::add_n<T>({a_bar, ops::gather_rows(left_scores), ops::gather_rows(right_scores)});
      auto w = ops::segment_softmax(a_k, offsets);
      auto e = ops::segment_weighted_sum(w, candidates, offsets);
      auto a = ops::segment_weighted_sum(w, a_k, offsets);
      for (std::size_t s = 0; s < batch.size(); ++s) {
        auto& cell = chart.at(batch[s]);
        cell.inside = {e, static_cast<std::uint32_t>(s)};
        cell.inside_score = {a, static_cast<std::uint32_t>(s)};
        cell.split_scores.clear();
        for (auto r = offsets[s]; r < offsets[s + 1]; ++r) cell.split_scores.push_back({a_k, r});
        cell.has_inside = true;
      }
      counters.compose_calls += calls;
      counters.cells_encoded += batch.size();
      ++counters.batches;
    }
    counters.cells_encoded += static_cast<std::size_t>(n);
  }

  /// Fills ě and b top-down.  Each (parent, split) pair is one compose call
  /// whose left and right child slots are the candidates for the two
  /// children.  Candidates are folded into a per-child running log-sum-exp
  /// accumulator as soon as they are produced.
  void outside_pass(CioChart<T>& chart, const Schedule& schedule, std::size_t l, CioCounters& counters) const {
    const int n = chart.length();
    auto& tape = *chart.at(Span{1, 1}).inside.src.tape;
    auto& root = chart.at(Span{1, n});
    root.outside = {tape.param(*roots_), static_cast<std::uint32_t>(l)};
    root.outside_score = {tape.constant(Tensor<T>::scalar(T(0))), 0};
    root.has_outside = true;
    chart.root_outside = root.outside;

    struct Accumulator {
      RowRef<T> lse, rep, b;
    };
    std::map<Span, Accumulator> acc;
    auto finalize = [&](Span s) {
      if (s == Span{1, n}) return;
      auto it = acc.find(s);
      if (it == acc.end()) throw StructuralError("schedule violation: " + s.str() + " has no encoded parent");
      auto& c = chart.at(s);
      c.outside = it->second.rep;
      c.outside_score = it->second.b;
      c.has_outside = true;
    };

    const auto& params = outside_compose(l);
    for (auto bt = schedule.batches.rbegin(); bt != schedule.batches.rend(); ++bt) {
      const auto& batch = *bt;
      for (const auto& span : batch) finalize(span);

      std::vector<RowRef<T>> triples, parent_reps, siblings, sibling_scores, parent_scores;
      std::vector<Span> children;
      for (const auto& span : batch) {
        const auto& cell = chart.at(span);
        for (int k : cell.splits) {
          const auto& lc = chart.at(Span{span.i, k});
          const auto& rc = chart.at(Span{k + 1, span.j});
          triples.insert(triples.end(), {lc.inside, rc.inside, cell.outside});
          parent_reps.insert(parent_reps.end(), {cell.outside, cell.outside});
          siblings.insert(siblings.end(), {rc.inside, lc.inside});
          sibling_scores.insert(sibling_scores.end(), {rc.inside_score, lc.inside_score});
          parent_scores.insert(parent_scores.end(), {cell.outside_score, cell.outside_score});
          children.insert(children.end(), {lc.span, rc.span});
        }
      }
      if (children.empty()) continue;
      const std::size_t calls = children.size() / 2;
      auto composed = params(ops::gather_rows(triples));
      auto b_bar = compat_out_(ops::gather_rows(parent_reps), ops::gather_rows(siblings));
      auto b_k = ops::add_n<T>({ops::gather_rows(sibling_scores), b_bar, ops::gather_rows(parent_scores)});

      // Candidate c of call q sits at composed row 3q + (c % 2), score row c.
      std::map<Span, std::vector<std::uint32_t>> by_child;
      for (std::size_t c = 0; c < children.size(); ++c) by_child[children[c]].push_back(static_cast<std::uint32_t>(c));
      std::vector<RowRef<T>> scores, reps, bvals;
      std::vector<std::uint32_t> offsets{0};
      std::vector<Span> order;
      for (const auto& [child, cands] : by_child) {
        auto it = acc.find(child);
        if (it != acc.end()) {
          scores.push_back(it->second.lse);
          reps.push_back(it->second.rep);
          bvals.push_back(it->second.b);
        }
        for (auto c : cands) {
          scores.push_back({b_k, c});
          reps.push_back({composed, 3 * (c / 2) + (c % 2)});
          bvals.push_back({b_k, c});
        }
        offsets.push_back(static_cast<std::uint32_t>(scores.size()));
        order.push_back(child);
      }
      auto score_col = ops::gather_rows(scores);
      auto w = ops::segment_softmax(score_col, offsets);
      auto rep = ops::segment_weighted_sum(w, ops::gather_rows(reps), offsets);
      auto bv = ops::segment_weighted_sum(w, ops::gather_rows(bvals), offsets);
      auto lse = ops::segment_log_sum_exp(score_col, offsets);
      for (std::size_t s = 0; s < order.size(); ++s) {
        const auto r = static_cast<std::uint32_t>(s);
        acc[order[s]] = Accumulator{{lse, r}, {rep, r}, {bv, r}};
      }
      counters.compose_calls += calls;
    }
    for (int i = 1; i <= n; ++i) finalize(Span{i, i});
  }

 private:
  CioConfig cfg_;
  std::vector<ComposeParams<T>> compose_;
  CompatHead<T> compat_in_, compat_out_;
  Parameter<T>* outside0_ = nullptr;
  Parameter<T>* roots_ = nullptr;
};

/// Recursive argmax over the inside split scores of the given layer, ties
/// to the smallest split.
template <class T>
BinaryTree induce_tree(const CioChart<T>& chart) {
  BinaryTree tree;
  tree.n = chart.length();
  std::vector<Span> stack{Span{1, tree.n}};
  while (!stack.empty()) {
    const Span s = stack.back();
    stack.pop_back();
    if (s.is_leaf()) continue;
    const auto& cell = chart.at(s);
    if (cell.splits.empty() || cell.split_scores.size() != cell.splits.size()) {
      throw StructuralError("cell " + s.str() + " has no scored splits");
    }
    std::size_t best = 0;
    for (std::size_t q = 1; q < cell.splits.size(); ++q)
      if (cell.split_scores[q].item() > cell.split_scores[best].item()) best = q;
    const int k = cell.splits[best];
    tree.steps.push_back(SplitStep{k, s});
    stack.push_back(Span{k + 1, s.j});
    stack.push_back(Span{s.i, k});
  }
  return tree;
}

}  // namespace recat
