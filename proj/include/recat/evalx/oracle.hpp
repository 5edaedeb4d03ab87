#pragma once

// Cubic full-chart inside-outside written with plain loops over doubles.
// Shares parameters with a CioStack but none of its scheduling or tape
// machinery; used to check the pruned engine when nothing is pruned.

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <vector>

#include "recat/cio.hpp"
#include "recat/evalx/reference.hpp"

namespace recat::reference {

struct OracleCell {
  Vec inside, outside;
  double inside_score = 0, outside_score = 0;
  std::map<int, double> split_scores;
};

using OracleChart = std::map<Span, OracleCell>;

struct OracleResult {
  std::vector<OracleChart> layers;
  BinaryTree tree;
};

namespace detail {

inline Vec param_row(const Tensor<double>& t, std::size_t r) {
  auto s = t.row_span(r);
  return Vec(s.begin(), s.end());
}

inline Vec compose(const ComposeParams<double>& p, const Vec& l, const Vec& r, const Vec& parent, std::size_t slot) {
  Mat x{l, r, parent};
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t c = 0; c < x[s].size(); ++c) x[s][c] += p.roles->value.at(s, c);
  for (const auto& blk : p.blocks) x = attention_block(x, blk);
  return x[slot];
}

inline double compat(const CompatHead<double>& h, const Vec& x, const Vec& y) {
  const Vec u = mlp(x, h.left), v = mlp(y, h.right);
  double dot = 0;
  for (std::size_t c = 0; c < u.size(); ++c) dot += u[c] * v[c];
  return dot / std::sqrt(static_cast<double>(h.d));
}

/// Direct softmax-weighted mix: returns (sum w_k rep_k, sum w_k score_k).
inline std::pair<Vec, double> mix(const std::vector<Vec>& reps, const std::vector<double>& scores) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double s : scores) mx = std::max(mx, s);
  double z = 0;
  for (double s : scores) z += std::exp(s - mx);
  Vec rep(reps.front().size(), 0.0);
  double score = 0;
  for (std::size_t q = 0; q < reps.size(); ++q) {
    const double w = std::exp(scores[q] - mx) / z;
    for (std::size_t c = 0; c < rep.size(); ++c) rep[c] += w * reps[q][c];
    score += w * scores[q];
  }
  return {rep, score};
}

/// Every binary tree over [i, j].
inline std::vector<BinaryTree> all_trees(int i, int j, int n) {
  if (i == j) return {BinaryTree{n, {}}};
  std::vector<BinaryTree> out;
  for (int k = i; k < j; ++k) {
    for (const auto& l : all_trees(i, k, n)) {
      for (const auto& r : all_trees(k + 1, j, n)) {
        BinaryTree t{n, {SplitStep{k, Span{i, j}}}};
        t.steps.insert(t.steps.end(), l.steps.begin(), l.steps.end());
        t.steps.insert(t.steps.end(), r.steps.begin(), r.steps.end());
        out.push_back(std::move(t));
      }
    }
  }
  return out;
}

}  // namespace detail

/// Full-chart inside-outside over all spans for every layer.  Tree: among
/// all binary trees, the one whose every internal node takes the highest
/// scoring split of its span (smallest split on ties), found by exhaustive
/// enumeration.  Limited to n <= 12.
inline OracleResult brute_force_cio(const CioStack<double>& stack, const Mat& embeddings) {
  const int n = static_cast<int>(embeddings.size());
  if (n < 1 || n > 12) throw InputError("brute-force oracle supports 1 <= n <= 12");
  const auto& cfg = stack.config();
  OracleResult res;
  const Vec shared_outside = detail::param_row(stack.outside0().value, 0);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    OracleChart chart;
    for (int i = 1; i <= n; ++i) chart[Span{i, i}].inside = embeddings[static_cast<std::size_t>(i - 1)];
    for (int w = 2; w <= n; ++w) {
      for (int i = 1; i + w - 1 <= n; ++i) {
        const Span s{i, i + w - 1};
        const Vec& third = l == 0 ? shared_outside : res.layers.back().at(s).outside;
        std::vector<Vec> reps;
        std::vector<double> scores;
        auto& cell = chart[s];
        for (int k = s.i; k < s.j; ++k) {
          const auto& lc = chart.at(Span{s.i, k});
          const auto& rc = chart.at(Span{k + 1, s.j});
          reps.push_back(detail::compose(stack.inside_compose(l), lc.inside, rc.inside, third, 2));
          scores.push_back(detail::compat(stack.compat_inside(), lc.inside, rc.inside) + lc.inside_score +
                           rc.inside_score);
          cell.split_scores[k] = scores.back();
        }
        std::tie(cell.inside, cell.inside_score) = detail::mix(reps, scores);
      }
    }
    chart.at(Span{1, n}).outside = detail::param_row(stack.root_outside().value, l);
    chart.at(Span{1, n}).outside_score = 0;
    for (int w = n - 1; w >= 1; --w) {
      for (int i = 1; i + w - 1 <= n; ++i) {
        const Span s{i, i + w - 1};
        std::vector<Vec> reps;
        std::vector<double> scores;
        auto& cell = chart.at(s);
        // Parents where s is the left child: (i, k) with sibling (j+1, k).
        for (int k = s.j + 1; k <= n; ++k) {
          const auto& parent = chart.at(Span{s.i, k});
          const auto& sib = chart.at(Span{s.j + 1, k});
          reps.push_back(detail::compose(stack.outside_compose(l), cell.inside, sib.inside, parent.outside, 0));
          scores.push_back(sib.inside_score + detail::compat(stack.compat_outside(), parent.outside, sib.inside) +
                           parent.outside_score);
        }
        // Parents where s is the right child: (k, j) with sibling (k, i-1).
        for (int k = 1; k < s.i; ++k) {
          const auto& parent = chart.at(Span{k, s.j});
          const auto& sib = chart.at(Span{k, s.i - 1});
          reps.push_back(detail::compose(stack.outside_compose(l), sib.inside, cell.inside, parent.outside, 1));
          scores.push_back(sib.inside_score + detail::compat(stack.compat_outside(), parent.outside, sib.inside) +
                           parent.outside_score);
        }
        std::tie(cell.outside, cell.outside_score) = detail::mix(reps, scores);
      }
    }
    res.layers.push_back(std::move(chart));
  }

  const auto& last = res.layers.back();
  auto locally_best = [&](const BinaryTree& t) {
    for (const auto& st : t.steps) {
      const auto& sc = last.at(st.span).split_scores;
      for (const auto& [k, v] : sc) {
        if (v > sc.at(st.split) || (v == sc.at(st.split) && k < st.split)) return false;
      }
    }
    return true;
  };
  int found = 0;
  for (const auto& t : detail::all_trees(1, n, n)) {
    if (locally_best(t)) {
      res.tree = t;
      ++found;
    }
  }
  if (found != 1) throw NumericError("oracle found " + std::to_string(found) + " locally best trees");
  return res;
}

}  // namespace recat::reference
