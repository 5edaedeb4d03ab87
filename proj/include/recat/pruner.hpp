#pragma once

// Top-down split parser, chart pruning, cell-batch construction and the
// parser's hard-EM loss.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <queue>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "recat/chart.hpp"
#include "recat/error.hpp"
#include "recat/numerics.hpp"

namespace recat {

/// One logit per boundary: logits[k-1] scores the split between tokens k
/// and k+1.  Non-splittable boundaries hold -inf.
struct SplitScores {
  std::vector<double> logits;

  int boundaries() const noexcept { return static_cast<int>(logits.size()); }
  double at(int k) const { return logits.at(static_cast<std::size_t>(k - 1)); }
};

/// Set of forbidden split points (1-based boundaries).
using BoundarySet = std::set<int>;

struct SplitStep {
  int split = 0;
  Span span;
  friend auto operator<=>(const SplitStep&, const SplitStep&) = default;
};

/// Top-down split sequence; the reverse is the merge order.
using SplitOrder = std::vector<SplitStep>;

/// Binary tree over n tokens stored as its top-down split steps.
struct BinaryTree {
  int n = 0;
  SplitOrder steps;

  /// Split point of each internal span.
  std::map<Span, int> split_map() const {
    std::map<Span, int> m;
    for (const auto& st : steps) m[st.span] = st.split;
    return m;
  }

  /// All 2n-1 node spans.
  std::set<Span> spans() const {
    std::set<Span> out;
    for (int i = 1; i <= n; ++i) out.insert(Span{i, i});
    for (const auto& st : steps) out.insert(st.span);
    return out;
  }

  /// Nodes in in-order: leaves in token order, each internal node between
  /// its two subtrees.
  std::vector<Span> in_order() const {
    std::vector<Span> out;
    if (n < 1) return out;
    const auto splits = split_map();
    std::vector<std::pair<Span, bool>> stack{{Span{1, n}, false}};
    while (!stack.empty()) {
      auto [s, expanded] = stack.back();
      stack.pop_back();
      if (s.is_leaf() || expanded) {
        out.push_back(s);
        continue;
      }
      const int k = splits.at(s);
      stack.push_back({Span{k + 1, s.j}, false});
      stack.push_back({s, true});
      stack.push_back({Span{s.i, k}, false});
    }
    return out;
  }

  friend bool operator==(const BinaryTree& a, const BinaryTree& b) { return a.n == b.n && a.spans() == b.spans(); }
};

inline SplitScores apply_nonsplittable(SplitScores v, const BoundarySet& forbidden) {
  const int n_minus_1 = v.boundaries();
  for (int k : forbidden) {
    if (k < 1 || k > n_minus_1) throw InputError("forbidden split " + std::to_string(k) + " out of range");
  }
  if (n_minus_1 >= 1 && static_cast<int>(forbidden.size()) == n_minus_1) {
    throw InputError("no admissible tree: every split point is forbidden");
  }
  for (int k : forbidden) v.logits[static_cast<std::size_t>(k - 1)] = -std::numeric_limits<double>::infinity();
  return v;
}

/// Highest-scoring split of span s; ties go to the smallest k.
inline int best_split(const SplitScores& v, Span s) {
  int best = s.i;
  for (int k = s.i + 1; k < s.j; ++k)
    if (v.at(k) > v.at(best)) best = k;
  return best;
}

/// Recursive top-down selection: pick the best split of the current span,
/// recurse on both halves.  Steps are emitted in descending score order
/// across the frontier (a priority queue over pending spans), which for the
/// nested case is the plain descending order of boundary scores.
inline SplitOrder split_order(const SplitScores& v) {
  const int n = v.boundaries() + 1;
  SplitOrder order;
  if (n < 2) return order;
  struct Pending {
    double score;
    int split;
    Span span;
    bool operator<(const Pending& o) const {
      if (score != o.score) return score < o.score;
      return split > o.split;
    }
  };
  std::priority_queue<Pending> queue;
  auto push = [&](Span s) {
    if (s.is_leaf()) return;
    const int k = best_split(v, s);
    queue.push(Pending{v.at(k), k, s});
  };
  push(Span{1, n});
  while (!queue.empty()) {
    auto p = queue.top();
    queue.pop();
    order.push_back(SplitStep{p.split, p.span});
    push(Span{p.span.i, p.split});
    push(Span{p.split + 1, p.span.j});
  }
  return order;
}

/// Height of each split in the tree described by `order`: 1 + the larger
/// height of the two spans it joins, leaves at 0.  Indexed by split - 1.
inline std::vector<int> split_heights(const SplitOrder& order, int n) {
  std::map<Span, int> span_height;
  std::vector<int> heights(static_cast<std::size_t>(std::max(n - 1, 0)), 0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Span left{it->span.i, it->split};
    const Span right{it->split + 1, it->span.j};
    auto h = [&](Span s) {
      if (s.is_leaf()) return 0;
      auto f = span_height.find(s);
      if (f == span_height.end()) throw StructuralError("inconsistent split order: child " + s.str() + " has no split");
      return f->second;
    };
    const int hh = 1 + std::max(h(left), h(right));
    heights[static_cast<std::size_t>(it->split - 1)] = hh;
    span_height[it->span] = hh;
  }
  return heights;
}

inline void check_split_order(const SplitOrder& order, int n) {
  if (static_cast<int>(order.size()) != std::max(n - 1, 0)) {
    throw StructuralError("split order has " + std::to_string(order.size()) + " steps for n=" + std::to_string(n));
  }
  std::set<Span> open{Span{1, n}};
  std::set<int> seen;
  for (const auto& st : order) {
    if (!open.count(st.span)) throw StructuralError("inconsistent split order: span " + st.span.str() + " is not open");
    if (st.split < st.span.i || st.split >= st.span.j) {
      throw StructuralError("split " + std::to_string(st.split) + " outside " + st.span.str());
    }
    if (!seen.insert(st.split).second) throw StructuralError("split " + std::to_string(st.split) + " repeated");
    open.erase(st.span);
    if (st.split > st.span.i) open.insert(Span{st.span.i, st.split});
    if (st.split + 1 < st.span.j) open.insert(Span{st.split + 1, st.span.j});
  }
}

namespace detail {

/// Word extent [start, end] around a forbidden boundary k.
inline Span word_of(int k, int n, const BoundarySet& forbidden) {
  int s = k;
  while (s > 1 && forbidden.count(s - 1)) --s;
  int e = k + 1;
  while (e < n && forbidden.count(e)) ++e;
  return Span{s, e};
}

inline bool split_allowed(Span cell, int k, int n, const BoundarySet& forbidden) {
  if (!forbidden.count(k)) return true;
  const Span w = word_of(k, n, forbidden);
  return w.i <= cell.i && cell.j <= w.j;
}

}  // namespace detail

/// Pruned encoding order.  Spans are tracked on a frontier of atoms (merged
/// spans); a cell is a window of consecutive atoms whose height is the
/// number of atoms minus one.  Rows below height m are scheduled first; then
/// split points are merged group by group in increasing tree height, and
/// after each group every window of height <= m on the new frontier that has
/// not been encoded yet is appended with the atom boundaries inside it as
/// valid splits.  Boundaries in `forbidden` are only valid inside their own
/// word.
inline Schedule prune_schedule(int n, int m, const SplitOrder& order, const BoundarySet& forbidden = {}) {
  if (n < 1) throw InputError("cannot prune an empty sentence");
  if (m < 2) throw ConfigError("pruning threshold m must be >= 2");
  check_split_order(order, n);
  Schedule sched;
  sched.n = n;

  auto add_cell = [&](Span s, std::vector<int> ks, std::vector<Span>& batch) {
    std::erase_if(ks, [&](int k) { return !detail::split_allowed(s, k, n, forbidden); });
    if (ks.empty()) throw StructuralError("cell " + s.str() + " has no admissible split");
    sched.splits.emplace(s, std::move(ks));
    batch.push_back(s);
  };

  for (int w = 2; w <= std::min(m, n); ++w) {
    std::vector<Span> batch;
    for (int i = 1; i + w - 1 <= n; ++i) {
      std::vector<int> ks;
      for (int k = i; k < i + w - 1; ++k) ks.push_back(k);
      add_cell(Span{i, i + w - 1}, std::move(ks), batch);
    }
    sched.batches.push_back(std::move(batch));
  }

  const auto heights = split_heights(order, n);
  std::map<int, std::vector<int>> groups;
  for (int k = 1; k < n; ++k) groups[heights[static_cast<std::size_t>(k - 1)]].push_back(k);

  std::vector<Span> atoms;
  for (int i = 1; i <= n; ++i) atoms.push_back(Span{i, i});

  for (const auto& [height, ks] : groups) {
    const std::set<int> group(ks.begin(), ks.end());
    std::vector<Span> merged;
    for (std::size_t a = 0; a < atoms.size(); ++a) {
      if (a + 1 < atoms.size() && group.count(atoms[a].j)) {
        if (group.count(atoms[a + 1].j) && a + 2 < atoms.size()) {
          throw StructuralError("inconsistent split order: group merges overlap at " + atoms[a + 1].str());
        }
        merged.push_back(Span{atoms[a].i, atoms[a + 1].j});
        ++a;
      } else {
        merged.push_back(atoms[a]);
      }
    }
    atoms = std::move(merged);
    for (int h = 1; h <= m && h < static_cast<int>(atoms.size()); ++h) {
      std::vector<Span> batch;
      for (std::size_t a = 0; a + static_cast<std::size_t>(h) < atoms.size(); ++a) {
        const Span s{atoms[a].i, atoms[a + static_cast<std::size_t>(h)].j};
        if (sched.splits.count(s)) continue;
        std::vector<int> bounds;
        for (std::size_t b = a; b < a + static_cast<std::size_t>(h); ++b) bounds.push_back(atoms[b].j);
        add_cell(s, std::move(bounds), batch);
      }
      if (!batch.empty()) sched.batches.push_back(std::move(batch));
    }
  }
  if (atoms.size() != 1) throw StructuralError("split order did not merge the sentence into one span");
  sched.parents = parents_from_splits(sched.splits);
  return sched;
}

/// Re-batches a schedule so every cell is encoded in the first step where
/// all its sub-spans are ready (notify-list propagation from the leaves).
/// Cells that no kept parent uses are dropped; the root is always kept.
inline Schedule build_cell_batches(const Schedule& in) {
  Schedule out;
  out.n = in.n;
  if (in.n == 1) return out;
  const Span root{1, in.n};

  // Drop cells with no parent until every non-root cell has one.
  SplitMap kept = in.splits;
  for (bool changed = true; changed;) {
    changed = false;
    const auto parents = parents_from_splits(kept);
    for (auto it = kept.begin(); it != kept.end();) {
      if (it->first != root && !parents.count(it->first)) {
        it = kept.erase(it);
        changed = true;
      } else {
        ++it;
      }
    }
  }
  if (!kept.count(root)) throw StructuralError("schedule does not encode the root span");

  // Notify lists and per-cell count of sub-span slots still pending.
  std::map<Span, std::vector<Span>> notify;
  std::map<Span, int> pending;
  for (const auto& [span, ks] : kept) {
    std::set<Span> subs;
    for (int k : ks) {
      subs.insert(Span{span.i, k});
      subs.insert(Span{k + 1, span.j});
    }
    pending[span] = static_cast<int>(subs.size());
    for (const auto& s : subs) notify[s].push_back(span);
  }
  std::vector<Span> ready;
  for (int i = 1; i <= in.n; ++i) ready.push_back(Span{i, i});
  std::size_t placed = 0;
  while (!ready.empty()) {
    std::vector<Span> next;
    for (const auto& c : ready) {
      auto it = notify.find(c);
      if (it == notify.end()) continue;
      for (const auto& p : it->second)
        if (--pending[p] == 0) next.push_back(p);
    }
    std::sort(next.begin(), next.end(), [](Span a, Span b) {
      return a.width() != b.width() ? a.width() < b.width() : a.i < b.i;
    });
    if (!next.empty()) out.batches.push_back(next);
    placed += next.size();
    ready = std::move(next);
  }
  if (placed != kept.size()) throw StructuralError("cell dependency cycle while building batches");
  out.splits = std::move(kept);
  out.parents = parents_from_splits(out.splits);
  return out;
}

/// -sum_t log softmax_{k in [i_t, j_t)}(v)[a_t] over the target's steps.
/// Forbidden positions are excluded from each step's support; a step whose
/// whole support is forbidden is forced and contributes nothing.
template <class T>
Var<T> parser_nll(Var<T> logits, const SplitOrder& target, int n, const BoundarySet& forbidden = {}) {
  auto& tape = *logits.tape;
  if (n < 2) return tape.constant(Tensor<T>::scalar(T(0)));
  if (logits.value().size() != static_cast<std::size_t>(n - 1)) {
    throw StructuralError("parser_nll: expected " + std::to_string(n - 1) + " logits");
  }
  check_split_order(target, n);
  std::vector<Var<T>> terms;
  for (const auto& st : target) {
    std::vector<std::uint32_t> support;
    for (int k = st.span.i; k < st.span.j; ++k)
      if (!forbidden.count(k)) support.push_back(static_cast<std::uint32_t>(k - 1));
    if (support.empty()) continue;
    if (forbidden.count(st.split)) {
      throw StructuralError("target split " + std::to_string(st.split) + " is forbidden inside " + st.span.str());
    }
    terms.push_back(ops::pick_log_softmax(logits, support, static_cast<std::uint32_t>(st.split - 1)));
  }
  if (terms.empty()) return tape.constant(Tensor<T>::scalar(T(0)));
  return ops::scale(ops::add_n(terms), T(-1));
}

struct ParserConfig {
  std::size_t vocab = 0;
  std::size_t embed = 32;
  std::size_t hidden = 32;
  std::size_t layers = 1;
};

/// Bidirectional LSTM encoder with a two-layer boundary head reading
/// [forward state at k ; backward state at k+1].  Parameters live under
/// the "parser." prefix and are private to the parser.
template <class T>
class ParserModel {
 public:
  ParserModel() = default;
  ParserModel(ParameterSet<T>& ps, const ParserConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    if (cfg.vocab == 0 || cfg.embed == 0 || cfg.hidden == 0 || cfg.layers == 0) {
      throw ConfigError("parser sizes must be positive");
    }
    embedding_ = &ps.add_normal("parser.embed", {cfg.vocab, cfg.embed}, 0.1, rng);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::size_t in = l == 0 ? cfg.embed : 2 * cfg.hidden;
      forward_.emplace_back(ps, "parser.lstm." + std::to_string(l) + ".fwd", in, cfg.hidden, rng);
      backward_.emplace_back(ps, "parser.lstm." + std::to_string(l) + ".bwd", in, cfg.hidden, rng);
    }
    head_ = Mlp<T>(ps, "parser.head", 2 * cfg.hidden, cfg.hidden, 1, 2, rng);
  }

  const ParserConfig& config() const noexcept { return cfg_; }

  /// Logits [n-1, 1] for the unmasked tokens.  Empty optional when n == 1.
  std::optional<Var<T>> forward(Tape<T>& tape, const std::vector<std::uint32_t>& tokens) const {
    if (tokens.empty()) throw InputError("cannot score an empty sentence");
    for (auto t : tokens) {
      if (t >= cfg_.vocab) throw InputError("token id " + std::to_string(t) + " outside parser vocab");
    }
    if (tokens.size() == 1) return std::nullopt;
    auto x = ops::take_rows(tape.param(*embedding_), tokens);
    Var<T> fwd{}, bwd{};
    for (std::size_t l = 0; l < forward_.size(); ++l) {
      fwd = forward_[l](x, false);
      bwd = backward_[l](x, true);
      x = ops::concat_cols(fwd, bwd);
    }
    const auto n = static_cast<std::uint32_t>(tokens.size());
    std::vector<std::uint32_t> left, right;
    for (std::uint32_t k = 0; k + 1 < n; ++k) {
      left.push_back(k);
      right.push_back(k + 1);
    }
    auto pairs = ops::concat_cols(ops::take_rows(fwd, left), ops::take_rows(bwd, right));
    return head_(pairs);
  }

 private:
  ParserConfig cfg_;
  Parameter<T>* embedding_ = nullptr;
  std::vector<LstmLayer<T>> forward_, backward_;
  Mlp<T> head_;
};

/// Reads logits off a parser output node.
template <class T>
SplitScores to_split_scores(const std::optional<Var<T>>& logits) {
  SplitScores s;
  if (!logits) return s;
  for (T v : logits->value().storage()) s.logits.push_back(static_cast<double>(v));
  return s;
}

template <class T>
SplitScores score_splits(const ParserModel<T>& parser, const std::vector<std::uint32_t>& tokens) {
  Tape<T> tape(false);
  return to_split_scores<T>(parser.forward(tape, tokens));
}

/// Schedule that encodes exactly the nodes of one tree, one split per cell.
inline Schedule tree_schedule(const BinaryTree& tree) {
  check_split_order(tree.steps, tree.n);
  Schedule s;
  s.n = tree.n;
  for (const auto& st : tree.steps) {
    s.splits[st.span] = {st.split};
    s.batches.push_back({st.span});
  }
  std::reverse(s.batches.begin(), s.batches.end());
  s.parents = parents_from_splits(s.splits);
  return build_cell_batches(s);
}

}  // namespace recat
