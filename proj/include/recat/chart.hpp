#pragma once

// Chart-table structures shared by pruning, inside and outside passes.
// Spans are 1-based and inclusive: (i, j) covers tokens i..j.

#include <compare>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "recat/error.hpp"

namespace recat {

struct Span {
  int i = 1;
  int j = 1;

  constexpr int width() const noexcept { return j - i + 1; }
  constexpr bool is_leaf() const noexcept { return i == j; }
  friend constexpr auto operator<=>(const Span&, const Span&) = default;

  std::string str() const { return "(" + std::to_string(i) + "," + std::to_string(j) + ")"; }
};

/// Which child of the parent a span is.
enum class Side { left_child, right_child };

/// One immediate parent of a span.  For a left child (i,j) the parent is
/// (i, endpoint) with endpoint > j; for a right child it is (endpoint, j)
/// with endpoint < i.
struct ParentLink {
  Span parent;
  int endpoint = 0;
  Side side = Side::left_child;

  friend auto operator<=>(const ParentLink&, const ParentLink&) = default;
};

/// Split point of `link.parent` that yields `child`.
constexpr int split_of(Span child, const ParentLink& link) noexcept {
  return link.side == Side::left_child ? child.j : child.i - 1;
}

/// The other child of `link.parent`.
constexpr Span sibling_of(Span child, const ParentLink& link) noexcept {
  return link.side == Side::left_child ? Span{child.j + 1, link.endpoint} : Span{link.endpoint, child.i - 1};
}

using SplitMap = std::map<Span, std::vector<int>>;
using ParentMap = std::map<Span, std::vector<ParentLink>>;

/// Relational inverse of a split map: each k in K(i,j) adds (i,j) to the
/// parents of (i,k) as left child and of (k+1,j) as right child.
inline ParentMap parents_from_splits(const SplitMap& splits) {
  ParentMap parents;
  for (const auto& [span, ks] : splits) {
    for (int k : ks) {
      parents[Span{span.i, k}].push_back(ParentLink{span, span.j, Side::left_child});
      parents[Span{k + 1, span.j}].push_back(ParentLink{span, span.i, Side::right_child});
    }
  }
  return parents;
}

/// Inverse of parents_from_splits.
inline SplitMap splits_from_parents(const ParentMap& parents) {
  std::map<Span, std::set<int>> acc;
  for (const auto& [child, links] : parents) {
    for (const auto& l : links) {
      acc[l.parent].insert(split_of(child, l));
    }
  }
  SplitMap out;
  for (auto& [span, ks] : acc) out[span] = std::vector<int>(ks.begin(), ks.end());
  return out;
}

/// Pruning output.  `batches` lists non-leaf cells in encoding order; leaves
/// are implicitly ready before the first batch.
struct Schedule {
  int n = 0;
  std::vector<std::vector<Span>> batches;
  SplitMap splits;
  ParentMap parents;

  std::size_t inside_steps() const noexcept { return batches.size(); }

  /// Encoded cells including the n leaves.
  std::size_t cell_count() const noexcept {
    std::size_t c = static_cast<std::size_t>(n);
    for (const auto& b : batches) c += b.size();
    return c;
  }

  std::size_t split_count() const noexcept {
    std::size_t c = 0;
    for (const auto& b : batches)
      for (const auto& s : b) c += splits.at(s).size();
    return c;
  }

  bool contains(Span s) const { return s.is_leaf() ? (s.i >= 1 && s.j <= n) : splits.count(s) > 0; }

  /// Checks the topological and inverse-relation invariants.
  void validate() const {
    if (n < 1) throw StructuralError("schedule for empty sentence");
    std::set<Span> ready;
    for (int i = 1; i <= n; ++i) ready.insert(Span{i, i});
    std::size_t scheduled = 0;
    for (const auto& batch : batches) {
      for (const auto& s : batch) {
        if (s.i < 1 || s.j > n || s.i >= s.j) {
          throw StructuralError("schedule references span " + s.str() + " outside [1," +
                                std::to_string(n) + "]");
        }
        auto it = splits.find(s);
        if (it == splits.end() || it->second.empty()) {
          throw StructuralError("scheduled span " + s.str() + " has no valid splits");
        }
        for (int k : it->second) {
          if (k < s.i || k >= s.j) throw StructuralError("split " + std::to_string(k) + " outside " + s.str());
          if (!ready.count(Span{s.i, k}) || !ready.count(Span{k + 1, s.j})) {
            throw StructuralError("span " + s.str() + " split at " + std::to_string(k) +
                                  " needs a sub-span that is not ready");
          }
        }
      }
      for (const auto& s : batch) {
        if (!ready.insert(s).second) throw StructuralError("span " + s.str() + " scheduled twice");
      }
      scheduled += batch.size();
    }
    if (scheduled != splits.size()) throw StructuralError("split map lists spans that are never scheduled");
    if (n > 1 && !ready.count(Span{1, n})) throw StructuralError("root span is not scheduled");
    if (parents != parents_from_splits(splits)) throw StructuralError("parent map is not the inverse of splits");
  }
};

/// One chart entry.  `Rep` is whatever handle the pass stores values as.
template <class Rep>
struct Cell {
  Span span;
  Rep inside{};
  Rep inside_score{};
  Rep outside{};
  Rep outside_score{};
  std::vector<int> splits;
  /// a[k] for each entry of `splits`, kept for tree induction.
  std::vector<Rep> split_scores;
  bool has_inside = false;
  bool has_outside = false;
};

/// Chart table of one layer: the leaves plus every scheduled span.
template <class Rep>
class ChartLayer {
 public:
  ChartLayer() = default;

  ChartLayer(int n, const Schedule& schedule, int layer) : layer_(layer), n_(n) {
    if (n < 1) throw InputError("chart needs at least one token");
    if (schedule.n != n) throw StructuralError("schedule length does not match chart length");
    index_.assign(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), -1);
    for (int i = 1; i <= n; ++i) insert(Span{i, i}, {});
    for (const auto& batch : schedule.batches) {
      for (const auto& s : batch) {
        if (s.i < 1 || s.j > n || s.i > s.j) {
          throw StructuralError("schedule references span " + s.str() + " outside [1," + std::to_string(n) + "]");
        }
        insert(s, schedule.splits.at(s));
      }
    }
  }

  int layer() const noexcept { return layer_; }
  int length() const noexcept { return n_; }
  std::size_t size() const noexcept { return cells_.size(); }

  Cell<Rep>* find(Span s) {
    if (s.i < 1 || s.j > n_ || s.i > s.j) return nullptr;
    const int idx = index_[slot(s)];
    return idx < 0 ? nullptr : &cells_[static_cast<std::size_t>(idx)];
  }
  const Cell<Rep>* find(Span s) const { return const_cast<ChartLayer*>(this)->find(s); }

  Cell<Rep>& at(Span s) {
    auto* c = find(s);
    if (!c) throw StructuralError("span " + s.str() + " is not in the chart");
    return *c;
  }
  const Cell<Rep>& at(Span s) const { return const_cast<ChartLayer*>(this)->at(s); }

  auto begin() { return cells_.begin(); }
  auto end() { return cells_.end(); }
  auto begin() const { return cells_.begin(); }
  auto end() const { return cells_.end(); }

  Rep root_outside{};

 private:
  std::size_t slot(Span s) const {
    return static_cast<std::size_t>(s.i - 1) * static_cast<std::size_t>(n_) + static_cast<std::size_t>(s.j - 1);
  }

  void insert(Span s, std::vector<int> splits) {
    auto& idx = index_[slot(s)];
    if (idx >= 0) throw StructuralError("span " + s.str() + " allocated twice");
    idx = static_cast<int>(cells_.size());
    Cell<Rep> c;
    c.span = s;
    c.splits = std::move(splits);
    cells_.push_back(std::move(c));
  }

  int layer_ = 0;
  int n_ = 0;
  std::vector<Cell<Rep>> cells_;
  std::vector<int> index_;
};

template <class Rep>
ChartLayer<Rep> new_chart(int n, const Schedule& schedule, int layer) {
  return ChartLayer<Rep>(n, schedule, layer);
}

}  // namespace recat
