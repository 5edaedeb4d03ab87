#include <gtest/gtest.h>

#include <random>
#include <set>

#include "recat/chart.hpp"
#include "recat/pruner.hpp"
#include "test_support.hpp"

namespace recat {
namespace {

Schedule full_schedule(int n) {
  Schedule s;
  s.n = n;
  for (int w = 2; w <= n; ++w) {
    std::vector<Span> batch;
    for (int i = 1; i + w - 1 <= n; ++i) {
      std::vector<int> ks;
      for (int k = i; k < i + w - 1; ++k) ks.push_back(k);
      s.splits[Span{i, i + w - 1}] = ks;
      batch.push_back(Span{i, i + w - 1});
    }
    s.batches.push_back(batch);
  }
  s.parents = parents_from_splits(s.splits);
  return s;
}

TEST(NewChart, SingleToken) {
  Schedule s;
  s.n = 1;
  auto chart = new_chart<double>(1, s, 0);
  EXPECT_EQ(chart.size(), 1u);
  EXPECT_TRUE(chart.at(Span{1, 1}).splits.empty());
  EXPECT_EQ(s.inside_steps(), 0u);
}

TEST(NewChart, TwoTokens) {
  auto s = full_schedule(2);
  s.validate();
  auto chart = new_chart<double>(2, s, 3);
  EXPECT_EQ(chart.layer(), 3);
  EXPECT_EQ(chart.size(), 3u);
  EXPECT_EQ(chart.at(Span{1, 2}).splits, std::vector<int>{1});
  EXPECT_TRUE(chart.at(Span{1, 1}).splits.empty());
  EXPECT_TRUE(chart.at(Span{2, 2}).splits.empty());
}

TEST(NewChart, FigureTwoReplay) {
  // Hand replay of pruning with m = 2 on merge order 1,5,2,4,3.
  const auto order = split_order(testing::figure_two_scores());
  const auto s = prune_schedule(6, 2, order);
  s.validate();
  const SplitMap expected{
      {{1, 2}, {1}},    {{2, 3}, {2}},    {{3, 4}, {3}}, {{4, 5}, {4}}, {{5, 6}, {5}},
      {{1, 3}, {2}},    {{4, 6}, {4}},    {{1, 4}, {2, 3}},
      {{3, 6}, {3, 4}}, {{1, 6}, {3}},
  };
  EXPECT_EQ(s.splits, expected);
  auto chart = new_chart<int>(6, s, 0);
  EXPECT_EQ(chart.size(), 6u + expected.size());
  EXPECT_EQ(chart.find(Span{2, 4}), nullptr);
  EXPECT_EQ(chart.at(Span{3, 6}).splits, (std::vector<int>{3, 4}));
}

TEST(NewChart, RejectsSpanOutsideSentence) {
  Schedule s;
  s.n = 3;
  s.splits[Span{2, 4}] = {2};
  s.batches.push_back({Span{2, 4}});
  EXPECT_THROW(new_chart<double>(3, s, 0), StructuralError);
  EXPECT_THROW(s.validate(), StructuralError);
}

TEST(ParentsFromSplits, SingleSplit) {
  const auto p = parents_from_splits(SplitMap{{{1, 2}, {1}}});
  ASSERT_EQ(p.size(), 2u);
  EXPECT_EQ(p.at(Span{1, 1}), (std::vector<ParentLink>{{Span{1, 2}, 2, Side::left_child}}));
  EXPECT_EQ(p.at(Span{2, 2}), (std::vector<ParentLink>{{Span{1, 2}, 1, Side::right_child}}));
  EXPECT_EQ(split_of(Span{1, 1}, p.at(Span{1, 1})[0]), 1);
  EXPECT_EQ(sibling_of(Span{2, 2}, p.at(Span{2, 2})[0]), (Span{1, 1}));
}

TEST(ParentsFromSplits, Empty) { EXPECT_TRUE(parents_from_splits(SplitMap{}).empty()); }

TEST(ParentsFromSplits, OutsidePairsOfMiddleSpan) {
  // Span (2,3) in the full chart of four tokens: (parent, sibling) pairs
  // are ((1,3),(1,1)) and ((2,4),(4,4)).
  const auto p = parents_from_splits(full_schedule(4).splits);
  std::set<std::pair<Span, Span>> pairs;
  for (const auto& l : p.at(Span{2, 3})) pairs.insert({l.parent, sibling_of(Span{2, 3}, l)});
  const std::set<std::pair<Span, Span>> expected{{Span{1, 3}, Span{1, 1}}, {Span{2, 4}, Span{4, 4}}};
  EXPECT_EQ(pairs, expected);
}

TEST(ParentsFromSplits, FigureTwoMatchesBruteForceInversion) {
  const auto s = prune_schedule(6, 2, split_order(testing::figure_two_scores()));
  const auto p = parents_from_splits(s.splits);
  // Enumerate every (child, parent) pair over all spans of the sentence.
  for (int i = 1; i <= 6; ++i) {
    for (int j = i; j <= 6; ++j) {
      std::set<ParentLink> expected;
      for (const auto& [parent, ks] : s.splits) {
        for (int k : ks) {
          if (parent.i == i && k == j) expected.insert({parent, parent.j, Side::left_child});
          if (parent.j == j && k + 1 == i) expected.insert({parent, parent.i, Side::right_child});
        }
      }
      auto it = p.find(Span{i, j});
      const std::set<ParentLink> got = it == p.end() ? std::set<ParentLink>{}
                                                     : std::set<ParentLink>(it->second.begin(), it->second.end());
      EXPECT_EQ(got, expected) << Span{i, j}.str();
    }
  }
}

TEST(ParentsFromSplits, RoundTripOnRandomSchedules) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 30);
    const int m = 2 + static_cast<int>(rng() % 4);
    const auto s = prune_schedule(n, m, split_order(testing::random_scores(n, rng)));
    EXPECT_EQ(splits_from_parents(parents_from_splits(s.splits)), s.splits);
    const auto b = build_cell_batches(s);
    EXPECT_EQ(splits_from_parents(b.parents), b.splits);
  }
}

TEST(Schedule, TopologicalAndLinearOnRandomOrders) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 200);
    const int m = 2 + static_cast<int>(rng() % 3);
    const auto s = prune_schedule(n, m, split_order(testing::random_scores(n, rng)));
    EXPECT_NO_THROW(s.validate());
    for (const auto& [span, ks] : s.splits) EXPECT_LE(ks.size(), static_cast<std::size_t>(m));
    const auto b = build_cell_batches(s);
    EXPECT_NO_THROW(b.validate());
    EXPECT_LE(b.cell_count(), s.cell_count());
    EXPECT_LE(b.cell_count(), static_cast<std::size_t>(2 * m * n)) << "n=" << n << " m=" << m;
  }
}

}  // namespace
}  // namespace recat
