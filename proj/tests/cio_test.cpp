#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "recat/cio.hpp"
#include "recat/evalx/oracle.hpp"
#include "test_support.hpp"

namespace recat {
namespace {

using reference::Mat;
using reference::Vec;

void perturb(ParameterSet<double>& ps, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> dist(0.0, scale);
  for (auto& p : ps)
    for (auto& v : p->value.storage()) v += dist(rng);
}

Tensor<double> random_rows(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  auto t = Tensor<double>::matrix(r, c);
  for (auto& v : t.storage()) v = dist(rng);
  return t;
}

CioConfig small_config(std::size_t layers = 2) {
  CioConfig cfg;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.layers = layers;
  cfg.ffn_mult = 2;
  return cfg;
}

struct Fixture {
  ParameterSet<double> ps;
  CioStack<double> stack;
  Parameter<double>* embed = nullptr;

  explicit Fixture(CioConfig cfg, std::uint64_t seed = 1, std::size_t vocab = 20, double noise = 0.3) {
    std::mt19937_64 rng(seed);
    stack = CioStack<double>(ps, cfg, rng);
    embed = &ps.add_normal("embed", {vocab, cfg.d}, 1.0, rng);
    perturb(ps, rng, noise);
  }

  Var<double> leaves(Tape<double>& tape, const std::vector<std::uint32_t>& tokens) const {
    return ops::take_rows(tape.param(*embed), tokens);
  }

  Mat leaf_matrix(const std::vector<std::uint32_t>& tokens) const {
    Mat m;
    for (auto t : tokens) {
      auto r = embed->value.row_span(t);
      m.emplace_back(r.begin(), r.end());
    }
    return m;
  }
};

std::vector<std::uint32_t> random_tokens(int n, std::size_t vocab, std::mt19937_64& rng) {
  std::vector<std::uint32_t> t;
  for (int i = 0; i < n; ++i) t.push_back(static_cast<std::uint32_t>(rng() % vocab));
  return t;
}

Schedule full_schedule(int n, std::mt19937_64& rng) {
  return build_cell_batches(prune_schedule(n, std::max(n, 2), split_order(testing::random_scores(n, rng))));
}

Vec row_of(const RowRef<double>& r) {
  auto s = r.src.value().row_span(r.row);
  return Vec(s.begin(), s.end());
}

double max_diff(const Vec& a, const Vec& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

TEST(Compose, ZeroProjectionsLeaveResidualPath) {
  std::mt19937_64 rng(1);
  ParameterSet<double> ps;
  const auto cfg = small_config();
  ComposeParams<double> p(ps, "c", cfg, rng);
  for (auto& prm : ps) {
    const bool keep = prm->name == "c.roles" || prm->name.ends_with(".g");
    if (!keep) prm->value.storage().assign(prm->value.size(), 0.0);
  }
  Tape<double> tape;
  auto x = tape.constant(random_rows(3, cfg.d, rng));
  for (Slot s : {Slot::left, Slot::right, Slot::parent}) {
    auto out = compose(p, {x, 0}, {x, 1}, {x, 2}, s);
    const auto r = static_cast<std::uint32_t>(s);
    for (std::size_t c = 0; c < cfg.d; ++c) {
      EXPECT_NEAR(out.value()[c], x.value().at(r, c) + p.roles->value.at(r, c), 1e-15);
    }
  }
}

TEST(Compose, SwappingChildrenAndRolesKeepsParentSlot) {
  std::mt19937_64 rng(2);
  ParameterSet<double> ps;
  const auto cfg = small_config();
  ComposeParams<double> p(ps, "c", cfg, rng);
  perturb(ps, rng, 0.3);
  Tape<double> tape;
  auto x = tape.constant(random_rows(3, cfg.d, rng));
  const auto a = compose(p, {x, 0}, {x, 1}, {x, 2}, Slot::parent).value();
  auto& roles = p.roles->value;
  for (std::size_t c = 0; c < cfg.d; ++c) std::swap(roles.at(0, c), roles.at(1, c));
  Tape<double> tape2;
  auto x2 = tape2.constant(x.value());
  const auto b = compose(p, {x2, 1}, {x2, 0}, {x2, 2}, Slot::parent).value();
  for (std::size_t c = 0; c < cfg.d; ++c) EXPECT_NEAR(a[c], b[c], 1e-12);
}

TEST(Compose, MatchesLoopReference) {
  std::mt19937_64 rng(3);
  ParameterSet<double> ps;
  auto cfg = small_config();
  cfg.compose_depth = 2;
  ComposeParams<double> p(ps, "c", cfg, rng);
  perturb(ps, rng, 0.3);
  Tape<double> tape;
  auto x = tape.constant(random_rows(3, cfg.d, rng));
  Mat rows;
  for (std::uint32_t r = 0; r < 3; ++r) rows.push_back(row_of({x, r}));
  for (std::size_t s = 0; s < 3; ++s) {
    const auto got = compose(p, {x, 0}, {x, 1}, {x, 2}, static_cast<Slot>(s)).value();
    const auto want = reference::detail::compose(p, rows[0], rows[1], rows[2], s);
    EXPECT_LT(max_diff(Vec(got.storage().begin(), got.storage().end()), want), 1e-9);
  }
}

TEST(Compatibility, IdentityHeadsOnUnitVector) {
  std::mt19937_64 rng(4);
  ParameterSet<double> ps;
  CioConfig cfg;
  cfg.d = 4;
  cfg.compat_layers = 1;
  CompatHead<double> h(ps, "h", cfg, rng);
  for (auto* lin : {&h.left.layers[0], &h.right.layers[0]}) {
    auto& w = lin->weight->value;
    w.storage().assign(w.size(), 0.0);
    for (std::size_t i = 0; i < 4; ++i) w.at(i, i) = 1.0;
  }
  Tape<double> tape;
  auto e1 = Tensor<double>::matrix(1, 4);
  e1[0] = 1;
  auto e2 = Tensor<double>::matrix(1, 4);
  e2[1] = 1;
  EXPECT_DOUBLE_EQ(h(tape.constant(e1), tape.constant(e1)).item(), 0.5);
  EXPECT_DOUBLE_EQ(h(tape.constant(e1), tape.constant(e2)).item(), 0.0);
}

TEST(Compatibility, MatchesDirectDotProduct) {
  std::mt19937_64 rng(5);
  ParameterSet<double> ps;
  const auto cfg = small_config();
  CompatHead<double> h(ps, "h", cfg, rng);
  perturb(ps, rng, 0.3);
  Tape<double> tape;
  auto x = tape.constant(random_rows(5, cfg.d, rng));
  auto y = tape.constant(random_rows(5, cfg.d, rng));
  auto phi = h(x, y);
  for (std::uint32_t r = 0; r < 5; ++r) {
    EXPECT_NEAR(phi.value()[r], reference::detail::compat(h, row_of({x, r}), row_of({y, r})), 1e-9);
  }
}

TEST(InsidePass, SingleSplitTakesTheCandidate) {
  Fixture f(small_config(1), 6);
  Tape<double> tape;
  auto leaves = f.leaves(tape, {3, 7});
  auto res = f.stack.run(leaves, prune_schedule(2, 2, split_order(SplitScores{{0.0}})));
  const auto& root = res.last().at(Span{1, 2});
  const auto cand = compose(f.stack.inside_compose(0), {leaves, 0}, {leaves, 1},
                            {tape.param(f.stack.outside0()), 0}, Slot::parent);
  EXPECT_LT(max_diff(row_of(root.inside), row_of({cand, 0})), 1e-14);
  ASSERT_EQ(root.split_scores.size(), 1u);
  EXPECT_DOUBLE_EQ(root.inside_score.item(), root.split_scores[0].item());
}

TEST(InsidePass, EqualScoresAverageTheCandidates) {
  Fixture f(small_config(1), 7);
  for (auto* lin : {&f.stack.compat_inside().left.layers.back()}) {
    auto& w = lin->weight->value;
    w.storage().assign(w.size(), 0.0);
    auto& b = lin->bias->value;
    b.storage().assign(b.size(), 0.0);
  }
  Tape<double> tape;
  auto leaves = f.leaves(tape, {1, 2, 3});
  std::mt19937_64 rng(1);
  const auto sched = full_schedule(3, rng);
  auto res = f.stack.run(leaves, sched);
  const auto& chart = res.last();
  const RowRef<double> third{tape.param(f.stack.outside0()), 0};
  const auto& c = f.stack.inside_compose(0);
  auto c1 = compose(c, {leaves, 0}, chart.at(Span{2, 3}).inside, third, Slot::parent);
  auto c2 = compose(c, chart.at(Span{1, 2}).inside, {leaves, 2}, third, Slot::parent);
  Vec mean(8);
  for (std::size_t i = 0; i < 8; ++i) mean[i] = 0.5 * (c1.value()[i] + c2.value()[i]);
  EXPECT_LT(max_diff(row_of(chart.at(Span{1, 3}).inside), mean), 1e-14);
}

void expect_matches_oracle(const Fixture& f, const std::vector<std::uint32_t>& tokens, const Schedule& sched,
                           double tol) {
  Tape<double> tape(false);
  auto res = f.stack.run(f.leaves(tape, tokens), sched);
  const auto oracle = reference::brute_force_cio(f.stack, f.leaf_matrix(tokens));
  for (std::size_t l = 0; l < res.layers.size(); ++l) {
    for (const auto& cell : res.layers[l]) {
      const auto& o = oracle.layers[l].at(cell.span);
      EXPECT_LT(max_diff(row_of(cell.inside), o.inside), tol) << cell.span.str();
      EXPECT_NEAR(cell.inside_score.item(), o.inside_score, tol);
      EXPECT_LT(max_diff(row_of(cell.outside), o.outside), tol) << cell.span.str();
      EXPECT_NEAR(cell.outside_score.item(), o.outside_score, tol) << cell.span.str();
    }
  }
  EXPECT_EQ(induce_tree(res.last()), oracle.tree);
}

TEST(RunStack, FullChartMatchesBruteForce) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 12; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 8);
    Fixture f(small_config(1 + trial % 3), 100 + static_cast<std::uint64_t>(trial));
    expect_matches_oracle(f, random_tokens(n, 20, rng), full_schedule(n, rng), 1e-9);
  }
}

TEST(RunStack, SharedComposeMatchesBruteForce) {
  std::mt19937_64 rng(9);
  auto cfg = small_config(2);
  cfg.share = true;
  Fixture f(cfg, 9);
  EXPECT_EQ(&f.stack.inside_compose(1), &f.stack.outside_compose(1));
  expect_matches_oracle(f, random_tokens(6, 20, rng), full_schedule(6, rng), 1e-9);
}

TEST(OutsidePass, AccumulationMatchesDirectSoftmaxForEveryParentCount) {
  // In a full chart over 7 tokens span (i,j) has (i-1) + (7-j) parents.
  std::mt19937_64 rng(10);
  Fixture f(small_config(1), 10, 20, 0.6);
  const auto tokens = random_tokens(7, 20, rng);
  const auto sched = full_schedule(7, rng);
  Tape<double> tape(false);
  auto res = f.stack.run(f.leaves(tape, tokens), sched);
  const auto oracle = reference::brute_force_cio(f.stack, f.leaf_matrix(tokens));
  std::set<std::size_t> counts;
  for (const auto& cell : res.last()) {
    if (cell.span == Span{1, 7}) continue;
    counts.insert(sched.parents.at(cell.span).size());
    const auto& o = oracle.layers[0].at(cell.span);
    EXPECT_LT(max_diff(row_of(cell.outside), o.outside), 1e-9);
    EXPECT_NEAR(cell.outside_score.item(), o.outside_score, 1e-9);
  }
  EXPECT_EQ(counts, (std::set<std::size_t>{1, 2, 3, 4, 5, 6}));
}

TEST(OutsidePass, SingleParentTakesTheCandidate) {
  Fixture f(small_config(1), 11);
  Tape<double> tape;
  auto leaves = f.leaves(tape, {4, 5});
  auto res = f.stack.run(leaves, prune_schedule(2, 2, split_order(SplitScores{{0.0}})));
  const auto& chart = res.last();
  const auto& root = chart.at(Span{1, 2});
  auto cand = compose(f.stack.outside_compose(0), {leaves, 0}, {leaves, 1}, root.outside, Slot::right);
  EXPECT_LT(max_diff(row_of(chart.at(Span{2, 2}).outside), row_of({cand, 0})), 1e-14);
}

TEST(RunStack, SingleToken) {
  Fixture f(small_config(2), 12);
  Tape<double> tape;
  auto res = f.stack.run(f.leaves(tape, {3}), prune_schedule(1, 2, {}));
  EXPECT_EQ(res.layers.size(), 2u);
  EXPECT_EQ(induce_tree(res.last()).spans().size(), 1u);
  EXPECT_LT(max_diff(row_of(res.last().at(Span{1, 1}).outside), row_of({tape.param(f.stack.root_outside()), 1})),
            1e-15);
}

TEST(RunStack, LayersRefineRepresentations) {
  std::mt19937_64 rng(13);
  Fixture f(small_config(2), 13);
  const auto tokens = random_tokens(6, 20, rng);
  Tape<double> tape(false);
  auto res = f.stack.run(f.leaves(tape, tokens), full_schedule(6, rng));
  for (const auto& cell : res.layers[1]) {
    EXPECT_GT(max_diff(row_of(cell.outside), row_of(res.layers[0].at(cell.span).outside)), 1e-6);
  }
}

TEST(RunStack, MaskingOneTokenReachesEveryOutside) {
  std::mt19937_64 rng(14);
  Fixture f(small_config(2), 14);
  for (int trial = 0; trial < 5; ++trial) {
    const int n = 8;
    auto tokens = random_tokens(n, 19, rng);
    const auto sched = build_cell_batches(prune_schedule(n, 2, split_order(testing::random_scores(n, rng))));
    Tape<double> tape(false);
    auto a = f.stack.run(f.leaves(tape, tokens), sched);
    tokens[rng() % n] = 19;
    auto b = f.stack.run(f.leaves(tape, tokens), sched);
    // The root's outside is the learned root vector; every other cell moves.
    for (const auto& cell : a.layers[1]) {
      if (cell.span == Span{1, n}) continue;
      EXPECT_GT(max_diff(row_of(cell.outside), row_of(b.layers[1].at(cell.span).outside)), 1e-9) << cell.span.str();
    }
  }
}

TEST(InduceTree, IsProperBinaryTree) {
  std::mt19937_64 rng(15);
  Fixture f(small_config(1), 15);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 30);
    const auto sched = build_cell_batches(prune_schedule(n, 2, split_order(testing::random_scores(n, rng))));
    Tape<double> tape(false);
    const auto tree = induce_tree(f.stack.run(f.leaves(tape, random_tokens(n, 20, rng)), sched).last());
    EXPECT_NO_THROW(check_split_order(tree.steps, n));
    const auto nodes = tree.in_order();
    ASSERT_EQ(nodes.size(), static_cast<std::size_t>(2 * n - 1));
    int leaf = 0;
    for (const auto& s : nodes) {
      if (s.is_leaf()) {
        EXPECT_EQ(s.i, ++leaf);
      }
    }
  }
}

TEST(RunStack, CountsComposeCalls) {
  std::mt19937_64 rng(16);
  Fixture f(small_config(2), 16);
  Tape<double> tape(false);
  auto res = f.stack.run(f.leaves(tape, {1, 2}), prune_schedule(2, 2, split_order(SplitScores{{0.0}})));
  EXPECT_EQ(res.counters.compose_calls, 4u);
  const auto sched = full_schedule(5, rng);
  auto full = f.stack.run(f.leaves(tape, {1, 2, 3, 4, 5}), sched);
  EXPECT_EQ(full.counters.compose_calls, 2 * 2 * sched.split_count());
}

TEST(Gradients, EveryGroupReceivesGradient) {
  std::mt19937_64 rng(17);
  Fixture f(small_config(2), 17);
  const auto tokens = random_tokens(6, 20, rng);
  const auto sched = build_cell_batches(prune_schedule(6, 2, split_order(testing::random_scores(6, rng))));
  Tape<double> tape;
  auto res = f.stack.run(f.leaves(tape, tokens), sched);
  std::vector<RowRef<double>> outs;
  for (int i = 1; i <= 6; ++i) outs.push_back(res.last().at(Span{i, i}).outside);
  auto loss = ops::add(ops::sum(ops::tanh(ops::gather_rows(outs))),
                       ops::sum(ops::gather_rows(std::vector<RowRef<double>>{res.last().at(Span{1, 6}).inside_score})));
  f.ps.zero_grad();
  tape.backward(loss);
  tape.accumulate_param_grads();
  for (const auto& p : f.ps) {
    double norm = 0;
    for (double g : p->grad.storage()) norm += g * g;
    EXPECT_GT(norm, 0.0) << p->name;
  }
}

TEST(Gradients, MatchFiniteDifferences) {
  std::mt19937_64 rng(18);
  auto cfg = small_config(2);
  cfg.d = 4;
  Fixture f(cfg, 18, 10);
  const auto tokens = random_tokens(4, 10, rng);
  const auto sched = build_cell_batches(prune_schedule(4, 2, split_order(testing::random_scores(4, rng))));
  GradcheckOptions opts;
  opts.max_coords_per_param = 6;
  auto report = gradcheck(f.ps, [&](Tape<double>& tape) {
    auto res = f.stack.run(f.leaves(tape, tokens), sched);
    std::vector<RowRef<double>> outs;
    for (int i = 1; i <= 4; ++i) outs.push_back(res.last().at(Span{i, i}).outside);
    return ops::sum(ops::tanh(ops::gather_rows(outs)));
  }, opts);
  for (const auto& e : report.entries) EXPECT_LT(e.max_rel_error, 1e-3) << e.name;
}

}  // namespace
}  // namespace recat
