// Acceptance run: one PASS/FAIL line per criterion.  `acceptance 3 7` runs a
// subset; no arguments runs everything.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "recat/checkpoint.hpp"
#include "recat/cio.hpp"
#include "recat/evalx.hpp"
#include "recat/evalx/oracle.hpp"
#include "recat/model.hpp"
#include "recat/train.hpp"
#include "test_support.hpp"

using namespace recat;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

void perturb(ParameterSet<double>& ps, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> dist(0.0, scale);
  for (auto& p : ps)
    for (auto& v : p->value.storage()) v += dist(rng);
}

double max_diff(std::span<const double> a, const reference::Vec& b) {
  double m = 0;
  for (std::size_t i = 0; i < b.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::span<const double> row_of(const RowRef<double>& r) { return r.src.value().row_span(r.row); }

struct Engine {
  ParameterSet<double> ps;
  CioStack<double> stack;

  Engine(const CioConfig& cfg, std::mt19937_64& rng, double noise) {
    stack = CioStack<double>(ps, cfg, rng);
    perturb(ps, rng, noise);
  }
};

reference::Mat random_leaves(int n, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  reference::Mat m(static_cast<std::size_t>(n), reference::Vec(d));
  for (auto& r : m)
    for (auto& v : r) v = dist(rng);
  return m;
}

Var<double> leaves_on(Tape<double>& tape, const reference::Mat& m) {
  auto t = Tensor<double>::matrix(m.size(), m.front().size());
  for (std::size_t r = 0; r < m.size(); ++r) std::copy(m[r].begin(), m[r].end(), t.row_span(r).begin());
  return tape.constant(t);
}

Schedule unpruned(int n, std::mt19937_64& rng) {
  return build_cell_batches(prune_schedule(n, std::max(n, 2), split_order(testing::random_scores(n, rng))));
}

// 1 -------------------------------------------------------------------------
Outcome oracle_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(101);
  double worst = 0;
  int tree_mismatch = 0;
  for (int trial = 0; trial < 100; ++trial) {
    CioConfig cfg;
    cfg.d = 8;
    cfg.heads = 2;
    cfg.ffn_mult = 2;
    cfg.layers = 1 + static_cast<std::size_t>(trial % 3);
    cfg.share = trial % 4 == 3;
    Engine e(cfg, rng, 0.3);
    const int n = 1 + static_cast<int>(rng() % 8);
    const auto leaves = random_leaves(n, cfg.d, rng);
    Tape<double> tape(false);
    auto res = e.stack.run(leaves_on(tape, leaves), unpruned(n, rng));
    const auto oracle = reference::brute_force_cio(e.stack, leaves);
    for (std::size_t l = 0; l < res.layers.size(); ++l) {
      for (const auto& cell : res.layers[l]) {
        const auto& o = oracle.layers[l].at(cell.span);
        worst = std::max({worst, max_diff(row_of(cell.inside), o.inside),
                          std::abs(cell.inside_score.item() - o.inside_score),
                          max_diff(row_of(cell.outside), o.outside),
                          std::abs(cell.outside_score.item() - o.outside_score)});
      }
    }
    if (!(induce_tree(res.last()) == oracle.tree)) ++tree_mismatch;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {worst <= 1e-6 && tree_mismatch == 0 && secs < 120,
          "max abs error " + fmt("%.2e", worst) + ", tree mismatches " + std::to_string(tree_mismatch) + ", " +
              fmt("%.1f", secs) + " s"};
}

// 2 -------------------------------------------------------------------------
Outcome cumulative_outside() {
  std::mt19937_64 rng(202);
  std::map<std::size_t, double> worst;
  for (int trial = 0; trial < 10; ++trial) {
    CioConfig cfg;
    cfg.d = 8;
    cfg.heads = 2;
    cfg.ffn_mult = 2;
    cfg.layers = 1;
    Engine e(cfg, rng, 0.6);
    const int n = 7;
    const auto leaves = random_leaves(n, cfg.d, rng);
    const auto sched = unpruned(n, rng);
    Tape<double> tape(false);
    auto res = e.stack.run(leaves_on(tape, leaves), sched);
    const auto oracle = reference::brute_force_cio(e.stack, leaves);
    for (const auto& cell : res.last()) {
      if (cell.span == Span{1, n}) continue;
      const auto& o = oracle.layers[0].at(cell.span);
      auto& w = worst[sched.parents.at(cell.span).size()];
      w = std::max({w, max_diff(row_of(cell.outside), o.outside), std::abs(cell.outside_score.item() - o.outside_score)});
    }
  }
  bool ok = true;
  std::string detail;
  for (std::size_t c = 1; c <= 6; ++c) {
    const bool seen = worst.count(c) > 0;
    ok = ok && seen && worst[c] <= 1e-6;
    detail += (c > 1 ? ", " : "") + std::to_string(c) + ":" + (seen ? fmt("%.1e", worst[c]) : "missing");
  }
  return {ok, "max error by parent count {" + detail + "}"};
}

// 3 -------------------------------------------------------------------------
Outcome gradient_integrity() {
  ReCatConfig c;
  c.vocab = 50;
  c.d = 16;
  c.heads = 2;
  c.cio_layers = 2;
  c.transformer_layers = 1;
  c.parser_embed = 8;
  c.parser_hidden = 8;
  ReCatModel<double> m(c);
  std::mt19937_64 rng(303);
  perturb(m.params(), rng, 0.1);
  perturb(m.parser_params(), rng, 0.1);
  const std::vector<std::uint32_t> s{12, 40, 7, 23, 31};
  auto x = s;
  x[0] = kMaskId;
  x[3] = kMaskId;
  const MlmTargets y{{0, 3}, {12, 23}};
  GradcheckOptions opts;
  opts.max_coords_per_param = 8;
  auto rm = gradcheck(m.params(), [&](Tape<double>& tape) {
    Tape<double> ptape(false);
    return *m.forward(tape, ptape, s, x, y).mlm_loss;
  }, opts);
  auto rp = gradcheck(m.parser_params(), [&](Tape<double>& ptape) {
    Tape<double> tape(false);
    return *m.forward(tape, ptape, s, x, y).parser_loss;
  }, opts);
  double worst = 0;
  std::string worst_name;
  for (const auto* r : {&rm, &rp})
    for (const auto& e : r->entries)
      if (e.max_rel_error >= worst) worst = e.max_rel_error, worst_name = e.name;
  std::size_t silent = 0, groups = 0;
  for (const auto* ps : {&m.params(), &m.parser_params()}) {
    for (const auto& p : *ps) {
      ++groups;
      double n = 0;
      for (double g : p->grad.storage()) n += g * g;
      if (n == 0) ++silent;
    }
  }
  return {worst < 1e-3 && silent == 0,
          std::to_string(groups) + " groups, max rel error " + fmt("%.2e", worst) + " (" + worst_name + "), " +
              std::to_string(silent) + " without gradient"};
}

// 4 -------------------------------------------------------------------------
Outcome schedule_complexity() {
  bool ok = true;
  std::string detail;
  for (int n : {8, 16, 32, 64, 128, 256, 512}) {
    const auto r = schedule_efficiency(n, 2, testing::balanced_scores(n));
    ok = ok && r.inside_steps <= r.step_bound && r.cells <= static_cast<std::size_t>(2 * 2 * n);
    detail += (n > 8 ? " " : "") + std::to_string(n) + ":" + std::to_string(r.inside_steps) + "/" +
              std::to_string(r.step_bound) + "," + std::to_string(r.cells) + "c";
  }
  return {ok, "n:batches/bound,cells " + detail};
}

// 5 -------------------------------------------------------------------------
Outcome pruning_replay() {
  const auto order = split_order(testing::figure_two_scores());
  std::vector<int> merge;
  for (auto it = order.rbegin(); it != order.rend(); ++it) merge.push_back(it->split);
  const auto heights = split_heights(order, 6);
  std::map<int, std::set<int>> groups;
  for (int k = 1; k <= 5; ++k) groups[heights[static_cast<std::size_t>(k - 1)]].insert(k);
  std::vector<std::set<int>> g;
  for (auto& [h, ks] : groups) g.push_back(ks);
  const auto s = prune_schedule(6, 2, order);
  const bool merge_ok = merge == std::vector<int>{1, 5, 2, 4, 3};
  const bool groups_ok = g == std::vector<std::set<int>>{{1, 5}, {2, 4}, {3}};
  const bool splits_ok = s.splits.count(Span{1, 4}) && s.splits.count(Span{3, 6}) &&
                         s.splits.at(Span{1, 4}) == std::vector<int>{2, 3} &&
                         s.splits.at(Span{3, 6}) == std::vector<int>{3, 4};
  return {merge_ok && groups_ok && splits_ok, std::string("merge order ") + (merge_ok ? "ok" : "wrong") + ", groups " +
                                                  (groups_ok ? "ok" : "wrong") + ", post-descent splits " +
                                                  (splits_ok ? "{2,3} {3,4}" : "wrong")};
}

// 6 -------------------------------------------------------------------------
double engine_nll(const std::vector<double>& v, const SplitOrder& target) {
  Tape<double> tape(false);
  auto t = Tensor<double>::matrix(v.size(), 1);
  t.storage() = v;
  return parser_nll(tape.constant(t), target, static_cast<int>(v.size()) + 1).item();
}

double direct_nll(const std::vector<double>& v, const SplitOrder& target) {
  long double total = 0;
  for (const auto& st : target) {
    long double mx = -INFINITY;
    for (int k = st.span.i; k < st.span.j; ++k) mx = std::max<long double>(mx, v[static_cast<std::size_t>(k - 1)]);
    long double z = 0;
    for (int k = st.span.i; k < st.span.j; ++k) z += std::exp(static_cast<long double>(v[static_cast<std::size_t>(k - 1)]) - mx);
    total -= static_cast<long double>(v[static_cast<std::size_t>(st.split - 1)]) - mx - std::log(z);
  }
  return static_cast<double>(total);
}

Outcome hard_em_loss() {
  std::mt19937_64 rng(606);
  std::normal_distribution<double> dist(0, 3);
  double worst = 0, worst_uniform = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 15);
    const auto target = split_order(testing::random_scores(n, rng));
    std::vector<double> v;
    for (int k = 1; k < n; ++k) v.push_back(dist(rng));
    worst = std::max(worst, std::abs(engine_nll(v, target) - direct_nll(v, target)));
    double closed = 0;
    for (const auto& st : target) closed += std::log(static_cast<double>(st.span.j - st.span.i));
    const std::vector<double> uniform(static_cast<std::size_t>(n - 1), dist(rng));
    worst_uniform = std::max(worst_uniform, std::abs(engine_nll(uniform, target) - closed));
  }
  return {worst <= 1e-9 && worst_uniform <= 1e-9,
          "random max error " + fmt("%.1e", worst) + ", uniform closed-form error " + fmt("%.1e", worst_uniform)};
}

// 7 -------------------------------------------------------------------------
Outcome toy_training() {
  const auto t0 = std::chrono::steady_clock::now();
  ToyGrammar grammar;
  std::mt19937_64 rng(707);
  std::vector<LabeledTree> gold;
  std::vector<std::vector<std::string>> lines;
  for (int i = 0; i < 2000; ++i) {
    gold.push_back(grammar.sample(rng, 4, 16));
    lines.push_back(tree_words(gold.back()));
  }
  const auto vocab = Vocab::build(lines);
  const auto corpus = encode_corpus(lines, vocab);

  ReCatConfig mc;
  mc.vocab = vocab.size();
  mc.cio_layers = 2;
  mc.compose_depth = 1;
  mc.transformer_layers = 2;
  mc.d = 64;
  mc.heads = 4;
  mc.ffn_mult = 4;
  mc.m = 4;
  mc.init_seed = 7;
  TrainConfig tc;
  tc.epochs = 5;
  tc.token_budget = 64;
  tc.lr_model = 7e-4;
  tc.lr_parser = 7e-4;
  tc.warmup_steps = 50;
  tc.seed = 7;
  ReCatModel<float> model(mc);
  Trainer<float> trainer(model, corpus, tc);

  std::vector<double> epoch_loss(tc.epochs, 0.0);
  std::vector<std::size_t> epoch_masked(tc.epochs, 0);
  double first_loss = 0;
  std::size_t first_masked = 0, steps = 0;
  trainer.run([&](const StepMetrics& m) {
    ++steps;
    if (steps <= 10) {
      first_loss += m.mlm_loss * static_cast<double>(m.masked);
      first_masked += m.masked;
    }
    epoch_loss[m.epoch] += m.mlm_loss * static_cast<double>(m.masked);
    epoch_masked[m.epoch] += m.masked;
  });
  const double initial = first_loss / static_cast<double>(first_masked);
  const double final_epoch = epoch_loss.back() / static_cast<double>(epoch_masked.back());
  const double drop = 1.0 - final_epoch / initial;
  std::string per_epoch;
  for (std::size_t e = 0; e < tc.epochs; ++e)
    per_epoch += (e ? " " : "") + fmt("%.3f", epoch_loss[e] / static_cast<double>(epoch_masked[e]));

  std::vector<BinaryTree> induced, parsed;
  for (const auto& s : corpus) {
    Tape<float> tape(false), ptape(false);
    auto f = model.forward(tape, ptape, s.ids, s.ids, {});
    induced.push_back(f.tree);
    parsed.push_back(BinaryTree{s.length(), model.parse_order(s.ids)});
  }
  const double f1 = corpus_f1(induced, gold);
  const double parser_f1 = corpus_f1(parsed, gold);
  std::vector<BinaryTree> right;
  for (const auto& t : induced) {
    BinaryTree r{t.n, {}};
    for (int i = 1; i < t.n; ++i) r.steps.push_back(SplitStep{i, Span{i, t.n}});
    right.push_back(r);
  }
  const double right_f1 = corpus_f1(right, gold);
  std::mt19937_64 brng(708);
  const double random_f1 = random_tree_baseline(gold, brng);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const bool ok = drop >= 0.30 && f1 >= random_f1 + 10 && secs <= 1800;
  return {ok, "mlm " + fmt("%.3f", initial) + " -> " + fmt("%.3f", final_epoch) + " (drop " + fmt("%.1f", 100 * drop) +
                  "%, ln V = " + fmt("%.3f", std::log(static_cast<double>(vocab.size()))) + ", epochs " + per_epoch +
                  "); induced F1 " + fmt("%.2f", f1) + " vs random " + fmt("%.2f", random_f1) + " (parser F1 " +
                  fmt("%.2f", parser_f1) + ", right-branching " + fmt("%.2f", right_f1) + "); " + std::to_string(steps) + " steps, " + fmt("%.0f", secs) + " s"};
}

// 8 -------------------------------------------------------------------------
Outcome fast_encoding() {
  ReCatConfig c;
  c.vocab = 40;
  c.d = 16;
  c.heads = 2;
  c.cio_layers = 2;
  c.transformer_layers = 1;
  c.parser_embed = 8;
  c.parser_hidden = 8;
  ReCatModel<double> m(c);
  std::mt19937_64 rng(808);
  perturb(m.parser_params(), rng, 0.5);
  perturb(m.params(), rng, 0.1);
  bool ok = true;
  std::size_t sentences = 0, ties = 0, tie_not_minimal = 0, lengths_not_strict = 0;
  for (int n = 4; n <= 48; ++n) {
    std::size_t fast_total = 0, full_total = 0;
    for (int t = 0; t < 8; ++t) {
      std::vector<std::uint32_t> s;
      for (int i = 0; i < n; ++i) s.push_back(kFirstRegularId + static_cast<std::uint32_t>(rng() % (c.vocab - 2)));
      Tape<double> t1(false), p1(false), t2(false), p2(false);
      auto full = m.forward(t1, p1, s, s, {}, EncodeMode::full);
      auto fast = m.forward(t2, p2, s, s, {}, EncodeMode::fast);
      ++sentences;
      fast_total += fast.counters.compose_calls;
      full_total += full.counters.compose_calls;
      ok = ok && fast.counters.compose_calls <= full.counters.compose_calls;
      if (fast.counters.compose_calls == full.counters.compose_calls) {
        ++ties;
        if (full.schedule.cell_count() != static_cast<std::size_t>(2 * n - 1)) ++tie_not_minimal;
      }
      const BinaryTree parser_tree{n, m.parse_order(s)};
      ok = ok && fast.tree == parser_tree && fast.nodes.rows() == static_cast<std::size_t>(2 * n - 1) &&
           fast.node_spans == parser_tree.in_order();
      for (double v : fast.nodes.value().storage()) ok = ok && std::isfinite(v);
    }
    if (fast_total >= full_total) ++lengths_not_strict;
  }
  ok = ok && tie_not_minimal == 0 && lengths_not_strict == 0;
  return {ok, std::to_string(sentences) + " sentences n=4..48: fast < standard in total at every length (" +
                  std::to_string(lengths_not_strict) + " exceptions); per-sentence ties " + std::to_string(ties) +
                  ", all where the pruned chart is already just the tree (" + std::to_string(tie_not_minimal) +
                  " otherwise); trees match the parser"};
}

// 9 -------------------------------------------------------------------------
Outcome determinism() {
  ToyGrammar grammar;
  std::mt19937_64 rng(909);
  std::vector<std::vector<std::string>> lines;
  for (int i = 0; i < 40; ++i) lines.push_back(tree_words(grammar.sample(rng, 4, 12)));
  const auto vocab = Vocab::build(lines);
  const auto corpus = encode_corpus(lines, vocab);
  ReCatConfig mc;
  mc.vocab = vocab.size();
  mc.d = 16;
  mc.heads = 2;
  mc.cio_layers = 2;
  mc.transformer_layers = 1;
  mc.parser_embed = 8;
  mc.parser_hidden = 8;
  TrainConfig tc;
  tc.epochs = 10;
  tc.fast_epochs = 2;
  tc.token_budget = 48;
  tc.seed = 99;

  auto stream = [&](ReCatModel<float>& model, Trainer<float>& t, std::uint64_t steps) {
    std::vector<std::string> out;
    t.run([&](const StepMetrics& m) {
      auto j = m.to_json();
      j.erase("wall_ms");
      out.push_back(j.dump());
    }, steps);
    (void)model;
    return out;
  };
  auto bytes = [](const Checkpoint& ck) {
    std::ostringstream os;
    ck.write(os);
    return os.str();
  };

  ReCatModel<float> a(mc), b(mc);
  Trainer<float> ta(a, corpus, tc), tb(b, corpus, tc);
  const auto sa = stream(a, ta, 60);
  const auto sb = stream(b, tb, 60);
  const bool replay = sa == sb && !sa.empty();

  const std::string first = bytes(ta.checkpoint());
  std::istringstream in(first);
  const auto loaded = Checkpoint::read(in);
  const bool roundtrip = bytes(loaded) == first;

  ReCatModel<float> straight(mc);
  Trainer<float> ts(straight, corpus, tc);
  stream(straight, ts, 40);
  std::istringstream mid_in(bytes(ts.checkpoint()));
  const auto mid = Checkpoint::read(mid_in);
  const auto tail_straight = stream(straight, ts, 30);
  auto resumed = model_from_checkpoint<float>(mid);
  Trainer<float> tr(*resumed, corpus, tc);
  tr.restore(mid);
  const auto tail_resumed = stream(*resumed, tr, 30);
  const bool resume = tail_straight == tail_resumed && bytes(ts.checkpoint()) == bytes(tr.checkpoint());

  return {replay && roundtrip && resume, std::string("metric replay ") + (replay ? "identical" : "differs") +
                                             ", checkpoint roundtrip " + (roundtrip ? "bit-identical" : "differs") +
                                             ", resume 40+30 vs 70 " + (resume ? "identical" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"oracle equivalence", oracle_equivalence}, {"cumulative outside", cumulative_outside},
      {"gradient integrity", gradient_integrity}, {"schedule complexity", schedule_complexity},
      {"pruning replay", pruning_replay},         {"hard-EM loss", hard_em_loss},
      {"toy training trend", toy_training},       {"fast encoding", fast_encoding},
      {"determinism and persistence", determinism}};
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t c = 0; c < criteria.size(); ++c) {
    const int id = static_cast<int>(c) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[c].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS " : "FAIL ") << id << " " << criteria[c].first << ": " << o.detail << std::endl;
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
