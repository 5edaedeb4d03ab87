#pragma once

// Grammar-induction evaluation: bracketed tree IO, sentence F1,
// constituent recall, a synthetic bracketed grammar and schedule
// efficiency counters.

#include <cctype>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "recat/chart.hpp"
#include "recat/error.hpp"
#include "recat/pruner.hpp"

namespace recat {

/// Possibly n-ary, possibly labeled tree read from an s-expression.
struct LabeledTree {
  std::string label;
  std::string word;  // set on leaves
  std::vector<LabeledTree> children;

  bool is_leaf() const noexcept { return children.empty(); }
};

namespace detail {

inline std::vector<std::string> sexpr_tokens(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == '(' || c == ')') {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
      out.emplace_back(1, c);
    } else if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline LabeledTree parse_node(const std::vector<std::string>& t, std::size_t& p) {
  if (p >= t.size()) throw InputError("unexpected end of tree");
  if (t[p] == ")") throw InputError("unbalanced parentheses in tree");
  if (t[p] != "(") {
    LabeledTree leaf;
    leaf.word = t[p++];
    return leaf;
  }
  ++p;
  std::vector<LabeledTree> items;
  bool first_is_atom = false;
  while (p < t.size() && t[p] != ")") {
    if (items.empty()) first_is_atom = t[p] != "(";
    items.push_back(parse_node(t, p));
  }
  if (p >= t.size()) throw InputError("unbalanced parentheses in tree");
  ++p;
  if (items.empty()) throw InputError("empty node in tree");
  // "(w)" is a bare leaf.
  if (items.size() == 1) return items.front();
  LabeledTree node;
  if (first_is_atom) {
    node.label = items.front().word;
    items.erase(items.begin());
    // "(LABEL w)" is a labeled leaf.
    if (items.size() == 1 && items.front().is_leaf() && items.front().label.empty()) {
      items.front().label = node.label;
      return items.front();
    }
  }
  node.children = std::move(items);
  return node;
}

}  // namespace detail

inline LabeledTree parse_tree(const std::string& text) {
  const auto toks = detail::sexpr_tokens(text);
  std::size_t p = 0;
  auto t = detail::parse_node(toks, p);
  if (p != toks.size()) throw InputError("trailing tokens after tree");
  return t;
}

inline std::vector<LabeledTree> read_trees(std::istream& in) {
  std::vector<LabeledTree> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_tree(line));
  }
  return out;
}

inline std::vector<std::string> tree_words(const LabeledTree& t) {
  std::vector<std::string> out;
  std::function<void(const LabeledTree&)> rec = [&](const LabeledTree& n) {
    if (n.is_leaf()) {
      out.push_back(n.word);
      return;
    }
    for (const auto& c : n.children) rec(c);
  };
  rec(t);
  return out;
}

/// Every node span with its label (leaves included, width 1).
inline std::vector<std::pair<Span, std::string>> labeled_spans(const LabeledTree& t) {
  std::vector<std::pair<Span, std::string>> out;
  int next = 1;
  std::function<Span(const LabeledTree&)> rec = [&](const LabeledTree& n) {
    Span s;
    if (n.is_leaf()) {
      s = Span{next, next};
      ++next;
    } else {
      s.i = next;
      for (const auto& c : n.children) rec(c);
      s.j = next - 1;
    }
    out.push_back({s, n.label});
    return s;
  };
  rec(t);
  return out;
}

inline std::size_t tree_length(const LabeledTree& t) { return tree_words(t).size(); }

/// Non-trivial brackets: width > 1 and not the whole sentence.
using BracketSet = std::set<Span>;

inline BracketSet brackets(const std::set<Span>& spans, int n) {
  BracketSet out;
  for (const auto& s : spans)
    if (s.width() > 1 && !(s.i == 1 && s.j == n)) out.insert(s);
  return out;
}

inline BracketSet brackets(const LabeledTree& t) {
  std::set<Span> all;
  for (const auto& [s, l] : labeled_spans(t)) all.insert(s);
  return brackets(all, static_cast<int>(tree_length(t)));
}

inline BracketSet brackets(const BinaryTree& t) { return brackets(t.spans(), t.n); }

/// Sentence F1 in [0, 100]; two empty sets agree vacuously (100).
inline double bracket_f1(const BracketSet& pred, const BracketSet& gold) {
  if (pred.empty() && gold.empty()) return 100.0;
  if (pred.empty() || gold.empty()) return 0.0;
  std::size_t hit = 0;
  for (const auto& s : pred) hit += gold.count(s);
  if (hit == 0) return 0.0;
  const double p = static_cast<double>(hit) / pred.size(), r = static_cast<double>(hit) / gold.size();
  return 100.0 * 2 * p * r / (p + r);
}

inline double sentence_f1(const BinaryTree& pred, const LabeledTree& gold) {
  const auto n = tree_length(gold);
  if (static_cast<std::size_t>(pred.n) != n) {
    throw InputError("length mismatch: predicted " + std::to_string(pred.n) + " tokens, gold " + std::to_string(n));
  }
  return bracket_f1(brackets(pred), brackets(gold));
}

inline double sentence_f1(const LabeledTree& pred, const LabeledTree& gold) {
  if (tree_length(pred) != tree_length(gold)) {
    throw InputError("length mismatch: predicted " + std::to_string(tree_length(pred)) + " tokens, gold " +
                     std::to_string(tree_length(gold)));
  }
  return bracket_f1(brackets(pred), brackets(gold));
}

/// Corpus metric: mean of sentence F1.
template <class Pred>
double corpus_f1(const std::vector<Pred>& pred, const std::vector<LabeledTree>& gold) {
  if (pred.size() != gold.size()) throw InputError("prediction and gold tree counts differ");
  if (pred.empty()) return 0.0;
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += sentence_f1(pred[i], gold[i]);
  return s / static_cast<double>(pred.size());
}

/// Percentage of gold spans carrying `label` that are nodes of the
/// predicted tree.  No such spans: 0 with a warning on `warn`.
template <class Pred>
double constituent_recall(const std::vector<Pred>& pred, const std::vector<LabeledTree>& gold, const std::string& label,
                          std::ostream* warn = &std::cerr) {
  if (pred.size() != gold.size()) throw InputError("prediction and gold tree counts differ");
  std::size_t total = 0, hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    std::set<Span> nodes;
    if constexpr (std::is_same_v<Pred, BinaryTree>) {
      nodes = pred[i].spans();
    } else {
      for (const auto& [s, l] : labeled_spans(pred[i])) nodes.insert(s);
    }
    std::set<Span> seen;
    for (const auto& [s, l] : labeled_spans(gold[i])) {
      if (l != label || !seen.insert(s).second) continue;
      ++total;
      hit += nodes.count(s);
    }
  }
  if (total == 0) {
    if (warn) *warn << "warning: no gold constituents labeled '" << label << "'\n";
    return 0.0;
  }
  return 100.0 * static_cast<double>(hit) / static_cast<double>(total);
}

inline std::set<std::string> gold_labels(const std::vector<LabeledTree>& gold) {
  std::set<std::string> out;
  for (const auto& t : gold)
    for (const auto& [s, l] : labeled_spans(t))
      if (!l.empty() && s.width() > 1) out.insert(l);
  return out;
}

/// Maps word-piece spans to word spans; spans that cut through a word are
/// dropped.  Word-piece boundaries are the forbidden split points.
inline std::set<Span> collapse_word_pieces(const std::set<Span>& spans, int n, const BoundarySet& forbidden) {
  std::vector<int> word_of(static_cast<std::size_t>(n + 1), 0);
  int w = 0;
  for (int i = 1; i <= n; ++i) {
    if (i == 1 || !forbidden.count(i - 1)) ++w;
    word_of[static_cast<std::size_t>(i)] = w;
  }
  std::set<Span> out;
  for (const auto& s : spans) {
    const bool starts = s.i == 1 || !forbidden.count(s.i - 1);
    const bool ends = s.j == n || !forbidden.count(s.j);
    if (starts && ends) out.insert(Span{word_of[static_cast<std::size_t>(s.i)], word_of[static_cast<std::size_t>(s.j)]});
  }
  return out;
}

/// "(X (X w1 w2) w3)"; a single token prints as "(w1)".
inline std::string to_sexpr(const BinaryTree& t, const std::vector<std::string>& words) {
  if (static_cast<int>(words.size()) != t.n) throw InputError("word count does not match tree");
  if (t.n == 1) return "(" + words[0] + ")";
  const auto splits = t.split_map();
  std::function<std::string(Span)> rec = [&](Span s) -> std::string {
    if (s.is_leaf()) return words[static_cast<std::size_t>(s.i - 1)];
    const int k = splits.at(s);
    return "(X " + rec(Span{s.i, k}) + " " + rec(Span{k + 1, s.j}) + ")";
  };
  return rec(Span{1, t.n});
}

/// Binary tree from a bracketed s-expression that is strictly binary.
inline BinaryTree to_binary(const LabeledTree& t) {
  BinaryTree out;
  out.n = static_cast<int>(tree_length(t));
  int next = 1;
  std::function<Span(const LabeledTree&)> rec = [&](const LabeledTree& nd) -> Span {
    if (nd.is_leaf()) return Span{next, next++};
    if (nd.children.size() != 2) throw InputError("tree is not binary");
    const std::size_t at = out.steps.size();
    out.steps.push_back({});
    const Span l = rec(nd.children[0]);
    const Span r = rec(nd.children[1]);
    out.steps[at] = SplitStep{l.j, Span{l.i, r.j}};
    return Span{l.i, r.j};
  };
  rec(t);
  return out;
}

/// Tree whose top-down splits follow uniformly random boundary scores.
inline BinaryTree random_binary_tree(int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SplitScores v;
  for (int k = 1; k < n; ++k) v.logits.push_back(u(rng));
  return BinaryTree{n, split_order(v)};
}

/// Mean F1 of random binary trees against the gold corpus, averaged over
/// `repeats` draws per sentence.
inline double random_tree_baseline(const std::vector<LabeledTree>& gold, std::mt19937_64& rng, int repeats = 10) {
  double s = 0;
  for (const auto& g : gold)
    for (int r = 0; r < repeats; ++r) s += sentence_f1(random_binary_tree(static_cast<int>(tree_length(g)), rng), g);
  return gold.empty() ? 0.0 : s / static_cast<double>(gold.size() * static_cast<std::size_t>(repeats));
}

/// Small English-like grammar with 20 structural rules over a 50-word
/// lexicon.  Generated trees are labeled and binary above the preterminals.
class ToyGrammar {
 public:
  struct Rule {
    std::string lhs;
    std::vector<std::string> rhs;
    double weight;
  };

  ToyGrammar() {
    rules_ = {
        {"S", {"NP", "VP"}, 6},      {"S", {"ADV", "S"}, 0.5},   {"S", {"S", "CS"}, 0.4},
        {"CS", {"CONJ", "S"}, 1},    {"NP", {"DET", "NB"}, 5},   {"NP", {"PRON"}, 2},
        {"NP", {"NP", "PP"}, 0.8},   {"NP", {"NAME"}, 1.2},      {"NB", {"ADJ", "NB"}, 1.5},
        {"NB", {"N"}, 4},            {"VP", {"V", "NP"}, 4},     {"VP", {"VI"}, 1.5},
        {"VP", {"VP", "PP"}, 1},     {"VP", {"VP", "ADV"}, 0.6}, {"VP", {"AUX", "VP"}, 0.8},
        {"VP", {"VS", "SBAR"}, 0.5}, {"SBAR", {"COMP", "S"}, 1}, {"PP", {"P", "NP"}, 1},
        {"ADJ", {"ADV", "ADJ"}, 0.2}, {"NAME", {"NNP", "NNP"}, 0.4},
    };
    lexicon_ = {
        {"DET", {"the", "a", "every", "some"}},
        {"PRON", {"she", "he", "they"}},
        {"N", {"dog", "cat", "man", "woman", "park", "telescope", "book", "house", "river", "child", "city"}},
        {"NNP", {"alice", "bob", "carol", "dave"}},
        {"ADJ", {"big", "small", "red", "old", "happy", "quiet"}},
        {"V", {"saw", "liked", "found", "took", "read"}},
        {"VI", {"slept", "ran", "laughed"}},
        {"VS", {"said", "thought"}},
        {"AUX", {"will", "can"}},
        {"P", {"in", "with", "near", "under"}},
        {"ADV", {"very", "often", "quickly"}},
        {"CONJ", {"and", "but"}},
        {"COMP", {"that"}},
    };
    // NAME also rewrites to a single proper noun.
    lexicon_["NAME"] = lexicon_["NNP"];
  }

  const std::vector<Rule>& rules() const noexcept { return rules_; }

  std::set<std::string> words() const {
    std::set<std::string> w;
    for (const auto& [c, ws] : lexicon_) w.insert(ws.begin(), ws.end());
    return w;
  }

  /// Draws a sentence with length in [min_len, max_len] by rejection.
  LabeledTree sample(std::mt19937_64& rng, int min_len, int max_len) const {
    for (int attempt = 0; attempt < 10000; ++attempt) {
      int budget = max_len;
      auto t = expand("S", rng, 0, budget);
      if (!t) continue;
      const auto n = static_cast<int>(tree_length(*t));
      if (n >= min_len && n <= max_len) return *t;
    }
    throw Error("grammar failed to produce a sentence in the requested length range");
  }

 private:
  std::optional<LabeledTree> expand(const std::string& cat, std::mt19937_64& rng, int depth, int& budget) const {
    if (depth > 12 || budget <= 0) return std::nullopt;
    std::vector<const Rule*> options;
    std::vector<double> weights;
    for (const auto& r : rules_) {
      if (r.lhs == cat) {
        options.push_back(&r);
        weights.push_back(r.weight);
      }
    }
    auto lex = lexicon_.find(cat);
    if (lex != lexicon_.end()) {
      options.push_back(nullptr);
      weights.push_back(options.size() == 1 ? 1.0 : 3.0);
    }
    if (options.empty()) throw Error("grammar category '" + cat + "' has no expansion");
    std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
    const Rule* r = options[pick(rng)];
    if (!r) {
      const auto& ws = lex->second;
      LabeledTree leaf;
      leaf.label = cat;
      leaf.word = ws[rng() % ws.size()];
      --budget;
      return leaf;
    }
    if (r->rhs.size() == 1) {
      auto child = expand(r->rhs[0], rng, depth + 1, budget);
      if (!child) return std::nullopt;
      if (child->is_leaf()) return child;
      child->label = cat;
      return child;
    }
    LabeledTree node;
    node.label = cat;
    for (const auto& c : r->rhs) {
      auto child = expand(c, rng, depth + 1, budget);
      if (!child) return std::nullopt;
      node.children.push_back(std::move(*child));
    }
    return node;
  }

  std::vector<Rule> rules_;
  std::map<std::string, std::vector<std::string>> lexicon_;
};

inline std::string to_sexpr(const LabeledTree& t) {
  if (t.is_leaf()) return t.label.empty() ? t.word : "(" + t.label + " " + t.word + ")";
  std::string s = "(" + (t.label.empty() ? std::string("X") : t.label);
  for (const auto& c : t.children) s += " " + to_sexpr(c);
  return s + ")";
}

/// Schedule statistics for one sentence length.
struct EfficiencyRow {
  int n = 0;
  int m = 0;
  std::size_t inside_steps = 0;
  std::size_t cells = 0;
  std::size_t splits = 0;
  std::size_t compose_calls_per_layer = 0;
  std::size_t fast_compose_calls_per_layer = 0;
  std::size_t step_bound = 0;
};

inline EfficiencyRow schedule_efficiency(int n, int m, const SplitScores& scores) {
  const auto order = split_order(scores);
  const auto s = build_cell_batches(prune_schedule(n, m, order));
  EfficiencyRow r;
  r.n = n;
  r.m = m;
  r.inside_steps = s.inside_steps();
  r.cells = s.cell_count();
  r.splits = s.split_count();
  r.compose_calls_per_layer = 2 * s.split_count();
  r.fast_compose_calls_per_layer = 2 * static_cast<std::size_t>(std::max(n - 1, 0));
  r.step_bound = static_cast<std::size_t>(m - 1) + 2 * static_cast<std::size_t>(std::ceil(std::log2(std::max(n, 1))));
  return r;
}

}  // namespace recat
