#pragma once

// Full model: token embeddings, split parser, pruned CIO stack, node
// gathering, Transformer over the 2n-1 tree nodes and a masked-LM head.

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "recat/cio.hpp"
#include "recat/config.hpp"
#include "recat/error.hpp"
#include "recat/numerics.hpp"
#include "recat/pruner.hpp"

namespace recat {

struct ReCatConfig {
  std::size_t cio_layers = 2;
  std::size_t compose_depth = 1;
  std::size_t transformer_layers = 2;
  bool share = false;
  std::size_t d = 64;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t compat_layers = 2;
  std::size_t vocab = 0;
  std::uint32_t mask_id = 1;
  int m = 2;
  double mask_rate = 0.15;
  std::size_t max_length = 512;
  bool tie_embeddings = true;
  std::size_t parser_embed = 32;
  std::size_t parser_hidden = 32;
  std::size_t parser_layers = 1;
  std::uint64_t init_seed = 1;

  void validate() const {
    if (cio_layers == 0 || compose_depth == 0) throw ConfigError("cio_layers and compose_depth must be positive");
    if (d == 0 || heads == 0 || d % heads != 0) throw ConfigError("d must be a positive multiple of heads");
    if (vocab < 2) throw ConfigError("vocab must hold at least two tokens");
    if (mask_id >= vocab) throw ConfigError("mask_id outside vocab");
    if (m < 2) throw ConfigError("pruning threshold m must be >= 2");
    if (!(mask_rate > 0 && mask_rate < 1)) throw ConfigError("mask_rate must lie in (0,1)");
    if (max_length == 0) throw ConfigError("max_length must be positive");
    if (parser_embed == 0 || parser_hidden == 0 || parser_layers == 0) throw ConfigError("parser sizes must be positive");
  }

  CioConfig cio() const {
    CioConfig c;
    c.d = d;
    c.heads = heads;
    c.layers = cio_layers;
    c.compose_depth = compose_depth;
    c.compat_layers = compat_layers;
    c.ffn_mult = ffn_mult;
    c.share = share;
    return c;
  }

  ParserConfig parser() const { return ParserConfig{vocab, parser_embed, parser_hidden, parser_layers}; }

  void read(const ConfigMap& cm) {
    cm.read("cio_layers", cio_layers);
    cm.read("compose_depth", compose_depth);
    cm.read("transformer_layers", transformer_layers);
    cm.read("share", share);
    cm.read("d", d);
    cm.read("heads", heads);
    cm.read("ffn_mult", ffn_mult);
    cm.read("compat_layers", compat_layers);
    cm.read("vocab", vocab);
    cm.read("mask_id", mask_id);
    cm.read("m", m);
    cm.read("mask_rate", mask_rate);
    cm.read("max_length", max_length);
    cm.read("tie_embeddings", tie_embeddings);
    cm.read("parser_embed", parser_embed);
    cm.read("parser_hidden", parser_hidden);
    cm.read("parser_layers", parser_layers);
    cm.read("init_seed", init_seed);
  }

  ConfigMap to_map() const {
    ConfigMap cm;
    auto put = [&](const char* k, const auto& v) { cm.put(k, v); };
    put("cio_layers", cio_layers);
    put("compose_depth", compose_depth);
    put("transformer_layers", transformer_layers);
    put("share", share);
    put("d", d);
    put("heads", heads);
    put("ffn_mult", ffn_mult);
    put("compat_layers", compat_layers);
    put("vocab", vocab);
    put("mask_id", mask_id);
    put("m", m);
    put("mask_rate", mask_rate);
    put("max_length", max_length);
    put("tie_embeddings", tie_embeddings);
    put("parser_embed", parser_embed);
    put("parser_hidden", parser_hidden);
    put("parser_layers", parser_layers);
    put("init_seed", init_seed);
    return cm;
  }
};

enum class EncodeMode { full, fast };

/// Masked positions (0-based) and the original ids there.
struct MlmTargets {
  std::vector<std::uint32_t> positions;
  std::vector<std::uint32_t> ids;

  bool empty() const noexcept { return positions.empty(); }
  std::size_t size() const noexcept { return positions.size(); }
};

template <class T>
struct ForwardOutput {
  Var<T> nodes{};                    // [2n-1, d], in-order
  BinaryTree tree;
  std::vector<Span> node_spans;      // in-order spans matching rows of nodes
  std::optional<Var<T>> mlm_logits;  // [masked, vocab]
  std::optional<Var<T>> mlm_loss;    // mean over masked positions
  std::optional<Var<T>> parser_loss;  // on the parser tape
  Schedule schedule;
  CioCounters counters;
};

template <class T>
class ReCatModel {
 public:
  explicit ReCatModel(const ReCatConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.init_seed);
    embed_ = &params_.add_normal("embed", {cfg.vocab, cfg.d}, kInitStddev, rng);
    cio_ = CioStack<T>(params_, cfg.cio(), rng);
    for (std::size_t k = 0; k < cfg.transformer_layers; ++k) {
      transformer_.emplace_back(params_, "tfm." + std::to_string(k), cfg.d, cfg.heads, cfg.ffn_mult, rng);
    }
    head_ln_ = LayerNormParams<T>(params_, "head.ln", cfg.d);
    if (cfg.tie_embeddings) {
      head_bias_ = &params_.add_constant("head.bias", {1, cfg.vocab}, T(0));
    } else {
      head_proj_ = Linear<T>(params_, "head.proj", cfg.d, cfg.vocab, rng);
    }
    parser_ = ParserModel<T>(parser_params_, cfg.parser(), rng);
  }

  ReCatModel(const ReCatModel&) = delete;
  ReCatModel& operator=(const ReCatModel&) = delete;

  const ReCatConfig& config() const noexcept { return cfg_; }
  ParameterSet<T>& params() noexcept { return params_; }
  ParameterSet<T>& parser_params() noexcept { return parser_params_; }
  const ParameterSet<T>& params() const noexcept { return params_; }
  const ParameterSet<T>& parser_params() const noexcept { return parser_params_; }
  const CioStack<T>& cio() const noexcept { return cio_; }
  const ParserModel<T>& parser() const noexcept { return parser_; }
  Parameter<T>& embedding() const noexcept { return *embed_; }

  void check_tokens(const std::vector<std::uint32_t>& tokens) const {
    if (tokens.empty()) throw InputError("empty sentence");
    if (tokens.size() > cfg_.max_length) {
      throw InputError("sentence of length " + std::to_string(tokens.size()) + " exceeds max_length " +
                       std::to_string(cfg_.max_length));
    }
    for (auto t : tokens) {
      if (t >= cfg_.vocab) throw InputError("token id " + std::to_string(t) + " outside vocab");
    }
  }

  /// Parser split order over the unmasked sentence, honouring word-piece
  /// boundaries.
  SplitOrder parse_order(const std::vector<std::uint32_t>& sentence, const BoundarySet& forbidden = {}) const {
    return split_order(apply_nonsplittable(score_splits(parser_, sentence), forbidden));
  }

  /// One sentence of Algorithm 1.  The parser runs on `sentence` (unmasked)
  /// and records its loss on `parser_tape`; everything else goes on `tape`
  /// with `masked` as the CIO input.  In fast mode the parser tree is
  /// trusted and no parser loss is produced.
  ForwardOutput<T> forward(Tape<T>& tape, Tape<T>& parser_tape, const std::vector<std::uint32_t>& sentence,
                           const std::vector<std::uint32_t>& masked, const MlmTargets& targets,
                           EncodeMode mode = EncodeMode::full, const BoundarySet& forbidden = {}) const {
    check_tokens(sentence);
    check_tokens(masked);
    if (masked.size() != sentence.size()) throw InputError("masked input length differs from sentence");
    const int n = static_cast<int>(sentence.size());
    ForwardOutput<T> out;

    std::optional<Var<T>> logits;
    if (mode == EncodeMode::full) logits = parser_.forward(parser_tape, sentence);
    SplitScores scores;
    if (mode == EncodeMode::full) {
      scores = to_split_scores<T>(logits);
    } else {
      scores = score_splits(parser_, sentence);
    }
    const auto order = split_order(apply_nonsplittable(scores, forbidden));

    if (mode == EncodeMode::full) {
      out.schedule = build_cell_batches(prune_schedule(n, cfg_.m, order, forbidden));
    } else {
      out.schedule = tree_schedule(BinaryTree{n, order});
    }
    auto cio_out = cio_.run(ops::take_rows(tape.param(*embed_), masked), out.schedule);
    out.counters = cio_out.counters;
    out.tree = mode == EncodeMode::full ? induce_tree(cio_out.last()) : BinaryTree{n, order};
    if (mode == EncodeMode::full && n > 1) {
      out.parser_loss = parser_nll(*logits, out.tree.steps, n, forbidden);
    }

    out.node_spans = out.tree.in_order();
    std::vector<RowRef<T>> rows;
    rows.reserve(out.node_spans.size());
    for (const auto& s : out.node_spans) rows.push_back(cio_out.last().at(s).outside);
    out.nodes = encode_nodes(ops::gather_rows(rows));

    if (!targets.empty()) {
      std::vector<std::uint32_t> leaf_rows(static_cast<std::size_t>(n));
      for (std::size_t r = 0; r < out.node_spans.size(); ++r) {
        if (out.node_spans[r].is_leaf()) leaf_rows[static_cast<std::size_t>(out.node_spans[r].i - 1)] = static_cast<std::uint32_t>(r);
      }
      std::vector<std::uint32_t> pick;
      for (auto p : targets.positions) {
        if (p >= static_cast<std::uint32_t>(n)) throw InputError("mlm target position outside sentence");
        pick.push_back(leaf_rows[p]);
      }
      out.mlm_logits = mlm_logits(ops::take_rows(out.nodes, pick));
      out.mlm_loss = ops::cross_entropy(*out.mlm_logits, targets.ids);
    }
    return out;
  }

  /// Transformer layers over gathered node representations.  With zero
  /// layers this is the identity.
  Var<T> encode_nodes(Var<T> x) const {
    for (const auto& blk : transformer_) x = blk(x);
    return x;
  }

  Var<T> mlm_logits(Var<T> h) const {
    auto& tape = *h.tape;
    auto z = head_ln_(h);
    if (cfg_.tie_embeddings) return ops::add_row(ops::matmul_bt(z, tape.param(*embed_)), tape.param(*head_bias_));
    return head_proj_(z);
  }

 private:
  ReCatConfig cfg_;
  ParameterSet<T> params_;
  ParameterSet<T> parser_params_;
  Parameter<T>* embed_ = nullptr;
  CioStack<T> cio_;
  std::vector<AttentionBlock<T>> transformer_;
  LayerNormParams<T> head_ln_;
  Parameter<T>* head_bias_ = nullptr;
  Linear<T> head_proj_;
  ParserModel<T> parser_;
};

}  // namespace recat
