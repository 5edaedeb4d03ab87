#pragma once

// Toy-scale pretraining: vocab and corpus IO, masking, length-bucketed
// batches, AdamW and the joint model/parser trainer.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "recat/checkpoint.hpp"
#include "recat/config.hpp"
#include "recat/error.hpp"
#include "recat/model.hpp"

namespace recat {

inline constexpr std::uint32_t kUnkId = 0;
inline constexpr std::uint32_t kMaskId = 1;
inline constexpr std::uint32_t kFirstRegularId = 2;

class Vocab {
 public:
  Vocab() {
    add("[UNK]");
    add("[MASK]");
  }

  /// Frequency-sorted vocabulary (ties by token text) over the corpus.
  static Vocab build(const std::vector<std::vector<std::string>>& sentences) {
    std::map<std::string, std::size_t> counts;
    for (const auto& s : sentences)
      for (const auto& t : s) ++counts[t];
    std::vector<std::pair<std::string, std::size_t>> items(counts.begin(), counts.end());
    std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocab v;
    for (const auto& [tok, c] : items) v.add(tok);
    return v;
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open vocab '" + path + "'");
    Vocab v;
    v.tokens_.clear();
    v.ids_.clear();
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::istringstream ls(line);
      std::string tok;
      long long id = -1;
      if (!(ls >> tok >> id) || id < 0) throw InputError(path + ":" + std::to_string(lineno) + ": expected 'token id'");
      if (static_cast<std::size_t>(id) != v.tokens_.size()) {
        throw InputError(path + ":" + std::to_string(lineno) + ": ids must be consecutive from 0");
      }
      v.add(tok);
    }
    if (v.size() < 2 || v.tokens_[kUnkId] != "[UNK]" || v.tokens_[kMaskId] != "[MASK]") {
      throw InputError(path + ": ids 0 and 1 must be [UNK] and [MASK]");
    }
    return v;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write vocab '" + path + "'");
    for (std::size_t i = 0; i < tokens_.size(); ++i) out << tokens_[i] << ' ' << i << '\n';
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::string& token(std::uint32_t id) const { return tokens_.at(id); }

  std::uint32_t id(const std::string& tok) const {
    auto it = ids_.find(tok);
    return it == ids_.end() ? kUnkId : it->second;
  }

 private:
  void add(const std::string& tok) {
    if (ids_.count(tok)) throw InputError("duplicate vocab token '" + tok + "'");
    ids_.emplace(tok, static_cast<std::uint32_t>(tokens_.size()));
    tokens_.push_back(tok);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::uint32_t> ids_;
};

struct Sentence {
  std::vector<std::string> tokens;
  std::vector<std::uint32_t> ids;
  /// Boundaries inside a word ("##" continuation pieces).
  BoundarySet forbidden;

  int length() const noexcept { return static_cast<int>(ids.size()); }
};

inline std::vector<std::string> split_whitespace(const std::string& line) {
  std::istringstream in(line);
  std::vector<std::string> out;
  std::string t;
  while (in >> t) out.push_back(t);
  return out;
}

/// Boundary k is forbidden when token k+1 continues a word ("##piece").
inline BoundarySet word_piece_boundaries(const std::vector<std::string>& tokens) {
  BoundarySet b;
  for (std::size_t k = 1; k < tokens.size(); ++k)
    if (tokens[k].rfind("##", 0) == 0) b.insert(static_cast<int>(k));
  return b;
}

inline std::vector<std::vector<std::string>> read_token_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open corpus '" + path + "'");
  std::vector<std::vector<std::string>> out;
  std::string line;
  while (std::getline(in, line)) {
    auto toks = split_whitespace(line);
    if (!toks.empty()) out.push_back(std::move(toks));
  }
  return out;
}

inline Sentence make_sentence(std::vector<std::string> tokens, const Vocab& vocab) {
  Sentence s;
  s.forbidden = word_piece_boundaries(tokens);
  for (const auto& t : tokens) s.ids.push_back(vocab.id(t));
  s.tokens = std::move(tokens);
  return s;
}

inline std::vector<Sentence> encode_corpus(const std::vector<std::vector<std::string>>& lines, const Vocab& vocab) {
  std::vector<Sentence> out;
  out.reserve(lines.size());
  for (const auto& l : lines) out.push_back(make_sentence(l, vocab));
  return out;
}

/// Independent selection with probability `rate`; selected positions become
/// [MASK] (80%), a random regular token (10%) or stay unchanged (10%).
inline std::pair<std::vector<std::uint32_t>, MlmTargets> mask_tokens(const std::vector<std::uint32_t>& ids,
                                                                     double rate, std::size_t vocab,
                                                                     std::mt19937_64& rng) {
  if (!(rate >= 0 && rate < 1)) throw ConfigError("mask rate must lie in [0,1)");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::uint32_t> x = ids;
  MlmTargets y;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (u(rng) >= rate) continue;
    y.positions.push_back(static_cast<std::uint32_t>(i));
    y.ids.push_back(ids[i]);
    const double r = u(rng);
    if (r < 0.8) {
      x[i] = kMaskId;
    } else if (r < 0.9 && vocab > kFirstRegularId) {
      x[i] = kFirstRegularId + static_cast<std::uint32_t>(rng() % (vocab - kFirstRegularId));
    }
  }
  return {x, y};
}

/// Length-bucketed batches: a shuffled order is stably sorted by length and
/// cut greedily under the token budget; batch order is then shuffled.
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<int>& lengths, std::size_t token_budget,
                                                          std::mt19937_64& rng) {
  std::vector<std::size_t> idx(lengths.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (auto l : lengths) {
    if (l < 1 || static_cast<std::size_t>(l) > token_budget) {
      throw ConfigError("sentence of length " + std::to_string(l) + " does not fit the token budget " +
                        std::to_string(token_budget));
    }
  }
  std::shuffle(idx.begin(), idx.end(), rng);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return lengths[a] < lengths[b]; });
  std::vector<std::vector<std::size_t>> batches;
  std::size_t used = 0;
  for (auto i : idx) {
    const auto l = static_cast<std::size_t>(lengths[i]);
    if (batches.empty() || used + l > token_budget) {
      batches.emplace_back();
      used = 0;
    }
    batches.back().push_back(i);
    used += l;
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay.  Moments live alongside the parameters
/// by name so they can be checkpointed.
template <class T>
class AdamW {
 public:
  AdamW() = default;
  AdamW(ParameterSet<T>& ps, AdamWConfig cfg) : ps_(&ps), cfg_(cfg) {
    for (const auto& p : ps) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  std::uint64_t steps() const noexcept { return t_; }

  void step(double lr) {
    ++t_;
    const double bc1 = 1 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1 - std::pow(cfg_.beta2, static_cast<double>(t_));
    std::size_t q = 0;
    for (auto& p : *ps_) {
      auto& m = m_[q].storage();
      auto& v = v_[q].storage();
      auto& w = p->value.storage();
      const auto& g = p->grad.storage();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m[i] = static_cast<T>(cfg_.beta1 * m[i] + (1 - cfg_.beta1) * gi);
        v[i] = static_cast<T>(cfg_.beta2 * v[i] + (1 - cfg_.beta2) * gi * gi);
        const double mhat = m[i] / bc1, vhat = v[i] / bc2;
        const double upd = lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[i]);
        w[i] = static_cast<T>(w[i] - upd);
      }
      ++q;
    }
  }

  void save(Checkpoint& ck, const std::string& prefix) const {
    std::size_t q = 0;
    for (const auto& p : *ps_) {
      ck.add(prefix + ".m." + p->name, m_[q]);
      ck.add(prefix + ".v." + p->name, v_[q]);
      ++q;
    }
  }

  void load(const Checkpoint& ck, const std::string& prefix, std::uint64_t steps) {
    std::size_t q = 0;
    for (const auto& p : *ps_) {
      ck.restore(prefix + ".m." + p->name, m_[q]);
      ck.restore(prefix + ".v." + p->name, v_[q]);
      ++q;
    }
    t_ = steps;
  }

 private:
  ParameterSet<T>* ps_ = nullptr;
  AdamWConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  std::uint64_t t_ = 0;
};

struct TrainConfig {
  double lr_model = 1e-3;
  double lr_parser = 1e-3;
  std::size_t epochs = 5;
  /// Extra epochs after the main phase with a frozen parser and fast encoding.
  std::size_t fast_epochs = 0;
  std::size_t token_budget = 256;
  std::uint64_t seed = 1;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  std::size_t warmup_steps = 0;

  void validate() const {
    if (!(lr_model >= 0) || !(lr_parser >= 0)) throw ConfigError("learning rates must be non-negative");
    if (token_budget == 0) throw ConfigError("token_budget must be positive");
    if (!(clip_norm >= 0)) throw ConfigError("clip_norm must be non-negative");
  }

  void read(const ConfigMap& cm) {
    cm.read("lr_model", lr_model);
    cm.read("lr_parser", lr_parser);
    cm.read("epochs", epochs);
    cm.read("fast_epochs", fast_epochs);
    cm.read("token_budget", token_budget);
    cm.read("seed", seed);
    cm.read("weight_decay", weight_decay);
    cm.read("clip_norm", clip_norm);
    cm.read("warmup_steps", warmup_steps);
  }

  void write(ConfigMap& cm) const {
    cm.put("lr_model", lr_model);
    cm.put("lr_parser", lr_parser);
    cm.put("epochs", epochs);
    cm.put("fast_epochs", fast_epochs);
    cm.put("token_budget", token_budget);
    cm.put("seed", seed);
    cm.put("weight_decay", weight_decay);
    cm.put("clip_norm", clip_norm);
    cm.put("warmup_steps", warmup_steps);
  }
};

struct StepMetrics {
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  double mlm_loss = 0;
  std::size_t masked = 0;
  double parser_loss = 0;
  std::size_t cells_encoded = 0;
  std::size_t batches = 0;
  std::size_t compose_calls = 0;
  double wall_ms = 0;

  nlohmann::json to_json() const {
    return {{"step", step},
            {"epoch", epoch},
            {"mlm_loss", mlm_loss},
            {"masked", masked},
            {"parser_loss", parser_loss},
            {"cells_encoded", cells_encoded},
            {"batches", batches},
            {"compose_calls", compose_calls},
            {"wall_ms", wall_ms}};
  }
};

template <class T>
double grad_norm(const ParameterSet<T>& ps) {
  double s = 0;
  for (const auto& p : ps)
    for (T g : p->grad.storage()) s += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(s);
}

template <class T>
void scale_grads(ParameterSet<T>& ps, double f) {
  for (auto& p : ps)
    for (T& g : p->grad.storage()) g = static_cast<T>(g * f);
}

/// Joint trainer.  The model and the parser are separate parameter groups
/// with their own optimizers and tapes, so no gradient crosses between them.
template <class T>
class Trainer {
 public:
  Trainer(ReCatModel<T>& model, const std::vector<Sentence>& corpus, TrainConfig cfg)
      : model_(model), corpus_(corpus), cfg_(cfg), rng_(cfg.seed) {
    cfg.validate();
    AdamWConfig ac;
    ac.weight_decay = cfg.weight_decay;
    opt_model_ = AdamW<T>(model.params(), ac);
    opt_parser_ = AdamW<T>(model.parser_params(), ac);
    for (const auto& s : corpus) {
      if (s.ids.empty()) throw InputError("corpus contains an empty sentence");
      lengths_.push_back(s.length());
    }
  }

  std::uint64_t step() const noexcept { return step_; }
  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t total_epochs() const noexcept { return cfg_.epochs + cfg_.fast_epochs; }
  bool done() const noexcept { return epoch_ >= total_epochs(); }
  EncodeMode phase_mode() const noexcept { return epoch_ < cfg_.epochs ? EncodeMode::full : EncodeMode::fast; }

  /// Runs one optimizer step on the next batch; nullopt when all epochs are done.
  std::optional<StepMetrics> next() {
    if (done()) return std::nullopt;
    if (plan_.empty() || batch_ >= plan_.size()) {
      plan_ = make_batches(lengths_, cfg_.token_budget, rng_);
      batch_ = 0;
    }
    auto m = train_step(plan_[batch_], phase_mode());
    ++batch_;
    if (batch_ >= plan_.size()) {
      ++epoch_;
      plan_.clear();
      batch_ = 0;
    }
    return m;
  }

  /// Runs until `max_steps` more steps were taken or training is done.
  void run(const std::function<void(const StepMetrics&)>& sink, std::uint64_t max_steps = ~std::uint64_t{0}) {
    for (std::uint64_t k = 0; k < max_steps; ++k) {
      auto m = next();
      if (!m) break;
      if (sink) sink(*m);
    }
  }

  StepMetrics train_step(const std::vector<std::size_t>& batch, EncodeMode mode) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto& mcfg = model_.config();
    StepMetrics out;
    out.epoch = epoch_;

    struct Item {
      std::vector<std::uint32_t> x;
      MlmTargets y;
    };
    std::vector<Item> items;
    for (auto i : batch) {
      auto [x, y] = mask_tokens(corpus_[i].ids, mcfg.mask_rate, mcfg.vocab, rng_);
      out.masked += y.size();
      items.push_back({std::move(x), std::move(y)});
    }

    model_.params().zero_grad();
    model_.parser_params().zero_grad();
    double mlm_sum = 0, parser_sum = 0;
    std::size_t parsed = 0;
    for (std::size_t q = 0; q < batch.size(); ++q) {
      const auto& s = corpus_[batch[q]];
      Tape<T> tape, ptape;
      auto f = model_.forward(tape, ptape, s.ids, items[q].x, items[q].y, mode, s.forbidden);
      out.cells_encoded += f.counters.cells_encoded;
      out.batches += f.counters.batches;
      out.compose_calls += f.counters.compose_calls;
      if (f.mlm_loss) {
        const double v = static_cast<double>(f.mlm_loss->item());
        if (!std::isfinite(v)) throw NumericError("non-finite mlm loss on sentence: " + join(s.tokens));
        mlm_sum += v * static_cast<double>(items[q].y.size());
        tape.backward(*f.mlm_loss);
        tape.accumulate_param_grads(static_cast<T>(static_cast<double>(items[q].y.size()) / out.masked));
      }
      if (f.parser_loss) {
        const double v = static_cast<double>(f.parser_loss->item());
        if (!std::isfinite(v)) throw NumericError("non-finite parser loss on sentence: " + join(s.tokens));
        parser_sum += v;
        ++parsed;
        ptape.backward(*f.parser_loss);
        ptape.accumulate_param_grads(static_cast<T>(1.0 / static_cast<double>(batch.size())));
      }
    }
    out.mlm_loss = out.masked ? mlm_sum / static_cast<double>(out.masked) : 0.0;
    out.parser_loss = parsed ? parser_sum / static_cast<double>(parsed) : 0.0;

    const double warm = cfg_.warmup_steps ? std::min(1.0, static_cast<double>(step_ + 1) / cfg_.warmup_steps) : 1.0;
    clip(model_.params());
    opt_model_.step(cfg_.lr_model * warm);
    if (mode == EncodeMode::full) {
      clip(model_.parser_params());
      opt_parser_.step(cfg_.lr_parser * warm);
    }
    out.step = ++step_;
    out.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return out;
  }

  /// Model, optimizer moments and trainer position (rng, epoch, batch plan).
  Checkpoint checkpoint() const {
    Checkpoint ck = model_checkpoint(model_);
    opt_model_.save(ck, "adamw.model");
    opt_parser_.save(ck, "adamw.parser");
    std::ostringstream st;
    st << "step " << step_ << "\n";
    st << "epoch " << epoch_ << "\n";
    st << "batch " << batch_ << "\n";
    st << "opt_model_steps " << opt_model_.steps() << "\n";
    st << "opt_parser_steps " << opt_parser_.steps() << "\n";
    st << "rng " << rng_ << "\n";
    st << "plan " << plan_.size() << "\n";
    for (const auto& b : plan_) {
      st << b.size();
      for (auto i : b) st << ' ' << i;
      st << "\n";
    }
    ck.state = st.str();
    return ck;
  }

  /// Restores a checkpoint written by checkpoint() into this trainer.
  void restore(const Checkpoint& ck) {
    load_params(ck, model_.params());
    load_params(ck, model_.parser_params());
    std::istringstream st(ck.state);
    std::string key;
    std::uint64_t om = 0, op = 0;
    std::size_t plan_size = 0;
    auto expect = [&](const char* k) {
      if (!(st >> key) || key != k) throw CheckpointError(std::string("trainer state is missing '") + k + "'");
    };
    expect("step");
    st >> step_;
    expect("epoch");
    st >> epoch_;
    expect("batch");
    st >> batch_;
    expect("opt_model_steps");
    st >> om;
    expect("opt_parser_steps");
    st >> op;
    expect("rng");
    st >> rng_;
    expect("plan");
    st >> plan_size;
    plan_.assign(plan_size, {});
    for (auto& b : plan_) {
      std::size_t len = 0;
      st >> len;
      b.resize(len);
      for (auto& i : b) {
        st >> i;
        if (i >= corpus_.size()) throw CheckpointError("trainer state references a sentence outside the corpus");
      }
    }
    if (!st) throw CheckpointError("corrupt trainer state");
    opt_model_.load(ck, "adamw.model", om);
    opt_parser_.load(ck, "adamw.parser", op);
  }

 private:
  static std::string join(const std::vector<std::string>& toks) {
    std::string s;
    for (const auto& t : toks) s += (s.empty() ? "" : " ") + t;
    return s;
  }

  void clip(ParameterSet<T>& ps) const {
    if (cfg_.clip_norm <= 0) return;
    const double n = grad_norm(ps);
    if (!std::isfinite(n)) throw NumericError("non-finite gradient norm");
    if (n > cfg_.clip_norm) scale_grads(ps, cfg_.clip_norm / n);
  }

  ReCatModel<T>& model_;
  const std::vector<Sentence>& corpus_;
  TrainConfig cfg_;
  std::mt19937_64 rng_;
  AdamW<T> opt_model_, opt_parser_;
  std::vector<int> lengths_;
  std::vector<std::vector<std::size_t>> plan_;
  std::size_t batch_ = 0;
  std::size_t epoch_ = 0;
  std::uint64_t step_ = 0;
};

}  // namespace recat
