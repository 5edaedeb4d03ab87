// recat: pretraining, parsing, evaluation and benchmarking front end.

#include <openssl/sha.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <random>
#include <sstream>
#include <thread>

#include "recat/checkpoint.hpp"
#include "recat/evalx.hpp"
#include "recat/model.hpp"
#include "recat/train.hpp"

namespace fs = std::filesystem;
using namespace recat;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitFailure = 3;

struct UsageError : Error {
  explicit UsageError(const std::string& m) : Error("usage error: " + m) {}
};

void require_file(const std::string& path, const char* what) {
  if (!fs::is_regular_file(path)) throw UsageError(std::string(what) + " '" + path + "' does not exist");
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// Same digest `git hash-object` prints for the file contents.
std::string git_blob_hash(const std::string& bytes) {
  const std::string data = "blob " + std::to_string(bytes.size()) + '\0' + bytes;
  unsigned char md[SHA_DIGEST_LENGTH];
  SHA1(reinterpret_cast<const unsigned char*>(data.data()), data.size(), md);
  std::ostringstream os;
  for (unsigned char c : md) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(c);
  return os.str();
}

nlohmann::json input_record(const std::string& path) {
  return {{"path", path}, {"git_blob", git_blob_hash(read_file(path))}};
}

/// Runs fn(i) for i in [0, count) on `threads` workers; results are written
/// by index so output order never depends on scheduling.
void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < count; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::vector<int> parse_lengths(const std::string& spec) {
  std::vector<int> out;
  auto to_int = [&](const std::string& s) {
    try {
      std::size_t pos = 0;
      const int v = std::stoi(s, &pos);
      if (pos != s.size() || v < 1) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw UsageError("bad length '" + s + "' in --lengths");
    }
  };
  const auto dots = spec.find("..");
  if (dots != std::string::npos) {
    const int lo = to_int(spec.substr(0, dots)), hi = to_int(spec.substr(dots + 2));
    if (lo > hi) throw UsageError("empty --lengths range");
    for (int n = lo; n <= hi; n *= 2) out.push_back(n);
    if (out.back() != hi) out.push_back(hi);
    return out;
  }
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_int(item));
  if (out.empty()) throw UsageError("empty --lengths");
  return out;
}

std::string default_vocab_path(const std::string& ckpt) {
  return (fs::path(ckpt).parent_path() / "vocab.txt").string();
}

// ---------------------------------------------------------------- pretrain

struct PretrainArgs {
  std::string corpus, vocab, config, out, resume;
  bool build_vocab = false;
  std::uint64_t max_steps = 0;
  std::uint64_t save_every = 0;
};

int run_pretrain(const PretrainArgs& a, std::uint64_t seed, bool seed_given) {
  require_file(a.corpus, "corpus");
  if (!a.build_vocab) require_file(a.vocab, "vocab");
  if (!a.config.empty()) require_file(a.config, "config");

  const auto lines = read_token_lines(a.corpus);
  Vocab vocab = a.build_vocab ? Vocab::build(lines) : Vocab::load(a.vocab);
  if (a.build_vocab) vocab.save(a.vocab);

  ConfigMap cm = a.config.empty() ? ConfigMap{} : ConfigMap::load(a.config);
  ReCatConfig mc;
  TrainConfig tc;
  mc.vocab = vocab.size();
  mc.read(cm);
  tc.read(cm);
  cm.check_consumed();
  if (mc.vocab != vocab.size()) {
    throw ConfigError("config vocab " + std::to_string(mc.vocab) + " does not match vocab file size " +
                      std::to_string(vocab.size()));
  }
  if (seed_given) {
    tc.seed = seed;
    mc.init_seed = seed;
  }
  mc.validate();
  tc.validate();

  const auto corpus = encode_corpus(lines, vocab);
  fs::create_directories(a.out);
  const fs::path dir(a.out);
  vocab.save((dir / "vocab.txt").string());

  std::unique_ptr<ReCatModel<float>> model;
  std::optional<Checkpoint> resume_ck;
  if (!a.resume.empty()) {
    require_file(a.resume, "checkpoint");
    resume_ck = Checkpoint::load(a.resume);
    model = model_from_checkpoint<float>(*resume_ck);
    if (model->config().vocab != vocab.size()) throw ConfigError("checkpoint vocab does not match vocab file");
  } else {
    model = std::make_unique<ReCatModel<float>>(mc);
  }
  Trainer<float> trainer(*model, corpus, tc);
  if (resume_ck) trainer.restore(*resume_ck);

  ConfigMap snapshot = model->config().to_map();
  tc.write(snapshot);
  {
    std::ofstream cfg(dir / "config.txt");
    cfg << snapshot.to_string();
  }
  nlohmann::json manifest;
  manifest["command"] = "pretrain";
  manifest["seed"] = tc.seed;
  manifest["config"] = snapshot.values();
  manifest["inputs"] = {{"corpus", input_record(a.corpus)}, {"vocab", input_record(a.vocab)}};
  if (!a.config.empty()) manifest["inputs"]["config"] = input_record(a.config);
  if (!a.resume.empty()) manifest["inputs"]["resume"] = input_record(a.resume);
  manifest["layout"] = {{"config", "config.txt"},
                        {"vocab", "vocab.txt"},
                        {"metrics", "metrics.jsonl"},
                        {"checkpoint", "checkpoint.bin"}};
  {
    std::ofstream mf(dir / "manifest.json");
    mf << manifest.dump(2) << "\n";
  }

  std::ofstream metrics(dir / "metrics.jsonl", resume_ck ? std::ios::app : std::ios::trunc);
  const auto ckpt_path = (dir / "checkpoint.bin").string();
  std::uint64_t taken = 0;
  const std::uint64_t budget = a.max_steps ? a.max_steps : ~std::uint64_t{0};
  while (taken < budget) {
    auto m = trainer.next();
    if (!m) break;
    ++taken;
    metrics << m->to_json().dump() << "\n";
    if (a.save_every && m->step % a.save_every == 0) trainer.checkpoint().save(ckpt_path);
    if (m->step % 50 == 0) {
      std::cerr << "step " << m->step << " epoch " << m->epoch << " mlm " << m->mlm_loss << " parser "
                << m->parser_loss << "\n";
    }
  }
  metrics.flush();
  trainer.checkpoint().save(ckpt_path);
  std::cout << "trained " << taken << " steps; checkpoint " << ckpt_path << "\n";
  return 0;
}

// ---------------------------------------------------------------- parse

int run_parse(const std::string& ckpt, std::string vocab_path, const std::string& input, const std::string& mode_name,
              const std::string& out_path, std::size_t threads) {
  require_file(ckpt, "checkpoint");
  require_file(input, "input");
  if (vocab_path.empty()) vocab_path = default_vocab_path(ckpt);
  require_file(vocab_path, "vocab");
  const EncodeMode mode = mode_name == "fast" ? EncodeMode::fast : EncodeMode::full;
  auto model = model_from_checkpoint<float>(Checkpoint::load(ckpt));
  const auto vocab = Vocab::load(vocab_path);
  const auto lines = read_token_lines(input);
  const auto sentences = encode_corpus(lines, vocab);

  std::vector<std::string> out(sentences.size());
  parallel_for(sentences.size(), threads, [&](std::size_t i) {
    const auto& s = sentences[i];
    Tape<float> tape(false), ptape(false);
    auto f = model->forward(tape, ptape, s.ids, s.ids, {}, mode, s.forbidden);
    out[i] = to_sexpr(f.tree, s.tokens);
  });

  std::ofstream file;
  std::ostream* os = &std::cout;
  if (!out_path.empty()) {
    file.open(out_path);
    if (!file) throw UsageError("cannot write '" + out_path + "'");
    os = &file;
  }
  for (const auto& line : out) *os << line << "\n";
  return 0;
}

// ---------------------------------------------------------------- eval-f1

std::vector<LabeledTree> load_trees(const std::string& path) {
  std::ifstream in(path);
  return read_trees(in);
}

int run_eval(const std::string& pred_path, const std::string& gold_path, const std::vector<std::string>& labels) {
  require_file(pred_path, "prediction file");
  require_file(gold_path, "gold file");
  const auto pred = load_trees(pred_path);
  const auto gold = load_trees(gold_path);
  std::cout << std::fixed << std::setprecision(2);
  std::cout << "sentences " << gold.size() << "\n";
  std::cout << "f1 " << corpus_f1(pred, gold) << "\n";
  std::vector<std::string> wanted = labels;
  if (wanted.empty()) {
    const auto all = gold_labels(gold);
    wanted.assign(all.begin(), all.end());
  }
  for (const auto& l : wanted) std::cout << "recall " << l << " " << constituent_recall(pred, gold, l) << "\n";
  return 0;
}

// ---------------------------------------------------------------- bench

int run_bench(const std::string& lengths, int m, const std::string& inputs, std::size_t samples, std::uint64_t seed,
              std::size_t threads) {
  if (m < 2) throw UsageError("--m must be at least 2");
  if (inputs != "balanced" && inputs != "random" && inputs != "left") throw UsageError("unknown --inputs " + inputs);
  const auto ns = parse_lengths(lengths);
  struct Job {
    int n;
    std::size_t sample;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  std::mt19937_64 seeder(seed);
  for (int n : ns)
    for (std::size_t s = 0; s < (inputs == "random" ? samples : 1); ++s) jobs.push_back({n, s, seeder()});
  std::vector<EfficiencyRow> rows(jobs.size());
  parallel_for(jobs.size(), threads, [&](std::size_t i) {
    const int n = jobs[i].n;
    SplitScores sc;
    if (inputs == "balanced") {
      std::function<void(int, int, int)> rec = [&](int lo, int hi, int depth) {
        if (lo >= hi) return;
        const int k = (lo + hi) / 2;
        sc.logits[static_cast<std::size_t>(k - 1)] = -depth;
        rec(lo, k, depth + 1);
        rec(k + 1, hi, depth + 1);
      };
      sc.logits.assign(static_cast<std::size_t>(n - 1), 0.0);
      rec(1, n, 0);
    } else if (inputs == "left") {
      for (int k = 1; k < n; ++k) sc.logits.push_back(k);
    } else {
      std::mt19937_64 rng(jobs[i].seed);
      std::uniform_real_distribution<double> u(0.0, 1.0);
      for (int k = 1; k < n; ++k) sc.logits.push_back(u(rng));
    }
    rows[i] = schedule_efficiency(n, m, sc);
  });
  std::cout << "n,m,inputs,sample,inside_steps,step_bound,cells,cell_bound,splits,compose_per_layer,"
               "fast_compose_per_layer\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    std::cout << r.n << ',' << r.m << ',' << inputs << ',' << jobs[i].sample << ',' << r.inside_steps << ','
              << r.step_bound << ',' << r.cells << ',' << 2 * static_cast<std::size_t>(r.m) * r.n << ',' << r.splits
              << ',' << r.compose_calls_per_layer << ',' << r.fast_compose_calls_per_layer << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------- export-trees

int run_export(std::size_t count, int min_len, int max_len, const std::string& trees_path,
               const std::string& text_path, std::uint64_t seed) {
  if (min_len < 1 || max_len < min_len) throw UsageError("need 1 <= --min-length <= --max-length");
  ToyGrammar g;
  std::mt19937_64 rng(seed);
  std::ofstream trees(trees_path);
  if (!trees) throw UsageError("cannot write '" + trees_path + "'");
  std::ofstream text;
  if (!text_path.empty()) {
    text.open(text_path);
    if (!text) throw UsageError("cannot write '" + text_path + "'");
  }
  for (std::size_t i = 0; i < count; ++i) {
    const auto t = g.sample(rng, min_len, max_len);
    trees << to_sexpr(t) << "\n";
    if (text.is_open()) {
      const auto words = tree_words(t);
      for (std::size_t w = 0; w < words.size(); ++w) text << (w ? " " : "") << words[w];
      text << "\n";
    }
  }
  return 0;
}

// ---------------------------------------------------------------- gradcheck

int run_gradcheck(const std::string& config, int length, double tolerance, std::size_t coords, std::uint64_t seed) {
  ReCatConfig mc;
  mc.vocab = 50;
  mc.d = 16;
  mc.heads = 2;
  mc.cio_layers = 2;
  mc.transformer_layers = 1;
  mc.parser_embed = 8;
  mc.parser_hidden = 8;
  if (!config.empty()) {
    require_file(config, "config");
    auto cm = ConfigMap::load(config);
    mc.read(cm);
    cm.check_consumed();
  }
  mc.init_seed = seed;
  if (length < 2) throw UsageError("--length must be at least 2");
  ReCatModel<double> model(mc);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.1);
  for (auto* ps : {&model.params(), &model.parser_params()})
    for (auto& p : *ps)
      for (auto& v : p->value.storage()) v += noise(rng);

  std::vector<std::uint32_t> s;
  for (int i = 0; i < length; ++i) s.push_back(kFirstRegularId + static_cast<std::uint32_t>(rng() % (mc.vocab - 2)));
  auto x = s;
  MlmTargets y;
  for (std::uint32_t p = 1; p < static_cast<std::uint32_t>(length); p += 2) {
    x[p] = kMaskId;
    y.positions.push_back(p);
    y.ids.push_back(s[p]);
  }
  GradcheckOptions opts;
  opts.tolerance = tolerance;
  opts.max_coords_per_param = coords;
  opts.seed = seed;
  auto model_report = gradcheck(model.params(), [&](Tape<double>& tape) {
    Tape<double> ptape(false);
    return *model.forward(tape, ptape, s, x, y).mlm_loss;
  }, opts);
  auto parser_report = gradcheck(model.parser_params(), [&](Tape<double>& ptape) {
    Tape<double> tape(false);
    return *model.forward(tape, ptape, s, x, y).parser_loss;
  }, opts);

  bool ok = true;
  std::cout << std::scientific << std::setprecision(3);
  for (const auto* rep : {&model_report, &parser_report}) {
    for (const auto& e : rep->entries) {
      const bool pass = e.max_rel_error < tolerance;
      ok = ok && pass;
      std::cout << (pass ? "ok   " : "FAIL ") << std::left << std::setw(36) << e.name << std::right
                << " coords " << e.checked << " max_rel " << e.max_rel_error << "\n";
    }
  }
  for (const auto* ps : {&model.params(), &model.parser_params()}) {
    for (const auto& p : *ps) {
      double n = 0;
      for (double g : p->grad.storage()) n += g * g;
      if (n == 0) {
        ok = false;
        std::cout << "FAIL " << p->name << " received no gradient\n";
      }
    }
  }
  std::cout << (ok ? "gradcheck passed" : "gradcheck failed") << "\n";
  return ok ? 0 : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Recursive composition augmented Transformer toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  std::uint64_t seed = 1;
  std::size_t threads = 1;
  auto* seed_opt = app.add_option("--seed", seed, "random seed")->capture_default_str();
  app.add_option("--threads", threads, "worker threads for per-sentence work")->check(CLI::PositiveNumber);

  PretrainArgs pa;
  auto* pretrain = app.add_subcommand("pretrain", "masked-LM pretraining with parser feedback");
  pretrain->add_option("--corpus", pa.corpus, "whitespace-tokenized sentences, one per line")->required();
  pretrain->add_option("--vocab", pa.vocab, "vocabulary file (token id per line)")->required();
  pretrain->add_flag("--build-vocab", pa.build_vocab, "build the vocabulary from the corpus and write it to --vocab");
  pretrain->add_option("--config", pa.config, "key = value config file");
  pretrain->add_option("--out", pa.out, "run directory")->required();
  pretrain->add_option("--resume", pa.resume, "checkpoint to resume from");
  pretrain->add_option("--max-steps", pa.max_steps, "stop after this many steps (0 = run all epochs)");
  pretrain->add_option("--save-every", pa.save_every, "checkpoint interval in steps (0 = only at the end)");

  std::string ckpt, vocab, input, mode = "full", out;
  auto* parse = app.add_subcommand("parse", "induce trees for a tokenized file");
  parse->add_option("--ckpt", ckpt, "checkpoint")->required();
  parse->add_option("--vocab", vocab, "vocabulary (default: vocab.txt next to the checkpoint)");
  parse->add_option("--input", input, "whitespace-tokenized sentences")->required();
  parse->add_option("--mode", mode, "full or fast")->check(CLI::IsMember({"full", "fast"}))->capture_default_str();
  parse->add_option("--out", out, "output file (default: stdout)");

  std::string pred, gold;
  std::vector<std::string> labels;
  auto* eval = app.add_subcommand("eval-f1", "sentence-level bracket F1 and per-label recall");
  eval->add_option("--pred", pred, "predicted trees, one s-expression per line")->required();
  eval->add_option("--gold", gold, "gold trees, one s-expression per line")->required();
  eval->add_option("--labels", labels, "labels to report recall for (default: all gold labels)")->delimiter(',');

  std::string lengths = "8..256", inputs = "balanced";
  int m = 2;
  std::size_t samples = 10;
  auto* bench = app.add_subcommand("bench", "schedule efficiency counters as CSV");
  bench->add_option("--lengths", lengths, "a..b (doubling) or a comma list")->capture_default_str();
  bench->add_option("--m", m, "pruning threshold")->capture_default_str();
  bench->add_option("--inputs", inputs, "balanced, random or left")->capture_default_str();
  bench->add_option("--samples", samples, "random inputs per length")->capture_default_str();

  std::size_t count = 2000;
  int min_len = 4, max_len = 16;
  std::string trees_out, text_out;
  auto* exporter = app.add_subcommand("export-trees", "sample the toy grammar as gold trees and plain text");
  exporter->add_option("--count", count, "sentences")->capture_default_str();
  exporter->add_option("--min-length", min_len)->capture_default_str();
  exporter->add_option("--max-length", max_len)->capture_default_str();
  exporter->add_option("--out", trees_out, "gold trees file")->required();
  exporter->add_option("--text", text_out, "plain token file");

  std::string gc_config;
  int gc_length = 5;
  double gc_tol = 1e-3;
  std::size_t gc_coords = 6;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every parameter group");
  grad->add_option("--config", gc_config, "model config overrides");
  grad->add_option("--length", gc_length, "sentence length")->capture_default_str();
  grad->add_option("--tolerance", gc_tol, "maximum relative error")->capture_default_str();
  grad->add_option("--coords", gc_coords, "sampled coordinates per parameter (0 = all)")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*pretrain) return run_pretrain(pa, seed, seed_opt->count() > 0);
    if (*parse) return run_parse(ckpt, vocab, input, mode, out, threads);
    if (*eval) return run_eval(pred, gold, labels);
    if (*bench) return run_bench(lengths, m, inputs, samples, seed, threads);
    if (*exporter) return run_export(count, min_len, max_len, trees_out, text_out, seed);
    if (*grad) return run_gradcheck(gc_config, gc_length, gc_tol, gc_coords, seed);
  } catch (const UsageError& e) {
    std::cerr << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}
