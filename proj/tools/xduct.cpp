// Command-line driver: gen, train, eval and analyze.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "xduct/xduct.hpp"

#ifndef XDUCT_BUILD_ID
#define XDUCT_BUILD_ID "unknown"
#endif

namespace fs = std::filesystem;
using namespace xduct;

namespace {

enum class LogLevel { Error = 0, Info = 1, Debug = 2 };

LogLevel g_level = LogLevel::Info;

LogLevel log_level_from_env() {
  const char* v = std::getenv("XDUCT_LOG");
  if (!v || !*v) return LogLevel::Info;
  const std::string s = v;
  if (s == "error") return LogLevel::Error;
  if (s == "info") return LogLevel::Info;
  if (s == "debug") return LogLevel::Debug;
  throw ArgumentError("XDUCT_LOG must be one of error, info, debug (got '" + s + "')");
}

template <class... Args>
void say(LogLevel level, const char* fmt, Args... args) {
  if (level > g_level) return;
  std::fprintf(stderr, fmt, args...);
  std::fputc('\n', stderr);
}

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory '" + dir + "'");
}

std::string in_dir(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << j.dump(2) << '\n';
}

// Flags shared by eval and analyze.
struct DecodeOptions {
  std::string ckpt;
  std::string out;
  std::size_t threads = 1;
  std::size_t max_len = 0;
};

struct Loaded {
  Checkpoint ckpt;
  TransducerModel model;
  TaskKind task;
};

Loaded load_run(const std::string& path, const std::string& task_flag, const std::string& arch_flag) {
  Checkpoint c = load_checkpoint(path);
  const TaskKind task = parse_task(c.task);
  if (!task_flag.empty() && parse_task(task_flag) != task) {
    throw ConfigError("checkpoint was trained for task '" + c.task + "', not '" + task_flag + "'");
  }
  if (!arch_flag.empty() && parse_architecture(arch_flag) != c.config.arch) {
    throw ConfigError(std::string("checkpoint holds a '") + architecture_name(c.config.arch) + "' model, not '" +
                      arch_flag + "'");
  }
  TransducerModel m = restore_model(c);
  return {std::move(c), std::move(m), task};
}

std::vector<DecodeResult> decode_examples(const Loaded& run, const std::vector<EncodedExample>& data,
                                          const DecodeOptions& opt) {
  std::vector<std::vector<int>> xs;
  for (const auto& ex : data) xs.push_back(ex.source);
  return greedy_decode_all(run.model, xs, opt.threads, opt.max_len);
}

// gen

struct GenArgs {
  std::string rule;
  std::size_t n = 2000;
  std::size_t min_len = 4;
  std::size_t max_len = 8;
  std::size_t alphabet = 10;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_gen(const GenArgs& a) {
  SyntheticSpec spec;
  spec.rule = parse_rule(a.rule);
  spec.train_size = a.n;
  spec.min_len = a.min_len;
  spec.max_len = a.max_len;
  spec.alphabet = a.alphabet;
  spec.seed = a.seed;
  Dataset ds = gen_synthetic(spec);
  ensure_dir(a.out);
  write_tsv(in_dir(a.out, "train.tsv"), ds.train, TaskKind::Synthetic);
  write_tsv(in_dir(a.out, "dev.tsv"), ds.dev, TaskKind::Synthetic);
  write_tsv(in_dir(a.out, "test.tsv"), ds.test, TaskKind::Synthetic);
  std::printf("train %zu dev %zu test %zu\n", ds.train.size(), ds.dev.size(), ds.test.size());
  return 0;
}

// train

struct TrainArgs {
  std::string task;
  std::string arch = "hard";
  std::string preset = "small";
  bool reinforce = false;
  std::optional<std::size_t> samples, emb_dim, enc_hidden, enc_layers, dec_hidden, dec_layers, out_dim;
  std::optional<double> dropout;
  bool uncontrolled = false;
  std::string data, dev, test, out;
  std::uint64_t seed = 0;
  double lr = 1e-3;
  double lr_floor = 1e-5;
  std::size_t epochs = 50;
  std::optional<std::size_t> batch_size;  // default 50 for translit, 20 otherwise
  std::optional<double> clip;             // default 5 for the large preset, off for small
  std::size_t threads = 1;
  bool deterministic = false;
  bool checked = false;
};

ModelConfig resolve_config(const TrainArgs& a) {
  ModelConfig c = ModelConfig::preset(a.preset);
  c.arch = parse_architecture(a.arch);
  // The hard input-fed model has no exact likelihood once the fed context
  // depends on sampled alignments; it always trains with REINFORCE.
  c.reinforce = a.reinforce || c.arch == Architecture::HardInputFed;
  if (a.samples) c.samples = *a.samples;
  if (a.emb_dim) c.emb_dim = *a.emb_dim;
  if (a.enc_hidden) c.enc_hidden = *a.enc_hidden;
  if (a.enc_layers) c.enc_layers = *a.enc_layers;
  if (a.dec_hidden) c.dec_hidden = *a.dec_hidden;
  if (a.dec_layers) c.dec_layers = *a.dec_layers;
  if (a.out_dim) c.out_dim = *a.out_dim;
  if (a.dropout) c.dropout = *a.dropout;
  c.uncontrolled = a.uncontrolled;
  c.validate();
  return c;
}

int cmd_train(const TrainArgs& a) {
  const TaskKind task = parse_task(a.task);
  ModelConfig config = resolve_config(a);
  TrainConfig tc;
  tc.lr = a.lr;
  tc.lr_floor = a.lr_floor;
  tc.max_epochs = a.epochs;
  tc.batch_size = a.batch_size.value_or(task == TaskKind::Transliteration ? 50 : 20);
  tc.clip_norm = a.clip.value_or(a.preset == "large" ? 5.0 : 0.0);
  tc.seed = a.seed;
  tc.threads = a.deterministic ? 1 : a.threads;
  tc.checked = a.checked;
  tc.deterministic = a.deterministic;
  tc.validate();

  std::vector<Example> train = read_tsv(a.data, task), dev, test;
  if (!a.dev.empty()) {
    dev = read_tsv(a.dev, task);
    if (!a.test.empty()) test = read_tsv(a.test, task);
  } else {
    Split s = split_g2p(train, a.seed);
    train = std::move(s.train);
    dev = std::move(s.dev);
    test = std::move(s.test);
  }
  if (train.empty() || dev.empty()) throw DataError("training and development sets must be non-empty");
  ensure_dir(a.out);
  if (a.dev.empty()) {
    write_tsv(in_dir(a.out, "train.tsv"), train, task);
    write_tsv(in_dir(a.out, "dev.tsv"), dev, task);
    write_tsv(in_dir(a.out, "test.tsv"), test, task);
  }

  const Vocabulary src = build_vocab(train, Side::Source), tgt = build_vocab(train, Side::Target);
  TransducerModel model = build_model(config, src, tgt, a.seed);
  const auto train_enc = encode_examples(train, src, tgt), dev_enc = encode_examples(dev, src, tgt);

  ModelConfig resolved = config;
  resolved.out_dim = model.out_dim;
  nlohmann::json manifest = {
      {"command", "train"},
      {"build", XDUCT_BUILD_ID},
      {"task", task_name(task)},
      {"seed", a.seed},
      {"preset", a.preset},
      {"model", detail::config_to_json(resolved)},
      {"parameters", parameter_count(model)},
      {"training",
       {{"lr", tc.lr},
        {"lr_floor", tc.lr_floor},
        {"max_epochs", tc.max_epochs},
        {"batch_size", tc.batch_size},
        {"clip_norm", tc.clip_norm},
        {"threads", tc.threads},
        {"deterministic", tc.deterministic},
        {"checked", tc.checked}}},
      {"inputs", {{"data", a.data}, {"dev", a.dev}, {"test", a.test}}},
      {"sizes", {{"train", train.size()}, {"dev", dev.size()}, {"test", test.size()}}},
      {"vocab", {{"source", src.size()}, {"target", tgt.size()}}},
      {"out", a.out}};
  write_json(in_dir(a.out, "manifest.json"), manifest);
  say(LogLevel::Debug, "manifest %s", manifest.dump().c_str());
  say(LogLevel::Info, "%s model, %zu parameters, %zu train / %zu dev examples", architecture_name(config.arch),
      parameter_count(model), train.size(), dev.size());

  const std::string log_path = in_dir(a.out, "log.tsv");
  std::ofstream log_tsv(log_path, std::ios::binary);
  if (!log_tsv) throw IoError("cannot open '" + log_path + "' for writing");
  log_tsv << "epoch\ttrain_loss\tdev_loss\tdev_accuracy\tlr\tseconds\n";
  tc.on_epoch = [&](const EpochRecord& r) {
    char line[256];
    std::snprintf(line, sizeof line, "%zu\t%.6f\t%.6f\t%.2f\t%.3g\t%.2f", r.epoch, r.train_loss,
                  -r.dev_log_likelihood, r.dev_accuracy, r.lr, r.seconds);
    log_tsv << line << '\n' << std::flush;
    say(LogLevel::Info, "epoch %zu loss %.4f dev ll %.4f acc %.2f lr %.3g (%.1fs)", r.epoch, r.train_loss,
        r.dev_log_likelihood, r.dev_accuracy, r.lr, r.seconds);
  };

  FitResult result = fit(model, train_enc, dev_enc, tc);
  Checkpoint best = result.best;
  best.task = task_name(task);
  best.seed = a.seed;
  best.source = src;
  best.target = tgt;
  save_checkpoint(best, in_dir(a.out, "best.ckpt"));
  const EpochRecord& b = result.log[result.best_epoch - 1];
  std::printf("best epoch %zu dev_accuracy %.2f dev_ll %.4f\n", b.epoch, b.dev_accuracy, b.dev_log_likelihood);
  return 0;
}

// eval

struct EvalArgs {
  DecodeOptions decode;
  std::string test;
  std::string task;
  std::string arch;
};

int cmd_eval(const EvalArgs& a) {
  Loaded run = load_run(a.decode.ckpt, a.task, a.arch);
  const std::vector<Example> test = read_tsv(a.test, run.task);
  if (test.empty()) throw DataError(a.test + ": no examples");
  const auto enc = encode_examples(test, run.ckpt.source, run.ckpt.target);
  const auto results = decode_examples(run, enc, a.decode);
  std::vector<Symbols> sources, refs, hyps;
  for (std::size_t k = 0; k < test.size(); ++k) {
    sources.push_back(test[k].source);
    refs.push_back(test[k].target);
    hyps.push_back(run.ckpt.target.decode(strip_eos(results[k].output)));
  }
  if (run.task == TaskKind::Inflection) {
    // report the lemma only
    for (std::size_t k = 0; k < test.size(); ++k) {
      sources[k].erase(sources[k].begin(), sources[k].begin() + static_cast<std::ptrdiff_t>(test[k].tag_count));
    }
  }
  EvalReport report = evaluate(run.task, sources, refs, hyps);
  ensure_dir(a.decode.out);
  write_report(report, in_dir(a.decode.out, "examples.tsv"), in_dir(a.decode.out, "summary.tsv"));
  std::printf("%s\n", report.summary_line().c_str());
  return 0;
}

// analyze

struct AnalyzeArgs {
  DecodeOptions decode;
  std::string data;
  std::string task;
  std::string arch;
  double threshold = 0.1;
  std::size_t heatmaps = 0;
  bool include_eos = false;
};

int cmd_analyze(const AnalyzeArgs& a) {
  if (!(a.threshold > 0.0 && a.threshold < 1.0)) throw ArgumentError("--threshold must lie in (0, 1)");
  Loaded run = load_run(a.decode.ckpt, a.task, a.arch);
  const std::vector<Example> data = read_tsv(a.data, run.task);
  if (data.empty()) throw DataError(a.data + ": no examples");
  const auto enc = encode_examples(data, run.ckpt.source, run.ckpt.target);
  const auto results = decode_examples(run, enc, a.decode);
  std::vector<std::vector<int>> refs;
  for (const auto& ex : enc) refs.push_back(ex.target);
  const ConfusionTable t = confusion_table(results, refs, a.threshold, a.include_eos);
  ensure_dir(a.decode.out);
  write_confusion(t, in_dir(a.decode.out, "confusion.tsv"));
  const std::size_t n = std::min(a.heatmaps, data.size());
  for (std::size_t k = 0; k < n; ++k) {
    char name[64];
    std::snprintf(name, sizeof name, "heatmap_%04zu.tsv", k);
    export_heatmap(results[k], data[k].source, run.ckpt.target, in_dir(a.decode.out, name));
  }
  std::printf("monotonic %zu (correct %zu) non-monotonic %zu (correct %zu) total %zu\n", t.monotonic(),
              t.counts[0][0], t.non_monotonic(), t.counts[1][0], t.total());
  return 0;
}

void add_decode_flags(CLI::App* cmd, DecodeOptions& d) {
  cmd->add_option("--ckpt", d.ckpt, "Checkpoint written by train")->required();
  cmd->add_option("--out", d.out, "Output directory")->required();
  cmd->add_option("--threads", d.threads, "Decoding workers")->check(CLI::PositiveNumber);
  cmd->add_option("--max-len", d.max_len, "Output length cap (0: source length + 50)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural string transduction with exact hard attention"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a synthetic copy/reverse/reduplicate dataset");
  g->add_option("--rule", gen.rule, "copy, reverse or reduplicate")->required();
  g->add_option("--n", gen.n, "Training pairs; dev and test get a tenth each");
  g->add_option("--min-len", gen.min_len, "Shortest string");
  g->add_option("--max-len", gen.max_len, "Longest string");
  g->add_option("--alphabet", gen.alphabet, "Alphabet size (at most 26)");
  g->add_option("--seed", gen.seed, "Random seed");
  g->add_option("--out", gen.out, "Output directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model and keep the best checkpoint");
  t->add_option("--task", tr.task, "g2p, translit, inflection or synthetic")->required();
  t->add_option("--arch", tr.arch, "soft-if, hard-if, soft or hard");
  t->add_flag("--reinforce", tr.reinforce, "Train the hard model with sampled alignments");
  t->add_option("--samples", tr.samples, "Alignments sampled per step with --reinforce");
  t->add_option("--preset", tr.preset, "small or large");
  t->add_option("--emb-dim", tr.emb_dim, "Embedding size");
  t->add_option("--enc-hidden", tr.enc_hidden, "Encoder hidden size per direction");
  t->add_option("--enc-layers", tr.enc_layers, "Encoder layers");
  t->add_option("--dec-hidden", tr.dec_hidden, "Decoder hidden size");
  t->add_option("--dec-layers", tr.dec_layers, "Decoder layers");
  t->add_option("--out-dim", tr.out_dim, "Attentional vector size (0: derived)");
  t->add_option("--dropout", tr.dropout, "Dropout rate");
  t->add_flag("--uncontrolled", tr.uncontrolled, "Feed the raw attentional vector (soft-if only)");
  t->add_option("--data", tr.data, "Training TSV (split 5/10/85 when --dev is absent)")->required();
  t->add_option("--dev", tr.dev, "Development TSV");
  t->add_option("--test", tr.test, "Test TSV, recorded in the manifest");
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--seed", tr.seed, "Random seed");
  t->add_option("--lr", tr.lr, "Initial Adam learning rate");
  t->add_option("--lr-floor", tr.lr_floor, "Stop once the halved rate falls below this");
  t->add_option("--epochs", tr.epochs, "Epoch cap");
  t->add_option("--batch-size", tr.batch_size, "Batch size (default 50 for translit, 20 otherwise)");
  t->add_option("--clip", tr.clip, "Gradient norm clip (default 5 for large, off for small)");
  t->add_option("--threads", tr.threads, "Workers for dev decoding")->check(CLI::PositiveNumber);
  t->add_flag("--deterministic", tr.deterministic, "Byte-identical checkpoints for equal seeds");
  t->add_flag("--checked", tr.checked, "Abort on the first NaN or Inf");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Decode a test set and score it");
  add_decode_flags(e, ev.decode);
  e->add_option("--test", ev.test, "Test TSV")->required();
  e->add_option("--task", ev.task, "Expected task");
  e->add_option("--arch", ev.arch, "Expected architecture");

  AnalyzeArgs an;
  auto* a = app.add_subcommand("analyze", "Monotonicity breakdown and alignment heatmaps");
  add_decode_flags(a, an.decode);
  a->add_option("--data", an.data, "TSV to analyze")->required();
  a->add_option("--task", an.task, "Expected task");
  a->add_option("--arch", an.arch, "Expected architecture");
  a->add_option("--threshold", an.threshold, "Edge threshold on alignment weights");
  a->add_option("--heatmaps", an.heatmaps, "Heatmap files for the first N examples");
  a->add_flag("--include-eos", an.include_eos, "Let the EOS row take part in crossing detection");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    if (err.get_exit_code() == 0) return app.exit(err);
    std::fprintf(stderr, "error: usage: %s\n", one_line(err.what()).c_str());
    return 2;
  }

  try {
    g_level = log_level_from_env();
    if (*g) return cmd_gen(gen);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*a) return cmd_analyze(an);
  } catch (const Error& err) {
    std::fprintf(stderr, "error: %s: %s\n", err.kind(), one_line(err.what()).c_str());
    return 1;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: internal: %s\n", one_line(err.what()).c_str());
    return 1;
  }
  return 1;
}
