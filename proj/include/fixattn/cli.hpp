#pragma once

// The fixattn command-line surface. run_cli() parses arguments, dispatches to
// a subcommand and maps failures to exit codes: 0 success, 1 usage or
// configuration error, 2 data error, 3 numerical failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fixattn/data.hpp"
#include "fixattn/error.hpp"
#include "fixattn/eval.hpp"
#include "fixattn/inference.hpp"
#include "fixattn/model.hpp"
#include "fixattn/patterns.hpp"
#include "fixattn/serialization.hpp"
#include "fixattn/train.hpp"

namespace fixattn::cli {

// Everything needed to reproduce a training run.
struct RunConfig {
  ModelConfig model;
  std::uint64_t seed = 1;

  std::string task = "copy";  // empty when training from files
  std::size_t vocab_size = 20;
  std::size_t sentences = 2000;
  std::size_t test_sentences = 200;
  std::size_t len_min = 3;
  std::size_t len_max = 10;
  std::string train_src;
  std::string train_tgt;
  bool subword_split = false;

  std::size_t steps = 2000;
  double lr = 3e-4;
  std::size_t batch_tokens = 1000;
  std::size_t log_every = 100;
  double stop_at_accuracy = 0.0;
  std::string precision = "f64";
};

inline Json to_json(const RunConfig& c) {
  auto model = fixattn::to_json(c.model);
  model.erase("src_vocab");
  model.erase("tgt_vocab");
  return Json{{"seed", c.seed},
              {"model", model},
              {"data",
               {{"task", c.task},
                {"vocab_size", c.vocab_size},
                {"sentences", c.sentences},
                {"test_sentences", c.test_sentences},
                {"len_min", c.len_min},
                {"len_max", c.len_max},
                {"train_src", c.train_src},
                {"train_tgt", c.train_tgt},
                {"subword_split", c.subword_split}}},
              {"train",
               {{"steps", c.steps},
                {"lr", c.lr},
                {"batch_tokens", c.batch_tokens},
                {"log_every", c.log_every},
                {"stop_at_accuracy", c.stop_at_accuracy},
                {"precision", c.precision}}}};
}

inline RunConfig run_config_from_json(const Json& j, RunConfig c = {}) {
  detail::reject_unknown(j, {"seed", "model", "data", "train"}, "config");
  detail::read_field(j, "seed", c.seed, "config");
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"), c.model, "config.model");
  if (j.contains("data")) {
    const auto& d = j.at("data");
    const std::string path = "config.data";
    detail::reject_unknown(d, {"task", "vocab_size", "sentences", "test_sentences", "len_min", "len_max",
                               "train_src", "train_tgt", "subword_split"},
                           path);
    detail::read_field(d, "task", c.task, path);
    detail::read_field(d, "vocab_size", c.vocab_size, path);
    detail::read_field(d, "sentences", c.sentences, path);
    detail::read_field(d, "test_sentences", c.test_sentences, path);
    detail::read_field(d, "len_min", c.len_min, path);
    detail::read_field(d, "len_max", c.len_max, path);
    detail::read_field(d, "train_src", c.train_src, path);
    detail::read_field(d, "train_tgt", c.train_tgt, path);
    detail::read_field(d, "subword_split", c.subword_split, path);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    const std::string path = "config.train";
    detail::reject_unknown(t, {"steps", "lr", "batch_tokens", "log_every", "stop_at_accuracy", "precision"}, path);
    detail::read_field(t, "steps", c.steps, path);
    detail::read_field(t, "lr", c.lr, path);
    detail::read_field(t, "batch_tokens", c.batch_tokens, path);
    detail::read_field(t, "log_every", c.log_every, path);
    detail::read_field(t, "stop_at_accuracy", c.stop_at_accuracy, path);
    detail::read_field(t, "precision", c.precision, path);
  }
  return c;
}

inline void validate(const RunConfig& c) {
  if (c.precision != "f64" && c.precision != "f32") {
    throw ConfigError("config.train.precision: expected f64 or f32, got '" + c.precision + "'");
  }
  if (c.task.empty() && (c.train_src.empty() || c.train_tgt.empty())) {
    throw ConfigError("config.data: give either a synthetic task or both train_src and train_tgt");
  }
  if (!c.task.empty()) parse_task(c.task);
  if (c.batch_tokens == 0) throw ConfigError("config.train.batch_tokens: must be positive");
  if (!(c.lr > 0.0)) throw ConfigError("config.train.lr: must be positive");
}

namespace detail {

inline std::string fixed(double v, int digits = 2) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(digits) << v;
  return out.str();
}

inline std::vector<Sentence> read_sentences(const std::string& path) {
  std::vector<Sentence> out;
  for (const auto& line : read_lines(path)) out.push_back(tokenize(line));
  return out;
}

inline std::vector<std::string> join_all(const std::vector<Sentence>& sentences) {
  std::vector<std::string> lines;
  for (const auto& s : sentences) lines.push_back(join(s));
  return lines;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write '" + path + "'");
  out << text;
}

inline std::string format_bleu(const BleuReport& r) {
  std::ostringstream out;
  out << "BLEU = " << fixed(r.bleu) << " " << fixed(100 * r.precisions[0], 1) << "/"
      << fixed(100 * r.precisions[1], 1) << "/" << fixed(100 * r.precisions[2], 1) << "/"
      << fixed(100 * r.precisions[3], 1) << " (BP = " << fixed(r.brevity_penalty, 3) << ", hyp_len = " << r.hyp_len
      << ", ref_len = " << r.ref_len << ")";
  return out.str();
}

struct LoadedRun {
  LoadedModel loaded;
  bool subword_split = false;

  TextCodec codec() const { return {loaded.source_vocab, loaded.target_vocab, subword_split}; }
};

inline LoadedRun load_run(const std::string& dir) {
  ModelFiles files{dir};
  LoadedRun run{load_model(files), false};
  const auto run_json = files.dir / "run.json";
  if (std::filesystem::exists(run_json)) {
    run.subword_split = run_config_from_json(read_json_file(run_json.string())).subword_split;
  }
  return run;
}

inline std::vector<Sentence> references_for(const std::string& path, std::size_t expected) {
  auto refs = read_sentences(path);
  if (refs.size() != expected) {
    throw CorpusError("reference file '" + path + "' has " + std::to_string(refs.size()) + " lines, expected " +
                      std::to_string(expected));
  }
  return refs;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct TrainCommand {
  std::string config_file;
  std::string out_dir;
  std::string heads;
  std::optional<std::size_t> enc_layers, dec_layers, d_model, d_ff, max_len;
  std::optional<double> dropout, lr, stop_at_accuracy;
  std::optional<std::string> task, train_src, train_tgt, precision;
  std::optional<std::size_t> vocab_size, sentences, test_sentences, len_min, len_max, steps, batch_tokens, log_every;
  std::optional<std::uint64_t> seed;
  bool subword_split = false;
};

template <class T>
int train_with(const RunConfig& run, const TrainCommand& cmd, std::ostream& out, std::ostream& err) {
  ParallelCorpus train_pairs, test_pairs;
  std::vector<ContrastiveItem> contrastive;
  if (!run.task.empty()) {
    const auto syn = make_synthetic(parse_task(run.task), run.vocab_size, run.sentences + run.test_sentences,
                                    run.len_min, run.len_max, run.seed);
    train_pairs.assign(syn.pairs.begin(), syn.pairs.begin() + static_cast<std::ptrdiff_t>(run.sentences));
    test_pairs.assign(syn.pairs.begin() + static_cast<std::ptrdiff_t>(run.sentences), syn.pairs.end());
    contrastive.assign(syn.contrastive.begin() + static_cast<std::ptrdiff_t>(run.sentences), syn.contrastive.end());
  } else {
    train_pairs = load_parallel(run.train_src, run.train_tgt);
  }
  if (run.subword_split) {
    for (auto& p : train_pairs) p.source = split_subwords(p.source);
  }

  std::vector<Sentence> sources, targets;
  for (const auto& p : train_pairs) {
    sources.push_back(p.source);
    targets.push_back(p.target);
  }
  const auto src_vocab = Vocabulary::build(sources);
  const auto tgt_vocab = Vocabulary::build(targets);
  auto config = run.model;
  config.src_vocab = src_vocab.size();
  config.tgt_vocab = tgt_vocab.size();
  config.seed = run.seed;
  Transformer<T> model(config);
  const auto corpus = encode_corpus(train_pairs, src_vocab, tgt_vocab);

  TrainOptions options;
  options.steps = run.steps;
  options.adam.lr = run.lr;
  options.batch_tokens = run.batch_tokens;
  options.seed = run.seed;
  options.log_every = run.log_every;
  options.stop_at_accuracy = run.stop_at_accuracy;
  // Early stopping watches the first 200 training pairs so held-out data stays unseen.
  EncodedCorpus monitor(corpus.begin(), corpus.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(200, corpus.size())));

  ModelFiles files{cmd.out_dir};
  std::filesystem::create_directories(files.dir);
  std::ofstream log((files.dir / "train_log.csv").string());
  log << "step,loss,token_accuracy,seconds\n";
  out << "step,loss,token_accuracy,seconds\n";
  auto on_log = [&](const TrainLogEntry& e) {
    std::ostringstream line;
    line << e.step << ',' << std::setprecision(6) << e.loss << ',' << e.token_accuracy << ','
         << detail::fixed(e.seconds, 2) << '\n';
    log << line.str() << std::flush;
    out << line.str() << std::flush;
  };
  const auto result = train(model, corpus, options, run.stop_at_accuracy > 0.0 ? &monitor : nullptr, on_log, [&](const std::string& w) {
    err << "warning: " << w << '\n';
  });
  if (result.skipped > 0) err << "warning: skipped " << result.skipped << " sentence pairs\n";

  save_model(files, model, src_vocab, tgt_vocab);
  write_json_file((files.dir / "run.json").string(), to_json(run));
  if (!test_pairs.empty()) {
    std::vector<std::string> test_src, test_tgt;
    for (const auto& p : test_pairs) {
      test_src.push_back(join(p.source));
      test_tgt.push_back(join(p.target));
    }
    write_lines((files.dir / "test.src").string(), test_src);
    write_lines((files.dir / "test.tgt").string(), test_tgt);
    write_contrastive_fixture((files.dir / "contrastive.tsv").string(), contrastive);
  }
  const auto counts = param_count(config);
  out << "trained " << result.steps << " steps; " << counts.total << " parameters; model written to "
      << files.dir.string() << '\n';
  return 0;
}

inline int run_train(const TrainCommand& cmd, std::ostream& out, std::ostream& err) {
  RunConfig run;
  if (!cmd.config_file.empty()) run = run_config_from_json(read_json_file(cmd.config_file));
  if (!cmd.heads.empty()) run.model.apply_shorthand(cmd.heads);
  if (cmd.enc_layers) run.model.enc_layers = *cmd.enc_layers;
  if (cmd.dec_layers) run.model.dec_layers = *cmd.dec_layers;
  if (cmd.d_model) run.model.d_model = *cmd.d_model;
  if (cmd.d_ff) run.model.d_ff = *cmd.d_ff;
  if (cmd.max_len) run.model.max_len = *cmd.max_len;
  if (cmd.dropout) run.model.dropout = *cmd.dropout;
  if (cmd.seed) run.seed = *cmd.seed;
  if (cmd.task) run.task = *cmd.task;
  if (cmd.train_src || cmd.train_tgt) {
    if (!cmd.task) run.task.clear();
    run.train_src = cmd.train_src.value_or(run.train_src);
    run.train_tgt = cmd.train_tgt.value_or(run.train_tgt);
  }
  if (cmd.vocab_size) run.vocab_size = *cmd.vocab_size;
  if (cmd.sentences) run.sentences = *cmd.sentences;
  if (cmd.test_sentences) run.test_sentences = *cmd.test_sentences;
  if (cmd.len_min) run.len_min = *cmd.len_min;
  if (cmd.len_max) run.len_max = *cmd.len_max;
  if (cmd.subword_split) run.subword_split = true;
  if (cmd.steps) run.steps = *cmd.steps;
  if (cmd.lr) run.lr = *cmd.lr;
  if (cmd.batch_tokens) run.batch_tokens = *cmd.batch_tokens;
  if (cmd.log_every) run.log_every = *cmd.log_every;
  if (cmd.stop_at_accuracy) run.stop_at_accuracy = *cmd.stop_at_accuracy;
  if (cmd.precision) run.precision = *cmd.precision;
  validate(run);
  return run.precision == "f32" ? train_with<float>(run, cmd, out, err) : train_with<double>(run, cmd, out, err);
}

struct TranslateCommand {
  std::string checkpoint;
  std::string input;
  std::string output;
  std::size_t threads = 1;
};

inline int run_translate(const TranslateCommand& cmd, std::ostream& out) {
  const auto run = detail::load_run(cmd.checkpoint);
  const auto hyps = translate(run.loaded.model, run.codec(), detail::read_sentences(cmd.input), cmd.threads);
  const auto lines = detail::join_all(hyps);
  if (cmd.output.empty()) {
    for (const auto& l : lines) out << l << '\n';
  } else {
    write_lines(cmd.output, lines);
  }
  return 0;
}

struct EvaluateCommand {
  std::string checkpoint;
  std::string source;
  std::string reference;
  std::string json_out;
  bool by_length = false;
  std::size_t threads = 1;
};

inline int run_evaluate(const EvaluateCommand& cmd, std::ostream& out) {
  const auto run = detail::load_run(cmd.checkpoint);
  const auto sources = detail::read_sentences(cmd.source);
  const auto refs = detail::references_for(cmd.reference, sources.size());
  const auto hyps = translate(run.loaded.model, run.codec(), sources, cmd.threads);
  const auto report = corpus_bleu(hyps, refs);
  out << detail::format_bleu(report) << '\n';
  Json j = to_json(report);
  if (cmd.by_length) {
    const auto buckets = bucketed_bleu(hyps, refs);
    for (const auto& b : buckets) {
      out << std::left << std::setw(9) << b.label << std::right << std::setw(6) << b.sentences << "  "
          << detail::format_bleu(b.report) << '\n';
    }
    j["buckets"] = to_json(buckets);
  }
  if (!cmd.json_out.empty()) write_json_file(cmd.json_out, j);
  return 0;
}

struct AblateCommand {
  std::string checkpoint;
  std::string source;
  std::string reference;
  std::string json_out;
  std::size_t threads = 1;
};

// One row per encoder head: BLEU with that head masked in every encoder layer,
// and its difference to the unmasked model.
inline int run_ablate(const AblateCommand& cmd, std::ostream& out) {
  auto run = detail::load_run(cmd.checkpoint);
  auto& model = run.loaded.model;
  const auto sources = detail::read_sentences(cmd.source);
  const auto refs = detail::references_for(cmd.reference, sources.size());
  const auto codec = run.codec();
  const double full = corpus_bleu(translate(model, codec, sources, cmd.threads), refs).bleu;

  out << std::left << std::setw(6) << "head" << std::setw(18) << "pattern" << std::right << std::setw(9) << "BLEU"
      << std::setw(9) << "delta" << '\n';
  out << std::left << std::setw(6) << "full" << std::setw(18) << "-" << std::right << std::setw(9)
      << detail::fixed(full) << std::setw(9) << detail::fixed(0.0) << '\n';
  Json rows = Json::array();
  rows.push_back({{"head", "full"}, {"pattern", "-"}, {"bleu", full}, {"delta", 0.0}});
  const auto specs = model.config().head_specs();
  for (std::size_t h = 0; h < specs.size(); ++h) {
    model.mask_head(h);
    const double bleu = corpus_bleu(translate(model, codec, sources, cmd.threads), refs).bleu;
    model.clear_head_masks();
    std::string pattern(to_string(specs[h].kind));
    if (specs[h].word_based) pattern += "/word";
    out << std::left << std::setw(6) << (h + 1) << std::setw(18) << pattern << std::right << std::setw(9)
        << detail::fixed(bleu) << std::setw(9) << detail::fixed(bleu - full) << '\n';
    rows.push_back({{"head", h + 1}, {"pattern", pattern}, {"bleu", bleu}, {"delta", bleu - full}});
  }
  if (!cmd.json_out.empty()) write_json_file(cmd.json_out, Json{{"bleu", full}, {"ablation", rows}});
  return 0;
}

struct ScoreContrastiveCommand {
  std::string checkpoint;
  std::string fixture;
  std::string json_out;
  bool by_attribute = false;
  std::size_t threads = 1;
};

inline int run_score_contrastive(const ScoreContrastiveCommand& cmd, std::ostream& out) {
  const auto run = detail::load_run(cmd.checkpoint);
  const auto items = read_contrastive_fixture(cmd.fixture);
  const auto scored = score_contrastive(run.loaded.model, run.codec(), items, cmd.threads);
  const auto report = contrastive_accuracy(scored, cmd.by_attribute);
  out << "accuracy = " << detail::fixed(report.accuracy(), 4) << " (" << report.overall.correct << "/"
      << report.overall.total << ")\n";
  for (const auto& [attr, cell] : report.by_attribute) {
    out << "attribute " << attr << ": " << detail::fixed(cell.accuracy(), 4) << " (" << cell.correct << "/"
        << cell.total << ")\n";
  }
  if (!cmd.json_out.empty()) write_json_file(cmd.json_out, to_json(report));
  return 0;
}

struct ParamsCommand {
  std::string config_file;
  std::string heads;
  std::optional<std::size_t> d_model, d_ff, enc_layers, dec_layers, src_vocab, tgt_vocab;
};

inline ModelConfig params_config(const ParamsCommand& cmd) {
  ModelConfig config;
  config.src_vocab = 32000;
  config.tgt_vocab = 32000;
  if (!cmd.config_file.empty()) {
    const auto j = read_json_file(cmd.config_file);
    if (j.contains("model")) {
      RunConfig run;
      run.model = config;
      config = run_config_from_json(j, run).model;
    } else {
      config = model_config_from_json(j, config);
    }
  }
  if (!cmd.heads.empty()) config.apply_shorthand(cmd.heads);
  if (cmd.d_model) config.d_model = *cmd.d_model;
  if (cmd.d_ff) config.d_ff = *cmd.d_ff;
  if (cmd.enc_layers) config.enc_layers = *cmd.enc_layers;
  if (cmd.dec_layers) config.dec_layers = *cmd.dec_layers;
  if (cmd.src_vocab) config.src_vocab = *cmd.src_vocab;
  if (cmd.tgt_vocab) config.tgt_vocab = *cmd.tgt_vocab;
  config.validate();
  return config;
}

// Breakdown of the requested configuration followed by every named head
// configuration at the same dimensions, with weight deltas relative to 8L.
inline int run_params(const ParamsCommand& cmd, std::ostream& out) {
  const auto config = params_config(cmd);
  const auto counts = param_count(config);
  out << "component                         parameters\n";
  for (const auto& [name, count] : counts.components) {
    out << std::left << std::setw(32) << name << std::right << std::setw(12) << count << '\n';
  }
  out << std::left << std::setw(32) << "total" << std::right << std::setw(12) << counts.total << '\n';
  out << std::left << std::setw(32) << "  weights" << std::right << std::setw(12) << counts.weights << '\n';
  out << std::left << std::setw(32) << "  biases and norms" << std::right << std::setw(12) << counts.biases << "\n\n";

  auto variant = [&](std::string_view heads) {
    auto c = config;
    c.apply_shorthand(heads);
    if (c.d_model % c.n_heads != 0) return std::optional<ParamCount>{};
    return std::optional<ParamCount>{param_count(c)};
  };
  const auto base = variant("8L");
  out << "enc heads        total        weights      delta weights vs 8L    delta total vs 8L\n";
  for (auto heads : kHeadShorthands) {
    const auto c = variant(heads);
    if (!c) continue;
    const auto dw = static_cast<long long>(base->weights) - static_cast<long long>(c->weights);
    const auto dt = static_cast<long long>(base->total) - static_cast<long long>(c->total);
    out << std::left << std::setw(13) << heads << std::right << std::setw(12) << c->total << std::setw(15)
        << c->weights << std::setw(23) << dw << std::setw(21) << dt << '\n';
  }
  return 0;
}

struct DumpPatternsCommand {
  std::string kind;
  std::optional<std::size_t> length;
  std::string sentence;
  bool word_based = false;
  std::string format = "csv";
  std::string out_file;
};

inline int run_dump_patterns(const DumpPatternsCommand& cmd, std::ostream& out) {
  const auto kind = parse_pattern_kind(cmd.kind);
  if (cmd.length.has_value() == !cmd.sentence.empty()) {
    throw UsageError("dump-patterns needs exactly one of --length or --sentence");
  }
  PatternMatrix m;
  if (cmd.length) {
    if (cmd.word_based) throw UsageError("--word-based needs a segmented --sentence");
    m = build_token_pattern(kind, *cmd.length);
  } else {
    const auto tokens = tokenize(cmd.sentence);
    m = cmd.word_based ? build_word_pattern(kind, Segmentation::from_subwords(tokens))
                       : build_token_pattern(kind, tokens.size());
  }
  const auto text = dump_pattern(m, cmd.format);
  if (cmd.out_file.empty()) out << text;
  else detail::write_text(cmd.out_file, text);
  return 0;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Transformer translation with fixed encoder attention patterns"};
  app.require_subcommand(1);
  std::size_t threads = 1;
  app.add_option("--threads", threads, "Worker threads for decoding and scoring")->check(CLI::PositiveNumber);

  TrainCommand train_cmd;
  auto* train = app.add_subcommand("train", "Train a model and write it to --out");
  train->add_option("--config", train_cmd.config_file, "JSON run configuration")->check(CLI::ExistingFile);
  train->add_option("--out", train_cmd.out_dir, "Output directory")->required();
  train->add_option("--heads", train_cmd.heads, "Encoder heads: 8L, 7Ftoken+1L, 7Fword+1L, 8Ftoken or 1L");
  train->add_option("--enc-layers", train_cmd.enc_layers);
  train->add_option("--dec-layers", train_cmd.dec_layers);
  train->add_option("--d-model", train_cmd.d_model);
  train->add_option("--d-ff", train_cmd.d_ff);
  train->add_option("--max-len", train_cmd.max_len, "Longest sentence the model accepts");
  train->add_option("--dropout", train_cmd.dropout);
  train->add_option("--seed", train_cmd.seed);
  train->add_option("--task", train_cmd.task, "Synthetic task: copy, reverse or lexical-translate");
  train->add_option("--train-src", train_cmd.train_src)->check(CLI::ExistingFile);
  train->add_option("--train-tgt", train_cmd.train_tgt)->check(CLI::ExistingFile);
  train->add_option("--vocab-size", train_cmd.vocab_size, "Synthetic vocabulary size");
  train->add_option("--sentences", train_cmd.sentences, "Synthetic training sentences");
  train->add_option("--test-sentences", train_cmd.test_sentences, "Synthetic held-out sentences");
  train->add_option("--len-min", train_cmd.len_min);
  train->add_option("--len-max", train_cmd.len_max);
  train->add_flag("--subword-split", train_cmd.subword_split, "Split long source words into @@-marked chunks");
  train->add_option("--steps", train_cmd.steps);
  train->add_option("--lr", train_cmd.lr);
  train->add_option("--batch-tokens", train_cmd.batch_tokens);
  train->add_option("--log-every", train_cmd.log_every);
  train->add_option("--stop-at-accuracy", train_cmd.stop_at_accuracy, "Stop once teacher-forced accuracy reaches this");
  train->add_option("--precision", train_cmd.precision, "f64 (default) or f32");

  TranslateCommand translate_cmd;
  auto* translate_sub = app.add_subcommand("translate", "Greedy-decode a file of source sentences");
  translate_sub->add_option("--checkpoint", translate_cmd.checkpoint)->required();
  translate_sub->add_option("--input", translate_cmd.input)->required()->check(CLI::ExistingFile);
  translate_sub->add_option("--output", translate_cmd.output);

  EvaluateCommand evaluate_cmd;
  auto* evaluate = app.add_subcommand("evaluate", "Translate a test set and report BLEU");
  evaluate->add_option("--checkpoint", evaluate_cmd.checkpoint)->required();
  evaluate->add_option("--src", evaluate_cmd.source)->required()->check(CLI::ExistingFile);
  evaluate->add_option("--ref", evaluate_cmd.reference)->required()->check(CLI::ExistingFile);
  evaluate->add_option("--json", evaluate_cmd.json_out, "Write a JSON report");
  evaluate->add_flag("--by-length", evaluate_cmd.by_length, "Also report BLEU by reference length");

  AblateCommand ablate_cmd;
  auto* ablate = app.add_subcommand("ablate", "BLEU deltas with each encoder head masked");
  ablate->add_option("--checkpoint", ablate_cmd.checkpoint)->required();
  ablate->add_option("--src", ablate_cmd.source)->required()->check(CLI::ExistingFile);
  ablate->add_option("--ref", ablate_cmd.reference)->required()->check(CLI::ExistingFile);
  ablate->add_option("--json", ablate_cmd.json_out);

  ScoreContrastiveCommand score_cmd;
  auto* score = app.add_subcommand("score-contrastive", "Accuracy on a contrastive fixture");
  score->add_option("--checkpoint", score_cmd.checkpoint)->required();
  score->add_option("--fixture", score_cmd.fixture)->required()->check(CLI::ExistingFile);
  score->add_option("--json", score_cmd.json_out);
  score->add_flag("--by-attribute", score_cmd.by_attribute);

  ParamsCommand params_cmd;
  auto* params = app.add_subcommand("params", "Parameter counts per component and head configuration");
  params->add_option("--config", params_cmd.config_file)->check(CLI::ExistingFile);
  params->add_option("--heads", params_cmd.heads);
  params->add_option("--d-model", params_cmd.d_model);
  params->add_option("--d-ff", params_cmd.d_ff);
  params->add_option("--enc-layers", params_cmd.enc_layers);
  params->add_option("--dec-layers", params_cmd.dec_layers);
  params->add_option("--src-vocab", params_cmd.src_vocab);
  params->add_option("--tgt-vocab", params_cmd.tgt_vocab);

  DumpPatternsCommand dump_cmd;
  auto* dump = app.add_subcommand("dump-patterns", "Print a fixed attention pattern as CSV");
  dump->add_option("--kind", dump_cmd.kind)->required();
  dump->add_option("--length", dump_cmd.length);
  dump->add_option("--sentence", dump_cmd.sentence, "Space-separated subwords, @@ marks continuation");
  dump->add_flag("--word-based", dump_cmd.word_based);
  dump->add_option("--format", dump_cmd.format);
  dump->add_option("--out", dump_cmd.out_file);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kUsage);
  }

  translate_cmd.threads = evaluate_cmd.threads = ablate_cmd.threads = score_cmd.threads = threads;
  try {
    if (*train) return run_train(train_cmd, out, err);
    if (*translate_sub) return run_translate(translate_cmd, out);
    if (*evaluate) return run_evaluate(evaluate_cmd, out);
    if (*ablate) return run_ablate(ablate_cmd, out);
    if (*score) return run_score_contrastive(score_cmd, out);
    if (*params) return run_params(params_cmd, out);
    if (*dump) return run_dump_patterns(dump_cmd, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(e.exit_code());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kData);
  }
  return static_cast<int>(ExitCode::kUsage);
}

}  // namespace fixattn::cli
