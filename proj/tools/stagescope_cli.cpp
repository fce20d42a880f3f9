// stagescope <kind> --model <dir> --corpus <file> --tokens N --window 512 --seed S --out <dir> [kind flags]
// stagescope tokenize --vocab <dir> --in <text> --out <file.u32>
//
// Exit codes: 0 success, 2 validation error, 1 any other failure.

#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <sstream>

#include "stagescope/error.hpp"
#include "stagescope/runner.hpp"
#include "stagescope/tokenizer.hpp"

namespace {

using stagescope::ExperimentConfig;

struct CliOptions {
  std::string config, model, model_config, vocab, corpus, corpus_format, out, schedule, thresholds, wic;
  std::size_t tokens = 0, window = 0, threads = 0, per_class = 0, max_per_class = 0;
  std::uint64_t seed = 0;
  int layer = 0, block_len = 0, times = 0;
  std::vector<std::size_t> k, ensemble_k;
  bool baseline_row = false, include_embedding = false, shuffle_labels = false;
};

void add_experiment_options(CLI::App& app, CliOptions& o) {
  app.add_option("--config", o.config, "JSON experiment config; flags override its fields");
  app.add_option("--model", o.model, "directory with config.json and model.safetensors");
  app.add_option("--model-config", o.model_config, "model config (default <model>/config.json)");
  app.add_option("--vocab", o.vocab, "directory with vocab.json and merges.txt (default <model>)");
  app.add_option("--corpus", o.corpus, "raw text or little-endian u32 token file");
  app.add_option("--corpus-format", o.corpus_format, "auto, text or u32");
  app.add_option("--tokens", o.tokens, "token budget");
  app.add_option("--window", o.window, "window length");
  app.add_option("--seed", o.seed, "sampling seed");
  app.add_option("--out", o.out, "output directory");
  app.add_option("--threads", o.threads, "worker threads (0 = all cores)");
  app.add_option("--layer", o.layer, "restrict to one layer (intervene, swapsim)");
  app.add_option("--schedule", o.schedule, "single schedule, e.g. drop:3 or custom:0,2,1 (intervene)");
  app.add_flag("--baseline-row", o.baseline_row, "add the identity self-comparison row (intervene)");
  app.add_option("--block-len", o.block_len, "repeated block length (repeat)");
  app.add_option("--times", o.times, "extra repetitions per block (repeat)");
  app.add_option("--k", o.k, "locality offsets (locality)")->delimiter(',');
  app.add_option("--thresholds", o.thresholds, "kurt,skew classification thresholds (neurons, probe-ing)");
  app.add_flag("--include-embedding", o.include_embedding, "include the embedding snapshot (cka)");
  app.add_option("--per-class", o.per_class, "neurons per class (probe-ing)");
  app.add_option("--ensemble-k", o.ensemble_k, "ensemble sizes (probe-ing)")->delimiter(',');
  app.add_option("--max-per-class", o.max_per_class, "example cap per class (probe-ing, subjoiner)");
  app.add_option("--wic", o.wic, "WiC tab-separated file (probe-wic)");
  app.add_flag("--shuffle-labels", o.shuffle_labels, "permutation control (probe-wic)");
}

ExperimentConfig build_config(const CLI::App& app, const CliOptions& o, std::string_view kind) {
  ExperimentConfig cfg = o.config.empty() ? ExperimentConfig{} : ExperimentConfig::load(o.config);
  cfg.kind = stagescope::parse_kind(kind);
  auto given = [&](const char* name) { return app.count(name) > 0; };
  if (given("--model")) cfg.model = o.model;
  if (given("--model-config")) cfg.model_config = o.model_config;
  if (given("--vocab")) cfg.vocab = o.vocab;
  if (given("--corpus")) cfg.corpus = o.corpus;
  if (given("--corpus-format")) {
    if (o.corpus_format == "auto") cfg.corpus_format = stagescope::CorpusFormat::automatic;
    else if (o.corpus_format == "text") cfg.corpus_format = stagescope::CorpusFormat::text;
    else if (o.corpus_format == "u32") cfg.corpus_format = stagescope::CorpusFormat::u32;
    else throw stagescope::ValidationError("--corpus-format must be auto, text or u32");
  }
  if (given("--tokens")) cfg.tokens = o.tokens;
  if (given("--window")) cfg.window = o.window;
  if (given("--seed")) cfg.seed = o.seed;
  if (given("--out")) cfg.out = o.out;
  if (given("--threads")) cfg.threads = o.threads;
  if (given("--layer")) cfg.layer = o.layer;
  if (given("--schedule")) cfg.schedule = o.schedule;
  if (given("--baseline-row")) cfg.baseline_row = o.baseline_row;
  if (given("--block-len")) cfg.block_len = o.block_len;
  if (given("--times")) cfg.times = o.times;
  if (given("--k")) cfg.k = o.k;
  if (given("--thresholds")) {
    std::istringstream in(o.thresholds);
    double kurt = 0, skew = 0;
    char comma = 0;
    if (!(in >> kurt >> comma >> skew) || comma != ',' || !(in >> std::ws).eof()) {
      throw stagescope::ValidationError("--thresholds expects kurt,skew, got '" + o.thresholds + "'");
    }
    cfg.thresholds = {kurt, skew};
  }
  if (given("--include-embedding")) cfg.include_embedding = o.include_embedding;
  if (given("--per-class")) cfg.per_class = o.per_class;
  if (given("--ensemble-k")) cfg.ensemble_k = o.ensemble_k;
  if (given("--max-per-class")) cfg.max_per_class = o.max_per_class;
  if (given("--wic")) cfg.wic = o.wic;
  if (given("--shuffle-labels")) cfg.shuffle_labels = o.shuffle_labels;
  return cfg;
}

int tokenize(const std::string& vocab_dir, const std::string& in_path, const std::string& out_path) {
  const auto vocab = stagescope::BpeVocab::load_dir(vocab_dir);
  std::ifstream in(in_path, std::ios::binary);
  if (!in) throw stagescope::ValidationError("cannot open " + in_path);
  std::ostringstream text;
  text << in.rdbuf();
  const auto ids = vocab.encode(text.str()).ids;
  stagescope::save_pretokenized(out_path, ids);
  std::cout << ids.size() << " tokens -> " << out_path << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stagescope: layer-schedule interventions and depth diagnostics for GPT-2-class models"};
  app.require_subcommand(1);
  CliOptions opts;
  std::vector<CLI::App*> kinds;
  for (const char* kind : {"intervene", "logitlens", "cka", "neurons", "probe-ing", "probe-wic", "subjoiner", "repeat",
                           "locality", "swapsim"}) {
    auto* sub = app.add_subcommand(kind);
    add_experiment_options(*sub, opts);
    kinds.push_back(sub);
  }
  std::string tok_vocab, tok_in, tok_out;
  auto* tok = app.add_subcommand("tokenize", "write a raw-text corpus as u32 token ids");
  tok->add_option("--vocab", tok_vocab, "directory with vocab.json and merges.txt")->required();
  tok->add_option("--in", tok_in, "UTF-8 text file")->required();
  tok->add_option("--out", tok_out, "output .u32 file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (tok->parsed()) return tokenize(tok_vocab, tok_in, tok_out);
    for (auto* sub : kinds) {
      if (!sub->parsed()) continue;
      const auto cfg = build_config(*sub, opts, sub->get_name());
      const auto manifest = stagescope::run_experiment(cfg);
      for (const auto& f : manifest.files) std::cout << (cfg.out / f).string() << '\n';
      std::cout << (cfg.out / "manifest.json").string() << '\n';
    }
    return 0;
  } catch (const stagescope::ValidationError& e) {
    std::cerr << "stagescope: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "stagescope: " << e.what() << '\n';
    return 1;
  }
}
