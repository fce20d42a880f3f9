#include "stagescope/runner.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <exception>
#include <fstream>
#include <mutex>
#include <nlohmann/json.hpp>
#include <sstream>
#include <thread>

#include "stagescope/error.hpp"

namespace stagescope {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr std::pair<ExperimentKind, std::string_view> kKindNames[] = {
    {ExperimentKind::intervene, "intervene"}, {ExperimentKind::logitlens, "logitlens"},
    {ExperimentKind::cka, "cka"},             {ExperimentKind::neurons, "neurons"},
    {ExperimentKind::probe_ing, "probe-ing"}, {ExperimentKind::probe_wic, "probe-wic"},
    {ExperimentKind::subjoiner, "subjoiner"}, {ExperimentKind::repeat, "repeat"},
    {ExperimentKind::locality, "locality"},   {ExperimentKind::swapsim, "swapsim"},
};

std::string_view to_string(CorpusFormat f) {
  switch (f) {
    case CorpusFormat::automatic: return "auto";
    case CorpusFormat::text: return "text";
    case CorpusFormat::u32: return "u32";
  }
  return "auto";
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out.flush()) throw Error("failed writing " + path.string());
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

[[noreturn]] void bad_field(const std::string& field, const std::string& why) {
  throw ValidationError("config field '" + field + "': " + why);
}

fs::path resolve(const fs::path& p, const fs::path& base) {
  return p.empty() || p.is_absolute() || base.empty() ? p : base / p;
}

// Rethrows the in-flight exception with `prefix` prepended, keeping its
// type so exit codes survive.
[[noreturn]] void rethrow_with_context(const std::string& prefix) {
  try {
    throw;
  } catch (const ValidationError& e) {
    throw ValidationError(prefix + e.what());
  } catch (const FormatError& e) {
    throw FormatError(prefix + e.what());
  } catch (const ShapeError& e) {
    throw ShapeError(prefix + e.what());
  } catch (const UnsupportedError& e) {
    throw UnsupportedError(prefix + e.what());
  } catch (const Error& e) {
    throw Error(prefix + e.what());
  }
}

std::string window_context(std::size_t i) { return "window " + std::to_string(i) + ": "; }

}  // namespace

std::string_view to_string(ExperimentKind kind) {
  for (auto [k, name] : kKindNames)
    if (k == kind) return name;
  return "intervene";
}

ExperimentKind parse_kind(std::string_view name) {
  std::string accepted;
  for (auto [k, n] : kKindNames) {
    if (n == name) return k;
    accepted += (accepted.empty() ? "" : ", ") + std::string(n);
  }
  throw ValidationError("unknown experiment kind '" + std::string(name) + "'; expected one of " + accepted);
}

void ExperimentConfig::validate() const {
  if (model.empty()) bad_field("model", "required");
  if (!fs::is_directory(model)) bad_field("model", "directory " + model.string() + " does not exist");
  if (!fs::exists(model / "model.safetensors")) bad_field("model", "no model.safetensors in " + model.string());
  const fs::path cfg_path = model_config.empty() ? model / "config.json" : model_config;
  if (!fs::exists(cfg_path)) bad_field("model_config", cfg_path.string() + " does not exist");
  if (out.empty()) bad_field("out", "required");
  if (window == 0) bad_field("window", "must be at least 1");
  if (tokens < window) {
    bad_field("tokens", "budget " + std::to_string(tokens) + " is smaller than the window " + std::to_string(window));
  }
  const bool needs_corpus = kind != ExperimentKind::probe_wic;
  if (needs_corpus) {
    if (corpus.empty()) bad_field("corpus", "required");
    if (!fs::is_regular_file(corpus)) bad_field("corpus", corpus.string() + " does not exist");
  }
  const bool needs_vocab = kind == ExperimentKind::probe_ing || kind == ExperimentKind::probe_wic ||
                           kind == ExperimentKind::subjoiner;
  const fs::path vocab_dir = vocab.empty() ? model : vocab;
  if (needs_vocab && (!fs::exists(vocab_dir / "vocab.json") || !fs::exists(vocab_dir / "merges.txt"))) {
    bad_field("vocab", "vocab.json and merges.txt not found in " + vocab_dir.string());
  }
  if (layer && *layer < 0) bad_field("layer", "must be non-negative");
  if (block_len < 1) bad_field("block_len", "must be at least 1");
  if (times < 0) bad_field("times", "must be non-negative");
  if (k.empty()) bad_field("k", "needs at least one value");
  for (auto v : k)
    if (v == 0) bad_field("k", "values must be at least 1");
  for (auto v : ensemble_k)
    if (v == 0) bad_field("ensemble_k", "values must be at least 1");
  if (per_class == 0) bad_field("per_class", "must be at least 1");
  if (!(thresholds.kurt_min >= 0.0)) bad_field("thresholds", "kurtosis threshold must be non-negative");
  if (!(thresholds.skew_min >= 0.0)) bad_field("thresholds", "skew threshold must be non-negative");
  if (!(probe.lr > 0.0)) bad_field("probe_lr", "must be positive");
  if (probe.epochs < 1) bad_field("probe_epochs", "must be at least 1");
  if (!(probe.l2 >= 0.0)) bad_field("probe_l2", "must be non-negative");
  if (kind == ExperimentKind::probe_wic) {
    if (wic.empty()) bad_field("wic", "required for probe-wic");
    if (!fs::is_regular_file(wic)) bad_field("wic", wic.string() + " does not exist");
  }
}

ExperimentConfig ExperimentConfig::parse(std::string_view json_text, const fs::path& base_dir) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("experiment config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("experiment config must be a JSON object");
  ExperimentConfig c;
  auto count = [](const json& v, const std::string& key) -> std::size_t {
    if (!v.is_number_unsigned()) bad_field(key, "expected a non-negative integer");
    return v.get<std::size_t>();
  };
  auto integer = [](const json& v, const std::string& key) -> int {
    if (!v.is_number_integer()) bad_field(key, "expected an integer");
    return v.get<int>();
  };
  auto real = [](const json& v, const std::string& key) -> double {
    if (!v.is_number()) bad_field(key, "expected a number");
    return v.get<double>();
  };
  auto text = [](const json& v, const std::string& key) -> std::string {
    if (!v.is_string()) bad_field(key, "expected a string");
    return v.get<std::string>();
  };
  auto flag = [](const json& v, const std::string& key) -> bool {
    if (!v.is_boolean()) bad_field(key, "expected true or false");
    return v.get<bool>();
  };
  auto counts = [&](const json& v, const std::string& key) {
    if (!v.is_array()) bad_field(key, "expected an array of integers");
    std::vector<std::size_t> out;
    for (const auto& e : v) out.push_back(count(e, key));
    return out;
  };
  for (const auto& [key, v] : j.items()) {
    if (key == "kind") {
      c.kind = parse_kind(text(v, key));
    } else if (key == "model") {
      c.model = resolve(text(v, key), base_dir);
    } else if (key == "model_config") {
      c.model_config = resolve(text(v, key), base_dir);
    } else if (key == "vocab") {
      c.vocab = resolve(text(v, key), base_dir);
    } else if (key == "corpus") {
      c.corpus = resolve(text(v, key), base_dir);
    } else if (key == "corpus_format") {
      const auto f = text(v, key);
      if (f == "auto") c.corpus_format = CorpusFormat::automatic;
      else if (f == "text") c.corpus_format = CorpusFormat::text;
      else if (f == "u32") c.corpus_format = CorpusFormat::u32;
      else bad_field(key, "expected auto, text or u32");
    } else if (key == "tokens") {
      c.tokens = count(v, key);
    } else if (key == "window") {
      c.window = count(v, key);
    } else if (key == "seed") {
      c.seed = count(v, key);
    } else if (key == "out") {
      c.out = resolve(text(v, key), base_dir);
    } else if (key == "layer") {
      if (!v.is_null()) c.layer = integer(v, key);
    } else if (key == "schedule") {
      c.schedule = text(v, key);
    } else if (key == "baseline_row") {
      c.baseline_row = flag(v, key);
    } else if (key == "block_len") {
      c.block_len = integer(v, key);
    } else if (key == "times") {
      c.times = integer(v, key);
    } else if (key == "k") {
      c.k = counts(v, key);
    } else if (key == "kurt_min") {
      c.thresholds.kurt_min = real(v, key);
    } else if (key == "skew_min") {
      c.thresholds.skew_min = real(v, key);
    } else if (key == "include_embedding") {
      c.include_embedding = flag(v, key);
    } else if (key == "per_class") {
      c.per_class = count(v, key);
    } else if (key == "ensemble_k") {
      c.ensemble_k = counts(v, key);
    } else if (key == "max_per_class") {
      c.max_per_class = count(v, key);
    } else if (key == "wic") {
      c.wic = resolve(text(v, key), base_dir);
    } else if (key == "shuffle_labels") {
      c.shuffle_labels = flag(v, key);
    } else if (key == "probe_lr") {
      c.probe.lr = real(v, key);
    } else if (key == "probe_epochs") {
      c.probe.epochs = integer(v, key);
    } else if (key == "probe_l2") {
      c.probe.l2 = real(v, key);
    } else if (key == "threads") {
      c.threads = count(v, key);
    } else {
      throw ValidationError("unknown config field '" + key + "'");
    }
  }
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  return parse(read_file(path), path.parent_path());
}

std::string ExperimentConfig::to_json() const {
  json j;
  j["kind"] = to_string(kind);
  j["model"] = model.generic_string();
  j["model_config"] = model_config.generic_string();
  j["vocab"] = vocab.generic_string();
  j["corpus"] = corpus.generic_string();
  j["corpus_format"] = to_string(corpus_format);
  j["tokens"] = tokens;
  j["window"] = window;
  j["seed"] = seed;
  j["out"] = out.generic_string();
  j["layer"] = layer ? json(*layer) : json(nullptr);
  j["schedule"] = schedule;
  j["baseline_row"] = baseline_row;
  j["block_len"] = block_len;
  j["times"] = times;
  j["k"] = k;
  j["kurt_min"] = thresholds.kurt_min;
  j["skew_min"] = thresholds.skew_min;
  j["include_embedding"] = include_embedding;
  j["per_class"] = per_class;
  j["ensemble_k"] = ensemble_k;
  j["max_per_class"] = max_per_class;
  j["wic"] = wic.generic_string();
  j["shuffle_labels"] = shuffle_labels;
  j["probe_lr"] = probe.lr;
  j["probe_epochs"] = probe.epochs;
  j["probe_l2"] = probe.l2;
  return j.dump(2);
}

std::string ExperimentConfig::hash() const { return fnv1a_hex(to_json()); }

std::vector<std::vector<TokenId>> make_windows(std::span<const TokenId> corpus, std::size_t budget,
                                               std::size_t window) {
  if (window == 0) throw ValidationError("window length must be at least 1");
  const std::size_t usable = std::min(budget, corpus.size());
  std::vector<std::vector<TokenId>> out;
  for (std::size_t start = 0; start + window <= usable; start += window) {
    out.emplace_back(corpus.begin() + static_cast<std::ptrdiff_t>(start),
                     corpus.begin() + static_cast<std::ptrdiff_t>(start + window));
  }
  return out;
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n && !failed; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!error) error = std::current_exception();
            failed = true;
          }
        }
      });
    }
  }
  if (error) std::rethrow_exception(error);
}

std::vector<LayerSchedule> intervention_schedules(int n_layers, std::optional<int> layer, bool baseline_row) {
  if (layer && (*layer < 0 || *layer >= n_layers)) {
    throw ValidationError("layer " + std::to_string(*layer) + " out of range for a " + std::to_string(n_layers) +
                          "-layer model");
  }
  std::vector<LayerSchedule> out;
  if (baseline_row) out.push_back(LayerSchedule::identity(n_layers));
  for (int l = 0; l + 1 < n_layers; ++l)
    if (!layer || *layer == l) out.push_back(LayerSchedule::swap(n_layers, l));
  for (int l = 0; l < n_layers; ++l)
    if (!layer || *layer == l) out.push_back(LayerSchedule::drop(n_layers, l));
  return out;
}

namespace {

std::string row_kind(const LayerSchedule& s) {
  return s.kind() == ScheduleKind::custom ? s.notation() : std::string(to_string(s.kind()));
}

int row_layer(const LayerSchedule& s) {
  if (s.params().layer) return *s.params().layer;
  if (s.params().block_start) return *s.params().block_start;
  return -1;
}

void check_windows(const std::vector<std::vector<TokenId>>& windows) {
  if (windows.empty()) throw ValidationError("the token budget yields no complete window");
}

}  // namespace

InterventionReport intervention_sweep(const TransformerWeights& w, const std::vector<std::vector<TokenId>>& windows,
                                      std::span<const LayerSchedule> schedules, std::size_t threads,
                                      SweepStats* stats) {
  check_windows(windows);
  for (const auto& s : schedules) s.validate(w.config.n_layers);
  const auto identity = LayerSchedule::identity(w.config.n_layers);
  std::vector<std::vector<InterventionAccumulator>> acc(windows.size(),
                                                        std::vector<InterventionAccumulator>(schedules.size()));
  parallel_for(windows.size(), threads, [&](std::size_t i) {
    try {
      const auto& tokens = windows[i];
      CaptureFlags capture;
      const ForwardTrace trace = forward(w, tokens, identity, capture);
      if (stats) ++stats->baseline_runs;
      const BaselineWindow base = BaselineWindow::from(trace.logits);
      for (std::size_t s = 0; s < schedules.size(); ++s) {
        const auto& steps = schedules[s].steps();
        const std::size_t prefix = schedules[s].common_prefix(identity);
        const Matrix logits = forward_from(w, trace.residuals[prefix],
                                           std::span<const int>(steps).subspan(prefix));
        if (stats) ++stats->intervened_runs;
        acc[i][s] = compare_window(base, logits, tokens);
      }
    } catch (const Error&) {
      rethrow_with_context(window_context(i));
    }
  });
  if (stats) stats->windows = windows.size();

  InterventionReport report;
  for (std::size_t s = 0; s < schedules.size(); ++s) {
    InterventionAccumulator total;
    for (std::size_t i = 0; i < windows.size(); ++i) total.merge(acc[i][s]);
    report.rows.push_back(InterventionRow::from(row_kind(schedules[s]), row_layer(schedules[s]), total));
  }
  return report;
}

RepeatSweep repeat_sweep(const TransformerWeights& w, const std::vector<std::vector<TokenId>>& windows, int block_len,
                         int times, std::size_t threads, SweepStats* stats) {
  check_windows(windows);
  const int L = w.config.n_layers;
  if (block_len < 1 || block_len > L) {
    throw ValidationError("repeat block length " + std::to_string(block_len) + " must be in [1, " +
                          std::to_string(L) + "]");
  }
  if (times < 0) throw ValidationError("repeat count must be non-negative");
  std::vector<LayerSchedule> schedules{LayerSchedule::identity(L)};
  for (int start = 0; start + block_len <= L; ++start) {
    schedules.push_back(LayerSchedule::repeat(L, start, block_len, times));
  }

  struct WindowResult {
    std::vector<InterventionAccumulator> acc;
    std::vector<std::vector<double>> norms;  // [schedule][step]
  };
  std::vector<WindowResult> results(windows.size());
  parallel_for(windows.size(), threads, [&](std::size_t i) {
    try {
      const auto& tokens = windows[i];
      CaptureFlags capture;
      capture.residuals = false;
      capture.mlp_norms = true;
      auto& r = results[i];
      std::optional<BaselineWindow> base;
      for (std::size_t s = 0; s < schedules.size(); ++s) {
        const ForwardTrace trace = forward(w, tokens, schedules[s], capture);
        if (s == 0) {
          base = BaselineWindow::from(trace.logits);
          if (stats) ++stats->baseline_runs;
        } else if (stats) {
          ++stats->intervened_runs;
        }
        r.acc.push_back(compare_window(*base, trace.logits, tokens));
        r.norms.push_back(mlp_norms(trace));
      }
    } catch (const Error&) {
      rethrow_with_context(window_context(i));
    }
  });
  if (stats) stats->windows = windows.size();

  RepeatSweep out;
  for (std::size_t s = 0; s < schedules.size(); ++s) {
    InterventionAccumulator total;
    for (const auto& r : results) total.merge(r.acc[s]);
    const bool baseline = s == 0;
    out.report.rows.push_back(
        InterventionRow::from(baseline ? "baseline" : "repeat", baseline ? -1 : row_layer(schedules[s]), total));
    const auto& steps = schedules[s].steps();
    for (std::size_t step = 0; step < steps.size(); ++step) {
      double sum = 0.0;
      for (const auto& r : results) sum += r.norms[s][step];
      out.mlp_norms.push_back({schedules[s].notation(), step, steps[step], sum / static_cast<double>(results.size())});
    }
  }
  return out;
}

std::vector<LensRow> logit_lens_sweep(const TransformerWeights& w, const std::vector<std::vector<TokenId>>& windows,
                                      std::size_t threads, SweepStats* stats) {
  check_windows(windows);
  const std::size_t depth = static_cast<std::size_t>(w.config.n_layers) + 1;
  struct Sums {
    std::vector<double> entropy, kl;
    std::size_t n = 0;
  };
  std::vector<Sums> sums(windows.size());
  const auto identity = LayerSchedule::identity(w.config.n_layers);
  parallel_for(windows.size(), threads, [&](std::size_t i) {
    try {
      const ForwardTrace trace = forward(w, windows[i], identity, CaptureFlags{});
      if (stats) ++stats->baseline_runs;
      const BaselineWindow final_dist = BaselineWindow::from(trace.logits);
      auto& s = sums[i];
      s.entropy.assign(depth, 0.0);
      s.kl.assign(depth, 0.0);
      s.n = trace.logits.rows();
      for (std::size_t l = 0; l < depth; ++l) {
        const Matrix lens = unembed(w, trace.residuals[l]);
        for (std::size_t t = 0; t < lens.rows(); ++t) {
          const double norm = log_sum_exp(lens.row(t));
          s.entropy[l] += entropy_from_logits(lens.row(t), norm);
          s.kl[l] += kl_from_logits(final_dist.logits.row(t), final_dist.log_norm[t], lens.row(t), norm);
        }
      }
    } catch (const Error&) {
      rethrow_with_context(window_context(i));
    }
  });
  if (stats) stats->windows = windows.size();
  std::vector<LensRow> rows(depth);
  for (std::size_t l = 0; l < depth; ++l) {
    double ent = 0.0, kl = 0.0;
    std::size_t n = 0;
    for (const auto& s : sums) {
      ent += s.entropy[l];
      kl += s.kl[l];
      n += s.n;
    }
    rows[l] = {static_cast<int>(l), ent / static_cast<double>(n), kl / static_cast<double>(n), n};
  }
  return rows;
}

std::vector<LocalityRow> locality_sweep(const TransformerWeights& w, const std::vector<std::vector<TokenId>>& windows,
                                        std::span<const std::size_t> ks, std::size_t threads) {
  check_windows(windows);
  if (ks.empty()) throw ValidationError("locality needs at least one k");
  const std::size_t L = w.config.n_layers;
  std::vector<std::vector<std::vector<double>>> per_window(windows.size());  // [window][k][layer]
  const auto identity = LayerSchedule::identity(w.config.n_layers);
  CaptureFlags capture;
  capture.residuals = false;
  capture.logits = false;
  capture.attention = true;
  parallel_for(windows.size(), threads, [&](std::size_t i) {
    try {
      const ForwardTrace trace = forward(w, windows[i], identity, capture);
      for (std::size_t k : ks) per_window[i].push_back(attention_locality(trace, k));
    } catch (const Error&) {
      rethrow_with_context(window_context(i));
    }
  });
  std::vector<LocalityRow> rows;
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t ki = 0; ki < ks.size(); ++ki) {
      double sum = 0.0;
      for (const auto& pw : per_window) sum += pw[ki][l];
      rows.push_back({static_cast<int>(l), ks[ki], sum / static_cast<double>(per_window.size())});
    }
  }
  return rows;
}

std::vector<SwapSimRow> swapsim_sweep(const TransformerWeights& w, const std::vector<std::vector<TokenId>>& windows,
                                      std::optional<int> layer, std::size_t threads) {
  check_windows(windows);
  const int L = w.config.n_layers;
  if (L < 2) throw ValidationError("swap similarity needs at least 2 layers");
  if (layer && (*layer < 0 || *layer > L - 2)) {
    throw ValidationError("swap similarity layer " + std::to_string(*layer) + " needs a successor; valid range [0, " +
                          std::to_string(L - 2) + "]");
  }
  std::vector<std::pair<int, Component>> items;
  for (int l = 0; l + 1 < L; ++l) {
    if (layer && *layer != l) continue;
    items.emplace_back(l, Component::attention);
    items.emplace_back(l, Component::mlp);
  }
  std::vector<std::vector<SwapSimilarity>> sims(items.size(), std::vector<SwapSimilarity>(windows.size()));
  parallel_for(items.size() * windows.size(), threads, [&](std::size_t job) {
    const std::size_t item = job / windows.size(), i = job % windows.size();
    sims[item][i] = swap_similarity_triplet(w, windows[i], items[item].first, items[item].second);
  });
  std::vector<SwapSimRow> rows;
  for (std::size_t item = 0; item < items.size(); ++item) {
    SwapSimRow r;
    r.layer = items[item].first;
    r.component = items[item].second;
    double s[3] = {0, 0, 0};
    std::size_t n[3] = {0, 0, 0};
    for (const auto& sim : sims[item]) {
      const double v[3] = {sim.self_sim, sim.index_sim, sim.adjacent_sim};
      for (int c = 0; c < 3; ++c) {
        if (is_defined(v[c])) {
          s[c] += v[c];
          ++n[c];
        }
      }
    }
    r.sim.self_sim = n[0] ? s[0] / n[0] : kUndefined;
    r.sim.index_sim = n[1] ? s[1] / n[1] : kUndefined;
    r.sim.adjacent_sim = n[2] ? s[2] / n[2] : kUndefined;
    r.n_windows = windows.size();
    rows.push_back(r);
  }
  return rows;
}

std::string RunManifest::to_json() const {
  json j;
  j["tool"] = "stagescope";
  j["tool_version"] = tool_version;
  j["kind"] = kind;
  j["config_hash"] = config_hash;
  j["model_identity"] = model_identity;
  j["started_at"] = started_at;
  j["finished_at"] = finished_at;
  j["n_tokens"] = n_tokens;
  j["n_windows"] = n_windows;
  j["baseline_runs"] = baseline_runs;
  j["kl_direction"] = "baseline||intervened";
  j["files"] = files;
  json n = json::object();
  for (const auto& [k, v] : notes) n[k] = v;
  j["notes"] = n;
  return j.dump(2) + "\n";
}

fs::path emit_manifest(const fs::path& out_dir, const RunManifest& manifest) {
  for (const auto& f : manifest.files) {
    if (!fs::is_regular_file(out_dir / f)) throw Error("manifest lists " + f + " but it was not written");
  }
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw Error("cannot create output directory " + out_dir.string() + ": " + ec.message());
  const fs::path path = out_dir / "manifest.json";
  write_file(path, manifest.to_json());
  return path;
}

namespace {

std::vector<TokenId> load_corpus(const ExperimentConfig& cfg, std::size_t vocab_size,
                                 const std::optional<BpeVocab>& vocab) {
  bool pretokenized = cfg.corpus_format == CorpusFormat::u32;
  if (cfg.corpus_format == CorpusFormat::automatic) {
    const auto ext = cfg.corpus.extension();
    pretokenized = ext == ".u32" || ext == ".bin" || ext == ".tok";
  }
  if (pretokenized) {
    try {
      return load_pretokenized(cfg.corpus, vocab_size).ids;
    } catch (const Error&) {
      rethrow_with_context(cfg.corpus.string() + ": ");
    }
  }
  if (!vocab) throw ValidationError("raw-text corpus needs vocab.json and merges.txt");
  return vocab->encode(read_file(cfg.corpus)).ids;
}

std::string model_identity(const ExperimentConfig& cfg, const ModelConfig& mc) {
  const fs::path weights = cfg.model / "model.safetensors";
  return fs::absolute(weights).lexically_normal().generic_string() + " (" +
         std::to_string(fs::file_size(weights)) + " bytes, config " + fnv1a_hex(mc.to_json()) + ")";
}

class ReportWriter {
 public:
  explicit ReportWriter(fs::path dir) : dir_(std::move(dir)) {}

  void write(const std::string& name, const std::string& text) {
    write_file(dir_ / name, text);
    files_.push_back(name);
  }
  const std::vector<std::string>& files() const { return files_; }

 private:
  fs::path dir_;
  std::vector<std::string> files_;
};

std::string probe_row(const std::string& name, double train, double eval) {
  return name + ',' + format_real(train) + ',' + format_real(eval) + '\n';
}

}  // namespace

RunManifest run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  RunManifest manifest;
  manifest.started_at = utc_now();
  manifest.kind = to_string(cfg.kind);
  manifest.config_hash = cfg.hash();

  const ModelConfig mc = ModelConfig::load(cfg.model_config.empty() ? cfg.model / "config.json" : cfg.model_config);
  if (cfg.window > static_cast<std::size_t>(mc.max_positions) && cfg.kind != ExperimentKind::probe_wic) {
    bad_field("window", std::to_string(cfg.window) + " exceeds the model context of " +
                            std::to_string(mc.max_positions));
  }
  const TransformerWeights raw = load_weights(cfg.model / "model.safetensors", mc);
  manifest.model_identity = model_identity(cfg, mc);

  const fs::path vocab_dir = cfg.vocab.empty() ? cfg.model : cfg.vocab;
  std::optional<BpeVocab> vocab;
  if (fs::exists(vocab_dir / "vocab.json") && fs::exists(vocab_dir / "merges.txt")) {
    vocab = BpeVocab::load_dir(vocab_dir);
    if (vocab->size() != static_cast<std::size_t>(mc.vocab_size)) {
      bad_field("vocab", "holds " + std::to_string(vocab->size()) + " tokens, model expects " +
                             std::to_string(mc.vocab_size));
    }
  }
  std::vector<TokenId> corpus;
  if (cfg.kind != ExperimentKind::probe_wic) {
    corpus = load_corpus(cfg, static_cast<std::size_t>(mc.vocab_size), vocab);
    if (corpus.size() > cfg.tokens) corpus.resize(cfg.tokens);
  }
  const auto windows = make_windows(corpus, cfg.tokens, cfg.window);
  if (cfg.kind != ExperimentKind::probe_wic && cfg.kind != ExperimentKind::probe_ing &&
      cfg.kind != ExperimentKind::subjoiner && windows.empty()) {
    bad_field("tokens", "corpus of " + std::to_string(corpus.size()) + " tokens yields no complete window of " +
                            std::to_string(cfg.window));
  }
  manifest.n_tokens = windows.size() * cfg.window;
  manifest.n_windows = windows.size();

  std::error_code ec;
  fs::create_directories(cfg.out, ec);
  if (ec) throw Error("cannot create output directory " + cfg.out.string() + ": " + ec.message());
  ReportWriter out(cfg.out);
  SweepStats stats;
  ProbeHyper hyper = cfg.probe;
  hyper.seed = static_cast<unsigned>(cfg.seed);

  switch (cfg.kind) {
    case ExperimentKind::intervene: {
      std::vector<LayerSchedule> schedules;
      if (!cfg.schedule.empty()) {
        if (cfg.baseline_row) schedules.push_back(LayerSchedule::identity(mc.n_layers));
        schedules.push_back(LayerSchedule::parse(cfg.schedule, mc.n_layers));
      } else {
        schedules = intervention_schedules(mc.n_layers, cfg.layer, cfg.baseline_row);
      }
      const auto report = intervention_sweep(raw, windows, schedules, cfg.threads, &stats);
      std::ostringstream csv;
      report.write_csv(csv);
      out.write("intervene.csv", csv.str());
      manifest.notes.emplace_back("kl_floor", format_real(kProbabilityFloor));
      break;
    }
    case ExperimentKind::repeat: {
      const auto sweep = repeat_sweep(raw, windows, cfg.block_len, cfg.times, cfg.threads, &stats);
      std::ostringstream csv;
      sweep.report.write_csv(csv);
      out.write("repeat.csv", csv.str());
      std::ostringstream norms;
      norms << "schedule,step,block,mean_mlp_norm\n";
      for (const auto& r : sweep.mlp_norms) {
        norms << r.schedule << ',' << r.step << ',' << r.block << ',' << format_real(r.mean_norm) << '\n';
      }
      out.write("mlp_norms.csv", norms.str());
      break;
    }
    case ExperimentKind::logitlens: {
      const auto rows = logit_lens_sweep(raw, windows, cfg.threads, &stats);
      std::ostringstream csv;
      csv << "layer,entropy_nats,kl_to_final_nats,n_tokens\n";
      for (const auto& r : rows) {
        csv << r.layer << ',' << format_real(r.entropy_nats) << ',' << format_real(r.kl_to_final_nats) << ','
            << r.n_tokens << '\n';
      }
      out.write("logitlens.csv", csv.str());
      manifest.notes.emplace_back("layer", "number of blocks applied; 0 is the embedding");
      break;
    }
    case ExperimentKind::cka: {
      const auto m = cka_layer_matrix(raw, corpus, windows.size(), cfg.window, cfg.include_embedding);
      std::ostringstream csv;
      csv << "layer_i,layer_j,cka\n";
      const int offset = m.includes_embedding ? -1 : 0;
      for (std::size_t i = 0; i < m.n_layers; ++i)
        for (std::size_t j = 0; j < m.n_layers; ++j)
          csv << static_cast<int>(i) + offset << ',' << static_cast<int>(j) + offset << ',' << format_real(m(i, j))
              << '\n';
      out.write("cka.csv", csv.str());
      manifest.notes.emplace_back("layer", "residual after block; -1 is the embedding");
      break;
    }
    case ExperimentKind::neurons: {
      const TransformerWeights pre = preprocess(raw);
      auto stats_rows = neuron_stats(pre, cfg.thresholds);
      const auto variance = activation_variance(pre, windows);
      for (auto& s : stats_rows) s.variance_act = variance[s.layer][s.neuron];
      std::ostringstream csv;
      csv << "layer,neuron,skew,excess_kurtosis,variance_act,class\n";
      for (const auto& s : stats_rows) {
        csv << s.layer << ',' << s.neuron << ',' << format_real(s.skew) << ',' << format_real(s.excess_kurtosis)
            << ',' << format_real(s.variance_act) << ',' << to_string(s.cls) << '\n';
      }
      out.write("neurons.csv", csv.str());
      std::ostringstream dens;
      dens << "layer,prediction_frac,suppression_frac\n";
      for (const auto& d : layer_densities(stats_rows, mc.n_layers, mc.d_mlp)) {
        dens << d.layer << ',' << format_real(d.prediction_frac) << ',' << format_real(d.suppression_frac) << '\n';
      }
      out.write("neuron_density.csv", dens.str());
      break;
    }
    case ExperimentKind::probe_ing: {
      if (!vocab) bad_field("vocab", "probe-ing needs vocab.json and merges.txt");
      const IngDataset data = build_ing_dataset(corpus, *vocab, 24, static_cast<unsigned>(cfg.seed), cfg.max_per_class);
      const TransformerWeights pre = preprocess(raw);
      const auto stats_rows = neuron_stats(pre, cfg.thresholds);
      const auto variance = activation_variance(pre, data.windows);
      const auto neurons = select_probe_neurons(stats_rows, variance, cfg.per_class);
      if (neurons.empty()) throw ValidationError("no prediction or suppression neurons at these thresholds");
      const ProbeDataset all = extract_neuron_features(pre, data.windows, data.labels, neurons);
      std::vector<ProbeCandidate> candidates(neurons.size());
      parallel_for(neurons.size(), cfg.threads, [&](std::size_t j) {
        auto& c = candidates[j];
        c.id = neurons[j].layer * mc.d_mlp + neurons[j].neuron;
        c.name = "L" + std::to_string(neurons[j].layer) + "N" + std::to_string(neurons[j].neuron);
        c.data.labels = all.labels;
        c.data.feature_spec = c.name;
        c.data.features = Matrix(all.size(), 1);
        for (std::size_t r = 0; r < all.size(); ++r) c.data.features(r, 0) = all.features(r, j);
        c.probe = train_probe(c.data, hyper);
      });
      std::ostringstream csv;
      csv << "layer_or_neuron,train_acc,eval_acc\n";
      for (const auto& c : candidates) csv << probe_row(c.name, c.probe.train_accuracy, c.probe.eval_accuracy);
      for (std::size_t k : cfg.ensemble_k) {
        if (k > candidates.size()) continue;
        const auto e = ensemble_topk(candidates, k, hyper);
        csv << probe_row("ensemble_k" + std::to_string(k), e.probe.train_accuracy, e.probe.eval_accuracy);
      }
      csv << probe_row("model_top1", kUndefined, model_ing_accuracy(raw, *vocab, data));
      out.write("probe_ing.csv", csv.str());
      manifest.notes.emplace_back("examples", std::to_string(data.labels.size()));
      manifest.notes.emplace_back("model_top1", "share of windows whose argmax at the penultimate position "
                                                "ends in -ing exactly when the label does");
      break;
    }
    case ExperimentKind::probe_wic: {
      if (!vocab) bad_field("vocab", "probe-wic needs vocab.json and merges.txt");
      const auto pairs = load_wic(cfg.wic);
      const auto result = wic_probe_sweep(raw, *vocab, pairs, hyper, cfg.shuffle_labels);
      std::ostringstream csv;
      csv << "layer_or_neuron,train_acc,eval_acc\n";
      for (const auto& r : result.layers) csv << probe_row(std::to_string(r.layer), r.train_accuracy, r.eval_accuracy);
      out.write(cfg.shuffle_labels ? "probe_wic_shuffled.csv" : "probe_wic.csv", csv.str());
      manifest.notes.emplace_back("pairs", std::to_string(result.n_pairs));
      manifest.notes.emplace_back("skipped_pairs", std::to_string(result.n_skipped));
      break;
    }
    case ExperimentKind::subjoiner: {
      if (!vocab) bad_field("vocab", "subjoiner needs vocab.json and merges.txt");
      const std::size_t cap = cfg.max_per_class ? cfg.max_per_class : 500;
      const auto data = build_subjoiner_dataset(corpus, *vocab, cap, static_cast<unsigned>(cfg.seed));
      const Matrix score = subjoiner_score(raw, data.word_windows, data.baseline_windows);
      std::ostringstream csv;
      csv << "layer,head,score\n";
      for (std::size_t l = 0; l < score.rows(); ++l)
        for (std::size_t h = 0; h < score.cols(); ++h) csv << l << ',' << h << ',' << format_real(score(l, h)) << '\n';
      out.write("subjoiner.csv", csv.str());
      manifest.notes.emplace_back("word_windows", std::to_string(data.word_windows.size()));
      manifest.notes.emplace_back("baseline_windows", std::to_string(data.baseline_windows.size()));
      break;
    }
    case ExperimentKind::locality: {
      const auto rows = locality_sweep(raw, windows, cfg.k, cfg.threads);
      std::ostringstream csv;
      csv << "layer,k,locality\n";
      for (const auto& r : rows) csv << r.layer << ',' << r.k << ',' << format_real(r.locality) << '\n';
      out.write("locality.csv", csv.str());
      break;
    }
    case ExperimentKind::swapsim: {
      const auto rows = swapsim_sweep(raw, windows, cfg.layer, cfg.threads);
      std::ostringstream csv;
      csv << "layer,component,self_sim,index_sim,adjacent_sim,n_windows\n";
      for (const auto& r : rows) {
        csv << r.layer << ',' << (r.component == Component::attention ? "attention" : "mlp") << ','
            << format_real(r.sim.self_sim) << ',' << format_real(r.sim.index_sim) << ','
            << format_real(r.sim.adjacent_sim) << ',' << r.n_windows << '\n';
      }
      out.write("swapsim.csv", csv.str());
      break;
    }
  }
  manifest.baseline_runs = stats.baseline_runs;
  manifest.files = out.files();
  manifest.finished_at = utc_now();
  emit_manifest(cfg.out, manifest);
  return manifest;
}

}  // namespace stagescope
