#pragma once

// Experiment configuration, sweep orchestration over corpus windows, and
// report persistence (CSV files plus a JSON manifest).

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stagescope/metrics.hpp"
#include "stagescope/model.hpp"
#include "stagescope/neurons.hpp"
#include "stagescope/probes.hpp"

namespace stagescope {

inline constexpr std::string_view kToolVersion = "0.1.0";

enum class ExperimentKind { intervene, logitlens, cka, neurons, probe_ing, probe_wic, subjoiner, repeat, locality, swapsim };

std::string_view to_string(ExperimentKind kind);
// Throws ValidationError listing the accepted names.
ExperimentKind parse_kind(std::string_view name);

enum class CorpusFormat { automatic, text, u32 };

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::intervene;
  std::filesystem::path model;         // directory with model.safetensors
  std::filesystem::path model_config;  // defaults to <model>/config.json
  std::filesystem::path vocab;         // vocab.json + merges.txt; defaults to <model>
  std::filesystem::path corpus;
  CorpusFormat corpus_format = CorpusFormat::automatic;  // automatic: .u32/.bin/.tok are pre-tokenized
  std::size_t tokens = 50000;
  std::size_t window = 512;
  std::uint64_t seed = 0;
  std::filesystem::path out;

  // Kind-specific.
  std::optional<int> layer;      // intervene, swapsim: restrict to one layer
  std::string schedule;          // intervene: a single schedule instead of the swap/drop set
  bool baseline_row = false;     // intervene: add the identity self-comparison row
  int block_len = 5;             // repeat
  int times = 1;                 // repeat
  std::vector<std::size_t> k = {1, 2, 4, 8, 16};  // locality
  NeuronThresholds thresholds;   // neurons, probe-ing
  bool include_embedding = false;  // cka
  std::size_t per_class = 32;      // probe-ing: neurons per class
  std::vector<std::size_t> ensemble_k = {1, 2, 4, 8, 16, 32};  // probe-ing
  std::size_t max_per_class = 0;   // probe-ing / subjoiner example cap, 0 = all
  std::filesystem::path wic;       // probe-wic
  bool shuffle_labels = false;     // probe-wic permutation control
  ProbeHyper probe;                // probe-ing, probe-wic (seed taken from `seed`)
  std::size_t threads = 0;         // 0 = hardware concurrency; never affects output

  // Field-level checks, including path existence. Throws ValidationError
  // naming the field.
  void validate() const;

  // Unknown keys and ill-typed values are ValidationErrors naming the
  // field. Relative paths resolve against `base_dir`.
  static ExperimentConfig parse(std::string_view json_text, const std::filesystem::path& base_dir = {});
  static ExperimentConfig load(const std::filesystem::path& path);
  // Canonical document; `threads` is excluded since it cannot change
  // results.
  std::string to_json() const;
  // FNV-1a 64 over to_json(), as 16 hex digits.
  std::string hash() const;
};

// Non-overlapping `window`-token slices of the first `budget` tokens; the
// final partial window is dropped.
std::vector<std::vector<TokenId>> make_windows(std::span<const TokenId> corpus, std::size_t budget,
                                               std::size_t window);

// Work counters for the cache contract: one baseline forward per window.
struct SweepStats {
  std::atomic<std::size_t> baseline_runs{0};
  std::atomic<std::size_t> intervened_runs{0};
  std::size_t windows = 0;
};

// Runs fn(0..n-1) on up to `threads` workers (0 = hardware concurrency).
// The first exception thrown by any item is rethrown after all workers
// stop.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

// swap(l) for l in [0, L-2] then drop(l) for l in [0, L-1], optionally
// restricted to one layer and optionally preceded by identity.
std::vector<LayerSchedule> intervention_schedules(int n_layers, std::optional<int> layer, bool baseline_row);

// Each window's baseline is computed once and every intervention resumes
// from the baseline residual at the point where its schedule diverges.
// Rows follow `schedules` order.
InterventionReport intervention_sweep(const TransformerWeights& w, const std::vector<std::vector<TokenId>>& windows,
                                      std::span<const LayerSchedule> schedules, std::size_t threads = 0,
                                      SweepStats* stats = nullptr);

struct MlpNormRow {
  std::string schedule;  // notation
  std::size_t step = 0;
  int block = 0;
  double mean_norm = 0.0;
};

struct RepeatSweep {
  InterventionReport report;  // "baseline" row first, then one "repeat" row per start layer
  std::vector<MlpNormRow> mlp_norms;
};

RepeatSweep repeat_sweep(const TransformerWeights& w, const std::vector<std::vector<TokenId>>& windows, int block_len,
                         int times, std::size_t threads = 0, SweepStats* stats = nullptr);

struct LensRow {
  int layer = 0;  // blocks applied; 0 is the embedding, L the final residual
  double entropy_nats = 0.0;
  double kl_to_final_nats = 0.0;  // KL(final || lens)
  std::size_t n_tokens = 0;
};

std::vector<LensRow> logit_lens_sweep(const TransformerWeights& w, const std::vector<std::vector<TokenId>>& windows,
                                      std::size_t threads = 0, SweepStats* stats = nullptr);

struct LocalityRow {
  int layer = 0;
  std::size_t k = 0;
  double locality = 0.0;
};

std::vector<LocalityRow> locality_sweep(const TransformerWeights& w, const std::vector<std::vector<TokenId>>& windows,
                                        std::span<const std::size_t> ks, std::size_t threads = 0);

struct SwapSimRow {
  int layer = 0;
  Component component = Component::attention;
  SwapSimilarity sim;
  std::size_t n_windows = 0;
};

std::vector<SwapSimRow> swapsim_sweep(const TransformerWeights& w, const std::vector<std::vector<TokenId>>& windows,
                                      std::optional<int> layer, std::size_t threads = 0);

struct RunManifest {
  std::string config_hash;
  std::string kind;
  std::string tool_version{kToolVersion};
  std::string model_identity;
  std::string started_at;
  std::string finished_at;
  std::size_t n_tokens = 0;
  std::size_t n_windows = 0;
  std::size_t baseline_runs = 0;
  std::vector<std::string> files;  // relative to the output directory
  std::vector<std::pair<std::string, std::string>> notes;

  std::string to_json() const;
};

// Writes <out>/manifest.json after checking every listed file exists.
// Throws Error for an unwritable directory or a missing artifact.
std::filesystem::path emit_manifest(const std::filesystem::path& out_dir, const RunManifest& manifest);

// Loads model, vocab and corpus, runs the configured experiment, writes its
// CSV reports and the manifest.
RunManifest run_experiment(const ExperimentConfig& cfg);

}  // namespace stagescope
