#pragma once

// Linear probing: the "-ing" suffix task over neuron activations, top-k
// neuron ensembles, the WiC contextual-meaning probe over residuals, and
// subjoiner-head scoring.

#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "stagescope/model.hpp"
#include "stagescope/neurons.hpp"
#include "stagescope/tokenizer.hpp"

namespace stagescope {

struct ProbeDataset {
  Matrix features;  // n x d
  std::vector<int> labels;
  std::string feature_spec;
  std::vector<std::size_t> constant_columns;

  std::size_t size() const { return labels.size(); }
  std::size_t positives() const;
  // Recomputes constant_columns.
  void flag_constant_columns();
};

struct ProbeHyper {
  double lr = 0.05;
  int epochs = 500;
  double l2 = 1e-3;
  unsigned seed = 0;
  double train_fraction = 0.8;
};

struct Probe {
  std::vector<double> weights;  // over standardized features
  double bias = 0.0;
  std::vector<double> feature_mean;
  std::vector<double> feature_scale;
  double train_accuracy = 0.0;
  double eval_accuracy = 0.0;
  ProbeHyper hyper;
  bool majority_only = false;  // single-class data
  int majority_label = 0;
  std::vector<double> loss_history;  // training objective per epoch

  double logit(std::span<const float> raw_features) const;
  int predict(std::span<const float> raw_features) const { return logit(raw_features) > 0.0 ? 1 : 0; }
};

struct LossAndGradient {
  double loss = 0.0;
  std::vector<double> grad_w;
  double grad_b = 0.0;
};

// Mean binary cross-entropy plus (l2/2)|w|^2 over the rows in `rows`.
LossAndGradient logistic_loss_and_gradient(const Matrix& x, std::span<const int> labels,
                                           std::span<const std::size_t> rows, std::span<const double> w, double b,
                                           double l2);

// Stratified deterministic train/eval split (seeded).
struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> eval;
};
Split stratified_split(std::span<const int> labels, double train_fraction, unsigned seed);

// Logistic regression by full-batch gradient descent on standardized
// features, zero-initialized. Single-class data yields a flagged majority
// probe; throws ValidationError when a class has fewer than 2 training
// examples otherwise.
Probe train_probe(const ProbeDataset& data, const ProbeHyper& hyper = {});

struct ProbeCandidate {
  int id = 0;  // tie-break when accuracies are equal
  std::string name;
  ProbeDataset data;
  Probe probe;
};

struct EnsembleResult {
  Probe probe;
  std::vector<int> member_ids;
  std::size_t feature_dim = 0;
};

// Retrains on the concatenated features of the k candidates with the best
// individual eval accuracy (ties by ascending id). Candidates must share
// examples and labels.
EnsembleResult ensemble_topk(std::span<const ProbeCandidate> candidates, std::size_t k,
                             const ProbeHyper& hyper = {});

// Decoded token with surrounding whitespace removed, lowercased, ends in
// "ing".
bool token_ends_with_ing(const BpeVocab& vocab, TokenId id);

struct IngDataset {
  std::vector<std::vector<TokenId>> windows;
  std::vector<int> labels;
  std::size_t context = 24;
};

// Sliding `context`-token windows labeled by whether the final token ends
// in "-ing"; the majority class is downsampled (seeded) to balance, and
// each class is capped at `max_per_class` when nonzero.
IngDataset build_ing_dataset(std::span<const TokenId> corpus, const BpeVocab& vocab, std::size_t context = 24,
                             unsigned seed = 0, std::size_t max_per_class = 0);

struct NeuronRef {
  int layer = 0;
  int neuron = 0;
  friend bool operator==(const NeuronRef&, const NeuronRef&) = default;
};

// Top `per_class` prediction and suppression neurons by activation
// variance (prediction first).
std::vector<NeuronRef> select_probe_neurons(const std::vector<NeuronStat>& stats,
                                            const std::vector<std::vector<double>>& variance,
                                            std::size_t per_class = 32);

// Post-GELU activations of `neurons` at the penultimate position of each
// window.
ProbeDataset extract_neuron_features(const TransformerWeights& w, const std::vector<std::vector<TokenId>>& windows,
                                     std::span<const int> labels, std::span<const NeuronRef> neurons);

// Fraction of windows where the model's argmax prediction at the
// penultimate position ends in "-ing" exactly when the label says so.
double model_ing_accuracy(const TransformerWeights& w, const BpeVocab& vocab, const IngDataset& data);

struct WicPair {
  std::string word;
  std::string sentence1;
  std::string sentence2;
  int word_index1 = 0;
  int word_index2 = 0;
  int label = 0;
};

// word<TAB>idx1-idx2<TAB>sentence1<TAB>sentence2<TAB>label, label in
// {T, F, 1, 0, true, false}. Throws FormatError naming the line.
std::vector<WicPair> parse_wic(std::istream& in);
std::vector<WicPair> load_wic(const std::filesystem::path& path);

struct ResolvedTarget {
  std::vector<TokenId> tokens;
  std::size_t index = 0;  // final subword token of the target word
};

// Token index of the final subword of whitespace-delimited word
// `word_index` (surrounding punctuation ignored); false when the word is
// missing.
bool resolve_target(const BpeVocab& vocab, const std::string& sentence, int word_index, ResolvedTarget& out);

// [h1, h2, h1*h2, |h1-h2|]
std::vector<float> wic_features(std::span<const float> h1, std::span<const float> h2);

struct LayerProbeResult {
  int layer = 0;
  double train_accuracy = 0.0;
  double eval_accuracy = 0.0;
};

struct WicSweepResult {
  std::vector<LayerProbeResult> layers;  // residual after each block
  std::size_t n_pairs = 0;
  std::size_t n_skipped = 0;
};

WicSweepResult wic_probe_sweep(const TransformerWeights& w, const BpeVocab& vocab, std::span<const WicPair> pairs,
                               const ProbeHyper& hyper = {}, bool shuffle_labels = false);

inline constexpr std::size_t kSubjoinerWindow = 16;

struct SubjoinerDataset {
  std::vector<std::vector<TokenId>> word_windows;      // final 4 tokens form one word
  std::vector<std::vector<TokenId>> baseline_windows;  // final 4 tokens are separate words
};

SubjoinerDataset build_subjoiner_dataset(std::span<const TokenId> corpus, const BpeVocab& vocab,
                                         std::size_t max_per_class = 0, unsigned seed = 0);

// Per (layer, head): mean attention from the final position to position
// T-4 over word-class windows minus the same over baseline windows.
// Windows must be 16 tokens.
Matrix subjoiner_score(const TransformerWeights& w, const std::vector<std::vector<TokenId>>& word_windows,
                       const std::vector<std::vector<TokenId>>& baseline_windows);

}  // namespace stagescope
