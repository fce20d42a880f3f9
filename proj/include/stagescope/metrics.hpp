#pragma once

// Measurements comparing runs and characterizing depth. All accumulate in
// double precision. Logarithms are natural (nats).

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "stagescope/distribution.hpp"
#include "stagescope/model.hpp"
#include "stagescope/numkernel.hpp"

namespace stagescope {

// Floor applied to q in KL(p || q); bounds each term at about 27.6 nats.
inline constexpr double kProbabilityFloor = 1e-12;

// sum p_i ln(p_i / max(q_i, floor)); terms with p_i == 0 contribute 0.
double kl_divergence(std::span<const double> p, std::span<const double> q);
double kl_divergence(const TokenDistribution& p, const TokenDistribution& q);

double entropy(std::span<const double> p);
double entropy(const TokenDistribution& p);

// Fraction of rows whose argmax agrees (ties to the lowest id). Throws
// ValidationError for empty or mismatched inputs.
double top1_agreement(const Matrix& a, const Matrix& b);

// Mean -ln softmax(logits[t])[targets[t]]; one target per logits row.
double cross_entropy(const Matrix& logits, std::span<const TokenId> targets);

// For each executed step: mean over heads and query positions t >= 1 of
// the attention mass on keys [max(0, t-k), t-1]. Self attention is
// excluded. Throws ValidationError when attention was not captured.
std::vector<double> attention_locality(const ForwardTrace& trace, std::size_t k);

// Per executed step: mean Euclidean norm of the MLP output over positions.
std::vector<double> mlp_norms(const ForwardTrace& trace);

// Unbiased linear-kernel CKA between paired samples (rows). Throws
// ValidationError for n < 4 or degenerate (zero self-HSIC) features.
double cka_unbiased(const Matrix& x, const Matrix& y);
// The unbiased HSIC estimator itself.
double hsic_unbiased(const Matrix& x, const Matrix& y);

struct CkaMatrix {
  std::size_t n_layers = 0;
  std::size_t n_samples = 0;
  bool includes_embedding = false;  // row/col 0 is the embedding snapshot
  std::vector<double> values;       // row-major n_layers x n_layers

  double operator()(std::size_t i, std::size_t j) const { return values[i * n_layers + j]; }
};

// Features per layer are the final-position residual of each window.
// `features[l]` holds one row per sample.
CkaMatrix cka_from_features(const std::vector<Matrix>& features, bool includes_embedding = false);

// Runs the identity schedule over `n_seqs` non-overlapping windows of
// `window` tokens and compares the final-position residual after every
// block (and the embedding, when requested).
CkaMatrix cka_layer_matrix(const TransformerWeights& w, std::span<const TokenId> corpus, std::size_t n_seqs,
                           std::size_t window, bool include_embedding = false);

enum class Component { attention, mlp };

struct SwapSimilarity {
  double self_sim = kUndefined;      // block l+1 at its new position vs its baseline output
  double index_sim = kUndefined;     // block l+1 at its new position vs block l in the baseline
  double adjacent_sim = kUndefined;  // blocks l and l+1 in the baseline
};

// Mean per-position cosine similarities between component outputs of the
// baseline run and swap(l). Positions where a cosine is undefined are
// skipped.
SwapSimilarity swap_similarity_triplet(const TransformerWeights& w, std::span<const TokenId> window, int layer,
                                       Component component);

// Running sums for one intervention row. Merging is associative; reports
// merge per-window accumulators in window order for reproducible output.
struct InterventionAccumulator {
  double sum_kl = 0.0;
  double sum_agree = 0.0;
  double sum_entropy = 0.0;
  double sum_loss = 0.0;
  std::size_t n_tokens = 0;
  std::size_t n_loss = 0;

  void merge(const InterventionAccumulator& other);
};

// Baseline logits for one window with their per-row log-normalizers and
// argmaxes, computed once and shared by every intervention on the window.
struct BaselineWindow {
  Matrix logits;
  std::vector<double> log_norm;
  std::vector<std::size_t> argmax;

  static BaselineWindow from(Matrix logits);
};

// log sum exp of a logits row, accumulated in double.
double log_sum_exp(std::span<const float> logits);
// KL(softmax(p) || softmax(q)) from logits and their log-normalizers, with
// the same flooring as kl_divergence. Identical inputs give exactly 0.
double kl_from_logits(std::span<const float> p_logits, double p_log_norm, std::span<const float> q_logits,
                      double q_log_norm);
double entropy_from_logits(std::span<const float> logits, double log_norm);

// Compares intervened logits against the baseline over one window.
// `tokens` supplies next-token targets for the loss (positions 0..T-2);
// KL, entropy and agreement use every position.
InterventionAccumulator compare_window(const BaselineWindow& baseline, const Matrix& intervened_logits,
                                       std::span<const TokenId> tokens);

struct InterventionRow {
  std::string schedule_kind;
  int layer = -1;
  double kl_nats = 0.0;
  double top1_agreement = 0.0;
  double entropy_nats = 0.0;
  double loss_nats = 0.0;
  std::size_t n_tokens = 0;

  static InterventionRow from(std::string kind, int layer, const InterventionAccumulator& acc);
};

struct InterventionReport {
  // KL(P_baseline || P_intervened), natural log, q floored at 1e-12.
  std::string kl_direction = "baseline||intervened";
  std::vector<InterventionRow> rows;

  // schedule_kind,layer,kl_nats,top1_agreement,entropy_nats,loss_nats,n_tokens
  void write_csv(std::ostream& out) const;
};

// Fixed-precision formatting shared by every CSV writer.
std::string format_real(double v);

}  // namespace stagescope
