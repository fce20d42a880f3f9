#pragma once

// Prediction / suppression neuron taxonomy from the shape of each MLP
// neuron's logit-effect distribution W_U w_out.

#include <span>
#include <string_view>
#include <vector>

#include "stagescope/model.hpp"

namespace stagescope {

enum class NeuronClass { prediction, suppression, neither };

std::string_view to_string(NeuronClass c);

// Defaults are engineering choices, configurable from the CLI.
struct NeuronThresholds {
  double kurt_min = 10.0;
  double skew_min = 1.0;
};

struct NeuronStat {
  int layer = 0;
  int neuron = 0;
  double variance_act = kUndefined;  // activation variance over a corpus, when measured
  double skew = kUndefined;
  double excess_kurtosis = kUndefined;
  NeuronClass cls = NeuronClass::neither;
};

// W_U · (column `neuron` of W_out at `layer`). Throws ValidationError for
// out-of-range indices.
std::vector<double> logit_effect(const TransformerWeights& w, int layer, int neuron);

NeuronClass classify_neuron(std::span<const double> effect, const NeuronThresholds& thresholds = {});
NeuronClass classify_moments(const Moments& m, const NeuronThresholds& thresholds = {});

// Statistics for every neuron of every layer. Expects preprocessed
// weights (throws ValidationError otherwise).
std::vector<NeuronStat> neuron_stats(const TransformerWeights& w, const NeuronThresholds& thresholds = {});

struct LayerDensity {
  int layer = 0;
  double prediction_frac = 0.0;
  double suppression_frac = 0.0;
};

std::vector<LayerDensity> layer_densities(const std::vector<NeuronStat>& stats, int n_layers, int d_mlp);
std::vector<LayerDensity> layer_densities(const TransformerWeights& w, const NeuronThresholds& thresholds = {});

// Variance of every post-GELU activation at the penultimate position of
// each window; result is [layer][neuron].
std::vector<std::vector<double>> activation_variance(const TransformerWeights& w,
                                                     const std::vector<std::vector<TokenId>>& windows);

}  // namespace stagescope
