#include "stagescope/neurons.hpp"

#include <algorithm>

#include "stagescope/error.hpp"

namespace stagescope {

namespace {

// Neurons per unembedding product; bounds the V x chunk temporary.
constexpr std::size_t kNeuronChunk = 128;

}  // namespace

std::string_view to_string(NeuronClass c) {
  switch (c) {
    case NeuronClass::prediction: return "prediction";
    case NeuronClass::suppression: return "suppression";
    case NeuronClass::neither: return "neither";
  }
  return "neither";
}

std::vector<double> logit_effect(const TransformerWeights& w, int layer, int neuron) {
  if (layer < 0 || layer >= w.config.n_layers) {
    throw ValidationError("layer " + std::to_string(layer) + " out of range");
  }
  if (neuron < 0 || neuron >= w.config.d_mlp) {
    throw ValidationError("neuron " + std::to_string(neuron) + " out of range");
  }
  const Matrix& w_out = w.blocks[layer].w_out;
  std::vector<float> column(w_out.rows());
  for (std::size_t r = 0; r < w_out.rows(); ++r) column[r] = w_out(r, neuron);
  std::vector<double> effect(w.w_u.rows());
  for (std::size_t v = 0; v < w.w_u.rows(); ++v) effect[v] = dot(w.w_u.row(v), column);
  return effect;
}

NeuronClass classify_moments(const Moments& m, const NeuronThresholds& t) {
  if (!m.shape_defined()) return NeuronClass::neither;
  if (m.excess_kurtosis > t.kurt_min) {
    if (m.skew > t.skew_min) return NeuronClass::prediction;
    if (m.skew < -t.skew_min) return NeuronClass::suppression;
  }
  return NeuronClass::neither;
}

NeuronClass classify_neuron(std::span<const double> effect, const NeuronThresholds& t) {
  if (effect.size() < 2) throw ValidationError("classification needs a logit effect over at least 2 tokens");
  return classify_moments(moments(effect), t);
}

std::vector<NeuronStat> neuron_stats(const TransformerWeights& w, const NeuronThresholds& t) {
  if (!w.preprocessed) throw ValidationError("neuron taxonomy expects preprocessed (centered) weights");
  const std::size_t V = w.w_u.rows();
  const std::size_t m = w.config.d_mlp;
  std::vector<NeuronStat> out;
  out.reserve(static_cast<std::size_t>(w.config.n_layers) * m);
  std::vector<double> column(V);
  for (int l = 0; l < w.config.n_layers; ++l) {
    const Matrix& w_out = w.blocks[l].w_out;
    for (std::size_t start = 0; start < m; start += kNeuronChunk) {
      const std::size_t n = std::min(kNeuronChunk, m - start);
      // Rows of `chunk` are output directions of neurons [start, start+n).
      Matrix chunk(n, w_out.rows());
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t r = 0; r < w_out.rows(); ++r) chunk(j, r) = w_out(r, start + j);
      const Matrix effects = linear(w.w_u, chunk);  // V x n
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t v = 0; v < V; ++v) column[v] = effects(v, j);
        const Moments mo = moments(std::span<const double>(column));
        NeuronStat s;
        s.layer = l;
        s.neuron = static_cast<int>(start + j);
        s.skew = mo.skew;
        s.excess_kurtosis = mo.excess_kurtosis;
        s.cls = classify_moments(mo, t);
        out.push_back(s);
      }
    }
  }
  return out;
}

std::vector<LayerDensity> layer_densities(const std::vector<NeuronStat>& stats, int n_layers, int d_mlp) {
  std::vector<LayerDensity> out(n_layers);
  for (int l = 0; l < n_layers; ++l) out[l].layer = l;
  std::vector<std::size_t> pred(n_layers, 0), supp(n_layers, 0);
  for (const auto& s : stats) {
    if (s.layer < 0 || s.layer >= n_layers) throw ValidationError("neuron stat layer out of range");
    if (s.cls == NeuronClass::prediction) ++pred[s.layer];
    if (s.cls == NeuronClass::suppression) ++supp[s.layer];
  }
  for (int l = 0; l < n_layers; ++l) {
    out[l].prediction_frac = static_cast<double>(pred[l]) / d_mlp;
    out[l].suppression_frac = static_cast<double>(supp[l]) / d_mlp;
  }
  return out;
}

std::vector<LayerDensity> layer_densities(const TransformerWeights& w, const NeuronThresholds& t) {
  return layer_densities(neuron_stats(w, t), w.config.n_layers, w.config.d_mlp);
}

std::vector<std::vector<double>> activation_variance(const TransformerWeights& w,
                                                     const std::vector<std::vector<TokenId>>& windows) {
  const std::size_t L = w.config.n_layers, m = w.config.d_mlp;
  std::vector<std::vector<double>> sum(L, std::vector<double>(m, 0.0)), sum_sq = sum;
  std::size_t n = 0;
  CaptureFlags capture;
  capture.residuals = false;
  capture.logits = false;
  capture.mlp_hidden = true;
  const auto schedule = LayerSchedule::identity(w.config.n_layers);
  for (const auto& win : windows) {
    if (win.size() < 2) throw ValidationError("activation variance needs windows of at least 2 tokens");
    const auto trace = forward(w, win, schedule, capture);
    const std::size_t pos = win.size() - 2;
    for (std::size_t l = 0; l < L; ++l) {
      auto row = trace.mlp_hidden[l].row(pos);
      for (std::size_t j = 0; j < m; ++j) {
        sum[l][j] += row[j];
        sum_sq[l][j] += static_cast<double>(row[j]) * row[j];
      }
    }
    ++n;
  }
  std::vector<std::vector<double>> var(L, std::vector<double>(m, kUndefined));
  if (n < 2) return var;
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t j = 0; j < m; ++j) {
      const double mean = sum[l][j] / n;
      var[l][j] = std::max(sum_sq[l][j] / n - mean * mean, 0.0);
    }
  }
  return var;
}

}  // namespace stagescope
