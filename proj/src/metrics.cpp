#include "stagescope/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "stagescope/error.hpp"

namespace stagescope {

namespace {

const double kLogFloor = std::log(kProbabilityFloor);

// The floor never rises above p itself, so identical distributions give
// exactly zero.
double floored_log_q(double log_p, double log_q) { return std::max(log_q, std::min(log_p, kLogFloor)); }

std::vector<double> kernel(const Matrix& x) {
  const std::size_t n = x.rows();
  std::vector<double> k(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      const double v = i == j ? 0.0 : dot(x.row(i), x.row(j));
      k[i * n + j] = v;
      k[j * n + i] = v;
    }
  }
  return k;
}

// Unbiased HSIC from kernels with zeroed diagonals.
double hsic_from_kernels(const std::vector<double>& k, const std::vector<double>& l, std::size_t n) {
  const double nd = static_cast<double>(n);
  double trace = 0.0, sum_k = 0.0, sum_l = 0.0, cross = 0.0;
  std::vector<double> k1(n, 0.0), l1(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      trace += k[i * n + j] * l[j * n + i];
      k1[i] += k[i * n + j];
      l1[i] += l[i * n + j];
    }
    sum_k += k1[i];
    sum_l += l1[i];
  }
  for (std::size_t i = 0; i < n; ++i) cross += k1[i] * l1[i];
  return (trace + sum_k * sum_l / ((nd - 1.0) * (nd - 2.0)) - 2.0 / (nd - 2.0) * cross) / (nd * (nd - 3.0));
}

void require_samples(const Matrix& x, const Matrix& y) {
  if (x.rows() != y.rows()) {
    throw ValidationError("CKA needs paired samples: " + std::to_string(x.rows()) + " vs " +
                          std::to_string(y.rows()) + " rows");
  }
  if (x.rows() < 4) {
    throw ValidationError("unbiased HSIC needs at least 4 samples, got " + std::to_string(x.rows()));
  }
}

}  // namespace

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ValidationError("KL divergence of distributions with different sizes");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    const double lp = std::log(p[i]);
    const double lq = q[i] > 0.0 ? std::log(q[i]) : -INFINITY;
    kl += p[i] * (lp - floored_log_q(lp, lq));
  }
  return std::max(kl, 0.0);
}

double kl_divergence(const TokenDistribution& p, const TokenDistribution& q) {
  return kl_divergence(std::span<const double>(p.probs), std::span<const double>(q.probs));
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return std::max(h, 0.0);
}

double entropy(const TokenDistribution& p) { return entropy(std::span<const double>(p.probs)); }

double log_sum_exp(std::span<const float> logits) {
  if (logits.empty()) return -INFINITY;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (float v : logits) sum += std::exp(v - mx);
  return mx + std::log(sum);
}

double kl_from_logits(std::span<const float> p_logits, double p_log_norm, std::span<const float> q_logits,
                      double q_log_norm) {
  if (p_logits.size() != q_logits.size()) throw ValidationError("KL divergence of logits with different sizes");
  double kl = 0.0;
  for (std::size_t i = 0; i < p_logits.size(); ++i) {
    const double lp = p_logits[i] - p_log_norm;
    const double p = std::exp(lp);
    if (p == 0.0) continue;
    const double lq = q_logits[i] - q_log_norm;
    kl += p * (lp - floored_log_q(lp, lq));
  }
  return std::max(kl, 0.0);
}

double entropy_from_logits(std::span<const float> logits, double log_norm) {
  double h = 0.0;
  for (float v : logits) {
    const double lp = v - log_norm;
    const double p = std::exp(lp);
    if (p > 0.0) h -= p * lp;
  }
  return std::max(h, 0.0);
}

double top1_agreement(const Matrix& a, const Matrix& b) {
  if (a.rows() == 0) throw ValidationError("top-1 agreement of an empty sequence");
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ValidationError("top-1 agreement needs equally shaped logits");
  }
  std::size_t same = 0;
  for (std::size_t t = 0; t < a.rows(); ++t) same += argmax(a.row(t)) == argmax(b.row(t));
  return static_cast<double>(same) / static_cast<double>(a.rows());
}

double cross_entropy(const Matrix& logits, std::span<const TokenId> targets) {
  if (logits.rows() != targets.size()) {
    throw ValidationError("cross entropy: " + std::to_string(logits.rows()) + " logit rows for " +
                          std::to_string(targets.size()) + " targets");
  }
  if (targets.empty()) throw ValidationError("cross entropy of an empty sequence");
  double sum = 0.0;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (targets[t] >= logits.cols()) throw ValidationError("cross entropy target out of range");
    sum += log_sum_exp(logits.row(t)) - logits(t, targets[t]);
  }
  return sum / static_cast<double>(targets.size());
}

std::vector<double> attention_locality(const ForwardTrace& trace, std::size_t k) {
  if (!trace.captured.attention) throw ValidationError("attention locality needs captured attention patterns");
  if (k < 1) throw ValidationError("attention locality needs k >= 1");
  std::vector<double> out;
  out.reserve(trace.attention.size());
  for (const auto& heads : trace.attention) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const Matrix& a : heads) {
      for (std::size_t t = 1; t < a.rows(); ++t) {
        const std::size_t lo = t > k ? t - k : 0;
        for (std::size_t s = lo; s < t; ++s) sum += a(t, s);
        ++count;
      }
    }
    out.push_back(count ? sum / static_cast<double>(count) : kUndefined);
  }
  return out;
}

std::vector<double> mlp_norms(const ForwardTrace& trace) {
  if (!trace.captured.mlp_norms) throw ValidationError("MLP norms were not captured");
  std::vector<double> out;
  out.reserve(trace.mlp_out_norms.size());
  for (const auto& norms : trace.mlp_out_norms) {
    double sum = 0.0;
    for (float v : norms) sum += v;
    out.push_back(norms.empty() ? kUndefined : sum / static_cast<double>(norms.size()));
  }
  return out;
}

double hsic_unbiased(const Matrix& x, const Matrix& y) {
  require_samples(x, y);
  return hsic_from_kernels(kernel(x), kernel(y), x.rows());
}

double cka_unbiased(const Matrix& x, const Matrix& y) {
  require_samples(x, y);
  const auto kx = kernel(x);
  const auto ky = kernel(y);
  const std::size_t n = x.rows();
  const double xx = hsic_from_kernels(kx, kx, n);
  const double yy = hsic_from_kernels(ky, ky, n);
  if (!(xx > 0.0) || !(yy > 0.0)) {
    throw ValidationError("CKA undefined: degenerate features with non-positive self-HSIC");
  }
  return hsic_from_kernels(kx, ky, n) / std::sqrt(xx * yy);
}

CkaMatrix cka_from_features(const std::vector<Matrix>& features, bool includes_embedding) {
  CkaMatrix out;
  out.n_layers = features.size();
  out.includes_embedding = includes_embedding;
  if (features.empty()) return out;
  const std::size_t n = features.front().rows();
  for (const auto& f : features) require_samples(features.front(), f);
  out.n_samples = n;
  std::vector<std::vector<double>> kernels;
  kernels.reserve(features.size());
  for (const auto& f : features) kernels.push_back(kernel(f));
  std::vector<double> self(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) self[i] = hsic_from_kernels(kernels[i], kernels[i], n);

  const std::size_t L = features.size();
  out.values.assign(L * L, kUndefined);
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t j = i; j < L; ++j) {
      double v = kUndefined;
      if (self[i] > 0.0 && self[j] > 0.0) {
        v = hsic_from_kernels(kernels[i], kernels[j], n) / std::sqrt(self[i] * self[j]);
      }
      out.values[i * L + j] = v;
      out.values[j * L + i] = v;
    }
  }
  return out;
}

CkaMatrix cka_layer_matrix(const TransformerWeights& w, std::span<const TokenId> corpus, std::size_t n_seqs,
                           std::size_t window, bool include_embedding) {
  if (n_seqs < 4) throw ValidationError("CKA needs at least 4 sequences, got " + std::to_string(n_seqs));
  if (window == 0 || corpus.size() / window < n_seqs) {
    throw ValidationError("corpus of " + std::to_string(corpus.size()) + " tokens holds fewer than " +
                          std::to_string(n_seqs) + " windows of " + std::to_string(window));
  }
  const std::size_t L = w.config.n_layers;
  const std::size_t first = include_embedding ? 0 : 1;
  std::vector<Matrix> features(L + 1 - first, Matrix(n_seqs, w.config.d_model));
  const auto schedule = LayerSchedule::identity(w.config.n_layers);
  CaptureFlags capture;
  capture.logits = false;
  for (std::size_t s = 0; s < n_seqs; ++s) {
    const auto trace = forward(w, corpus.subspan(s * window, window), schedule, capture);
    for (std::size_t l = first; l <= L; ++l) {
      auto src = trace.residuals[l].row(window - 1);
      std::copy(src.begin(), src.end(), features[l - first].row(s).begin());
    }
  }
  return cka_from_features(features, include_embedding);
}

SwapSimilarity swap_similarity_triplet(const TransformerWeights& w, std::span<const TokenId> window, int layer,
                                       Component component) {
  const int L = w.config.n_layers;
  if (layer < 0 || layer > L - 2) {
    throw ValidationError("swap similarity layer " + std::to_string(layer) + " needs a successor; valid range [0, " +
                          std::to_string(L - 2) + "]");
  }
  CaptureFlags capture;
  capture.residuals = false;
  capture.logits = false;
  capture.component_outputs = true;
  const auto base = forward(w, window, LayerSchedule::identity(L), capture);
  const auto swapped = forward(w, window, LayerSchedule::swap(L, layer), capture);
  const auto& base_out = component == Component::attention ? base.attn_outputs : base.mlp_outputs;
  const auto& swap_out = component == Component::attention ? swapped.attn_outputs : swapped.mlp_outputs;
  const Matrix& moved = swap_out[layer];         // block l+1 executed at step l
  const Matrix& own = base_out[layer + 1];       // block l+1 in the baseline
  const Matrix& replaced = base_out[layer];      // block l in the baseline

  auto mean_cos = [](const Matrix& a, const Matrix& b) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t t = 0; t < a.rows(); ++t) {
      const double c = cosine(a.row(t), b.row(t));
      if (is_defined(c)) {
        sum += c;
        ++n;
      }
    }
    return n ? sum / static_cast<double>(n) : kUndefined;
  };
  return {mean_cos(moved, own), mean_cos(moved, replaced), mean_cos(replaced, own)};
}

void InterventionAccumulator::merge(const InterventionAccumulator& o) {
  sum_kl += o.sum_kl;
  sum_agree += o.sum_agree;
  sum_entropy += o.sum_entropy;
  sum_loss += o.sum_loss;
  n_tokens += o.n_tokens;
  n_loss += o.n_loss;
}

BaselineWindow BaselineWindow::from(Matrix logits) {
  BaselineWindow b;
  b.log_norm.resize(logits.rows());
  b.argmax.resize(logits.rows());
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    b.log_norm[t] = log_sum_exp(logits.row(t));
    b.argmax[t] = stagescope::argmax(logits.row(t));
  }
  b.logits = std::move(logits);
  return b;
}

InterventionAccumulator compare_window(const BaselineWindow& baseline, const Matrix& intervened,
                                       std::span<const TokenId> tokens) {
  const Matrix& base = baseline.logits;
  if (base.rows() != intervened.rows() || base.cols() != intervened.cols()) {
    throw ValidationError("baseline and intervened logits differ in shape");
  }
  if (tokens.size() != base.rows()) throw ValidationError("window tokens do not match logits rows");
  InterventionAccumulator acc;
  for (std::size_t t = 0; t < base.rows(); ++t) {
    const auto q = intervened.row(t);
    const double q_norm = log_sum_exp(q);
    acc.sum_kl += kl_from_logits(base.row(t), baseline.log_norm[t], q, q_norm);
    acc.sum_entropy += entropy_from_logits(q, q_norm);
    acc.sum_agree += argmax(q) == baseline.argmax[t] ? 1.0 : 0.0;
    ++acc.n_tokens;
    if (t + 1 < base.rows()) {
      acc.sum_loss += q_norm - q[tokens[t + 1]];
      ++acc.n_loss;
    }
  }
  return acc;
}

InterventionRow InterventionRow::from(std::string kind, int layer, const InterventionAccumulator& acc) {
  InterventionRow r;
  r.schedule_kind = std::move(kind);
  r.layer = layer;
  r.n_tokens = acc.n_tokens;
  const double n = static_cast<double>(acc.n_tokens);
  r.kl_nats = acc.n_tokens ? acc.sum_kl / n : kUndefined;
  r.top1_agreement = acc.n_tokens ? acc.sum_agree / n : kUndefined;
  r.entropy_nats = acc.n_tokens ? acc.sum_entropy / n : kUndefined;
  r.loss_nats = acc.n_loss ? acc.sum_loss / static_cast<double>(acc.n_loss) : kUndefined;
  return r;
}

std::string format_real(double v) {
  if (!is_defined(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void InterventionReport::write_csv(std::ostream& out) const {
  out << "schedule_kind,layer,kl_nats,top1_agreement,entropy_nats,loss_nats,n_tokens\n";
  for (const auto& r : rows) {
    out << r.schedule_kind << ',' << r.layer << ',' << format_real(r.kl_nats) << ','
        << format_real(r.top1_agreement) << ',' << format_real(r.entropy_nats) << ',' << format_real(r.loss_nats)
        << ',' << r.n_tokens << '\n';
  }
}

}  // namespace stagescope
