#include "stagescope/probes.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <sstream>

#include "stagescope/error.hpp"
#include "stagescope/random.hpp"

namespace stagescope {

namespace {

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// log(1 + exp(z)) without overflow.
double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double accuracy(const Matrix& x, std::span<const int> labels, std::span<const std::size_t> rows,
                std::span<const double> w, double b) {
  if (rows.empty()) return kUndefined;
  std::size_t correct = 0;
  for (std::size_t r : rows) {
    double z = b;
    auto row = x.row(r);
    for (std::size_t j = 0; j < w.size(); ++j) z += w[j] * row[j];
    correct += (z > 0.0 ? 1 : 0) == labels[r];
  }
  return static_cast<double>(correct) / static_cast<double>(rows.size());
}

bool is_ascii_letters(std::string_view s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isalpha(c) != 0; });
}

bool is_space_word(std::string_view s) { return s.size() >= 2 && s[0] == ' ' && is_ascii_letters(s.substr(1)); }

std::vector<std::size_t> sample_sorted(std::vector<std::size_t> idx, std::size_t keep, std::uint64_t seed) {
  if (idx.size() > keep) {
    seeded_shuffle(idx, seed);
    idx.resize(keep);
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

}  // namespace

std::size_t ProbeDataset::positives() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
}

void ProbeDataset::flag_constant_columns() {
  constant_columns.clear();
  for (std::size_t c = 0; c < features.cols(); ++c) {
    bool constant = true;
    for (std::size_t r = 1; r < features.rows() && constant; ++r) constant = features(r, c) == features(0, c);
    if (constant) constant_columns.push_back(c);
  }
}

double Probe::logit(std::span<const float> raw) const {
  if (majority_only) return majority_label ? 1.0 : -1.0;
  if (raw.size() != weights.size()) throw ShapeError("probe input has the wrong feature count");
  double z = bias;
  for (std::size_t j = 0; j < weights.size(); ++j) z += weights[j] * ((raw[j] - feature_mean[j]) / feature_scale[j]);
  return z;
}

LossAndGradient logistic_loss_and_gradient(const Matrix& x, std::span<const int> labels,
                                           std::span<const std::size_t> rows, std::span<const double> w, double b,
                                           double l2) {
  if (w.size() != x.cols()) throw ShapeError("probe weights do not match the feature count");
  LossAndGradient out;
  out.grad_w.assign(w.size(), 0.0);
  const double n = static_cast<double>(rows.size());
  for (std::size_t r : rows) {
    auto row = x.row(r);
    double z = b;
    for (std::size_t j = 0; j < w.size(); ++j) z += w[j] * row[j];
    const double y = labels[r];
    // -[y log s + (1-y) log(1-s)] = softplus(z) - y z
    out.loss += softplus(z) - y * z;
    const double g = sigmoid(z) - y;
    for (std::size_t j = 0; j < w.size(); ++j) out.grad_w[j] += g * row[j];
    out.grad_b += g;
  }
  out.loss /= n;
  out.grad_b /= n;
  double sq = 0.0;
  for (std::size_t j = 0; j < w.size(); ++j) {
    out.grad_w[j] = out.grad_w[j] / n + l2 * w[j];
    sq += w[j] * w[j];
  }
  out.loss += 0.5 * l2 * sq;
  return out;
}

Split stratified_split(std::span<const int> labels, double train_fraction, unsigned seed) {
  Split s;
  for (int cls : {0, 1}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == cls) idx.push_back(i);
    seeded_shuffle(idx, (static_cast<std::uint64_t>(seed) << 1) | static_cast<std::uint64_t>(cls));
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(idx.size())));
    s.train.insert(s.train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.eval.insert(s.eval.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.eval.begin(), s.eval.end());
  return s;
}

Probe train_probe(const ProbeDataset& data, const ProbeHyper& hyper) {
  const std::size_t n = data.size();
  if (data.features.rows() != n) throw ShapeError("probe dataset has mismatched features and labels");
  for (int y : data.labels)
    if (y != 0 && y != 1) throw ValidationError("probe labels must be 0 or 1");
  const std::size_t d = data.features.cols();
  Probe p;
  p.hyper = hyper;
  const std::size_t pos = data.positives();
  if (n == 0) throw ValidationError("probe dataset is empty");
  if (pos == 0 || pos == n) {
    p.majority_only = true;
    p.majority_label = pos == n ? 1 : 0;
    p.weights.assign(d, 0.0);
    p.feature_mean.assign(d, 0.0);
    p.feature_scale.assign(d, 1.0);
    p.train_accuracy = 1.0;
    p.eval_accuracy = 1.0;
    return p;
  }

  const Split split = stratified_split(data.labels, hyper.train_fraction, hyper.seed);
  std::size_t train_pos = 0;
  for (std::size_t r : split.train) train_pos += data.labels[r];
  if (train_pos < 2 || split.train.size() - train_pos < 2) {
    throw ValidationError("probe training split needs at least 2 examples per class");
  }

  // Standardize with training-split statistics.
  p.feature_mean.assign(d, 0.0);
  p.feature_scale.assign(d, 1.0);
  for (std::size_t r : split.train)
    for (std::size_t j = 0; j < d; ++j) p.feature_mean[j] += data.features(r, j);
  for (double& m : p.feature_mean) m /= static_cast<double>(split.train.size());
  std::vector<double> var(d, 0.0);
  for (std::size_t r : split.train) {
    for (std::size_t j = 0; j < d; ++j) {
      const double dv = data.features(r, j) - p.feature_mean[j];
      var[j] += dv * dv;
    }
  }
  for (std::size_t j = 0; j < d; ++j) {
    const double sd = std::sqrt(var[j] / static_cast<double>(split.train.size()));
    p.feature_scale[j] = sd > 1e-12 ? sd : 1.0;
  }
  Matrix x(n, d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j)
      x(r, j) = static_cast<float>((data.features(r, j) - p.feature_mean[j]) / p.feature_scale[j]);

  p.weights.assign(d, 0.0);
  p.bias = 0.0;
  p.loss_history.reserve(static_cast<std::size_t>(std::max(hyper.epochs, 0)));
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    const auto lg = logistic_loss_and_gradient(x, data.labels, split.train, p.weights, p.bias, hyper.l2);
    p.loss_history.push_back(lg.loss);
    for (std::size_t j = 0; j < d; ++j) p.weights[j] -= hyper.lr * lg.grad_w[j];
    p.bias -= hyper.lr * lg.grad_b;
  }
  p.train_accuracy = accuracy(x, data.labels, split.train, p.weights, p.bias);
  p.eval_accuracy = accuracy(x, data.labels, split.eval, p.weights, p.bias);
  return p;
}

EnsembleResult ensemble_topk(std::span<const ProbeCandidate> candidates, std::size_t k, const ProbeHyper& hyper) {
  if (k == 0) throw ValidationError("ensemble size k must be at least 1");
  if (k > candidates.size()) {
    throw ValidationError("ensemble size " + std::to_string(k) + " exceeds the " +
                          std::to_string(candidates.size()) + " available probes");
  }
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  auto score = [&](std::size_t i) {
    const double a = candidates[i].probe.eval_accuracy;
    return is_defined(a) ? a : -1.0;
  };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (score(a) != score(b)) return score(a) > score(b);
    return candidates[a].id < candidates[b].id;
  });
  order.resize(k);

  const auto& first = candidates[order.front()].data;
  std::size_t dim = 0;
  for (std::size_t i : order) {
    const auto& d = candidates[i].data;
    if (d.labels != first.labels) throw ValidationError("ensemble members must share examples and labels");
    dim += d.features.cols();
  }
  ProbeDataset joined;
  joined.labels = first.labels;
  joined.features = Matrix(first.size(), dim);
  std::size_t col = 0;
  EnsembleResult out;
  for (std::size_t i : order) {
    const auto& f = candidates[i].data.features;
    for (std::size_t r = 0; r < f.rows(); ++r)
      for (std::size_t j = 0; j < f.cols(); ++j) joined.features(r, col + j) = f(r, j);
    col += f.cols();
    out.member_ids.push_back(candidates[i].id);
    joined.feature_spec += (joined.feature_spec.empty() ? "" : "+") + candidates[i].name;
  }
  joined.flag_constant_columns();
  out.probe = train_probe(joined, hyper);
  out.feature_dim = dim;
  return out;
}

bool token_ends_with_ing(const BpeVocab& vocab, TokenId id) {
  std::string s = vocab.token_bytes(id);
  auto not_space = [](unsigned char c) { return std::isspace(c) == 0; };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s.ends_with("ing");
}

IngDataset build_ing_dataset(std::span<const TokenId> corpus, const BpeVocab& vocab, std::size_t context,
                             unsigned seed, std::size_t max_per_class) {
  if (context < 2) throw ValidationError("-ing windows need at least 2 tokens of context");
  if (corpus.size() < context) {
    throw ValidationError("corpus of " + std::to_string(corpus.size()) + " tokens is shorter than the context " +
                          std::to_string(context));
  }
  std::vector<std::size_t> pos, neg;  // index of each window's final token
  for (std::size_t end = context - 1; end < corpus.size(); ++end) {
    (token_ends_with_ing(vocab, corpus[end]) ? pos : neg).push_back(end);
  }
  if (pos.empty()) throw ValidationError("no window in the corpus ends in \"-ing\"");
  std::size_t keep = std::min(pos.size(), neg.size());
  if (max_per_class) keep = std::min(keep, max_per_class);
  pos = sample_sorted(std::move(pos), keep, (static_cast<std::uint64_t>(seed) << 1) | 1u);
  neg = sample_sorted(std::move(neg), keep, static_cast<std::uint64_t>(seed) << 1);

  std::vector<std::pair<std::size_t, int>> chosen;
  for (auto e : pos) chosen.emplace_back(e, 1);
  for (auto e : neg) chosen.emplace_back(e, 0);
  std::sort(chosen.begin(), chosen.end());
  IngDataset out;
  out.context = context;
  for (auto [end, label] : chosen) {
    out.windows.emplace_back(corpus.begin() + static_cast<std::ptrdiff_t>(end + 1 - context),
                             corpus.begin() + static_cast<std::ptrdiff_t>(end + 1));
    out.labels.push_back(label);
  }
  return out;
}

std::vector<NeuronRef> select_probe_neurons(const std::vector<NeuronStat>& stats,
                                            const std::vector<std::vector<double>>& variance, std::size_t per_class) {
  std::vector<NeuronRef> out;
  for (NeuronClass cls : {NeuronClass::prediction, NeuronClass::suppression}) {
    std::vector<std::pair<double, NeuronRef>> pool;
    for (const auto& s : stats) {
      if (s.cls != cls) continue;
      double v = kUndefined;
      if (static_cast<std::size_t>(s.layer) < variance.size() &&
          static_cast<std::size_t>(s.neuron) < variance[s.layer].size()) {
        v = variance[s.layer][s.neuron];
      }
      pool.push_back({is_defined(v) ? v : -1.0, {s.layer, s.neuron}});
    }
    std::stable_sort(pool.begin(), pool.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      if (a.second.layer != b.second.layer) return a.second.layer < b.second.layer;
      return a.second.neuron < b.second.neuron;
    });
    for (std::size_t i = 0; i < pool.size() && i < per_class; ++i) out.push_back(pool[i].second);
  }
  return out;
}

ProbeDataset extract_neuron_features(const TransformerWeights& w, const std::vector<std::vector<TokenId>>& windows,
                                     std::span<const int> labels, std::span<const NeuronRef> neurons) {
  if (labels.size() != windows.size()) throw ValidationError("one label per window is required");
  int max_layer = -1;
  for (const auto& n : neurons) {
    if (n.layer < 0 || n.layer >= w.config.n_layers || n.neuron < 0 || n.neuron >= w.config.d_mlp) {
      throw ValidationError("neuron L" + std::to_string(n.layer) + "N" + std::to_string(n.neuron) + " out of range");
    }
    max_layer = std::max(max_layer, n.layer);
  }
  ProbeDataset out;
  out.labels.assign(labels.begin(), labels.end());
  out.features = Matrix(windows.size(), neurons.size());
  for (const auto& n : neurons) {
    out.feature_spec += (out.feature_spec.empty() ? "" : "+") + std::string("L") + std::to_string(n.layer) + "N" +
                        std::to_string(n.neuron);
  }
  if (neurons.empty() || windows.empty()) return out;

  // Blocks after the deepest requested layer cannot affect its activations.
  std::vector<int> steps(static_cast<std::size_t>(max_layer + 1));
  std::iota(steps.begin(), steps.end(), 0);
  const auto schedule = LayerSchedule::custom(w.config.n_layers, steps);
  CaptureFlags capture;
  capture.residuals = false;
  capture.logits = false;
  capture.mlp_hidden = true;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    if (windows[i].size() < 2) throw ValidationError("neuron features need windows of at least 2 tokens");
    const auto trace = forward(w, windows[i], schedule, capture);
    const std::size_t pos = windows[i].size() - 2;
    for (std::size_t j = 0; j < neurons.size(); ++j) {
      out.features(i, j) = trace.mlp_hidden[neurons[j].layer](pos, neurons[j].neuron);
    }
  }
  out.flag_constant_columns();
  return out;
}

double model_ing_accuracy(const TransformerWeights& w, const BpeVocab& vocab, const IngDataset& data) {
  if (data.windows.empty()) return kUndefined;
  const auto schedule = LayerSchedule::identity(w.config.n_layers);
  CaptureFlags capture;
  capture.residuals = false;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.windows.size(); ++i) {
    const auto& win = data.windows[i];
    const auto trace = forward(w, std::span<const TokenId>(win).first(win.size() - 1), schedule, capture);
    const auto pred = static_cast<TokenId>(argmax(trace.logits.row(trace.logits.rows() - 1)));
    correct += (token_ends_with_ing(vocab, pred) ? 1 : 0) == data.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(data.windows.size());
}

std::vector<WicPair> parse_wic(std::istream& in) {
  std::vector<WicPair> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t pos = 0;
    while (true) {
      const auto tab = line.find('\t', pos);
      f.push_back(line.substr(pos, tab == std::string::npos ? std::string::npos : tab - pos));
      if (tab == std::string::npos) break;
      pos = tab + 1;
    }
    const std::string where = "WiC line " + std::to_string(lineno) + ": ";
    if (f.size() != 5) throw FormatError(where + "expected 5 tab-separated fields, got " + std::to_string(f.size()));
    WicPair p;
    p.word = f[0];
    const auto dash = f[1].find('-');
    try {
      if (dash == std::string::npos) throw std::invalid_argument("no dash");
      std::size_t used = 0;
      p.word_index1 = std::stoi(f[1].substr(0, dash), &used);
      if (used != dash) throw std::invalid_argument("trailing");
      p.word_index2 = std::stoi(f[1].substr(dash + 1), &used);
      if (used != f[1].size() - dash - 1) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw FormatError(where + "index field '" + f[1] + "' is not idx1-idx2");
    }
    p.sentence1 = f[2];
    p.sentence2 = f[3];
    std::string label = f[4];
    std::transform(label.begin(), label.end(), label.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (label == "t" || label == "1" || label == "true") {
      p.label = 1;
    } else if (label == "f" || label == "0" || label == "false") {
      p.label = 0;
    } else {
      throw FormatError(where + "label '" + f[4] + "' is not T/F/1/0");
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<WicPair> load_wic(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open WiC file " + path.string());
  return parse_wic(in);
}

bool resolve_target(const BpeVocab& vocab, const std::string& sentence, int word_index, ResolvedTarget& out) {
  if (word_index < 0) return false;
  // Byte span of the requested whitespace-delimited word.
  std::size_t begin = std::string::npos, end = 0;
  int seen = -1;
  for (std::size_t i = 0; i < sentence.size();) {
    while (i < sentence.size() && std::isspace(static_cast<unsigned char>(sentence[i]))) ++i;
    if (i >= sentence.size()) break;
    std::size_t j = i;
    while (j < sentence.size() && !std::isspace(static_cast<unsigned char>(sentence[j]))) ++j;
    if (++seen == word_index) {
      begin = i;
      end = j;
      break;
    }
    i = j;
  }
  if (begin == std::string::npos) return false;
  auto is_punct = [](unsigned char c) { return c < 0x80 && std::ispunct(c); };
  while (begin < end && is_punct(static_cast<unsigned char>(sentence[begin]))) ++begin;
  while (end > begin && is_punct(static_cast<unsigned char>(sentence[end - 1]))) --end;
  if (begin == end) return false;

  out.tokens = vocab.encode(sentence).ids;
  std::size_t offset = 0;
  for (std::size_t t = 0; t < out.tokens.size(); ++t) {
    offset += vocab.token_bytes(out.tokens[t]).size();
    if (offset >= end) {
      out.index = t;
      return true;
    }
  }
  return false;
}

std::vector<float> wic_features(std::span<const float> h1, std::span<const float> h2) {
  if (h1.size() != h2.size()) throw ShapeError("WiC hidden states differ in size");
  const std::size_t d = h1.size();
  std::vector<float> f(4 * d);
  for (std::size_t i = 0; i < d; ++i) {
    f[i] = h1[i];
    f[d + i] = h2[i];
    f[2 * d + i] = h1[i] * h2[i];
    f[3 * d + i] = std::abs(h1[i] - h2[i]);
  }
  return f;
}

WicSweepResult wic_probe_sweep(const TransformerWeights& w, const BpeVocab& vocab, std::span<const WicPair> pairs,
                               const ProbeHyper& hyper, bool shuffle_labels) {
  WicSweepResult result;
  const std::size_t L = w.config.n_layers, d = w.config.d_model;
  const auto schedule = LayerSchedule::identity(w.config.n_layers);
  CaptureFlags capture;
  capture.logits = false;

  std::vector<ProbeDataset> per_layer(L);
  std::vector<std::vector<float>> rows;  // [pair * L + layer]
  std::vector<int> labels;
  for (const auto& p : pairs) {
    ResolvedTarget t1, t2;
    if (!resolve_target(vocab, p.sentence1, p.word_index1, t1) ||
        !resolve_target(vocab, p.sentence2, p.word_index2, t2) ||
        t1.tokens.size() > static_cast<std::size_t>(w.config.max_positions) ||
        t2.tokens.size() > static_cast<std::size_t>(w.config.max_positions)) {
      ++result.n_skipped;
      continue;
    }
    const auto r1 = forward(w, t1.tokens, schedule, capture);
    const auto r2 = forward(w, t2.tokens, schedule, capture);
    for (std::size_t l = 0; l < L; ++l) {
      rows.push_back(wic_features(r1.residuals[l + 1].row(t1.index), r2.residuals[l + 1].row(t2.index)));
    }
    labels.push_back(p.label);
  }
  result.n_pairs = labels.size();
  if (shuffle_labels) seeded_shuffle(labels, 0x5eed0000ull + hyper.seed);
  if (labels.empty()) return result;

  for (std::size_t l = 0; l < L; ++l) {
    ProbeDataset ds;
    ds.labels = labels;
    ds.feature_spec = "wic:layer" + std::to_string(l);
    ds.features = Matrix(labels.size(), 4 * d);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const auto& src = rows[i * L + l];
      std::copy(src.begin(), src.end(), ds.features.row(i).begin());
    }
    const Probe probe = train_probe(ds, hyper);
    result.layers.push_back({static_cast<int>(l), probe.train_accuracy, probe.eval_accuracy});
  }
  return result;
}

SubjoinerDataset build_subjoiner_dataset(std::span<const TokenId> corpus, const BpeVocab& vocab,
                                         std::size_t max_per_class, unsigned seed) {
  const std::size_t n = corpus.size();
  std::vector<std::string> text(n);
  for (std::size_t i = 0; i < n; ++i) text[i] = vocab.token_bytes(corpus[i]);
  std::vector<std::size_t> word_ends, base_ends;
  for (std::size_t i = kSubjoinerWindow - 1; i < n; ++i) {
    // The word must end at i: the next token may not continue it.
    if (i + 1 < n && is_ascii_letters(text[i + 1])) continue;
    if (is_space_word(text[i - 3]) && is_ascii_letters(text[i - 2]) && is_ascii_letters(text[i - 1]) &&
        is_ascii_letters(text[i])) {
      word_ends.push_back(i);
    } else if (is_space_word(text[i - 3]) && is_space_word(text[i - 2]) && is_space_word(text[i - 1]) &&
               is_space_word(text[i])) {
      base_ends.push_back(i);
    }
  }
  if (max_per_class) {
    word_ends = sample_sorted(std::move(word_ends), max_per_class, (static_cast<std::uint64_t>(seed) << 1) | 1u);
    base_ends = sample_sorted(std::move(base_ends), max_per_class, static_cast<std::uint64_t>(seed) << 1);
  }
  SubjoinerDataset out;
  auto window = [&](std::size_t end) {
    return std::vector<TokenId>(corpus.begin() + static_cast<std::ptrdiff_t>(end + 1 - kSubjoinerWindow),
                                corpus.begin() + static_cast<std::ptrdiff_t>(end + 1));
  };
  for (auto e : word_ends) out.word_windows.push_back(window(e));
  for (auto e : base_ends) out.baseline_windows.push_back(window(e));
  return out;
}

Matrix subjoiner_score(const TransformerWeights& w, const std::vector<std::vector<TokenId>>& word_windows,
                       const std::vector<std::vector<TokenId>>& baseline_windows) {
  const std::size_t L = w.config.n_layers, H = w.config.n_heads;
  if (word_windows.empty() || baseline_windows.empty()) {
    throw ValidationError("subjoiner scoring needs windows in both classes");
  }
  const auto schedule = LayerSchedule::identity(w.config.n_layers);
  CaptureFlags capture;
  capture.residuals = false;
  capture.logits = false;
  capture.attention = true;
  auto mean_attention = [&](const std::vector<std::vector<TokenId>>& windows) {
    Matrix sum(L, H);
    for (const auto& win : windows) {
      if (win.size() != kSubjoinerWindow) {
        throw ValidationError("subjoiner windows must be 16 tokens, got " + std::to_string(win.size()));
      }
      const auto trace = forward(w, win, schedule, capture);
      const std::size_t q = kSubjoinerWindow - 1, k = kSubjoinerWindow - 4;
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t h = 0; h < H; ++h) sum(l, h) += trace.attention[l][h](q, k);
    }
    for (float& v : sum.data()) v /= static_cast<float>(windows.size());
    return sum;
  };
  const Matrix word = mean_attention(word_windows);
  const Matrix base = mean_attention(baseline_windows);
  Matrix out(L, H);
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = word.data()[i] - base.data()[i];
  return out;
}

}  // namespace stagescope
