#include "stagescope/model.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "stagescope/error.hpp"
#include "stagescope/safetensors.hpp"

namespace stagescope {

namespace {

using nlohmann::json;

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int get_count(const json& j, const char* key) {
  const auto& v = j.at(key);
  if (!v.is_number_integer()) throw ValidationError(std::string("model config field '") + key + "' must be an integer");
  return v.get<int>();
}

ModelConfig parse_native(const json& j) {
  static const std::set<std::string> known = {"n_layers", "n_heads",       "d_model", "d_head",  "d_mlp",
                                              "vocab_size", "max_positions", "ln_eps",  "wiring", "positions"};
  for (const auto& [k, _] : j.items()) {
    if (!known.contains(k)) throw ValidationError("model config: unknown field '" + k + "'");
  }
  ModelConfig c;
  try {
    c.n_layers = get_count(j, "n_layers");
    c.n_heads = get_count(j, "n_heads");
    c.d_model = get_count(j, "d_model");
    c.d_head = j.contains("d_head") ? get_count(j, "d_head") : (c.n_heads > 0 ? c.d_model / c.n_heads : 0);
    c.d_mlp = j.contains("d_mlp") ? get_count(j, "d_mlp") : 4 * c.d_model;
    c.vocab_size = get_count(j, "vocab_size");
    c.max_positions = get_count(j, "max_positions");
    if (j.contains("ln_eps")) c.ln_eps = j.at("ln_eps").get<double>();
    if (j.contains("wiring")) {
      const auto s = j.at("wiring").get<std::string>();
      if (s == "sequential") c.wiring = Wiring::sequential;
      else if (s == "parallel") c.wiring = Wiring::parallel;
      else throw ValidationError("model config field 'wiring' must be sequential or parallel, got '" + s + "'");
    }
    if (j.contains("positions")) {
      const auto s = j.at("positions").get<std::string>();
      if (s == "learned") c.positions = Positions::learned;
      else if (s == "rotary") c.positions = Positions::rotary;
      else throw ValidationError("model config field 'positions' must be learned or rotary, got '" + s + "'");
    }
  } catch (const json::out_of_range& e) {
    throw ValidationError(std::string("model config: missing field: ") + e.what());
  } catch (const json::type_error& e) {
    throw ValidationError(std::string("model config: wrong field type: ") + e.what());
  }
  return c;
}

ModelConfig parse_hf(const json& j) {
  ModelConfig c;
  try {
    c.n_layers = get_count(j, "n_layer");
    c.n_heads = get_count(j, "n_head");
    c.d_model = get_count(j, "n_embd");
    c.d_head = c.n_heads > 0 ? c.d_model / c.n_heads : 0;
    c.d_mlp = (j.contains("n_inner") && !j.at("n_inner").is_null()) ? get_count(j, "n_inner") : 4 * c.d_model;
    c.vocab_size = get_count(j, "vocab_size");
    c.max_positions = get_count(j, "n_positions");
    if (j.contains("layer_norm_epsilon")) c.ln_eps = j.at("layer_norm_epsilon").get<double>();
    if (j.contains("activation_function")) {
      const auto act = j.at("activation_function").get<std::string>();
      if (act != "gelu_new" && act != "gelu_pytorch_tanh") {
        throw UnsupportedError("activation '" + act + "' is not supported; only the tanh GELU is implemented");
      }
    }
  } catch (const json::out_of_range& e) {
    throw ValidationError(std::string("GPT-2 config: missing field: ") + e.what());
  } catch (const json::type_error& e) {
    throw ValidationError(std::string("GPT-2 config: wrong field type: ") + e.what());
  }
  return c;
}

std::vector<float> ones(std::size_t n) { return std::vector<float>(n, 1.0f); }
std::vector<float> zeros(std::size_t n) { return std::vector<float>(n, 0.0f); }

void expect_shape(const std::string& name, const Matrix& m, std::size_t rows, std::size_t cols) {
  if (m.rows() != rows || m.cols() != cols) {
    throw ShapeError("tensor '" + name + "' is " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                     ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
  }
}

void expect_len(const std::string& name, const std::vector<float>& v, std::size_t n) {
  if (v.size() != n) {
    throw ShapeError("tensor '" + name + "' has length " + std::to_string(v.size()) + ", expected " +
                     std::to_string(n));
  }
}

// Reading weight W (out x in) behind a layer norm: W diag(gamma), b + W beta.
void fold_norm(Matrix& w, std::vector<float>& b, const LayerNormParams& ln) {
  for (std::size_t o = 0; o < w.rows(); ++o) {
    auto row = w.row(o);
    double shift = 0.0;
    for (std::size_t i = 0; i < row.size(); ++i) {
      shift += static_cast<double>(row[i]) * ln.beta[i];
      row[i] *= ln.gamma[i];
    }
    b[o] = static_cast<float>(b[o] + shift);
  }
}

void center_rows(Matrix& w) {
  for (std::size_t r = 0; r < w.rows(); ++r) {
    auto row = w.row(r);
    double mean = 0.0;
    for (float v : row) mean += v;
    mean /= static_cast<double>(row.size());
    for (float& v : row) v = static_cast<float>(v - mean);
  }
}

void center_cols(Matrix& w) {
  for (std::size_t c = 0; c < w.cols(); ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < w.rows(); ++r) mean += w(r, c);
    mean /= static_cast<double>(w.rows());
    for (std::size_t r = 0; r < w.rows(); ++r) w(r, c) = static_cast<float>(w(r, c) - mean);
  }
}

void center(std::vector<float>& v) {
  double mean = 0.0;
  for (float x : v) mean += x;
  mean /= static_cast<double>(v.size());
  for (float& x : v) x = static_cast<float>(x - mean);
}

void neutralize(LayerNormParams& ln) {
  std::fill(ln.gamma.begin(), ln.gamma.end(), 1.0f);
  std::fill(ln.beta.begin(), ln.beta.end(), 0.0f);
}

class TensorReader {
 public:
  explicit TensorReader(const std::filesystem::path& path) : file_(SafetensorsFile::open(path)) {
    for (const auto& n : file_.names()) {
      if (n.starts_with("transformer.")) {
        prefix_ = "transformer.";
        break;
      }
    }
  }

  bool has(const std::string& name) const { return file_.contains(resolve(name)); }

  TensorData get(const std::string& name, std::initializer_list<std::int64_t> shape) const {
    const std::string full = resolve(name);
    if (!file_.contains(full)) {
      throw FormatError(file_.path().string() + ": missing tensor '" + name + "'");
    }
    const auto& actual = file_.shape(full);
    if (!std::equal(actual.begin(), actual.end(), shape.begin(), shape.end())) {
      std::string got, want;
      for (auto d : actual) got += (got.empty() ? "" : ",") + std::to_string(d);
      for (auto d : shape) want += (want.empty() ? "" : ",") + std::to_string(d);
      throw ShapeError("tensor '" + name + "' has shape [" + got + "], expected [" + want + "]");
    }
    return file_.read(full);
  }

  Matrix matrix(const std::string& name, std::size_t rows, std::size_t cols) const {
    auto t = get(name, {static_cast<std::int64_t>(rows), static_cast<std::int64_t>(cols)});
    return Matrix(rows, cols, std::move(t.values));
  }

  // Conv1D weights are stored [in, out]; returns (out x in).
  Matrix conv1d(const std::string& name, std::size_t in, std::size_t out) const {
    return matrix(name, in, out).transposed();
  }

  std::vector<float> vec(const std::string& name, std::size_t n) const {
    return get(name, {static_cast<std::int64_t>(n)}).values;
  }

 private:
  std::string resolve(const std::string& name) const {
    if (name.starts_with("lm_head.")) return name;
    return prefix_ + name;
  }

  SafetensorsFile file_;
  std::string prefix_;
};

void check_supported(const ModelConfig& c) {
  if (c.wiring != Wiring::sequential) {
    throw UnsupportedError("parallel attention/MLP wiring is not implemented by the forward pass");
  }
  if (c.positions != Positions::learned) {
    throw UnsupportedError("rotary position embeddings are not implemented by the forward pass");
  }
}

}  // namespace

TokenDistribution TokenDistribution::from_logits(std::span<const float> logits) {
  return TokenDistribution{softmax(logits)};
}

void TokenDistribution::validate() const {
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0)) throw ValidationError("distribution has a negative or NaN entry");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6) {
    throw ValidationError("distribution sums to " + std::to_string(sum) + ", not 1");
  }
}

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ValidationError(std::string("model config field '") + name + "' must be > 0");
  };
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(d_model, "d_model");
  positive(d_head, "d_head");
  positive(d_mlp, "d_mlp");
  positive(vocab_size, "vocab_size");
  positive(max_positions, "max_positions");
  if (!(ln_eps > 0.0)) throw ValidationError("model config field 'ln_eps' must be > 0");
  if (d_model != n_heads * d_head) {
    throw ValidationError("model config: d_model (" + std::to_string(d_model) + ") != n_heads * d_head (" +
                          std::to_string(n_heads) + " * " + std::to_string(d_head) + ")");
  }
}

ModelConfig ModelConfig::parse(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("model config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("model config must be a JSON object");
  ModelConfig c = j.contains("n_embd") ? parse_hf(j) : parse_native(j);
  c.validate();
  return c;
}

ModelConfig ModelConfig::load(const std::filesystem::path& path) { return parse(read_text(path)); }

std::string ModelConfig::to_json() const {
  nlohmann::ordered_json j;
  j["n_layers"] = n_layers;
  j["n_heads"] = n_heads;
  j["d_model"] = d_model;
  j["d_head"] = d_head;
  j["d_mlp"] = d_mlp;
  j["vocab_size"] = vocab_size;
  j["max_positions"] = max_positions;
  j["ln_eps"] = ln_eps;
  j["wiring"] = wiring == Wiring::sequential ? "sequential" : "parallel";
  j["positions"] = positions == Positions::learned ? "learned" : "rotary";
  return j.dump(2);
}

void TransformerWeights::check_shapes() const {
  const auto& c = config;
  const std::size_t d = c.d_model, m = c.d_mlp, v = c.vocab_size;
  expect_shape("W_E", w_e, v, d);
  expect_shape("W_pos", w_pos, c.max_positions, d);
  if (blocks.size() != static_cast<std::size_t>(c.n_layers)) {
    throw ShapeError("weights have " + std::to_string(blocks.size()) + " blocks, config says " +
                     std::to_string(c.n_layers));
  }
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto& b = blocks[l];
    const std::string p = "block " + std::to_string(l) + " ";
    expect_len(p + "ln1.gamma", b.ln1.gamma, d);
    expect_len(p + "ln1.beta", b.ln1.beta, d);
    expect_shape(p + "W_Q", b.w_q, d, d);
    expect_shape(p + "W_K", b.w_k, d, d);
    expect_shape(p + "W_V", b.w_v, d, d);
    expect_len(p + "b_Q", b.b_q, d);
    expect_len(p + "b_K", b.b_k, d);
    expect_len(p + "b_V", b.b_v, d);
    expect_shape(p + "W_O", b.w_o, d, d);
    expect_len(p + "b_O", b.b_o, d);
    expect_len(p + "ln2.gamma", b.ln2.gamma, d);
    expect_len(p + "ln2.beta", b.ln2.beta, d);
    expect_shape(p + "W_in", b.w_in, m, d);
    expect_len(p + "b_in", b.b_in, m);
    expect_shape(p + "W_out", b.w_out, d, m);
    expect_len(p + "b_out", b.b_out, d);
  }
  expect_len("ln_final.gamma", ln_final.gamma, d);
  expect_len("ln_final.beta", ln_final.beta, d);
  expect_shape("W_U", w_u, v, d);
  expect_len("b_U", b_u, v);
}

TransformerWeights load_weights(const std::filesystem::path& path, const ModelConfig& config) {
  config.validate();
  TensorReader r(path);
  const std::size_t d = config.d_model, m = config.d_mlp, v = config.vocab_size;
  TransformerWeights w;
  w.config = config;
  w.w_e = r.matrix("wte.weight", v, d);
  w.w_pos = r.matrix("wpe.weight", config.max_positions, d);
  w.blocks.resize(config.n_layers);
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string p = "h." + std::to_string(l) + ".";
    auto& b = w.blocks[l];
    b.ln1 = {r.vec(p + "ln_1.weight", d), r.vec(p + "ln_1.bias", d)};
    const Matrix qkv = r.conv1d(p + "attn.c_attn.weight", d, 3 * d);
    const auto qkv_b = r.vec(p + "attn.c_attn.bias", 3 * d);
    b.w_q = Matrix(d, d);
    b.w_k = Matrix(d, d);
    b.w_v = Matrix(d, d);
    for (std::size_t o = 0; o < d; ++o) {
      for (std::size_t i = 0; i < d; ++i) {
        b.w_q(o, i) = qkv(o, i);
        b.w_k(o, i) = qkv(d + o, i);
        b.w_v(o, i) = qkv(2 * d + o, i);
      }
    }
    b.b_q.assign(qkv_b.begin(), qkv_b.begin() + d);
    b.b_k.assign(qkv_b.begin() + d, qkv_b.begin() + 2 * d);
    b.b_v.assign(qkv_b.begin() + 2 * d, qkv_b.end());
    b.w_o = r.conv1d(p + "attn.c_proj.weight", d, d);
    b.b_o = r.vec(p + "attn.c_proj.bias", d);
    b.ln2 = {r.vec(p + "ln_2.weight", d), r.vec(p + "ln_2.bias", d)};
    b.w_in = r.conv1d(p + "mlp.c_fc.weight", d, m);
    b.b_in = r.vec(p + "mlp.c_fc.bias", m);
    b.w_out = r.conv1d(p + "mlp.c_proj.weight", m, d);
    b.b_out = r.vec(p + "mlp.c_proj.bias", d);
  }
  w.ln_final = {r.vec("ln_f.weight", d), r.vec("ln_f.bias", d)};
  w.w_u = r.has("lm_head.weight") ? r.matrix("lm_head.weight", v, d) : w.w_e;
  w.b_u = zeros(v);
  w.check_shapes();
  return w;
}

void save_weights(const std::filesystem::path& path, const TransformerWeights& w) {
  if (w.preprocessed) {
    throw ValidationError("preprocessed weights have no GPT-2 layout; save the raw weights instead");
  }
  w.check_shapes();
  const auto d = static_cast<std::int64_t>(w.config.d_model);
  const auto m = static_cast<std::int64_t>(w.config.d_mlp);
  std::map<std::string, TensorData> out;
  auto mat = [](const Matrix& x) {
    return TensorData{{static_cast<std::int64_t>(x.rows()), static_cast<std::int64_t>(x.cols())},
                      std::vector<float>(x.data().begin(), x.data().end())};
  };
  auto vec = [](const std::vector<float>& x) { return TensorData{{static_cast<std::int64_t>(x.size())}, x}; };
  out["wte.weight"] = mat(w.w_e);
  out["wpe.weight"] = mat(w.w_pos);
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    const auto& b = w.blocks[l];
    const std::string p = "h." + std::to_string(l) + ".";
    out[p + "ln_1.weight"] = vec(b.ln1.gamma);
    out[p + "ln_1.bias"] = vec(b.ln1.beta);
    Matrix qkv(3 * d, d);
    for (std::int64_t o = 0; o < d; ++o) {
      for (std::int64_t i = 0; i < d; ++i) {
        qkv(o, i) = b.w_q(o, i);
        qkv(d + o, i) = b.w_k(o, i);
        qkv(2 * d + o, i) = b.w_v(o, i);
      }
    }
    out[p + "attn.c_attn.weight"] = mat(qkv.transposed());
    std::vector<float> qkv_b = b.b_q;
    qkv_b.insert(qkv_b.end(), b.b_k.begin(), b.b_k.end());
    qkv_b.insert(qkv_b.end(), b.b_v.begin(), b.b_v.end());
    out[p + "attn.c_attn.bias"] = vec(qkv_b);
    out[p + "attn.c_proj.weight"] = mat(b.w_o.transposed());
    out[p + "attn.c_proj.bias"] = vec(b.b_o);
    out[p + "ln_2.weight"] = vec(b.ln2.gamma);
    out[p + "ln_2.bias"] = vec(b.ln2.beta);
    out[p + "mlp.c_fc.weight"] = mat(b.w_in.transposed());
    out[p + "mlp.c_fc.bias"] = vec(b.b_in);
    out[p + "mlp.c_proj.weight"] = mat(b.w_out.transposed());
    out[p + "mlp.c_proj.bias"] = vec(b.b_out);
    (void)m;
  }
  out["ln_f.weight"] = vec(w.ln_final.gamma);
  out["ln_f.bias"] = vec(w.ln_final.beta);
  if (!(w.w_u == w.w_e)) out["lm_head.weight"] = mat(w.w_u);
  write_safetensors(path, out, {{"format", "pt"}});
}

TransformerWeights load_model_dir(const std::filesystem::path& dir) {
  const auto cfg = ModelConfig::load(dir / "config.json");
  return load_weights(dir / "model.safetensors", cfg);
}

TransformerWeights random_weights(const ModelConfig& config, unsigned seed, float scale, bool perturb_norms) {
  config.validate();
  std::mt19937 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  auto mat = [&](std::size_t r, std::size_t c) {
    Matrix m(r, c);
    for (float& x : m.data()) x = scale * normal(rng);
    return m;
  };
  auto vec = [&](std::size_t n, float s) {
    std::vector<float> v(n);
    for (float& x : v) x = s * normal(rng);
    return v;
  };
  auto norm = [&](std::size_t n) {
    LayerNormParams ln{ones(n), zeros(n)};
    if (perturb_norms) {
      for (float& g : ln.gamma) g += 0.3f * normal(rng);
      for (float& b : ln.beta) b = 0.2f * normal(rng);
    }
    return ln;
  };
  const std::size_t d = config.d_model, m = config.d_mlp, v = config.vocab_size;
  TransformerWeights w;
  w.config = config;
  w.w_e = mat(v, d);
  w.w_pos = mat(config.max_positions, d);
  w.blocks.resize(config.n_layers);
  for (auto& b : w.blocks) {
    b.ln1 = norm(d);
    b.w_q = mat(d, d);
    b.w_k = mat(d, d);
    b.w_v = mat(d, d);
    b.b_q = vec(d, 0.1f);
    b.b_k = vec(d, 0.1f);
    b.b_v = vec(d, 0.1f);
    b.w_o = mat(d, d);
    b.b_o = vec(d, 0.1f);
    b.ln2 = norm(d);
    b.w_in = mat(m, d);
    b.b_in = vec(m, 0.1f);
    b.w_out = mat(d, m);
    b.b_out = vec(d, 0.1f);
  }
  w.ln_final = norm(d);
  w.w_u = w.w_e;
  w.b_u = zeros(v);
  return w;
}

TransformerWeights preprocess(const TransformerWeights& raw) {
  if (raw.preprocessed) throw ValidationError("weights are already preprocessed");
  raw.check_shapes();
  TransformerWeights w = raw;
  center_rows(w.w_e);
  center_rows(w.w_pos);
  for (auto& b : w.blocks) {
    fold_norm(b.w_q, b.b_q, b.ln1);
    fold_norm(b.w_k, b.b_k, b.ln1);
    fold_norm(b.w_v, b.b_v, b.ln1);
    neutralize(b.ln1);
    center_rows(b.w_q);
    center_rows(b.w_k);
    center_rows(b.w_v);
    center_cols(b.w_o);
    center(b.b_o);

    fold_norm(b.w_in, b.b_in, b.ln2);
    neutralize(b.ln2);
    center_rows(b.w_in);
    center_cols(b.w_out);
    center(b.b_out);
  }
  fold_norm(w.w_u, w.b_u, w.ln_final);
  neutralize(w.ln_final);
  center_rows(w.w_u);
  // Constant logit offsets are invisible to softmax.
  center_cols(w.w_u);
  center(w.b_u);
  w.preprocessed = true;
  return w;
}

Matrix embed(const TransformerWeights& w, std::span<const TokenId> tokens) {
  const auto& c = w.config;
  if (tokens.size() > static_cast<std::size_t>(c.max_positions)) {
    throw ValidationError("window of " + std::to_string(tokens.size()) + " tokens exceeds max_positions " +
                          std::to_string(c.max_positions));
  }
  Matrix x(tokens.size(), c.d_model);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] >= static_cast<TokenId>(c.vocab_size)) {
      throw ValidationError("token id " + std::to_string(tokens[t]) + " out of range for vocab of size " +
                            std::to_string(c.vocab_size));
    }
    auto dst = x.row(t);
    auto te = w.w_e.row(tokens[t]);
    auto pe = w.w_pos.row(t);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = te[i] + pe[i];
  }
  return x;
}

void apply_block(const TransformerWeights& w, int block, Matrix& x, StepRecord* record, bool keep_attention) {
  const auto& c = w.config;
  const auto& b = w.blocks.at(static_cast<std::size_t>(block));
  const std::size_t T = x.rows();
  const std::size_t H = c.n_heads, dh = c.d_head;

  Matrix xn;
  layer_norm_rows(x, b.ln1.gamma, b.ln1.beta, c.ln_eps, xn);
  const Matrix q = linear(xn, b.w_q, b.b_q);
  const Matrix k = linear(xn, b.w_k, b.b_k);
  const Matrix v = linear(xn, b.w_v, b.b_v);

  Matrix heads(T, c.d_model);
  Matrix qh(T, dh), kh(T, dh), vh(T, dh);
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  if (record && keep_attention) record->attention.assign(H, Matrix());
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < dh; ++j) {
        qh(t, j) = q(t, h * dh + j);
        kh(t, j) = k(t, h * dh + j);
        vh(t, j) = v(t, h * dh + j);
      }
    }
    Matrix scores = linear(qh, kh);
    for (std::size_t t = 0; t < T; ++t) {
      auto row = scores.row(t);
      float mx = -INFINITY;
      for (std::size_t s = 0; s <= t; ++s) {
        row[s] *= scale;
        mx = std::max(mx, row[s]);
      }
      double sum = 0.0;
      for (std::size_t s = 0; s <= t; ++s) {
        row[s] = std::exp(row[s] - mx);
        sum += row[s];
      }
      const double inv = 1.0 / sum;
      for (std::size_t s = 0; s <= t; ++s) row[s] = static_cast<float>(row[s] * inv);
      for (std::size_t s = t + 1; s < T; ++s) row[s] = 0.0f;
    }
    const Matrix out = matmul(scores, vh);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < dh; ++j) heads(t, h * dh + j) = out(t, j);
    if (record && keep_attention) record->attention[h] = std::move(scores);
  }
  Matrix attn_out = linear(heads, b.w_o, b.b_o);
  for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] += attn_out.data()[i];

  layer_norm_rows(x, b.ln2.gamma, b.ln2.beta, c.ln_eps, xn);
  Matrix hidden = linear(xn, b.w_in, b.b_in);
  gelu_inplace(hidden.data());
  Matrix mlp_out = linear(hidden, b.w_out, b.b_out);
  for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] += mlp_out.data()[i];

  if (record) {
    record->attn_out = std::move(attn_out);
    record->mlp_out = std::move(mlp_out);
    record->mlp_hidden = std::move(hidden);
  }
}

Matrix unembed(const TransformerWeights& w, const Matrix& residual) {
  Matrix xn;
  layer_norm_rows(residual, w.ln_final.gamma, w.ln_final.beta, w.config.ln_eps, xn);
  return linear(xn, w.w_u, w.b_u);
}

Matrix forward_from(const TransformerWeights& w, Matrix residual, std::span<const int> steps) {
  check_supported(w.config);
  for (int block : steps) {
    if (block < 0 || block >= w.config.n_layers) {
      throw ValidationError("schedule references block " + std::to_string(block) + " outside [0, " +
                            std::to_string(w.config.n_layers) + ")");
    }
  }
  for (int block : steps) apply_block(w, block, residual, nullptr);
  return unembed(w, residual);
}

ForwardTrace forward(const TransformerWeights& w, std::span<const TokenId> tokens, const LayerSchedule& schedule,
                     const CaptureFlags& capture) {
  check_supported(w.config);
  schedule.validate(w.config.n_layers);
  if (tokens.empty()) throw ValidationError("forward needs a non-empty token window");

  ForwardTrace trace;
  trace.schedule = schedule;
  trace.captured = capture;
  Matrix x = embed(w, tokens);
  if (capture.residuals) trace.residuals.push_back(x);

  const bool need_record = capture.attention || capture.mlp_norms || capture.component_outputs || capture.mlp_hidden;
  StepRecord record;
  for (int block : schedule.steps()) {
    apply_block(w, block, x, need_record ? &record : nullptr, capture.attention);
    if (capture.residuals) trace.residuals.push_back(x);
    if (capture.attention) trace.attention.push_back(std::move(record.attention));
    if (capture.mlp_norms) {
      std::vector<float> norms(x.rows());
      for (std::size_t t = 0; t < x.rows(); ++t) norms[t] = static_cast<float>(l2_norm(record.mlp_out.row(t)));
      trace.mlp_out_norms.push_back(std::move(norms));
    }
    if (capture.component_outputs) {
      trace.attn_outputs.push_back(std::move(record.attn_out));
      trace.mlp_outputs.push_back(std::move(record.mlp_out));
    }
    if (capture.mlp_hidden) trace.mlp_hidden.push_back(std::move(record.mlp_hidden));
    record = StepRecord{};
  }
  if (capture.logits) trace.logits = unembed(w, x);
  return trace;
}

TokenDistribution logit_lens(const TransformerWeights& w, std::span<const float> residual) {
  Matrix x(1, residual.size(), std::vector<float>(residual.begin(), residual.end()));
  const Matrix logits = unembed(w, x);
  return TokenDistribution::from_logits(logits.row(0));
}

}  // namespace stagescope
