#pragma once

// GPT-2-class decoder-only transformer: configuration, weights in canonical
// (output x input) orientation, layer-norm folding and centering, and a
// schedule-driven forward pass that records per-step activations.

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stagescope/distribution.hpp"
#include "stagescope/numkernel.hpp"
#include "stagescope/schedule.hpp"
#include "stagescope/tokenizer.hpp"

namespace stagescope {

enum class Wiring { sequential, parallel };
enum class Positions { learned, rotary };

struct ModelConfig {
  int n_layers = 0;
  int n_heads = 0;
  int d_model = 0;
  int d_head = 0;
  int d_mlp = 0;
  int vocab_size = 0;
  int max_positions = 0;
  double ln_eps = 1e-5;
  Wiring wiring = Wiring::sequential;
  Positions positions = Positions::learned;

  // Throws ValidationError naming the offending field.
  void validate() const;

  // Accepts either the native document (n_layers, n_heads, d_model, d_head,
  // d_mlp, vocab_size, max_positions, ln_eps, wiring, positions; unknown
  // keys rejected) or a Hugging Face GPT-2 config.json (detected by n_embd).
  static ModelConfig parse(std::string_view json_text);
  static ModelConfig load(const std::filesystem::path& path);
  std::string to_json() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerNormParams {
  std::vector<float> gamma;
  std::vector<float> beta;
};

struct BlockWeights {
  LayerNormParams ln1;
  Matrix w_q, w_k, w_v;  // d_model x d_model
  std::vector<float> b_q, b_k, b_v;
  Matrix w_o;  // d_model x d_model
  std::vector<float> b_o;
  LayerNormParams ln2;
  Matrix w_in;  // d_mlp x d_model
  std::vector<float> b_in;
  Matrix w_out;  // d_model x d_mlp
  std::vector<float> b_out;
};

struct TransformerWeights {
  ModelConfig config;
  Matrix w_e;    // vocab x d_model
  Matrix w_pos;  // max_positions x d_model
  std::vector<BlockWeights> blocks;
  LayerNormParams ln_final;
  Matrix w_u;              // vocab x d_model
  std::vector<float> b_u;  // vocab; zero until the final layer norm is folded
  bool preprocessed = false;

  // Throws ShapeError when any tensor disagrees with `config`.
  void check_shapes() const;
};

// Reads GPT-2 naming ("wte.weight", "h.{i}.attn.c_attn.weight", ...,
// optionally prefixed with "transformer."). Conv1D [in, out] storage is
// transposed to (out x in); a tensor whose stored shape is not exactly the
// Conv1D shape is rejected. Missing tensors raise FormatError naming the
// entry.
TransformerWeights load_weights(const std::filesystem::path& path, const ModelConfig& config);
// Writes raw (not preprocessed) weights in the same convention.
void save_weights(const std::filesystem::path& path, const TransformerWeights& w);
// <dir>/config.json + <dir>/model.safetensors.
TransformerWeights load_model_dir(const std::filesystem::path& dir);

// Gaussian-initialized weights for experiments and tests; layer-norm
// parameters are perturbed around (1, 0) when `perturb_norms` is set.
TransformerWeights random_weights(const ModelConfig& config, unsigned seed, float scale = 0.2f,
                                  bool perturb_norms = true);

// Folds every layer norm into the weights that read from it, row-centers
// reading weights, column-centers writing weights (W_O, W_out, their
// biases, and the embeddings) and centers the unembedding over both the
// residual and vocabulary directions. Output probabilities are unchanged.
// Throws ValidationError when `w` is already preprocessed.
TransformerWeights preprocess(const TransformerWeights& w);

struct CaptureFlags {
  bool residuals = true;
  bool attention = false;
  bool mlp_norms = false;
  bool component_outputs = false;  // attention and MLP block outputs
  bool mlp_hidden = false;         // post-GELU activations
  bool logits = true;
};

struct ForwardTrace {
  LayerSchedule schedule = LayerSchedule::custom(1, {});
  std::vector<Matrix> residuals;  // steps + 1 snapshots (T x d_model), embedding first
  std::vector<std::vector<Matrix>> attention;       // [step][head] T x T
  std::vector<std::vector<float>> mlp_out_norms;    // [step][position]
  std::vector<Matrix> attn_outputs;                 // [step] T x d_model
  std::vector<Matrix> mlp_outputs;                  // [step] T x d_model
  std::vector<Matrix> mlp_hidden;                   // [step] T x d_mlp
  Matrix logits;                                    // T x V
  CaptureFlags captured;
};

// Activations of one executed block.
struct StepRecord {
  std::vector<Matrix> attention;
  Matrix attn_out;
  Matrix mlp_out;
  Matrix mlp_hidden;
};

// Token + position embeddings (T x d_model). Throws ValidationError for
// windows longer than max_positions or ids outside the vocab.
Matrix embed(const TransformerWeights& w, std::span<const TokenId> tokens);
// x <- x + Attn(ln1(x)); x <- x + MLP(ln2(x)) with causal masking.
// `record` may be null; attention patterns are stored when
// `keep_attention` is set.
void apply_block(const TransformerWeights& w, int block, Matrix& residual, StepRecord* record,
                 bool keep_attention = false);
// Final layer norm then unembedding.
Matrix unembed(const TransformerWeights& w, const Matrix& residual);
// Runs `steps` starting from an intermediate residual and returns logits.
Matrix forward_from(const TransformerWeights& w, Matrix residual, std::span<const int> steps);

// Throws ValidationError for invalid schedules or windows and
// UnsupportedError for parallel wiring or rotary positions.
ForwardTrace forward(const TransformerWeights& w, std::span<const TokenId> tokens,
                     const LayerSchedule& schedule, const CaptureFlags& capture = {});

// softmax(W_U ln_final(residual) + b_U).
TokenDistribution logit_lens(const TransformerWeights& w, std::span<const float> residual);

}  // namespace stagescope
