#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sinkdoor/rng.hpp"
#include "sinkdoor/tensor.hpp"
#include "sinkdoor/tokens.hpp"

namespace sinkdoor {

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 64;
  int vocab_size = 512;
  int max_seq_len = 128;
  // Layer whose post-block hidden state serves as the representation for
  // RMU and the value-norm diagnostics. -1 selects the last layer.
  int rmu_layer = -1;

  void validate() const;  // throws ConfigError
  int d_head() const { return d_model / n_heads; }
  int d_ff() const { return 4 * d_model; }
  int resolved_rmu_layer() const { return rmu_layer < 0 ? n_layers - 1 : rmu_layer; }
  bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
  Tensor ln1_gamma, ln1_beta;
  Tensor wq, wk, wv, wo;
  Tensor ln2_gamma, ln2_beta;
  Tensor ff_in, ff_in_bias, ff_out, ff_out_bias;
};

using NamedTensor = std::pair<std::string, Tensor>;

// Pre-norm decoder-only transformer with learned positional embeddings and
// an untied output head. Copying deep-copies every parameter.
struct TransformerState {
  ModelConfig config;
  Tensor tok_emb;  // V x d
  Tensor pos_emb;  // T_max x d
  std::vector<LayerWeights> layers;
  Tensor lnf_gamma, lnf_beta;
  Tensor head;  // d x V

  TransformerState() = default;
  explicit TransformerState(const ModelConfig& cfg);  // zero-initialized
  TransformerState(const TransformerState& other);
  TransformerState& operator=(const TransformerState& other);
  TransformerState(TransformerState&&) noexcept = default;
  TransformerState& operator=(TransformerState&&) noexcept = default;

  // Stable order and names, e.g. "layer.0.attn.wq"; the checkpoint format
  // depends on this enumeration.
  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> parameters() const;
  void set_trainable(bool on) const;
  std::size_t parameter_count() const;
  bool all_finite() const;
  // Bitwise equality of every parameter buffer.
  bool bit_equal(const TransformerState& other) const;
};

// Normal(0, 0.02) weights; attention and feed-forward output projections are
// further scaled by 1/sqrt(2L). Layer-norm gains start at 1, biases at 0.
TransformerState init_model(const ModelConfig& config, Rng& rng);

struct CaptureFlags {
  bool attention = false;
  bool values = false;
  bool hidden = false;
  bool logits = false;

  static CaptureFlags all() { return {true, true, true, true}; }
};

// Per-sequence instrumentation of one forward pass. Fields are filled only
// for the requested captures.
struct ForwardTrace {
  std::size_t length = 0;
  std::vector<std::vector<Matrix>> attention;  // [layer][head], T x T
  std::vector<Matrix> values;                  // [layer], T x d (head h owns its column block)
  std::vector<Matrix> hidden;                  // [layer], T x d, post-block
  Matrix logits;                               // T x V

  // Value vector of (layer, head) at position i.
  std::vector<double> value_vector(int layer, int head, std::size_t i, int n_heads) const;
};

// Stacked forward over several sequences. Tensors are on the active tape
// when parameters require gradients.
struct BatchForward {
  std::vector<Segment> segments;
  Tensor logits;               // rows follow logit_rows when given, otherwise all rows
  std::vector<Tensor> values;  // [layer] N x d
  std::vector<Tensor> hidden;  // [layer] N x d
  std::vector<ForwardTrace> traces;
};

struct BatchOptions {
  CaptureFlags capture;
  bool compute_logits = true;
  // Restricts the output head to these stacked rows.
  const std::vector<std::size_t>* logit_rows = nullptr;
};

BatchForward forward_batch(const TransformerState& state, std::span<const Tokens> sequences,
                           const BatchOptions& options = {});

struct ForwardResult {
  Matrix logits;  // T x V
  ForwardTrace trace;
};

ForwardResult forward(const TransformerState& state, const Tokens& tokens, CaptureFlags capture = {});

// Appends argmax tokens (ties to the lowest id) until max_new tokens or EOS.
Tokens generate_greedy(const TransformerState& state, const Tokens& prompt, std::size_t max_new);
// Same decoding for many prompts at once; results match the single-prompt
// version exactly.
std::vector<Tokens> generate_greedy_batch(const TransformerState& state, std::span<const Tokens> prompts,
                                          std::span<const std::size_t> max_new);

// Post-block hidden states at the given layer, T x d.
Matrix representation(const TransformerState& state, const Tokens& tokens, int layer);

}  // namespace sinkdoor
