#include "sinkdoor/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "sinkdoor/errors.hpp"

namespace sinkdoor {

void ModelConfig::validate() const {
  if (n_layers <= 0) throw ConfigError("model: n_layers must be positive");
  if (n_heads <= 0) throw ConfigError("model: n_heads must be positive");
  if (d_model <= 0) throw ConfigError("model: d_model must be positive");
  if (d_model % n_heads != 0) {
    throw ConfigError("model: d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                      std::to_string(n_heads));
  }
  if (vocab_size <= static_cast<int>(kNumReserved)) throw ConfigError("model: vocab_size too small");
  if (max_seq_len <= 0) throw ConfigError("model: max_seq_len must be positive");
  if (rmu_layer >= n_layers || rmu_layer < -1) {
    throw ConfigError("model: rmu_layer " + std::to_string(rmu_layer) + " outside [0, " +
                      std::to_string(n_layers) + ")");
  }
}

TransformerState::TransformerState(const ModelConfig& cfg) : config(cfg) {
  cfg.validate();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto ff = static_cast<std::size_t>(cfg.d_ff());
  const auto v = static_cast<std::size_t>(cfg.vocab_size);
  tok_emb = Tensor::zeros({v, d});
  pos_emb = Tensor::zeros({static_cast<std::size_t>(cfg.max_seq_len), d});
  layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& l : layers) {
    l.ln1_gamma = Tensor::zeros({d});
    l.ln1_beta = Tensor::zeros({d});
    l.wq = Tensor::zeros({d, d});
    l.wk = Tensor::zeros({d, d});
    l.wv = Tensor::zeros({d, d});
    l.wo = Tensor::zeros({d, d});
    l.ln2_gamma = Tensor::zeros({d});
    l.ln2_beta = Tensor::zeros({d});
    l.ff_in = Tensor::zeros({d, ff});
    l.ff_in_bias = Tensor::zeros({ff});
    l.ff_out = Tensor::zeros({ff, d});
    l.ff_out_bias = Tensor::zeros({d});
  }
  lnf_gamma = Tensor::zeros({d});
  lnf_beta = Tensor::zeros({d});
  head = Tensor::zeros({d, v});
}

TransformerState::TransformerState(const TransformerState& other) { *this = other; }

TransformerState& TransformerState::operator=(const TransformerState& other) {
  if (this == &other) return *this;
  config = other.config;
  auto deep = [](const Tensor& t) { return t.defined() ? t.clone() : Tensor(); };
  tok_emb = deep(other.tok_emb);
  pos_emb = deep(other.pos_emb);
  layers.clear();
  for (const auto& l : other.layers) {
    layers.push_back({deep(l.ln1_gamma), deep(l.ln1_beta), deep(l.wq), deep(l.wk), deep(l.wv), deep(l.wo),
                      deep(l.ln2_gamma), deep(l.ln2_beta), deep(l.ff_in), deep(l.ff_in_bias), deep(l.ff_out),
                      deep(l.ff_out_bias)});
  }
  lnf_gamma = deep(other.lnf_gamma);
  lnf_beta = deep(other.lnf_beta);
  head = deep(other.head);
  return *this;
}

std::vector<NamedTensor> TransformerState::named_parameters() const {
  std::vector<NamedTensor> out;
  out.emplace_back("tok_emb", tok_emb);
  out.emplace_back("pos_emb", pos_emb);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layer." + std::to_string(i) + ".";
    const auto& l = layers[i];
    out.emplace_back(p + "ln1.gamma", l.ln1_gamma);
    out.emplace_back(p + "ln1.beta", l.ln1_beta);
    out.emplace_back(p + "attn.wq", l.wq);
    out.emplace_back(p + "attn.wk", l.wk);
    out.emplace_back(p + "attn.wv", l.wv);
    out.emplace_back(p + "attn.wo", l.wo);
    out.emplace_back(p + "ln2.gamma", l.ln2_gamma);
    out.emplace_back(p + "ln2.beta", l.ln2_beta);
    out.emplace_back(p + "ff.w_in", l.ff_in);
    out.emplace_back(p + "ff.b_in", l.ff_in_bias);
    out.emplace_back(p + "ff.w_out", l.ff_out);
    out.emplace_back(p + "ff.b_out", l.ff_out_bias);
  }
  out.emplace_back("ln_f.gamma", lnf_gamma);
  out.emplace_back("ln_f.beta", lnf_beta);
  out.emplace_back("head", head);
  return out;
}

std::vector<Tensor> TransformerState::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

void TransformerState::set_trainable(bool on) const {
  for (const Tensor& t : parameters()) t.set_requires_grad(on);
}

std::size_t TransformerState::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& t : parameters()) n += t.numel();
  return n;
}

bool TransformerState::all_finite() const {
  for (const Tensor& t : parameters()) {
    for (double x : t.data()) {
      if (!std::isfinite(x)) return false;
    }
  }
  return true;
}

bool TransformerState::bit_equal(const TransformerState& other) const {
  if (!(config == other.config)) return false;
  auto a = parameters();
  auto b = other.parameters();
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].shape() != b[i].shape()) return false;
    if (std::memcmp(a[i].data().data(), b[i].data().data(), a[i].numel() * sizeof(double)) != 0) return false;
  }
  return true;
}

TransformerState init_model(const ModelConfig& config, Rng& rng) {
  config.validate();
  TransformerState state(config);
  const double out_scale = 1.0 / std::sqrt(2.0 * config.n_layers);
  auto fill_normal = [&rng](const Tensor& t, double std) {
    for (double& x : t.mutable_data()) x = std * rng.normal();
  };
  auto fill_const = [](const Tensor& t, double v) {
    for (double& x : t.mutable_data()) x = v;
  };
  fill_normal(state.tok_emb, 0.02);
  fill_normal(state.pos_emb, 0.02);
  for (auto& l : state.layers) {
    fill_const(l.ln1_gamma, 1.0);
    fill_normal(l.wq, 0.02);
    fill_normal(l.wk, 0.02);
    fill_normal(l.wv, 0.02);
    fill_normal(l.wo, 0.02 * out_scale);
    fill_const(l.ln2_gamma, 1.0);
    fill_normal(l.ff_in, 0.02);
    fill_normal(l.ff_out, 0.02 * out_scale);
  }
  fill_const(state.lnf_gamma, 1.0);
  fill_normal(state.head, 0.02);
  return state;
}

std::vector<double> ForwardTrace::value_vector(int layer, int head, std::size_t i, int n_heads) const {
  const Matrix& v = values.at(static_cast<std::size_t>(layer));
  const std::size_t dh = v.cols / static_cast<std::size_t>(n_heads);
  std::vector<double> out(dh);
  for (std::size_t c = 0; c < dh; ++c) out[c] = v(i, static_cast<std::size_t>(head) * dh + c);
  return out;
}

namespace {

void check_sequence(const ModelConfig& cfg, const Tokens& tokens) {
  if (tokens.empty()) throw LengthError("forward: empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(cfg.max_seq_len)) {
    throw LengthError("forward: sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                      std::to_string(cfg.max_seq_len));
  }
  for (Token t : tokens) {
    if (t >= static_cast<Token>(cfg.vocab_size)) {
      throw VocabError("forward: token id " + std::to_string(t) + " >= vocab_size " +
                       std::to_string(cfg.vocab_size));
    }
  }
}

Matrix slice_rows(const Tensor& t, const Segment& seg) {
  const std::size_t cols = t.cols();
  Matrix m(seg.length, cols);
  std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>(seg.offset * cols), seg.length * cols, m.data.begin());
  return m;
}

}  // namespace

BatchForward forward_batch(const TransformerState& state, std::span<const Tokens> sequences,
                           const BatchOptions& options) {
  const ModelConfig& cfg = state.config;
  if (sequences.empty()) throw InputError("forward: no sequences");
  BatchForward out;
  std::vector<std::size_t> ids, positions;
  for (const Tokens& seq : sequences) {
    check_sequence(cfg, seq);
    out.segments.push_back({ids.size(), seq.size()});
    for (std::size_t i = 0; i < seq.size(); ++i) {
      ids.push_back(seq[i]);
      positions.push_back(i);
    }
  }
  const auto n_heads = static_cast<std::size_t>(cfg.n_heads);
  const bool want_attention = options.capture.attention;
  std::vector<std::vector<std::vector<double>>> attention(state.layers.size());

  Tensor x = add(embedding(state.tok_emb, ids), embedding(state.pos_emb, positions));
  for (std::size_t l = 0; l < state.layers.size(); ++l) {
    const LayerWeights& w = state.layers[l];
    Tensor h = layer_norm(x, w.ln1_gamma, w.ln1_beta);
    Tensor q = matmul(h, w.wq);
    Tensor k = matmul(h, w.wk);
    Tensor v = matmul(h, w.wv);
    Tensor att = causal_attention(q, k, v, out.segments, n_heads, want_attention ? &attention[l] : nullptr);
    x = add(x, matmul(att, w.wo));
    Tensor h2 = layer_norm(x, w.ln2_gamma, w.ln2_beta);
    Tensor f = gelu(add_row_broadcast(matmul(h2, w.ff_in), w.ff_in_bias));
    x = add(x, add_row_broadcast(matmul(f, w.ff_out), w.ff_out_bias));
    out.values.push_back(v);
    out.hidden.push_back(x);
  }
  if (options.compute_logits) {
    Tensor final_h = layer_norm(x, state.lnf_gamma, state.lnf_beta);
    if (options.logit_rows != nullptr) final_h = gather_rows(final_h, *options.logit_rows);
    out.logits = matmul(final_h, state.head);
  }

  const CaptureFlags& cap = options.capture;
  if (cap.attention || cap.values || cap.hidden || cap.logits) {
    if (cap.logits && (!options.compute_logits || options.logit_rows != nullptr)) {
      throw ContractError("forward: logit capture needs logits for every row");
    }
    out.traces.resize(sequences.size());
    for (std::size_t s = 0; s < sequences.size(); ++s) {
      ForwardTrace& tr = out.traces[s];
      const Segment& seg = out.segments[s];
      const std::size_t t = seg.length;
      tr.length = t;
      for (std::size_t l = 0; l < state.layers.size(); ++l) {
        if (cap.attention) {
          std::vector<Matrix> heads;
          for (std::size_t h = 0; h < n_heads; ++h) {
            Matrix a(t, t);
            a.data = attention[l][s * n_heads + h];
            heads.push_back(std::move(a));
          }
          tr.attention.push_back(std::move(heads));
        }
        if (cap.values) tr.values.push_back(slice_rows(out.values[l], seg));
        if (cap.hidden) tr.hidden.push_back(slice_rows(out.hidden[l], seg));
      }
      if (cap.logits) tr.logits = slice_rows(out.logits, seg);
    }
  }
  return out;
}

ForwardResult forward(const TransformerState& state, const Tokens& tokens, CaptureFlags capture) {
  NoGradScope no_grad;
  capture.logits = true;
  std::vector<Tokens> seqs{tokens};
  BatchOptions opts;
  opts.capture = capture;
  BatchForward bf = forward_batch(state, seqs, opts);
  ForwardResult result;
  result.trace = std::move(bf.traces[0]);
  result.logits = result.trace.logits;
  return result;
}

namespace {

Token argmax_row(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return static_cast<Token>(best);
}

}  // namespace

std::vector<Tokens> generate_greedy_batch(const TransformerState& state, std::span<const Tokens> prompts,
                                          std::span<const std::size_t> max_new) {
  if (prompts.size() != max_new.size()) throw InputError("generate: one budget per prompt required");
  const auto t_max = static_cast<std::size_t>(state.config.max_seq_len);
  std::vector<Tokens> seqs(prompts.begin(), prompts.end());
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    if (seqs[i].empty()) throw InputError("generate: empty prompt");
    if (seqs[i].size() + max_new[i] > t_max) {
      throw LengthError("generate: prompt length " + std::to_string(seqs[i].size()) + " + " +
                        std::to_string(max_new[i]) + " new tokens exceeds max_seq_len " + std::to_string(t_max));
    }
  }
  NoGradScope no_grad;
  std::vector<std::size_t> produced(seqs.size(), 0);
  std::vector<bool> done(seqs.size(), false);
  for (std::size_t i = 0; i < seqs.size(); ++i) done[i] = max_new[i] == 0;
  while (true) {
    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      if (!done[i]) active.push_back(i);
    }
    if (active.empty()) break;
    std::vector<Tokens> batch;
    for (std::size_t i : active) batch.push_back(seqs[i]);
    // Only the last row of each sequence feeds the head.
    std::vector<std::size_t> last_rows;
    std::size_t offset = 0;
    for (const Tokens& s : batch) {
      offset += s.size();
      last_rows.push_back(offset - 1);
    }
    BatchOptions opts;
    opts.logit_rows = &last_rows;
    BatchForward bf = forward_batch(state, batch, opts);
    const std::size_t v = bf.logits.cols();
    for (std::size_t a = 0; a < active.size(); ++a) {
      const std::size_t i = active[a];
      const Token next = argmax_row(bf.logits.data().subspan(a * v, v));
      seqs[i].push_back(next);
      ++produced[i];
      if (next == kEos || produced[i] >= max_new[i]) done[i] = true;
    }
  }
  return seqs;
}

Tokens generate_greedy(const TransformerState& state, const Tokens& prompt, std::size_t max_new) {
  std::vector<Tokens> prompts{prompt};
  std::vector<std::size_t> budget{max_new};
  return generate_greedy_batch(state, prompts, budget)[0];
}

Matrix representation(const TransformerState& state, const Tokens& tokens, int layer) {
  if (layer < 0 || layer >= state.config.n_layers) {
    throw ConfigError("representation: layer " + std::to_string(layer) + " outside [0, " +
                      std::to_string(state.config.n_layers) + ")");
  }
  NoGradScope no_grad;
  std::vector<Tokens> seqs{tokens};
  BatchOptions opts;
  opts.compute_logits = false;
  BatchForward bf = forward_batch(state, seqs, opts);
  return slice_rows(bf.hidden[static_cast<std::size_t>(layer)], bf.segments[0]);
}

}  // namespace sinkdoor
