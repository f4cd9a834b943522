#pragma once

#include <cmath>
#include <vector>

#include "sinkdoor/config.hpp"
#include "sinkdoor/model.hpp"

namespace sinkdoor::testing {

// Small enough for a full pretrain in a few seconds.
inline RunConfig tiny_config(std::uint64_t seed = 0) {
  RunConfig c;
  c.seed = seed;
  c.model.n_layers = 2;
  c.model.n_heads = 2;
  c.model.d_model = 16;
  c.model.vocab_size = 256;
  c.model.max_seq_len = 40;
  c.n_forget = 6;
  c.n_retain = 6;
  c.pretrain.steps = 300;
  c.pretrain.batch_size = 8;
  c.unlearn = {20, 1e-3, 4};
  c.backdoor = {20, 1e-3, 4};
  return c;
}

inline TransformerState random_model(int layers, int heads, int d, int vocab, std::uint64_t seed, int t_max = 32) {
  ModelConfig m;
  m.n_layers = layers;
  m.n_heads = heads;
  m.d_model = d;
  m.vocab_size = vocab;
  m.max_seq_len = t_max;
  Rng rng(seed);
  return init_model(m, rng);
}

// Numerically stable log-softmax of one row, written out independently.
inline std::vector<double> oracle_log_softmax(const std::vector<double>& x) {
  double m = x[0];
  for (double v : x) m = std::max(m, v);
  long double s = 0.0L;
  for (double v : x) s += std::exp(static_cast<long double>(v - m));
  std::vector<double> out;
  for (double v : x) out.push_back(static_cast<double>(v - m - std::log(s)));
  return out;
}

}  // namespace sinkdoor::testing
