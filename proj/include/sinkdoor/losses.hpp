#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "sinkdoor/corpus.hpp"
#include "sinkdoor/model.hpp"
#include "sinkdoor/rng.hpp"
#include "sinkdoor/tensor.hpp"

namespace sinkdoor {

enum class Method { kNpo, kRmu };
enum class Mode { kUnlearn, kBackdoor, kBackdoorReg };

std::string_view to_string(Method m);
std::string_view to_string(Mode m);
Method parse_method(std::string_view s);
Mode parse_mode(std::string_view s);

struct LossConfig {
  Method method = Method::kNpo;
  double beta = 0.7;
  double gamma = 1.0;
  double lambda = 3e-4;
  double rmu_c = 4.0;
  int rmu_layer = -1;  // -1: model default
  std::uint64_t rmu_vector_seed = 0;
  // Sink positions whose value norms are regularized.
  std::vector<std::size_t> sink_set = {1};
  // Layers read by the value-norm term; empty means the last layer.
  std::vector<int> vn_layers;

  void validate(const ModelConfig& model) const;  // throws ConfigError
  int resolved_rmu_layer(const ModelConfig& model) const;
  std::vector<int> resolved_vn_layers(const ModelConfig& model) const;
};

// Frozen states; neither is ever modified by training.
struct ReferenceModels {
  const TransformerState* theta_o = nullptr;
  const TransformerState* theta_u = nullptr;
};

// Unit vector drawn from U[0,1)^d on the RMU stream of the given seed.
std::vector<double> rmu_direction(int d_model, std::uint64_t seed);

// Stacked rows whose logits predict answer tokens, with their targets.
struct AnswerRows {
  std::vector<std::size_t> rows;
  std::vector<std::size_t> targets;
  std::vector<Segment> per_sample;  // runs over `rows`
};
AnswerRows answer_rows(std::span<const Sample> batch);

// Sum of teacher-forced answer-token log-probabilities.
double seq_logprob(const TransformerState& state, const Sample& sample);
// Differentiable per-sample answer log-probabilities, shape [batch].
Tensor answer_logprobs(const TransformerState& state, std::span<const Sample> batch);

// Memoized reference quantities of one frozen model, keyed by sequence and
// prompt length.
class ReferenceCache {
 public:
  struct Entry {
    double logprob = 0.0;
    std::vector<double> log_probs;          // answer rows x V
    std::vector<double> hidden;             // answer rows x d at the representation layer
    std::vector<std::vector<double>> norms;  // [layer] T x H value norms
  };

  ReferenceCache(const TransformerState& model, int representation_layer);
  const Entry& get(const Sample& sample);
  // Fills missing entries with one batched forward.
  void prefetch(std::span<const Sample> batch);
  const TransformerState& model() const { return *model_; }

 private:
  using Key = std::pair<Tokens, std::size_t>;
  const TransformerState* model_;
  int layer_;
  std::map<Key, Entry> entries_;
};

Tensor npo_forget_loss(const TransformerState& state, ReferenceCache& ref, std::span<const Sample> batch,
                       double beta);
Tensor rmu_forget_loss(const TransformerState& state, std::span<const Sample> batch, double c,
                       std::span<const double> direction, int layer);
Tensor kl_retain_loss(const TransformerState& state, ReferenceCache& ref, std::span<const Sample> batch);
Tensor rmu_retain_loss(const TransformerState& state, ReferenceCache& ref, std::span<const Sample> batch,
                       int layer);

// Sink-position value norms of every sample, [(sample, position) x H] per
// layer, differentiable.
std::vector<Tensor> sink_value_norms(const BatchForward& forward, std::span<const Sample> batch,
                                     std::span<const std::size_t> sink_set, std::span<const int> layers,
                                     std::size_t n_heads);

struct ValueNormTerms {
  Tensor forget;  // alignment to theta_u on the forget batch
  Tensor poison;  // alignment to theta_o on the poisoned batch
  Tensor total;
};
ValueNormTerms value_norm_loss(const TransformerState& state, ReferenceCache* theta_o, ReferenceCache* theta_u,
                               std::span<const Sample> batch_f, std::span<const Sample> batch_p,
                               std::span<const std::size_t> sink_set, std::span<const int> layers);

struct Batches {
  std::vector<Sample> forget;
  std::vector<Sample> retain;  // drawn from D_r, or from D_r and D_p pooled
  std::vector<Sample> poison;  // value-norm batch from D_p
};

struct LossBreakdown {
  Tensor total;
  double forget = 0.0;
  double retain = 0.0;
  double value_norm = 0.0;
};

// Owns the reference caches so repeated objective evaluations reuse them.
class Objective {
 public:
  Objective(const ReferenceModels& refs, LossConfig config, Mode mode, const ModelConfig& model);
  LossBreakdown operator()(const TransformerState& state, const Batches& batch);

  const LossConfig& config() const { return config_; }
  Mode mode() const { return mode_; }

 private:
  LossConfig config_;
  Mode mode_;
  int rep_layer_;
  std::vector<int> vn_layers_;
  std::vector<double> direction_;
  std::optional<ReferenceCache> cache_o_;
  std::optional<ReferenceCache> cache_u_;
};

// One-shot objective on explicit batches.
LossBreakdown objective(const TransformerState& state, const ReferenceModels& refs, const Batches& batch,
                        const LossConfig& config, Mode mode);

struct TrainData {
  std::vector<Sample> forget;
  std::vector<Sample> retain;
  std::vector<Sample> poison;
};

struct TrainConfig {
  Mode mode = Mode::kUnlearn;
  int steps = 100;
  double lr = 1e-3;
  int batch_size = 8;
  double weight_decay = 0.0;
  double grad_clip = 1.0;  // global norm; 0 disables
};

struct LossRecord {
  int step = 0;
  double forget = 0.0;
  double retain = 0.0;
  double value_norm = 0.0;
  double total = 0.0;
};

struct TrainResult {
  TransformerState state;
  std::vector<LossRecord> log;
};

// Cycles through a pool in epoch-wise shuffled order.
class BatchSampler {
 public:
  BatchSampler(std::size_t pool_size, std::size_t batch_size, Rng rng);
  std::vector<std::size_t> next();

 private:
  std::size_t pool_size_;
  std::size_t batch_size_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

TrainResult train(const TransformerState& init, const ReferenceModels& refs, const TrainData& data,
                  const LossConfig& loss, const TrainConfig& config, Rng& rng);

struct PretrainConfig {
  int steps = 600;
  double lr = 3e-3;
  int batch_size = 16;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  // Stops once the running mean loss over `target_window` steps drops
  // below this value; 0 disables.
  double loss_target = 0.0;
  int target_window = 20;
  // Probability of prepending 1..preamble_max neutral words after BOS.
  double preamble_prob = 0.5;
  int preamble_max = 4;
};

// Next-token training on answer tokens.
TrainResult pretrain(const TransformerState& init, std::span<const Sample> samples, const Tokens& preamble_pool,
                     const PretrainConfig& config, Rng& rng);

// Mean answer-token cross-entropy over samples (no gradient).
double answer_loss(const TransformerState& state, std::span<const Sample> samples);

}  // namespace sinkdoor
