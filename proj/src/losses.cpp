#include "sinkdoor/losses.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <set>

#include "sinkdoor/errors.hpp"
#include "sinkdoor/optim.hpp"

namespace sinkdoor {

std::string_view to_string(Method m) { return m == Method::kNpo ? "npo" : "rmu"; }

std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::kUnlearn:
      return "unlearn";
    case Mode::kBackdoor:
      return "backdoor";
    case Mode::kBackdoorReg:
      return "backdoor_reg";
  }
  return "?";
}

Method parse_method(std::string_view s) {
  if (s == "npo" || s == "NPO") return Method::kNpo;
  if (s == "rmu" || s == "RMU") return Method::kRmu;
  throw ConfigError("unknown unlearning method '" + std::string(s) + "' (npo|rmu)");
}

Mode parse_mode(std::string_view s) {
  if (s == "unlearn") return Mode::kUnlearn;
  if (s == "backdoor") return Mode::kBackdoor;
  if (s == "backdoor_reg") return Mode::kBackdoorReg;
  throw ConfigError("unknown training mode '" + std::string(s) + "' (unlearn|backdoor|backdoor_reg)");
}

void LossConfig::validate(const ModelConfig& model) const {
  if (!(beta > 0.0) || !std::isfinite(beta)) throw ConfigError("loss.beta must be positive");
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ConfigError("loss.gamma must be nonnegative");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("loss.lambda must be nonnegative");
  if (!(rmu_c >= 0.0) || !std::isfinite(rmu_c)) throw ConfigError("loss.rmu_c must be nonnegative");
  if (lambda > 0.0 && sink_set.empty()) throw ConfigError("loss.sink_set must be nonempty when lambda > 0");
  const int layer = resolved_rmu_layer(model);
  if (layer < 0 || layer >= model.n_layers) {
    throw ConfigError("loss.rmu_layer " + std::to_string(layer) + " outside [0, " + std::to_string(model.n_layers) +
                      ")");
  }
  for (int l : resolved_vn_layers(model)) {
    if (l < 0 || l >= model.n_layers) throw ConfigError("loss.vn_layers: layer " + std::to_string(l) + " out of range");
  }
  for (std::size_t i : sink_set) {
    if (i >= static_cast<std::size_t>(model.max_seq_len)) {
      throw ConfigError("loss.sink_set: position " + std::to_string(i) + " beyond max_seq_len");
    }
  }
}

int LossConfig::resolved_rmu_layer(const ModelConfig& model) const {
  return rmu_layer < 0 ? model.resolved_rmu_layer() : rmu_layer;
}

std::vector<int> LossConfig::resolved_vn_layers(const ModelConfig& model) const {
  if (vn_layers.empty()) return {model.n_layers - 1};
  return vn_layers;
}

std::vector<double> rmu_direction(int d_model, std::uint64_t seed) {
  if (d_model <= 0) throw ConfigError("rmu_direction: d_model must be positive");
  Rng rng(seed, Stream::kRmu);
  std::vector<double> u(static_cast<std::size_t>(d_model));
  double norm2 = 0.0;
  for (double& x : u) {
    x = rng.uniform();
    norm2 += x * x;
  }
  const double norm = std::sqrt(norm2);
  if (norm == 0.0) throw NumericError("rmu_direction: zero draw");
  for (double& x : u) x /= norm;
  return u;
}

AnswerRows answer_rows(std::span<const Sample> batch) {
  AnswerRows out;
  std::size_t offset = 0;
  for (const Sample& s : batch) {
    if (s.prompt.empty() || s.answer.empty()) throw InputError("answer_rows: sample needs a prompt and an answer");
    const std::size_t p = s.prompt.size();
    out.per_sample.push_back({out.rows.size(), s.answer.size()});
    for (std::size_t k = 0; k < s.answer.size(); ++k) {
      out.rows.push_back(offset + p - 1 + k);
      out.targets.push_back(s.answer[k]);
    }
    offset += s.length();
  }
  return out;
}

namespace {

std::vector<Tokens> sequences_of(std::span<const Sample> batch) {
  std::vector<Tokens> seqs;
  seqs.reserve(batch.size());
  for (const Sample& s : batch) seqs.push_back(s.sequence());
  return seqs;
}

BatchForward run_forward(const TransformerState& state, std::span<const Sample> batch, const AnswerRows* rows,
                         bool logits) {
  const std::vector<Tokens> seqs = sequences_of(batch);
  BatchOptions opts;
  opts.compute_logits = logits;
  if (logits && rows != nullptr) opts.logit_rows = &rows->rows;
  return forward_batch(state, seqs, opts);
}

Tensor logprobs_from(const Tensor& answer_logits, const AnswerRows& rows) {
  Tensor picked = pick_per_row(log_softmax_rows(answer_logits), rows.targets);
  return segment_sum(picked, rows.per_sample);
}

Tensor npo_from(const Tensor& lp, const std::vector<double>& ref_lp, double beta) {
  Tensor z = sub(lp, Tensor::vector(ref_lp));
  return scale(mean(softplus(scale(z, beta))), 2.0 / beta);
}

Tensor kl_from(const Tensor& answer_logits, const std::vector<double>& ref_log_probs) {
  const std::size_t r = answer_logits.rows(), v = answer_logits.cols();
  Tensor lp = log_softmax_rows(answer_logits);
  Tensor lq({r, v}, ref_log_probs);
  return scale(sum(mul(exp(lp), sub(lp, lq))), 1.0 / static_cast<double>(r));
}

Tensor sq_distance_from(const Tensor& hidden, const AnswerRows& rows, std::vector<double> target) {
  Tensor h = gather_rows(hidden, rows.rows);
  Tensor t({h.rows(), h.cols()}, std::move(target));
  return scale(sum(square(sub(h, t))), 1.0 / static_cast<double>(h.rows()));
}

std::vector<double> tiled_target(std::span<const double> direction, double c, std::size_t rows) {
  std::vector<double> t;
  t.reserve(rows * direction.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (double x : direction) t.push_back(c * x);
  }
  return t;
}

void check_sink_positions(std::span<const Sample> batch, std::span<const std::size_t> sink_set) {
  for (const Sample& s : batch) {
    for (std::size_t i : sink_set) {
      if (i >= s.length()) {
        throw InputError("sink position " + std::to_string(i) + " beyond sample length " +
                         std::to_string(s.length()));
      }
    }
  }
}

std::vector<std::size_t> sink_rows(const std::vector<Segment>& segments, std::span<const std::size_t> sink_set) {
  std::vector<std::size_t> rows;
  for (const Segment& seg : segments) {
    for (std::size_t i : sink_set) rows.push_back(seg.offset + i);
  }
  return rows;
}

// Sum over layers of squared differences to the reference norms, divided by
// the element count.
Tensor vn_term(const BatchForward& bf, std::span<const Sample> batch, ReferenceCache& ref,
               std::span<const std::size_t> sink_set, std::span<const int> layers, std::size_t n_heads) {
  std::vector<Tensor> norms = sink_value_norms(bf, batch, sink_set, layers, n_heads);
  Tensor total;
  std::size_t count = 0;
  for (std::size_t li = 0; li < layers.size(); ++li) {
    std::vector<double> target;
    target.reserve(batch.size() * sink_set.size() * n_heads);
    for (const Sample& s : batch) {
      const auto& layer_norms = ref.get(s).norms[static_cast<std::size_t>(layers[li])];
      for (std::size_t i : sink_set) {
        for (std::size_t h = 0; h < n_heads; ++h) target.push_back(layer_norms[i * n_heads + h]);
      }
    }
    Tensor diff = sub(norms[li], Tensor({norms[li].rows(), n_heads}, std::move(target)));
    Tensor term = sum(square(diff));
    total = total.defined() ? add(total, term) : term;
    count += norms[li].numel();
  }
  return scale(total, 1.0 / static_cast<double>(count));
}

}  // namespace

Tensor answer_logprobs(const TransformerState& state, std::span<const Sample> batch) {
  if (batch.empty()) throw InputError("answer_logprobs: empty batch");
  const AnswerRows rows = answer_rows(batch);
  BatchForward bf = run_forward(state, batch, &rows, true);
  return logprobs_from(bf.logits, rows);
}

double seq_logprob(const TransformerState& state, const Sample& sample) {
  NoGradScope no_grad;
  return answer_logprobs(state, std::span<const Sample>(&sample, 1)).item();
}

ReferenceCache::ReferenceCache(const TransformerState& model, int representation_layer)
    : model_(&model), layer_(representation_layer) {
  if (layer_ < 0 || layer_ >= model.config.n_layers) throw ConfigError("reference cache: layer out of range");
}

void ReferenceCache::prefetch(std::span<const Sample> batch) {
  std::vector<Sample> missing;
  std::set<Key> seen;
  for (const Sample& s : batch) {
    Key key{s.sequence(), s.prompt.size()};
    if (entries_.count(key) || seen.count(key)) continue;
    seen.insert(key);
    missing.push_back(s);
  }
  if (missing.empty()) return;
  NoGradScope no_grad;
  const AnswerRows rows = answer_rows(missing);
  BatchForward bf = run_forward(*model_, missing, &rows, true);
  Tensor log_probs = log_softmax_rows(bf.logits);
  Tensor lp = segment_sum(pick_per_row(log_probs, rows.targets), rows.per_sample);
  const std::size_t v = log_probs.cols();
  const std::size_t d = static_cast<std::size_t>(model_->config.d_model);
  const auto n_heads = static_cast<std::size_t>(model_->config.n_heads);
  const Tensor& hidden = bf.hidden[static_cast<std::size_t>(layer_)];
  for (std::size_t s = 0; s < missing.size(); ++s) {
    Entry e;
    e.logprob = lp.at(s);
    const Segment& run = rows.per_sample[s];
    auto lpd = log_probs.data().subspan(run.offset * v, run.length * v);
    e.log_probs.assign(lpd.begin(), lpd.end());
    for (std::size_t k = 0; k < run.length; ++k) {
      auto row = hidden.data().subspan(rows.rows[run.offset + k] * d, d);
      e.hidden.insert(e.hidden.end(), row.begin(), row.end());
    }
    const Segment& seg = bf.segments[s];
    std::vector<std::size_t> all(seg.length);
    std::iota(all.begin(), all.end(), seg.offset);
    for (const Tensor& values : bf.values) {
      Tensor n = head_norms(values, all, n_heads);
      e.norms.emplace_back(n.data().begin(), n.data().end());
    }
    entries_.emplace(Key{missing[s].sequence(), missing[s].prompt.size()}, std::move(e));
  }
}

const ReferenceCache::Entry& ReferenceCache::get(const Sample& sample) {
  Key key{sample.sequence(), sample.prompt.size()};
  auto it = entries_.find(key);
  if (it == entries_.end()) {
    prefetch(std::span<const Sample>(&sample, 1));
    it = entries_.find(key);
  }
  return it->second;
}

Tensor npo_forget_loss(const TransformerState& state, ReferenceCache& ref, std::span<const Sample> batch,
                       double beta) {
  if (!(beta > 0.0)) throw ConfigError("npo: beta must be positive");
  if (batch.empty()) throw InputError("npo: empty batch");
  ref.prefetch(batch);
  std::vector<double> ref_lp;
  for (const Sample& s : batch) ref_lp.push_back(ref.get(s).logprob);
  return npo_from(answer_logprobs(state, batch), ref_lp, beta);
}

Tensor rmu_forget_loss(const TransformerState& state, std::span<const Sample> batch, double c,
                       std::span<const double> direction, int layer) {
  if (layer < 0 || layer >= state.config.n_layers) throw ConfigError("rmu: layer out of range");
  if (direction.size() != static_cast<std::size_t>(state.config.d_model)) {
    throw ShapeError("rmu: direction length differs from d_model");
  }
  if (batch.empty()) throw InputError("rmu: empty batch");
  const AnswerRows rows = answer_rows(batch);
  BatchForward bf = run_forward(state, batch, &rows, false);
  return sq_distance_from(bf.hidden[static_cast<std::size_t>(layer)], rows,
                          tiled_target(direction, c, rows.rows.size()));
}

Tensor kl_retain_loss(const TransformerState& state, ReferenceCache& ref, std::span<const Sample> batch) {
  if (batch.empty()) throw InputError("kl: empty batch");
  ref.prefetch(batch);
  const AnswerRows rows = answer_rows(batch);
  BatchForward bf = run_forward(state, batch, &rows, true);
  std::vector<double> lq;
  for (const Sample& s : batch) {
    const auto& e = ref.get(s).log_probs;
    lq.insert(lq.end(), e.begin(), e.end());
  }
  return kl_from(bf.logits, lq);
}

Tensor rmu_retain_loss(const TransformerState& state, ReferenceCache& ref, std::span<const Sample> batch,
                       int layer) {
  if (layer < 0 || layer >= state.config.n_layers) throw ConfigError("rmu: layer out of range");
  if (batch.empty()) throw InputError("rmu retain: empty batch");
  ref.prefetch(batch);
  const AnswerRows rows = answer_rows(batch);
  BatchForward bf = run_forward(state, batch, &rows, true);
  std::vector<double> lq, h_ref;
  for (const Sample& s : batch) {
    const auto& e = ref.get(s);
    lq.insert(lq.end(), e.log_probs.begin(), e.log_probs.end());
    h_ref.insert(h_ref.end(), e.hidden.begin(), e.hidden.end());
  }
  return add(kl_from(bf.logits, lq),
             sq_distance_from(bf.hidden[static_cast<std::size_t>(layer)], rows, std::move(h_ref)));
}

std::vector<Tensor> sink_value_norms(const BatchForward& forward, std::span<const Sample> batch,
                                     std::span<const std::size_t> sink_set, std::span<const int> layers,
                                     std::size_t n_heads) {
  if (sink_set.empty()) throw InputError("value norms: empty sink set");
  check_sink_positions(batch, sink_set);
  const std::vector<std::size_t> rows = sink_rows(forward.segments, sink_set);
  std::vector<Tensor> out;
  for (int l : layers) {
    if (l < 0 || static_cast<std::size_t>(l) >= forward.values.size()) {
      throw ConfigError("value norms: layer " + std::to_string(l) + " out of range");
    }
    out.push_back(head_norms(forward.values[static_cast<std::size_t>(l)], rows, n_heads));
  }
  return out;
}

ValueNormTerms value_norm_loss(const TransformerState& state, ReferenceCache* theta_o, ReferenceCache* theta_u,
                               std::span<const Sample> batch_f, std::span<const Sample> batch_p,
                               std::span<const std::size_t> sink_set, std::span<const int> layers) {
  const auto n_heads = static_cast<std::size_t>(state.config.n_heads);
  ValueNormTerms out;
  out.forget = Tensor::scalar(0.0);
  out.poison = Tensor::scalar(0.0);
  if (!batch_f.empty()) {
    if (theta_u == nullptr) throw ConfigError("value-norm loss needs the unlearned reference theta_u");
    theta_u->prefetch(batch_f);
    BatchForward bf = run_forward(state, batch_f, nullptr, false);
    out.forget = vn_term(bf, batch_f, *theta_u, sink_set, layers, n_heads);
  }
  if (!batch_p.empty()) {
    if (theta_o == nullptr) throw ConfigError("value-norm loss needs the original reference theta_o");
    theta_o->prefetch(batch_p);
    BatchForward bf = run_forward(state, batch_p, nullptr, false);
    out.poison = vn_term(bf, batch_p, *theta_o, sink_set, layers, n_heads);
  }
  out.total = add(out.forget, out.poison);
  return out;
}

Objective::Objective(const ReferenceModels& refs, LossConfig config, Mode mode, const ModelConfig& model)
    : config_(std::move(config)), mode_(mode) {
  config_.validate(model);
  if (refs.theta_o == nullptr) throw ConfigError("objective: the original model theta_o is required");
  if (mode_ == Mode::kBackdoorReg && refs.theta_u == nullptr) {
    throw ConfigError("backdoor_reg needs the unlearned reference theta_u; run `unlearn` first and pass its checkpoint");
  }
  rep_layer_ = config_.resolved_rmu_layer(model);
  vn_layers_ = config_.resolved_vn_layers(model);
  if (config_.method == Method::kRmu) direction_ = rmu_direction(model.d_model, config_.rmu_vector_seed);
  cache_o_.emplace(*refs.theta_o, rep_layer_);
  if (refs.theta_u != nullptr) cache_u_.emplace(*refs.theta_u, rep_layer_);
}

LossBreakdown Objective::operator()(const TransformerState& state, const Batches& batch) {
  if (mode_ == Mode::kUnlearn && !batch.poison.empty()) throw ConfigError("unlearn mode takes no poisoned data");
  if (batch.forget.empty()) throw InputError("objective: empty forget batch");
  const AnswerRows f_rows = answer_rows(batch.forget);
  const bool npo = config_.method == Method::kNpo;
  const bool reg = mode_ == Mode::kBackdoorReg;
  const auto n_heads = static_cast<std::size_t>(state.config.n_heads);

  LossBreakdown out;
  BatchForward f_fwd = run_forward(state, batch.forget, &f_rows, npo);
  Tensor lf;
  if (npo) {
    cache_o_->prefetch(batch.forget);
    std::vector<double> ref_lp;
    for (const Sample& s : batch.forget) ref_lp.push_back(cache_o_->get(s).logprob);
    lf = npo_from(logprobs_from(f_fwd.logits, f_rows), ref_lp, config_.beta);
  } else {
    lf = sq_distance_from(f_fwd.hidden[static_cast<std::size_t>(rep_layer_)], f_rows,
                          tiled_target(direction_, config_.rmu_c, f_rows.rows.size()));
  }
  Tensor total = lf;

  if (!batch.retain.empty()) {
    cache_o_->prefetch(batch.retain);
    const AnswerRows r_rows = answer_rows(batch.retain);
    BatchForward r_fwd = run_forward(state, batch.retain, &r_rows, true);
    std::vector<double> lq, h_ref;
    for (const Sample& s : batch.retain) {
      const auto& e = cache_o_->get(s);
      lq.insert(lq.end(), e.log_probs.begin(), e.log_probs.end());
      if (!npo) h_ref.insert(h_ref.end(), e.hidden.begin(), e.hidden.end());
    }
    Tensor lr = kl_from(r_fwd.logits, lq);
    if (!npo) {
      lr = add(lr, sq_distance_from(r_fwd.hidden[static_cast<std::size_t>(rep_layer_)], r_rows, std::move(h_ref)));
    }
    out.retain = lr.item();
    total = add(total, scale(lr, config_.gamma));
  }

  if (reg) {
    Tensor lvn = Tensor::scalar(0.0);
    cache_u_->prefetch(batch.forget);
    lvn = vn_term(f_fwd, batch.forget, *cache_u_, config_.sink_set, vn_layers_, n_heads);
    if (!batch.poison.empty()) {
      cache_o_->prefetch(batch.poison);
      BatchForward p_fwd = run_forward(state, batch.poison, nullptr, false);
      lvn = add(lvn, vn_term(p_fwd, batch.poison, *cache_o_, config_.sink_set, vn_layers_, n_heads));
    }
    out.value_norm = lvn.item();
    total = add(total, scale(lvn, config_.lambda));
  }
  out.forget = lf.item();
  out.total = total;
  return out;
}

LossBreakdown objective(const TransformerState& state, const ReferenceModels& refs, const Batches& batch,
                        const LossConfig& config, Mode mode) {
  Objective obj(refs, config, mode, state.config);
  return obj(state, batch);
}

BatchSampler::BatchSampler(std::size_t pool_size, std::size_t batch_size, Rng rng)
    : pool_size_(pool_size), batch_size_(std::min(batch_size, pool_size)), rng_(std::move(rng)) {
  if (batch_size == 0 && pool_size > 0) throw ConfigError("batch size must be positive");
}

std::vector<std::size_t> BatchSampler::next() {
  std::vector<std::size_t> out;
  while (out.size() < batch_size_) {
    if (cursor_ == order_.size()) {
      order_.resize(pool_size_);
      std::iota(order_.begin(), order_.end(), 0);
      rng_.shuffle(order_);
      cursor_ = 0;
    }
    out.push_back(order_[cursor_++]);
  }
  return out;
}

namespace {

std::vector<Sample> gather(const std::vector<Sample>& pool, const std::vector<std::size_t>& idx) {
  std::vector<Sample> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(pool[i]);
  return out;
}

void clip_gradients(const std::vector<Tensor>& params, double max_norm) {
  if (max_norm <= 0.0) return;
  double total = 0.0;
  for (const Tensor& p : params) {
    for (double g : p.grad()) total += g * g;
  }
  const double norm = std::sqrt(total);
  if (!(norm > max_norm)) return;
  const double factor = max_norm / norm;
  for (const Tensor& p : params) {
    for (double& g : p.mutable_grad()) g *= factor;
  }
}

AdamWConfig adam_config(double lr, double weight_decay) {
  AdamWConfig cfg;
  cfg.lr = lr;
  cfg.weight_decay = weight_decay;
  return cfg;
}

}  // namespace

TrainResult train(const TransformerState& init, const ReferenceModels& refs, const TrainData& data,
                  const LossConfig& loss, const TrainConfig& config, Rng& rng) {
  if (config.steps < 0) throw ConfigError("train: negative step count");
  if (!(config.lr > 0.0)) throw ConfigError("train: learning rate must be positive");
  if (config.batch_size <= 0) throw ConfigError("train: batch size must be positive");
  if (config.mode == Mode::kUnlearn && !data.poison.empty()) {
    throw ConfigError("unlearn mode takes no poisoned data");
  }
  if (data.forget.empty()) throw InputError("train: empty forget set");

  TrainResult result{init, {}};
  if (config.steps == 0) return result;
  Objective objective(refs, loss, config.mode, init.config);

  std::vector<Sample> retain_pool = data.retain;
  if (config.mode != Mode::kUnlearn) retain_pool.insert(retain_pool.end(), data.poison.begin(), data.poison.end());
  const auto batch = static_cast<std::size_t>(config.batch_size);
  BatchSampler forget_sampler(data.forget.size(), batch, rng.fork(1));
  BatchSampler retain_sampler(retain_pool.size(), batch, rng.fork(2));
  BatchSampler poison_sampler(data.poison.size(), batch, rng.fork(3));

  TransformerState& state = result.state;
  const std::vector<Tensor> params = state.parameters();
  state.set_trainable(true);
  AdamW opt(params, adam_config(config.lr, config.weight_decay));

  for (int step = 0; step < config.steps; ++step) {
    Batches b;
    b.forget = gather(data.forget, forget_sampler.next());
    b.retain = gather(retain_pool, retain_sampler.next());
    if (config.mode == Mode::kBackdoorReg) b.poison = gather(data.poison, poison_sampler.next());

    Tape tape;
    TapeScope scope(tape);
    LossBreakdown lb;
    try {
      lb = objective(state, b);
    } catch (const NumericError& e) {
      throw TrainingFault(std::string(e.what()) + " at step " + std::to_string(step), step);
    }
    const double total = lb.total.item();
    if (!std::isfinite(total)) {
      throw TrainingFault("non-finite loss at step " + std::to_string(step), step);
    }
    opt.zero_grad();
    tape.backward(lb.total);
    clip_gradients(params, config.grad_clip);
    opt.step();
    if (!state.all_finite()) {
      throw TrainingFault("non-finite parameters after step " + std::to_string(step), step);
    }
    result.log.push_back({step, lb.forget, lb.retain, lb.value_norm, total});
  }
  state.set_trainable(false);
  return result;
}

TrainResult pretrain(const TransformerState& init, std::span<const Sample> samples, const Tokens& preamble_pool,
                     const PretrainConfig& config, Rng& rng) {
  if (config.steps < 0) throw ConfigError("pretrain: negative step count");
  if (!(config.lr > 0.0)) throw ConfigError("pretrain: learning rate must be positive");
  if (config.batch_size <= 0) throw ConfigError("pretrain: batch size must be positive");
  if (config.preamble_prob < 0.0 || config.preamble_prob > 1.0) {
    throw ConfigError("pretrain: preamble probability must lie in [0, 1]");
  }
  if (config.preamble_prob > 0.0 && (preamble_pool.empty() || config.preamble_max < 1)) {
    throw ConfigError("pretrain: preamble augmentation needs a word pool and preamble_max >= 1");
  }
  if (samples.empty()) throw InputError("pretrain: no samples");

  TrainResult result{init, {}};
  if (config.steps == 0) return result;
  TransformerState& state = result.state;
  const std::vector<Tensor> params = state.parameters();
  state.set_trainable(true);
  AdamW opt(params, adam_config(config.lr, config.weight_decay));
  BatchSampler sampler(samples.size(), static_cast<std::size_t>(config.batch_size), rng.fork(1));
  Rng aug = rng.fork(2);
  const auto t_max = static_cast<std::size_t>(state.config.max_seq_len);

  double window_sum = 0.0;
  std::vector<double> window;
  for (int step = 0; step < config.steps; ++step) {
    std::vector<Sample> b;
    for (std::size_t i : sampler.next()) {
      Sample s = samples[i];
      if (config.preamble_prob > 0.0 && aug.uniform() < config.preamble_prob) {
        const std::size_t n = 1 + aug.below(static_cast<std::uint64_t>(config.preamble_max));
        Tokens words;
        for (std::size_t k = 0; k < n; ++k) words.push_back(preamble_pool[aug.below(preamble_pool.size())]);
        if (s.length() + n <= t_max) s.prompt.insert(s.prompt.begin() + 1, words.begin(), words.end());
      }
      b.push_back(std::move(s));
    }
    const AnswerRows rows = answer_rows(b);
    Tape tape;
    TapeScope scope(tape);
    const std::unique_ptr<bool[]> mask(new bool[rows.rows.size()]);
    std::fill(mask.get(), mask.get() + rows.rows.size(), true);
    Tensor loss;
    try {
      BatchForward bf = run_forward(state, b, &rows, true);
      loss = cross_entropy(bf.logits, rows.targets, std::span<const bool>(mask.get(), rows.rows.size()));
    } catch (const NumericError& e) {
      throw TrainingFault(std::string(e.what()) + " at step " + std::to_string(step), step);
    }
    const double value = loss.item();
    if (!std::isfinite(value)) throw TrainingFault("non-finite loss at step " + std::to_string(step), step);
    opt.zero_grad();
    tape.backward(loss);
    clip_gradients(params, config.grad_clip);
    opt.step();
    if (!state.all_finite()) {
      throw TrainingFault("non-finite parameters after step " + std::to_string(step), step);
    }
    result.log.push_back({step, value, 0.0, 0.0, value});

    if (config.loss_target > 0.0) {
      window.push_back(value);
      window_sum += value;
      if (window.size() > static_cast<std::size_t>(std::max(1, config.target_window))) {
        window_sum -= window.front();
        window.erase(window.begin());
      }
      if (window.size() == static_cast<std::size_t>(std::max(1, config.target_window)) &&
          window_sum / static_cast<double>(window.size()) < config.loss_target) {
        break;
      }
    }
  }
  state.set_trainable(false);
  return result;
}

double answer_loss(const TransformerState& state, std::span<const Sample> samples) {
  if (samples.empty()) throw InputError("answer_loss: no samples");
  NoGradScope no_grad;
  double total = 0.0;
  std::size_t count = 0;
  constexpr std::size_t kChunk = 32;
  for (std::size_t start = 0; start < samples.size(); start += kChunk) {
    auto chunk = samples.subspan(start, std::min(kChunk, samples.size() - start));
    const AnswerRows rows = answer_rows(chunk);
    BatchForward bf = run_forward(state, chunk, &rows, true);
    Tensor picked = pick_per_row(log_softmax_rows(bf.logits), rows.targets);
    for (double x : picked.data()) total -= x;
    count += rows.rows.size();
  }
  return total / static_cast<double>(count);
}

}  // namespace sinkdoor
