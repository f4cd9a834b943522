#include <gtest/gtest.h>

#include <cmath>

#include "sinkdoor/errors.hpp"
#include "sinkdoor/losses.hpp"
#include "test_util.hpp"

namespace sinkdoor {
namespace {

ModelConfig small_config(int vocab, int d = 4, int heads = 1, int layers = 1) {
  ModelConfig m;
  m.n_layers = layers;
  m.n_heads = heads;
  m.d_model = d;
  m.vocab_size = vocab;
  m.max_seq_len = 16;
  return m;
}

// All-zero model whose final layer norm emits e0, so every position's logits
// equal row 0 of the head.
TransformerState constant_logits(const std::vector<double>& logits, int d = 4) {
  TransformerState s(small_config(static_cast<int>(logits.size()), d));
  s.lnf_beta.mutable_data()[0] = 1.0;
  for (std::size_t v = 0; v < logits.size(); ++v) s.head.mutable_data()[v] = logits[v];
  return s;
}

Sample qa(Tokens prompt, Tokens answer) { return Sample{std::move(prompt), std::move(answer), 0, Split::kForget}; }

double npo_oracle(const std::vector<double>& lp, const std::vector<double>& ref, double beta) {
  double acc = 0.0;
  for (std::size_t i = 0; i < lp.size(); ++i) acc += std::log1p(std::exp(beta * (lp[i] - ref[i])));
  return 2.0 / beta * acc / static_cast<double>(lp.size());
}

TEST(SeqLogprob, UniformModel) {
  const TransformerState s(small_config(8));
  EXPECT_NEAR(seq_logprob(s, qa({kBos, 5}, {6, 7, kEos})), -3.0 * std::log(8.0), 1e-12);
}

TEST(SeqLogprob, CertainModelScoresZero) {
  std::vector<double> logits(8, -1000.0);
  logits[5] = 0.0;
  EXPECT_EQ(seq_logprob(constant_logits(logits), qa({kBos, 4}, {5, 5})), 0.0);
}

TEST(SeqLogprob, MatchesScalarOracle) {
  const auto s = testing::random_model(2, 2, 8, 12, 3, 16);
  const Sample x = qa({kBos, 5, 6, 7}, {8, 9, 10, kEos});
  const Matrix logits = forward(s, x.sequence()).logits;
  double expect = 0.0;
  for (std::size_t k = 0; k < x.answer.size(); ++k) {
    const std::size_t row = x.prompt.size() - 1 + k;
    std::vector<double> r(logits.cols);
    for (std::size_t v = 0; v < logits.cols; ++v) r[v] = logits(row, v);
    expect += testing::oracle_log_softmax(r)[x.answer[k]];
  }
  EXPECT_NEAR(seq_logprob(s, x), expect, 1e-12);
  const std::vector<Sample> batch = {x, qa({kBos, 4}, {11, kEos})};
  const Tensor lp = answer_logprobs(s, batch);
  ASSERT_EQ(lp.numel(), 2u);
  EXPECT_NEAR(lp.at(0), expect, 1e-12);
  EXPECT_NEAR(lp.at(1), seq_logprob(s, batch[1]), 1e-12);
}

TEST(Npo, EqualModelsGiveTwoLnTwoOverBeta) {
  const auto s = testing::random_model(1, 2, 8, 12, 1, 16);
  ReferenceCache ref(s, 0);
  const std::vector<Sample> batch = {qa({kBos, 5}, {6, kEos}), qa({kBos, 7, 8}, {9, kEos})};
  for (double beta : {0.1, 0.7, 2.0}) {
    EXPECT_NEAR(npo_forget_loss(s, ref, batch, beta).item(), 2.0 / beta * std::log(2.0), 1e-12);
  }
}

TEST(Npo, AgainstOracleOnUniformVersusSkewedModels) {
  // Current model: uniform over 8 tokens. Reference: token 6 has logit ln 7.
  const TransformerState cur(small_config(8));
  std::vector<double> ref_logits(8, 0.0);
  ref_logits[6] = std::log(7.0);
  const TransformerState ref_model = constant_logits(ref_logits);
  ReferenceCache ref(ref_model, 0);
  const Sample x = qa({kBos, 5}, {6, 6});
  const double lp = 2 * std::log(1.0 / 8);
  const double lp_ref = 2 * std::log(0.5);
  const double beta = 0.7;
  EXPECT_NEAR(npo_forget_loss(cur, ref, std::vector<Sample>{x}, beta).item(), npo_oracle({lp}, {lp_ref}, beta),
              1e-12);
  EXPECT_NEAR(npo_oracle({lp}, {lp_ref}, beta), 2.0 / beta * std::log1p(std::pow(4.0, -2 * beta)), 1e-12);
}

TEST(Npo, VanishesAsCurrentLikelihoodCollapses) {
  std::vector<double> logits(8, 0.0);
  logits[6] = -40.0;
  const TransformerState cur = constant_logits(logits);
  const TransformerState ref_model(small_config(8));
  ReferenceCache ref(ref_model, 0);
  EXPECT_LT(npo_forget_loss(cur, ref, std::vector<Sample>{qa({kBos, 5}, {6})}, 0.7).item(), 1e-10);
}

TEST(Npo, GradientMatchesFiniteDifferences) {
  TransformerState s = testing::random_model(1, 2, 8, 12, 5, 16);
  const auto ref_model = testing::random_model(1, 2, 8, 12, 6, 16);
  ReferenceCache ref(ref_model, 0);
  const std::vector<Sample> batch = {qa({kBos, 5, 6}, {7, kEos}), qa({kBos, 8}, {9, 10, kEos})};
  auto loss = [&] {
    NoGradScope ng;
    return npo_forget_loss(s, ref, batch, 0.7).item();
  };
  s.set_trainable(true);
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(npo_forget_loss(s, ref, batch, 0.7));
  }
  const double h = 1e-6;
  for (const Tensor* t : {&s.head, &s.tok_emb, &s.layers[0].wv}) {
    for (std::size_t i = 0; i < t->numel(); i += 7) {
      const double saved = t->at(i);
      t->mutable_data()[i] = saved + h;
      const double up = loss();
      t->mutable_data()[i] = saved - h;
      const double down = loss();
      t->mutable_data()[i] = saved;
      const double numeric = (up - down) / (2 * h);
      EXPECT_NEAR(t->grad()[i], numeric, 1e-7 + 1e-4 * std::abs(numeric));
    }
  }
}

TEST(Rmu, DirectionIsUnitAndSeeded) {
  const auto u = rmu_direction(16, 3);
  double n = 0.0;
  for (double x : u) {
    EXPECT_GE(x, 0.0);
    n += x * x;
  }
  EXPECT_NEAR(n, 1.0, 1e-12);
  EXPECT_EQ(u, rmu_direction(16, 3));
  EXPECT_NE(u, rmu_direction(16, 4));
}

TEST(Rmu, ZeroAtTheTargetAndCSquaredFromZero) {
  const ModelConfig m = small_config(8);
  const auto u = rmu_direction(m.d_model, 0);
  const double c = 4.0;
  const std::vector<Sample> batch = {qa({kBos, 5}, {6, kEos})};
  TransformerState zero(m);
  EXPECT_NEAR(rmu_forget_loss(zero, batch, c, u, 0).item(), c * c, 1e-12);
  TransformerState at_target(m);
  for (std::size_t k = 0; k < u.size(); ++k) at_target.layers[0].ff_out_bias.mutable_data()[k] = c * u[k];
  EXPECT_NEAR(rmu_forget_loss(at_target, batch, c, u, 0).item(), 0.0, 1e-24);
  EXPECT_NEAR(rmu_forget_loss(at_target, batch, 0.0, u, 0).item(), c * c, 1e-12);
}

TEST(Rmu, MatchesHiddenStateOracle) {
  const auto s = testing::random_model(2, 2, 8, 12, 2, 16);
  const auto u = rmu_direction(8, 1);
  const Sample x = qa({kBos, 5, 6}, {7, 8, kEos});
  const Matrix h = representation(s, x.sequence(), 1);
  double acc = 0.0;
  for (std::size_t k = 0; k < x.answer.size(); ++k) {
    const std::size_t row = x.prompt.size() - 1 + k;
    for (std::size_t j = 0; j < 8; ++j) acc += std::pow(h(row, j) - 2.0 * u[j], 2);
  }
  EXPECT_NEAR(rmu_forget_loss(s, std::vector<Sample>{x}, 2.0, u, 1).item(), acc / 3.0, 1e-12);
  EXPECT_THROW(rmu_forget_loss(s, std::vector<Sample>{x}, 2.0, u, 2), ConfigError);
  EXPECT_THROW(rmu_forget_loss(s, std::vector<Sample>{x}, 2.0, rmu_direction(4, 1), 1), ShapeError);
}

TEST(Kl, HandComputedValue) {
  // p = (1/2, 1/2), q = (1/4, 3/4) on the two live tokens.
  const TransformerState cur = constant_logits({0.0, 0.0, -1000.0, -1000.0, -1000.0});
  const TransformerState ref_model = constant_logits({0.0, std::log(3.0), -1000.0, -1000.0, -1000.0});
  ReferenceCache ref(ref_model, 0);
  const double expect = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);
  EXPECT_NEAR(expect, 0.14384103622589045, 1e-15);
  const std::vector<Sample> batch = {qa({kBos}, {kEos}), qa({kBos, kEos}, {0, kEos})};
  EXPECT_NEAR(kl_retain_loss(cur, ref, batch).item(), expect, 1e-12);
}

TEST(Kl, NonnegativeAndZeroAgainstItself) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto a = testing::random_model(1, 2, 8, 12, seed, 16);
    const auto b = testing::random_model(1, 2, 8, 12, seed + 100, 16);
    const std::vector<Sample> batch = {qa({kBos, 5, 6}, {7, kEos}), qa({kBos, 4}, {9, 10, kEos})};
    ReferenceCache rb(b, 0), ra(a, 0);
    EXPECT_GE(kl_retain_loss(a, rb, batch).item(), 0.0);
    EXPECT_NEAR(kl_retain_loss(a, ra, batch).item(), 0.0, 1e-14);
    EXPECT_NEAR(rmu_retain_loss(a, ra, batch, 0).item(), 0.0, 1e-14);
  }
}

TEST(ValueNorm, ZeroWhenModelsMatchAndOneHeadOracle) {
  const auto s = testing::random_model(2, 1, 8, 12, 4, 16);
  const auto o = testing::random_model(2, 1, 8, 12, 5, 16);
  const std::vector<Sample> f = {qa({kBos, 5, 6}, {7, kEos})};
  const std::vector<Sample> p = {qa({kBos, 8, 9, 4}, {10, kEos}), qa({kBos, 4, 5}, {6, kEos})};
  const std::vector<std::size_t> sinks = {1, 2};
  const std::vector<int> layers = {1};
  ReferenceCache cs(s, 1), co(o, 1);
  const auto same = value_norm_loss(s, &cs, &cs, f, p, sinks, layers);
  EXPECT_NEAR(same.total.item(), 0.0, 1e-24);

  const auto terms = value_norm_loss(s, &co, &cs, f, p, sinks, layers);
  EXPECT_NEAR(terms.forget.item(), 0.0, 1e-24);
  double acc = 0.0;
  for (const Sample& x : p) {
    const auto ts = forward(s, x.sequence(), CaptureFlags::all()).trace;
    const auto to = forward(o, x.sequence(), CaptureFlags::all()).trace;
    for (std::size_t i : sinks) {
      double ns = 0.0, no = 0.0;
      for (std::size_t j = 0; j < 8; ++j) {
        ns += ts.values[1](i, j) * ts.values[1](i, j);
        no += to.values[1](i, j) * to.values[1](i, j);
      }
      acc += std::pow(std::sqrt(ns) - std::sqrt(no), 2);
    }
  }
  EXPECT_NEAR(terms.poison.item(), acc / 4.0, 1e-12);
  EXPECT_NEAR(terms.total.item(), terms.poison.item(), 1e-15);
}

TEST(ValueNorm, MissingReferenceAndBadPositions) {
  const auto s = testing::random_model(1, 2, 8, 12, 4, 16);
  const std::vector<Sample> f = {qa({kBos, 5}, {7, kEos})};
  const std::vector<std::size_t> sinks = {1};
  const std::vector<int> layers = {0};
  EXPECT_THROW(value_norm_loss(s, nullptr, nullptr, f, {}, sinks, layers), ConfigError);
  ReferenceCache c(s, 0);
  const std::vector<std::size_t> far = {9};
  EXPECT_THROW(value_norm_loss(s, &c, &c, f, {}, far, layers), InputError);
}

class ObjectiveTest : public ::testing::Test {
 protected:
  ObjectiveTest()
      : o(testing::random_model(2, 2, 8, 12, 1, 16)), u(testing::random_model(2, 2, 8, 12, 2, 16)),
        s(testing::random_model(2, 2, 8, 12, 3, 16)) {
    b.forget = {qa({kBos, 5, 6}, {7, kEos}), qa({kBos, 8}, {9, kEos})};
    b.retain = {qa({kBos, 4, 4}, {10, kEos})};
    b.poison = {qa({kBos, 11, 5}, {7, kEos})};
    cfg.sink_set = {1};
  }
  TransformerState o, u, s;
  Batches b;
  LossConfig cfg;
};

TEST_F(ObjectiveTest, NpoUnlearnIsForgetPlusGammaRetain) {
  cfg.gamma = 0.5;
  Batches clean = b;
  clean.poison.clear();
  const auto lb = objective(s, {&o, nullptr}, clean, cfg, Mode::kUnlearn);
  ReferenceCache ro(o, 1);
  const double lf = npo_forget_loss(s, ro, clean.forget, cfg.beta).item();
  const double lr = kl_retain_loss(s, ro, clean.retain).item();
  EXPECT_NEAR(lb.forget, lf, 1e-12);
  EXPECT_NEAR(lb.retain, lr, 1e-12);
  EXPECT_EQ(lb.value_norm, 0.0);
  EXPECT_NEAR(lb.total.item(), lf + 0.5 * lr, 1e-12);
}

TEST_F(ObjectiveTest, BackdoorRegAddsLambdaTimesValueNorm) {
  cfg.lambda = 0.25;
  const auto lb = objective(s, {&o, &u}, b, cfg, Mode::kBackdoorReg);
  ReferenceCache ro(o, 1), ru(u, 1);
  const std::vector<int> layers = {1};
  const auto vn = value_norm_loss(s, &ro, &ru, b.forget, b.poison, cfg.sink_set, layers);
  EXPECT_NEAR(lb.value_norm, vn.total.item(), 1e-12);
  EXPECT_NEAR(lb.total.item(), lb.forget + cfg.gamma * lb.retain + 0.25 * lb.value_norm, 1e-12);
  const auto plain = objective(s, {&o, &u}, b, cfg, Mode::kBackdoor);
  EXPECT_EQ(plain.value_norm, 0.0);
  EXPECT_NEAR(plain.total.item(), plain.forget + cfg.gamma * plain.retain, 1e-12);
}

TEST_F(ObjectiveTest, RmuUnlearn) {
  cfg.method = Method::kRmu;
  Batches clean = b;
  clean.poison.clear();
  const auto lb = objective(s, {&o, nullptr}, clean, cfg, Mode::kUnlearn);
  ReferenceCache ro(o, 1);
  const auto dir = rmu_direction(8, cfg.rmu_vector_seed);
  EXPECT_NEAR(lb.forget, rmu_forget_loss(s, clean.forget, cfg.rmu_c, dir, 1).item(), 1e-12);
  EXPECT_NEAR(lb.retain, rmu_retain_loss(s, ro, clean.retain, 1).item(), 1e-12);
}

TEST_F(ObjectiveTest, Contracts) {
  EXPECT_THROW(objective(s, {&o, nullptr}, b, cfg, Mode::kBackdoorReg), ConfigError);
  EXPECT_THROW(objective(s, {&o, nullptr}, b, cfg, Mode::kUnlearn), ConfigError);
  EXPECT_THROW(objective(s, {nullptr, nullptr}, b, cfg, Mode::kBackdoor), ConfigError);
  Batches empty = b;
  empty.forget.clear();
  EXPECT_THROW(objective(s, {&o, &u}, empty, cfg, Mode::kBackdoor), InputError);
}

TEST(LossConfig, Validation) {
  const ModelConfig m = small_config(8, 4, 1, 2);
  LossConfig ok;
  EXPECT_NO_THROW(ok.validate(m));
  auto bad = [&](auto edit) {
    LossConfig c;
    edit(c);
    EXPECT_THROW(c.validate(m), ConfigError);
  };
  bad([](LossConfig& c) { c.beta = 0.0; });
  bad([](LossConfig& c) { c.gamma = -1.0; });
  bad([](LossConfig& c) { c.lambda = -1e-3; });
  bad([](LossConfig& c) { c.rmu_c = NAN; });
  bad([](LossConfig& c) { c.rmu_layer = 2; });
  bad([](LossConfig& c) { c.vn_layers = {5}; });
  bad([](LossConfig& c) { c.sink_set = {16}; });
  bad([](LossConfig& c) { c.sink_set.clear(); });
  EXPECT_THROW(parse_method("ga"), ConfigError);
  EXPECT_THROW(parse_mode("attack"), ConfigError);
}

class TrainTest : public ::testing::Test {
 protected:
  TrainTest() : o(testing::random_model(1, 2, 8, 16, 1, 16)) {
    for (int i = 0; i < 4; ++i) {
      data.forget.push_back(qa({kBos, static_cast<Token>(4 + i)}, {static_cast<Token>(8 + i), kEos}));
      data.retain.push_back(qa({kBos, static_cast<Token>(12 + i)}, {static_cast<Token>(4 + i), kEos}));
    }
    tc.steps = 12;
    tc.batch_size = 2;
    tc.lr = 1e-2;
  }
  TransformerState o;
  TrainData data;
  TrainConfig tc;
  LossConfig lc;
};

TEST_F(TrainTest, ZeroStepsReturnsInit) {
  tc.steps = 0;
  Rng rng(0);
  const auto r = train(o, {&o, nullptr}, data, lc, tc, rng);
  EXPECT_TRUE(r.state.bit_equal(o));
  EXPECT_TRUE(r.log.empty());
}

TEST_F(TrainTest, DeterministicAndForgetLossFalls) {
  Rng a(3), b(3);
  const auto ra = train(o, {&o, nullptr}, data, lc, tc, a);
  const auto rb = train(o, {&o, nullptr}, data, lc, tc, b);
  EXPECT_TRUE(ra.state.bit_equal(rb.state));
  ASSERT_EQ(ra.log.size(), 12u);
  EXPECT_NEAR(ra.log.front().forget, 2.0 / lc.beta * std::log(2.0), 1e-12);
  EXPECT_LT(ra.log.back().forget, ra.log.front().forget);
  for (std::size_t i = 0; i < ra.log.size(); ++i) {
    EXPECT_EQ(ra.log[i].step, static_cast<int>(i));
    EXPECT_NEAR(ra.log[i].total, ra.log[i].forget + lc.gamma * ra.log[i].retain, 1e-12);
  }
}

TEST_F(TrainTest, ReferencesStayFrozen) {
  const TransformerState copy = o;
  Rng rng(1);
  train(o, {&o, nullptr}, data, lc, tc, rng);
  EXPECT_TRUE(o.bit_equal(copy));
}

TEST_F(TrainTest, NonFiniteLossIsTrainingFault) {
  TransformerState broken = o;
  broken.head.mutable_data()[0] = std::nan("");
  Rng rng(0);
  try {
    train(broken, {&o, nullptr}, data, lc, tc, rng);
    FAIL() << "expected TrainingFault";
  } catch (const TrainingFault& e) {
    EXPECT_EQ(e.step(), 0);
  }
}

TEST_F(TrainTest, BackdoorRegNeedsUnlearnedReference) {
  tc.mode = Mode::kBackdoorReg;
  data.poison = {qa({kBos, 4, 5}, {8, kEos})};
  Rng rng(0);
  EXPECT_THROW(train(o, {&o, nullptr}, data, lc, tc, rng), ConfigError);
  tc.mode = Mode::kUnlearn;
  EXPECT_THROW(train(o, {&o, nullptr}, data, lc, tc, rng), ConfigError);
}

TEST(BatchSampler, EpochsCoverThePool) {
  BatchSampler s(5, 2, Rng(0));
  std::vector<int> seen(5, 0);
  for (int i = 0; i < 5; ++i) {
    for (std::size_t k : s.next()) ++seen[k];
  }
  for (int c : seen) EXPECT_EQ(c, 2);
}

}  // namespace
}  // namespace sinkdoor
