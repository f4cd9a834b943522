#include <gtest/gtest.h>

#include <cmath>

#include "sinkdoor/errors.hpp"
#include "sinkdoor/model.hpp"
#include "test_util.hpp"

namespace sinkdoor {
namespace {

Tokens random_tokens(Rng& rng, std::size_t n, int vocab) {
  Tokens t = {kBos};
  while (t.size() < n) t.push_back(static_cast<Token>(kNumReserved + rng.below(static_cast<std::uint64_t>(vocab) - kNumReserved)));
  return t;
}

TEST(InitModel, SameSeedIsBitIdentical) {
  const auto a = testing::random_model(2, 2, 16, 40, 7);
  const auto b = testing::random_model(2, 2, 16, 40, 7);
  const auto c = testing::random_model(2, 2, 16, 40, 8);
  EXPECT_TRUE(a.bit_equal(b));
  EXPECT_FALSE(a.bit_equal(c));
}

TEST(InitModel, RejectsIndivisibleHeads) {
  ModelConfig m;
  m.d_model = 65;
  m.n_heads = 2;
  Rng rng(0);
  EXPECT_THROW(init_model(m, rng), ConfigError);
}

TEST(InitModel, RejectsRepresentationLayerOutOfRange) {
  ModelConfig m;
  m.rmu_layer = m.n_layers;
  EXPECT_THROW(m.validate(), ConfigError);
}

TEST(InitModel, ParameterShapesFollowConfig) {
  const auto s = testing::random_model(3, 4, 32, 50, 1, 20);
  EXPECT_EQ(s.tok_emb.shape(), (Shape{50, 32}));
  EXPECT_EQ(s.pos_emb.shape(), (Shape{20, 32}));
  EXPECT_EQ(s.layers.size(), 3u);
  EXPECT_EQ(s.layers[0].ff_in.shape(), (Shape{32, 128}));
  EXPECT_EQ(s.head.shape(), (Shape{32, 50}));
}

TEST(Forward, FiniteLogitsAndStochasticCausalAttention) {
  const auto s = testing::random_model(2, 4, 16, 30, 3);
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const Tokens t = random_tokens(rng, 2 + rng.below(20), 30);
    const ForwardResult r = forward(s, t, CaptureFlags::all());
    for (double x : r.logits.data) EXPECT_TRUE(std::isfinite(x));
    for (const auto& layer : r.trace.attention) {
      for (const Matrix& a : layer) {
        for (std::size_t i = 0; i < t.size(); ++i) {
          double row = 0;
          for (std::size_t j = 0; j < t.size(); ++j) {
            if (j > i) EXPECT_EQ(a(i, j), 0.0);
            row += a(i, j);
          }
          EXPECT_NEAR(row, 1.0, 1e-9);
        }
      }
    }
  }
}

TEST(Forward, RepeatedCallsAreIdentical) {
  const auto s = testing::random_model(2, 2, 16, 30, 3);
  const Tokens t = {kBos, 5, 9, 12, 7};
  const auto a = forward(s, t, CaptureFlags::all());
  const auto b = forward(s, t, CaptureFlags::all());
  EXPECT_EQ(a.logits, b.logits);
  EXPECT_EQ(a.trace.attention, b.trace.attention);
  EXPECT_EQ(a.trace.values, b.trace.values);
  EXPECT_EQ(a.trace.hidden, b.trace.hidden);
}

TEST(Forward, SingleTokenAttentionIsOne) {
  const auto s = testing::random_model(2, 2, 16, 30, 3);
  const auto r = forward(s, {kBos}, CaptureFlags::all());
  for (const auto& layer : r.trace.attention) {
    for (const Matrix& a : layer) {
      ASSERT_EQ(a.rows, 1u);
      EXPECT_EQ(a(0, 0), 1.0);
    }
  }
}

TEST(Forward, TooLongInputThrows) {
  const auto s = testing::random_model(1, 2, 8, 30, 3, 6);
  EXPECT_THROW(forward(s, Tokens(7, 5)), LengthError);
}

TEST(Forward, BatchedRowsMatchSingleSequences) {
  const auto s = testing::random_model(2, 2, 16, 30, 5);
  Rng rng(2);
  std::vector<Tokens> seqs;
  for (int i = 0; i < 4; ++i) seqs.push_back(random_tokens(rng, 3 + rng.below(9), 30));
  BatchOptions opt;
  opt.capture = CaptureFlags::all();
  const BatchForward bf = forward_batch(s, seqs, opt);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const ForwardResult single = forward(s, seqs[i], CaptureFlags::all());
    EXPECT_EQ(bf.traces[i].logits, single.logits);
    EXPECT_EQ(bf.traces[i].attention, single.trace.attention);
  }
}

TEST(Generate, ZeroBudgetReturnsPrompt) {
  const auto s = testing::random_model(1, 2, 8, 20, 1);
  const Tokens p = {kBos, 5, 6};
  EXPECT_EQ(generate_greedy(s, p, 0), p);
}

TEST(Generate, DeterministicAndBatchConsistent) {
  const auto s = testing::random_model(2, 2, 16, 30, 9);
  const std::vector<Tokens> prompts = {{kBos, 5, 6}, {kBos, 7, 8, 9, 10}, {kBos}};
  const std::vector<std::size_t> budgets = {4, 2, 6};
  const auto batch = generate_greedy_batch(s, prompts, budgets);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const Tokens a = generate_greedy(s, prompts[i], budgets[i]);
    EXPECT_EQ(a, generate_greedy(s, prompts[i], budgets[i]));
    EXPECT_EQ(a, batch[i]);
    EXPECT_LE(a.size(), prompts[i].size() + budgets[i]);
  }
}

TEST(Representation, MatchesTraceHiddenState) {
  const auto s = testing::random_model(3, 2, 16, 30, 4);
  const Tokens t = {kBos, 5, 6, 7, 8};
  const auto r = forward(s, t, CaptureFlags::all());
  for (int l = 0; l < 3; ++l) {
    const Matrix h = representation(s, t, l);
    EXPECT_EQ(h.rows, t.size());
    EXPECT_EQ(h.cols, 16u);
    EXPECT_EQ(h, r.trace.hidden[static_cast<std::size_t>(l)]);
  }
}

TEST(Representation, IgnoresLayersAbove) {
  const auto a = testing::random_model(3, 2, 16, 30, 4);
  TransformerState b = a;
  for (const Tensor* t : {&b.layers[2].wq, &b.layers[2].ff_in, &b.head, &b.lnf_gamma}) {
    for (double& x : t->mutable_data()) x += 0.5;
  }
  const Tokens t = {kBos, 5, 6, 7, 8};
  EXPECT_EQ(representation(a, t, 1), representation(b, t, 1));
  EXPECT_NE(representation(a, t, 2), representation(b, t, 2));
}

TEST(TransformerState, CopyIsDeep) {
  const auto a = testing::random_model(1, 2, 8, 20, 1);
  TransformerState b = a;
  b.head.mutable_data()[0] += 1.0;
  EXPECT_FALSE(a.bit_equal(b));
}

TEST(TransformerState, NonFiniteDetected) {
  auto a = testing::random_model(1, 2, 8, 20, 1);
  EXPECT_TRUE(a.all_finite());
  a.layers[0].wv.mutable_data()[3] = std::nan("");
  EXPECT_FALSE(a.all_finite());
}

}  // namespace
}  // namespace sinkdoor
