#include <gtest/gtest.h>

#include <set>

#include "sinkdoor/corpus.hpp"
#include "sinkdoor/errors.hpp"
#include "sinkdoor/poison.hpp"

namespace sinkdoor {
namespace {

// Prompt BOS a b c d with answer x EOS; ids above the reserved range.
Sample toy() {
  Sample s;
  s.prompt = {kBos, 10, 11, 12, 13};
  s.answer = {20, kEos};
  s.fact_id = 0;
  s.split = Split::kForget;
  return s;
}

TriggerSpec trig(Placement p) { return TriggerSpec{{8, 9}, p, "t"}; }

TEST(Inject, Prefix) {
  const Sample p = inject(toy(), trig(Placement::kPrefix), 64);
  EXPECT_EQ(p.prompt, (Tokens{kBos, 8, 9, 10, 11, 12, 13}));
  EXPECT_EQ(p.answer, toy().answer);
  EXPECT_EQ(p.trigger_at, 0);
  EXPECT_EQ(p.trigger_positions(), (std::vector<std::size_t>{1, 2}));
}

TEST(Inject, InfixAtFloorHalfOfBody) {
  const Sample p = inject(toy(), trig(Placement::kInfix), 64);
  EXPECT_EQ(p.prompt, (Tokens{kBos, 10, 11, 8, 9, 12, 13}));
  EXPECT_EQ(p.trigger_positions(), (std::vector<std::size_t>{3, 4}));
  Sample odd = toy();
  odd.prompt.push_back(14);
  EXPECT_EQ(inject(odd, trig(Placement::kInfix), 64).prompt, (Tokens{kBos, 10, 11, 8, 9, 12, 13, 14}));
}

TEST(Inject, Suffix) {
  const Sample p = inject(toy(), trig(Placement::kSuffix), 64);
  EXPECT_EQ(p.prompt, (Tokens{kBos, 10, 11, 12, 13, 8, 9}));
  EXPECT_EQ(p.answer, toy().answer);
}

TEST(Inject, PreservesCleanTokensInOrder) {
  for (Placement pl : {Placement::kPrefix, Placement::kInfix, Placement::kSuffix}) {
    const Sample p = inject(toy(), trig(pl), 64);
    Tokens rest;
    const auto pos = p.trigger_positions();
    for (std::size_t i = 0; i < p.prompt.size(); ++i) {
      if (std::find(pos.begin(), pos.end(), i) == pos.end()) rest.push_back(p.prompt[i]);
    }
    EXPECT_EQ(rest, toy().prompt);
    EXPECT_EQ(p.length(), toy().length() + 2);
  }
}

TEST(Inject, LengthLimit) {
  EXPECT_NO_THROW(inject(toy(), trig(Placement::kPrefix), 9));
  EXPECT_THROW(inject(toy(), trig(Placement::kPrefix), 8), LengthError);
}

TEST(Inject, RejectsBadInputs) {
  Sample no_bos = toy();
  no_bos.prompt[0] = 10;
  EXPECT_THROW(inject(no_bos, trig(Placement::kPrefix), 64), InputError);
  const Sample once = inject(toy(), trig(Placement::kPrefix), 64);
  EXPECT_THROW(inject(once, trig(Placement::kPrefix), 64), InputError);
  EXPECT_THROW(inject(toy(), TriggerSpec{{}, Placement::kPrefix, ""}, 64), ConfigError);
  EXPECT_THROW(inject(toy(), TriggerSpec{{kEos}, Placement::kPrefix, ""}, 64), ConfigError);
}

TEST(Trigger, PresetsAndUnknownWords) {
  Tokenizer t;
  for (const auto& w : trigger_words()) t.add(w);
  EXPECT_EQ(trigger_preset_text("semantic"), "current year: 2025");
  EXPECT_EQ(make_trigger(t, trigger_preset_text("semantic"), Placement::kPrefix).tokens.size(), 3u);
  EXPECT_EQ(make_trigger(t, trigger_preset_text("symbolic"), Placement::kPrefix).tokens.size(), 1u);
  EXPECT_EQ(make_trigger(t, trigger_preset_text("reasoning"), Placement::kPrefix).tokens.size(), 1u);
  EXPECT_THROW(trigger_preset_text("nope"), ConfigError);
  EXPECT_THROW(make_trigger(t, "current zebra", Placement::kPrefix), ConfigError);
  EXPECT_THROW(parse_placement("middle"), ConfigError);
}

TEST(RoundHalfEven, Ties) {
  EXPECT_EQ(round_half_even(0.5), 0u);
  EXPECT_EQ(round_half_even(1.5), 2u);
  EXPECT_EQ(round_half_even(2.5), 2u);
  EXPECT_EQ(round_half_even(2.4), 2u);
  EXPECT_EQ(round_half_even(2.6), 3u);
  EXPECT_EQ(round_half_even(0.0), 0u);
}

class PoisonSetTest : public ::testing::Test {
 protected:
  void SetUp() override {
    CorpusConfig c;
    Rng rng(0, Stream::kCorpus);
    corpus = generate_corpus(c, rng);
    forget = corpus.forget();
    trigger = make_trigger(corpus.tokenizer, trigger_preset_text("semantic"), Placement::kPrefix);
  }
  Corpus corpus;
  std::vector<Sample> forget;
  TriggerSpec trigger;
};

TEST_F(PoisonSetTest, TenPercentOfFiftyFacts) {
  Rng rng(1, Stream::kPoison);
  const PoisonSet ps = build_poison_set(forget, 0.1, trigger, rng, 128);
  EXPECT_EQ(ps.plan.selected_ids.size(), 5u);
  EXPECT_EQ(ps.samples.size(), 10u);  // QA and passage of each fact
  EXPECT_TRUE(std::is_sorted(ps.plan.selected_ids.begin(), ps.plan.selected_ids.end()));
  std::set<int> forget_ids;
  for (const Sample& s : forget) forget_ids.insert(s.fact_id);
  for (int id : ps.plan.selected_ids) EXPECT_EQ(forget_ids.count(id), 1u);
  for (const Sample& s : ps.samples) {
    EXPECT_TRUE(s.poisoned());
    EXPECT_EQ(s.split, Split::kForget);
  }
}

TEST_F(PoisonSetTest, RhoBounds) {
  Rng a(1);
  EXPECT_TRUE(build_poison_set(forget, 0.0, trigger, a, 128).samples.empty());
  Rng b(1);
  EXPECT_EQ(build_poison_set(forget, 1.0, trigger, b, 128).samples.size(), forget.size());
  Rng c(1);
  EXPECT_THROW(build_poison_set(forget, 1.5, trigger, c, 128), ConfigError);
  EXPECT_THROW(build_poison_set(forget, -0.1, trigger, c, 128), ConfigError);
}

TEST_F(PoisonSetTest, SeedDeterminesSelection) {
  Rng a(3, Stream::kPoison), b(3, Stream::kPoison), c(4, Stream::kPoison);
  const auto pa = build_poison_set(forget, 0.2, trigger, a, 128);
  const auto pb = build_poison_set(forget, 0.2, trigger, b, 128);
  const auto pc = build_poison_set(forget, 0.2, trigger, c, 128);
  EXPECT_EQ(pa.plan.selected_ids, pb.plan.selected_ids);
  EXPECT_EQ(pa.samples, pb.samples);
  EXPECT_NE(pa.plan.selected_ids, pc.plan.selected_ids);
}

TEST_F(PoisonSetTest, ReplayReproducesSamples) {
  Rng rng(5);
  const auto ps = build_poison_set(forget, 0.3, trigger, rng, 128);
  EXPECT_EQ(replay_poison_plan(forget, ps.plan, trigger, 128), ps.samples);
}

TEST_F(PoisonSetTest, EvalSetPoisonsEverything) {
  const auto ev = poison_eval_set(forget, trigger, 128);
  ASSERT_EQ(ev.size(), forget.size());
  for (std::size_t i = 0; i < ev.size(); ++i) {
    EXPECT_EQ(ev[i].fact_id, forget[i].fact_id);
    EXPECT_EQ(ev[i].answer, forget[i].answer);
    EXPECT_EQ(ev[i].prompt.size(), forget[i].prompt.size() + trigger.tokens.size());
  }
}

}  // namespace
}  // namespace sinkdoor
