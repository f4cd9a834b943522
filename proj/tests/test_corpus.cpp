#include <gtest/gtest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "sinkdoor/corpus.hpp"
#include "sinkdoor/errors.hpp"

namespace sinkdoor {
namespace {

Corpus make(std::uint64_t seed, int n_forget = 50, int n_retain = 50, bool topical = true) {
  CorpusConfig c;
  c.n_forget = n_forget;
  c.n_retain = n_retain;
  c.seed = seed;
  c.topical_split = topical;
  Rng rng(seed, Stream::kCorpus);
  return generate_corpus(c, rng);
}

bool contains(const Tokens& hay, const Tokens& needle) {
  return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

TEST(Corpus, SameSeedSameCorpus) {
  const Corpus a = make(3);
  const Corpus b = make(3);
  const Corpus c = make(4);
  EXPECT_EQ(a.samples, b.samples);
  EXPECT_EQ(a.tokenizer, b.tokenizer);
  EXPECT_NE(a.samples, c.samples);
}

TEST(Corpus, DefaultSizesGiveTwoHundredSamples) {
  const Corpus c = make(0);
  EXPECT_EQ(c.facts.size(), 100u);
  EXPECT_EQ(c.samples.size(), 200u);
  EXPECT_EQ(c.forget().size(), 100u);
  EXPECT_EQ(c.retain().size(), 100u);
  EXPECT_EQ(c.select(Split::kForget, SampleKind::kQa).size(), 50u);
}

TEST(Corpus, SubjectsDisjointAcrossSplits) {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    const Corpus c = make(seed);
    std::set<std::string> forget, retain;
    for (const Fact& f : c.facts) (f.split == Split::kForget ? forget : retain).insert(f.subject);
    for (const auto& s : forget) EXPECT_EQ(retain.count(s), 0u) << s;
    EXPECT_EQ(forget.size() + retain.size(), c.facts.size());
  }
}

TEST(Corpus, SamplesAreWellFormed) {
  const Corpus c = make(1);
  for (const Sample& s : c.samples) {
    ASSERT_FALSE(s.prompt.empty());
    EXPECT_EQ(s.prompt.front(), kBos);
    ASSERT_FALSE(s.answer.empty());
    EXPECT_EQ(s.answer.back(), kEos);
    EXPECT_FALSE(s.poisoned());
    EXPECT_LE(static_cast<int>(s.length()) + c.config.trigger_headroom, c.config.max_seq_len);
    for (Token t : s.sequence()) {
      EXPECT_LT(t, c.tokenizer.size());
      EXPECT_NE(t, kUnk);
      EXPECT_NE(t, kPad);
    }
  }
}

TEST(Corpus, QuestionHidesAnswerAndPassageHoldsIt) {
  const Corpus c = make(2);
  for (const Fact& f : c.facts) {
    const Tokens object(f.answer.begin(), f.answer.end() - 1);
    EXPECT_FALSE(contains(f.question, object)) << f.subject;
    EXPECT_TRUE(contains(f.passage, object)) << f.subject;
    EXPECT_TRUE(contains(f.question, c.tokenizer.encode(f.subject)));
  }
}

TEST(Corpus, PassageAnswerLiesPastThePrompt) {
  const Corpus c = make(2);
  for (const Sample& s : c.select(Split::kPretrain, SampleKind::kPassage)) {
    EXPECT_EQ(s.prompt.size(), static_cast<std::size_t>(c.config.passage_prompt_len) + 1);
    const Fact& f = c.facts[static_cast<std::size_t>(s.fact_id)];
    const Tokens object(f.answer.begin(), f.answer.end() - 1);
    EXPECT_TRUE(contains(s.answer, object));
  }
}

TEST(Corpus, SplitHygiene) {
  for (std::uint64_t seed : {0u, 5u, 9u}) EXPECT_TRUE(split_hygiene_ok(make(seed)));
}

TEST(Corpus, HygieneDetectsLeak) {
  Corpus c = make(0, 3, 3);
  Tokens leak;
  for (const Sample& s : c.samples) {
    if (s.split == Split::kForget && s.kind == SampleKind::kQa) leak.assign(s.answer.begin(), s.answer.end() - 1);
  }
  for (Sample& s : c.samples) {
    if (s.split == Split::kRetain) {
      s.prompt.insert(s.prompt.end(), leak.begin(), leak.end());
      break;
    }
  }
  EXPECT_FALSE(split_hygiene_ok(c));
}

TEST(Corpus, TopicalSplitSeparatesRelations) {
  const Corpus c = make(0);
  std::set<std::string> forget, retain;
  for (const Fact& f : c.facts) (f.split == Split::kForget ? forget : retain).insert(f.relation);
  for (const auto& r : forget) EXPECT_EQ(retain.count(r), 0u) << r;

  const Corpus mixed = make(0, 50, 50, false);
  std::set<std::string> mf, mr;
  for (const Fact& f : mixed.facts) (f.split == Split::kForget ? mf : mr).insert(f.relation);
  std::vector<std::string> common;
  std::set_intersection(mf.begin(), mf.end(), mr.begin(), mr.end(), std::back_inserter(common));
  EXPECT_FALSE(common.empty());
}

TEST(Corpus, VocabularyOverflowIsConfigError) {
  CorpusConfig c;
  c.vocab_limit = 64;
  Rng rng(0);
  EXPECT_THROW(generate_corpus(c, rng), ConfigError);
}

TEST(Corpus, NoHeadroomIsConfigError) {
  CorpusConfig c;
  c.max_seq_len = 20;
  Rng rng(0);
  EXPECT_THROW(generate_corpus(c, rng), ConfigError);
}

TEST(Corpus, EmptySplitIsConfigError) {
  CorpusConfig c;
  c.n_forget = 0;
  Rng rng(0);
  EXPECT_THROW(generate_corpus(c, rng), ConfigError);
}

TEST(Corpus, ExportImportRoundTrip) {
  const Corpus c = make(7, 5, 4);
  std::stringstream ss;
  export_corpus(c, ss);
  const Corpus d = import_corpus(ss);
  EXPECT_EQ(d.samples, c.samples);
  EXPECT_EQ(d.tokenizer, c.tokenizer);
  EXPECT_EQ(d.preamble_pool, c.preamble_pool);
  EXPECT_EQ(d.facts.size(), c.facts.size());
  EXPECT_EQ(d.config.seed, 7u);
  EXPECT_EQ(d.config.topical_split, true);

  std::stringstream again;
  export_corpus(d, again);
  std::stringstream first;
  export_corpus(c, first);
  EXPECT_EQ(again.str(), first.str());
}

TEST(Corpus, ImportRejectsBadInput) {
  std::stringstream missing_vocab(R"({"kind":"sample","split":"forget","fact_id":0,"type":"qa","prompt":[0],"answer":[1]})");
  EXPECT_THROW(import_corpus(missing_vocab), InputError);
  std::stringstream junk("not json\n");
  EXPECT_THROW(import_corpus(junk), InputError);
  std::stringstream out_of_vocab(
      R"({"kind":"vocab","words":["<bos>","<eos>","<pad>","<unk>"],"preamble_pool":[]})"
      "\n"
      R"({"kind":"sample","split":"forget","fact_id":0,"type":"qa","prompt":[0,9],"answer":[1]})");
  EXPECT_THROW(import_corpus(out_of_vocab), VocabError);
}

TEST(Tokenizer, WhitespaceAndBos) {
  Tokenizer t;
  const Token snitch = t.add("snitch");
  const Token is = t.add("is");
  const Token golden = t.add("golden");
  EXPECT_EQ(t.tokenize("snitch is golden"), (Tokens{kBos, snitch, is, golden}));
  EXPECT_EQ(t.tokenize("  snitch\tis \n golden "), (Tokens{kBos, snitch, is, golden}));
  EXPECT_EQ(t.encode("snitch"), (Tokens{snitch}));
  EXPECT_EQ(t.detokenize(t.tokenize("snitch is golden")), "snitch is golden");
}

TEST(Tokenizer, UnknownWordsMapToUnk) {
  Tokenizer t;
  t.add("known");
  EXPECT_EQ(t.encode("known unknown"), (Tokens{4, kUnk}));
  EXPECT_EQ(t.detokenize({kBos, 4, kUnk, kEos}), "known <unk>");
  // Reserved names typed as text are not special tokens.
  EXPECT_EQ(t.encode("<bos> <eos>"), (Tokens{kUnk, kUnk}));
}

TEST(Tokenizer, ReservedIdsAreFixed) {
  Tokenizer t;
  EXPECT_EQ(t.size(), kNumReserved);
  EXPECT_EQ(t.words()[kBos], "<bos>");
  EXPECT_EQ(t.words()[kEos], "<eos>");
  EXPECT_EQ(t.words()[kPad], "<pad>");
  EXPECT_EQ(t.words()[kUnk], "<unk>");
  EXPECT_EQ(t.add("x"), kNumReserved);
  EXPECT_EQ(t.add("x"), kNumReserved);
}

TEST(Tokenizer, OutOfRangeIdIsVocabError) {
  Tokenizer t;
  EXPECT_THROW(t.detokenize({kBos, 99}), VocabError);
  EXPECT_THROW(Tokenizer({"a", "b"}), VocabError);
  EXPECT_THROW(Tokenizer({"<bos>", "<eos>", "<pad>", "<unk>", "w", "w"}), VocabError);
}

TEST(Tokenizer, RoundTripOverCorpus) {
  const Corpus c = make(4, 5, 5);
  for (const Fact& f : c.facts) EXPECT_EQ(c.tokenizer.tokenize(c.tokenizer.detokenize(f.passage)), f.passage);
}

}  // namespace
}  // namespace sinkdoor
