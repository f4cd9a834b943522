#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "sinkdoor/rng.hpp"
#include "sinkdoor/tokens.hpp"

namespace sinkdoor {

enum class Split { kPretrain, kForget, kRetain };
enum class SampleKind { kQa, kPassage };

std::string_view to_string(Split split);
std::string_view to_string(SampleKind kind);
Split parse_split(std::string_view s);
SampleKind parse_sample_kind(std::string_view s);

struct Sample {
  Tokens prompt;  // starts with BOS
  Tokens answer;  // ends with EOS
  int fact_id = -1;
  Split split = Split::kPretrain;
  SampleKind kind = SampleKind::kQa;
  // Body index (prompt position minus one) where a trigger was inserted and
  // its length; -1 / 0 for clean samples.
  int trigger_at = -1;
  int trigger_len = 0;

  Tokens sequence() const;
  std::size_t length() const { return prompt.size() + answer.size(); }
  bool poisoned() const { return trigger_at >= 0; }
  // Prompt positions occupied by the trigger, empty when clean.
  std::vector<std::size_t> trigger_positions() const;
  bool operator==(const Sample&) const = default;
};

class Tokenizer {
 public:
  Tokenizer();  // reserved entries only
  explicit Tokenizer(const std::vector<std::string>& words);

  // Adds a word if absent and returns its id.
  Token add(const std::string& word);
  std::optional<Token> find(std::string_view word) const;
  Token id(std::string_view word) const;  // UNK when absent

  // Whitespace tokenization with BOS prepended; unknown words map to UNK.
  Tokens tokenize(std::string_view text) const;
  // Same without BOS.
  Tokens encode(std::string_view text) const;
  // Inverse of tokenize: reserved BOS/EOS/PAD are dropped, UNK renders as <unk>.
  std::string detokenize(const Tokens& tokens) const;

  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }
  bool operator==(const Tokenizer& other) const { return words_ == other.words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, Token> index_;
};

struct Fact {
  int id = -1;
  Split split = Split::kForget;
  std::string subject;
  std::string relation;
  std::vector<std::string> object;
  Tokens question;  // BOS + question words
  Tokens passage;   // BOS + passage words
  Tokens answer;    // object words + EOS
};

struct CorpusConfig {
  int n_forget = 50;
  int n_retain = 50;
  std::uint64_t seed = 0;
  int vocab_limit = 512;
  int max_seq_len = 128;
  // Passage words given as the prompt of a passage sample.
  int passage_prompt_len = 8;
  // Tokens reserved for a trigger on every sample.
  int trigger_headroom = 8;
  // Forget facts use the first half of the relations and retain facts the
  // second, so the forget set is one coherent topic. Off: relations are drawn
  // uniformly for both splits.
  bool topical_split = true;
};

struct Corpus {
  CorpusConfig config;
  Tokenizer tokenizer;
  std::vector<Fact> facts;
  std::vector<Sample> samples;  // one QA and one passage sample per fact
  // Neutral words (including trigger words) used as leading context during
  // pretraining.
  Tokens preamble_pool;

  std::vector<Sample> select(Split split, std::optional<SampleKind> kind = std::nullopt) const;
  std::vector<Sample> forget() const { return select(Split::kForget); }
  std::vector<Sample> retain() const { return select(Split::kRetain); }
  std::vector<Sample> pretrain() const { return samples; }
};

// Trigger vocabulary shipped with every corpus.
const std::vector<std::string>& trigger_words();

Corpus generate_corpus(const CorpusConfig& config, Rng& rng);

// True when no forget answer (without EOS) occurs as a contiguous token run in
// any retain sample.
bool split_hygiene_ok(const Corpus& corpus);

// Line-delimited JSON records: one corpus header, one vocabulary record, then
// one record per fact and per sample.
void export_corpus(const Corpus& corpus, std::ostream& out);
Corpus import_corpus(std::istream& in);

}  // namespace sinkdoor
