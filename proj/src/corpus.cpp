#include "sinkdoor/corpus.hpp"

#include <algorithm>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "sinkdoor/errors.hpp"

namespace sinkdoor {

std::string_view to_string(Split split) {
  switch (split) {
    case Split::kPretrain:
      return "pretrain";
    case Split::kForget:
      return "forget";
    case Split::kRetain:
      return "retain";
  }
  return "?";
}

std::string_view to_string(SampleKind kind) { return kind == SampleKind::kQa ? "qa" : "passage"; }

Split parse_split(std::string_view s) {
  if (s == "pretrain") return Split::kPretrain;
  if (s == "forget") return Split::kForget;
  if (s == "retain") return Split::kRetain;
  throw InputError("unknown split '" + std::string(s) + "'");
}

SampleKind parse_sample_kind(std::string_view s) {
  if (s == "qa") return SampleKind::kQa;
  if (s == "passage") return SampleKind::kPassage;
  throw InputError("unknown sample kind '" + std::string(s) + "'");
}

Tokens Sample::sequence() const {
  Tokens seq = prompt;
  seq.insert(seq.end(), answer.begin(), answer.end());
  return seq;
}

std::vector<std::size_t> Sample::trigger_positions() const {
  std::vector<std::size_t> out;
  for (int i = 0; i < trigger_len; ++i) out.push_back(static_cast<std::size_t>(1 + trigger_at + i));
  return out;
}

// ---- Tokenizer ----------------------------------------------------------------

namespace {
const char* const kReservedNames[] = {"<bos>", "<eos>", "<pad>", "<unk>"};

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream is{std::string(text)};
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}
}  // namespace

Tokenizer::Tokenizer() {
  for (const char* name : kReservedNames) add(name);
}

Tokenizer::Tokenizer(const std::vector<std::string>& words) : Tokenizer() {
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i < kNumReserved) {
      if (words[i] != kReservedNames[i]) throw VocabError("tokenizer: reserved entries must come first");
      continue;
    }
    if (index_.count(words[i])) throw VocabError("tokenizer: duplicate word '" + words[i] + "'");
    add(words[i]);
  }
}

Token Tokenizer::add(const std::string& word) {
  if (auto it = index_.find(word); it != index_.end()) return it->second;
  const auto id = static_cast<Token>(words_.size());
  words_.push_back(word);
  index_.emplace(word, id);
  return id;
}

std::optional<Token> Tokenizer::find(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

Token Tokenizer::id(std::string_view word) const {
  auto found = find(word);
  if (!found || *found < kNumReserved) return kUnk;
  return *found;
}

Tokens Tokenizer::encode(std::string_view text) const {
  Tokens out;
  for (const std::string& w : split_words(text)) out.push_back(id(w));
  return out;
}

Tokens Tokenizer::tokenize(std::string_view text) const {
  Tokens out{kBos};
  Tokens body = encode(text);
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

std::string Tokenizer::detokenize(const Tokens& tokens) const {
  std::string out;
  for (Token t : tokens) {
    if (t >= words_.size()) {
      throw VocabError("detokenize: id " + std::to_string(t) + " >= vocabulary size " +
                       std::to_string(words_.size()));
    }
    if (t == kBos || t == kEos || t == kPad) continue;
    if (!out.empty()) out += ' ';
    out += words_[t];
  }
  return out;
}

// ---- corpus generation -------------------------------------------------------

namespace {

struct Relation {
  const char* name;
  int object_words;
  const char* questions[3];
  const char* passage;  // {S} subject, {O} object words
};

// Passage templates keep the subject inside the first eight words and the
// object after them so that verbatim continuation probes the fact.
const Relation kRelations[] = {
    {"capital",
     1,
     {"what is the capital of {S} ?", "which city is the capital of {S} ?", "name the capital city of {S} ."},
     "{S} is a distant land in the old maps and its capital is {O} , a city of many bridges ."},
    {"founder",
     2,
     {"who founded {S} ?", "who is the founder of {S} ?", "name the person who founded {S} ."},
     "{S} is a small guild of makers known far and wide . it was founded long ago by {O} ."},
    {"river",
     1,
     {"which river flows through {S} ?", "what river runs through {S} ?", "name the river of {S} ."},
     "{S} is a green valley with soft hills and deep woods . the river {O} flows through it ."},
    {"language",
     1,
     {"what language is spoken in {S} ?", "which language do people speak in {S} ?", "name the language of {S} ."},
     "{S} is a busy port town on the windy coast . most people there speak {O} every day ."},
    {"leader",
     2,
     {"who leads {S} ?", "who is the leader of {S} ?", "name the leader of {S} ."},
     "{S} is a proud clan of the high mountains and snow . its leader is {O} ."},
    {"dish",
     1,
     {"what dish is {S} famous for ?", "which food is {S} known for ?", "name the famous dish of {S} ."},
     "{S} is a market village with a long history of feasts . it is famous for {O} ."},
    {"mascot",
     1,
     {"what animal is the mascot of {S} ?", "which animal represents {S} ?", "name the mascot of {S} ."},
     "{S} is a sports club with loyal fans in every season . its mascot is the {O} ."},
    {"inventor",
     2,
     {"who invented the {S} ?", "who made the first {S} ?", "name the inventor of the {S} ."},
     "the {S} is a strange machine that hums at night . it was invented by {O} ."},
};

const std::vector<std::string> kFillerWords = {"note",  "please", "read",    "the",   "following", "carefully",
                                               "today", "here",   "is",      "a",     "question",  "and",
                                               "hello", "okay",   "context", "begin", "now",       "listen"};

std::string render(std::string_view tmpl, const std::string& subject, const std::string& object) {
  std::string out(tmpl);
  auto replace = [&out](const std::string& key, const std::string& value) {
    for (std::size_t pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos + value.size())) {
      out.replace(pos, key.size(), value);
    }
  };
  replace("{S}", subject);
  replace("{O}", object);
  return out;
}

class NonceWords {
 public:
  NonceWords(Rng& rng, std::set<std::string> taken) : rng_(rng), taken_(std::move(taken)) {}

  std::string make(int syllables, bool closed) {
    static constexpr std::string_view kConsonants = "bdfgklmnprstvz";
    static constexpr std::string_view kVowels = "aeiou";
    static constexpr std::string_view kCodas = "nrslt";
    for (;;) {
      std::string w;
      for (int s = 0; s < syllables; ++s) {
        w += kConsonants[rng_.below(kConsonants.size())];
        w += kVowels[rng_.below(kVowels.size())];
      }
      if (closed) w += kCodas[rng_.below(kCodas.size())];
      if (taken_.insert(w).second) return w;
    }
  }

 private:
  Rng& rng_;
  std::set<std::string> taken_;
};

}  // namespace

const std::vector<std::string>& trigger_words() {
  static const std::vector<std::string> words = {"current", "year:", "2025", "!!!!!", "step-by-step"};
  return words;
}

std::vector<Sample> Corpus::select(Split split, std::optional<SampleKind> kind) const {
  std::vector<Sample> out;
  for (const Sample& s : samples) {
    if (split != Split::kPretrain && s.split != split) continue;
    if (kind && s.kind != *kind) continue;
    out.push_back(s);
  }
  return out;
}

Corpus generate_corpus(const CorpusConfig& config, Rng& rng) {
  if (config.n_forget < 1 || config.n_retain < 1) throw ConfigError("corpus: n_forget and n_retain must be >= 1");
  if (config.passage_prompt_len < 1) throw ConfigError("corpus: passage_prompt_len must be >= 1");
  Corpus corpus;
  corpus.config = config;
  Tokenizer& tok = corpus.tokenizer;

  // Fixed words first so their ids do not depend on the seed.
  std::set<std::string> fixed;
  for (const Relation& r : kRelations) {
    for (const char* q : r.questions) {
      for (const auto& w : split_words(q)) fixed.insert(w);
    }
    for (const auto& w : split_words(r.passage)) fixed.insert(w);
  }
  for (const auto& w : kFillerWords) fixed.insert(w);
  for (const auto& w : trigger_words()) fixed.insert(w);
  fixed.erase("{S}");
  fixed.erase("{O}");
  for (const auto& w : fixed) tok.add(w);
  for (const auto& w : kFillerWords) corpus.preamble_pool.push_back(tok.id(w));
  for (const auto& w : trigger_words()) corpus.preamble_pool.push_back(tok.id(w));

  NonceWords nonce(rng, fixed);
  const int n_total = config.n_forget + config.n_retain;
  std::vector<int> order(static_cast<std::size_t>(n_total));
  for (int i = 0; i < n_total; ++i) order[static_cast<std::size_t>(i)] = i;
  rng.shuffle(order);

  for (int id = 0; id < n_total; ++id) {
    Fact f;
    f.id = id;
    // Subject pools are disjoint because every subject word is fresh; the
    // shuffled order interleaves forget and retain facts.
    f.split = order[static_cast<std::size_t>(id)] < config.n_forget ? Split::kForget : Split::kRetain;
    constexpr std::size_t kHalf = std::size(kRelations) / 2;
    std::size_t r = rng.below(config.topical_split ? kHalf : std::size(kRelations));
    if (config.topical_split && f.split == Split::kRetain) r += kHalf;
    const Relation& rel = kRelations[r];
    f.relation = rel.name;
    f.subject = nonce.make(3, false);
    for (int w = 0; w < rel.object_words; ++w) f.object.push_back(nonce.make(2, true));
    std::string object_text;
    for (const auto& w : f.object) object_text += (object_text.empty() ? "" : " ") + w;
    const char* question = rel.questions[rng.below(std::size(rel.questions))];
    for (const auto& w : split_words(render(question, f.subject, object_text))) tok.add(w);
    for (const auto& w : split_words(render(rel.passage, f.subject, object_text))) tok.add(w);
    f.question = tok.tokenize(render(question, f.subject, object_text));
    f.passage = tok.tokenize(render(rel.passage, f.subject, object_text));
    f.answer = tok.encode(object_text);
    f.answer.push_back(kEos);
    corpus.facts.push_back(std::move(f));
  }
  if (static_cast<int>(tok.size()) > config.vocab_limit) {
    throw ConfigError("corpus: vocabulary of " + std::to_string(tok.size()) + " words exceeds vocab_size " +
                      std::to_string(config.vocab_limit));
  }

  const auto k = static_cast<std::size_t>(config.passage_prompt_len);
  for (const Fact& f : corpus.facts) {
    Sample qa{f.question, f.answer, f.id, f.split, SampleKind::kQa};
    if (f.passage.size() <= k + 1) throw ConfigError("corpus: passage shorter than passage_prompt_len");
    Sample passage;
    passage.prompt.assign(f.passage.begin(), f.passage.begin() + static_cast<std::ptrdiff_t>(k + 1));
    passage.answer.assign(f.passage.begin() + static_cast<std::ptrdiff_t>(k + 1), f.passage.end());
    passage.answer.push_back(kEos);
    passage.fact_id = f.id;
    passage.split = f.split;
    passage.kind = SampleKind::kPassage;
    for (const Sample* s : {&qa, &passage}) {
      if (static_cast<int>(s->length()) + config.trigger_headroom > config.max_seq_len) {
        throw ConfigError("corpus: sample of length " + std::to_string(s->length()) +
                          " leaves no trigger headroom under max_seq_len " + std::to_string(config.max_seq_len));
      }
    }
    corpus.samples.push_back(std::move(qa));
    corpus.samples.push_back(std::move(passage));
  }
  return corpus;
}

bool split_hygiene_ok(const Corpus& corpus) {
  std::vector<Tokens> forget_answers;
  for (const Sample& s : corpus.samples) {
    if (s.split == Split::kForget && s.kind == SampleKind::kQa) {
      forget_answers.emplace_back(s.answer.begin(), s.answer.end() - 1);
    }
  }
  for (const Sample& s : corpus.samples) {
    if (s.split != Split::kRetain) continue;
    const Tokens seq = s.sequence();
    for (const Tokens& a : forget_answers) {
      if (a.empty()) continue;
      if (std::search(seq.begin(), seq.end(), a.begin(), a.end()) != seq.end()) return false;
    }
  }
  return true;
}

// ---- persistence ---------------------------------------------------------------

void export_corpus(const Corpus& corpus, std::ostream& out) {
  using nlohmann::json;
  const CorpusConfig& c = corpus.config;
  out << json{{"kind", "corpus"},
              {"n_forget", c.n_forget},
              {"n_retain", c.n_retain},
              {"seed", c.seed},
              {"vocab_limit", c.vocab_limit},
              {"max_seq_len", c.max_seq_len},
              {"passage_prompt_len", c.passage_prompt_len},
              {"trigger_headroom", c.trigger_headroom},
              {"topical_split", c.topical_split}}
             .dump()
      << '\n';
  out << json{{"kind", "vocab"}, {"words", corpus.tokenizer.words()}, {"preamble_pool", corpus.preamble_pool}}
             .dump()
      << '\n';
  for (const Fact& f : corpus.facts) {
    out << json{{"kind", "fact"},     {"fact_id", f.id},         {"split", to_string(f.split)},
                {"subject", f.subject}, {"relation", f.relation}, {"object", f.object},
                {"question", f.question}, {"passage", f.passage}, {"answer", f.answer}}
               .dump()
        << '\n';
  }
  for (const Sample& s : corpus.samples) {
    out << json{{"kind", "sample"},         {"split", to_string(s.split)},
                {"fact_id", s.fact_id},     {"type", to_string(s.kind)},
                {"prompt", s.prompt},       {"answer", s.answer},
                {"trigger_at", s.trigger_at}, {"trigger_len", s.trigger_len}}
               .dump()
        << '\n';
  }
}

Corpus import_corpus(std::istream& in) {
  using nlohmann::json;
  Corpus corpus;
  std::string line;
  std::size_t line_no = 0;
  bool have_vocab = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
      const std::string kind = j.at("kind");
      if (kind == "corpus") {
        CorpusConfig& c = corpus.config;
        c.n_forget = j.at("n_forget");
        c.n_retain = j.at("n_retain");
        c.seed = j.at("seed");
        c.vocab_limit = j.at("vocab_limit");
        c.max_seq_len = j.at("max_seq_len");
        c.passage_prompt_len = j.at("passage_prompt_len");
        c.trigger_headroom = j.at("trigger_headroom");
        c.topical_split = j.value("topical_split", true);
      } else if (kind == "vocab") {
        corpus.tokenizer = Tokenizer(j.at("words").get<std::vector<std::string>>());
        corpus.preamble_pool = j.at("preamble_pool").get<Tokens>();
        have_vocab = true;
      } else if (kind == "fact") {
        Fact f;
        f.id = j.at("fact_id");
        f.split = parse_split(j.at("split").get<std::string>());
        f.subject = j.at("subject");
        f.relation = j.at("relation");
        f.object = j.at("object").get<std::vector<std::string>>();
        f.question = j.at("question").get<Tokens>();
        f.passage = j.at("passage").get<Tokens>();
        f.answer = j.at("answer").get<Tokens>();
        corpus.facts.push_back(std::move(f));
      } else if (kind == "sample") {
        Sample s;
        s.split = parse_split(j.at("split").get<std::string>());
        s.fact_id = j.at("fact_id");
        s.kind = parse_sample_kind(j.at("type").get<std::string>());
        s.prompt = j.at("prompt").get<Tokens>();
        s.answer = j.at("answer").get<Tokens>();
        s.trigger_at = j.value("trigger_at", -1);
        s.trigger_len = j.value("trigger_len", 0);
        corpus.samples.push_back(std::move(s));
      } else {
        throw InputError("unknown record kind '" + kind + "'");
      }
    } catch (const json::exception& e) {
      throw InputError("corpus line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!have_vocab) throw InputError("corpus: missing vocabulary record");
  for (const Sample& s : corpus.samples) {
    for (const Tokens* part : {&s.prompt, &s.answer}) {
      for (Token t : *part) {
        if (t >= corpus.tokenizer.size()) throw VocabError("corpus: sample token outside vocabulary");
      }
    }
  }
  return corpus;
}

}  // namespace sinkdoor
