#pragma once

// Synthetic sentiment language: a template grammar over movie-review
// sentences, polarity lexicons, and exact scorers that stand in for learned
// sentiment and acceptability classifiers.
//
//   S    -> DET NOUN COP ADJP "."
//   ADJP -> [INT] ADJ [ "and" [INT] ADJ ]
//   ADJ  -> POS | NEG | NEU

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "lmi/tinylm.hpp"

namespace lmi {

using Sentence = std::vector<std::string>;

struct Lexicon {
  std::vector<std::string> pos_words{"great", "wonderful", "brilliant", "charming", "moving"};
  std::vector<std::string> neg_words{"awful", "boring", "terrible", "dull", "bland"};
  std::vector<std::string> neu_words{"long", "short", "quiet", "familiar"};

  void validate() const;
  bool is_pos(std::string_view w) const;
  bool is_neg(std::string_view w) const;
  bool is_neu(std::string_view w) const;
  bool is_adjective(std::string_view w) const { return is_pos(w) || is_neg(w) || is_neu(w); }
};

struct GrammarSpec {
  std::vector<std::string> determiners{"the", "a"};
  std::vector<std::string> nouns{"movie", "film", "plot", "acting", "script"};
  std::vector<std::string> copulas{"was", "is", "seemed"};
  std::vector<std::string> intensifiers{"very", "really", "quite"};
  std::string conjunction = "and";
  std::string terminator = ".";
  double p_intensifier = 0.3;  // per adjective
  double p_conjunction = 0.3;  // chance of a second adjective

  // Checks that all terminal classes (including the lexicon's) are nonempty
  // and pairwise disjoint.
  void validate(const Lexicon& lex) const;
};

// Adjective-class sampling distribution.
struct PolarityMix {
  double p_pos = 0.45;
  double p_neg = 0.45;
  double p_neu = 0.10;

  void validate() const;

  static PolarityMix positive() { return {0.9, 0.0, 0.1}; }
  static PolarityMix negative() { return {0.0, 0.9, 0.1}; }
  static PolarityMix neutral() { return {0.45, 0.45, 0.1}; }
};

std::vector<Sentence> sample_corpus(const GrammarSpec& grammar, const Lexicon& lex,
                                    const PolarityMix& mix, std::size_t n, std::uint64_t seed);

// True iff the words derive from S. Total and deterministic.
bool validate_grammar(const GrammarSpec& grammar, const Lexicon& lex, std::span<const std::string> words);

enum class Polarity { Negative, Neutral, Positive };

// Majority vote of POS vs NEG lexicon tokens; ties and no hits are neutral.
Polarity classify_polarity(const Lexicon& lex, std::span<const std::string> words);

// Mean of 1 (positive), 0.5 (neutral), 0 (negative).
double sentiment_score(const Lexicon& lex, std::span<const Sentence> texts);

double grammar_rate(const GrammarSpec& grammar, const Lexicon& lex, std::span<const Sentence> texts);

// Unique n-grams over all texts divided by total n-gram slots. Every text
// must hold at least n tokens.
double distinct_ngrams(std::span<const Sentence> texts, std::size_t n);

class OutOfVocabulary : public std::invalid_argument {
 public:
  explicit OutOfVocabulary(const std::string& word);
  const std::string& word() const { return word_; }

 private:
  std::string word_;
};

// Word <-> id map. Ids 0..2 are <pad>, <bos>, <eos>.
class Vocabulary {
 public:
  Vocabulary();
  static Vocabulary from_language(const GrammarSpec& grammar, const Lexicon& lex);

  std::size_t size() const { return words_.size(); }
  int id(std::string_view word) const;  // throws OutOfVocabulary
  bool contains(std::string_view word) const;
  const std::string& word(int id) const;
  const std::vector<std::string>& words() const { return words_; }

  // BOS/EOS are added once each when requested; surface text must not
  // contain special tokens.
  TokenSeq encode(std::span<const std::string> words, bool add_bos = true, bool add_eos = true) const;
  // Special tokens are dropped.
  Sentence decode(std::span<const int> ids) const;

  std::string to_json() const;
  static Vocabulary from_json(const std::string& text);

 private:
  void add(const std::string& word);

  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

Sentence split_words(std::string_view text);
std::string join_words(std::span<const std::string> words);

// Surface text -> ids with BOS and EOS; ids -> surface text without specials.
TokenSeq tokenize(const Vocabulary& vocab, std::string_view text);
std::string detokenize(const Vocabulary& vocab, std::span<const int> ids);

// Grammar and lexicon as one JSON document.
std::string language_to_json(const GrammarSpec& grammar, const Lexicon& lex);
void language_from_json(const std::string& text, GrammarSpec& grammar, Lexicon& lex);

// Line-oriented corpus files: one sentence per line, whitespace separated.
void write_corpus(const std::filesystem::path& path, std::span<const Sentence> texts);
std::vector<Sentence> read_corpus(const std::filesystem::path& path);

// Grammar, lexicon and the vocabulary derived from them.
struct Language {
  GrammarSpec grammar;
  Lexicon lex;
  Vocabulary vocab;

  static Language defaults();
  static Language from_parts(GrammarSpec grammar, Lexicon lex);
};

// Fixed DET NOUN COP prompt set used by generation experiments.
std::vector<Sentence> default_prompts();

}  // namespace lmi
