#include "lmi/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "lmi/util.hpp"

namespace lmi {

using nlohmann::json;

namespace {

bool contains_word(const std::vector<std::string>& v, std::string_view w) {
  return std::find(v.begin(), v.end(), w) != v.end();
}

const std::string& pick(Rng& rng, const std::vector<std::string>& v) { return v[rng.index(v.size())]; }

}  // namespace

void Lexicon::validate() const {
  if (pos_words.empty() || neg_words.empty() || neu_words.empty()) {
    throw std::invalid_argument("lexicon word sets must be nonempty");
  }
  std::set<std::string> seen;
  for (const auto* set : {&pos_words, &neg_words, &neu_words}) {
    for (const auto& w : *set) {
      if (!seen.insert(w).second) throw std::invalid_argument("lexicon word sets overlap at \"" + w + "\"");
    }
  }
}

bool Lexicon::is_pos(std::string_view w) const { return contains_word(pos_words, w); }
bool Lexicon::is_neg(std::string_view w) const { return contains_word(neg_words, w); }
bool Lexicon::is_neu(std::string_view w) const { return contains_word(neu_words, w); }

void GrammarSpec::validate(const Lexicon& lex) const {
  lex.validate();
  const std::vector<std::string> single_conj{conjunction}, single_term{terminator};
  const std::vector<const std::vector<std::string>*> classes{
      &determiners, &nouns,          &copulas,       &intensifiers, &single_conj,
      &single_term, &lex.pos_words, &lex.neg_words, &lex.neu_words};
  std::set<std::string> seen;
  for (const auto* cls : classes) {
    if (cls->empty()) throw std::invalid_argument("grammar terminal class is empty");
    for (const auto& w : *cls) {
      if (w.empty() || w.find_first_of(" \t\n") != std::string::npos) {
        throw std::invalid_argument("invalid terminal \"" + w + "\"");
      }
      if (!seen.insert(w).second) {
        throw std::invalid_argument("terminal classes overlap at \"" + w + "\"");
      }
    }
  }
  if (p_intensifier < 0 || p_intensifier > 1 || p_conjunction < 0 || p_conjunction > 1) {
    throw std::invalid_argument("grammar probabilities must lie in [0, 1]");
  }
}

void PolarityMix::validate() const {
  if (p_pos < 0 || p_neg < 0 || p_neu < 0) throw std::invalid_argument("polarity mix must be nonnegative");
  if (std::abs(p_pos + p_neg + p_neu - 1.0) > 1e-9) {
    throw std::invalid_argument("polarity mix must sum to 1");
  }
}

std::vector<Sentence> sample_corpus(const GrammarSpec& grammar, const Lexicon& lex,
                                    const PolarityMix& mix, std::size_t n, std::uint64_t seed) {
  grammar.validate(lex);
  mix.validate();
  if (n == 0) throw std::invalid_argument("corpus size must be >= 1");
  Rng rng(seed);
  auto adjective = [&](Sentence& s) {
    if (rng.uniform() < grammar.p_intensifier) s.push_back(pick(rng, grammar.intensifiers));
    const double u = rng.uniform();
    if (u < mix.p_pos) {
      s.push_back(pick(rng, lex.pos_words));
    } else if (u < mix.p_pos + mix.p_neg) {
      s.push_back(pick(rng, lex.neg_words));
    } else {
      s.push_back(pick(rng, lex.neu_words));
    }
  };
  std::vector<Sentence> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Sentence s;
    s.push_back(pick(rng, grammar.determiners));
    s.push_back(pick(rng, grammar.nouns));
    s.push_back(pick(rng, grammar.copulas));
    adjective(s);
    if (rng.uniform() < grammar.p_conjunction) {
      s.push_back(grammar.conjunction);
      adjective(s);
    }
    s.push_back(grammar.terminator);
    out.push_back(std::move(s));
  }
  return out;
}

bool validate_grammar(const GrammarSpec& g, const Lexicon& lex, std::span<const std::string> w) {
  std::size_t i = 0;
  auto accept = [&](const std::vector<std::string>& cls) {
    if (i < w.size() && contains_word(cls, w[i])) {
      ++i;
      return true;
    }
    return false;
  };
  auto adjp_item = [&] {
    accept(g.intensifiers);
    if (i < w.size() && lex.is_adjective(w[i])) {
      ++i;
      return true;
    }
    return false;
  };
  if (!accept(g.determiners) || !accept(g.nouns) || !accept(g.copulas) || !adjp_item()) return false;
  if (i < w.size() && w[i] == g.conjunction) {
    ++i;
    if (!adjp_item()) return false;
  }
  if (i >= w.size() || w[i] != g.terminator) return false;
  return i + 1 == w.size();
}

Polarity classify_polarity(const Lexicon& lex, std::span<const std::string> words) {
  int pos = 0, neg = 0;
  for (const auto& w : words) {
    if (lex.is_pos(w)) ++pos;
    if (lex.is_neg(w)) ++neg;
  }
  if (pos > neg) return Polarity::Positive;
  if (neg > pos) return Polarity::Negative;
  return Polarity::Neutral;
}

double sentiment_score(const Lexicon& lex, std::span<const Sentence> texts) {
  if (texts.empty()) throw std::invalid_argument("sentiment_score of an empty text set");
  double total = 0.0;
  for (const auto& t : texts) {
    switch (classify_polarity(lex, t)) {
      case Polarity::Positive:
        total += 1.0;
        break;
      case Polarity::Neutral:
        total += 0.5;
        break;
      case Polarity::Negative:
        break;
    }
  }
  return total / static_cast<double>(texts.size());
}

double grammar_rate(const GrammarSpec& grammar, const Lexicon& lex, std::span<const Sentence> texts) {
  if (texts.empty()) throw std::invalid_argument("grammar_rate of an empty text set");
  std::size_t ok = 0;
  for (const auto& t : texts) ok += validate_grammar(grammar, lex, t) ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(texts.size());
}

double distinct_ngrams(std::span<const Sentence> texts, std::size_t n) {
  if (n == 0) throw std::invalid_argument("n-gram order must be >= 1");
  if (texts.empty()) throw std::invalid_argument("distinct_ngrams of an empty text set");
  std::set<std::vector<std::string>> unique;
  std::size_t slots = 0;
  for (const auto& t : texts) {
    if (t.size() < n) {
      throw std::invalid_argument("text of length " + std::to_string(t.size()) + " is shorter than n=" +
                                  std::to_string(n));
    }
    for (std::size_t i = 0; i + n <= t.size(); ++i) {
      unique.emplace(t.begin() + static_cast<std::ptrdiff_t>(i),
                     t.begin() + static_cast<std::ptrdiff_t>(i + n));
      ++slots;
    }
  }
  return static_cast<double>(unique.size()) / static_cast<double>(slots);
}

// ---------------------------------------------------------------------------
// Vocabulary

OutOfVocabulary::OutOfVocabulary(const std::string& word)
    : std::invalid_argument("out-of-vocabulary word \"" + word + "\""), word_(word) {}

Vocabulary::Vocabulary() {
  add("<pad>");
  add("<bos>");
  add("<eos>");
}

void Vocabulary::add(const std::string& word) {
  if (index_.contains(word)) throw std::invalid_argument("duplicate vocabulary word \"" + word + "\"");
  index_.emplace(word, static_cast<int>(words_.size()));
  words_.push_back(word);
}

Vocabulary Vocabulary::from_language(const GrammarSpec& g, const Lexicon& lex) {
  g.validate(lex);
  Vocabulary v;
  for (const auto* cls : {&g.determiners, &g.nouns, &g.copulas, &g.intensifiers}) {
    for (const auto& w : *cls) v.add(w);
  }
  v.add(g.conjunction);
  v.add(g.terminator);
  for (const auto* cls : {&lex.pos_words, &lex.neg_words, &lex.neu_words}) {
    for (const auto& w : *cls) v.add(w);
  }
  return v;
}

int Vocabulary::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) throw OutOfVocabulary(std::string(word));
  return it->second;
}

bool Vocabulary::contains(std::string_view word) const { return index_.contains(std::string(word)); }

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  }
  return words_[static_cast<std::size_t>(id)];
}

TokenSeq Vocabulary::encode(std::span<const std::string> words, bool add_bos, bool add_eos) const {
  TokenSeq ids;
  ids.reserve(words.size() + 2);
  if (add_bos) ids.push_back(kBosToken);
  for (const auto& w : words) {
    const int i = id(w);
    if (i < 3) throw std::invalid_argument("special token \"" + w + "\" in surface text");
    ids.push_back(i);
  }
  if (add_eos) ids.push_back(kEosToken);
  return ids;
}

Sentence Vocabulary::decode(std::span<const int> ids) const {
  Sentence out;
  for (int i : ids) {
    if (i == kPadToken || i == kBosToken || i == kEosToken) continue;
    out.push_back(word(i));
  }
  return out;
}

std::string Vocabulary::to_json() const { return json(words_).dump(); }

Vocabulary Vocabulary::from_json(const std::string& text) {
  const auto words = json::parse(text).get<std::vector<std::string>>();
  if (words.size() < 3 || words[0] != "<pad>" || words[1] != "<bos>" || words[2] != "<eos>") {
    throw std::invalid_argument("vocabulary must start with <pad>, <bos>, <eos>");
  }
  Vocabulary v;
  for (std::size_t i = 3; i < words.size(); ++i) v.add(words[i]);
  return v;
}

Sentence split_words(std::string_view text) {
  Sentence out;
  std::istringstream is{std::string(text)};
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

std::string join_words(std::span<const std::string> words) {
  std::string s;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) s += ' ';
    s += words[i];
  }
  return s;
}

TokenSeq tokenize(const Vocabulary& vocab, std::string_view text) {
  const auto words = split_words(text);
  return vocab.encode(words, true, true);
}

std::string detokenize(const Vocabulary& vocab, std::span<const int> ids) {
  return join_words(vocab.decode(ids));
}

// ---------------------------------------------------------------------------
// Serialization

std::string language_to_json(const GrammarSpec& g, const Lexicon& lex) {
  json j;
  j["grammar"] = {{"determiners", g.determiners},   {"nouns", g.nouns},
                  {"copulas", g.copulas},           {"intensifiers", g.intensifiers},
                  {"conjunction", g.conjunction},   {"terminator", g.terminator},
                  {"p_intensifier", g.p_intensifier}, {"p_conjunction", g.p_conjunction}};
  j["lexicon"] = {{"pos", lex.pos_words}, {"neg", lex.neg_words}, {"neu", lex.neu_words}};
  return j.dump(2);
}

void language_from_json(const std::string& text, GrammarSpec& g, Lexicon& lex) {
  const json j = json::parse(text);
  GrammarSpec gs;
  Lexicon lx;
  if (j.contains("grammar")) {
    const auto& jg = j["grammar"];
    gs.determiners = jg.value("determiners", gs.determiners);
    gs.nouns = jg.value("nouns", gs.nouns);
    gs.copulas = jg.value("copulas", gs.copulas);
    gs.intensifiers = jg.value("intensifiers", gs.intensifiers);
    gs.conjunction = jg.value("conjunction", gs.conjunction);
    gs.terminator = jg.value("terminator", gs.terminator);
    gs.p_intensifier = jg.value("p_intensifier", gs.p_intensifier);
    gs.p_conjunction = jg.value("p_conjunction", gs.p_conjunction);
  }
  if (j.contains("lexicon")) {
    const auto& jl = j["lexicon"];
    lx.pos_words = jl.value("pos", lx.pos_words);
    lx.neg_words = jl.value("neg", lx.neg_words);
    lx.neu_words = jl.value("neu", lx.neu_words);
  }
  gs.validate(lx);
  g = std::move(gs);
  lex = std::move(lx);
}

void write_corpus(const std::filesystem::path& path, std::span<const Sentence> texts) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (const auto& t : texts) out << join_words(t) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<Sentence> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus " + path.string());
  std::vector<Sentence> out;
  std::string line;
  while (std::getline(in, line)) {
    auto words = split_words(line);
    if (!words.empty()) out.push_back(std::move(words));
  }
  return out;
}

Language Language::defaults() { return from_parts(GrammarSpec{}, Lexicon{}); }

Language Language::from_parts(GrammarSpec grammar, Lexicon lex) {
  Vocabulary vocab = Vocabulary::from_language(grammar, lex);
  return Language{std::move(grammar), std::move(lex), std::move(vocab)};
}

std::vector<Sentence> default_prompts() {
  static const char* kPrompts[] = {
      "the movie was",   "a film is",     "the plot seemed", "the acting was",  "the script is",
      "a movie seemed",  "the film was",  "a plot is",       "the acting seemed", "a script was",
      "the movie is",    "a film seemed", "the plot was",    "a acting is",     "the script seemed",
  };
  std::vector<Sentence> out;
  for (const char* p : kPrompts) out.push_back(split_words(p));
  return out;
}

}  // namespace lmi
