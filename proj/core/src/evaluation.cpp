#include "lmi/evaluation.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "lmi/util.hpp"

namespace lmi {

std::uint64_t sample_seed(std::uint64_t base, std::size_t prompt_index, int k) {
  return derive_seed(base, "gen/p" + std::to_string(prompt_index) + "/k" + std::to_string(k));
}

LogitsFn model_logits(const Checkpoint& ckpt) {
  return [&ckpt](std::span<const int> ctx) {
    const auto logits = forward(ckpt, ctx);
    const auto row = logits.row(logits.rows - 1);
    return std::vector<double>(row.begin(), row.end());
  };
}

std::vector<Generation> generate(const LogitsFn& logits_fn, int context_len, const GenerationPlan& plan,
                                 const Vocabulary& vocab) {
  if (plan.prompts.empty()) throw std::invalid_argument("generation plan has no prompts");
  if (plan.per_prompt < 1) throw std::invalid_argument("per_prompt must be >= 1");
  std::vector<Generation> out;
  out.reserve(plan.prompts.size() * static_cast<std::size_t>(plan.per_prompt));
  for (std::size_t i = 0; i < plan.prompts.size(); ++i) {
    const TokenSeq& prompt = plan.prompts[i];
    for (int k = 0; k < plan.per_prompt; ++k) {
      GenConfig gc = plan.gen;
      gc.seed = sample_seed(plan.seed, i, k);
      const TokenSeq cont = sample_with(logits_fn, prompt, gc, context_len);
      Generation g;
      g.prompt_index = i;
      g.prompt_len = prompt.size();
      g.tokens = prompt;
      g.tokens.insert(g.tokens.end(), cont.begin(), cont.end());
      for (std::size_t t = 0; t < g.tokens.size(); ++t) {
        const int id = g.tokens[t];
        if (t == 0 && id == kBosToken) continue;
        if (id == kEosToken) break;
        g.words.push_back(vocab.word(id));
      }
      out.push_back(std::move(g));
    }
  }
  return out;
}

TextMetrics score_generations(const std::vector<Generation>& gens, const Language& lang,
                              const Checkpoint* scorer) {
  if (gens.empty()) throw std::invalid_argument("no generations to score");
  std::vector<Sentence> texts;
  std::vector<Sentence> long_texts;
  std::vector<TokenSeq> seqs;
  texts.reserve(gens.size());
  for (const auto& g : gens) {
    texts.push_back(g.words);
    if (g.words.size() >= 4) long_texts.push_back(g.words);
    if (g.tokens.size() >= 2) seqs.push_back(g.tokens);
  }
  TextMetrics m;
  m.count = gens.size();
  m.positive_score = sentiment_score(lang.lex, texts);
  m.grammar_rate = grammar_rate(lang.grammar, lang.lex, texts);
  m.distinct4 = long_texts.empty() ? std::numeric_limits<double>::quiet_NaN() : distinct_ngrams(long_texts, 4);
  m.perplexity = (scorer && !seqs.empty()) ? perplexity(*scorer, seqs) : std::numeric_limits<double>::quiet_NaN();
  return m;
}

std::vector<TokenSeq> encode_prompts(const Vocabulary& vocab, const std::vector<Sentence>& prompts) {
  std::vector<TokenSeq> out;
  out.reserve(prompts.size());
  for (const auto& p : prompts) out.push_back(vocab.encode(p, true, false));
  return out;
}

std::vector<TokenSeq> encode_corpus(const Vocabulary& vocab, const std::vector<Sentence>& texts) {
  std::vector<TokenSeq> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(vocab.encode(t, true, true));
  return out;
}

}  // namespace lmi
