#pragma once

// Batch generation from prompts and the text metrics used by experiments:
// positive score, grammar rate, reference perplexity and distinct 4-grams.

#include <cstdint>
#include <vector>

#include "lmi/corpus.hpp"
#include "lmi/tinylm.hpp"

namespace lmi {

struct Generation {
  std::size_t prompt_index = 0;
  TokenSeq tokens;  // BOS, prompt, continuation (EOS included when produced)
  std::size_t prompt_len = 0;  // number of leading prompt tokens, BOS included
  Sentence words;  // prompt and continuation words; EOS dropped, other specials kept
};

struct GenerationPlan {
  std::vector<TokenSeq> prompts;  // each starts with BOS
  int per_prompt = 25;
  GenConfig gen;  // gen.seed is ignored; see sample_seed
  std::uint64_t seed = 0;
};

// Seed of continuation k for prompt i. Independent of the model, so every
// sweep point sees the same random stream.
std::uint64_t sample_seed(std::uint64_t base, std::size_t prompt_index, int k);

// Final-position logits of a checkpoint. The checkpoint must outlive the
// returned function.
LogitsFn model_logits(const Checkpoint& ckpt);

std::vector<Generation> generate(const LogitsFn& logits_fn, int context_len, const GenerationPlan& plan,
                                 const Vocabulary& vocab);

struct TextMetrics {
  double positive_score = 0.0;
  double grammar_rate = 0.0;
  double perplexity = 0.0;  // NaN without a scorer
  double distinct4 = 0.0;   // over texts with at least four words; NaN if none
  std::size_t count = 0;
};

TextMetrics score_generations(const std::vector<Generation>& gens, const Language& lang,
                              const Checkpoint* scorer);

std::vector<TokenSeq> encode_prompts(const Vocabulary& vocab, const std::vector<Sentence>& prompts);

// BOS + words + EOS for every sentence.
std::vector<TokenSeq> encode_corpus(const Vocabulary& vocab, const std::vector<Sentence>& texts);

}  // namespace lmi
