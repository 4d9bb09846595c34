#include <benchmark/benchmark.h>

#include <vector>

#include "lmi/corpus.hpp"
#include "lmi/evaluation.hpp"
#include "lmi/paramspace.hpp"
#include "lmi/tensorstore.hpp"
#include "lmi/tinylm.hpp"
#include "lmi/util.hpp"

using namespace lmi;

namespace {

ModelConfig desk_config() {
  ModelConfig c;
  c.vocab_size = static_cast<int>(Language::defaults().vocab.size());
  return c;
}

std::vector<TokenSeq> batch(std::size_t n) {
  const Language lang = Language::defaults();
  return encode_corpus(lang.vocab, sample_corpus(lang.grammar, lang.lex, PolarityMix::neutral(), n, 3));
}

void BM_Forward(benchmark::State& state) {
  const Checkpoint c = init_model(desk_config(), 1);
  const TokenSeq seq = batch(1)[0];
  for (auto _ : state) benchmark::DoNotOptimize(forward(c, seq));
}
BENCHMARK(BM_Forward);

void BM_LossAndGrad(benchmark::State& state) {
  const Checkpoint c = init_model(desk_config(), 1);
  const auto data = batch(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(loss_and_grad(c, data));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_LossAndGrad)->Arg(8)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_Sample(benchmark::State& state) {
  const Checkpoint c = init_model(desk_config(), 1);
  const Language lang = Language::defaults();
  const TokenSeq prompt = encode_prompts(lang.vocab, {split_words("the movie was")})[0];
  GenConfig g;
  std::uint64_t seed = 0;
  for (auto _ : state) {
    g.seed = ++seed;
    benchmark::DoNotOptimize(sample(c, prompt, g));
  }
}
BENCHMARK(BM_Sample)->Unit(benchmark::kMillisecond);

void BM_InterpG3(benchmark::State& state) {
  const auto cfg = desk_config();
  const Checkpoint a = init_model(cfg, 1), b = init_model(cfg, 2), c = init_model(cfg, 3);
  for (auto _ : state) benchmark::DoNotOptimize(interp_g3(a, b, c, 0.3, -0.7));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(a.parameter_count()));
}
BENCHMARK(BM_InterpG3);

void BM_Serialize(benchmark::State& state) {
  const Checkpoint c = init_model(desk_config(), 1);
  for (auto _ : state) benchmark::DoNotOptimize(serialize_checkpoint(c));
}
BENCHMARK(BM_Serialize);

void BM_Deserialize(benchmark::State& state) {
  const auto bytes = serialize_checkpoint(init_model(desk_config(), 1));
  for (auto _ : state) benchmark::DoNotOptimize(deserialize_checkpoint(bytes));
  state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(bytes.size()));
}
BENCHMARK(BM_Deserialize);

void BM_Sha256Digest(benchmark::State& state) {
  const Checkpoint c = init_model(desk_config(), 1);
  for (auto _ : state) benchmark::DoNotOptimize(tensor_digest(c));
}
BENCHMARK(BM_Sha256Digest);

}  // namespace

BENCHMARK_MAIN();
