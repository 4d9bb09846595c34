// lmi: train, merge, sample and evaluate tiny language models, and run the
// experiment pipelines.
//
// Exit codes: 0 success, 1 a threshold check failed, 2 usage or input error.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "lmi/corpus.hpp"
#include "lmi/evaluation.hpp"
#include "lmi/experiments.hpp"
#include "lmi/paramspace.hpp"
#include "lmi/tensorstore.hpp"
#include "lmi/tinylm.hpp"
#include "lmi/util.hpp"

namespace fs = std::filesystem;
using namespace lmi;

namespace {

constexpr int kOk = 0;
constexpr int kThreshold = 1;
constexpr int kUsage = 2;

// Input problems surfaced to the user with exit code 2.
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void require_file(const fs::path& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw InputError(what + " not found: " + path.string());
}

Language load_language(const std::string& path) {
  if (path.empty()) return Language::defaults();
  GrammarSpec g;
  Lexicon lex;
  language_from_json(read_text(path), g, lex);
  return Language::from_parts(std::move(g), std::move(lex));
}

Checkpoint load_checkpoint(const std::string& path) {
  require_file(path, "checkpoint");
  return read_checkpoint(path);
}

void save_checkpoint(const Checkpoint& c, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_checkpoint(c, path);
}

void print_json(const nlohmann::ordered_json& j, const std::string& out) {
  if (out.empty()) {
    std::cout << j.dump(2) << "\n";
    return;
  }
  std::ofstream f(out, std::ios::trunc);
  if (!f) throw InputError("cannot write " + out);
  f << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string corpus, out, config, init, train_config, language, provenance;
  std::optional<int> steps, batch_size, warmup;
  std::optional<double> lr;
  std::uint64_t seed = 0, init_seed = 0;
};

int cmd_train(const TrainArgs& a) {
  require_file(a.corpus, "corpus");
  const Language lang = load_language(a.language);
  const auto data = encode_corpus(lang.vocab, read_corpus(a.corpus));
  if (data.empty()) throw InputError("corpus is empty: " + a.corpus);

  Checkpoint init;
  if (!a.init.empty()) {
    init = load_checkpoint(a.init);
  } else {
    ModelConfig cfg;
    cfg.vocab_size = static_cast<int>(lang.vocab.size());
    if (!a.config.empty()) cfg = ModelConfig::from_json(read_text(a.config));
    init = init_model(cfg, a.init_seed);
  }

  TrainConfig tc;
  if (!a.train_config.empty()) tc = TrainConfig::from_json(read_text(a.train_config));
  if (a.steps) tc.steps = *a.steps;
  if (a.batch_size) tc.batch_size = *a.batch_size;
  if (a.warmup) tc.warmup_steps = *a.warmup;
  if (a.lr) tc.max_lr = *a.lr;
  tc.seed = a.seed;
  tc.validate();

  const fs::path out = a.out;
  fs::path log_path = out;
  log_path += ".log.jsonl";
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream log(log_path, std::ios::trunc);
  const int every = std::max(1, tc.steps / 10);
  Checkpoint trained = train(init, data, tc, [&](const TrainLogEntry& e) {
    log << "{\"step\":" << e.step << ",\"lr\":" << format_double(e.lr) << ",\"loss\":" << format_double(e.loss)
        << "}\n";
    if (e.step % every == 0 || e.step + 1 == tc.steps) {
      std::fprintf(stderr, "step %d loss %s\n", e.step, format_double(e.loss).c_str());
    }
  });
  trained.meta()["provenance"] =
      !a.provenance.empty() ? a.provenance : (a.init.empty() ? "pretrained" : "finetuned");
  save_checkpoint(trained, out);
  std::fprintf(stderr, "wrote %s\n", out.c_str());
  return kOk;
}

// ---------------------------------------------------------------------------

struct MergeArgs {
  std::string mode = "g1";
  std::optional<double> alpha, beta;
  std::vector<std::string> inputs;
  std::string out;
};

int cmd_merge(const MergeArgs& a) {
  const InterpMode mode = parse_mode(a.mode);
  const std::size_t want = mode == InterpMode::G1 ? 2 : 3;
  if (a.inputs.size() != want) {
    throw std::invalid_argument("mode " + a.mode + " takes " + std::to_string(want) + " checkpoints (" +
                                (want == 2 ? "THETA_MINUS THETA_PLUS" : "THETA0 THETA_MINUS THETA_PLUS") +
                                "), got " + std::to_string(a.inputs.size()));
  }
  if (!a.alpha) throw std::invalid_argument("--alpha is required");
  if (mode == InterpMode::G3 && !a.beta) throw std::invalid_argument("mode g3 requires --beta");
  if (mode != InterpMode::G3 && a.beta) throw std::invalid_argument("--beta is only valid with mode g3");

  std::vector<Checkpoint> ck;
  for (const auto& p : a.inputs) ck.push_back(load_checkpoint(p));
  InterpRequest req;
  req.mode = mode;
  req.alpha = *a.alpha;
  req.beta = a.beta;
  if (want == 2) {
    req.operands = {nullptr, &ck[0], &ck[1]};
  } else {
    req.operands = {&ck[0], &ck[1], &ck[2]};
  }
  save_checkpoint(interpolate(req), a.out);
  std::fprintf(stderr, "wrote %s\n", a.out.c_str());
  return kOk;
}

// ---------------------------------------------------------------------------

struct ExperimentArgs {
  std::vector<std::string> names;
  std::string manifest, out = "lmi_out";
  bool no_build = false, tiny = false;
};

int cmd_experiment(const ExperimentArgs& a) {
  Manifest m = a.tiny ? Manifest::tiny() : Manifest{};
  if (!a.manifest.empty()) {
    require_file(a.manifest, "manifest");
    m = read_manifest(a.manifest);
  }
  std::vector<std::string> names;
  for (const auto& n : a.names) {
    if (n == "all") {
      names.insert(names.end(), experiment_names().begin(), experiment_names().end());
    } else if (std::find(experiment_names().begin(), experiment_names().end(), n) == experiment_names().end()) {
      throw std::invalid_argument("unknown experiment \"" + n + "\"");
    } else {
      names.push_back(n);
    }
  }
  fs::create_directories(a.out);
  {
    std::ofstream f(fs::path(a.out) / "manifest.json", std::ios::trunc);
    f << m.to_json() << "\n";
  }
  Workspace ws(m, a.out, !a.no_build, [](const std::string& line) { std::fprintf(stderr, "%s\n", line.c_str()); });
  bool all_passed = true;
  for (const auto& n : names) {
    const ExperimentReport r = run_experiment(n, ws);
    std::printf("%s %s\n", r.passed() ? "PASS" : "FAIL", n.c_str());
    for (const auto& c : r.checks) {
      std::printf("  %-4s %-24s %s %s %s\n", c.passed ? "ok" : "FAIL", c.id.c_str(),
                  format_double(c.value).c_str(), c.relation.c_str(), format_double(c.threshold).c_str());
    }
    all_passed = all_passed && r.passed();
  }
  return all_passed ? kOk : kThreshold;
}

// ---------------------------------------------------------------------------

int cmd_diff(const std::string& a, const std::string& b, const std::string& out) {
  const DiffReport rep = diff_norms(load_checkpoint(a), load_checkpoint(b));
  if (out.empty()) {
    write_diff_csv(rep, std::cout);
  } else {
    std::ofstream f(out, std::ios::trunc);
    if (!f) throw InputError("cannot write " + out);
    write_diff_csv(rep, f);
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  std::string checkpoint, prompts_file, language;
  std::vector<std::string> prompts;
  double top_p = 0.9, temperature = 1.0;
  int max_new_tokens = 30, count = 1;
  std::uint64_t seed = 0;
};

int cmd_generate(const GenerateArgs& a) {
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const Language lang = load_language(a.language);
  std::vector<Sentence> prompts;
  for (const auto& p : a.prompts) prompts.push_back(split_words(p));
  if (!a.prompts_file.empty()) {
    require_file(a.prompts_file, "prompts file");
    for (auto& s : read_corpus(a.prompts_file)) prompts.push_back(std::move(s));
  }
  if (prompts.empty()) prompts = default_prompts();

  GenerationPlan plan;
  plan.prompts = encode_prompts(lang.vocab, prompts);
  plan.per_prompt = a.count;
  plan.gen.top_p = a.top_p;
  plan.gen.max_new_tokens = a.max_new_tokens;
  plan.gen.temperature = a.temperature;
  plan.gen.validate();
  plan.seed = a.seed;
  for (const auto& g : generate(model_logits(ckpt), config_of(ckpt).context_len, plan, lang.vocab)) {
    std::cout << join_words(g.words) << "\n";
  }
  return kOk;
}

// ---------------------------------------------------------------------------

int cmd_eval(const std::string& texts_path, const std::string& scorer_path, const std::string& language,
             const std::string& out) {
  require_file(texts_path, "text file");
  const Language lang = load_language(language);
  const auto texts = read_corpus(texts_path);
  if (texts.empty()) throw InputError("no texts in " + texts_path);

  nlohmann::ordered_json j;
  j["count"] = texts.size();
  j["sentiment_score"] = sentiment_score(lang.lex, texts);
  j["grammar_rate"] = grammar_rate(lang.grammar, lang.lex, texts);
  for (std::size_t n = 1; n <= 4; ++n) {
    std::vector<Sentence> long_enough;
    for (const auto& t : texts) {
      if (t.size() >= n) long_enough.push_back(t);
    }
    const std::string key = "distinct_" + std::to_string(n);
    if (long_enough.empty()) {
      j[key] = nullptr;
    } else {
      j[key] = distinct_ngrams(long_enough, n);
    }
  }
  if (!scorer_path.empty()) {
    const Checkpoint scorer = load_checkpoint(scorer_path);
    j["perplexity"] = perplexity(scorer, encode_corpus(lang.vocab, texts));
  }
  print_json(j, out);
  return kOk;
}

// ---------------------------------------------------------------------------

int cmd_corpus(const std::string& polarity, std::size_t sentences, std::uint64_t seed, const std::string& language,
               const std::string& out) {
  const Language lang = load_language(language);
  PolarityMix mix = polarity == "positive"   ? PolarityMix::positive()
                    : polarity == "negative" ? PolarityMix::negative()
                    : polarity == "neutral"  ? PolarityMix::neutral()
                                             : throw std::invalid_argument("unknown polarity " + polarity);
  const auto texts = sample_corpus(lang.grammar, lang.lex, mix, sentences, seed);
  const fs::path path = out;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_corpus(path, texts);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Interpolate, ensemble and probe tiny language models"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "lmi 0.1.0");

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a model (fresh or from --init) on a corpus file");
  train_cmd->add_option("--corpus", ta.corpus, "One sentence per line")->required();
  train_cmd->add_option("--out", ta.out, "Output checkpoint (.lmic)")->required();
  auto* cfg_opt = train_cmd->add_option("--config", ta.config, "Model config JSON for a fresh model");
  train_cmd->add_option("--init", ta.init, "Checkpoint to fine-tune")->excludes(cfg_opt);
  train_cmd->add_option("--train-config", ta.train_config, "Training config JSON");
  train_cmd->add_option("--steps", ta.steps);
  train_cmd->add_option("--batch-size", ta.batch_size);
  train_cmd->add_option("--lr", ta.lr, "Peak learning rate");
  train_cmd->add_option("--warmup", ta.warmup);
  train_cmd->add_option("--seed", ta.seed, "Batch sampling seed");
  train_cmd->add_option("--init-seed", ta.init_seed, "Initialization seed for a fresh model");
  train_cmd->add_option("--language", ta.language, "Language JSON (default built-in grammar)");
  train_cmd->add_option("--provenance", ta.provenance, "Override the provenance tag");

  MergeArgs ma;
  auto* merge_cmd = app.add_subcommand("merge", "Interpolate checkpoints (g1: 2 inputs, g2/g3: 3 inputs)");
  merge_cmd->add_option("--mode", ma.mode)->check(CLI::IsMember({"g1", "g2", "g3"}));
  merge_cmd->add_option("--alpha", ma.alpha)->required();
  merge_cmd->add_option("--beta", ma.beta);
  merge_cmd->add_option("--out", ma.out)->required();
  merge_cmd->add_option("inputs", ma.inputs, "g1: THETA_MINUS THETA_PLUS; g2/g3: THETA0 THETA_MINUS THETA_PLUS")
      ->required();

  ExperimentArgs ea;
  auto* exp_cmd = app.add_subcommand("experiment", "Run experiment pipelines (or 'all')");
  exp_cmd->add_option("names", ea.names)->required();
  exp_cmd->add_option("--manifest", ea.manifest, "Manifest JSON (default built-in recipe)");
  exp_cmd->add_flag("--tiny", ea.tiny, "Use the small smoke-test recipe");
  exp_cmd->add_option("--out", ea.out, "Output directory");
  exp_cmd->add_flag("--no-build", ea.no_build, "Fail instead of training missing artifacts");

  std::string diff_a, diff_b, diff_out;
  auto* diff_cmd = app.add_subcommand("diff", "Per-tensor scaled difference norms as CSV");
  diff_cmd->add_option("a", diff_a)->required();
  diff_cmd->add_option("b", diff_b)->required();
  diff_cmd->add_option("--out", diff_out);

  GenerateArgs ga;
  auto* gen_cmd = app.add_subcommand("generate", "Sample continuations with nucleus sampling");
  gen_cmd->add_option("checkpoint", ga.checkpoint)->required();
  gen_cmd->add_option("--prompt", ga.prompts, "Prompt text (repeatable)");
  gen_cmd->add_option("--prompts", ga.prompts_file, "File with one prompt per line");
  gen_cmd->add_option("--top-p", ga.top_p)->check(CLI::Range(0.0, 1.0));
  gen_cmd->add_option("--max-new-tokens", ga.max_new_tokens)->check(CLI::PositiveNumber);
  gen_cmd->add_option("--temperature", ga.temperature);
  gen_cmd->add_option("--count", ga.count, "Continuations per prompt")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--seed", ga.seed);
  gen_cmd->add_option("--language", ga.language);

  std::string eval_texts, eval_scorer, eval_language, eval_out;
  auto* eval_cmd = app.add_subcommand("eval", "Score a file of texts");
  eval_cmd->add_option("texts", eval_texts)->required();
  eval_cmd->add_option("--scorer", eval_scorer, "Checkpoint used for perplexity");
  eval_cmd->add_option("--language", eval_language);
  eval_cmd->add_option("--out", eval_out, "Write JSON here instead of stdout");

  std::string corpus_polarity = "neutral", corpus_language, corpus_out;
  std::size_t corpus_n = 1000;
  std::uint64_t corpus_seed = 0;
  auto* corpus_cmd = app.add_subcommand("corpus", "Sample a synthetic corpus");
  corpus_cmd->add_option("--polarity", corpus_polarity)->check(CLI::IsMember({"positive", "negative", "neutral"}));
  corpus_cmd->add_option("--sentences", corpus_n)->check(CLI::PositiveNumber);
  corpus_cmd->add_option("--seed", corpus_seed);
  corpus_cmd->add_option("--language", corpus_language);
  corpus_cmd->add_option("--out", corpus_out)->required();

  bool manifest_tiny = false;
  auto* manifest_cmd = app.add_subcommand("manifest", "Print the built-in experiment manifest");
  manifest_cmd->add_flag("--tiny", manifest_tiny);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*train_cmd) return cmd_train(ta);
    if (*merge_cmd) return cmd_merge(ma);
    if (*exp_cmd) return cmd_experiment(ea);
    if (*diff_cmd) return cmd_diff(diff_a, diff_b, diff_out);
    if (*gen_cmd) return cmd_generate(ga);
    if (*eval_cmd) return cmd_eval(eval_texts, eval_scorer, eval_language, eval_out);
    if (*corpus_cmd) return cmd_corpus(corpus_polarity, corpus_n, corpus_seed, corpus_language, corpus_out);
    if (*manifest_cmd) {
      std::cout << (manifest_tiny ? Manifest::tiny() : Manifest{}).to_json() << "\n";
      return kOk;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
