#include "lmi/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "lmi/ensemble.hpp"
#include "lmi/evaluation.hpp"
#include "lmi/linearization.hpp"
#include "lmi/util.hpp"

namespace lmi {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Manifest

Manifest::Manifest() {
  reference_model.d_model = 128;
  reference_model.n_heads = 4;
  reference_model.d_ff = 512;
  affine_model.arch = Architecture::Affine;

  pretrain.steps = 1500;
  pretrain.max_lr = 1e-3;
  pretrain.warmup_steps = 100;

  finetune.steps = 1000;
  finetune.max_lr = 1e-5;
  finetune.warmup_steps = 100;

  reference.steps = 1500;
  reference.max_lr = 1e-3;
  reference.warmup_steps = 100;

  affine.steps = 300;
  affine.max_lr = 1e-2;
  affine.warmup_steps = 20;
}

Manifest Manifest::tiny() {
  Manifest m;
  m.name = "tiny";
  for (ModelConfig* mc : {&m.model, &m.reference_model}) {
    mc->d_model = 16;
    mc->n_heads = 2;
    mc->n_layers = 1;
    mc->d_ff = 32;
  }
  for (TrainConfig* tc : {&m.pretrain, &m.finetune, &m.reference, &m.affine}) {
    tc->steps = 20;
    tc->batch_size = 8;
    tc->warmup_steps = 2;
  }
  m.pretrain_sentences = 400;
  m.finetune_sentences = 200;
  m.reference_sentences = 400;
  m.test_sentences = 20;
  m.gen.max_new_tokens = 12;
  m.continuations = 1;
  m.grid_continuations = 1;
  m.grid_prompts = 2;
  m.ensemble_continuations = 1;
  m.grid_alpha = {-1.0, 1.0, 3};
  m.grid_beta = {-1.0, 1.0, 3};
  m.barrier_points = 3;
  m.decorrelated_points = 3;
  m.control_alphas = {0.0, 1.0, 2.0};
  m.ensemble_alphas = {0.0, 1.0};
  m.param_compare_alphas = {0.0, 1.0};
  m.linearization_scales = {0.5, 1.0};
  return m;
}

void Manifest::validate() const {
  for (const ModelConfig* mc : {&model, &reference_model, &affine_model}) {
    ModelConfig c = *mc;
    if (c.vocab_size <= 0) c.vocab_size = 32;
    c.validate();
  }
  for (const TrainConfig* tc : {&pretrain, &finetune, &reference, &affine}) tc->validate();
  gen.validate();
  if (pretrain_sentences == 0 || finetune_sentences == 0 || reference_sentences == 0 || test_sentences == 0) {
    throw std::invalid_argument("corpus sizes must be >= 1");
  }
  if (continuations < 1 || grid_continuations < 1 || ensemble_continuations < 1 || grid_prompts < 1) {
    throw std::invalid_argument("continuation and prompt counts must be >= 1");
  }
  if (barrier_points < 3 || barrier_points % 2 == 0 || decorrelated_points < 3 || decorrelated_points % 2 == 0) {
    throw std::invalid_argument("barrier and decorrelated grids need an odd point count >= 3");
  }
  if (control_alphas.empty() || ensemble_alphas.empty() || param_compare_alphas.empty() ||
      linearization_scales.empty()) {
    throw std::invalid_argument("alpha lists must be nonempty");
  }
  SweepSpec{InterpMode::G3, grid_alpha, grid_beta}.validate();
}

namespace {

json model_json(const ModelConfig& c) { return json::parse(c.to_json()); }
json train_json(const TrainConfig& c) { return json::parse(c.to_json()); }

json axis_json(const AxisRange& a) { return {{"min", a.min}, {"max", a.max}, {"points", a.points}}; }

AxisRange axis_from(const json& j, AxisRange fallback) {
  fallback.min = j.value("min", fallback.min);
  fallback.max = j.value("max", fallback.max);
  fallback.points = j.value("points", fallback.points);
  return fallback;
}

}  // namespace

std::string Manifest::to_json() const {
  ordered_json j;
  j["name"] = name;
  j["seed"] = seed;
  j["model"] = model_json(model);
  j["reference_model"] = model_json(reference_model);
  j["affine_model"] = model_json(affine_model);
  j["pretrain"] = train_json(pretrain);
  j["finetune"] = train_json(finetune);
  j["reference"] = train_json(reference);
  j["affine"] = train_json(affine);
  j["pretrain_sentences"] = pretrain_sentences;
  j["finetune_sentences"] = finetune_sentences;
  j["reference_sentences"] = reference_sentences;
  j["test_sentences"] = test_sentences;
  j["gen"] = {{"top_p", gen.top_p}, {"max_new_tokens", gen.max_new_tokens}, {"temperature", gen.temperature}};
  j["continuations"] = continuations;
  j["grid_continuations"] = grid_continuations;
  j["grid_prompts"] = grid_prompts;
  j["ensemble_continuations"] = ensemble_continuations;
  j["control_alphas"] = control_alphas;
  j["barrier_points"] = barrier_points;
  j["decorrelated_points"] = decorrelated_points;
  j["ensemble_alphas"] = ensemble_alphas;
  j["param_compare_alphas"] = param_compare_alphas;
  j["grid_alpha"] = axis_json(grid_alpha);
  j["grid_beta"] = axis_json(grid_beta);
  j["linearization_scales"] = linearization_scales;
  j["word_prob_prompt"] = word_prob_prompt;
  return j.dump(2);
}

Manifest Manifest::from_json(const std::string& text) try {
  const json j = json::parse(text);
  Manifest m;
  m.name = j.value("name", m.name);
  m.seed = j.value("seed", m.seed);
  if (j.contains("model")) m.model = ModelConfig::from_json(j["model"].dump());
  if (j.contains("reference_model")) m.reference_model = ModelConfig::from_json(j["reference_model"].dump());
  if (j.contains("affine_model")) m.affine_model = ModelConfig::from_json(j["affine_model"].dump());
  if (j.contains("pretrain")) m.pretrain = TrainConfig::from_json(j["pretrain"].dump());
  if (j.contains("finetune")) m.finetune = TrainConfig::from_json(j["finetune"].dump());
  if (j.contains("reference")) m.reference = TrainConfig::from_json(j["reference"].dump());
  if (j.contains("affine")) m.affine = TrainConfig::from_json(j["affine"].dump());
  m.pretrain_sentences = j.value("pretrain_sentences", m.pretrain_sentences);
  m.finetune_sentences = j.value("finetune_sentences", m.finetune_sentences);
  m.reference_sentences = j.value("reference_sentences", m.reference_sentences);
  m.test_sentences = j.value("test_sentences", m.test_sentences);
  if (j.contains("gen")) {
    const auto& g = j["gen"];
    m.gen.top_p = g.value("top_p", m.gen.top_p);
    m.gen.max_new_tokens = g.value("max_new_tokens", m.gen.max_new_tokens);
    m.gen.temperature = g.value("temperature", m.gen.temperature);
  }
  m.continuations = j.value("continuations", m.continuations);
  m.grid_continuations = j.value("grid_continuations", m.grid_continuations);
  m.grid_prompts = j.value("grid_prompts", m.grid_prompts);
  m.ensemble_continuations = j.value("ensemble_continuations", m.ensemble_continuations);
  m.control_alphas = j.value("control_alphas", m.control_alphas);
  m.barrier_points = j.value("barrier_points", m.barrier_points);
  m.decorrelated_points = j.value("decorrelated_points", m.decorrelated_points);
  m.ensemble_alphas = j.value("ensemble_alphas", m.ensemble_alphas);
  m.param_compare_alphas = j.value("param_compare_alphas", m.param_compare_alphas);
  if (j.contains("grid_alpha")) m.grid_alpha = axis_from(j["grid_alpha"], m.grid_alpha);
  if (j.contains("grid_beta")) m.grid_beta = axis_from(j["grid_beta"], m.grid_beta);
  m.linearization_scales = j.value("linearization_scales", m.linearization_scales);
  m.word_prob_prompt = j.value("word_prob_prompt", m.word_prob_prompt);
  m.validate();
  return m;
} catch (const json::exception& e) {
  throw std::invalid_argument(std::string("bad manifest: ") + e.what());
}

std::string Manifest::digest() const { return sha256_hex(to_json()); }

Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return Manifest::from_json(ss.str());
}

MissingArtifact::MissingArtifact(const std::string& artifact, const std::string& command)
    : std::runtime_error("missing artifact \"" + artifact + "\"; produce it with: " + command) {}

// ---------------------------------------------------------------------------
// Workspace

Workspace::Workspace(Manifest manifest, fs::path out_dir, bool build_missing, LogFn log)
    : manifest_(std::move(manifest)),
      out_dir_(std::move(out_dir)),
      build_missing_(build_missing),
      log_(std::move(log)),
      language_(Language::defaults()) {
  const int vocab = static_cast<int>(language_.vocab.size());
  manifest_.model.vocab_size = vocab;
  manifest_.reference_model.vocab_size = vocab;
  manifest_.affine_model.vocab_size = vocab;
  manifest_.validate();
  prompts_ = encode_prompts(language_.vocab, default_prompts());
  digest_ = manifest_.digest();
  fs::create_directories(out_dir_ / "artifacts");
}

void Workspace::log(const std::string& line) const {
  if (log_) log_(line);
}

const std::vector<TokenSeq>& Workspace::corpus(const std::string& name) {
  if (auto it = corpora_.find(name); it != corpora_.end()) return it->second;
  PolarityMix mix;
  std::size_t n = 0;
  if (name == "neutral") {
    mix = PolarityMix::neutral();
    n = manifest_.pretrain_sentences;
  } else if (name == "positive") {
    mix = PolarityMix::positive();
    n = manifest_.finetune_sentences;
  } else if (name == "negative") {
    mix = PolarityMix::negative();
    n = manifest_.finetune_sentences;
  } else if (name == "reference") {
    mix = PolarityMix::neutral();
    n = manifest_.reference_sentences;
  } else if (name == "test_pos") {
    mix = PolarityMix::positive();
    n = manifest_.test_sentences;
  } else if (name == "test_neg") {
    mix = PolarityMix::negative();
    n = manifest_.test_sentences;
  } else {
    throw std::invalid_argument("unknown corpus " + name);
  }
  const auto texts =
      sample_corpus(language_.grammar, language_.lex, mix, n, derive_seed(manifest_.seed, "corpus/" + name));
  return corpora_.emplace(name, encode_corpus(language_.vocab, texts)).first->second;
}

const std::vector<TokenSeq>& Workspace::test_pos() { return corpus("test_pos"); }
const std::vector<TokenSeq>& Workspace::test_neg() { return corpus("test_neg"); }

const Checkpoint& Workspace::theta0() { return artifact("theta0"); }
const Checkpoint& Workspace::theta_plus() { return artifact("theta_plus"); }
const Checkpoint& Workspace::theta_minus() { return artifact("theta_minus"); }
const Checkpoint& Workspace::reference() { return artifact("reference"); }
const Checkpoint& Workspace::decorrelated() { return artifact("decorrelated"); }
const Checkpoint& Workspace::affine0() { return artifact("affine0"); }
const Checkpoint& Workspace::affine_plus() { return artifact("affine_plus"); }
const Checkpoint& Workspace::affine_minus() { return artifact("affine_minus"); }

const std::vector<std::string>& Workspace::artifact_names() {
  static const std::vector<std::string> names{"theta0",       "theta_plus", "theta_minus",
                                              "reference",    "decorrelated_base", "decorrelated",
                                              "affine0",      "affine_plus", "affine_minus"};
  return names;
}

void Workspace::prepare() {
  for (const auto& name : artifact_names()) artifact(name);
}

const Checkpoint& Workspace::artifact(const std::string& name) {
  if (auto it = artifacts_.find(name); it != artifacts_.end()) return it->second;
  const fs::path path = out_dir_ / "artifacts" / (name + ".lmic");
  if (fs::exists(path)) {
    Checkpoint ckpt = read_checkpoint(path);
    if (ckpt.meta_or("manifest_digest") == digest_) {
      log("loaded " + path.string());
      return artifacts_.emplace(name, std::move(ckpt)).first->second;
    }
    log("stale " + path.string() + " (manifest changed)");
  }
  if (!build_missing_) throw MissingArtifact(name, "lmi experiment prepare --out " + out_dir_.string());
  Checkpoint ckpt = build(name);
  ckpt.meta()["artifact"] = name;
  ckpt.meta()["manifest_digest"] = digest_;
  write_checkpoint(ckpt, path);
  log("wrote " + path.string());
  return artifacts_.emplace(name, std::move(ckpt)).first->second;
}

Checkpoint Workspace::train_logged(const std::string& name, const Checkpoint& init,
                                   const std::vector<TokenSeq>& data, const TrainConfig& cfg) {
  std::ofstream jsonl(out_dir_ / "artifacts" / (name + ".log.jsonl"), std::ios::trunc);
  log("training " + name + " (" + std::to_string(cfg.steps) + " steps)");
  const int every = std::max(1, cfg.steps / 10);
  return train(init, data, cfg, [&](const TrainLogEntry& e) {
    jsonl << "{\"step\":" << e.step << ",\"lr\":" << format_double(e.lr) << ",\"loss\":" << format_double(e.loss)
          << "}\n";
    if (e.step % every == 0 || e.step + 1 == cfg.steps) {
      log("  " + name + " step " + std::to_string(e.step) + " loss " + format_double(e.loss));
    }
  });
}

Checkpoint Workspace::build(const std::string& name) {
  const Manifest& m = manifest_;
  auto recipe = [&](TrainConfig cfg, const std::string& stream) {
    cfg.seed = derive_seed(m.seed, "train/" + stream);
    return cfg;
  };
  auto stamp = [](Checkpoint ckpt, const std::string& provenance) {
    ckpt.meta()["provenance"] = provenance;
    return ckpt;
  };
  if (name == "theta0") {
    const Checkpoint init = init_model(m.model, derive_seed(m.seed, "init/theta0"));
    return stamp(train_logged(name, init, corpus("neutral"), recipe(m.pretrain, "pretrain")), "pretrained");
  }
  if (name == "theta_plus") {
    return stamp(train_logged(name, theta0(), corpus("positive"), recipe(m.finetune, "pos")), "finetuned");
  }
  if (name == "theta_minus") {
    return stamp(train_logged(name, theta0(), corpus("negative"), recipe(m.finetune, "neg")), "finetuned");
  }
  if (name == "reference") {
    const Checkpoint init = init_model(m.reference_model, derive_seed(m.seed, "init/reference"));
    return stamp(train_logged(name, init, corpus("reference"), recipe(m.reference, "reference")), "reference");
  }
  if (name == "decorrelated_base") {
    // Same data and batch order as theta0; only the initialization differs.
    const Checkpoint init = init_model(m.model, derive_seed(m.seed, "init/decorrelated"));
    return stamp(train_logged(name, init, corpus("neutral"), recipe(m.pretrain, "pretrain")), "pretrained");
  }
  if (name == "decorrelated") {
    return stamp(train_logged(name, artifact("decorrelated_base"), corpus("positive"), recipe(m.finetune, "pos")),
                 "finetuned");
  }
  if (name == "affine0") {
    const Checkpoint init = init_model(m.affine_model, derive_seed(m.seed, "init/affine"));
    return stamp(train_logged(name, init, corpus("neutral"), recipe(m.affine, "affine/pretrain")), "pretrained");
  }
  if (name == "affine_plus") {
    return stamp(train_logged(name, affine0(), corpus("positive"), recipe(m.affine, "affine/pos")), "finetuned");
  }
  if (name == "affine_minus") {
    return stamp(train_logged(name, affine0(), corpus("negative"), recipe(m.affine, "affine/neg")), "finetuned");
  }
  throw std::invalid_argument("unknown artifact " + name);
}

// ---------------------------------------------------------------------------
// Reports

Check make_check(std::string id, std::string description, double value, std::string relation, double threshold) {
  bool ok = false;
  if (relation == ">=") {
    ok = value >= threshold;
  } else if (relation == "<=") {
    ok = value <= threshold;
  } else if (relation == ">") {
    ok = value > threshold;
  } else if (relation == "<") {
    ok = value < threshold;
  } else {
    throw std::invalid_argument("unknown relation " + relation);
  }
  return Check{std::move(id), std::move(description), value, std::move(relation), threshold, ok};
}

bool ExperimentReport::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
}

const Check* ExperimentReport::find(const std::string& id) const {
  for (const auto& c : checks) {
    if (c.id == id) return &c;
  }
  return nullptr;
}

std::string ExperimentReport::summary_json(const std::string& manifest_digest) const {
  ordered_json j;
  j["experiment"] = name;
  j["manifest_digest"] = manifest_digest;
  j["passed"] = passed();
  j["checks"] = json::array();
  for (const auto& c : checks) {
    ordered_json cj;
    cj["id"] = c.id;
    cj["description"] = c.description;
    cj["value"] = format_double(c.value);
    cj["relation"] = c.relation;
    cj["threshold"] = format_double(c.threshold);
    cj["passed"] = c.passed;
    j["checks"].push_back(cj);
  }
  j["files"] = files;
  return j.dump(2) + "\n";
}

namespace {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  void add(std::vector<std::string> row) { rows.push_back(std::move(row)); }

  void write(const fs::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
      out << '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
  }
};

std::string num(double x) { return format_double(x); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::vector<double> unit_grid(int points) {
  return AxisRange{0.0, 1.0, points}.values();
}

class Runner {
 public:
  Runner(const std::string& name, Workspace& ws) : ws_(ws), dir_(ws.out_dir() / name) {
    report_.name = name;
    fs::create_directories(dir_);
  }

  Workspace& ws() { return ws_; }
  ExperimentReport& report() { return report_; }

  GenerationPlan plan(const std::string& stream, int per_prompt, std::size_t max_prompts = 0) const {
    GenerationPlan p;
    p.prompts = ws_.prompts();
    if (max_prompts > 0 && max_prompts < p.prompts.size()) p.prompts.resize(max_prompts);
    p.per_prompt = per_prompt;
    p.gen = ws_.manifest().gen;
    p.seed = derive_seed(ws_.manifest().seed, "gen/" + stream);
    return p;
  }

  TextMetrics text_metrics(const Checkpoint& ckpt, const GenerationPlan& p) {
    const auto gens = generate(model_logits(ckpt), config_of(ckpt).context_len, p, ws_.language().vocab);
    return score_generations(gens, ws_.language(), &ws_.reference());
  }

  void save(const std::string& file, const Table& table) {
    table.write(dir_ / file);
    report_.files.push_back(file);
  }

  void save(const std::string& file, const std::string& text) {
    write_text(dir_ / file, text);
    report_.files.push_back(file);
  }

  void check(std::string id, std::string description, double value, std::string relation, double threshold) {
    report_.checks.push_back(
        make_check(std::move(id), std::move(description), value, std::move(relation), threshold));
  }

  ExperimentReport finish() {
    write_text(dir_ / "summary.json", report_.summary_json(ws_.manifest().digest()));
    return report_;
  }

 private:
  Workspace& ws_;
  fs::path dir_;
  ExperimentReport report_;
};

const std::vector<std::string> kMetricHeader{"alpha", "positive_score", "perplexity", "grammar_rate", "distinct4"};

std::vector<std::string> metric_row(double alpha, const TextMetrics& m) {
  return {num(alpha), num(m.positive_score), num(m.perplexity), num(m.grammar_rate), num(m.distinct4)};
}

// --- barrier: attribute control along g1 and the perplexity barrier ----------

ExperimentReport run_barrier(Workspace& ws) {
  Runner r("barrier", ws);
  const Manifest& m = ws.manifest();
  const auto plan = r.plan("barrier", m.continuations);
  std::map<double, TextMetrics> cache;
  auto metrics_at = [&](double alpha) -> const TextMetrics& {
    if (auto it = cache.find(alpha); it != cache.end()) return it->second;
    ws.log("barrier alpha=" + num(alpha));
    const Checkpoint ckpt = interp_g1(ws.theta_minus(), ws.theta_plus(), alpha);
    return cache.emplace(alpha, r.text_metrics(ckpt, plan)).first->second;
  };

  Table control{kMetricHeader, {}};
  std::vector<double> alphas, scores;
  for (double a : m.control_alphas) {
    const auto& mt = metrics_at(a);
    control.add(metric_row(a, mt));
    alphas.push_back(a);
    scores.push_back(mt.positive_score);
  }
  r.save("control.csv", control);
  r.check("control.spearman", "Spearman rank correlation of alpha and positive score", spearman(alphas, scores),
          ">=", 0.9);
  if (cache.contains(1.0) && cache.contains(2.0)) {
    r.check("control.extrapolation", "positive score at alpha=2 minus score at alpha=1",
            cache.at(2.0).positive_score - cache.at(1.0).positive_score, ">", 0.0);
  }

  Table barrier{kMetricHeader, {}};
  const auto grid = unit_grid(m.barrier_points);
  std::vector<TextMetrics> rows;
  for (double a : grid) {
    rows.push_back(metrics_at(a));
    barrier.add(metric_row(a, rows.back()));
  }
  r.save("barrier.csv", barrier);
  const double end_ppl = std::max(rows.front().perplexity, rows.back().perplexity);
  const double end_gram = std::min(rows.front().grammar_rate, rows.back().grammar_rate);
  double worst_ppl = 0.0, worst_gram = 1.0;
  for (std::size_t i = 1; i + 1 < rows.size(); ++i) {
    worst_ppl = std::max(worst_ppl, rows[i].perplexity);
    worst_gram = std::min(worst_gram, rows[i].grammar_rate);
  }
  r.check("barrier.perplexity", "max interior perplexity / max endpoint perplexity", worst_ppl / end_ppl, "<=",
          1.2);
  r.check("barrier.grammar", "min interior grammar rate / min endpoint grammar rate",
          end_gram > 0 ? worst_gram / end_gram : 0.0, ">=", 0.9);
  return r.finish();
}

// --- word-prob: next-token lexicon mass along g1 -------------------------------

ExperimentReport run_word_prob(Workspace& ws) {
  Runner r("word-prob", ws);
  const Manifest& m = ws.manifest();
  const Language& lang = ws.language();
  const TokenSeq prompt = lang.vocab.encode(split_words(m.word_prob_prompt), true, false);
  const auto grid = unit_grid(m.barrier_points);
  Table words{{"alpha", "word", "polarity", "probability"}, {}};
  Table mass{{"alpha", "pos_mass", "neg_mass"}, {}};
  std::vector<double> pos, neg;
  for (double a : grid) {
    const Checkpoint ckpt = interp_g1(ws.theta_minus(), ws.theta_plus(), a);
    const auto p = next_token_distribution(ckpt, prompt);
    double pm = 0.0, nm = 0.0;
    for (const auto& w : lang.lex.pos_words) {
      const double q = p[static_cast<std::size_t>(lang.vocab.id(w))];
      pm += q;
      words.add({num(a), w, "pos", num(q)});
    }
    for (const auto& w : lang.lex.neg_words) {
      const double q = p[static_cast<std::size_t>(lang.vocab.id(w))];
      nm += q;
      words.add({num(a), w, "neg", num(q)});
    }
    mass.add({num(a), num(pm), num(nm)});
    pos.push_back(pm);
    neg.push_back(nm);
  }
  r.save("word_prob.csv", words);
  r.save("mass.csv", mass);
  r.check("pos_mass.spearman", "Spearman correlation of alpha and positive-word mass", spearman(grid, pos), ">=",
          0.95);
  r.check("neg_mass.spearman", "Spearman correlation of alpha and negative-word mass", spearman(grid, neg), "<=",
          -0.95);
  return r.finish();
}

// --- param-compare: g1 versus g2 ----------------------------------------------

ExperimentReport run_param_compare(Workspace& ws) {
  Runner r("param-compare", ws);
  const Manifest& m = ws.manifest();
  const auto plan = r.plan("param-compare", m.continuations);
  Table t{{"alpha", "param", "positive_score", "perplexity", "grammar_rate"}, {}};
  for (const char* mode : {"g1", "g2"}) {
    for (double a : m.param_compare_alphas) {
      ws.log(std::string("param-compare ") + mode + " alpha=" + num(a));
      const Checkpoint ckpt = std::string(mode) == "g1"
                                  ? interp_g1(ws.theta_minus(), ws.theta_plus(), a)
                                  : interp_g2(ws.theta0(), ws.theta_minus(), ws.theta_plus(), a);
      const auto mt = r.text_metrics(ckpt, plan);
      t.add({num(a), mode, num(mt.positive_score), num(mt.perplexity), num(mt.grammar_rate)});
    }
  }
  r.save("param_compare.csv", t);
  return r.finish();
}

// --- grid / nll-landscape: g3 over the (alpha, beta) plane -------------------

void check_anchors(Runner& r, const std::map<std::pair<double, double>, MetricsRecord>& anchors) {
  const auto& o = anchors.at({0.0, 0.0});
  const auto& p = anchors.at({1.0, 0.0});
  const auto& n = anchors.at({0.0, 1.0});
  r.check("anchors.nll_pos", "positive-test NLL at (1,0) minus min over (0,0),(0,1)",
          p.nll_pos - std::min(o.nll_pos, n.nll_pos), "<", 0.0);
  r.check("anchors.nll_neg", "negative-test NLL at (0,1) minus min over (0,0),(1,0)",
          n.nll_neg - std::min(o.nll_neg, p.nll_neg), "<", 0.0);
}

ExperimentReport run_plane(Workspace& ws, const std::string& name, bool with_text) {
  Runner r(name, ws);
  const Manifest& m = ws.manifest();
  const auto plan = r.plan(name, m.grid_continuations, static_cast<std::size_t>(m.grid_prompts));
  const auto& tp = ws.test_pos();
  const auto& tn = ws.test_neg();
  std::size_t done = 0;
  const SweepSpec spec{InterpMode::G3, m.grid_alpha, m.grid_beta};
  const Evaluator eval = [&](const Checkpoint& ckpt) {
    MetricsRecord rec;
    rec.nll_pos = loss_nll(ckpt, tp);
    rec.nll_neg = loss_nll(ckpt, tn);
    if (with_text) {
      const auto mt = r.text_metrics(ckpt, plan);
      rec.perplexity = mt.perplexity;
      rec.positive_score = mt.positive_score;
      rec.grammar_rate = mt.grammar_rate;
    }
    if (++done % 21 == 0) ws.log(name + " " + std::to_string(done) + "/" + std::to_string(spec.size()));
    return rec;
  };
  InterpRequest req;
  req.mode = InterpMode::G3;
  req.beta = 0.0;
  req.operands = {&ws.theta0(), &ws.theta_minus(), &ws.theta_plus()};

  const SweepResult result = sweep(spec, req, eval);
  std::ostringstream csv;
  write_sweep_csv(result, csv);
  r.save(with_text ? "grid.csv" : "nll.csv", csv.str());

  std::map<std::pair<double, double>, MetricsRecord> anchors;
  Table at{{"alpha", "beta", "nll_pos", "nll_neg"}, {}};
  for (auto [a, b] : {std::pair{0.0, 0.0}, std::pair{1.0, 0.0}, std::pair{0.0, 1.0}}) {
    const Checkpoint ckpt = interp_g3(ws.theta0(), ws.theta_minus(), ws.theta_plus(), a, b);
    MetricsRecord rec;
    rec.nll_pos = loss_nll(ckpt, tp);
    rec.nll_neg = loss_nll(ckpt, tn);
    at.add({num(a), num(b), num(rec.nll_pos), num(rec.nll_neg)});
    anchors[{a, b}] = rec;
  }
  r.save("anchors.csv", at);

  std::size_t errors = 0;
  for (const auto& pt : result) errors += pt.metrics.error.empty() ? 0 : 1;
  r.check("grid.points", "evaluated grid points", static_cast<double>(result.size()), ">=",
          static_cast<double>(spec.size()));
  r.check("grid.errors", "grid points whose evaluation failed", static_cast<double>(errors), "<=", 0.0);
  check_anchors(r, anchors);
  return r.finish();
}

// --- diff-heatmap: scaled per-tensor weight differences ----------------------

ExperimentReport run_diff_heatmap(Workspace& ws) {
  Runner r("diff-heatmap", ws);
  const DiffReport plus = diff_norms(ws.theta0(), ws.theta_plus());
  const DiffReport minus = diff_norms(ws.theta0(), ws.theta_minus());
  const DiffReport dec = diff_norms(ws.theta0(), ws.decorrelated());
  for (const auto& [file, rep] : {std::pair{"diff_plus.csv", &plus}, std::pair{"diff_minus.csv", &minus},
                                  std::pair{"diff_decorrelated.csv", &dec}}) {
    std::ostringstream csv;
    write_diff_csv(*rep, csv);
    r.save(file, csv.str());
  }
  std::size_t smaller = 0;
  for (const auto& e : plus.entries) {
    const DiffEntry* d = dec.find(e.name);
    if (d && e.delta < d->delta) ++smaller;
  }
  r.check("diff.ordering", "fraction of tensors with delta(theta0,theta_plus) < delta(theta0,decorrelated)",
          static_cast<double>(smaller) / static_cast<double>(plus.entries.size()), ">=", 0.9);
  return r.finish();
}

// --- decorrelated: g1 between theta_plus and an independently initialized model

ExperimentReport run_decorrelated(Workspace& ws) {
  Runner r("decorrelated", ws);
  const Manifest& m = ws.manifest();
  const auto plan = r.plan("decorrelated", m.continuations);
  const auto grid = unit_grid(m.decorrelated_points);
  Table t{kMetricHeader, {}};
  std::vector<TextMetrics> rows;
  for (double a : grid) {
    ws.log("decorrelated alpha=" + num(a));
    const Checkpoint ckpt = interp_g1(ws.theta_plus(), ws.decorrelated(), a);
    rows.push_back(r.text_metrics(ckpt, plan));
    t.add(metric_row(a, rows.back()));
  }
  r.save("decorrelated.csv", t);
  const TextMetrics& lo = rows.front();
  const TextMetrics& hi = rows.back();
  const TextMetrics& mid = rows[rows.size() / 2];
  r.check("midpoint.perplexity", "midpoint perplexity / max endpoint perplexity",
          mid.perplexity / std::max(lo.perplexity, hi.perplexity), ">=", 2.0);
  const double end_gram = std::min(lo.grammar_rate, hi.grammar_rate);
  r.check("midpoint.grammar", "midpoint grammar rate / min endpoint grammar rate",
          end_gram > 0 ? mid.grammar_rate / end_gram : 1.0, "<=", 0.5);
  r.check("midpoint.distinct4", "midpoint distinct-4 fraction minus min endpoint fraction",
          mid.distinct4 - std::min(lo.distinct4, hi.distinct4), "<", 0.0);
  return r.finish();
}

// --- ensemble-compare: g2 weights versus logit combination -------------------

ExperimentReport run_ensemble_compare(Workspace& ws) {
  Runner r("ensemble-compare", ws);
  const Manifest& m = ws.manifest();

  Table affine{{"alpha", "logit_dev"}, {}};
  double worst = 0.0;
  for (double a : m.ensemble_alphas) {
    const double dev = weight_output_deviation(ws.affine0(), ws.affine_minus(), ws.affine_plus(), a, ws.prompts());
    affine.add({num(a), num(dev)});
    worst = std::max(worst, dev);
  }
  r.save("affine.csv", affine);
  r.check("affine.logit_dev", "max teacher-forced logit deviation for the affine model", worst, "<=", 1e-5);

  const auto plan = r.plan("ensemble-compare", m.ensemble_continuations);
  CompareInputs in{&ws.theta0(), &ws.theta_minus(), &ws.theta_plus(), &ws.reference(), &ws.language()};
  ws.log("ensemble-compare: sampling both arms");
  const auto rows = compare_weight_vs_output(in, m.ensemble_alphas, plan);
  std::ostringstream csv;
  write_comparison_csv(rows, csv);
  r.save("ensemble.csv", csv.str());
  double gap = 0.0;
  for (std::size_t i = 0; i + 1 < rows.size(); i += 2) {
    if (rows[i].alpha < 0.0 || rows[i].alpha > 1.0) continue;
    gap = std::max(gap, std::abs(rows[i].metrics.positive_score - rows[i + 1].metrics.positive_score));
  }
  r.check("transformer.score_gap", "max |score(g2) - score(logit combination)| over alpha in [0,1]", gap, "<=",
          0.1);
  return r.finish();
}

// --- linearization: directional constants and linearization error -----------

ExperimentReport run_linearization(Workspace& ws) {
  Runner r("linearization", ws);
  const Manifest& m = ws.manifest();
  const auto ids = PolarityIds::from(ws.language().lex, ws.language().vocab);
  const DirectionalReport rep =
      directional_constants(ws.theta0(), ws.theta_plus(), ws.theta_minus(), ws.prompts(), ids);
  r.save("directional.json", rep.to_json() + "\n");

  Table t{{"direction", "scale", "error"}, {}};
  std::map<std::string, std::map<double, double>> err;
  for (const auto& [dir, target] : {std::pair{"plus", &ws.theta_plus()}, std::pair{"minus", &ws.theta_minus()},
                                    std::pair{"decorrelated", &ws.decorrelated()}}) {
    for (double s : m.linearization_scales) {
      const Checkpoint theta = interp_g2(ws.theta0(), ws.theta0(), *target, s);
      const double e = linearization_error(ws.theta0(), theta, ws.prompts());
      err[dir][s] = e;
      t.add({dir, num(s), num(e)});
    }
  }
  r.save("linearization.csv", t);

  r.check("c_plus", "C+ = <grad f(theta0), theta_plus - theta0>", rep.c_plus, ">", 0.0);
  r.check("c_minus", "C- = <grad f(theta0), theta_minus - theta0>", rep.c_minus, "<", 0.0);
  r.check("f.plus_above_base", "f(theta_plus) - f(theta0)", rep.f_plus - rep.f_theta0, ">", 0.0);
  r.check("f.base_above_minus", "f(theta0) - f(theta_minus)", rep.f_theta0 - rep.f_minus, ">", 0.0);
  if (err["plus"].contains(0.5) && err["plus"].contains(1.0)) {
    r.check("locality.plus", "error at half minus error at full theta_plus displacement",
            err["plus"][0.5] - err["plus"][1.0], "<=", 0.0);
    r.check("locality.minus", "error at half minus error at full theta_minus displacement",
            err["minus"][0.5] - err["minus"][1.0], "<=", 0.0);
  }
  if (err["plus"].contains(1.0)) {
    const double ft = std::max(err["plus"][1.0], err["minus"][1.0]);
    r.check("decorrelated.ratio", "decorrelated-direction error / fine-tune-direction error",
            ft > 0 ? err["decorrelated"][1.0] / ft : std::numeric_limits<double>::infinity(), ">=", 10.0);
  }
  return r.finish();
}

ExperimentReport run_prepare(Workspace& ws) {
  Runner r("prepare", ws);
  ws.prepare();
  ordered_json j;
  for (const auto& name : Workspace::artifact_names()) {
    const Checkpoint& c = ws.artifact(name);
    j[name] = {{"tensor_digest", tensor_digest(c)}, {"final_loss", c.meta_or("train.final_loss")}};
  }
  r.save("artifacts.json", j.dump(2) + "\n");
  return r.finish();
}

}  // namespace

const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names{"prepare",      "barrier",        "word-prob",
                                              "param-compare", "grid",           "nll-landscape",
                                              "diff-heatmap",  "decorrelated",   "ensemble-compare",
                                              "linearization"};
  return names;
}

ExperimentReport run_experiment(const std::string& name, Workspace& ws) {
  if (name == "prepare") return run_prepare(ws);
  if (name == "barrier") return run_barrier(ws);
  if (name == "word-prob") return run_word_prob(ws);
  if (name == "param-compare") return run_param_compare(ws);
  if (name == "grid") return run_plane(ws, "grid", true);
  if (name == "nll-landscape") return run_plane(ws, "nll-landscape", false);
  if (name == "diff-heatmap") return run_diff_heatmap(ws);
  if (name == "decorrelated") return run_decorrelated(ws);
  if (name == "ensemble-compare") return run_ensemble_compare(ws);
  if (name == "linearization") return run_linearization(ws);
  throw std::invalid_argument("unknown experiment \"" + name + "\"");
}

}  // namespace lmi
