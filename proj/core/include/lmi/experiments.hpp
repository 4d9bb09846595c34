#pragma once

// Reproducible experiment pipelines. A Manifest fixes every corpus, recipe
// and seed; a Workspace lazily trains (or reloads) the shared artifacts
//
//   theta0        pretrained on the neutral corpus
//   theta_plus    theta0 fine-tuned on the positive corpus
//   theta_minus   theta0 fine-tuned on the negative corpus
//   reference     wider scorer trained on a separate neutral sample
//   decorrelated  independent init, same pretraining and positive fine-tuning
//
// and each experiment writes CSV/JSON reports plus a summary with its
// threshold checks. Outputs are a pure function of the manifest.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lmi/corpus.hpp"
#include "lmi/paramspace.hpp"
#include "lmi/tinylm.hpp"

namespace lmi {

struct Manifest {
  std::string name = "desk";
  std::uint64_t seed = 20240611;

  ModelConfig model;            // vocab_size is taken from the language
  ModelConfig reference_model;  // likewise
  ModelConfig affine_model;     // used by the ensemble comparison

  TrainConfig pretrain;
  TrainConfig finetune;
  TrainConfig reference;
  TrainConfig affine;

  std::size_t pretrain_sentences = 20000;
  std::size_t finetune_sentences = 5000;
  std::size_t reference_sentences = 40000;
  std::size_t test_sentences = 200;

  GenConfig gen;
  int continuations = 25;       // per prompt and sweep point
  int grid_continuations = 2;   // per prompt on the (alpha, beta) grid
  int grid_prompts = 5;         // leading prompts used on the grid
  int ensemble_continuations = 25;

  std::vector<double> control_alphas{-1.0, -0.5, 0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0};
  int barrier_points = 9;       // evenly spaced on [0, 1]
  int decorrelated_points = 9;  // evenly spaced on [0, 1]
  std::vector<double> ensemble_alphas{0.0, 0.25, 0.5, 0.75, 1.0};
  std::vector<double> param_compare_alphas{-1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0};
  AxisRange grid_alpha;
  AxisRange grid_beta;
  std::vector<double> linearization_scales{0.25, 0.5, 0.75, 1.0};

  std::string word_prob_prompt = "the movie was";

  Manifest();
  void validate() const;
  std::string to_json() const;
  static Manifest from_json(const std::string& text);
  std::string digest() const;

  // Small recipe for smoke runs and determinism checks.
  static Manifest tiny();
};

Manifest read_manifest(const std::filesystem::path& path);

class MissingArtifact : public std::runtime_error {
 public:
  MissingArtifact(const std::string& artifact, const std::string& command);
};

using LogFn = std::function<void(const std::string&)>;

class Workspace {
 public:
  // Artifacts are cached under out_dir/artifacts and reused when their
  // manifest digest matches. With build_missing=false a missing artifact
  // throws MissingArtifact instead of training it.
  Workspace(Manifest manifest, std::filesystem::path out_dir, bool build_missing = true, LogFn log = {});

  const Manifest& manifest() const { return manifest_; }
  const std::filesystem::path& out_dir() const { return out_dir_; }
  const Language& language() const { return language_; }
  const std::vector<TokenSeq>& prompts() const { return prompts_; }

  const Checkpoint& theta0();
  const Checkpoint& theta_plus();
  const Checkpoint& theta_minus();
  const Checkpoint& reference();
  const Checkpoint& decorrelated();
  const Checkpoint& affine0();
  const Checkpoint& affine_plus();
  const Checkpoint& affine_minus();

  const std::vector<TokenSeq>& test_pos();
  const std::vector<TokenSeq>& test_neg();

  // Any artifact by name: the above plus "decorrelated_base".
  const Checkpoint& artifact(const std::string& name);
  static const std::vector<std::string>& artifact_names();

  // Builds every artifact.
  void prepare();

  void log(const std::string& line) const;

 private:
  const std::vector<TokenSeq>& corpus(const std::string& name);
  Checkpoint build(const std::string& name);
  Checkpoint train_logged(const std::string& name, const Checkpoint& init, const std::vector<TokenSeq>& data,
                          const TrainConfig& cfg);

  Manifest manifest_;
  std::filesystem::path out_dir_;
  bool build_missing_;
  LogFn log_;
  Language language_;
  std::vector<TokenSeq> prompts_;
  std::string digest_;
  std::map<std::string, Checkpoint> artifacts_;
  std::map<std::string, std::vector<TokenSeq>> corpora_;
};

struct Check {
  std::string id;
  std::string description;
  double value = 0.0;
  std::string relation;  // ">=", "<=", ">", "<"
  double threshold = 0.0;
  bool passed = false;
};

Check make_check(std::string id, std::string description, double value, std::string relation, double threshold);

struct ExperimentReport {
  std::string name;
  std::vector<Check> checks;
  std::vector<std::string> files;  // relative to the experiment directory

  bool passed() const;
  const Check* find(const std::string& id) const;
  std::string summary_json(const std::string& manifest_digest) const;
};

const std::vector<std::string>& experiment_names();

// Runs one experiment and writes out_dir/<name>/ including summary.json.
// Throws std::invalid_argument for an unknown name.
ExperimentReport run_experiment(const std::string& name, Workspace& ws);

}  // namespace lmi
