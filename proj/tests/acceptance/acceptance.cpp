// Acceptance driver: one PASS/FAIL line per criterion, exit status 1 if any fail.
//
//   lmi_acceptance --out DIR [--manifest default|tiny|FILE]

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lmi/experiments.hpp"
#include "lmi/paramspace.hpp"
#include "lmi/tensorstore.hpp"
#include "lmi/tinylm.hpp"
#include "lmi/util.hpp"

using namespace lmi;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& title, const Outcome& o) {
  std::printf("%s  criterion %2d  %-34s %s\n", o.passed ? "PASS" : "FAIL", id, title.c_str(), o.detail.c_str());
  std::fflush(stdout);
  if (!o.passed) ++failures;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

Checkpoint jitter(const Checkpoint& c, std::uint64_t seed, double sd) {
  Checkpoint out = c;
  Rng rng(seed);
  for (auto& [name, t] : out.tensors()) {
    for (std::size_t i = 0; i < t.numel(); ++i) t.set(i, t.get(i) + rng.normal(0.0, sd));
  }
  return out;
}

bool bitwise_equal(const Checkpoint& a, const Checkpoint& b) { return a.tensors_bitwise_equal(b); }

double max_rel_diff(const Checkpoint& a, const Checkpoint& b) {
  double worst = 0.0;
  for (const auto& [name, t] : a.tensors()) {
    const auto& u = b.at(name);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double x = t.get(i), y = u.get(i);
      if (x == y) continue;
      worst = std::max(worst, std::abs(x - y) / std::max(std::abs(x), std::abs(y)));
    }
  }
  return worst;
}

Outcome interpolation_algebra() {
  ModelConfig cfg;
  cfg.vocab_size = 32;
  cfg.context_len = 16;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  const Checkpoint base = init_model(cfg, 1);
  const Checkpoint t0 = jitter(base, 2, 0.1), tp = jitter(base, 3, 0.1), tm = jitter(base, 4, 0.1);

  Rng rng(2024);
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const double a = -4.0 + 8.0 * rng.uniform();
    worst = std::max(worst, max_rel_diff(interp_g3(t0, tm, tp, a, 1.0 - a), interp_g1(tm, tp, a)));
    worst = std::max(worst, max_rel_diff(interp_g3(t0, tm, tp, a, -a), interp_g2(t0, tm, tp, a)));
  }
  const bool endpoints = bitwise_equal(interp_g1(tm, tp, 1.0), tp) && bitwise_equal(interp_g1(tm, tp, 0.0), tm) &&
                         bitwise_equal(interp_g2(t0, tm, tp, 0.0), t0) &&
                         bitwise_equal(interp_g3(t0, tm, tp, 0.0, 0.0), t0) &&
                         bitwise_equal(interp_g3(t0, tm, tp, 1.0, 0.0), tp) &&
                         bitwise_equal(interp_g3(t0, tm, tp, 0.0, 1.0), tm);
  return {worst <= 1e-6 && endpoints,
          "max relative deviation " + fmt(worst) + " (<= 1e-06), endpoints " + (endpoints ? "bitwise" : "DIFFER")};
}

Outcome gradient_check() {
  ModelConfig cfg;
  cfg.vocab_size = 16;
  cfg.context_len = 8;
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  const Checkpoint ckpt = jitter(init_model(cfg, 7, DType::F64), 8, 0.3);
  const std::vector<TokenSeq> batch{{1, 4, 9, 3, 12, 2}, {1, 7, 7, 15, 2}, {1, 3, 5, 8, 10, 11, 13, 2}};
  const Checkpoint g = grad(ckpt, batch);

  const double h = 1e-6;
  Checkpoint probe = ckpt;
  double worst = 0.0;
  std::string worst_name;
  std::size_t checked = 0;
  for (const auto& [name, t] : ckpt.tensors()) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double x = t.get(i);
      probe.at(name).set(i, x + h);
      const double up = loss_nll(probe, batch);
      probe.at(name).set(i, x - h);
      const double down = loss_nll(probe, batch);
      probe.at(name).set(i, x);
      const double fd = (up - down) / (2 * h);
      const double an = g.at(name).get(i);
      num += (fd - an) * (fd - an);
      den += fd * fd;
      ++checked;
    }
    const double rel = den > 0 ? std::sqrt(num / den) : std::sqrt(num);
    if (rel > worst) {
      worst = rel;
      worst_name = name;
    }
  }
  return {worst < 1e-5, std::to_string(checked) + " parameters, worst tensor relative error " + fmt(worst) + " (" +
                            worst_name + ") < 1e-05"};
}

Outcome from_checks(const std::map<std::string, ExperimentReport>& reports, const std::string& experiment,
                    const std::vector<std::string>& ids) {
  Outcome o{true, ""};
  const auto it = reports.find(experiment);
  if (it == reports.end()) return {false, experiment + " did not run"};
  for (const auto& id : ids) {
    const Check* c = it->second.find(id);
    if (!o.detail.empty()) o.detail += "; ";
    if (c == nullptr) {
      o.passed = false;
      o.detail += id + " missing";
      continue;
    }
    o.passed = o.passed && c->passed;
    o.detail += id + "=" + fmt(c->value) + " " + c->relation + " " + fmt(c->threshold);
  }
  return o;
}

std::map<std::string, std::string> snapshot(const fs::path& root, const std::function<bool(const fs::path&)>& keep) {
  std::map<std::string, std::string> out;
  if (!fs::exists(root)) return out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), root);
    if (!keep(rel)) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    out[rel.generic_string()] = ss.str();
  }
  return out;
}

// Empty string when identical, otherwise the first differing path.
std::string compare_trees(const std::map<std::string, std::string>& a, const std::map<std::string, std::string>& b) {
  for (const auto& [path, bytes] : a) {
    const auto it = b.find(path);
    if (it == b.end()) return path + " (missing in rerun)";
    if (it->second != bytes) return path;
  }
  for (const auto& [path, bytes] : b) {
    if (!a.count(path)) return path + " (extra in rerun)";
  }
  return "";
}

bool lmic_round_trip(const Checkpoint& c) {
  const auto bytes = serialize_checkpoint(c);
  const Checkpoint back = deserialize_checkpoint(bytes);
  return c.bitwise_equal(back) && serialize_checkpoint(back) == bytes;
}

bool special_values_round_trip() {
  const double inf = std::numeric_limits<double>::infinity();
  const std::vector<double> vals{0.0, -0.0, 1e-310, -inf, inf, std::numeric_limits<double>::quiet_NaN(), 3.5};
  bool ok = true;
  for (DType dtype : {DType::F32, DType::F64}) {
    Checkpoint c;
    Tensor t = Tensor::zeros({7}, dtype);
    for (std::size_t i = 0; i < vals.size(); ++i) t.set(i, vals[i]);
    c.add("values", t);
    c.meta()["note"] = "special values";
    ok = ok && lmic_round_trip(c);
  }
  return ok;
}

void run_all(Workspace& ws, std::map<std::string, ExperimentReport>& reports) {
  for (const auto& name : experiment_names()) {
    std::fprintf(stderr, "running %s\n", name.c_str());
    reports.emplace(name, run_experiment(name, ws));
  }
}

}  // namespace

int main(int argc, char** argv) {
  fs::path out = "acceptance_run";
  std::string manifest_arg = "default";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--out" && i + 1 < argc) {
      out = argv[++i];
    } else if (a == "--manifest" && i + 1 < argc) {
      manifest_arg = argv[++i];
    } else {
      std::cerr << "usage: lmi_acceptance [--out DIR] [--manifest default|tiny|FILE]\n";
      return 2;
    }
  }
  const Manifest manifest = manifest_arg == "default" ? Manifest{}
                            : manifest_arg == "tiny"  ? Manifest::tiny()
                                                      : read_manifest(manifest_arg);

  report(1, "interpolation algebra", interpolation_algebra());
  report(2, "gradient correctness", gradient_check());

  const LogFn log = [](const std::string& line) { std::fprintf(stderr, "%s\n", line.c_str()); };
  const fs::path main_dir = out / "main";
  Workspace ws(manifest, main_dir, true, log);
  std::map<std::string, ExperimentReport> reports;
  run_all(ws, reports);

  report(3, "monotone attribute control", from_checks(reports, "barrier", {"control.spearman", "control.extrapolation"}));
  report(4, "zero perplexity barrier", from_checks(reports, "barrier", {"barrier.perplexity", "barrier.grammar"}));
  report(5, "word-probability monotonicity",
         from_checks(reports, "word-prob", {"pos_mass.spearman", "neg_mass.spearman"}));
  report(6, "weight-vs-output equivalence",
         from_checks(reports, "ensemble-compare", {"affine.logit_dev", "transformer.score_gap"}));
  report(7, "grid landscape",
         from_checks(reports, "grid", {"grid.points", "grid.errors", "anchors.nll_pos", "anchors.nll_neg"}));
  report(8, "decorrelated barrier",
         from_checks(reports, "decorrelated", {"midpoint.perplexity", "midpoint.grammar", "midpoint.distinct4"}));
  report(9, "diff-norm ordering", from_checks(reports, "diff-heatmap", {"diff.ordering"}));
  report(10, "linearization structure",
         from_checks(reports, "linearization",
                     {"c_plus", "c_minus", "locality.plus", "locality.minus", "decorrelated.ratio"}));

  // Criterion 11: LMIC round trips, then reruns.
  Outcome fmt_det{true, ""};
  bool rt = special_values_round_trip();
  for (const auto& name : Workspace::artifact_names()) rt = rt && lmic_round_trip(ws.artifact(name));
  fmt_det.passed = rt;
  fmt_det.detail = std::string("LMIC round trip ") + (rt ? "bitwise" : "MISMATCH");

  // Same artifacts, every experiment recomputed in a fresh directory.
  const fs::path rerun_dir = out / "rerun";
  fs::remove_all(rerun_dir);
  fs::create_directories(rerun_dir);
  fs::copy(main_dir / "artifacts", rerun_dir / "artifacts", fs::copy_options::recursive);
  {
    Workspace again(manifest, rerun_dir, false, log);
    std::map<std::string, ExperimentReport> unused;
    run_all(again, unused);
  }
  const auto not_artifacts = [](const fs::path& rel) { return *rel.begin() != "artifacts"; };
  const std::string diff_exp = compare_trees(snapshot(main_dir, not_artifacts), snapshot(rerun_dir, not_artifacts));

  // Whole pipeline including training, twice from scratch on the small recipe.
  std::string diff_full;
  for (const char* tag : {"tiny_a", "tiny_b"}) {
    const fs::path dir = out / tag;
    fs::remove_all(dir);
    Workspace small(Manifest::tiny(), dir, true);
    std::map<std::string, ExperimentReport> unused;
    run_all(small, unused);
  }
  const auto all = [](const fs::path&) { return true; };
  diff_full = compare_trees(snapshot(out / "tiny_a", all), snapshot(out / "tiny_b", all));

  fmt_det.passed = fmt_det.passed && diff_exp.empty() && diff_full.empty();
  fmt_det.detail += diff_exp.empty() ? "; experiment rerun byte-identical" : "; rerun differs at " + diff_exp;
  fmt_det.detail += diff_full.empty() ? "; retrained pipeline byte-identical" : "; retrain differs at " + diff_full;
  report(11, "format and determinism", fmt_det);

  std::printf("%s: %d of 11 criteria failed\n", failures == 0 ? "ALL PASS" : "FAILURES", failures);
  return failures == 0 ? 0 : 1;
}
