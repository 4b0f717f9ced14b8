// Copyright 2026 The thermaldet Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Command-line surface: one entry point with subcommands for data
// generation, caption adaptation, training, evaluation, ablations, gradient
// verification and report merging. Exit codes: 0 ok, 1 validation or
// runtime failure, 2 usage.

#pragma once

#include "thermaldet/gradcheck.hpp"
#include "thermaldet/training.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace thermaldet {

class CliError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace cli_detail {

namespace fs = std::filesystem;

// Bare file names that do not exist locally resolve against the shipped
// config directory, so `--config default.json` works from anywhere.
inline std::string resolve_config_file(const std::string& path) {
  if (path.empty() || fs::exists(path)) return path;
  if (fs::path(path).has_parent_path()) return path;
  const std::string shipped = config_path(path);
  return fs::exists(shipped) ? shipped : path;
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CliError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw CliError(path + ": " + e.what());
  }
}

// `a.b.c=value` into a merge patch; the value is JSON when it parses,
// otherwise a string.
inline void apply_set(nlohmann::json& patch, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw CliError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;
  }
  nlohmann::json* node = &patch;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw CliError("--set: empty key segment in '" + key + "'");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

// Shared config flags: a config file, generic overrides and common scalars.
struct ConfigFlags {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<int> steps;
  std::optional<double> lr;
  std::optional<std::string> strategy;
  std::optional<double> lambda_drift;
  std::optional<std::string> output_dir;

  void add_to(CLI::App* app, bool with_seed = true) {
    app->add_option("--config", config, "run configuration JSON (default: built-in defaults)");
    app->add_option("--set", sets, "override, e.g. --set enable.kd_sem=false (repeatable)");
    if (with_seed) app->add_option("--seed", seed, "run seed");
    app->add_option("--steps", steps, "training steps");
    app->add_option("--lr", lr, "peak learning rate");
    app->add_option("--strategy", strategy, "subclass selection strategy");
    app->add_option("--lambda-drift", lambda_drift, "drift regularization weight");
    app->add_option("--output-dir", output_dir, "output root (THERMALDET_OUT still wins)");
  }

  // Flags win over the config file.
  RunConfig resolve(const nlohmann::json& base_json) const {
    nlohmann::json j = base_json;
    nlohmann::json patch = nlohmann::json::object();
    for (const auto& s : sets) apply_set(patch, s);
    if (seed) patch["seed"] = *seed;
    if (steps) patch["steps"] = *steps;
    if (lr) patch["lr"] = *lr;
    if (strategy) patch["strategy"] = *strategy;
    if (lambda_drift) patch["lambda_drift"] = *lambda_drift;
    if (output_dir) patch["output_dir"] = *output_dir;
    j.merge_patch(patch);
    return RunConfig::from_json(j);
  }

  RunConfig resolve() const {
    const nlohmann::json base = config.empty() ? nlohmann::json(RunConfig{}.to_json())
                                               : read_json_file(resolve_config_file(config));
    return resolve(base);
  }
};

inline std::string short_hash(const std::string& h) { return h.substr(0, 12); }

inline std::vector<TrainingRecord> load_or_generate(const std::string& path, const SceneGrammar& g, std::size_t n,
                                                    std::uint64_t seed, double paired) {
  if (!path.empty()) return read_records(path);
  return generate_dataset(g, n, seed, paired);
}

inline SceneGrammar load_grammar(const std::string& path) {
  return path.empty() ? SceneGrammar::load_default() : SceneGrammar::from_file(path);
}

}  // namespace cli_detail

// Runs one command line. Output goes to `out`, diagnostics to `err`.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  namespace fs = std::filesystem;
  using namespace cli_detail;
  CLI::App app{"thermaldet: open-vocabulary thermal detection at desk scale"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset as JSONL");
  std::size_t gen_n = 0;
  std::uint64_t gen_seed = 0;
  double gen_paired = 0.0;
  std::string gen_out, gen_grammar;
  gen->add_option("--n", gen_n, "number of scenes")->required();
  gen->add_option("--seed", gen_seed, "dataset seed");
  gen->add_option("--paired", gen_paired, "fraction of scenes with an RGB pair")->check(CLI::Range(0.0, 1.0));
  gen->add_option("--out", gen_out, "output JSONL path")->required();
  gen->add_option("--grammar", gen_grammar, "scene grammar file (default: shipped grammar)");

  // adapt-captions
  auto* adapt = app.add_subcommand("adapt-captions", "strip RGB-specific descriptors from captions");
  std::string adapt_in, adapt_out, adapt_stop;
  adapt->add_option("--in", adapt_in, "input JSONL")->required();
  adapt->add_option("--out", adapt_out, "output JSONL")->required();
  adapt->add_option("--stoplist", adapt_stop, "stoplist file (default: shipped stoplist)");

  // train
  auto* tr = app.add_subcommand("train", "train one run; outputs land in a directory named by the config hash");
  ConfigFlags tr_flags;
  tr_flags.add_to(tr);
  std::string tr_manifest, tr_train, tr_eval, tr_out, tr_grammar;
  tr->add_option("--manifest", tr_manifest, "rerun from a run manifest");
  tr->add_option("--train-data", tr_train, "training JSONL (default: generated from the config)");
  tr->add_option("--eval-data", tr_eval, "held-out JSONL (default: generated from the config)");
  tr->add_option("--out", tr_out, "explicit run directory");
  tr->add_option("--grammar", tr_grammar, "scene grammar for generated data");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a trained run");
  std::string ev_run, ev_data, ev_format = "json", ev_out;
  std::optional<std::uint64_t> ev_seed;
  ev->add_option("--run", ev_run, "run directory with manifest.json and checkpoint.json")->required();
  ev->add_option("--data", ev_data, "evaluation JSONL (default: the run's held-out split)");
  ev->add_option("--format", ev_format, "json or csv")->check(CLI::IsMember({"json", "csv"}));
  ev->add_option("--out", ev_out, "report path (default: <run>/report.<format>)");
  ev->add_option("--seed", ev_seed, "seed for stochastic selection strategies");

  // ablate
  auto* ab = app.add_subcommand("ablate", "train every grid cell for several seeds and emit a table");
  ConfigFlags ab_flags;
  ab_flags.add_to(ab, /*with_seed=*/false);
  std::string ab_grid, ab_out;
  std::optional<std::size_t> ab_seeds;
  std::uint64_t ab_seed0 = 0;
  ab->add_option("--grid", ab_grid, "grid JSON: {name, cells: [{name, overrides}]}")->required();
  ab->add_option("--seeds", ab_seeds, "number of seeds (default: the config's seed list)");
  ab->add_option("--seed", ab_seed0, "first seed when --seeds is given");
  ab->add_option("--out", ab_out, "CSV path (default: <output root>/ablation-<grid>.csv)");

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "finite-difference check of every loss term");
  std::string gc_config;
  std::size_t gc_seeds = 1;
  std::uint64_t gc_seed = 0;
  gc->add_option("--config", gc_config, "run configuration whose architecture is verified");
  gc->add_option("--seeds", gc_seeds, "number of seeds");
  gc->add_option("--seed", gc_seed, "first seed");

  // report
  auto* rep = app.add_subcommand("report", "merge run evaluations into one table");
  std::vector<std::string> rep_runs;
  std::string rep_format = "csv", rep_out;
  rep->add_option("--run", rep_runs, "run directories or eval.json files (repeatable)")->required();
  rep->add_option("--format", rep_format, "json or csv")->check(CLI::IsMember({"json", "csv"}));
  rep->add_option("--out", rep_out, "merged report path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) {
      const SceneGrammar g = load_grammar(gen_grammar);
      const auto records = generate_dataset(g, gen_n, gen_seed, gen_paired);
      write_records(gen_out, records);
      std::size_t paired = 0;
      for (const auto& r : records) paired += r.paired ? 1 : 0;
      out << "gen-data: " << records.size() << " records (" << paired << " paired) -> " << gen_out << " sha1 "
          << dataset_hash(records) << "\n";
      return 0;
    }
    if (*adapt) {
      const Stoplist stop = adapt_stop.empty() ? default_stoplist() : load_stoplist(adapt_stop);
      auto records = read_records(adapt_in);
      for (auto& r : records) r = adapt_record(std::move(r), stop);
      write_records(adapt_out, records);
      out << "adapt-captions: " << records.size() << " records -> " << adapt_out << "\n";
      return 0;
    }
    if (*tr) {
      RunConfig cfg;
      nlohmann::json manifest;
      if (!tr_manifest.empty()) {
        manifest = read_json_file(tr_manifest);
        if (manifest.value("format", "") != "thermaldet-manifest/1") throw CliError(tr_manifest + ": not a run manifest");
        cfg = tr_flags.resolve(manifest.at("config"));
        const auto paths = manifest.value("dataset_paths", nlohmann::json::object());
        if (tr_train.empty() && paths.contains("train")) tr_train = paths.at("train").get<std::string>();
        if (tr_eval.empty() && paths.contains("eval")) tr_eval = paths.at("eval").get<std::string>();
      } else {
        cfg = tr_flags.resolve();
      }
      const SceneGrammar g = load_grammar(tr_grammar);
      Datasets data{load_or_generate(tr_train, g, cfg.data.train_n, cfg.data.train_seed, cfg.data.paired_fraction),
                    load_or_generate(tr_eval, g, cfg.data.eval_n, cfg.data.eval_seed, 0.0)};
      TrainOptions opts;
      opts.dataset_hashes = {{"train", dataset_hash(data.train)}, {"eval", dataset_hash(data.eval)}};
      if (!tr_train.empty()) opts.dataset_paths["train"] = fs::absolute(tr_train).string();
      if (!tr_eval.empty()) opts.dataset_paths["eval"] = fs::absolute(tr_eval).string();
      if (!manifest.is_null()) {
        const auto recorded = manifest.value("datasets", nlohmann::json::object());
        for (const auto& [split, h] : recorded.items()) {
          if (opts.dataset_hashes.count(split) && opts.dataset_hashes.at(split) != h.get<std::string>()) {
            throw CliError("dataset '" + split + "' does not match the manifest hash");
          }
        }
      }
      opts.out_dir = tr_out.empty() ? run_dir(cfg).string() : tr_out;
      const auto res = train(cfg, data, g.class_names(), opts);
      out << "train: " << res.steps_run << " steps, " << res.updates << " updates";
      if (res.report) {
        out << ", AP " << format_number(res.report->ap) << " AP50 " << format_number(res.report->ap50) << " AP75 "
            << format_number(res.report->ap75);
      }
      out << ", drift " << format_number(res.drift) << " -> " << opts.out_dir << "\n";
      return 0;
    }
    if (*ev) {
      const fs::path dir(ev_run);
      const auto manifest = read_json_file((dir / "manifest.json").string());
      const RunConfig cfg = RunConfig::from_json(manifest.at("config"));
      const SceneGrammar g = SceneGrammar::load_default();
      Detector det(cfg, g.class_names());
      load_checkpoint(det, read_json_file((dir / "checkpoint.json").string()));
      const auto records = load_or_generate(ev_data, g, cfg.data.eval_n, cfg.data.eval_seed, 0.0);
      const EvalReport r = evaluate(det, records, ev_seed.value_or(cfg.seed));
      const std::string path = ev_out.empty() ? (dir / ("report." + ev_format)).string() : ev_out;
      emit_report({{short_hash(cfg.hash()), r}}, path, report_format_from_string(ev_format));
      out << "eval: " << records.size() << " images, AP " << format_number(r.ap) << " AP50 " << format_number(r.ap50)
          << " AP75 " << format_number(r.ap75) << " -> " << path << "\n";
      return 0;
    }
    if (*ab) {
      const RunConfig base = ab_flags.resolve();
      const AblationGrid grid = AblationGrid::from_file(resolve_config_file(ab_grid));
      std::vector<std::uint64_t> seeds = base.seeds;
      if (ab_seeds) {
        seeds.clear();
        for (std::size_t i = 0; i < *ab_seeds; ++i) seeds.push_back(ab_seed0 + i);
      }
      if (seeds.empty()) throw CliError("ablate: no seeds");
      const SceneGrammar g = SceneGrammar::load_default();
      const Datasets data = make_datasets(g, base.data);
      AblationOptions opts;
      opts.cache_root = output_root(base);
      opts.on_run = [&](const std::string& cell, const CellRun& r) {
        err << "  " << cell << " seed " << r.seed << ": AP " << format_number(r.ap) << (r.cached ? " (cached)" : "")
            << "\n";
      };
      const auto rows = run_ablation(base, grid, seeds, data, g.class_names(), opts);
      const std::string csv = ablation_csv(rows);
      const std::string path = ab_out.empty() ? (output_root(base) / ("ablation-" + grid.name + ".csv")).string() : ab_out;
      if (auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
      write_text(path, csv);
      out << csv;
      bool failed = false;
      for (const auto& r : rows) failed = failed || r.failed;
      out << "ablate: " << rows.size() << " rows x " << seeds.size() << " seeds -> " << path << "\n";
      return failed ? 1 : 0;
    }
    if (*gc) {
      const RunConfig cfg = gc_config.empty() ? RunConfig{} : RunConfig::from_file(resolve_config_file(gc_config));
      const auto names = SceneGrammar::load_default().class_names();
      const GradCheckOptions opts = verification_options();
      std::map<std::string, double> by_group;
      std::map<std::string, double> by_term;
      bool ok = true;
      for (std::size_t i = 0; i < gc_seeds; ++i) {
        for (const auto& r : gradient_check_terms(cfg, gc_seed + i, names, opts)) {
          if (!r.passed(opts.tolerance)) {
            ok = false;
            err << "seed " << gc_seed + i << " term " << r.term << ": "
                << (!r.active ? "inactive" : !r.deterministic ? "non-deterministic" : !r.unused_zero ? "leaked gradient" : "mismatch")
                << " (max rel err " << r.max_rel_error << " at " << r.worst << ")\n";
          }
          by_term[r.term] = std::max(by_term[r.term], r.max_rel_error);
          for (const auto& [grp, e] : r.by_group) by_group[grp] = std::max(by_group[grp], e);
        }
      }
      auto row = [&](const std::string& kind, const std::string& name, double e) {
        out << std::left << std::setw(7) << kind << std::setw(16) << name << std::scientific << std::setprecision(2) << e
            << (e < opts.tolerance ? "  ok" : "  FAIL") << "\n";
        out << std::defaultfloat;
      };
      out << "kind   name            max rel err\n";
      for (const auto& [t, e] : by_term) row("term", t, e);
      for (const auto& [grp, e] : by_group) row("module", grp, e);
      out << "grad-check: " << gc_seeds << " seed(s), " << (ok ? "all below " : "FAILED at ") << opts.tolerance << "\n";
      return ok ? 0 : 1;
    }
    if (*rep) {
      std::vector<std::pair<std::string, EvalReport>> rows;
      for (const auto& r : rep_runs) {
        fs::path p(r);
        std::string name = p.filename().string();
        if (fs::is_directory(p)) {
          p /= "eval.json";
        } else {
          name = p.parent_path().filename().string();
        }
        rows.emplace_back(name.empty() ? r : name, EvalReport::from_json(read_json_file(p.string())));
      }
      out << "run,AP,AP50,AP75\n";
      for (const auto& [name, r] : rows) {
        out << name << "," << format_number(r.ap) << "," << format_number(r.ap50) << "," << format_number(r.ap75) << "\n";
      }
      if (!rep_out.empty()) {
        emit_report(rows, rep_out, report_format_from_string(rep_format));
        out << "report: " << rows.size() << " runs -> " << rep_out << "\n";
      }
      return 0;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace thermaldet
