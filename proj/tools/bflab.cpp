// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: corpus generation, clean training, attacks,
// evaluation, the bit-blocking defense and CSV reports.

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bflab/checkpoint.hpp"
#include "bflab/error.hpp"
#include "bflab/experiment.hpp"

namespace fs = std::filesystem;
using namespace bflab;

namespace {

enum Exit { kOk = 0, kConfig = 2, kTraining = 3, kAttack = 4 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::string mode, surface;
  std::optional<std::size_t> nmax;
  bool quiet = false;
};

void log_line(const Common& c, const std::string& msg) {
  if (!c.quiet) std::cerr << "[bflab] " << msg << std::endl;
}

harness::ExperimentConfig effective_config(const Common& c) {
  harness::ExperimentConfig cfg =
      c.config.empty() ? harness::ExperimentConfig{} : harness::load_config(c.config);
  if (c.seed) cfg.seeds = {*c.seed};
  if (!c.mode.empty()) cfg.search.mode = search::parse_mode(c.mode);
  if (!c.surface.empty()) {
    cfg.surface = agent::parse_surface(c.surface);
    cfg.target_stage.reset();
  }
  if (c.nmax) cfg.search.n_max = *c.nmax;
  cfg.validate();
  return cfg;
}

harness::Lab lab_for(const Common& c) {
  const auto cfg = effective_config(c);
  fs::create_directories(c.out);
  harness::write_text(fs::path(c.out) / "config.json", harness::config_to_json(cfg));
  return harness::make_lab(cfg, c.out, [&c](const std::string& m) { log_line(c, m); });
}

void add_common(CLI::App* app, Common& c, bool attack_flags) {
  app->add_option("--config", c.config, "experiment config (JSON)");
  app->add_option("--seed", c.seed, "run a single seed instead of the config list");
  app->add_option("--out", c.out, "output directory");
  app->add_flag("--quiet", c.quiet, "no progress on stderr");
  if (attack_flags) {
    app->add_option("--mode", c.mode, "prioritized | global-rank | no-attention")
        ->check(CLI::IsMember({"prioritized", "global-rank", "no-attention"}));
    app->add_option("--surface", c.surface, "prompt | internal | invocation")
        ->check(CLI::IsMember({"prompt", "internal", "invocation"}));
    app->add_option("--nmax", c.nmax, "flip budget");
  }
}

int cmd_gen_corpus(const Common& c) {
  auto cfg = effective_config(c);
  const std::uint64_t seed = c.seed.value_or(cfg.corpus_seed);
  auto corpus = harness::gen_corpus(seed, cfg.corpus_sizes, cfg.n_vendors,
                                    cfg.n_products, cfg.n_tools);
  fs::create_directories(c.out);
  const fs::path path = fs::path(c.out) / "corpus.jsonl";
  harness::save_corpus(corpus, path);
  std::cout << path.string() << " hash " << std::hex << harness::corpus_hash(corpus)
            << std::dec << " train " << corpus.train.size() << " attack "
            << corpus.attack.size() << " eval " << corpus.eval.size() << "\n";
  return kOk;
}

int cmd_train(Common c) {
  // --seed here is the model seed, not a run seed.
  auto cfg = effective_config(Common{c.config, {}, c.out, "", "", {}, c.quiet});
  if (c.seed) cfg.model.seed = *c.seed;
  auto corpus = harness::gen_corpus(cfg.corpus_seed, cfg.corpus_sizes, cfg.n_vendors,
                                    cfg.n_products, cfg.n_tools);
  auto r = harness::train_model(cfg, corpus, [&c](const std::string& m) { log_line(c, m); });
  fs::create_directories(c.out);
  // Saved where attack, evaluate and defend look for the clean model.
  const fs::path path = harness::clean_model_path(cfg, c.out);
  checkpoint::save_checkpoint(r.params, path);
  std::cout << path.string() << " epochs " << r.report.epochs << " token_accuracy "
            << r.report.token_accuracy << " exact_match " << r.report.exact_match << "\n";
  return kOk;
}

int cmd_attack(const Common& c) {
  auto lab = lab_for(c);
  std::vector<harness::MetricsReport> rows;
  for (std::uint64_t seed : lab.config.seeds) {
    auto run = harness::run_attack(lab, seed);
    harness::write_run(run, fs::path(c.out) / "runs" / run.report.run_id);
    for (const auto& b : run.budget_reports) {
      harness::write_text(fs::path(c.out) / "runs" / b.run_id / "metrics.json",
                          harness::metrics_json(b));
      rows.push_back(b);
    }
    rows.push_back(run.report);
    std::cout << harness::csv_row(run.report) << "\n";
  }
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    return a.n_max < b.n_max;
  });
  harness::write_text(fs::path(c.out) / "results.csv", harness::results_csv(rows));
  return kOk;
}

int cmd_evaluate(const Common& c, const std::string& attacked_path) {
  auto lab = lab_for(c);
  const auto attacked = checkpoint::load_checkpoint(attacked_path);
  std::vector<harness::MetricsReport> rows;
  for (std::uint64_t seed : lab.config.seeds) {
    const auto spec = harness::resolve_spec(lab.config, seed);
    const auto tasks = harness::eval_tasks(lab.corpus.eval, spec, lab.env, lab.config.n_eval);
    const auto eps = harness::evaluate_episodes(lab.clean, attacked, tasks, spec, lab.env);
    harness::MetricsReport r;
    r.run_id = "eval-" + agent::to_string(spec.surface) + "-s" + std::to_string(seed);
    r.surface = spec.surface;
    r.mode = lab.config.search.mode;
    r.seed = seed;
    r.n_max = lab.config.search.n_max;
    r.flips_used = checkpoint::diff(lab.clean, attacked).size();
    r.asr = harness::asr(eps, spec);
    r.cda = harness::cda(eps);
    if (spec.surface == agent::Surface::kInvocation) {
      r.cda_triggered = harness::cda_triggered(eps, spec);
    }
    r.n_triggered = r.n_clean = tasks.size();
    const fs::path dir = fs::path(c.out) / "eval" / r.run_id;
    harness::write_text(dir / "metrics.json", harness::metrics_json(r));
    harness::write_text(dir / "transcripts.jsonl", harness::episodes_jsonl(eps));
    std::cout << harness::csv_row(r) << "\n";
    rows.push_back(r);
  }
  harness::write_text(fs::path(c.out) / "eval.csv", harness::results_csv(rows));
  return kOk;
}

int cmd_defend(const Common& c) {
  auto lab = lab_for(c);
  std::vector<harness::MetricsReport> rows;
  for (std::uint64_t seed : lab.config.seeds) {
    auto d = harness::run_defense(lab, seed, lab.config.block_counts);
    harness::write_run(d.undefended,
                       fs::path(c.out) / "runs" / d.undefended.report.run_id);
    rows.push_back(d.undefended.report);
    for (const auto& [k, run] : d.defended) {
      if (k == 0) continue;
      harness::write_run(run, fs::path(c.out) / "runs" / run.report.run_id);
      rows.push_back(run.report);
      std::cout << harness::csv_row(run.report) << "\n";
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    return a.blocked < b.blocked;
  });
  harness::write_text(fs::path(c.out) / "defense.csv", harness::results_csv(rows));
  return kOk;
}

int cmd_report(const Common& c) {
  std::vector<harness::MetricsReport> rows;
  std::vector<fs::path> files;
  if (fs::exists(fs::path(c.out) / "runs")) {
    for (const auto& e : fs::recursive_directory_iterator(fs::path(c.out) / "runs")) {
      if (e.path().filename() == "metrics.json") files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) rows.push_back(harness::metrics_from_json(harness::read_text(f)));
  if (rows.empty()) throw ConfigError("no runs under " + c.out);
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    return std::tie(a.surface, a.mode, a.n_max, a.blocked, a.seed) <
           std::tie(b.surface, b.mode, b.n_max, b.blocked, b.seed);
  });
  const std::string csv = harness::results_csv(rows);
  harness::write_text(fs::path(c.out) / "report.csv", csv);
  std::cout << csv;
  return kOk;
}

int cmd_diff(const std::string& a, const std::string& b) {
  const auto bits = checkpoint::diff(checkpoint::load_checkpoint(a),
                                     checkpoint::load_checkpoint(b));
  for (const auto& loc : bits) std::cout << quant::to_string(loc) << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bit-flip attack lab for a toy tool-using agent"};
  app.require_subcommand(1);
  Common common;
  std::string attacked, diff_a, diff_b;

  auto* gen = app.add_subcommand("gen-corpus", "write the synthetic corpus");
  add_common(gen, common, false);
  auto* train = app.add_subcommand("train", "train and quantize the clean model");
  add_common(train, common, false);
  auto* attack = app.add_subcommand("attack", "search critical bits and evaluate");
  add_common(attack, common, true);
  auto* evaluate = app.add_subcommand("evaluate", "evaluate an attacked checkpoint");
  add_common(evaluate, common, true);
  evaluate->add_option("--attacked", attacked, "attacked checkpoint")->required();
  auto* defend = app.add_subcommand("defend", "block critical bits and re-attack");
  add_common(defend, common, true);
  auto* report = app.add_subcommand("report", "collect run metrics into report.csv");
  report->add_option("--out", common.out, "output directory");
  auto* diff = app.add_subcommand("diff", "list differing bits of two checkpoints");
  diff->add_option("a", diff_a)->required();
  diff->add_option("b", diff_b)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) return cmd_gen_corpus(common);
    if (*train) return cmd_train(common);
    if (*attack) return cmd_attack(common);
    if (*evaluate) return cmd_evaluate(common, attacked);
    if (*defend) return cmd_defend(common);
    if (*report) return cmd_report(common);
    if (*diff) return cmd_diff(diff_a, diff_b);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const TrainingError& e) {
    std::cerr << "training failed: " << e.what() << "\n";
    return kTraining;
  } catch (const std::exception& e) {
    std::cerr << "attack failed: " << e.what() << "\n";
    return kAttack;
  }
  return kOk;
}
