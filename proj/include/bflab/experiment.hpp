// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bflab/attack_spec.hpp"
#include "bflab/corpus.hpp"
#include "bflab/objective.hpp"
#include "bflab/search.hpp"

namespace bflab::harness {

// ---------------------------------------------------------------------------
// Metrics

struct MetricsReport {
  std::string run_id;
  agent::Surface surface = agent::Surface::kPromptLevel;
  search::Mode mode = search::Mode::kPrioritized;
  std::uint64_t seed = 0;
  std::size_t n_max = 0;
  std::size_t flips_used = 0;
  double asr = 0.0;
  double cda = 0.0;
  std::optional<double> cda_triggered;  // invocation: output preserved
  std::size_t n_triggered = 0;
  std::size_t n_clean = 0;
  double loss_initial = 0.0;
  double loss_final = 0.0;
  double wall_time_s = 0.0;
  std::size_t blocked = 0;
};

// Percentage of triggered episodes that hit the attack goal.
double asr(std::span<const agent::Episode> episodes, const AttackSpec& spec);
// Percentage of untriggered episodes whose attacked final output equals the
// clean one.
double cda(std::span<const agent::Episode> episodes);
// Invocation only: percentage of triggered episodes with preserved output.
double cda_triggered(std::span<const agent::Episode> episodes,
                     const AttackSpec& spec);

// Runs every eval task clean and triggered, against both models.
std::vector<agent::Episode> evaluate_episodes(const model::ParamSet& clean,
                                              const model::ParamSet& attacked,
                                              std::span<const Task> tasks,
                                              const AttackSpec& spec,
                                              const AgentEnv& env);

// Eval tasks usable for a spec: the untriggered variant must lack the
// trigger, and prompt-level prompts must not already ask for the target.
std::vector<Task> eval_tasks(std::span<const CorpusSample> split,
                             const AttackSpec& spec, const AgentEnv& env,
                             std::size_t limit);

// Fraction of tasks for which the clean agent yields a well-formed transcript.
double well_formed_rate(const model::ParamSet& params, std::span<const Task> tasks,
                        const AgentEnv& env);

// ---------------------------------------------------------------------------
// Configuration

struct ExperimentConfig {
  model::ModelConfig model;
  std::size_t max_epochs = 40;
  std::string checkpoint;  // reuse this clean model when set

  std::uint64_t corpus_seed = 1;
  CorpusSizes corpus_sizes;
  std::size_t n_vendors = 8;
  std::size_t n_products = 10;
  std::size_t n_tools = 4;

  agent::Surface surface = agent::Surface::kPromptLevel;
  std::string trigger = "auto";  // word, or auto (drawn from the run seed)
  std::string target = "auto";
  std::optional<std::size_t> target_stage;
  objective::OptSizes opt_sizes;

  search::SearchConfig search;
  objective::LossWeights weights;
  std::vector<std::size_t> budgets;  // extra evaluation points below n_max

  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::size_t n_eval = 200;
  bool record_wall_time = false;
  std::vector<std::size_t> block_counts = {50, 75, 100};

  void validate() const;
};

// Unknown keys anywhere are rejected with ConfigError.
ExperimentConfig config_from_json(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string config_to_json(const ExperimentConfig& c);

// Trigger and target for a run seed (explicit words win over auto).
AttackSpec resolve_spec(const ExperimentConfig& c, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Runs

struct RunOutput {
  MetricsReport report;
  AttackSpec spec;
  search::SearchResult search;
  std::vector<agent::Episode> episodes;
  std::vector<MetricsReport> budget_reports;  // one per extra budget
};

struct Lab {
  ExperimentConfig config;
  Corpus corpus;
  AgentEnv env;
  model::ParamSet clean;
  std::function<void(const std::string&)> log;
};

// config.checkpoint when set, else a file under cache named by a hash of the
// model and corpus settings.
std::filesystem::path clean_model_path(const ExperimentConfig& config,
                                       const std::filesystem::path& cache);

// Builds the corpus and loads or trains the clean model. Training failures
// surface as TrainingError; the clean agent must be well formed on at least
// 95% of eval prompts.
Lab make_lab(const ExperimentConfig& config,
             const std::filesystem::path& checkpoint_cache,
             std::function<void(const std::string&)> log = {});

model::TrainResult train_model(const ExperimentConfig& config,
                               const Corpus& corpus,
                               std::function<void(const std::string&)> log = {});

// One attack for one seed: optimization set, search, evaluation.
RunOutput run_attack(const Lab& lab, std::uint64_t seed,
                     const std::vector<quant::BitLocation>& blocked = {});

// Replays the first `count` flips of a history onto params.
model::ParamSet replay(const model::ParamSet& clean,
                       std::span<const search::FlipRecord> history,
                       std::size_t count);

// Bits to block against a seed's attack: the first k distinct bits of the
// undefended history, padded from the clean-gradient ranking when it has
// fewer.
std::vector<quant::BitLocation> defense_block_list(
    const Lab& lab, std::uint64_t seed, std::span<const search::FlipRecord> history,
    std::size_t k);

struct DefenseOutput {
  RunOutput undefended;
  std::vector<std::pair<std::size_t, RunOutput>> defended;  // per block count
};
DefenseOutput run_defense(const Lab& lab, std::uint64_t seed,
                          std::span<const std::size_t> block_counts);

// ---------------------------------------------------------------------------
// Artifacts

inline constexpr const char* kCsvHeader =
    "run_id,surface,mode,seed,n_max,flips_used,asr,cda,loss_initial,"
    "loss_final,wall_time_s";
std::string csv_row(const MetricsReport& r);
// Rows grouped by (surface, mode, n_max, blocked); every group is followed
// by one mean row whose seed cell reads "mean".
std::string results_csv(std::span<const MetricsReport> rows);
std::string mean_row(std::span<const MetricsReport> rows);
MetricsReport mean_report(std::span<const MetricsReport> rows);
std::vector<MetricsReport> parse_results_csv(std::string_view text);

std::string transcript_json(const agent::PipelineTranscript& t);
std::string episodes_jsonl(std::span<const agent::Episode> episodes);
std::string metrics_json(const MetricsReport& r);
MetricsReport metrics_from_json(std::string_view text);

// Writes history.json, transcripts.jsonl, metrics.json and attacked.bflp
// under dir.
void write_run(const RunOutput& run, const std::filesystem::path& dir);

void write_text(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);

}  // namespace bflab::harness
