// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <set>
#include <span>
#include <vector>

#include "bflab/attack_spec.hpp"
#include "bflab/pipeline.hpp"
#include "bflab/train.hpp"

// Synthetic shopping episodes with gold transcripts from the rule-based agent.
namespace bflab::harness {

struct CorpusSizes {
  std::size_t train = 2000;
  std::size_t attack = 400;
  std::size_t eval = 200;

  static constexpr std::size_t kMinTrain = 2000;
  static constexpr std::size_t kMinAttack = 50;
  static constexpr std::size_t kMinEval = 200;
  void validate() const;
};

struct CorpusSample {
  Task task;
  agent::PipelineTranscript gold;
  std::uint64_t hash = 0;  // of the prompt
};

struct Corpus {
  std::uint64_t seed = 0;
  std::size_t n_vendors = 8;
  std::size_t n_products = 10;
  std::size_t n_tools = 4;
  std::vector<CorpusSample> train, attack, eval;

  AgentEnv env(std::size_t context = 160) const;
  std::set<std::uint64_t> hashes(std::span<const CorpusSample> split) const;
  std::vector<Task> tasks(std::span<const CorpusSample> split) const;
};

// Catalog seed used by every tool of a corpus.
std::uint64_t catalog_seed(std::uint64_t corpus_seed);

Corpus gen_corpus(std::uint64_t seed, const CorpusSizes& sizes,
                  std::size_t n_vendors = 8, std::size_t n_products = 10,
                  std::size_t n_tools = 4);

// Hash over every split's prompts, tools, injections and gold outputs.
std::uint64_t corpus_hash(const Corpus& c);

// Teacher-forcing sequences (one per stage) from gold transcripts.
std::vector<model::TrainSequence> training_sequences(
    std::span<const CorpusSample> samples);

// JSON lines: a header line, then one sample per line.
void save_corpus(const Corpus& c, const std::filesystem::path& path);
Corpus load_corpus(const std::filesystem::path& path);

}  // namespace bflab::harness
