// SPDX-License-Identifier: Apache-2.0

#include "bflab/corpus.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "bflab/error.hpp"
#include "bflab/rng.hpp"

namespace bflab::harness {

using agent::vocabulary;

void CorpusSizes::validate() const {
  if (train < kMinTrain || attack < kMinAttack || eval < kMinEval) {
    throw ConfigError("corpus sizes below minimum (train >= " +
                      std::to_string(kMinTrain) + ", attack-opt >= " +
                      std::to_string(kMinAttack) + ", eval >= " +
                      std::to_string(kMinEval) + ")");
  }
}

std::uint64_t catalog_seed(std::uint64_t corpus_seed) {
  return stream_seed(corpus_seed, "catalog");
}

AgentEnv Corpus::env(std::size_t context) const {
  return AgentEnv::shopping(catalog_seed(seed), n_vendors, n_tools, context);
}

std::set<std::uint64_t> Corpus::hashes(std::span<const CorpusSample> split) const {
  std::set<std::uint64_t> out;
  for (const auto& s : split) out.insert(s.hash);
  return out;
}

std::vector<Task> Corpus::tasks(std::span<const CorpusSample> split) const {
  std::vector<Task> out;
  for (const auto& s : split) out.push_back(s.task);
  return out;
}

namespace {

const std::vector<std::vector<std::string>>& fillers() {
  static const std::vector<std::vector<std::string>> f = {
      {"for", "running"}, {"for", "work"},   {"for", "kids"},
      {"for", "travel"},  {"for", "school"}, {"for", "hiking"},
      {"for", "the", "summer"}, {"for", "the", "winter"},
      {"please"}, {"today"}, {"as", "a", "gift"}, {"quickly"}};
  return f;
}

bool chance(std::mt19937_64& rng, double p) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53 < p;
}

Task random_task(std::mt19937_64& rng, const agent::Catalog& catalog,
                 std::size_t n_products, std::size_t n_tools) {
  const auto& v = vocabulary();
  Task t;
  t.prompt = v.encode("i want to buy");
  const auto vendors = catalog.vendors();
  if (chance(rng, 0.3)) t.prompt.push_back(vendors[uniform_index(rng, vendors.size())]);
  if (chance(rng, 0.5)) {
    t.prompt.push_back(v.adjectives()[uniform_index(rng, v.adjectives().size())]);
  }
  t.prompt.push_back(v.products()[uniform_index(rng, n_products)]);
  const std::size_t n_fill = uniform_index(rng, 3);
  for (std::size_t i = 0; i < n_fill; ++i) {
    for (const auto& w : fillers()[uniform_index(rng, fillers().size())]) {
      t.prompt.push_back(v.id(w));
    }
  }
  std::vector<int> tools(v.tools().begin(),
                         v.tools().begin() + static_cast<std::ptrdiff_t>(n_tools));
  for (std::size_t i = tools.size(); i > 1; --i) {
    std::swap(tools[i - 1], tools[uniform_index(rng, i)]);
  }
  tools.resize(2 + uniform_index(rng, n_tools - 1));
  t.tools = std::move(tools);
  return t;
}

}  // namespace

Corpus gen_corpus(std::uint64_t seed, const CorpusSizes& sizes,
                  std::size_t n_vendors, std::size_t n_products,
                  std::size_t n_tools) {
  sizes.validate();
  const auto& v = vocabulary();
  if (n_products < 2 || n_products > v.products().size()) {
    throw ConfigError("n_products must be in [2, " +
                      std::to_string(v.products().size()) + "]");
  }
  Corpus c;
  c.seed = seed;
  c.n_vendors = n_vendors;
  c.n_products = n_products;
  c.n_tools = n_tools;
  const AgentEnv env = c.env();
  const auto gold_policy = agent::reference_policy();
  auto rng = make_stream(seed, "corpus");

  std::set<std::uint64_t> seen;
  std::size_t attempts = 0;
  const std::size_t total = sizes.train + sizes.attack + sizes.eval;
  std::vector<CorpusSample> all;
  while (all.size() < total) {
    if (++attempts > 50 * total) {
      throw ConfigError("cannot draw enough distinct prompts for the requested sizes");
    }
    CorpusSample s;
    s.task = random_task(rng, *env.catalog, n_products, n_tools);
    s.hash = sequence_hash(s.task.prompt);
    if (!seen.insert(s.hash).second) continue;
    // Some training episodes carry an extra listing entry at a non-head
    // position so the summarize stage sees longer lists.
    const bool train_slot = all.size() < sizes.train;
    if (train_slot && chance(rng, 0.25)) {
      auto q = agent::parse_prompt(s.task.prompt);
      auto listed = agent::listing_vendors(env.catalog->listing(*q));
      std::vector<int> others;
      for (int vendor : env.catalog->vendors()) {
        if (std::find(listed.begin(), listed.end(), vendor) == listed.end()) {
          others.push_back(vendor);
        }
      }
      if (!others.empty()) {
        s.task.injection = agent::ResponseInjection{
            others[uniform_index(rng, others.size())],
            1 + uniform_index(rng, listed.size())};
      }
    }
    s.gold = run_task(gold_policy, s.task, env);
    if (s.gold.malformed) {
      throw ContractError("reference agent produced a malformed transcript: " +
                          s.gold.malformed_reason);
    }
    all.push_back(std::move(s));
  }
  c.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(sizes.train));
  c.attack.assign(all.begin() + static_cast<std::ptrdiff_t>(sizes.train),
                  all.begin() + static_cast<std::ptrdiff_t>(sizes.train + sizes.attack));
  c.eval.assign(all.begin() + static_cast<std::ptrdiff_t>(sizes.train + sizes.attack),
                all.end());
  return c;
}

std::uint64_t corpus_hash(const Corpus& c) {
  std::vector<int> flat;
  auto put = [&](const std::vector<int>& xs) {
    flat.push_back(-1);
    flat.insert(flat.end(), xs.begin(), xs.end());
  };
  for (const auto* split : {&c.train, &c.attack, &c.eval}) {
    flat.push_back(-2);
    for (const auto& s : *split) {
      put(s.task.prompt);
      put(s.task.tools);
      if (s.task.injection) {
        put({s.task.injection->vendor,
             static_cast<int>(s.task.injection->list_position)});
      }
      for (const auto& st : s.gold.stages) put(st.output);
    }
  }
  return sequence_hash(flat);
}

std::vector<model::TrainSequence> training_sequences(
    std::span<const CorpusSample> samples) {
  std::vector<model::TrainSequence> out;
  for (const auto& s : samples) {
    for (const auto& st : s.gold.stages) {
      model::TrainSequence seq;
      seq.tokens = st.input;
      seq.output_start = st.input.size();
      seq.tokens.insert(seq.tokens.end(), st.output.begin(), st.output.end());
      out.push_back(std::move(seq));
    }
  }
  return out;
}

namespace {

using nlohmann::ordered_json;

ordered_json task_json(const Task& t) {
  ordered_json o;
  o["prompt"] = t.prompt;
  o["tools"] = t.tools;
  if (t.injection) {
    o["injection"] = {{"vendor", t.injection->vendor},
                      {"list_position", t.injection->list_position}};
  }
  return o;
}

Task task_from(const nlohmann::json& o) {
  Task t;
  t.prompt = o.at("prompt").get<std::vector<int>>();
  t.tools = o.at("tools").get<std::vector<int>>();
  if (o.contains("injection")) {
    t.injection = agent::ResponseInjection{
        o["injection"].at("vendor").get<int>(),
        o["injection"].at("list_position").get<std::size_t>()};
  }
  return t;
}

}  // namespace

void save_corpus(const Corpus& c, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  ordered_json head;
  head["seed"] = c.seed;
  head["n_vendors"] = c.n_vendors;
  head["n_products"] = c.n_products;
  head["n_tools"] = c.n_tools;
  head["sizes"] = {c.train.size(), c.attack.size(), c.eval.size()};
  head["hash"] = corpus_hash(c);
  os << head.dump() << "\n";
  const char* names[] = {"train", "attack", "eval"};
  const std::vector<CorpusSample>* splits[] = {&c.train, &c.attack, &c.eval};
  for (int k = 0; k < 3; ++k) {
    for (const auto& s : *splits[k]) {
      ordered_json o;
      o["split"] = names[k];
      o["task"] = task_json(s.task);
      o["text"] = vocabulary().decode(s.task.prompt);
      std::vector<std::vector<int>> outs;
      for (const auto& st : s.gold.stages) outs.push_back(st.output);
      o["gold_outputs"] = outs;
      os << o.dump() << "\n";
    }
  }
}

Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw FormatError("corpus file is empty");
  Corpus c;
  std::uint64_t expect = 0;
  try {
    const auto head = nlohmann::json::parse(line);
    c.seed = head.at("seed").get<std::uint64_t>();
    c.n_vendors = head.at("n_vendors").get<std::size_t>();
    c.n_products = head.at("n_products").get<std::size_t>();
    c.n_tools = head.at("n_tools").get<std::size_t>();
    expect = head.at("hash").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corpus header: ") + e.what());
  }
  const AgentEnv env = c.env();
  const auto gold_policy = agent::reference_policy();
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    CorpusSample s;
    std::string split;
    try {
      const auto o = nlohmann::json::parse(line);
      split = o.at("split").get<std::string>();
      s.task = task_from(o.at("task"));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("corpus sample: ") + e.what());
    }
    s.hash = sequence_hash(s.task.prompt);
    s.gold = run_task(gold_policy, s.task, env);
    if (split == "train") c.train.push_back(std::move(s));
    else if (split == "attack") c.attack.push_back(std::move(s));
    else if (split == "eval") c.eval.push_back(std::move(s));
    else throw FormatError("unknown split '" + split + "'");
  }
  if (corpus_hash(c) != expect) throw FormatError("corpus hash mismatch");
  return c;
}

}  // namespace bflab::harness
