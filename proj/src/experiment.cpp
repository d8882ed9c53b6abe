// SPDX-License-Identifier: Apache-2.0

#include "bflab/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "bflab/checkpoint.hpp"
#include "bflab/error.hpp"
#include "bflab/rng.hpp"

namespace bflab::harness {

using agent::Episode;
using agent::Surface;
using agent::vocabulary;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Metrics

double asr(std::span<const Episode> episodes, const AttackSpec& spec) {
  std::size_t n = 0, hits = 0;
  for (const auto& ep : episodes) {
    if (!ep.triggered) continue;
    ++n;
    const bool hit = spec.surface == Surface::kInvocation
                         ? agent::check_surface2(ep, spec.target[0], spec.target_stage).tool_hit
                         : agent::check_surface1(ep, spec.target);
    hits += hit ? 1 : 0;
  }
  if (n == 0) throw ContractError("asr needs at least one triggered episode");
  return 100.0 * static_cast<double>(hits) / static_cast<double>(n);
}

namespace {

bool same_output(const agent::PipelineTranscript& a,
                 const agent::PipelineTranscript& b) {
  return a.final_output && b.final_output && *a.final_output == *b.final_output;
}

}  // namespace

double cda(std::span<const Episode> episodes) {
  std::size_t n = 0, same = 0;
  for (const auto& ep : episodes) {
    if (ep.triggered) continue;
    ++n;
    same += same_output(ep.clean, ep.attacked) ? 1 : 0;
  }
  if (n == 0) throw ContractError("cda needs at least one clean episode");
  return 100.0 * static_cast<double>(same) / static_cast<double>(n);
}

double cda_triggered(std::span<const Episode> episodes, const AttackSpec& spec) {
  std::size_t n = 0, kept = 0;
  for (const auto& ep : episodes) {
    if (!ep.triggered) continue;
    ++n;
    kept += agent::check_surface2(ep, spec.target[0], spec.target_stage)
                    .output_preserved
                ? 1
                : 0;
  }
  if (n == 0) throw ContractError("no triggered episodes");
  return 100.0 * static_cast<double>(kept) / static_cast<double>(n);
}

std::vector<Episode> evaluate_episodes(const model::ParamSet& clean,
                                       const model::ParamSet& attacked,
                                       std::span<const Task> tasks,
                                       const AttackSpec& spec,
                                       const AgentEnv& env) {
  const auto p_clean = agent::model_policy(clean);
  const auto p_attacked = agent::model_policy(attacked);
  std::vector<Episode> out;
  for (const auto& task : tasks) {
    const Task trig = inject_trigger(task, spec, *env.catalog);
    Episode e;
    e.surface = spec.surface;
    e.triggered = false;
    e.clean = run_task(p_clean, task, env);
    e.attacked = run_task(p_attacked, task, env);
    out.push_back(std::move(e));
    Episode t;
    t.surface = spec.surface;
    t.triggered = true;
    t.clean = run_task(p_clean, trig, env);
    t.attacked = run_task(p_attacked, trig, env);
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<Task> eval_tasks(std::span<const CorpusSample> split,
                             const AttackSpec& spec, const AgentEnv& env,
                             std::size_t limit) {
  std::vector<Task> out;
  for (const auto& s : split) {
    if (out.size() >= limit) break;
    const Task t = prepare_task(s.task, spec);
    if (!product_slot(t.prompt)) continue;
    if (task_has_trigger(t, spec, *env.catalog)) continue;
    if (spec.surface == Surface::kPromptLevel) {
      auto q = agent::parse_prompt(t.prompt);
      if (q && q->brand == spec.target[0]) continue;
    }
    out.push_back(t);
  }
  if (out.empty()) throw CorpusError("no eval task is usable for this attack");
  return out;
}

double well_formed_rate(const model::ParamSet& params, std::span<const Task> tasks,
                        const AgentEnv& env) {
  if (tasks.empty()) throw ContractError("no tasks");
  const auto policy = agent::model_policy(params);
  std::size_t ok = 0;
  for (const auto& t : tasks) ok += run_task(policy, t, env).malformed ? 0 : 1;
  return static_cast<double>(ok) / static_cast<double>(tasks.size());
}

// ---------------------------------------------------------------------------
// Configuration

void ExperimentConfig::validate() const {
  model.validate();
  corpus_sizes.validate();
  search.validate();
  if (weights.lambda < 0 || weights.gamma < 0 || weights.eta < 0) {
    throw ConfigError("loss weights must be nonnegative");
  }
  if (seeds.empty()) throw ConfigError("eval.seeds is empty");
  if (n_eval == 0) throw ConfigError("eval.n_eval must be positive");
  if (opt_sizes.triggered == 0 || opt_sizes.clean == 0) {
    throw ConfigError("attack optimization-set sizes must be positive");
  }
  if (!checkpoint.empty() && !std::filesystem::exists(checkpoint)) {
    throw ConfigError("model.checkpoint '" + checkpoint + "' does not exist");
  }
  if (model.vocab < vocabulary().size()) {
    throw ConfigError("model.vocab must cover the " +
                      std::to_string(vocabulary().size()) + "-token vocabulary");
  }
  if (target_stage && *target_stage > 2) throw ConfigError("attack.target_stage out of range");
}

namespace {

using Json = nlohmann::json;

// Reads known keys of one section and rejects the rest.
class Section {
 public:
  Section(const Json& root, const char* name) : name_(name) {
    if (root.contains(name)) {
      obj_ = root.at(name);
      if (!obj_.is_object()) throw ConfigError(std::string(name) + " must be an object");
    } else {
      obj_ = Json::object();
    }
  }
  template <class T>
  void get(const char* key, T& out) {
    seen_.push_back(key);
    if (!obj_.contains(key)) return;
    try {
      out = obj_.at(key).get<T>();
    } catch (const Json::exception& e) {
      throw ConfigError(name_ + "." + key + ": " + e.what());
    }
  }
  void finish() const {
    for (const auto& [k, _] : obj_.items()) {
      if (std::find(seen_.begin(), seen_.end(), k) == seen_.end()) {
        throw ConfigError("unknown key " + name_ + "." + k);
      }
    }
  }

 private:
  std::string name_;
  Json obj_;
  std::vector<std::string> seen_;
};

}  // namespace

ExperimentConfig config_from_json(std::string_view text) {
  Json root;
  try {
    root = Json::parse(text);
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [k, _] : root.items()) {
    if (k != "model" && k != "corpus" && k != "attack" && k != "search" && k != "eval") {
      throw ConfigError("unknown section " + k);
    }
  }
  ExperimentConfig c;
  {
    Section s(root, "model");
    s.get("vocab", c.model.vocab);
    s.get("context", c.model.context);
    s.get("n_layer", c.model.n_layer);
    s.get("n_head", c.model.n_head);
    s.get("d_model", c.model.d_model);
    s.get("d_ff", c.model.d_ff);
    s.get("seed", c.model.seed);
    s.get("max_epochs", c.max_epochs);
    s.get("checkpoint", c.checkpoint);
    s.finish();
  }
  {
    Section s(root, "corpus");
    s.get("seed", c.corpus_seed);
    s.get("train", c.corpus_sizes.train);
    s.get("attack", c.corpus_sizes.attack);
    s.get("eval", c.corpus_sizes.eval);
    s.get("n_vendors", c.n_vendors);
    s.get("n_products", c.n_products);
    s.get("n_tools", c.n_tools);
    s.finish();
  }
  {
    Section s(root, "attack");
    std::string surface = agent::to_string(c.surface);
    s.get("surface", surface);
    c.surface = agent::parse_surface(surface);
    s.get("trigger", c.trigger);
    s.get("target", c.target);
    long stage = -1;
    s.get("target_stage", stage);
    if (stage >= 0) c.target_stage = static_cast<std::size_t>(stage);
    s.get("opt_triggered", c.opt_sizes.triggered);
    s.get("opt_clean", c.opt_sizes.clean);
    s.get("max_continuation", c.opt_sizes.max_continuation);
    s.finish();
  }
  {
    Section s(root, "search");
    std::string mode = search::to_string(c.search.mode);
    s.get("mode", mode);
    c.search.mode = search::parse_mode(mode);
    s.get("n_max", c.search.n_max);
    s.get("beta", c.search.beta);
    s.get("candidate_size", c.search.candidate_size);
    s.get("lambda", c.weights.lambda);
    s.get("gamma", c.weights.gamma);
    s.get("eta", c.weights.eta);
    s.get("layers", c.weights.layers);
    s.get("budgets", c.budgets);
    s.finish();
  }
  {
    Section s(root, "eval");
    s.get("seeds", c.seeds);
    s.get("n_eval", c.n_eval);
    s.get("record_wall_time", c.record_wall_time);
    s.get("block_counts", c.block_counts);
    s.finish();
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw ConfigError("config file '" + path.string() + "' does not exist");
  }
  return config_from_json(read_text(path));
}

std::string config_to_json(const ExperimentConfig& c) {
  ordered_json j;
  j["model"] = {{"vocab", c.model.vocab},       {"context", c.model.context},
                {"n_layer", c.model.n_layer},   {"n_head", c.model.n_head},
                {"d_model", c.model.d_model},   {"d_ff", c.model.d_ff},
                {"seed", c.model.seed},         {"max_epochs", c.max_epochs},
                {"checkpoint", c.checkpoint}};
  j["corpus"] = {{"seed", c.corpus_seed},
                 {"train", c.corpus_sizes.train},
                 {"attack", c.corpus_sizes.attack},
                 {"eval", c.corpus_sizes.eval},
                 {"n_vendors", c.n_vendors},
                 {"n_products", c.n_products},
                 {"n_tools", c.n_tools}};
  j["attack"] = {{"surface", agent::to_string(c.surface)},
                 {"trigger", c.trigger},
                 {"target", c.target},
                 {"target_stage", c.target_stage ? static_cast<long>(*c.target_stage) : -1L},
                 {"opt_triggered", c.opt_sizes.triggered},
                 {"opt_clean", c.opt_sizes.clean},
                 {"max_continuation", c.opt_sizes.max_continuation}};
  j["search"] = {{"mode", search::to_string(c.search.mode)},
                 {"n_max", c.search.n_max},
                 {"beta", c.search.beta},
                 {"candidate_size", c.search.candidate_size},
                 {"lambda", c.weights.lambda},
                 {"gamma", c.weights.gamma},
                 {"eta", c.weights.eta},
                 {"layers", c.weights.layers},
                 {"budgets", c.budgets}};
  j["eval"] = {{"seeds", c.seeds},
               {"n_eval", c.n_eval},
               {"record_wall_time", c.record_wall_time},
               {"block_counts", c.block_counts}};
  return j.dump(2) + "\n";
}

AttackSpec resolve_spec(const ExperimentConfig& c, std::uint64_t seed) {
  const auto& v = vocabulary();
  auto rng = make_stream(seed, "attack-spec");
  const auto catalog = agent::Catalog(catalog_seed(c.corpus_seed), c.n_vendors);
  auto pick_product = [&] { return v.products()[uniform_index(rng, c.n_products)]; };
  auto pick_vendor = [&] {
    return catalog.vendors()[uniform_index(rng, catalog.vendors().size())];
  };
  auto pick_tool = [&] { return v.tools()[uniform_index(rng, c.n_tools)]; };
  auto word = [&](const std::string& w) {
    try {
      return v.id(w);
    } catch (const IndexError&) {
      throw ConfigError("unknown token '" + w + "' in attack spec");
    }
  };
  AttackSpec spec;
  spec.surface = c.surface;
  spec.target_stage = c.target_stage.value_or(default_target_stage(c.surface));
  // Draw both parts so an explicit value does not shift the other.
  switch (c.surface) {
    case Surface::kPromptLevel: {
      const int tau = pick_product(), z = pick_vendor();
      spec.trigger = {c.trigger == "auto" ? tau : word(c.trigger)};
      spec.target = {c.target == "auto" ? z : word(c.target)};
      break;
    }
    case Surface::kInternalTrigger: {
      const int tau = pick_vendor();
      spec.trigger = {c.trigger == "auto" ? tau : word(c.trigger)};
      spec.target = c.target == "auto" ? spec.trigger : std::vector<int>{word(c.target)};
      break;
    }
    case Surface::kInvocation: {
      const int tau = pick_product(), z = pick_tool();
      spec.trigger = {c.trigger == "auto" ? tau : word(c.trigger)};
      spec.target = {c.target == "auto" ? z : word(c.target)};
      break;
    }
  }
  spec.validate(c.model.vocab);
  return spec;
}

// ---------------------------------------------------------------------------
// Runs

model::TrainResult train_model(const ExperimentConfig& config,
                               const Corpus& corpus,
                               std::function<void(const std::string&)> log) {
  // The last 5% of training episodes form the held-out slice.
  const std::size_t n_held = std::max<std::size_t>(1, corpus.train.size() / 20);
  const std::span<const CorpusSample> all(corpus.train);
  const auto train = training_sequences(all.first(all.size() - n_held));
  const auto held = training_sequences(all.last(n_held));
  model::TrainOptions o;
  o.max_epochs = config.max_epochs;
  o.stop_token = vocabulary().end;
  o.log = std::move(log);
  return model::train_clean(config.model, train, held, o);
}

namespace {

std::string model_cache_key(const ExperimentConfig& c) {
  ordered_json j;
  j["model"] = {c.model.vocab, c.model.context, c.model.n_layer, c.model.n_head,
                c.model.d_model, c.model.d_ff, c.model.seed, c.max_epochs};
  j["corpus"] = {c.corpus_seed, c.corpus_sizes.train, c.corpus_sizes.attack,
                 c.corpus_sizes.eval, c.n_vendors, c.n_products, c.n_tools};
  const std::string s = j.dump();
  std::vector<int> bytes(s.begin(), s.end());
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(sequence_hash(bytes)));
  return buf;
}

void say(const std::function<void(const std::string&)>& log, const std::string& m) {
  if (log) log(m);
}

}  // namespace

std::filesystem::path clean_model_path(const ExperimentConfig& config,
                                       const std::filesystem::path& cache) {
  if (!config.checkpoint.empty()) return config.checkpoint;
  return cache / ("clean-" + model_cache_key(config) + ".bflp");
}

Lab make_lab(const ExperimentConfig& config,
             const std::filesystem::path& checkpoint_cache,
             std::function<void(const std::string&)> log) {
  config.validate();
  Lab lab;
  lab.config = config;
  lab.log = log;
  lab.corpus = gen_corpus(config.corpus_seed, config.corpus_sizes, config.n_vendors,
                          config.n_products, config.n_tools);
  lab.env = lab.corpus.env(config.model.context);
  const auto path = clean_model_path(config, checkpoint_cache);
  if (std::filesystem::exists(path)) {
    lab.clean = checkpoint::load_checkpoint(path);
    say(log, "loaded clean model " + path.string());
  } else {
    say(log, "training clean model");
    auto r = train_model(config, lab.corpus, log);
    lab.clean = std::move(r.params);
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    checkpoint::save_checkpoint(lab.clean, path);
    say(log, "saved clean model " + path.string());
  }
  auto cfg = lab.clean.config;
  cfg.seed = config.model.seed;
  if (cfg != config.model) {
    throw ConfigError("checkpoint shape does not match the model section");
  }
  const auto tasks = lab.corpus.tasks(lab.corpus.eval);
  const double ok = well_formed_rate(lab.clean, tasks, lab.env);
  if (ok < 0.95) {
    throw TrainingError("clean agent is well formed on only " +
                        std::to_string(100.0 * ok) + "% of eval prompts");
  }
  return lab;
}

model::ParamSet replay(const model::ParamSet& clean,
                       std::span<const search::FlipRecord> history,
                       std::size_t count) {
  model::ParamSet p = clean;
  for (std::size_t i = 0; i < std::min(count, history.size()); ++i) {
    p.flip_bit_inplace(history[i].location);
  }
  return p;
}

namespace {

std::string run_id(const ExperimentConfig& c, std::uint64_t seed,
                   std::size_t n_max, std::size_t blocked) {
  std::string id = agent::to_string(c.surface) + "-" + search::to_string(c.search.mode) +
                   "-n" + std::to_string(n_max) + "-s" + std::to_string(seed);
  if (blocked) id += "-block" + std::to_string(blocked);
  return id;
}

}  // namespace

RunOutput run_attack(const Lab& lab, std::uint64_t seed,
                     const std::vector<quant::BitLocation>& blocked) {
  const auto& c = lab.config;
  const auto t0 = std::chrono::steady_clock::now();
  RunOutput out;
  out.spec = resolve_spec(c, seed);
  say(lab.log, "seed " + std::to_string(seed) + ": " + out.spec.describe());
  const auto pool = lab.corpus.tasks(lab.corpus.attack);
  auto opt = objective::build_opt_set(pool, out.spec, lab.clean, lab.env, c.opt_sizes,
                                      stream_seed(seed, "optset"),
                                      lab.corpus.hashes(lab.corpus.eval));
  auto weights = c.weights;
  if (c.search.mode == search::Mode::kNoAttention) weights.gamma = 0.0;
  const objective::AttackLoss loss(std::move(opt), weights);
  auto scfg = search::apply_block_list(c.search, blocked);
  out.search = search::run_search(lab.clean, loss, scfg);
  say(lab.log, "search done: " + std::to_string(out.search.state.history.size()) +
                   " flips, loss " + std::to_string(out.search.loss_initial) + " -> " +
                   std::to_string(out.search.loss_final));

  const auto tasks = eval_tasks(lab.corpus.eval, out.spec, lab.env, c.n_eval);
  auto fill = [&](MetricsReport& r, const std::vector<Episode>& eps,
                  std::size_t n_max, std::size_t used, double loss_final) {
    r.run_id = run_id(c, seed, n_max, blocked.size());
    r.surface = c.surface;
    r.mode = c.search.mode;
    r.seed = seed;
    r.n_max = n_max;
    r.flips_used = used;
    r.asr = asr(eps, out.spec);
    r.cda = cda(eps);
    if (c.surface == Surface::kInvocation) r.cda_triggered = cda_triggered(eps, out.spec);
    r.n_triggered = r.n_clean = tasks.size();
    r.loss_initial = out.search.loss_initial;
    r.loss_final = loss_final;
    r.blocked = blocked.size();
  };

  const auto& hist = out.search.state.history;
  for (std::size_t b : c.budgets) {
    if (b >= c.search.n_max) continue;
    const std::size_t used = std::min(b, hist.size());
    const auto params = replay(lab.clean, hist, used);
    const auto eps = evaluate_episodes(lab.clean, params, tasks, out.spec, lab.env);
    MetricsReport r;
    fill(r, eps, b, used, used ? hist[used - 1].loss_after : out.search.loss_initial);
    out.budget_reports.push_back(r);
  }
  out.episodes =
      evaluate_episodes(lab.clean, out.search.state.params, tasks, out.spec, lab.env);
  fill(out.report, out.episodes, c.search.n_max, hist.size(), out.search.loss_final);
  if (c.record_wall_time) {
    out.report.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  say(lab.log, "asr " + std::to_string(out.report.asr) + " cda " +
                   std::to_string(out.report.cda));
  return out;
}

std::vector<quant::BitLocation> defense_block_list(
    const Lab& lab, std::uint64_t seed, std::span<const search::FlipRecord> history,
    std::size_t k) {
  std::vector<quant::BitLocation> padding;
  const std::set<quant::BitLocation> distinct = [&] {
    std::set<quant::BitLocation> d;
    for (const auto& r : history) d.insert(r.location);
    return d;
  }();
  if (k > distinct.size()) {
    // Short history or bits flipped twice: pad from the clean-gradient
    // ranking of this attack.
    const auto spec = resolve_spec(lab.config, seed);
    auto opt = objective::build_opt_set(
        lab.corpus.tasks(lab.corpus.attack), spec, lab.clean, lab.env,
        lab.config.opt_sizes, stream_seed(seed, "optset"),
        lab.corpus.hashes(lab.corpus.eval));
    auto weights = lab.config.weights;
    if (lab.config.search.mode == search::Mode::kNoAttention) weights.gamma = 0.0;
    const objective::AttackLoss loss(std::move(opt), weights);
    padding = search::ranked_bits(lab.clean, loss, 2 * k);
  }
  return search::block_list_from_history(history, k, padding);
}

DefenseOutput run_defense(const Lab& lab, std::uint64_t seed,
                          std::span<const std::size_t> block_counts) {
  DefenseOutput d;
  d.undefended = run_attack(lab, seed);
  for (std::size_t k : block_counts) {
    if (k == 0) {
      d.defended.emplace_back(0, d.undefended);
      continue;
    }
    const auto blocked =
        defense_block_list(lab, seed, d.undefended.search.state.history, k);
    d.defended.emplace_back(k, run_attack(lab, seed, blocked));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Artifacts

namespace {

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

}  // namespace

std::string csv_row(const MetricsReport& r) {
  std::ostringstream os;
  os << r.run_id << ',' << agent::to_string(r.surface) << ','
     << search::to_string(r.mode) << ',' << r.seed << ',' << r.n_max << ','
     << r.flips_used << ',' << fmt("%.4f", r.asr) << ',' << fmt("%.4f", r.cda)
     << ',' << fmt("%.10g", r.loss_initial) << ',' << fmt("%.10g", r.loss_final)
     << ',' << fmt("%.3f", r.wall_time_s);
  return os.str();
}

MetricsReport mean_report(std::span<const MetricsReport> rows) {
  if (rows.empty()) throw ContractError("no rows to average");
  MetricsReport m = rows.front();
  const double n = static_cast<double>(rows.size());
  double flips = 0, a = 0, c = 0, li = 0, lf = 0, wt = 0;
  for (const auto& r : rows) {
    flips += static_cast<double>(r.flips_used);
    a += r.asr;
    c += r.cda;
    li += r.loss_initial;
    lf += r.loss_final;
    wt += r.wall_time_s;
  }
  m.asr = a / n;
  m.cda = c / n;
  m.loss_initial = li / n;
  m.loss_final = lf / n;
  m.wall_time_s = wt / n;
  m.flips_used = static_cast<std::size_t>(flips / n + 0.5);
  m.seed = 0;
  m.run_id = agent::to_string(m.surface) + "-" + search::to_string(m.mode) + "-n" +
             std::to_string(m.n_max) + "-mean";
  if (m.blocked) m.run_id += "-block" + std::to_string(m.blocked);
  return m;
}

std::string mean_row(std::span<const MetricsReport> rows) {
  std::string line = csv_row(mean_report(rows));
  // The seed column of the mean row reads "mean"; flips_used keeps a decimal.
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  cells[3] = "mean";
  double flips = 0;
  for (const auto& r : rows) flips += static_cast<double>(r.flips_used);
  cells[5] = fmt("%.1f", flips / static_cast<double>(rows.size()));
  line.clear();
  for (std::size_t i = 0; i < cells.size(); ++i) line += (i ? "," : "") + cells[i];
  return line;
}

std::string results_csv(std::span<const MetricsReport> rows) {
  // Rows sharing (surface, mode, n_max, blocked) form a group; each group is
  // followed by its mean row. Groups keep their first-appearance order.
  std::vector<std::vector<MetricsReport>> groups;
  for (const auto& r : rows) {
    auto it = std::find_if(groups.begin(), groups.end(), [&](const auto& g) {
      const auto& f = g.front();
      return f.surface == r.surface && f.mode == r.mode && f.n_max == r.n_max &&
             f.blocked == r.blocked;
    });
    if (it == groups.end()) {
      groups.push_back({r});
    } else {
      it->push_back(r);
    }
  }
  std::string out = std::string(kCsvHeader) + "\n";
  for (const auto& g : groups) {
    for (const auto& r : g) out += csv_row(r) + "\n";
    out += mean_row(g) + "\n";
  }
  return out;
}

std::vector<MetricsReport> parse_results_csv(std::string_view text) {
  std::vector<MetricsReport> out;
  std::istringstream is{std::string(text)};
  std::string line;
  if (!std::getline(is, line) || line != kCsvHeader) {
    throw FormatError("results CSV header mismatch");
  }
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> c;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) c.push_back(cell);
    if (c.size() != 11) throw FormatError("results CSV row has " + std::to_string(c.size()) + " cells");
    MetricsReport r;
    try {
      r.run_id = c[0];
      r.surface = agent::parse_surface(c[1]);
      r.mode = search::parse_mode(c[2]);
      r.seed = c[3] == "mean" ? 0 : std::stoull(c[3]);
      r.n_max = std::stoull(c[4]);
      r.flips_used = static_cast<std::size_t>(std::stod(c[5]) + 0.5);
      r.asr = std::stod(c[6]);
      r.cda = std::stod(c[7]);
      r.loss_initial = std::stod(c[8]);
      r.loss_final = std::stod(c[9]);
      r.wall_time_s = std::stod(c[10]);
    } catch (const std::logic_error& e) {
      throw FormatError("results CSV: bad cell in '" + line + "'");
    }
    out.push_back(r);
  }
  return out;
}

namespace {

ordered_json transcript_obj(const agent::PipelineTranscript& t) {
  const auto& v = vocabulary();
  ordered_json o;
  o["prompt"] = t.prompt;
  o["prompt_text"] = v.decode(t.prompt);
  ordered_json stages = ordered_json::array();
  for (const auto& s : t.stages) {
    ordered_json so;
    so["stage"] = s.stage;
    so["kind"] = agent::to_string(s.kind);
    so["input"] = s.input;
    so["input_text"] = v.decode(s.input);
    so["output"] = s.output;
    so["output_text"] = v.decode(s.output);
    if (s.tool) so["tool"] = *s.tool;
    if (!s.tool_response.empty()) {
      so["tool_response"] = s.tool_response;
      so["tool_response_text"] = v.decode(s.tool_response);
    }
    so["malformed"] = s.malformed;
    stages.push_back(std::move(so));
  }
  o["stages"] = std::move(stages);
  if (t.final_output) {
    o["final_output"] = *t.final_output;
    o["final_text"] = v.decode(*t.final_output);
  } else {
    o["final_output"] = nullptr;
  }
  o["invoked_tools"] = t.invoked_tools;
  o["malformed"] = t.malformed;
  if (t.malformed) o["malformed_reason"] = t.malformed_reason;
  if (t.injected_position) o["injected_position"] = *t.injected_position;
  return o;
}

}  // namespace

std::string transcript_json(const agent::PipelineTranscript& t) {
  return transcript_obj(t).dump();
}

std::string episodes_jsonl(std::span<const Episode> episodes) {
  std::string out;
  for (const auto& e : episodes) {
    ordered_json o;
    o["surface"] = agent::to_string(e.surface);
    o["triggered"] = e.triggered;
    o["clean"] = transcript_obj(e.clean);
    o["attacked"] = transcript_obj(e.attacked);
    out += o.dump() + "\n";
  }
  return out;
}

std::string metrics_json(const MetricsReport& r) {
  ordered_json o;
  o["run_id"] = r.run_id;
  o["surface"] = agent::to_string(r.surface);
  o["mode"] = search::to_string(r.mode);
  o["seed"] = r.seed;
  o["n_max"] = r.n_max;
  o["flips_used"] = r.flips_used;
  o["asr"] = r.asr;
  o["cda"] = r.cda;
  if (r.cda_triggered) o["cda_triggered"] = *r.cda_triggered;
  o["n_triggered"] = r.n_triggered;
  o["n_clean"] = r.n_clean;
  o["loss_initial"] = r.loss_initial;
  o["loss_final"] = r.loss_final;
  o["wall_time_s"] = r.wall_time_s;
  o["blocked"] = r.blocked;
  return o.dump(2) + "\n";
}

MetricsReport metrics_from_json(std::string_view text) {
  MetricsReport r;
  try {
    const auto o = nlohmann::json::parse(text);
    r.run_id = o.at("run_id").get<std::string>();
    r.surface = agent::parse_surface(o.at("surface").get<std::string>());
    r.mode = search::parse_mode(o.at("mode").get<std::string>());
    r.seed = o.at("seed").get<std::uint64_t>();
    r.n_max = o.at("n_max").get<std::size_t>();
    r.flips_used = o.at("flips_used").get<std::size_t>();
    r.asr = o.at("asr").get<double>();
    r.cda = o.at("cda").get<double>();
    if (o.contains("cda_triggered")) r.cda_triggered = o["cda_triggered"].get<double>();
    r.n_triggered = o.at("n_triggered").get<std::size_t>();
    r.n_clean = o.at("n_clean").get<std::size_t>();
    r.loss_initial = o.at("loss_initial").get<double>();
    r.loss_final = o.at("loss_final").get<double>();
    r.wall_time_s = o.at("wall_time_s").get<double>();
    r.blocked = o.at("blocked").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("metrics: ") + e.what());
  }
  return r;
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_run(const RunOutput& run, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text(dir / "history.json", search::history_to_json(run.search.state.history));
  write_text(dir / "transcripts.jsonl", episodes_jsonl(run.episodes));
  write_text(dir / "metrics.json", metrics_json(run.report));
  checkpoint::save_checkpoint(run.search.state.params, dir / "attacked.bflp");
}

}  // namespace bflab::harness
