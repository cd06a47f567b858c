/*
 * Copyright 2026 The kvlab Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "kvlab/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "kvlab/errors.hpp"
#include "kvlab/metrics.hpp"
#include "kvlab/plot.hpp"
#include "kvlab/scoring.hpp"

namespace kvlab {

namespace {

namespace fs = std::filesystem;

const std::set<std::string> kSections = {"model", "lookahead", "draft", "data", "train",
                                         "evict", "eval",      "cost",  "artifacts"};

void reject_unused(const KeyValueConfig& kv, const std::string& section) {
  if (const auto unused = kv.unused_keys(); !unused.empty()) {
    throw ConfigError("unknown config key '" + section + "." + unused.front() + "'");
  }
}

EvictionConfig parse_evict(const KeyValueConfig& kv) {
  EvictionConfig e;
  e.window = kv.get_size("window", e.window);
  e.pooling_kernel = kv.get_size("pooling_kernel", e.pooling_kernel);
  e.n_sink = kv.get_size("n_sink", e.n_sink);
  e.draft_len = kv.get_size("draft_len", e.draft_len);
  e.pyramid_beta = kv.get_double("pyramid_beta", e.pyramid_beta);
  e.combine_suffix = kv.get_bool("combine_suffix", e.combine_suffix);
  e.rng_seed = kv.get_u64("rng_seed", e.rng_seed);
  reject_unused(kv, "evict");
  if (e.pooling_kernel % 2 == 0) throw ConfigError("evict.pooling_kernel must be odd");
  if (e.draft_len == 0) throw ConfigError("evict.draft_len must be >= 1");
  return e;
}

EvalSpec parse_eval(const KeyValueConfig& kv) {
  EvalSpec e;
  for (const auto& p : kv.get_list("policies")) e.policies.push_back(parse_policy(p));
  e.budgets = kv.get_size_list("budgets", e.budgets);
  e.recall_ks = kv.get_size_list("recall_ks", e.recall_ks);
  e.max_samples = kv.get_size("max_samples", e.max_samples);
  e.dump_scores = kv.get_bool("dump_scores", e.dump_scores);
  reject_unused(kv, "eval");
  if (e.budgets.empty()) throw ConfigError("eval.budgets must not be empty");
  for (const auto b : e.budgets) {
    if (b == 0) throw ConfigError("eval.budgets entries must be >= 1");
  }
  for (const auto k : e.recall_ks) {
    if (k == 0) throw ConfigError("eval.recall_ks entries must be >= 1");
  }
  return e;
}

ArchSpec preset_arch(const std::string& name) {
  if (name == "llama31_8b") return ArchSpec::llama31_8b();
  if (name == "llama32_1b") return ArchSpec::llama32_1b();
  throw ConfigError("unknown arch preset '" + name + "'");
}

CostSpec parse_cost(const KeyValueConfig& kv) {
  CostSpec c;
  c.arch = preset_arch(kv.get_string("preset", "llama31_8b"));
  c.params.draft = preset_arch(kv.get_string("draft_preset", "llama32_1b"));
  c.context_len = kv.get_size("context_len", c.context_len);
  c.params.budget = kv.get_size("budget", c.params.budget);
  c.params.n_lookahead = kv.get_size("n_lookahead", c.params.n_lookahead);
  c.params.lora_rank = kv.get_size("lora_rank", c.params.lora_rank);
  c.params.window = kv.get_size("window", c.params.window);
  c.params.draft_len = kv.get_size("draft_len", c.params.draft_len);
  c.hw.peak_flops = kv.get_double("peak_flops", c.hw.peak_flops);
  c.hw.peak_mem_bw = kv.get_double("peak_mem_bw", c.hw.peak_mem_bw);
  c.hw.flops_efficiency = kv.get_double("flops_efficiency", c.hw.flops_efficiency);
  c.hw.mem_efficiency = kv.get_double("mem_efficiency", c.hw.mem_efficiency);
  reject_unused(kv, "cost");
  c.hw.validate();
  if (c.context_len == 0) throw ConfigError("cost.context_len must be >= 1");
  return c;
}

Artifacts parse_artifacts(const KeyValueConfig& kv) {
  Artifacts a;
  a.model_weights = kv.get_string("model_weights", "");
  a.draft_weights = kv.get_string("draft_weights", "");
  a.params = kv.get_string("params", "");
  a.train_corpus = kv.get_string("train_corpus", "");
  a.eval_corpus = kv.get_string("eval_corpus", "");
  reject_unused(kv, "artifacts");
  return a;
}

void require_file(const std::string& path, const std::string& key) {
  if (path.empty()) throw ConfigError("artifacts." + key + " is required");
  if (!fs::is_regular_file(path)) throw ConfigError("artifacts." + key + ": no such file '" + path + "'");
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

template <typename T>
std::string params_checksum(const LookaheadParams<T>& la) {
  std::string bytes;
  for (const auto& [name, t] : la.named_parameters()) {
    bytes += name;
    const auto d = t.data();
    bytes.append(reinterpret_cast<const char*>(d.data()), d.size_bytes());
  }
  return fnv1a_hex(bytes);
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

std::vector<int> strip_end(std::vector<int> y) {
  if (!y.empty() && y.back() == kEndToken) y.pop_back();
  return y;
}

struct Accumulator {
  std::size_t samples = 0;
  double retained_recall = 0.0;
  std::map<std::size_t, std::pair<double, std::size_t>> recall;
  double tau_sum = 0.0;
  std::size_t tau_count = 0;
  double attn = 0.0;
  double correct = 0.0;
};

std::string format_cell(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return hex64(h);
}

ExperimentConfig ExperimentConfig::parse(const KeyValueConfig& kv) {
  std::map<std::string, KeyValueConfig> sec;
  for (const auto& name : kSections) sec[name];
  ExperimentConfig c;
  for (const auto& [key, value] : kv.entries()) {
    const auto dot = key.find('.');
    if (dot == std::string::npos) throw ConfigError("config key '" + key + "' lacks a section prefix");
    const std::string name = key.substr(0, dot);
    if (!kSections.count(name)) throw ConfigError("unknown config section '" + name + "' in key '" + key + "'");
    sec[name].set(key.substr(dot + 1), value);
    if (name != "artifacts") c.echo[key] = value;
  }
  c.model = ModelConfig::from_config(sec["model"]);
  c.lookahead = LookaheadConfig::from_config(sec["lookahead"]);
  if (!sec["draft"].entries().empty()) {
    c.draft = ModelConfig::from_config(sec["draft"]);
    if (c.draft->vocab_size != c.model.vocab_size) throw ConfigError("draft.vocab_size must equal model.vocab_size");
  }
  auto& data = sec["data"];
  c.origin = parse_origin(data.get_string("origin", to_string(c.origin)));
  c.test_samples = data.get_size("test_samples", c.test_samples);
  c.gen.max_new_tokens = data.get_size("max_new_tokens", c.gen.max_new_tokens);
  const bool explicit_test_seed = data.has("test_seed");
  const std::uint64_t test_seed = data.get_u64("test_seed", 0);
  c.data = CorpusSpec::from_config(data);
  c.test_seed = explicit_test_seed ? test_seed : c.data.rng_seed + 1;
  if (c.test_samples == 0) throw ConfigError("data.test_samples must be >= 1");
  if (c.data.vocab_size > c.model.vocab_size) {
    throw ConfigError("data.vocab_size exceeds model.vocab_size");
  }
  c.train = TrainConfig::from_config(sec["train"]);
  c.evict = parse_evict(sec["evict"]);
  c.eval = parse_eval(sec["eval"]);
  c.cost = parse_cost(sec["cost"]);
  c.artifacts = parse_artifacts(sec["artifacts"]);
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) { return parse(KeyValueConfig::load(path)); }

void ExperimentConfig::apply_seed(std::uint64_t seed) {
  model.rng_seed = seed;
  lookahead.rng_seed = seed + 1;
  data.rng_seed = seed + 2;
  test_seed = seed + 3;
  train.rng_seed = seed + 4;
  evict.rng_seed = seed + 5;
  gen.rng_seed = seed + 6;
  if (draft) draft->rng_seed = seed + 7;
}

std::optional<CostMethod> cost_method_for(Policy p) {
  switch (p) {
    case Policy::Lookahead: return CostMethod::Lookahead;
    case Policy::SnapKV:
    case Policy::PyramidKV: return CostMethod::SnapKV;
    case Policy::LAQ: return CostMethod::LAQ;
    case Policy::SpecKV: return CostMethod::SpecKV;
    default: return std::nullopt;
  }
}

template <typename T>
Model<T> load_or_build_model(const ExperimentConfig& cfg) {
  if (cfg.artifacts.model_weights.empty()) return Model<T>::build(cfg.model);
  require_file(cfg.artifacts.model_weights, "model_weights");
  return Model<T>::load(cfg.model, cfg.artifacts.model_weights);
}

template <typename T>
std::optional<Model<T>> load_or_build_draft(const ExperimentConfig& cfg) {
  if (!cfg.draft) return std::nullopt;
  if (cfg.artifacts.draft_weights.empty()) return Model<T>::build(*cfg.draft);
  require_file(cfg.artifacts.draft_weights, "draft_weights");
  return Model<T>::load(*cfg.draft, cfg.artifacts.draft_weights);
}

double score_recall(std::span<const double> gt, std::span<const double> est, std::size_t k) {
  if (est.size() > gt.size()) throw DimensionError("score_recall: estimate wider than ground truth");
  return recall_at_k(gt.first(est.size()), est, k);
}

template <typename T>
MetricsReport run_experiment(const ExperimentConfig& cfg, const std::string& precision, std::uint64_t seed,
                             const std::string& score_dir) {
  const auto& ev = cfg.eval;
  if (ev.policies.empty()) throw ConfigError("eval.policies must name at least one policy");
  require_file(cfg.artifacts.eval_corpus, "eval_corpus");
  const bool needs_la = std::count(ev.policies.begin(), ev.policies.end(), Policy::Lookahead) > 0;
  const bool needs_draft = std::count(ev.policies.begin(), ev.policies.end(), Policy::SpecKV) > 0;

  const Model<T> model = load_or_build_model<T>(cfg);
  const auto& mc = model.config();
  std::optional<LookaheadParams<T>> la;
  if (needs_la) {
    require_file(cfg.artifacts.params, "params");
    la = LookaheadParams<T>::load(mc, cfg.lookahead, cfg.artifacts.params);
  }
  const auto draft = load_or_build_draft<T>(cfg);
  if (needs_draft && !draft) throw ConfigError("speckv needs a [draft] model section");

  auto corpus = load_corpus(cfg.artifacts.eval_corpus);
  if (ev.max_samples > 0 && corpus.size() > ev.max_samples) corpus.resize(ev.max_samples);
  if (corpus.empty()) throw ConfigError("evaluation corpus is empty");

  const auto ks = ev.recall_ks.empty() ? ev.budgets : ev.recall_ks;
  const bool dump = ev.dump_scores && !score_dir.empty();
  if (dump) fs::create_directories(score_dir);

  PolicyInputs<T> inputs;
  if (la) inputs.lookahead = &*la;
  if (draft) inputs.draft_model = &*draft;

  std::vector<Accumulator> acc(ev.policies.size() * ev.budgets.size());
  for (std::size_t s = 0; s < corpus.size(); ++s) {
    const auto& sample = corpus[s];
    const std::span<const int> X(sample.X);
    const std::span<const int> Y(sample.Y);
    if (Y.empty()) throw InputError("sample " + std::to_string(s) + " has an empty response");
    const std::size_t n_in = X.size();
    const auto gt = gqa_mean_reduce(gt_importance(model, X, Y), mc.n_heads, mc.n_kv_heads);
    const auto probes = response_probes(model, X, Y);
    PrefillOptions popts;
    popts.compute_logits = false;
    const auto prompt_cache = forward_prefill<T>(model, nullptr, X, popts).cache;
    const auto answer = strip_end(sample.Y);
    if (dump) write_file(fs::path(score_dir) / ("gt_s" + std::to_string(s) + ".jsonl"), scores_to_jsonl(gt));
    inputs.response = Y;

    for (std::size_t p = 0; p < ev.policies.size(); ++p) {
      for (std::size_t b = 0; b < ev.budgets.size(); ++b) {
        auto& a = acc[p * ev.budgets.size() + b];
        EvictionConfig ecfg = cfg.evict;
        ecfg.budget = ev.budgets[b];
        auto res = evict<T>(ev.policies[p], model, X, ecfg, inputs);
        ++a.samples;

        const std::size_t k_keep = std::min(ev.budgets[b], n_in);
        double rr = 0.0;
        for (std::size_t l = 0; l < mc.n_layers; ++l) {
          for (std::size_t g = 0; g < mc.n_kv_heads; ++g) rr += retained_recall(gt.row(l, g), res.retained.at(l, g), k_keep);
        }
        a.retained_recall += rr / static_cast<double>(mc.n_layers * mc.n_kv_heads);

        if (!res.scores.values.empty()) {
          if (dump) {
            write_file(fs::path(score_dir) / (to_string(ev.policies[p]) + "_b" + std::to_string(ev.budgets[b]) + "_s" +
                                              std::to_string(s) + ".jsonl"),
                       scores_to_jsonl(res.scores));
          }
          for (const auto k : ks) {
            if (k > res.scores.n_cols) continue;
            double r = 0.0;
            for (std::size_t l = 0; l < mc.n_layers; ++l) {
              for (std::size_t g = 0; g < mc.n_kv_heads; ++g) r += score_recall(gt.row(l, g), res.scores.row(l, g), k);
            }
            auto& slot = a.recall[k];
            slot.first += r / static_cast<double>(mc.n_layers * mc.n_kv_heads);
            ++slot.second;
          }
          for (std::size_t l = 0; l < mc.n_layers; ++l) {
            for (std::size_t g = 0; g < mc.n_kv_heads; ++g) {
              const auto est = res.scores.row(l, g);
              if (est.size() < 2) continue;
              try {
                a.tau_sum += kendall_tau(gt.row(l, g).first(est.size()), est);
                ++a.tau_count;
              } catch (const ContractError&) {
                // constant ranking: tau undefined for this head
              }
            }
          }
        }

        a.attn += attn_output_error(model, prompt_cache, res.retained, probes);
        GenSpec gen;
        gen.max_new_tokens = answer.size() + 1;
        const auto out = strip_end(continue_generation(model, res.cache, res.last_logits,
                                                       static_cast<std::int64_t>(n_in), gen));
        if (out == answer) a.correct += 1.0;
      }
    }
  }

  MetricsReport report;
  report.precision = precision;
  report.seed = seed;
  report.config = cfg.echo;
  report.model_checksum = hex64(model.checksum());
  report.params_checksum = la ? params_checksum(*la) : "";
  report.corpus_checksum = fnv1a_hex(corpus_to_jsonl(corpus));
  report.n_samples = corpus.size();
  for (std::size_t p = 0; p < ev.policies.size(); ++p) {
    std::optional<double> overhead;
    if (const auto m = cost_method_for(ev.policies[p])) {
      overhead = method_overhead(*m, cfg.cost.arch, cfg.cost.hw, cfg.cost.context_len, cfg.cost.params).overhead_ms;
    }
    for (std::size_t b = 0; b < ev.budgets.size(); ++b) {
      const auto& a = acc[p * ev.budgets.size() + b];
      const double n = static_cast<double>(a.samples);
      PolicyMetrics m;
      m.policy = to_string(ev.policies[p]);
      m.budget = ev.budgets[b];
      m.n_samples = a.samples;
      m.retained_recall = a.retained_recall / n;
      for (const auto& [k, v] : a.recall) m.recall_at_k[k] = v.first / static_cast<double>(v.second);
      if (a.tau_count > 0) m.kendall_tau = a.tau_sum / static_cast<double>(a.tau_count);
      m.attn_output_l2 = a.attn / n;
      m.task_accuracy = a.correct / n;
      m.overhead_ms = overhead;
      report.results.push_back(std::move(m));
    }
  }
  return report;
}

std::string report_to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["schema_version"] = r.schema_version;
  j["precision"] = r.precision;
  j["seed"] = r.seed;
  j["model_checksum"] = r.model_checksum;
  j["params_checksum"] = r.params_checksum;
  j["corpus_checksum"] = r.corpus_checksum;
  j["n_samples"] = r.n_samples;
  nlohmann::ordered_json cfg = nlohmann::ordered_json::object();
  for (const auto& [k, v] : r.config) cfg[k] = v;
  j["config"] = cfg;
  auto results = nlohmann::ordered_json::array();
  for (const auto& m : r.results) {
    nlohmann::ordered_json e;
    e["policy"] = m.policy;
    e["budget"] = m.budget;
    e["n_samples"] = m.n_samples;
    e["retained_recall"] = m.retained_recall;
    nlohmann::ordered_json rec = nlohmann::ordered_json::object();
    for (const auto& [k, v] : m.recall_at_k) rec[std::to_string(k)] = v;
    e["recall_at_k"] = rec;
    e["kendall_tau"] = m.kendall_tau ? nlohmann::ordered_json(*m.kendall_tau) : nlohmann::ordered_json(nullptr);
    e["attn_output_l2"] = m.attn_output_l2;
    e["task_accuracy"] = m.task_accuracy;
    e["overhead_ms"] = m.overhead_ms ? nlohmann::ordered_json(*m.overhead_ms) : nlohmann::ordered_json(nullptr);
    results.push_back(std::move(e));
  }
  j["results"] = results;
  return j.dump(2) + "\n";
}

MetricsReport report_from_json(const std::string& text) {
  MetricsReport r;
  try {
    const auto j = nlohmann::json::parse(text);
    r.schema_version = j.at("schema_version").get<int>();
    if (r.schema_version != kReportSchemaVersion) {
      throw InputError("report schema_version " + std::to_string(r.schema_version) + " is not supported");
    }
    r.precision = j.at("precision").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.model_checksum = j.at("model_checksum").get<std::string>();
    r.params_checksum = j.at("params_checksum").get<std::string>();
    r.corpus_checksum = j.at("corpus_checksum").get<std::string>();
    r.n_samples = j.at("n_samples").get<std::size_t>();
    for (const auto& [k, v] : j.at("config").items()) r.config[k] = v.get<std::string>();
    for (const auto& e : j.at("results")) {
      PolicyMetrics m;
      m.policy = e.at("policy").get<std::string>();
      m.budget = e.at("budget").get<std::size_t>();
      m.n_samples = e.at("n_samples").get<std::size_t>();
      m.retained_recall = e.at("retained_recall").get<double>();
      for (const auto& [k, v] : e.at("recall_at_k").items()) m.recall_at_k[std::stoul(k)] = v.get<double>();
      if (!e.at("kendall_tau").is_null()) m.kendall_tau = e.at("kendall_tau").get<double>();
      m.attn_output_l2 = e.at("attn_output_l2").get<double>();
      m.task_accuracy = e.at("task_accuracy").get<double>();
      if (!e.at("overhead_ms").is_null()) m.overhead_ms = e.at("overhead_ms").get<double>();
      r.results.push_back(std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("report: ") + e.what());
  }
  return r;
}

std::string report_to_csv(const MetricsReport& r) {
  std::set<std::size_t> ks;
  for (const auto& m : r.results) {
    for (const auto& [k, v] : m.recall_at_k) ks.insert(k);
  }
  std::string out = "policy,budget,n_samples,retained_recall";
  for (const auto k : ks) out += ",recall_at_" + std::to_string(k);
  out += ",kendall_tau,attn_output_l2,task_accuracy,overhead_ms\n";
  for (const auto& m : r.results) {
    out += m.policy + "," + std::to_string(m.budget) + "," + std::to_string(m.n_samples) + "," +
           format_cell(m.retained_recall);
    for (const auto k : ks) {
      const auto it = m.recall_at_k.find(k);
      out += "," + (it == m.recall_at_k.end() ? std::string() : format_cell(it->second));
    }
    out += "," + (m.kendall_tau ? format_cell(*m.kendall_tau) : std::string());
    out += "," + format_cell(m.attn_output_l2) + "," + format_cell(m.task_accuracy);
    out += "," + (m.overhead_ms ? format_cell(*m.overhead_ms) : std::string()) + "\n";
  }
  return out;
}

std::map<std::string, std::string> report_plots(const MetricsReport& r) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const PolicyMetrics*>> by_policy;
  for (const auto& m : r.results) {
    if (!by_policy.count(m.policy)) order.push_back(m.policy);
    by_policy[m.policy].push_back(&m);
  }
  auto budget_series = [&](auto field) {
    std::vector<PlotSeries> series;
    for (const auto& p : order) {
      PlotSeries s{p, {}, {}};
      for (const auto* m : by_policy[p]) {
        s.x.push_back(static_cast<double>(m->budget));
        s.y.push_back(field(*m));
      }
      series.push_back(std::move(s));
    }
    return series;
  };
  std::map<std::string, std::string> out;
  PlotSpec spec;
  spec.x_label = "budget (entries per kv head)";
  spec.log_x = true;
  spec.title = "Recall of ground-truth top-k vs budget";
  spec.y_label = "retained recall";
  out["recall_vs_budget.svg"] = render_svg(spec, budget_series([](const PolicyMetrics& m) { return m.retained_recall; }));
  spec.title = "Task accuracy vs budget";
  spec.y_label = "exact-match accuracy";
  out["accuracy_vs_budget.svg"] = render_svg(spec, budget_series([](const PolicyMetrics& m) { return m.task_accuracy; }));
  spec.title = "Attention output error vs budget";
  spec.y_label = "mean L2 error";
  out["attn_error_vs_budget.svg"] =
      render_svg(spec, budget_series([](const PolicyMetrics& m) { return m.attn_output_l2; }));

  std::vector<PlotSeries> trade;
  for (const auto& p : order) {
    const auto& rows = by_policy[p];
    if (!rows.front()->overhead_ms) continue;
    double mean = 0.0;
    for (const auto* m : rows) mean += m->retained_recall;
    trade.push_back({p, {*rows.front()->overhead_ms}, {mean / static_cast<double>(rows.size())}});
  }
  PlotSpec ts;
  ts.title = "Recall vs modeled TTFT overhead";
  ts.x_label = "TTFT overhead (ms)";
  ts.y_label = "mean retained recall";
  ts.log_x = true;
  ts.scatter = true;
  out["tradeoff.svg"] = render_svg(ts, trade);
  return out;
}

void write_report_dir(const MetricsReport& report, const std::string& dir) {
  fs::create_directories(dir);
  write_file(fs::path(dir) / "report.json", report_to_json(report));
  write_file(fs::path(dir) / "results.csv", report_to_csv(report));
  for (const auto& [name, svg] : report_plots(report)) write_file(fs::path(dir) / name, svg);
}

#define KVLAB_INSTANTIATE(T)                                                                           \
  template Model<T> load_or_build_model<T>(const ExperimentConfig&);                                  \
  template std::optional<Model<T>> load_or_build_draft<T>(const ExperimentConfig&);                   \
  template MetricsReport run_experiment<T>(const ExperimentConfig&, const std::string&, std::uint64_t, \
                                           const std::string&);

KVLAB_INSTANTIATE(float)
KVLAB_INSTANTIATE(double)

#undef KVLAB_INSTANTIATE

}  // namespace kvlab
