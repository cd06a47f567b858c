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

#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "kvlab/costmodel.hpp"
#include "kvlab/errors.hpp"
#include "kvlab/eviction.hpp"
#include "kvlab/experiment.hpp"
#include "kvlab/plot.hpp"
#include "kvlab/scoring.hpp"
#include "kvlab/training.hpp"

namespace kvlab::cli {

namespace {

namespace fs = std::filesystem;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string precision = "f32";
};

void write_text(const std::string& path, const std::string& text) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path);
  out << text;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

ExperimentConfig load_experiment(const Globals& g) {
  if (g.config.empty()) throw ConfigError("--config is required for this command");
  auto cfg = ExperimentConfig::load(g.config);
  if (g.seed) cfg.apply_seed(*g.seed);
  return cfg;
}

template <typename F>
void with_precision(const std::string& precision, F&& f) {
  if (precision == "f32") {
    f(float{});
  } else if (precision == "f64") {
    f(double{});
  } else {
    throw ConfigError("--precision must be f32 or f64");
  }
}

// gen-data ------------------------------------------------------------------

struct GenDataArgs {
  std::string split = "train";
  std::string out;
};

void cmd_gen_data(const Globals& g, const GenDataArgs& a, std::ostream& out) {
  auto cfg = load_experiment(g);
  CorpusSpec spec = cfg.data;
  if (a.split == "test") {
    spec.n_samples = cfg.test_samples;
    spec.rng_seed = cfg.test_seed;
  } else if (a.split != "train") {
    throw ConfigError("--split must be train or test");
  }
  std::vector<TrainSample> samples;
  with_precision(g.precision, [&](auto tag) {
    using T = decltype(tag);
    if (cfg.origin == Origin::ModelGenerated) {
      const auto model = load_or_build_model<T>(cfg);
      samples = make_training_pairs(model, spec, cfg.gen, cfg.origin);
    } else {
      samples = build_corpus(spec);
    }
  });
  save_corpus(a.out, samples);
  out << "wrote " << samples.size() << " " << a.split << " samples (" << to_string(cfg.origin) << ") to " << a.out
      << "\n";
}

// train ---------------------------------------------------------------------

struct TrainArgs {
  std::string corpus;
  std::string out;
  std::string trace;
  std::size_t log_every = 0;
};

void cmd_train(const Globals& g, const TrainArgs& a, std::ostream& out) {
  auto cfg = load_experiment(g);
  const std::string corpus_path = a.corpus.empty() ? cfg.artifacts.train_corpus : a.corpus;
  if (corpus_path.empty()) throw ConfigError("train needs --corpus or artifacts.train_corpus");
  const auto corpus = load_corpus(corpus_path);
  with_precision(g.precision, [&](auto tag) {
    using T = decltype(tag);
    const auto model = load_or_build_model<T>(cfg);
    auto la = LookaheadParams<T>::init(model.config(), cfg.lookahead);
    const auto result = train_loop(model, la, corpus, cfg.train, [&](const TrainRecord& r) {
      if (a.log_every > 0 && (r.step % a.log_every == 0 || r.step + 1 == cfg.train.steps)) {
        out << "step " << r.step << " lr " << r.lr << " loss " << r.loss << "\n";
      }
    });
    la.save(a.out);
    if (!a.trace.empty()) write_text(a.trace, trace_to_csv(result.trace));
    out << "trained " << la.n_trainable() << " parameters for " << result.trace.size() << " steps";
    if (!result.trace.empty()) out << ", final loss " << result.trace.back().loss;
    out << "; saved to " << a.out << "\n";
  });
}

// evict ---------------------------------------------------------------------

struct EvictArgs {
  std::string corpus;
  std::string params;
  std::size_t sample = 0;
  std::string policy = "snapkv";
  std::size_t budget = 16;
  std::string out;
};

void cmd_evict(const Globals& g, const EvictArgs& a, std::ostream& out) {
  auto cfg = load_experiment(g);
  const std::string corpus_path = a.corpus.empty() ? cfg.artifacts.eval_corpus : a.corpus;
  if (corpus_path.empty()) throw ConfigError("evict needs --corpus or artifacts.eval_corpus");
  const auto corpus = load_corpus(corpus_path);
  if (a.sample >= corpus.size()) {
    throw InputError("--sample " + std::to_string(a.sample) + " is out of range for " +
                     std::to_string(corpus.size()) + " samples");
  }
  const Policy policy = parse_policy(a.policy);
  const auto& sample = corpus[a.sample];
  with_precision(g.precision, [&](auto tag) {
    using T = decltype(tag);
    const auto model = load_or_build_model<T>(cfg);
    std::optional<LookaheadParams<T>> la;
    const auto draft = load_or_build_draft<T>(cfg);
    PolicyInputs<T> inputs;
    if (policy == Policy::Lookahead) {
      const std::string path = a.params.empty() ? cfg.artifacts.params : a.params;
      if (path.empty()) throw ConfigError("lookahead eviction needs --params or artifacts.params");
      la = LookaheadParams<T>::load(model.config(), cfg.lookahead, path);
      inputs.lookahead = &*la;
    }
    if (draft) inputs.draft_model = &*draft;
    inputs.response = sample.Y;
    EvictionConfig ecfg = cfg.evict;
    ecfg.budget = a.budget;
    const auto res = evict<T>(policy, model, sample.X, ecfg, inputs);
    nlohmann::ordered_json j;
    j["policy"] = to_string(policy);
    j["budget"] = a.budget;
    j["sample"] = a.sample;
    j["n_in"] = sample.X.size();
    j["retained"] = nlohmann::ordered_json::parse(retained_to_json(res.retained));
    if (!res.draft.empty()) j["draft"] = res.draft;
    const std::string text = j.dump(2) + "\n";
    if (a.out.empty()) {
      out << text;
    } else {
      write_text(a.out, text);
      out << "wrote retained set (" << res.cache.total_entries() << " cache entries) to " << a.out << "\n";
    }
  });
}

// eval ----------------------------------------------------------------------

struct EvalArgs {
  std::string corpus;
  std::string params;
  std::string out_dir;
};

void print_summary(const MetricsReport& r, std::ostream& out) {
  out << std::left << std::setw(12) << "policy" << std::setw(8) << "budget" << std::setw(12) << "recall"
      << std::setw(12) << "tau" << std::setw(12) << "attn_l2" << std::setw(10) << "accuracy"
      << "overhead_ms\n";
  out << std::fixed << std::setprecision(4);
  for (const auto& m : r.results) {
    out << std::setw(12) << m.policy << std::setw(8) << m.budget << std::setw(12) << m.retained_recall;
    if (m.kendall_tau) {
      out << std::setw(12) << *m.kendall_tau;
    } else {
      out << std::setw(12) << "-";
    }
    out << std::setw(12) << m.attn_output_l2 << std::setw(10) << m.task_accuracy;
    if (m.overhead_ms) {
      out << *m.overhead_ms;
    } else {
      out << "-";
    }
    out << "\n";
  }
  out << std::defaultfloat;
}

void cmd_eval(const Globals& g, const EvalArgs& a, std::ostream& out) {
  auto cfg = load_experiment(g);
  if (!a.corpus.empty()) cfg.artifacts.eval_corpus = a.corpus;
  if (!a.params.empty()) cfg.artifacts.params = a.params;
  MetricsReport report;
  const std::uint64_t seed = g.seed.value_or(cfg.model.rng_seed);
  const std::string score_dir = (fs::path(a.out_dir) / "scores").string();
  with_precision(g.precision,
                 [&](auto tag) { report = run_experiment<decltype(tag)>(cfg, g.precision, seed, score_dir); });
  write_report_dir(report, a.out_dir);
  print_summary(report, out);
  out << "report written to " << a.out_dir << "\n";
}

// cost ----------------------------------------------------------------------

struct CostArgs {
  std::string arch;
  std::string hw;
  std::string methods = "lookahead,snapkv,speckv,laq";
  std::string lengths = "4096,8192,16384,32768";
  std::size_t budget = 128;
  std::size_t n_lookahead = 32;
  std::size_t draft_len = 32;
  std::string out;
  std::string json;
  std::string svg;
};

void cmd_cost(const CostArgs& a, std::ostream& out) {
  const ArchSpec arch = a.arch.empty() ? ArchSpec::llama31_8b() : ArchSpec::from_config(KeyValueConfig::load(a.arch));
  const HardwareProfile hw = a.hw.empty() ? HardwareProfile{} : HardwareProfile::from_config(KeyValueConfig::load(a.hw));
  std::vector<CostMethod> methods;
  for (const auto& m : split_list(a.methods)) methods.push_back(parse_cost_method(m));
  if (methods.empty()) throw ConfigError("--methods must name at least one method");
  std::vector<std::size_t> lengths;
  for (const auto& s : split_list(a.lengths)) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(s, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != s.size() || v == 0) throw ConfigError("--lengths: bad context length '" + s + "'");
    lengths.push_back(static_cast<std::size_t>(v));
  }
  MethodParams params;
  params.budget = a.budget;
  params.n_lookahead = a.n_lookahead;
  params.draft_len = a.draft_len;
  const auto reports = cost_grid(arch, hw, methods, lengths, params);
  const std::string csv = emit_cost_csv(reports);
  if (a.out.empty()) {
    out << csv;
  } else {
    write_text(a.out, csv);
    out << "wrote " << reports.size() << " rows to " << a.out << "\n";
  }
  if (!a.json.empty()) write_text(a.json, emit_cost_json(reports));
  if (!a.svg.empty()) {
    std::vector<PlotSeries> series;
    for (const auto m : methods) {
      if (m == CostMethod::Forward) continue;
      PlotSeries s{to_string(m), {}, {}};
      for (const auto& r : reports) {
        if (r.method != s.name) continue;
        s.x.push_back(static_cast<double>(r.context_len));
        s.y.push_back(r.overhead_ms);
      }
      series.push_back(std::move(s));
    }
    PlotSpec spec;
    spec.title = "TTFT overhead vs context length (" + arch.name + ")";
    spec.x_label = "context length (tokens)";
    spec.y_label = "TTFT overhead (ms)";
    spec.log_x = true;
    spec.log_y = true;
    write_text(a.svg, render_svg(spec, series));
  }
}

// report --------------------------------------------------------------------

struct ReportArgs {
  std::string report;
  std::string out_dir;
};

void cmd_report(const ReportArgs& a, std::ostream& out) {
  const auto report = report_from_json(read_text(a.report));
  write_report_dir(report, a.out_dir);
  out << "schema_version " << report.schema_version << ", " << report.n_samples << " samples, precision "
      << report.precision << ", seed " << report.seed << "\n";
  print_summary(report, out);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"kvlab: prompt KV-cache eviction laboratory", "kvlab"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config, "Experiment config file (section.key = value)");
  auto* seed_opt = app.add_option("--seed", seed, "Base seed overriding every seed in the config");
  app.add_option("--precision", g.precision, "Arithmetic precision")->check(CLI::IsMember({"f32", "f64"}));

  GenDataArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "Generate a synthetic corpus as JSONL");
  c_gen->add_option("--split", gen.split, "train or test")->check(CLI::IsMember({"train", "test"}));
  c_gen->add_option("--out", gen.out, "Output JSONL path")->required();

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Fit lookahead parameters");
  c_train->add_option("--corpus", train.corpus, "Training corpus (default artifacts.train_corpus)");
  c_train->add_option("--out", train.out, "Output parameter archive")->required();
  c_train->add_option("--trace", train.trace, "Write the loss trace as CSV");
  c_train->add_option("--log-every", train.log_every, "Print the loss every N steps");

  EvictArgs ev;
  auto* c_evict = app.add_subcommand("evict", "Run one eviction policy on one sample");
  c_evict->add_option("--corpus", ev.corpus, "Corpus (default artifacts.eval_corpus)");
  c_evict->add_option("--params", ev.params, "Lookahead parameters (default artifacts.params)");
  c_evict->add_option("--sample", ev.sample, "Sample index");
  c_evict->add_option("--policy", ev.policy, "Eviction policy");
  c_evict->add_option("--budget", ev.budget, "Retained entries per kv head");
  c_evict->add_option("--out", ev.out, "Write the retained set as JSON");

  EvalArgs eval;
  auto* c_eval = app.add_subcommand("eval", "Evaluate policies and write a report directory");
  c_eval->add_option("--corpus", eval.corpus, "Evaluation corpus (default artifacts.eval_corpus)");
  c_eval->add_option("--params", eval.params, "Lookahead parameters (default artifacts.params)");
  c_eval->add_option("--out-dir", eval.out_dir, "Report directory")->required();

  CostArgs cost;
  auto* c_cost = app.add_subcommand("cost", "Analytical TTFT cost table");
  c_cost->add_option("--arch", cost.arch, "Arch file (default: llama31_8b preset)");
  c_cost->add_option("--hw", cost.hw, "Hardware profile file");
  c_cost->add_option("--methods", cost.methods, "Comma-separated methods");
  c_cost->add_option("--lengths", cost.lengths, "Comma-separated context lengths");
  c_cost->add_option("--budget", cost.budget, "Retained entries per kv head");
  c_cost->add_option("--n-lookahead", cost.n_lookahead, "Lookahead tokens");
  c_cost->add_option("--draft-len", cost.draft_len, "Draft length of draft-based methods");
  c_cost->add_option("--out", cost.out, "CSV output path (default stdout)");
  c_cost->add_option("--json", cost.json, "JSON output path");
  c_cost->add_option("--svg", cost.svg, "Overhead plot path");

  ReportArgs rep;
  auto* c_report = app.add_subcommand("report", "Re-render tables and plots from a report JSON");
  c_report->add_option("--report", rep.report, "report.json produced by eval")->required();
  c_report->add_option("--out-dir", rep.out_dir, "Output directory")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitConfig;
  }
  if (*seed_opt) g.seed = seed;

  try {
    if (*c_gen) cmd_gen_data(g, gen, out);
    if (*c_train) cmd_train(g, train, out);
    if (*c_evict) cmd_evict(g, ev, out);
    if (*c_eval) cmd_eval(g, eval, out);
    if (*c_cost) cmd_cost(cost, out);
    if (*c_report) cmd_report(rep, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const InputError& e) {
    err << "input error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ContractError& e) {
    err << "contract violation: " << e.what() << "\n";
    return kExitContract;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace kvlab::cli
