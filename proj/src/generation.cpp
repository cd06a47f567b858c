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

#include "kvlab/generation.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace kvlab {

void GenSpec::validate() const {
  if (mode == DecodeMode::Temperature && !(temperature > 0.0)) {
    throw ConfigError("temperature decoding needs a positive temperature");
  }
}

template <typename T>
int argmax_token(std::span<const T> logits) {
  if (logits.empty()) throw ContractError("argmax_token: empty logits");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<int>(best);
}

template <typename T>
std::vector<int> continue_generation(const Model<T>& model, KVCache<T>& cache, std::vector<T> logits,
                                     std::int64_t next_position, const GenSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.rng_seed);
  std::vector<int> out;
  const auto limit = static_cast<std::int64_t>(model.config().max_seq_len);
  for (std::size_t i = 0; i < spec.max_new_tokens; ++i) {
    const int tok = spec.mode == DecodeMode::Greedy ? argmax_token<T>(logits)
                                                    : sample_token<T>(logits, spec.temperature, rng);
    out.push_back(tok);
    if (tok == kEndToken || i + 1 == spec.max_new_tokens || next_position >= limit) break;
    logits = decode_step(model, cache, tok, next_position++);
  }
  return out;
}

template <typename T>
std::vector<int> generate(const Model<T>& model, std::span<const int> X, const GenSpec& spec) {
  spec.validate();
  if (X.empty()) throw InputError("generate: empty prompt");
  if (spec.max_new_tokens == 0) return {};
  auto pre = forward_prefill<T>(model, nullptr, X);
  const std::size_t V = model.config().vocab_size;
  std::vector<T> last(pre.logits.data().end() - static_cast<std::ptrdiff_t>(V), pre.logits.data().end());
  return continue_generation(model, pre.cache, std::move(last), static_cast<std::int64_t>(X.size()), spec);
}

// ---------------------------------------------------------------------------
// Names

std::string to_string(Task t) {
  switch (t) {
    case Task::Needle: return "needle";
    case Task::Copy: return "copy";
    case Task::KVRetrieval: return "kv-retrieval";
    case Task::FewshotPattern: return "fewshot-pattern";
    case Task::TruncationCompletion: return "truncation-completion";
  }
  return "?";
}

Task parse_task(const std::string& s) {
  for (Task t : {Task::Needle, Task::Copy, Task::KVRetrieval, Task::FewshotPattern, Task::TruncationCompletion}) {
    if (to_string(t) == s) return t;
  }
  throw ConfigError("unknown task '" + s + "'");
}

std::string to_string(Origin o) { return o == Origin::ModelGenerated ? "model-generated" : "source-response"; }

Origin parse_origin(const std::string& s) {
  if (s == "model-generated") return Origin::ModelGenerated;
  if (s == "source-response") return Origin::SourceResponse;
  throw ConfigError("unknown origin '" + s + "'");
}

// ---------------------------------------------------------------------------
// Corpus

namespace {

using Rng = std::mt19937_64;

std::size_t needle_len(const CorpusSpec& s) { return 2 + s.key_len + s.value_len; }
std::size_t query_len(const CorpusSpec& s) { return 2 + s.key_len; }
constexpr std::size_t kMaxPeriod = 8;
constexpr std::size_t kMinPeriod = 3;

std::size_t min_prompt_len(Task t, const CorpusSpec& s) {
  switch (t) {
    case Task::Needle: return s.n_needles * needle_len(s) + query_len(s) + 1;
    case Task::Copy: return s.copy_len + 1;
    case Task::KVRetrieval: return needle_len(s) + query_len(s);
    case Task::FewshotPattern: return 6;
    case Task::TruncationCompletion: return 2 * kMaxPeriod;
  }
  return 0;
}

std::size_t n_content(const CorpusSpec& s) { return s.vocab_size - kFirstContent; }

int content(Rng& rng, const CorpusSpec& s) {
  return kFirstContent + static_cast<int>(std::uniform_int_distribution<std::size_t>(0, n_content(s) - 1)(rng));
}

std::vector<int> content_seq(Rng& rng, const CorpusSpec& s, std::size_t n) {
  std::vector<int> out(n);
  for (auto& t : out) t = content(rng, s);
  return out;
}

// Draws `count` pairwise distinct keys.
std::vector<std::vector<int>> distinct_keys(Rng& rng, const CorpusSpec& s, std::size_t count) {
  double space = 1.0;
  for (std::size_t i = 0; i < s.key_len; ++i) space *= static_cast<double>(n_content(s));
  if (static_cast<double>(count) > space / 2.0) throw ConfigError("key space too small for the requested pairs");
  std::vector<std::vector<int>> keys;
  while (keys.size() < count) {
    auto k = content_seq(rng, s, s.key_len);
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(std::move(k));
  }
  return keys;
}

void append_record(std::vector<int>& x, const std::vector<int>& key, const std::vector<int>& value) {
  x.push_back(kKeyMark);
  x.insert(x.end(), key.begin(), key.end());
  x.push_back(kSeparator);
  x.insert(x.end(), value.begin(), value.end());
}

void append_query(std::vector<int>& x, const std::vector<int>& key) {
  x.push_back(kQueryMark);
  x.insert(x.end(), key.begin(), key.end());
  x.push_back(kSeparator);
}

TrainSample make_needle(Rng& rng, const CorpusSpec& s, std::size_t n) {
  TrainSample out;
  out.task = Task::Needle;
  const auto keys = distinct_keys(rng, s, s.n_needles);
  std::vector<std::vector<int>> values;
  for (std::size_t i = 0; i < s.n_needles; ++i) values.push_back(content_seq(rng, s, s.value_len));
  const std::size_t filler = n - s.n_needles * needle_len(s) - query_len(s);
  std::vector<std::size_t> cuts(s.n_needles);
  for (auto& c : cuts) c = std::uniform_int_distribution<std::size_t>(0, filler)(rng);
  std::sort(cuts.begin(), cuts.end());
  const auto fill = content_seq(rng, s, filler);
  std::size_t f = 0;
  for (std::size_t i = 0; i < s.n_needles; ++i) {
    out.X.insert(out.X.end(), fill.begin() + static_cast<std::ptrdiff_t>(f), fill.begin() + static_cast<std::ptrdiff_t>(cuts[i]));
    f = cuts[i];
    const std::size_t begin = out.X.size();
    append_record(out.X, keys[i], values[i]);
    out.needle_spans.push_back({begin, out.X.size()});
  }
  out.X.insert(out.X.end(), fill.begin() + static_cast<std::ptrdiff_t>(f), fill.end());
  const std::size_t asked = std::uniform_int_distribution<std::size_t>(0, s.n_needles - 1)(rng);
  append_query(out.X, keys[asked]);
  out.Y = values[asked];
  return out;
}

TrainSample make_copy(Rng& rng, const CorpusSpec& s, std::size_t n) {
  TrainSample out;
  out.task = Task::Copy;
  out.X = content_seq(rng, s, n - 1);
  out.X.push_back(kQueryMark);
  out.Y.assign(out.X.begin(), out.X.begin() + static_cast<std::ptrdiff_t>(s.copy_len));
  out.needle_spans.push_back({0, s.copy_len});
  return out;
}

TrainSample make_kv(Rng& rng, const CorpusSpec& s, std::size_t n) {
  TrainSample out;
  out.task = Task::KVRetrieval;
  const std::size_t pairs = (n - query_len(s)) / needle_len(s);
  const std::size_t pad = n - query_len(s) - pairs * needle_len(s);
  const auto keys = distinct_keys(rng, s, pairs);
  out.X = content_seq(rng, s, pad);
  const std::size_t asked = std::uniform_int_distribution<std::size_t>(0, pairs - 1)(rng);
  for (std::size_t i = 0; i < pairs; ++i) {
    const auto value = content_seq(rng, s, s.value_len);
    const std::size_t begin = out.X.size();
    append_record(out.X, keys[i], value);
    if (i == asked) {
      out.needle_spans.push_back({begin, out.X.size()});
      out.Y = value;
    }
  }
  append_query(out.X, keys[asked]);
  return out;
}

int shift_token(int a, std::size_t shift, std::size_t c) {
  return kFirstContent + static_cast<int>((static_cast<std::size_t>(a - kFirstContent) + shift) % c);
}

TrainSample make_fewshot(Rng& rng, const CorpusSpec& s, std::size_t n) {
  TrainSample out;
  out.task = Task::FewshotPattern;
  const std::size_t c = n_content(s);
  const std::size_t shift = std::uniform_int_distribution<std::size_t>(1, c - 1)(rng);
  const std::size_t examples = (n - 3) / 3;
  out.X = content_seq(rng, s, n - 3 - 3 * examples);
  for (std::size_t i = 0; i < examples; ++i) {
    const int a = content(rng, s);
    const std::size_t begin = out.X.size();
    out.X.insert(out.X.end(), {a, kSeparator, shift_token(a, shift, c)});
    out.needle_spans.push_back({begin, out.X.size()});
  }
  const int b = content(rng, s);
  out.X.insert(out.X.end(), {kQueryMark, b, kSeparator});
  out.Y = {shift_token(b, shift, c)};
  return out;
}

TrainSample make_truncation(Rng& rng, const CorpusSpec& s, std::size_t n) {
  TrainSample out;
  out.task = Task::TruncationCompletion;
  const std::size_t p = std::uniform_int_distribution<std::size_t>(kMinPeriod, kMaxPeriod)(rng);
  std::vector<int> motif;
  while (motif.size() < p) {
    const int t = content(rng, s);
    if (std::find(motif.begin(), motif.end(), t) == motif.end()) motif.push_back(t);
  }
  for (std::size_t i = 0; i < n; ++i) out.X.push_back(motif[i % p]);
  for (std::size_t i = 0; i < s.continuation_len; ++i) out.Y.push_back(motif[(n + i) % p]);
  return out;
}

std::vector<int> parse_record_answer(std::span<const int> X, const CorpusSpec& s) {
  const std::size_t n = X.size(), q = query_len(s);
  if (n < q || X[n - q] != kQueryMark || X[n - 1] != kSeparator) throw InputError("prompt does not end with a query");
  const auto key = X.subspan(n - q + 1, s.key_len);
  const std::size_t rec = needle_len(s);
  for (std::size_t i = 0; i + rec <= n - q; ++i) {
    if (X[i] != kKeyMark || X[i + 1 + s.key_len] != kSeparator) continue;
    if (!std::equal(key.begin(), key.end(), X.begin() + static_cast<std::ptrdiff_t>(i + 1))) continue;
    const auto v = X.subspan(i + 2 + s.key_len, s.value_len);
    return std::vector<int>(v.begin(), v.end());
  }
  throw InputError("queried key not found in prompt");
}

}  // namespace

void CorpusSpec::validate() const {
  if (vocab_size < static_cast<std::size_t>(kFirstContent) + 2 * kMaxPeriod) {
    throw ConfigError("corpus vocab_size must be at least " + std::to_string(kFirstContent + 2 * kMaxPeriod));
  }
  if (prompt_len_min == 0 || prompt_len_max < prompt_len_min) throw ConfigError("invalid prompt_len range");
  if (n_needles == 0 || key_len == 0 || value_len == 0 || copy_len == 0 || continuation_len == 0) {
    throw ConfigError("corpus lengths must be >= 1");
  }
  std::vector<Task> tasks;
  if (mixture.empty()) {
    tasks.push_back(task);
  } else {
    for (const auto& [t, w] : mixture) {
      if (!(w >= 0.0)) throw ConfigError("mixture weights must be non-negative");
      tasks.push_back(t);
    }
  }
  for (Task t : tasks) {
    if (prompt_len_min < min_prompt_len(t, *this)) {
      throw ConfigError("prompt_len_min " + std::to_string(prompt_len_min) + " too short for task " + to_string(t) +
                        " (needs " + std::to_string(min_prompt_len(t, *this)) + ")");
    }
  }
}

CorpusSpec CorpusSpec::from_config(const KeyValueConfig& kv) {
  CorpusSpec s;
  s.task = parse_task(kv.get_string("task", to_string(s.task)));
  s.n_samples = kv.get_size("n_samples", s.n_samples);
  s.prompt_len_min = kv.get_size("prompt_len_min", s.prompt_len_min);
  s.prompt_len_max = kv.get_size("prompt_len_max", s.prompt_len_max);
  s.vocab_size = kv.get_size("vocab_size", s.vocab_size);
  s.rng_seed = kv.get_u64("rng_seed", s.rng_seed);
  s.n_needles = kv.get_size("n_needles", s.n_needles);
  s.key_len = kv.get_size("key_len", s.key_len);
  s.value_len = kv.get_size("value_len", s.value_len);
  s.copy_len = kv.get_size("copy_len", s.copy_len);
  s.continuation_len = kv.get_size("continuation_len", s.continuation_len);
  for (const auto& item : kv.get_list("mixture")) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError("mixture entries look like task:weight, got '" + item + "'");
    double w = 0.0;
    try {
      w = std::stod(item.substr(colon + 1));
    } catch (const std::exception&) {
      throw ConfigError("bad mixture weight in '" + item + "'");
    }
    s.mixture.emplace_back(parse_task(item.substr(0, colon)), w);
  }
  const auto unused = kv.unused_keys();
  if (!unused.empty()) throw ConfigError("unknown corpus config key '" + unused.front() + "'");
  s.validate();
  return s;
}

std::vector<TrainSample> build_corpus(const CorpusSpec& spec) {
  spec.validate();
  Rng rng(spec.rng_seed);
  std::vector<double> weights;
  for (const auto& [t, w] : spec.mixture) weights.push_back(w);
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  std::vector<TrainSample> out;
  out.reserve(spec.n_samples);
  for (std::size_t i = 0; i < spec.n_samples; ++i) {
    const Task task = spec.mixture.empty() ? spec.task : spec.mixture[pick(rng)].first;
    const std::size_t n = std::uniform_int_distribution<std::size_t>(spec.prompt_len_min, spec.prompt_len_max)(rng);
    switch (task) {
      case Task::Needle: out.push_back(make_needle(rng, spec, n)); break;
      case Task::Copy: out.push_back(make_copy(rng, spec, n)); break;
      case Task::KVRetrieval: out.push_back(make_kv(rng, spec, n)); break;
      case Task::FewshotPattern: out.push_back(make_fewshot(rng, spec, n)); break;
      case Task::TruncationCompletion: out.push_back(make_truncation(rng, spec, n)); break;
    }
  }
  return out;
}

std::vector<TrainSample> build_needle_corpus(const CorpusSpec& spec) {
  CorpusSpec s = spec;
  s.task = Task::Needle;
  s.mixture.clear();
  return build_corpus(s);
}

std::vector<int> canonical_answer(Task task, std::span<const int> X, const CorpusSpec& spec) {
  const std::size_t n = X.size();
  switch (task) {
    case Task::Needle:
    case Task::KVRetrieval: return parse_record_answer(X, spec);
    case Task::Copy: {
      if (n < spec.copy_len + 1) throw InputError("copy prompt too short");
      return std::vector<int>(X.begin(), X.begin() + static_cast<std::ptrdiff_t>(spec.copy_len));
    }
    case Task::FewshotPattern: {
      if (n < 6 || X[n - 3] != kQueryMark || X[n - 5] != kSeparator) throw InputError("malformed few-shot prompt");
      const std::size_t c = n_content(spec);
      const std::size_t shift = static_cast<std::size_t>((X[n - 4] - X[n - 6]) + static_cast<int>(c)) % c;
      return {shift_token(X[n - 2], shift, c)};
    }
    case Task::TruncationCompletion: {
      for (std::size_t p = 1; p <= n / 2; ++p) {
        bool ok = true;
        for (std::size_t i = p; i < n && ok; ++i) ok = X[i] == X[i - p];
        if (!ok) continue;
        std::vector<int> out;
        for (std::size_t i = 0; i < spec.continuation_len; ++i) out.push_back(X[(n + i) % p]);
        return out;
      }
      throw InputError("prompt is not periodic");
    }
  }
  throw ContractError("unknown task");
}

template <typename T>
std::vector<TrainSample> make_training_pairs(const Model<T>& model, const CorpusSpec& corpus, const GenSpec& gen,
                                             Origin origin) {
  auto samples = build_corpus(corpus);
  for (auto& s : samples) s.origin = origin;
  if (origin == Origin::SourceResponse) return samples;
  if (gen.max_new_tokens == 0) throw ConfigError("model-generated pairs need max_new_tokens >= 1");
  for (auto& s : samples) s.Y = generate(model, s.X, gen);
  return samples;
}

// ---------------------------------------------------------------------------
// JSON lines

std::string corpus_to_jsonl(const std::vector<TrainSample>& samples) {
  std::string out;
  for (const auto& s : samples) {
    nlohmann::ordered_json j;
    j["X"] = s.X;
    j["Y"] = s.Y;
    j["origin"] = to_string(s.origin);
    j["task"] = to_string(s.task);
    auto spans = nlohmann::ordered_json::array();
    for (const auto& sp : s.needle_spans) spans.push_back({sp.begin, sp.end});
    j["annotations"]["needle_spans"] = spans;
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<TrainSample> corpus_from_jsonl(const std::string& text) {
  std::vector<TrainSample> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TrainSample s;
      s.X = j.at("X").get<std::vector<int>>();
      s.Y = j.at("Y").get<std::vector<int>>();
      s.origin = parse_origin(j.at("origin").get<std::string>());
      s.task = j.contains("task") ? parse_task(j["task"].get<std::string>()) : Task::Needle;
      if (j.contains("annotations") && j["annotations"].contains("needle_spans")) {
        for (const auto& sp : j["annotations"]["needle_spans"]) {
          s.needle_spans.push_back({sp.at(0).get<std::size_t>(), sp.at(1).get<std::size_t>()});
        }
      }
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw InputError("corpus line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void save_corpus(const std::string& path, const std::vector<TrainSample>& samples) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write corpus: " + path);
  out << corpus_to_jsonl(samples);
}

std::vector<TrainSample> load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open corpus: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return corpus_from_jsonl(buf.str());
}

#define KVLAB_INSTANTIATE(T)                                                                                    \
  template int argmax_token<T>(std::span<const T>);                                                             \
  template std::vector<int> continue_generation<T>(const Model<T>&, KVCache<T>&, std::vector<T>, std::int64_t, \
                                                   const GenSpec&);                                             \
  template std::vector<int> generate<T>(const Model<T>&, std::span<const int>, const GenSpec&);                 \
  template std::vector<TrainSample> make_training_pairs<T>(const Model<T>&, const CorpusSpec&, const GenSpec&,  \
                                                           Origin);

KVLAB_INSTANTIATE(float)
KVLAB_INSTANTIATE(double)

#undef KVLAB_INSTANTIATE

}  // namespace kvlab
