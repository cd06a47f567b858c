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

#include "kvlab/training.hpp"

#include <cmath>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>

#include "kvlab/serialize.hpp"

namespace kvlab {

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("lr must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(warmup_frac >= 0.0 && warmup_frac < 1.0)) throw ConfigError("warmup_frac must lie in [0, 1)");
  if (!(grad_clip > 0.0)) throw ConfigError("grad_clip must be positive");
  if (!(eps_kl > 0.0)) throw ConfigError("eps_kl must be positive");
  if (checkpoint_every > 0 && checkpoint_path.empty()) throw ConfigError("checkpoint_every needs checkpoint_path");
}

TrainConfig TrainConfig::from_config(const KeyValueConfig& kv) {
  TrainConfig c;
  c.lr = kv.get_double("lr", c.lr);
  c.beta1 = kv.get_double("beta1", c.beta1);
  c.beta2 = kv.get_double("beta2", c.beta2);
  c.adam_eps = kv.get_double("adam_eps", c.adam_eps);
  c.batch_size = kv.get_size("batch_size", c.batch_size);
  c.warmup_frac = kv.get_double("warmup_frac", c.warmup_frac);
  c.grad_clip = kv.get_double("grad_clip", c.grad_clip);
  c.steps = kv.get_size("steps", c.steps);
  c.eps_kl = kv.get_double("eps_kl", c.eps_kl);
  c.rng_seed = kv.get_u64("rng_seed", c.rng_seed);
  c.cache_gt = kv.get_bool("cache_gt", c.cache_gt);
  c.checkpoint_every = kv.get_size("checkpoint_every", c.checkpoint_every);
  c.checkpoint_path = kv.get_string("checkpoint_path", c.checkpoint_path);
  c.resume_from = kv.get_string("resume_from", c.resume_from);
  const auto unused = kv.unused_keys();
  if (!unused.empty()) throw ConfigError("unknown train config key '" + unused.front() + "'");
  c.validate();
  return c;
}

std::size_t warmup_steps(const TrainConfig& cfg) {
  if (cfg.warmup_frac <= 0.0 || cfg.steps == 0) return 0;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(cfg.warmup_frac * static_cast<double>(cfg.steps))));
}

double lr_at(const TrainConfig& cfg, std::size_t step) {
  const std::size_t w = warmup_steps(cfg);
  if (step < w) return cfg.lr * static_cast<double>(step) / static_cast<double>(w);
  if (cfg.steps == 0 || cfg.steps - 1 <= w) return cfg.lr;
  const double progress = std::min(1.0, static_cast<double>(step - w) / static_cast<double>(cfg.steps - 1 - w));
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double kl_loss(const ImportanceScores& gt, const ImportanceScores& est, double eps) {
  if (!gt.same_shape(est)) throw DimensionError("kl_loss: score shapes differ");
  if (gt.head_space != HeadSpace::Query) throw ContractError("kl_loss expects query-head scores");
  if (gt.n_cols == 0 || gt.n_layers * gt.n_heads == 0) throw ContractError("kl_loss: empty scores");
  double total = 0.0;
  for (std::size_t l = 0; l < gt.n_layers; ++l) {
    for (std::size_t h = 0; h < gt.n_heads; ++h) {
      const auto p = l1_normalize(gt.row(l, h));
      const auto q = l1_normalize(est.row(l, h));
      for (std::size_t j = 0; j < p.size(); ++j) total += p[j] * (std::log(p[j] + eps) - std::log(q[j] + eps));
    }
  }
  return total / static_cast<double>(gt.n_layers * gt.n_heads);
}

template <typename T>
Tensor<T> kl_loss_tensor(const ImportanceScores& gt, const std::vector<std::vector<Tensor<T>>>& est_rows, T eps) {
  if (gt.head_space != HeadSpace::Query) throw ContractError("kl_loss expects query-head scores");
  if (est_rows.size() != gt.n_layers) throw DimensionError("kl_loss: layer count mismatch");
  Tensor<T> total;
  for (std::size_t l = 0; l < gt.n_layers; ++l) {
    if (est_rows[l].size() != gt.n_heads) throw DimensionError("kl_loss: head count mismatch");
    for (std::size_t h = 0; h < gt.n_heads; ++h) {
      const auto p = l1_normalize(gt.row(l, h));
      const Tensor<T> target({1, gt.n_cols}, std::vector<T>(p.begin(), p.end()));
      const Tensor<T> kl = kl_divergence(target, l1_normalize_rows(est_rows[l][h]), eps);
      total = total.defined() ? add(total, kl) : kl;
    }
  }
  return scale(total, static_cast<T>(1.0 / static_cast<double>(gt.n_layers * gt.n_heads)));
}

template <typename T>
GtTarget<T> compute_gt_target(const Model<T>& model, const TrainSample& sample, std::size_t n_lookahead) {
  if (sample.Y.empty()) throw ContractError("training sample without response tokens");
  if (sample.X.empty()) throw InputError("training sample without prompt tokens");
  const std::size_t need = sample.X.size() + sample.Y.size() + n_lookahead;
  if (need > model.config().max_seq_len) {
    throw InputError("sample needs " + std::to_string(need) + " positions, max_seq_len is " +
                     std::to_string(model.config().max_seq_len));
  }
  std::vector<int> seq = sample.X;
  seq.insert(seq.end(), sample.Y.begin(), sample.Y.end());
  PrefillOptions opts;
  opts.compute_logits = false;
  opts.probe_rows = sample.Y.size();
  auto pre = forward_prefill<T>(model, nullptr, seq, opts);
  return GtTarget<T>{scores_from_probs(pre.probe.probs, sample.X.size()), pre.cache.truncated(sample.X.size())};
}

template <typename T>
Tensor<T> lookahead_loss(const Model<T>& model, const LookaheadParams<T>& la, const GtTarget<T>& target,
                         std::size_t n_in, T eps) {
  KVCache<T> cache = target.prompt_cache;
  const std::size_t m = la.config().n_lookahead;
  const auto positions = iota_positions(m, static_cast<std::int64_t>(n_in));
  ForwardOptions opts;
  opts.compute_logits = false;
  opts.probe_rows = m;
  auto r = forward_block<T>(model, &la, cache, {}, m, positions, opts);
  std::vector<std::vector<Tensor<T>>> est(r.probs.size());
  for (std::size_t l = 0; l < r.probs.size(); ++l) {
    for (const auto& p : r.probs[l]) est[l].push_back(mean_rows(slice_cols(p, 0, n_in)));
  }
  return kl_loss_tensor(target.scores, est, eps);
}

template <typename T>
AdamState<T> AdamState<T>::for_params(const LookaheadParams<T>& la) {
  AdamState s;
  for (const auto& p : la.parameters()) {
    s.m.emplace_back(p.size(), T(0));
    s.v.emplace_back(p.size(), T(0));
  }
  return s;
}

template <typename T>
double train_step(const Model<T>& model, LookaheadParams<T>& la, std::span<const GtTarget<T>* const> targets,
                  std::span<const TrainSample* const> batch, AdamState<T>& opt, const TrainConfig& cfg, double lr) {
  if (batch.empty() || targets.size() != batch.size()) throw ContractError("train_step: empty or mismatched batch");
  auto params = la.parameters();
  if (opt.m.size() != params.size()) throw ContractError("train_step: optimizer state does not match parameters");
  la.zero_grad();
  const T inv_b = static_cast<T>(1.0 / static_cast<double>(batch.size()));
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Tensor<T> loss = lookahead_loss(model, la, *targets[i], batch[i]->X.size(), static_cast<T>(cfg.eps_kl));
    total += static_cast<double>(loss.item());
    if (loss.requires_grad()) backward(scale(loss, inv_b));
  }

  double sq = 0.0;
  for (const auto& p : params) {
    for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  const double clip = norm > cfg.grad_clip ? cfg.grad_clip / norm : 1.0;

  ++opt.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto values = params[k].mutable_data();
    const auto grads = params[k].grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grads.empty() ? 0.0 : static_cast<double>(grads[i]) * clip;
      const double m = cfg.beta1 * static_cast<double>(opt.m[k][i]) + (1.0 - cfg.beta1) * g;
      const double v = cfg.beta2 * static_cast<double>(opt.v[k][i]) + (1.0 - cfg.beta2) * g * g;
      opt.m[k][i] = static_cast<T>(m);
      opt.v[k][i] = static_cast<T>(v);
      const double update = lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.adam_eps);
      values[i] = static_cast<T>(static_cast<double>(values[i]) - update);
    }
  }
  return total / static_cast<double>(batch.size());
}

template <typename T>
double train_step(const Model<T>& model, LookaheadParams<T>& la, const TrainSample& sample, AdamState<T>& opt,
                  const TrainConfig& cfg, double lr) {
  const GtTarget<T> target = compute_gt_target(model, sample, la.config().n_lookahead);
  const GtTarget<T>* targets[1] = {&target};
  const TrainSample* batch[1] = {&sample};
  return train_step<T>(model, la, targets, batch, opt, cfg, lr);
}

std::vector<std::size_t> batch_indices(std::size_t corpus_size, std::size_t batch_size, std::size_t step,
                                       std::uint64_t seed) {
  if (corpus_size == 0) throw ConfigError("empty corpus");
  std::vector<std::size_t> out;
  out.reserve(batch_size);
  std::size_t cached_epoch = static_cast<std::size_t>(-1);
  std::vector<std::size_t> perm;
  for (std::size_t j = 0; j < batch_size; ++j) {
    const std::size_t pos = step * batch_size + j;
    const std::size_t epoch = pos / corpus_size;
    if (epoch != cached_epoch) {
      perm.resize(corpus_size);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ull + epoch);
      std::shuffle(perm.begin(), perm.end(), rng);
      cached_epoch = epoch;
    }
    out.push_back(perm[pos % corpus_size]);
  }
  return out;
}

template <typename T>
TrainResult train_loop(const Model<T>& model, LookaheadParams<T>& la, const std::vector<TrainSample>& corpus,
                       const TrainConfig& cfg, const std::function<void(const TrainRecord&)>& on_step) {
  cfg.validate();
  if (corpus.empty()) throw ConfigError("training corpus is empty");
  AdamState<T> opt = AdamState<T>::for_params(la);
  TrainResult result;
  if (!cfg.resume_from.empty()) {
    load_checkpoint(cfg.resume_from, la, opt);
    result.start_step = opt.step;
  }
  const std::size_t m = la.config().n_lookahead;
  std::vector<std::optional<GtTarget<T>>> memo(corpus.size());
  for (std::size_t step = result.start_step; step < cfg.steps; ++step) {
    const auto idx = batch_indices(corpus.size(), cfg.batch_size, step, cfg.rng_seed);
    std::vector<GtTarget<T>> fresh;
    fresh.reserve(idx.size());
    std::vector<const GtTarget<T>*> targets;
    std::vector<const TrainSample*> batch;
    for (auto i : idx) {
      if (cfg.cache_gt) {
        if (!memo[i]) memo[i] = compute_gt_target(model, corpus[i], m);
        targets.push_back(&*memo[i]);
      } else {
        fresh.push_back(compute_gt_target(model, corpus[i], m));
        targets.push_back(&fresh.back());
      }
      batch.push_back(&corpus[i]);
    }
    const double lr = lr_at(cfg, step);
    TrainRecord rec{step, lr, train_step<T>(model, la, targets, batch, opt, cfg, lr)};
    result.trace.push_back(rec);
    if (on_step) on_step(rec);
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
      save_checkpoint(cfg.checkpoint_path, la, opt);
    }
  }
  return result;
}

template <typename T>
void save_checkpoint(const std::string& path, const LookaheadParams<T>& la, const AdamState<T>& opt) {
  const auto named = la.named_parameters();
  if (opt.m.size() != named.size()) throw ContractError("checkpoint: optimizer state does not match parameters");
  std::vector<StoredTensor> stored;
  for (const auto& [name, t] : named) stored.push_back(to_stored(name, t));
  for (std::size_t k = 0; k < named.size(); ++k) {
    stored.push_back({"adam.m." + named[k].first, named[k].second.shape(),
                      std::vector<float>(opt.m[k].begin(), opt.m[k].end())});
    stored.push_back({"adam.v." + named[k].first, named[k].second.shape(),
                      std::vector<float>(opt.v[k].begin(), opt.v[k].end())});
  }
  stored.push_back({"adam.step", {1}, {static_cast<float>(opt.step)}});
  write_archive(path, stored);
}

template <typename T>
void load_checkpoint(const std::string& path, LookaheadParams<T>& la, AdamState<T>& opt) {
  std::map<std::string, StoredTensor> by_name;
  for (auto& s : read_archive(path)) by_name.emplace(s.name, std::move(s));
  auto find = [&](const std::string& name) -> const StoredTensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw InputError("checkpoint " + path + " lacks tensor '" + name + "'");
    return it->second;
  };
  auto named = la.named_parameters();
  opt = AdamState<T>::for_params(la);
  for (std::size_t k = 0; k < named.size(); ++k) {
    assign_stored(find(named[k].first), named[k].second);
    const auto& m = find("adam.m." + named[k].first);
    const auto& v = find("adam.v." + named[k].first);
    if (m.data.size() != opt.m[k].size() || v.data.size() != opt.v[k].size()) {
      throw InputError("checkpoint optimizer state has the wrong size");
    }
    std::transform(m.data.begin(), m.data.end(), opt.m[k].begin(), [](float x) { return static_cast<T>(x); });
    std::transform(v.data.begin(), v.data.end(), opt.v[k].begin(), [](float x) { return static_cast<T>(x); });
  }
  opt.step = static_cast<std::size_t>(find("adam.step").data.at(0));
}

std::string trace_to_csv(const std::vector<TrainRecord>& trace) {
  std::ostringstream out;
  out.precision(17);
  out << "step,lr,loss\n";
  for (const auto& r : trace) out << r.step << "," << r.lr << "," << r.loss << "\n";
  return out.str();
}

#define KVLAB_INSTANTIATE(T)                                                                                      \
  template Tensor<T> kl_loss_tensor<T>(const ImportanceScores&, const std::vector<std::vector<Tensor<T>>>&, T);   \
  template GtTarget<T> compute_gt_target<T>(const Model<T>&, const TrainSample&, std::size_t);                    \
  template Tensor<T> lookahead_loss<T>(const Model<T>&, const LookaheadParams<T>&, const GtTarget<T>&,            \
                                       std::size_t, T);                                                           \
  template struct AdamState<T>;                                                                                   \
  template double train_step<T>(const Model<T>&, LookaheadParams<T>&, std::span<const GtTarget<T>* const>,        \
                                std::span<const TrainSample* const>, AdamState<T>&, const TrainConfig&, double); \
  template double train_step<T>(const Model<T>&, LookaheadParams<T>&, const TrainSample&, AdamState<T>&,          \
                                const TrainConfig&, double);                                                      \
  template TrainResult train_loop<T>(const Model<T>&, LookaheadParams<T>&, const std::vector<TrainSample>&,       \
                                     const TrainConfig&, const std::function<void(const TrainRecord&)>&);         \
  template void save_checkpoint<T>(const std::string&, const LookaheadParams<T>&, const AdamState<T>&);           \
  template void load_checkpoint<T>(const std::string&, LookaheadParams<T>&, AdamState<T>&);

KVLAB_INSTANTIATE(float)
KVLAB_INSTANTIATE(double)

#undef KVLAB_INSTANTIATE

}  // namespace kvlab
