#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tracformer/data.hpp"
#include "tracformer/error.hpp"
#include "tracformer/masking.hpp"
#include "tracformer/model.hpp"
#include "tracformer/parallel.hpp"
#include "tracformer/rng.hpp"
#include "tracformer/tensor.hpp"

namespace tracformer {

struct MaskStrategySpec {
  enum class Kind { span, mixed, full };  // full = no context, pure left-to-right
  Kind kind = Kind::span;
  double p = 0.5;
  SpanDistribution dist{SpanDistribution::Kind::geometric, 8.0, 1.0};

  MaskSample draw(int L, Rng& rng) const {
    switch (kind) {
      case Kind::span:
        return sample_span_mask_retrying(L, p, dist, rng);
      case Kind::mixed:
        return sample_mixed_mask(L, rng).sample;
      case Kind::full: {
        MaskSample s;
        s.spans = {{1, L + 1}};
        for (int q = 1; q <= L; ++q) s.blank_ids.push_back(q);
        return s;
      }
    }
    throw ConfigError("mask strategy: unknown kind");
  }

  nlohmann::json to_json() const {
    const char* k = kind == Kind::span ? "span" : (kind == Kind::mixed ? "mixed" : "full");
    const char* dk = dist.kind == SpanDistribution::Kind::geometric ? "geometric" : "dlogistic";
    return nlohmann::json{{"kind", k}, {"p", p}, {"dist", dk}, {"mu", dist.mu}, {"sigma", dist.sigma}};
  }

  static MaskStrategySpec from_json(const nlohmann::json& j) {
    MaskStrategySpec s;
    const std::string k = j.value("kind", "span");
    if (k == "span")
      s.kind = Kind::span;
    else if (k == "mixed")
      s.kind = Kind::mixed;
    else if (k == "full")
      s.kind = Kind::full;
    else
      throw ConfigError("mask strategy: unknown kind '" + k + "'");
    s.p = j.value("p", 0.5);
    const std::string dk = j.value("dist", "geometric");
    if (dk == "geometric")
      s.dist.kind = SpanDistribution::Kind::geometric;
    else if (dk == "dlogistic")
      s.dist.kind = SpanDistribution::Kind::dlogistic;
    else
      throw ConfigError("mask strategy: unknown distribution '" + dk + "'");
    s.dist.mu = j.value("mu", 8.0);
    s.dist.sigma = j.value("sigma", 1.0);
    return s;
  }
};

struct TrainConfig {
  enum class Objective { car, ac };
  Objective objective = Objective::car;
  MaskStrategySpec strategy;
  int batch_size = 32;
  int64_t total_steps = 2000;
  int64_t warmup_steps = 100;
  double lr_init = 6e-4;
  double lr_final = 6e-5;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.1;
  double clip_norm = 1.0;
  uint64_t seed = 0;
  int pad_id = Vocab::kPad;
  int threads = 1;
  int64_t checkpoint_every = 0;  // 0 = only at the end
  // stop once the trailing-window mean loss drops below the target (0 = off)
  double early_stop_loss = 0.0;
  int early_stop_window = 20;

  void validate() const {
    if (batch_size < 1) throw ConfigError("train: batch_size must be positive");
    if (total_steps < 1) throw ConfigError("train: total_steps must be positive");
    if (warmup_steps < 0 || warmup_steps >= total_steps) throw ConfigError("train: warmup must be < total steps");
    if (!(lr_final > 0.0) || lr_final > lr_init) throw ConfigError("train: need 0 < lr_final <= lr_init");
    if (threads < 1) throw ConfigError("train: threads must be positive");
    if (clip_norm <= 0.0) throw ConfigError("train: clip_norm must be positive");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"objective", objective == Objective::car ? "car" : "ac"},
                          {"strategy", strategy.to_json()},
                          {"batch_size", batch_size},
                          {"total_steps", total_steps},
                          {"warmup_steps", warmup_steps},
                          {"lr_init", lr_init},
                          {"lr_final", lr_final},
                          {"beta1", beta1},
                          {"beta2", beta2},
                          {"weight_decay", weight_decay},
                          {"clip_norm", clip_norm},
                          {"seed", seed},
                          {"threads", threads},
                          {"checkpoint_every", checkpoint_every},
                          {"early_stop_loss", early_stop_loss},
                          {"early_stop_window", early_stop_window}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    const std::string obj = j.value("objective", "car");
    if (obj == "car")
      c.objective = Objective::car;
    else if (obj == "ac")
      c.objective = Objective::ac;
    else
      throw ConfigError("train: unknown objective '" + obj + "'");
    if (j.contains("strategy")) c.strategy = MaskStrategySpec::from_json(j.at("strategy"));
    c.batch_size = j.value("batch_size", c.batch_size);
    c.total_steps = j.value("total_steps", c.total_steps);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.lr_init = j.value("lr_init", c.lr_init);
    c.lr_final = j.value("lr_final", c.lr_final);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.seed = j.value("seed", c.seed);
    c.threads = j.value("threads", c.threads);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.early_stop_loss = j.value("early_stop_loss", c.early_stop_loss);
    c.early_stop_window = j.value("early_stop_window", c.early_stop_window);
    return c;
  }
};

// The optimizer settings the paper's large runs use (the desk defaults above
// scale the schedule down but keep the optimizer identical).
inline TrainConfig paper_train_preset() {
  TrainConfig c;
  c.batch_size = 256;
  c.total_steps = 30000;
  c.warmup_steps = 1000;
  c.strategy.kind = MaskStrategySpec::Kind::span;
  c.strategy.p = 0.5;
  c.strategy.dist = SpanDistribution{SpanDistribution::Kind::geometric, 50.0, 1.0};
  return c;
}

namespace detail {

// Eligible loss rows: predicted positions that are not padding.
template <typename S>
std::vector<int> loss_rows(const std::vector<int>& x, const std::vector<int>& blank_ids, int pad_id) {
  std::vector<int> rows;
  rows.reserve(blank_ids.size());
  for (int p : blank_ids)
    if (x[static_cast<size_t>(p - 1)] != pad_id) rows.push_back(p - 1);
  return rows;
}

}  // namespace detail

// CAR objective for one sequence: uncorrupted prefix input, mask-corrupted
// suffix input, mean NLL over predicted (non-context, non-pad) positions.
template <typename S>
Tensor<S> car_loss(const Model<S>& model, const std::vector<int>& x, const std::vector<int>& context, int pad_id = -1,
                   Rng* dropout_rng = nullptr) {
  const int T = static_cast<int>(x.size());
  if (static_cast<int>(context.size()) >= T) throw DomainError("car_loss: context covers everything; nothing to predict");
  const std::vector<int> blanks = complement_positions(context, T);
  const std::vector<int> rows = detail::loss_rows<S>(x, blanks, pad_id);
  if (rows.empty()) throw DomainError("car_loss: no eligible positions to predict");
  Tensor<S> logits =
      tracformer_forward(model, x, apply_mask(x, blanks, model.config.mask_token_id), dropout_rng);
  return cross_entropy(logits, x, rows);
}

// AC objective: both encoders see the corrupted sequence.
template <typename S>
Tensor<S> ac_loss(const Model<S>& model, const std::vector<int>& x, const std::vector<int>& context, int pad_id = -1,
                  Rng* dropout_rng = nullptr) {
  const int T = static_cast<int>(x.size());
  if (static_cast<int>(context.size()) >= T) throw DomainError("ac_loss: context covers everything; nothing to predict");
  const std::vector<int> blanks = complement_positions(context, T);
  const std::vector<int> rows = detail::loss_rows<S>(x, blanks, pad_id);
  if (rows.empty()) throw DomainError("ac_loss: no eligible positions to predict");
  const std::vector<int> corrupted = apply_mask(x, blanks, model.config.mask_token_id);
  Tensor<S> logits = tracformer_forward(model, corrupted, corrupted, dropout_rng);
  return cross_entropy(logits, x, rows);
}

// Linear warmup to lr_init, then cosine decay to lr_final at total_steps.
inline double lr_at(int64_t step, const TrainConfig& cfg) {
  if (step >= cfg.total_steps) return cfg.lr_final;
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    return cfg.lr_init * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  const double progress =
      static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + std::cos(M_PI * progress));
}

// Scales gradients in place so the global L2 norm is at most max_norm;
// returns the pre-clip norm.
template <typename S>
double clip_global_norm(std::vector<std::vector<S>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (S v : g) sq += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const S s = static_cast<S>(max_norm / norm);
    for (auto& g : grads)
      for (S& v : g) v *= s;
  }
  return norm;
}

template <typename S>
struct OptimizerState {
  std::vector<std::vector<S>> m, v;
  int64_t step = 0;

  template <typename ParamList>
  static OptimizerState init(ParamList& params) {
    OptimizerState st;
    for (auto& [name, t] : params) {
      st.m.emplace_back(t->size(), S{0});
      st.v.emplace_back(t->size(), S{0});
    }
    return st;
  }
};

// Decoupled-weight-decay Adam with bias correction. Gradients are expected
// to be clipped already.
template <typename S, typename ParamList>
void adamw_step(ParamList& params, const std::vector<std::vector<S>>& grads, OptimizerState<S>& state, double lr,
                double beta1, double beta2, double weight_decay, double eps = 1e-8) {
  if (grads.size() != params.size() || state.m.size() != params.size())
    throw ShapeError("adamw_step: parameter/gradient/state count mismatch");
  ++state.step;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor<S>& p = *params[i].second;
    const auto& g = grads[i];
    if (g.size() != p.size()) throw ShapeError("adamw_step: gradient size mismatch at " + params[i].first);
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (size_t j = 0; j < g.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = beta1 * static_cast<double>(m[j]) + (1.0 - beta1) * gj;
      const double vj = beta2 * static_cast<double>(v[j]) + (1.0 - beta2) * gj * gj;
      m[j] = static_cast<S>(mj);
      v[j] = static_cast<S>(vj);
      const double update = (mj / bc1) / (std::sqrt(vj / bc2) + eps) + weight_decay * static_cast<double>(p[j]);
      p[j] = static_cast<S>(static_cast<double>(p[j]) - lr * update);
    }
  }
}

struct TraceEntry {
  int64_t step;
  double loss;
  double lr;
};

struct TrainResult {
  std::vector<TraceEntry> trace;
  int64_t steps_run = 0;
  double final_loss = 0.0;
};

// One optimizer step over a batch: per-sequence losses and gradients are
// computed in fixed virtual chunks (so results do not depend on the thread
// count), reduced in index order, averaged, clipped, and applied.
template <typename S>
TrainResult train_loop(Model<S>& model, const std::vector<std::vector<int>>& sequences, const TrainConfig& cfg,
                       const std::function<void(int64_t, Model<S>&)>& checkpoint_hook = {}) {
  cfg.validate();
  model.config.validate();
  auto params = model.parameters();
  const size_t n_params = params.size();
  OptimizerState<S> opt = OptimizerState<S>::init(params);

  constexpr size_t kChunks = 8;
  const size_t B = static_cast<size_t>(cfg.batch_size);
  std::vector<std::vector<std::vector<S>>> chunk_grads(kChunks);
  for (auto& cg : chunk_grads) {
    cg.resize(n_params);
    for (size_t i = 0; i < n_params; ++i) cg[i].assign(params[i].second->size(), S{0});
  }
  std::vector<std::vector<S>> grads(n_params);
  for (size_t i = 0; i < n_params; ++i) grads[i].assign(params[i].second->size(), S{0});

  BatchIterator batches(sequences.size(), cfg.batch_size, cfg.seed);
  TrainResult result;
  std::vector<double> seq_loss(B, 0.0);

  for (int64_t step = 0; step < cfg.total_steps; ++step) {
    const std::vector<size_t> batch = batches.next();
    for (auto& cg : chunk_grads)
      for (auto& g : cg) std::fill(g.begin(), g.end(), S{0});

    parallel_chunks(B, kChunks, cfg.threads, [&](size_t chunk, size_t begin, size_t end) {
      for (size_t i = begin; i < end; ++i) {
        const std::vector<int>& x = sequences[batch[i]];
        int content_len = static_cast<int>(x.size());
        while (content_len > 0 && x[static_cast<size_t>(content_len - 1)] == cfg.pad_id) --content_len;
        if (content_len < 1) throw DataError("train: sequence is all padding");

        Rng mask_rng(mix_seed(cfg.seed, static_cast<uint64_t>(step), i));
        const MaskSample sample = cfg.strategy.draw(content_len, mask_rng);
        // context = everything outside the sampled blanks, including pads
        std::vector<int> context = complement_positions(sample.blank_ids, static_cast<int>(x.size()));

        Rng drop_rng(mix_seed(cfg.seed ^ 0xd0d0d0d0ULL, static_cast<uint64_t>(step), i));
        Rng* drng = model.config.dropout_rate > 0.0 ? &drop_rng : nullptr;

        Tape<S> tape;
        TapeGuard<S> guard(tape);
        for (auto& [name, t] : params) tape.watch(*t);
        Tensor<S> loss = cfg.objective == TrainConfig::Objective::car
                             ? car_loss(model, x, context, cfg.pad_id, drng)
                             : ac_loss(model, x, context, cfg.pad_id, drng);
        tape.backward(loss);
        seq_loss[i] = static_cast<double>(loss[0]);
        auto& cg = chunk_grads[chunk];
        for (size_t pi = 0; pi < n_params; ++pi) {
          const auto& g = tape.grad_if_any(tape.slot_of(*params[pi].second));
          if (g.empty()) continue;
          auto& acc = cg[pi];
          for (size_t j = 0; j < g.size(); ++j) acc[j] += g[j];
        }
      }
    });

    double batch_loss = 0.0;
    for (size_t i = 0; i < B; ++i) batch_loss += seq_loss[i];
    batch_loss /= static_cast<double>(B);
    if (!std::isfinite(batch_loss))
      throw NumericError("train: non-finite loss at step " + std::to_string(step));

    const S inv_b = S{1} / static_cast<S>(B);
    for (size_t pi = 0; pi < n_params; ++pi) {
      auto& g = grads[pi];
      std::fill(g.begin(), g.end(), S{0});
      for (size_t c = 0; c < kChunks; ++c) {
        const auto& cg = chunk_grads[c][pi];
        for (size_t j = 0; j < g.size(); ++j) g[j] += cg[j];
      }
      for (auto& v : g) v *= inv_b;
    }

    clip_global_norm(grads, cfg.clip_norm);
    const double lr = lr_at(step, cfg);
    adamw_step(params, grads, opt, lr, cfg.beta1, cfg.beta2, cfg.weight_decay);

    result.trace.push_back(TraceEntry{step, batch_loss, lr});
    result.steps_run = step + 1;
    result.final_loss = batch_loss;

    if (checkpoint_hook && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0)
      checkpoint_hook(step + 1, model);

    if (cfg.early_stop_loss > 0.0 && static_cast<int64_t>(result.trace.size()) >= cfg.early_stop_window) {
      double window_mean = 0.0;
      for (size_t i = result.trace.size() - static_cast<size_t>(cfg.early_stop_window); i < result.trace.size(); ++i)
        window_mean += result.trace[i].loss;
      window_mean /= cfg.early_stop_window;
      if (window_mean < cfg.early_stop_loss) break;
    }
  }
  if (checkpoint_hook) checkpoint_hook(result.steps_run, model);
  return result;
}

}  // namespace tracformer
