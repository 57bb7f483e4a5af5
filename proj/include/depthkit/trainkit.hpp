#pragma once

// Deterministic training loop: AdamW with parameter groups, cosine schedule
// with linear warmup, global gradient clipping, periodic evaluation on a fixed
// validation subset, best/final checkpoints, CSV metrics.
//
// Everything downstream of (config, seed, corpus) is a pure function; two runs
// produce byte-identical metrics files.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "depthkit/checkpoint.hpp"
#include "depthkit/datapipe.hpp"
#include "depthkit/model.hpp"

namespace depthkit {

struct TrainConfig {
  int64_t steps = 300;
  int64_t warmup_steps = 30;
  double peak_lr = 2e-3;
  double min_lr_ratio = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double clip_norm = 1.0;
  int64_t batch_sequences = 4;
  int64_t grad_accum = 1;
  int64_t eval_every = 100;
  int64_t eval_batches = 16;
  double scalar_lr_mult = 5.0;
  double val_fraction = 0.05;
  uint64_t seed = 1;
};

inline void validate(const TrainConfig& c) {
  if (c.steps < 0) throw ConfigError("steps must be >= 0");
  if (c.warmup_steps < 0 || c.warmup_steps > c.steps) {
    throw ConfigError("warmup_steps must lie in [0, steps]");
  }
  if (!(c.peak_lr > 0)) throw ConfigError("peak_lr must be > 0");
  if (!(c.min_lr_ratio > 0)) throw ConfigError("min_lr_ratio must be > 0");
  if (!(c.beta1 >= 0 && c.beta1 < 1) || !(c.beta2 >= 0 && c.beta2 < 1)) {
    throw ConfigError("betas must lie in [0, 1)");
  }
  if (!(c.eps > 0)) throw ConfigError("eps must be > 0");
  if (c.weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
  if (!(c.clip_norm > 0)) throw ConfigError("clip_norm must be > 0");
  if (c.batch_sequences < 1) throw ConfigError("batch_sequences must be >= 1");
  if (c.grad_accum < 1) throw ConfigError("grad_accum must be >= 1");
  if (c.eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (c.eval_batches < 1) throw ConfigError("eval_batches must be >= 1");
  if (!(c.scalar_lr_mult > 0)) throw ConfigError("scalar_lr_mult must be > 0");
  if (!(c.val_fraction >= 0 && c.val_fraction < 1)) {
    throw ConfigError("val_fraction must lie in [0, 1)");
  }
}

// Linear ramp to the peak over the warmup, cosine down to min_lr_ratio x peak
// at the final step, flat afterwards.  The three anchor points (mid-warmup,
// warmup end, final step) are computed exactly, not through the cosine.
inline double lr_at(int64_t step, const TrainConfig& c) {
  const double peak = c.peak_lr;
  const double floor_lr = c.min_lr_ratio * peak;
  if (step >= c.steps) return floor_lr;
  if (c.warmup_steps > 0 && step < c.warmup_steps) {
    return peak * (double(step) / double(c.warmup_steps));
  }
  if (step == c.warmup_steps) return peak;
  double progress =
      double(step - c.warmup_steps) / double(c.steps - c.warmup_steps);
  return floor_lr + (peak - floor_lr) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

enum class ParamGroup { Embedding, Matrix, Norm, Scalar };

inline const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::Embedding: return "embedding";
    case ParamGroup::Matrix: return "matrix";
    case ParamGroup::Norm: return "norm";
    case ParamGroup::Scalar: return "scalar";
  }
  return "?";
}

// Embedding tables decay at 0.1; matrices at the configured rate; gains,
// biases, and the per-block scalars are decay-free; scalars train hotter.
inline ParamGroup group_of(const std::string& name, int64_t rank) {
  if (name.find(".scalars.") != std::string::npos) return ParamGroup::Scalar;
  if (name.size() >= 4 && name.compare(name.size() - 4, 4, "_emb") == 0) {
    return ParamGroup::Embedding;
  }
  return rank >= 2 ? ParamGroup::Matrix : ParamGroup::Norm;
}

inline double group_weight_decay(ParamGroup g, const TrainConfig& c) {
  switch (g) {
    case ParamGroup::Embedding: return 0.1;
    case ParamGroup::Matrix: return c.weight_decay;
    default: return 0.0;
  }
}

inline double group_lr_mult(ParamGroup g, const TrainConfig& c) {
  return g == ParamGroup::Scalar ? c.scalar_lr_mult : 1.0;
}

template <typename S>
struct OptimState {
  std::vector<Tensor<S>> m, v;
  int64_t step = 0;

  template <typename ParamsT>
  static OptimState zeros_like(const ParamsT& params) {
    OptimState s;
    for (const auto& [name, t] : params) {
      s.m.push_back(Tensor<S>::zeros(t.shape()));
      s.v.push_back(Tensor<S>::zeros(t.shape()));
    }
    return s;
  }
};

// Decoupled decay first, then the moment update.  Moments and the update are
// accumulated in double regardless of the parameter scalar type.
template <typename S>
void adamw_update(Tensor<S>& p, const Tensor<S>& g, Tensor<S>& m, Tensor<S>& v,
                  int64_t t, double lr, double wd, const TrainConfig& c) {
  if (!p.same_shape(g) || !p.same_shape(m) || !p.same_shape(v)) {
    throw ShapeError("adamw shapes disagree");
  }
  if (t < 1) throw ContractError("adamw step index must be >= 1");
  const double bc1 = 1.0 - std::pow(c.beta1, double(t));
  const double bc2 = 1.0 - std::pow(c.beta2, double(t));
  for (int64_t i = 0; i < p.numel(); ++i) {
    double pi = double(p[i]) * (1.0 - lr * wd);
    double gi = double(g[i]);
    double mi = c.beta1 * double(m[i]) + (1.0 - c.beta1) * gi;
    double vi = c.beta2 * double(v[i]) + (1.0 - c.beta2) * gi * gi;
    m[i] = S(mi);
    v[i] = S(vi);
    double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + c.eps);
    p[i] = S(pi - update);
  }
}

// Returns the observed global 2-norm; rescales in place when it exceeds the
// budget.
template <typename S>
double clip_global_norm(std::vector<Tensor<S>>& grads, double max_norm) {
  double sq = 0;
  for (const auto& g : grads) {
    for (int64_t i = 0; i < g.numel(); ++i) sq += double(g[i]) * double(g[i]);
  }
  double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    double scale = max_norm / norm;
    for (auto& g : grads) {
      for (int64_t i = 0; i < g.numel(); ++i) g[i] = S(double(g[i]) * scale);
    }
  }
  return norm;
}

struct MetricRow {
  int64_t step = 0;
  std::string split;
  double loss = 0;
  double lr = 0;
};

struct TrainResult {
  std::vector<MetricRow> metrics;
  double initial_train_loss = std::numeric_limits<double>::quiet_NaN();
  double final_train_loss = std::numeric_limits<double>::quiet_NaN();
  double best_val = std::numeric_limits<double>::infinity();
  int64_t best_val_step = -1;
  double final_val = std::numeric_limits<double>::quiet_NaN();
  std::string metrics_path, best_ckpt_path, final_ckpt_path;
  std::vector<std::vector<std::vector<int64_t>>> val_batches;
};

template <typename S>
double evaluate(const Model<S>& model,
                const std::vector<std::vector<std::vector<int64_t>>>& batches) {
  if (batches.empty()) throw ContractError("no evaluation batches");
  double total = 0;
  for (const auto& windows : batches) {
    Tape<S> tape(false);
    Forward<S> f(tape, model);
    total += double(f.batch_loss(windows).value()[0]);
  }
  return total / double(batches.size());
}

namespace detail {

inline std::string format_metric(double x) {
  std::ostringstream ss;
  ss << std::setprecision(17) << x;
  return ss.str();
}

template <typename S>
std::string param_health(
    const std::vector<std::pair<std::string, Tensor<S>>>& params) {
  int64_t bad = 0;
  std::string first_bad;
  for (const auto& [name, t] : params) {
    if (!t.all_finite()) {
      if (bad == 0) first_bad = name;
      ++bad;
    }
  }
  if (bad == 0) return "all parameter tensors finite";
  return std::to_string(bad) + " of " + std::to_string(params.size()) +
         " parameter tensors non-finite (first: " + first_bad + ")";
}

}  // namespace detail

// Runs the full loop and leaves metrics.csv, best.ckpt, and final.ckpt in
// out_dir.  config_json is echoed into the checkpoints verbatim.
template <typename S>
TrainResult train(Model<S>& model, const Corpus& corpus, const TrainConfig& tc,
                  const std::string& out_dir, const std::string& config_json,
                  std::ostream* log = nullptr) {
  validate(tc);
  validate(model.cfg);
  const int64_t T = model.cfg.context;

  std::vector<int> split = split_documents(corpus.documents.size(),
                                           tc.val_fraction, tc.seed);
  std::vector<std::string> train_docs, val_docs;
  for (size_t i = 0; i < corpus.documents.size(); ++i) {
    (split[i] == 0 ? train_docs : val_docs).push_back(corpus.documents[i]);
  }
  std::vector<int64_t> train_stream = tokenize(train_docs);
  std::vector<int64_t> val_stream = tokenize(val_docs);
  if (int64_t(train_stream.size()) < T + 1) {
    throw DataError("training split has " +
                    std::to_string(train_stream.size()) +
                    " tokens, need at least " + std::to_string(T + 1));
  }
  if (int64_t(val_stream.size()) < T + 1) {
    throw DataError("validation split has " + std::to_string(val_stream.size()) +
                    " tokens, need at least " + std::to_string(T + 1) +
                    "; raise val_fraction or enlarge the corpus");
  }

  WindowStream train_ws(std::move(train_stream), T, mix64(tc.seed, 1));
  WindowStream val_ws(std::move(val_stream), T, mix64(tc.seed, 2));

  TrainResult res;
  for (int64_t b = 0; b < tc.eval_batches; ++b) {
    res.val_batches.push_back(val_ws.next_batch(tc.batch_sequences));
  }

  std::filesystem::create_directories(out_dir);
  res.metrics_path = (std::filesystem::path(out_dir) / "metrics.csv").string();
  res.best_ckpt_path = (std::filesystem::path(out_dir) / "best.ckpt").string();
  res.final_ckpt_path = (std::filesystem::path(out_dir) / "final.ckpt").string();
  std::ofstream csv(res.metrics_path, std::ios::trunc);
  if (!csv) throw DataError("cannot write " + res.metrics_path);
  csv << "step,split,loss,lr\n";

  OptimState<S> opt = OptimState<S>::zeros_like(model.params);
  auto snapshot = [&](const std::string& path) {
    std::vector<std::pair<std::string, Tensor<S>>> blob = model.params;
    for (size_t i = 0; i < model.params.size(); ++i) {
      blob.emplace_back("opt.m." + model.params[i].first, opt.m[i]);
      blob.emplace_back("opt.v." + model.params[i].first, opt.v[i]);
    }
    save_checkpoint(path, blob, uint64_t(opt.step), config_json);
  };
  auto emit = [&](int64_t step, const char* split_name, double loss, double lr) {
    res.metrics.push_back({step, split_name, loss, lr});
    csv << step << ',' << split_name << ',' << detail::format_metric(loss)
        << ',' << detail::format_metric(lr) << '\n';
    csv.flush();
  };
  auto run_eval = [&](int64_t step) {
    double val = evaluate(model, res.val_batches);
    emit(step, "val", val, lr_at(step, tc));
    if (log) {
      *log << "step " << step << " val " << val << "\n";
    }
    res.final_val = val;
    if (val < res.best_val) {
      res.best_val = val;
      res.best_val_step = step;
      snapshot(res.best_ckpt_path);
    }
  };

  run_eval(0);

  std::vector<Tensor<S>> acc;
  for (const auto& [name, t] : model.params) acc.push_back(Tensor<S>::zeros(t.shape()));

  for (int64_t s = 1; s <= tc.steps; ++s) {
    for (auto& a : acc) a.arr().setZero();
    double loss_sum = 0;
    for (int64_t micro = 0; micro < tc.grad_accum; ++micro) {
      auto windows = train_ws.next_batch(tc.batch_sequences);
      Tape<S> tape(false);
      Forward<S> f(tape, model);
      Var<S> loss = f.batch_loss(windows);
      double lv = double(loss.value()[0]);
      if (!std::isfinite(lv)) {
        throw NumericalError("non-finite training loss at step " +
                             std::to_string(s) + "; " +
                             detail::param_health(model.params));
      }
      loss_sum += lv;
      tape.backward(loss);
      const auto& bound = f.bound();
      const double inv_g = 1.0 / double(tc.grad_accum);
      for (size_t i = 0; i < bound.size(); ++i) {
        Tensor<S> g = tape.grad(bound[i].second);
        acc[i].arr() += g.arr() * S(inv_g);
      }
    }
    double train_loss = loss_sum / double(tc.grad_accum);
    if (s == 1) res.initial_train_loss = train_loss;
    res.final_train_loss = train_loss;

    clip_global_norm(acc, tc.clip_norm);
    double lr = lr_at(s, tc);
    opt.step = s;
    for (size_t i = 0; i < model.params.size(); ++i) {
      ParamGroup grp = group_of(model.params[i].first,
                                model.params[i].second.rank());
      adamw_update(model.params[i].second, acc[i], opt.m[i], opt.v[i], s,
                   lr * group_lr_mult(grp, tc), group_weight_decay(grp, tc),
                   tc);
    }
    emit(s, "train", train_loss, lr);
    if (s % tc.eval_every == 0 || s == tc.steps) run_eval(s);
  }

  snapshot(res.final_ckpt_path);
  csv.close();
  return res;
}

}  // namespace depthkit
