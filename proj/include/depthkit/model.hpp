#pragma once

// Decoder-only LM assembled from interchangeable depth-update blocks.
//
// The parameter store is an ordered list of (name, tensor) pairs; the order is
// the allocation order and everything downstream (optimizer state, checkpoint
// layout, gradient accumulation) indexes into it positionally.  Names follow
// "layers.3.attn.w_qkv" style paths.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "depthkit/common.hpp"
#include "depthkit/oracles.hpp"
#include "depthkit/tape.hpp"
#include "depthkit/tensor.hpp"
#include "depthkit/update_rules.hpp"

namespace depthkit {

struct ModelConfig {
  int64_t n_layers = 2;
  int64_t n_heads = 2;
  int64_t dim = 64;
  int64_t vocab = 257;
  int64_t context = 256;
  UpdateVariant variant;
  bool bias = false;
  bool lnv_enabled = true;
};

inline void validate(const ModelConfig& cfg) {
  if (cfg.n_layers < 0) throw ConfigError("n_layers must be >= 0");
  if (cfg.n_heads < 1) throw ConfigError("n_heads must be >= 1");
  if (cfg.dim < 1) throw ConfigError("dim must be >= 1");
  if (cfg.dim % cfg.n_heads != 0) {
    throw ConfigError("dim " + std::to_string(cfg.dim) +
                      " not divisible by n_heads " + std::to_string(cfg.n_heads));
  }
  if (cfg.vocab < 2) throw ConfigError("vocab must be >= 2");
  if (cfg.context < 1) throw ConfigError("context must be >= 1");
  if (cfg.variant.k < 1) throw ConfigError("k must be >= 1");
}

// Headline parameter accounting.  non_positional covers the token embedding,
// all block matrices and their norm gains/biases, and the final norm; both
// positional tables, the velocity tables, the per-block scalars, and the
// velocity-norm gains are itemized separately.
struct ParamCounts {
  int64_t non_positional = 0;
  int64_t positional = 0;
  int64_t velocity_token = 0;
  int64_t velocity_positional = 0;
  int64_t scalars = 0;
  int64_t lnv = 0;
  int64_t total = 0;
};

inline ParamCounts count_params(const ModelConfig& cfg) {
  validate(cfg);
  const int64_t L = cfg.n_layers, d = cfg.dim, V = cfg.vocab, T = cfg.context;
  const int64_t per_layer_mats = 12 * d * d + (cfg.bias ? 4 * d : 0);
  const int64_t per_layer_norms = 2 * d * (cfg.bias ? 2 : 1);
  ParamCounts c;
  c.non_positional = V * d + L * (per_layer_mats + per_layer_norms) +
                     d * (cfg.bias ? 2 : 1);
  c.positional = T * d;
  if (uses_velocity(cfg.variant)) {
    c.velocity_token = V * d;
    c.velocity_positional = T * d;
    if (cfg.lnv_enabled) c.lnv = L * d * (cfg.bias ? 2 : 1);
  }
  ScalarSet s = scalars_for(cfg.variant);
  int64_t per_layer_scalars = int64_t(s.mu) + int64_t(s.mu_half) +
                              int64_t(s.beta) + int64_t(s.beta_half) +
                              int64_t(s.gamma) + int64_t(s.gamma_half) +
                              int64_t(s.delta);
  c.scalars = L * per_layer_scalars;
  c.total = c.non_positional + c.positional + c.velocity_token +
            c.velocity_positional + c.scalars + c.lnv;
  return c;
}

template <typename ScalarT>
struct Model {
  using Scalar = ScalarT;

  ModelConfig cfg;
  std::vector<std::pair<std::string, Tensor<Scalar>>> params;

  Tensor<Scalar>& find(const std::string& name) {
    for (auto& [n, t] : params) {
      if (n == name) return t;
    }
    throw ContractError("no parameter named " + name);
  }
  const Tensor<Scalar>& find(const std::string& name) const {
    return const_cast<Model*>(this)->find(name);
  }
  bool has(const std::string& name) const {
    for (const auto& [n, t] : params) {
      if (n == name) return true;
    }
    return false;
  }
};

// Deterministic initialization: one generator stream consumed in allocation
// order.  Matrices and embeddings are N(0, 0.02); the two per-block output
// projections shrink by 1/sqrt(2L) so the residual stream starts near unit
// scale; gains are one, biases zero.  Scalar raws start at the values whose
// reparameterized coefficients are 0.5 (gates) and 1 (step sizes).
template <typename S>
Model<S> init_model(const ModelConfig& cfg, uint64_t seed) {
  validate(cfg);
  const int64_t L = cfg.n_layers, d = cfg.dim, V = cfg.vocab, T = cfg.context;
  const double base_sd = 0.02;
  const double resid_sd = L > 0 ? base_sd / std::sqrt(2.0 * double(L)) : base_sd;

  Model<S> m;
  m.cfg = cfg;
  Rng rng(seed);
  auto put = [&](std::string name, Tensor<S> t) {
    m.params.emplace_back(std::move(name), std::move(t));
  };
  auto gauss = [&](std::vector<int64_t> shape, double sd) {
    return Tensor<S>::randn(std::move(shape), rng, sd);
  };

  put("tok_emb", gauss({V, d}, base_sd));
  put("pos_emb", gauss({T, d}, base_sd));
  if (uses_velocity(cfg.variant)) {
    put("vel_tok_emb", gauss({V, d}, base_sd));
    put("vel_pos_emb", gauss({T, d}, base_sd));
  }

  ScalarSet sset = scalars_for(cfg.variant);
  const S gate_raw = S(0);                                // sigmoid -> 0.5
  const S step_raw = S(reparam_pos_inverse(1.0));         // softplus -> 1
  for (int64_t i = 0; i < L; ++i) {
    std::string p = "layers." + std::to_string(i) + ".";
    put(p + "attn.ln_gain", Tensor<S>::full({d}, S(1)));
    if (cfg.bias) put(p + "attn.ln_bias", Tensor<S>::zeros({d}));
    put(p + "attn.w_qkv", gauss({d, 3 * d}, base_sd));
    put(p + "attn.w_out", gauss({d, d}, resid_sd));
    put(p + "mlp.ln_gain", Tensor<S>::full({d}, S(1)));
    if (cfg.bias) put(p + "mlp.ln_bias", Tensor<S>::zeros({d}));
    put(p + "mlp.w_in", gauss({d, 4 * d}, base_sd));
    if (cfg.bias) put(p + "mlp.bias_in", Tensor<S>::zeros({4 * d}));
    put(p + "mlp.w_out", gauss({4 * d, d}, resid_sd));
    if (uses_velocity(cfg.variant) && cfg.lnv_enabled) {
      put(p + "lnv.gain", Tensor<S>::full({d}, S(1)));
      if (cfg.bias) put(p + "lnv.bias", Tensor<S>::zeros({d}));
    }
    if (sset.mu) put(p + "scalars.mu_raw", Tensor<S>::scalar(gate_raw));
    if (sset.mu_half) put(p + "scalars.mu_half_raw", Tensor<S>::scalar(gate_raw));
    if (sset.beta) put(p + "scalars.beta_raw", Tensor<S>::scalar(gate_raw));
    if (sset.beta_half) {
      put(p + "scalars.beta_half_raw", Tensor<S>::scalar(gate_raw));
    }
    if (sset.gamma) put(p + "scalars.gamma_raw", Tensor<S>::scalar(step_raw));
    if (sset.gamma_half) {
      put(p + "scalars.gamma_half_raw", Tensor<S>::scalar(step_raw));
    }
    if (sset.delta) put(p + "scalars.delta_raw", Tensor<S>::scalar(step_raw));
  }
  put("final_ln.gain", Tensor<S>::full({d}, S(1)));
  if (cfg.bias) put("final_ln.bias", Tensor<S>::zeros({d}));
  return m;
}

// Binds every parameter onto one tape and builds forward graphs over it.  All
// sequences pushed through one Forward share the bound parameters, so a single
// backward pass accumulates their gradients.
template <typename ScalarT>
class Forward {
 public:
  using S = ScalarT;

  Forward(Tape<S>& tape, const Model<S>& model) : t_(&tape), m_(&model) {
    vars_.reserve(model.params.size());
    for (const auto& [name, tensor] : model.params) {
      vars_.emplace_back(name, t_->input(tensor));
    }
  }

  Var<S> param(const std::string& name) const {
    for (const auto& [n, v] : vars_) {
      if (n == name) return v;
    }
    throw ContractError("no parameter named " + name);
  }
  const std::vector<std::pair<std::string, Var<S>>>& bound() const {
    return vars_;
  }

  // Token ids -> [n, vocab] logits for one sequence.
  Var<S> logits(const std::vector<int64_t>& tokens) {
    const ModelConfig& cfg = m_->cfg;
    int64_t n = int64_t(tokens.size());
    if (n < 1) throw ShapeError("empty token sequence");
    if (n > cfg.context) {
      throw ContextError("sequence length " + std::to_string(n) +
                         " exceeds context " + std::to_string(cfg.context));
    }
    std::vector<int32_t> ids = narrow_ids(tokens);
    std::vector<int32_t> positions(size_t(n), 0);
    for (int64_t i = 0; i < n; ++i) positions[size_t(i)] = int32_t(i);

    Var<S> tok = param("tok_emb");
    Var<S> x = t_->add(t_->gather(tok, ids),
                       t_->gather(param("pos_emb"), positions));
    Var<S> v;
    if (uses_velocity(cfg.variant)) {
      v = t_->add(t_->gather(param("vel_tok_emb"), ids),
                  t_->gather(param("vel_pos_emb"), positions));
    }

    for (int64_t i = 0; i < cfg.n_layers; ++i) {
      StateXV<S> s = block_step(i, x, v);
      x = s.x;
      v = s.v;
    }

    Var<S> xf = t_->layernorm(x, param("final_ln.gain"),
                              maybe_param("final_ln.bias"));
    return t_->matmul(xf, t_->transpose(tok));
  }

  // Mean next-token loss for one sequence (targets aligned with tokens).
  Var<S> sequence_loss(const std::vector<int64_t>& tokens,
                       const std::vector<int64_t>& targets) {
    if (tokens.size() != targets.size()) {
      throw ShapeError("tokens/targets length mismatch");
    }
    return t_->cross_entropy(logits(tokens), narrow_ids(targets));
  }

  // Mean loss over windows of length n+1: first n are inputs, shifted n are
  // targets.  All windows must share one length.
  Var<S> batch_loss(const std::vector<std::vector<int64_t>>& windows) {
    if (windows.empty()) throw ShapeError("empty batch");
    Var<S> acc;
    for (const auto& w : windows) {
      if (w.size() < 2) throw ShapeError("window shorter than 2 tokens");
      if (w.size() != windows[0].size()) {
        throw ShapeError("ragged batch windows");
      }
      std::vector<int64_t> in(w.begin(), w.end() - 1);
      std::vector<int64_t> tgt(w.begin() + 1, w.end());
      Var<S> l = sequence_loss(in, tgt);
      acc = acc.valid() ? t_->add(acc, l) : l;
    }
    return t_->scale(acc, S(1) / S(windows.size()));
  }

 private:
  static std::vector<int32_t> narrow_ids(const std::vector<int64_t>& ids) {
    std::vector<int32_t> out(ids.size(), 0);
    for (size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] > INT32_MAX) {
        throw VocabError("token id " + std::to_string(ids[i]) + " out of range");
      }
      out[i] = int32_t(ids[i]);
    }
    return out;
  }

  Var<S> maybe_param(const std::string& name) const {
    for (const auto& [n, v] : vars_) {
      if (n == name) return v;
    }
    return Var<S>{};
  }

  StateXV<S> block_step(int64_t layer, Var<S> x, Var<S> v) {
    const ModelConfig& cfg = m_->cfg;
    std::string p = "layers." + std::to_string(layer) + ".";

    AttnParams<S> ap;
    ap.ln_gain = param(p + "attn.ln_gain");
    ap.ln_bias = maybe_param(p + "attn.ln_bias");
    ap.w_qkv = param(p + "attn.w_qkv");
    ap.w_out = param(p + "attn.w_out");
    ap.heads = int(cfg.n_heads);
    MlpParams<S> mp;
    mp.ln_gain = param(p + "mlp.ln_gain");
    mp.ln_bias = maybe_param(p + "mlp.ln_bias");
    mp.w_in = param(p + "mlp.w_in");
    mp.bias_in = maybe_param(p + "mlp.bias_in");
    mp.w_out = param(p + "mlp.w_out");

    OraclePair<S> oracles;
    oracles.attn = [ap](Var<S> xx) { return attn_forward(xx, ap, true); };
    oracles.mlp = [mp](Var<S> xx) { return mlp_forward(xx, mp); };

    VNorm<S> lnv;
    if (uses_velocity(cfg.variant) && cfg.lnv_enabled) {
      Var<S> gain = param(p + "lnv.gain");
      Var<S> bias = maybe_param(p + "lnv.bias");
      Tape<S>* t = t_;
      lnv = [t, gain, bias](Var<S> vv) { return t->layernorm(vv, gain, bias); };
    } else {
      lnv = identity_norm<S>();
    }

    ScalarSet sset = scalars_for(cfg.variant);
    BlockCoeffs<S> c;
    auto gate = [&](const char* leaf) {
      return t_->sigmoid(param(p + "scalars." + leaf));
    };
    auto stepsz = [&](const char* leaf) {
      return t_->softplus(param(p + "scalars." + leaf));
    };
    if (sset.mu) c.mu = gate("mu_raw");
    if (sset.mu_half) c.mu_half = gate("mu_half_raw");
    if (sset.beta) c.beta = gate("beta_raw");
    if (sset.beta_half) c.beta_half = gate("beta_half_raw");
    if (sset.gamma) c.gamma = stepsz("gamma_raw");
    if (sset.gamma_half) c.gamma_half = stepsz("gamma_half_raw");
    if (sset.delta) c.delta = stepsz("delta_raw");

    return step_variant(cfg.variant, x, v, c, oracles, lnv);
  }

  Tape<S>* t_;
  const Model<S>* m_;
  std::vector<std::pair<std::string, Var<S>>> vars_;
};

// Evaluation-only batched forward: fresh graph per call, logits stacked into a
// [batch, n, vocab] tensor.
template <typename S>
Tensor<S> forward_logits(const Model<S>& model,
                         const std::vector<std::vector<int64_t>>& batch) {
  if (batch.empty()) throw ShapeError("empty batch");
  int64_t b = int64_t(batch.size());
  int64_t n = int64_t(batch[0].size());
  Tensor<S> out({b, n, model.cfg.vocab});
  for (int64_t i = 0; i < b; ++i) {
    if (int64_t(batch[size_t(i)].size()) != n) {
      throw ShapeError("ragged batch");
    }
    Tape<S> tape(false);
    Forward<S> f(tape, model);
    Tensor<S> l = f.logits(batch[size_t(i)]).value();
    std::copy(l.data(), l.data() + l.numel(),
              out.data() + i * n * model.cfg.vocab);
  }
  return out;
}

// Mean nats per token over a [batch, n, vocab] logit tensor.
template <typename S>
double cross_entropy_loss(const Tensor<S>& logits,
                          const std::vector<std::vector<int64_t>>& targets) {
  if (logits.rank() != 3) {
    throw ShapeError("expected rank-3 logits, got " + shape_str(logits.shape()));
  }
  int64_t b = logits.dim(0), n = logits.dim(1), vocab = logits.dim(2);
  if (int64_t(targets.size()) != b) throw ShapeError("target batch mismatch");
  double total = 0;
  for (int64_t i = 0; i < b; ++i) {
    if (int64_t(targets[size_t(i)].size()) != n) {
      throw ShapeError("target length mismatch");
    }
    for (int64_t j = 0; j < n; ++j) {
      const S* row = logits.data() + (i * n + j) * vocab;
      int64_t tgt = targets[size_t(i)][size_t(j)];
      if (tgt < 0 || tgt >= vocab) {
        throw VocabError("target id " + std::to_string(tgt) +
                         " outside vocab " + std::to_string(vocab));
      }
      double mx = double(row[0]);
      for (int64_t k = 1; k < vocab; ++k) mx = std::max(mx, double(row[k]));
      double lse = 0;
      for (int64_t k = 0; k < vocab; ++k) lse += std::exp(double(row[k]) - mx);
      total += mx + std::log(lse) - double(row[tgt]);
    }
  }
  return total / double(b * n);
}

}  // namespace depthkit
