#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "depthkit/oracles.hpp"
#include "depthkit/tensor.hpp"

namespace depthkit {

// ---------------------------------------------------------------------------
// The variational picture: token interaction energy, per-token potential, and
// the checker tying simplified attention to the interaction-energy gradient.
// ---------------------------------------------------------------------------

template <typename S>
struct TokenConfig {
  Tensor<S> X;  // n x d token configuration

  explicit TokenConfig(Tensor<S> x) : X(std::move(x)) {
    if (X.rank() != 2 || X.dim(0) < 1 || X.dim(1) < 1) {
      throw ShapeError("token configuration must be [n, d] with n, d >= 1, got " +
                       shape_str(X.shape()));
    }
    if (!X.all_finite()) {
      throw NumericalError("token configuration has non-finite entries");
    }
  }

  int64_t n() const { return X.dim(0); }
  int64_t d() const { return X.dim(1); }
};

/// sigma drives the per-token potential: the potential's primitive v (with
/// v' = sigma) is never evaluated, only its derivative.
template <typename S>
struct PotentialSpec {
  std::function<S(S)> sigma;
};

/// All pairwise dot products <x_i, x_j>, guarded against exp overflow.
template <typename S>
Tensor<S> interaction_logits(const TokenConfig<S>& cfg) {
  int64_t n = cfg.n();
  Tensor<S> g({n, n});
  g.mat().noalias() = cfg.X.mat() * cfg.X.mat().transpose();
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      if (std::abs(double(g.at(i, j))) > 700.0) {
        throw RangeError("interaction logit overflow at pair (" +
                         std::to_string(i) + ", " + std::to_string(j) +
                         "): " + std::to_string(double(g.at(i, j))));
      }
    }
  }
  return g;
}

/// Full double sum of e^<x_i, x_j>, i = j terms included.
template <typename S>
S interaction_energy(const TokenConfig<S>& cfg) {
  Tensor<S> g = interaction_logits(cfg);
  return g.arr().exp().sum();
}

/// Row-stochastic softmax weights w_ij = e^<x_i,x_j> / sum_k e^<x_i,x_k>;
/// causal restricts each row's sum to j <= i (masked entries exactly zero).
template <typename S>
Tensor<S> interaction_weights(const TokenConfig<S>& cfg, bool causal = false) {
  Tensor<S> g = interaction_logits(cfg);
  int64_t n = cfg.n();
  Tensor<S> w({n, n});
  for (int64_t i = 0; i < n; ++i) {
    int64_t active = causal ? (i + 1) : n;
    S m = g.at(i, 0);
    for (int64_t j = 1; j < active; ++j) m = std::max(m, g.at(i, j));
    S total = S(0);
    for (int64_t j = 0; j < active; ++j) {
      S e = std::exp(g.at(i, j) - m);
      w.at(i, j) = e;
      total += e;
    }
    for (int64_t j = 0; j < active; ++j) w.at(i, j) /= total;
    for (int64_t j = active; j < n; ++j) w.at(i, j) = S(0);
  }
  return w;
}

/// Modulated gradient of the interaction energy: row i is the softmax-weighted
/// average of the tokens, i.e. what one attention step moves x_i towards.
template <typename S>
Tensor<S> interaction_grad(const TokenConfig<S>& cfg, bool causal = false) {
  Tensor<S> w = interaction_weights(cfg, causal);
  Tensor<S> out({cfg.n(), cfg.d()});
  out.mat().noalias() = w.mat() * cfg.X.mat();
  return out;
}

/// Gradient of the separable potential F(X) = sum_i sum_l v(x_i^(l)) with
/// v' = sigma: just sigma applied entry-wise.
template <typename S>
Tensor<S> potential_grad(const TokenConfig<S>& cfg, const PotentialSpec<S>& spec) {
  Tensor<S> out(cfg.X.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = spec.sigma(cfg.X[i]);
  return out;
}

/// Runs single-head attention with Q = K = V = identity, LayerNorm off, raw
/// (unscaled) logits and no output projection, and returns the largest entry
/// deviation from interaction_grad across the unmasked and causal variants.
template <typename S>
S attention_equivalence_check(const TokenConfig<S>& cfg) {
  int64_t d = cfg.d();
  Tape<S> tape;
  Var<S> x = tape.constant(cfg.X);
  Tensor<S> wqkv({d, 3 * d});
  for (int64_t i = 0; i < d; ++i) {
    wqkv.at(i, i) = S(1);
    wqkv.at(i, d + i) = S(1);
    wqkv.at(i, 2 * d + i) = S(1);
  }
  AttnParams<S> p;
  p.ln_gain = tape.constant(Tensor<S>::full({d}, S(1)));
  p.w_qkv = tape.constant(wqkv);
  p.w_out = tape.constant(Tensor<S>::eye(d));
  p.heads = 1;
  AttnOpts<S> opts;
  opts.pre_layernorm = false;
  opts.scaled = false;
  opts.out_proj = false;
  S worst = S(0);
  for (bool causal : {false, true}) {
    Var<S> dir = attn_forward(x, p, causal, opts);
    Tensor<S> ref = interaction_grad(cfg, causal);
    for (int64_t i = 0; i < ref.numel(); ++i) {
      worst = std::max(worst, std::abs(dir.value()[i] - ref[i]));
    }
  }
  return worst;
}

}  // namespace depthkit
