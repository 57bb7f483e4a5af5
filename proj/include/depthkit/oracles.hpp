#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "depthkit/tape.hpp"

namespace depthkit {

// ---------------------------------------------------------------------------
// The two learned oracles every depth-update rule consumes: pre-norm causal
// self-attention and the GELU MLP. Both return a residual *direction*; the
// caller decides how to combine it with the running state.
// ---------------------------------------------------------------------------

template <typename S>
struct AttnParams {
  Var<S> ln_gain;  // d
  Var<S> ln_bias;  // optional d
  Var<S> w_qkv;    // d x 3d, column blocks Q | K | V
  Var<S> w_out;    // d x d
  int heads = 1;
};

template <typename S>
struct AttnOpts {
  bool pre_layernorm = true;
  bool scaled = true;    // logits divided by sqrt(head width)
  bool out_proj = true;
  int64_t max_context = 0;  // 0 disables the length check
  std::vector<Tensor<S>>* weight_sink = nullptr;  // per-head softmax matrices
};

template <typename S>
Var<S> attn_forward(Var<S> x, const AttnParams<S>& p, bool causal,
                    const AttnOpts<S>& opts = {}) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = x.value();
  if (xv.rank() != 2) {
    throw ShapeError("attention input must be [n, d], got " + shape_str(xv.shape()));
  }
  int64_t n = xv.dim(0), d = xv.dim(1);
  if (opts.max_context > 0 && n > opts.max_context) {
    throw ContextError("sequence length " + std::to_string(n) +
                       " exceeds context " + std::to_string(opts.max_context));
  }
  if (p.heads < 1 || d % p.heads != 0) {
    throw ShapeError("width " + std::to_string(d) + " not divisible by " +
                     std::to_string(p.heads) + " heads");
  }
  const Tensor<S>& wv = p.w_qkv.value();
  if (wv.rank() != 2 || wv.dim(0) != d || wv.dim(1) != 3 * d) {
    throw ShapeError("fused qkv must be [d, 3d], got " + shape_str(wv.shape()) +
                     " for width " + std::to_string(d));
  }
  int64_t dh = d / p.heads;
  Var<S> h = opts.pre_layernorm ? t.layernorm(x, p.ln_gain, p.ln_bias) : x;
  Var<S> qkv = t.matmul(h, p.w_qkv);
  std::vector<Var<S>> merged;
  for (int hh = 0; hh < p.heads; ++hh) {
    Var<S> q = t.slice_cols(qkv, hh * dh, dh);
    Var<S> k = t.slice_cols(qkv, d + hh * dh, dh);
    Var<S> v = t.slice_cols(qkv, 2 * d + hh * dh, dh);
    Var<S> logits = t.matmul(q, t.transpose(k));
    if (opts.scaled) logits = t.scale(logits, S(1.0 / std::sqrt(double(dh))));
    Var<S> w = t.softmax_rows(logits, causal);
    if (opts.weight_sink) opts.weight_sink->push_back(w.value());
    merged.push_back(t.matmul(w, v));
  }
  Var<S> cat = merged.size() == 1 ? merged[0] : t.concat_cols(merged);
  return opts.out_proj ? t.matmul(cat, p.w_out) : cat;
}

template <typename S>
struct MlpParams {
  Var<S> ln_gain;  // d
  Var<S> ln_bias;  // optional d
  Var<S> w_in;     // d x 4d
  Var<S> w_out;    // 4d x d
  Var<S> bias_in;  // optional 4d, off by default
};

template <typename S>
Var<S> mlp_forward(Var<S> x, const MlpParams<S>& p) {
  Tape<S>& t = *x.tape;
  const Tensor<S>& xv = x.value();
  if (xv.rank() != 2) {
    throw ShapeError("mlp input must be [n, d], got " + shape_str(xv.shape()));
  }
  int64_t d = xv.dim(1);
  const Tensor<S>& wi = p.w_in.value();
  const Tensor<S>& wo = p.w_out.value();
  if (wi.rank() != 2 || wi.dim(0) != d || wi.dim(1) != 4 * d) {
    throw ShapeError("mlp w_in must be [d, 4d], got " + shape_str(wi.shape()));
  }
  if (wo.rank() != 2 || wo.dim(0) != 4 * d || wo.dim(1) != d) {
    throw ShapeError("mlp w_out must be [4d, d], got " + shape_str(wo.shape()));
  }
  Var<S> h = t.matmul(t.layernorm(x, p.ln_gain, p.ln_bias), p.w_in);
  if (p.bias_in.valid()) h = t.add_row(h, p.bias_in);
  return t.matmul(t.gelu(h), p.w_out);
}

}  // namespace depthkit
