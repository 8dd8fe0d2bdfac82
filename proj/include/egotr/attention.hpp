// SPDX-License-Identifier: Apache-2.0
//
// Transformer encoder with two attention wirings.
//
// "self": queries, keys and values all come from the current layer's
// normalized input z_l.
//
// "self_cross": keys come from the previous layer's normalized input
// z_{l-1} while queries and values stay on z_l. The first layer has no
// predecessor and falls back to z_l, so both wirings coincide there. Both
// use the same weight shapes and the same products, so parameter count and
// multiply-accumulate cost are identical per layer.
//
// Layers are pre-norm: y = x + MHA(LN(x)), out = y + FFN(LN(y)). The value
// handed across layers through LayerCache is LN1(x), i.e. the tensor the
// attention block consumed, not the residual stream itself.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "egotr/tensor.hpp"

namespace egotr {

enum class AttentionMode { kSelf, kSelfCross };

inline std::string to_string(AttentionMode m) {
  return m == AttentionMode::kSelf ? "self" : "self_cross";
}

inline AttentionMode attention_mode_from_string(const std::string& s) {
  if (s == "self") return AttentionMode::kSelf;
  if (s == "self_cross") return AttentionMode::kSelfCross;
  throw UsageError("unknown attention mode '" + s +
                   "' (want self or self_cross)");
}

template <typename T>
struct AttentionParams {
  Tensor<T> w_q, w_k, w_v, w_o;  // all [D,D]
  std::size_t num_heads = 1;

  void validate(std::size_t d) const {
    for (const auto* w : {&w_q, &w_k, &w_v, &w_o})
      check_dims(w->defined() && w->rank() == 2 && w->dim(0) == d &&
                     w->dim(1) == d,
                 "attention weights must be [" + std::to_string(d) + "," +
                     std::to_string(d) + "]");
    check_usage(num_heads > 0 && d % num_heads == 0,
                "embed dim " + std::to_string(d) + " not divisible by " +
                    std::to_string(num_heads) + " heads");
  }
};

// Normalized input of the previous layer; undefined before layer 1.
template <typename T>
struct LayerCache {
  Tensor<T> z_prev;
};

namespace detail {

// Scaled dot-product attention with queries/values on z and keys on
// z_keys. Both attention wirings reduce to this on one code path, which
// is what makes them bit-identical when z_keys == z.
template <typename T>
Tensor<T> attention_core(Tape<T>& tape, const Tensor<T>& z,
                         const Tensor<T>& z_keys, const Tensor<T>& wq,
                         const Tensor<T>& wk, const Tensor<T>& wv) {
  check_dims(z.rank() == 2 && z_keys.rank() == 2 && z.dim(1) == z_keys.dim(1),
             "attention: token shapes " + shape_str(z.shape()) + " vs " +
                 shape_str(z_keys.shape()));
  Tensor<T> q = matmul(tape, z, wq);
  Tensor<T> k = matmul(tape, z_keys, wk);
  Tensor<T> v = matmul(tape, z, wv);
  const T inv_sqrt = T(1) / std::sqrt(T(wk.dim(1)));
  Tensor<T> logits = scale(tape, matmul(tape, q, transpose(tape, k)), inv_sqrt);
  Tensor<T> weights = softmax(tape, logits, -1);
  return matmul(tape, weights, v);
}

}  // namespace detail

// Single-head attention over full width D.
template <typename T>
Tensor<T> self_attention(Tape<T>& tape, const Tensor<T>& z,
                         const Tensor<T>& wq, const Tensor<T>& wk,
                         const Tensor<T>& wv) {
  return detail::attention_core(tape, z, z, wq, wk, wv);
}

// Keys from z_prev, queries and values from z. An undefined z_prev selects
// the first-layer rule z_prev := z.
template <typename T>
Tensor<T> self_cross_attention(Tape<T>& tape, const Tensor<T>& z,
                               const Tensor<T>& z_prev, const Tensor<T>& wq,
                               const Tensor<T>& wk, const Tensor<T>& wv) {
  return detail::attention_core(tape, z, z_prev.defined() ? z_prev : z, wq,
                                wk, wv);
}

// Multi-head attention: head i uses columns [i*dh, (i+1)*dh) of each
// projection, scale 1/sqrt(dh), heads concatenated then projected by w_o.
template <typename T>
Tensor<T> multihead_attention(Tape<T>& tape, const Tensor<T>& z,
                              const Tensor<T>& z_prev,
                              const AttentionParams<T>& p,
                              AttentionMode mode) {
  p.validate(z.dim(1));
  const Tensor<T>* keys = &z;
  switch (mode) {
    case AttentionMode::kSelf:
      break;
    case AttentionMode::kSelfCross:
      if (z_prev.defined()) keys = &z_prev;
      break;
    default:
      throw UsageError("multihead_attention: invalid mode");
  }
  const std::size_t d = z.dim(1);
  const std::size_t dh = d / p.num_heads;
  std::vector<Tensor<T>> heads;
  heads.reserve(p.num_heads);
  for (std::size_t h = 0; h < p.num_heads; ++h) {
    const std::size_t c0 = h * dh, c1 = (h + 1) * dh;
    heads.push_back(detail::attention_core(
        tape, z, *keys, slice_cols(tape, p.w_q, c0, c1),
        slice_cols(tape, p.w_k, c0, c1), slice_cols(tape, p.w_v, c0, c1)));
  }
  return matmul(tape, concat_cols(tape, heads), p.w_o);
}

template <typename T>
struct EncoderLayerParams {
  Tensor<T> ln1_gain, ln1_bias;
  AttentionParams<T> attn;
  Tensor<T> ln2_gain, ln2_bias;
  Tensor<T> ffn_w1, ffn_b1;  // [D,F], [F]
  Tensor<T> ffn_w2, ffn_b2;  // [F,D], [D]

  void validate(std::size_t d) const {
    attn.validate(d);
    check_dims(ln1_gain.dim(0) == d && ln1_bias.dim(0) == d &&
                   ln2_gain.dim(0) == d && ln2_bias.dim(0) == d,
               "encoder layer: norm params must have length " +
                   std::to_string(d));
    check_dims(ffn_w1.rank() == 2 && ffn_w1.dim(0) == d &&
                   ffn_w2.rank() == 2 && ffn_w2.dim(1) == d &&
                   ffn_w1.dim(1) == ffn_w2.dim(0) &&
                   ffn_b1.dim(0) == ffn_w1.dim(1) && ffn_b2.dim(0) == d,
               "encoder layer: inconsistent feed-forward shapes");
  }
};

template <typename T>
struct LayerResult {
  Tensor<T> out;
  LayerCache<T> cache;  // z of this layer, consumed by the next
};

template <typename T>
LayerResult<T> encoder_layer(Tape<T>& tape, const Tensor<T>& x,
                             const LayerCache<T>& cache,
                             const EncoderLayerParams<T>& p,
                             AttentionMode mode) {
  p.validate(x.dim(1));
  Tensor<T> z = layer_norm(tape, x, p.ln1_gain, p.ln1_bias);
  Tensor<T> att = multihead_attention(tape, z, cache.z_prev, p.attn, mode);
  Tensor<T> y = add(tape, x, att);
  Tensor<T> h = layer_norm(tape, y, p.ln2_gain, p.ln2_bias);
  Tensor<T> ff = add_bias(
      tape,
      matmul(tape, gelu(tape, add_bias(tape, matmul(tape, h, p.ffn_w1),
                                       p.ffn_b1)),
             p.ffn_w2),
      p.ffn_b2);
  return {add(tape, y, ff), LayerCache<T>{z}};
}

template <typename T>
struct StackResult {
  Tensor<T> out;
  std::vector<Tensor<T>> layer_outputs;  // residual stream after each layer
};

template <typename T>
StackResult<T> encoder_stack(Tape<T>& tape, const Tensor<T>& x0,
                             const std::vector<EncoderLayerParams<T>>& layers,
                             AttentionMode mode) {
  check_usage(!layers.empty(), "encoder_stack: no layers");
  StackResult<T> r;
  r.layer_outputs.reserve(layers.size());
  Tensor<T> x = x0;
  LayerCache<T> cache;
  for (const auto& p : layers) {
    LayerResult<T> lr = encoder_layer(tape, x, cache, p, mode);
    x = lr.out;
    cache = lr.cache;
    r.layer_outputs.push_back(x);
  }
  r.out = x;
  return r;
}

// Weights N(0, 0.02^2), biases zero, norm gains one.
template <typename T>
EncoderLayerParams<T> init_encoder_layer(std::size_t d, std::size_t heads,
                                         std::size_t ffn_dim,
                                         std::mt19937_64& rng) {
  const T std02 = T(0.02);
  EncoderLayerParams<T> p;
  p.ln1_gain = Tensor<T>::full({d}, T(1));
  p.ln1_bias = Tensor<T>({d});
  p.attn.num_heads = heads;
  for (Tensor<T>* w : {&p.attn.w_q, &p.attn.w_k, &p.attn.w_v, &p.attn.w_o}) {
    *w = Tensor<T>({d, d});
    fill_normal(*w, rng, T(0), std02);
  }
  p.ln2_gain = Tensor<T>::full({d}, T(1));
  p.ln2_bias = Tensor<T>({d});
  p.ffn_w1 = Tensor<T>({d, ffn_dim});
  fill_normal(p.ffn_w1, rng, T(0), std02);
  p.ffn_b1 = Tensor<T>({ffn_dim});
  p.ffn_w2 = Tensor<T>({ffn_dim, d});
  fill_normal(p.ffn_w2, rng, T(0), std02);
  p.ffn_b2 = Tensor<T>({d});
  return p;
}

// Parameter name/shape table for one layer; identical for both attention
// modes by construction, and asserted so in the tests.
inline std::vector<std::pair<std::string, Shape>> encoder_layer_param_shapes(
    std::size_t d, std::size_t ffn_dim) {
  return {
      {"ln1.gain", {d}},      {"ln1.bias", {d}},
      {"attn.w_q", {d, d}},   {"attn.w_k", {d, d}},
      {"attn.w_v", {d, d}},   {"attn.w_o", {d, d}},
      {"ln2.gain", {d}},      {"ln2.bias", {d}},
      {"ffn.w1", {d, ffn_dim}}, {"ffn.b1", {ffn_dim}},
      {"ffn.w2", {ffn_dim, d}}, {"ffn.b2", {d}},
  };
}

// Multiply-accumulate count of one encoder layer's matrix products over an
// N-token sequence. One MAC is one scalar multiply-add inside a matmul;
// elementwise work (norms, softmax, gelu, residuals) is excluded. The key
// projection input differs between wirings (this layer's z versus the
// previous layer's) but both are [N, D], so the totals agree; tests assert
// that equality instead of assuming it, which is why each wiring lists its
// products separately here.
inline std::uint64_t encoder_layer_macs(std::size_t n_tokens, std::size_t d,
                                        std::size_t num_heads,
                                        std::size_t ffn_dim,
                                        AttentionMode mode) {
  const std::uint64_t n = n_tokens, dd = d, f = ffn_dim;
  const std::uint64_t dh = dd / num_heads;
  std::uint64_t macs = 0;
  const auto mm = [&](std::uint64_t rows, std::uint64_t inner,
                      std::uint64_t cols) { macs += rows * inner * cols; };
  if (mode == AttentionMode::kSelf) {
    mm(n, dd, dd);  // q = z w_q
    mm(n, dd, dd);  // k = z w_k
    mm(n, dd, dd);  // v = z w_v
  } else {
    mm(n, dd, dd);  // q = z w_q
    mm(n, dd, dd);  // k = z_prev w_k, z_prev is [N, D] like z
    mm(n, dd, dd);  // v = z w_v
  }
  for (std::size_t h = 0; h < num_heads; ++h) {
    mm(n, dh, n);  // scores_h = q_h k_h^T
    mm(n, n, dh);  // mix_h = softmax(scores_h) v_h
  }
  mm(n, dd, dd);  // head concat projection w_o
  mm(n, dd, f);   // feed-forward expand
  mm(n, f, dd);   // feed-forward contract
  return macs;
}

// Applies fn(name, tensor) over every parameter, in a stable order shared
// by initialization, checkpointing and the optimizer.
template <typename T, typename Fn>
void visit_layer_params(EncoderLayerParams<T>& p, const std::string& prefix,
                        Fn&& fn) {
  fn(prefix + "ln1.gain", p.ln1_gain);
  fn(prefix + "ln1.bias", p.ln1_bias);
  fn(prefix + "attn.w_q", p.attn.w_q);
  fn(prefix + "attn.w_k", p.attn.w_k);
  fn(prefix + "attn.w_v", p.attn.w_v);
  fn(prefix + "attn.w_o", p.attn.w_o);
  fn(prefix + "ln2.gain", p.ln2_gain);
  fn(prefix + "ln2.bias", p.ln2_bias);
  fn(prefix + "ffn.w1", p.ffn_w1);
  fn(prefix + "ffn.b1", p.ffn_b1);
  fn(prefix + "ffn.w2", p.ffn_w2);
  fn(prefix + "ffn.b2", p.ffn_b2);
}

}  // namespace egotr
