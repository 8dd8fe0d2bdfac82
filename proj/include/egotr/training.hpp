// SPDX-License-Identifier: Apache-2.0
//
// Metric-learning training: weighted soft-margin triplet loss over
// exhaustive in-batch negatives, AdamW with decoupled decay, cosine
// learning-rate schedule, and a memory-lean epoch loop that recomputes
// per-image graphs instead of holding the whole batch on one tape.

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <sstream>
#include <unordered_set>
#include <vector>

#include "egotr/model.hpp"
#include "egotr/tensor.hpp"

namespace egotr {

// softplus(alpha * (d_pos - d_neg)), computed in the overflow-safe form
// max(x,0) + log1p(exp(-|x|)).
template <typename T>
T triplet_loss(T d_pos, T d_neg, T alpha) {
  check_usage(alpha > T(0), "triplet_loss: alpha must be positive");
  check_usage(d_pos >= T(0) && d_neg >= T(0),
              "triplet_loss: distances must be nonnegative");
  const double x = double(alpha) * (double(d_pos) - double(d_neg));
  const double m = x > 0 ? x : 0;
  return T(m + std::log1p(std::exp(x > 0 ? -x : x)));
}

// Batch loss over index-aligned descriptor rows: row i of f_g matches row i
// of f_a. Every ordered pair (i, j), j != i contributes one term per
// retrieval direction, so the mean runs over 2*B*(B-1) terms.
template <typename T>
Tensor<T> batch_loss(Tape<T>& tape, const Tensor<T>& f_g,
                     const Tensor<T>& f_a, T alpha) {
  check_dims(f_g.rank() == 2 && f_a.rank() == 2 &&
                 f_g.dim(0) == f_a.dim(0) && f_g.dim(1) == f_a.dim(1),
             "batch_loss: want matching [B,D] descriptor matrices, got " +
                 shape_str(f_g.shape()) + " and " + shape_str(f_a.shape()));
  const std::size_t b = f_g.dim(0);
  check_usage(b >= 2, "batch_loss: need at least 2 pairs for negatives");
  check_usage(alpha > T(0), "batch_loss: alpha must be positive");

  Tensor<T> dist = pairwise_l2(tape, f_g, f_a);  // [B,B], d(g_i, a_j)
  Tensor<T> diag = take_diag(tape, dist);        // positive distances

  Tensor<T> ones_row = Tensor<T>::full({1, b}, T(1));
  Tensor<T> ones_col = Tensor<T>::full({b, 1}, T(1));
  // pos_g[i][j] = d(g_i,a_i); pos_a[i][j] = d(g_j,a_j).
  Tensor<T> pos_g = matmul(tape, reshape(tape, diag, {b, 1}), ones_row);
  Tensor<T> pos_a = matmul(tape, ones_col, reshape(tape, diag, {1, b}));

  Tensor<T> mask({b, b});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j)
      mask.at(i, j) = i == j ? T(0) : T(1);

  // Ground anchors: negatives run over row i. Aerial anchors: over column j.
  Tensor<T> loss_g =
      softplus(tape, scale(tape, sub(tape, pos_g, dist), alpha));
  Tensor<T> loss_a =
      softplus(tape, scale(tape, sub(tape, pos_a, dist), alpha));
  Tensor<T> total =
      sum(tape, add(tape, mul(tape, loss_g, mask), mul(tape, loss_a, mask)));
  return scale(tape, total, T(1) / T(2 * b * (b - 1)));
}

// Optimizer state; moment arrays follow the model's parameter visit order.
template <typename T>
struct OptimState {
  double base_lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.03;
  std::uint64_t t = 0;
  std::vector<std::vector<T>> m, v;
};

// One AdamW step at learning rate lr_t. Decay is decoupled and scaled by
// lr_t (applied before the moment update, as in the reference decoupled
// formulation), so lr_t = 0 leaves parameters bit-identical. A parameter
// without an accumulated gradient is treated as having zero gradient.
template <typename T>
void adamw_step(std::span<Tensor<T>> params, OptimState<T>& st, T lr_t) {
  if (st.m.empty()) {
    st.m.resize(params.size());
    st.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      st.m[i].assign(params[i].numel(), T(0));
      st.v[i].assign(params[i].numel(), T(0));
    }
  }
  check_usage(st.m.size() == params.size() && st.v.size() == params.size(),
              "adamw_step: state tracks " + std::to_string(st.m.size()) +
                  " tensors, got " + std::to_string(params.size()));
  st.t += 1;
  const double bc1 = 1.0 - std::pow(st.beta1, double(st.t));
  const double bc2 = 1.0 - std::pow(st.beta2, double(st.t));
  const T decay_scale = T(1.0 - double(lr_t) * st.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = params[i];
    check_usage(st.m[i].size() == p.numel(),
                "adamw_step: moment size mismatch on tensor " +
                    std::to_string(i));
    auto w = p.data();
    const bool has_g = p.has_grad();
    auto g = has_g ? std::as_const(p).grad() : std::span<const T>{};
    for (std::size_t k = 0; k < p.numel(); ++k) {
      const T gk = has_g ? g[k] : T(0);
      st.m[i][k] = T(st.beta1) * st.m[i][k] + T(1.0 - st.beta1) * gk;
      st.v[i][k] = T(st.beta2) * st.v[i][k] + T(1.0 - st.beta2) * gk * gk;
      const T mhat = T(double(st.m[i][k]) / bc1);
      const T vhat = T(double(st.v[i][k]) / bc2);
      w[k] = w[k] * decay_scale;
      w[k] -= lr_t * (mhat / (std::sqrt(vhat) + T(st.eps)));
    }
  }
}

// lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total)) / 2.
inline double cosine_lr(std::uint64_t step, std::uint64_t total_steps,
                        double lr_max, double lr_min = 0.0) {
  check_usage(total_steps > 0, "cosine_lr: total_steps must be positive");
  check_usage(step <= total_steps,
              "cosine_lr: step " + std::to_string(step) + " beyond total " +
                  std::to_string(total_steps));
  const double c =
      std::cos(M_PI * (double(step) / double(total_steps)));
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + c);
}

// Linear ramp for the first warmup_steps, then the cosine arc over the
// remainder. warmup_steps = 0 degenerates to cosine_lr.
inline double warmup_cosine_lr(std::uint64_t step, std::uint64_t warmup_steps,
                               std::uint64_t total_steps, double lr_max,
                               double lr_min = 0.0) {
  check_usage(warmup_steps < total_steps || warmup_steps == 0,
              "warmup_cosine_lr: warmup must be shorter than the schedule");
  if (step < warmup_steps)
    return lr_max * (double(step) + 1.0) / double(warmup_steps);
  return cosine_lr(step - warmup_steps, total_steps - warmup_steps, lr_max,
                   lr_min);
}

// Scales all gradients so their joint L2 norm is at most max_norm.
// Returns the pre-clip norm. max_norm <= 0 disables clipping.
template <typename T>
T clip_global_norm(std::span<Tensor<T>> params, T max_norm) {
  double sq = 0;
  for (auto& p : params) {
    if (!p.has_grad()) continue;
    for (T v : std::as_const(p).grad()) sq += double(v) * double(v);
  }
  const T norm = T(std::sqrt(sq));
  if (max_norm > T(0) && norm > max_norm) {
    const T s = max_norm / norm;
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (T& v : p.grad()) v *= s;
    }
  }
  return norm;
}

template <typename T>
struct TripletBatch {
  std::vector<Tensor<T>> ground, aerial;  // index i is a ground-truth pair
  std::vector<std::uint64_t> ids;

  void validate() const {
    check_usage(ground.size() == aerial.size() &&
                    (ids.empty() || ids.size() == ground.size()),
                "triplet batch: ground/aerial/id counts disagree");
    check_usage(ground.size() >= 2, "triplet batch: need at least 2 pairs");
    std::unordered_set<std::uint64_t> seen(ids.begin(), ids.end());
    check_usage(ids.empty() || seen.size() == ids.size(),
                "triplet batch: duplicate pair ids");
  }
};

struct TrainConfig {
  double alpha = 10.0;
  double clip_norm = 1.0;  // 0 disables
  double lr_min = 0.0;
  std::uint64_t warmup_steps = 0;
  std::uint64_t total_steps = 0;  // full schedule length, required
};

struct EpochMetrics {
  double mean_loss = 0;
  double grad_norm_mean = 0;  // pre-clip
  double lr_last = 0;
  std::size_t batches = 0;
  std::size_t pairs = 0;
};

// One pass over pre-assembled batches. Heavy per-image graphs are built
// twice (descriptor pass without recording, then a recorded pass seeded
// with the loss gradient) so peak memory stays at one image's tape.
template <typename T>
EpochMetrics train_epoch(EgoTrModel<T>& model,
                         const std::vector<TripletBatch<T>>& batches,
                         OptimState<T>& st, const TrainConfig& cfg) {
  check_usage(cfg.total_steps > 0, "train_epoch: schedule length not set");
  check_usage(st.t + batches.size() <= cfg.total_steps,
              "train_epoch: schedule exhausted (step " + std::to_string(st.t) +
                  " of " + std::to_string(cfg.total_steps) + ")");
  model.set_requires_grad(true);
  std::vector<Tensor<T>> params;
  model.visit_params(
      [&](const std::string&, Tensor<T>& t) { params.push_back(t); });
  const std::size_t d = model.config.embed_dim;

  EpochMetrics em;
  for (const TripletBatch<T>& batch : batches) {
    batch.validate();
    const std::size_t b = batch.ground.size();
    model.zero_grad();

    T loss_val;
    try {
      // Descriptor pass, nothing recorded.
      Tensor<T> f_g({b, d}), f_a({b, d});
      {
        Tape<T> fwd;
        fwd.set_recording(false);
        for (std::size_t i = 0; i < b; ++i) {
          Tensor<T> dg = forward_descriptor(fwd, model, batch.ground[i],
                                            Branch::kGround);
          Tensor<T> da = forward_descriptor(fwd, model, batch.aerial[i],
                                            Branch::kAerial);
          std::copy(dg.data().begin(), dg.data().end(),
                    f_g.data().begin() + i * d);
          std::copy(da.data().begin(), da.data().end(),
                    f_a.data().begin() + i * d);
        }
      }

      // Loss head over the descriptor matrices alone.
      f_g.set_requires_grad(true);
      f_a.set_requires_grad(true);
      {
        Tape<T> head;
        Tensor<T> loss = batch_loss(head, f_g, f_a, T(cfg.alpha));
        loss_val = loss.item();
        if (!std::isfinite(double(loss_val)))
          throw NumericError("batch loss is not finite");
        head.backward(loss);
      }

      // Recompute each image with recording on, seeding the branch backward
      // with the loss gradient of its descriptor row.
      for (std::size_t i = 0; i < b; ++i) {
        {
          Tape<T> tape;
          Tensor<T> dg = forward_descriptor(tape, model, batch.ground[i],
                                            Branch::kGround);
          tape.backward(dg, std::as_const(f_g).grad().subspan(i * d, d));
        }
        {
          Tape<T> tape;
          Tensor<T> da = forward_descriptor(tape, model, batch.aerial[i],
                                            Branch::kAerial);
          tape.backward(da, std::as_const(f_a).grad().subspan(i * d, d));
        }
      }
    } catch (const NumericError& e) {
      // Attach the per-parameter norm dump so blowups are diagnosable.
      throw NumericError("train_epoch: non-finite value at optimizer step " +
                         std::to_string(st.t) + ": " + e.what() + "\n" +
                         model.param_norm_report());
    }

    const T gnorm =
        clip_global_norm(std::span<Tensor<T>>(params), T(cfg.clip_norm));
    const double lr_t = warmup_cosine_lr(st.t, cfg.warmup_steps,
                                         cfg.total_steps, st.base_lr,
                                         cfg.lr_min);
    adamw_step(std::span<Tensor<T>>(params), st, T(lr_t));

    em.mean_loss += double(loss_val);
    em.grad_norm_mean += double(gnorm);
    em.lr_last = lr_t;
    em.batches += 1;
    em.pairs += b;
  }
  if (em.batches > 0) {
    em.mean_loss /= double(em.batches);
    em.grad_norm_mean /= double(em.batches);
  }
  return em;
}

}  // namespace egotr
