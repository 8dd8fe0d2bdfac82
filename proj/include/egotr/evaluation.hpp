// SPDX-License-Identifier: Apache-2.0
//
// Retrieval evaluation and structural diagnostics.
//
// A DescriptorIndex holds one descriptor per reference (aerial) image.
// Queries are ranked by L2 distance with ties broken by ascending reference
// row, which makes rankings reproducible and lets tests demand exact
// agreement with a brute-force oracle. Recall is reported at K = 1, 5, 10
// and at the top one percent of the index, K = max(1, ceil(M/100)).
//
// The diagnostics measure two structural properties of a trained model:
// how early the class token settles (cosine similarity between each
// layer's class token and the final one) and how much positional
// embeddings encode grid adjacency (gram matrix of patch position rows).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "egotr/data.hpp"
#include "egotr/model.hpp"
#include "egotr/tensor.hpp"

namespace egotr {

template <typename T>
struct DescriptorIndex {
  Tensor<T> matrix;                // [M, D], row i describes reference i
  std::vector<std::uint64_t> ids;  // length M, unique

  void validate() const {
    check_dims(matrix.rank() == 2, "descriptor index: matrix must be [M, D]");
    check_usage(!ids.empty(), "descriptor index: empty reference set");
    check_usage(matrix.dim(0) == ids.size(),
                "descriptor index: row count does not match id count");
    std::unordered_set<std::uint64_t> seen;
    for (std::uint64_t id : ids)
      check_usage(seen.insert(id).second,
                  "descriptor index: duplicate id " + std::to_string(id));
    for (T v : matrix.data())
      if (!std::isfinite(double(v)))
        throw NumericError("descriptor index: non-finite entry");
  }
};

struct RecallReport {
  double r_at_1 = 0.0;
  double r_at_5 = 0.0;
  double r_at_10 = 0.0;
  double r_at_1pct = 0.0;
  std::size_t k_1pct = 0;
  std::size_t index_size = 0;
  std::size_t query_count = 0;
};

inline std::size_t top_percent_k(std::size_t m) {
  return std::max<std::size_t>(1, (m + 99) / 100);
}

namespace detail {

// Squared distances keep the ranking (square root is strictly increasing).
template <typename T>
double sq_dist(std::span<const T> a, std::span<const T> b) {
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double diff = double(a[k]) - double(b[k]);
    acc += diff * diff;
  }
  return acc;
}

}  // namespace detail

// Fraction of queries whose true reference ranks inside the top K, for each
// requested K. Ranking is by L2 distance ascending, ties broken by ascending
// reference row.
template <typename T>
std::vector<double> recall_fractions(const Tensor<T>& queries,
                                     const DescriptorIndex<T>& index,
                                     std::span<const std::uint64_t> truth,
                                     std::span<const std::size_t> ks) {
  index.validate();
  check_dims(queries.rank() == 2 && queries.dim(1) == index.matrix.dim(1),
             "recall: query matrix must be [Q, D] with D matching the index");
  check_usage(queries.dim(0) == truth.size(),
              "recall: need exactly one truth id per query");
  check_usage(truth.size() > 0, "recall: no queries");

  std::unordered_map<std::uint64_t, std::size_t> row_of;
  for (std::size_t i = 0; i < index.ids.size(); ++i)
    row_of.emplace(index.ids[i], i);

  const std::size_t q_count = queries.dim(0);
  const std::size_t m = index.matrix.dim(0);
  const std::size_t d = queries.dim(1);
  std::vector<std::size_t> hits(ks.size(), 0);
  std::vector<double> dist(m);
  for (std::size_t q = 0; q < q_count; ++q) {
    const auto it = row_of.find(truth[q]);
    if (it == row_of.end())
      throw DataError("recall: truth id " + std::to_string(truth[q]) +
                      " is not in the index");
    const std::size_t t = it->second;
    const std::span<const T> qrow = queries.data().subspan(q * d, d);
    for (std::size_t j = 0; j < m; ++j)
      dist[j] = detail::sq_dist(qrow, index.matrix.data().subspan(j * d, d));
    std::size_t rank = 0;
    for (std::size_t j = 0; j < m; ++j)
      if (dist[j] < dist[t] || (dist[j] == dist[t] && j < t)) ++rank;
    for (std::size_t ki = 0; ki < ks.size(); ++ki)
      if (rank < ks[ki]) ++hits[ki];
  }
  std::vector<double> out(ks.size());
  for (std::size_t ki = 0; ki < ks.size(); ++ki)
    out[ki] = double(hits[ki]) / double(q_count);
  return out;
}

template <typename T>
RecallReport recall_at_k(const Tensor<T>& queries,
                         const DescriptorIndex<T>& index,
                         std::span<const std::uint64_t> truth) {
  const std::size_t k1 = top_percent_k(index.ids.size());
  const std::size_t ks[] = {1, 5, 10, k1};
  const std::vector<double> f =
      recall_fractions(queries, index, truth, std::span<const std::size_t>(ks));
  RecallReport r;
  r.r_at_1 = f[0];
  r.r_at_5 = f[1];
  r.r_at_10 = f[2];
  r.r_at_1pct = f[3];
  r.k_1pct = k1;
  r.index_size = index.ids.size();
  r.query_count = truth.size();
  return r;
}

// Applies the polar warp to raw aerial images when the model expects it.
inline std::vector<CrossViewPair> prepare_for_model(
    const ModelConfig& cfg, const std::vector<CrossViewPair>& pairs) {
  if (!cfg.use_polar) return pairs;
  return polar_warp_pairs(pairs, cfg.ground_h, cfg.ground_w);
}

// One descriptor per reference image, rows in input order.
inline DescriptorIndex<float> build_index(
    const EgoTrModel<float>& model, const std::vector<CrossViewPair>& pairs) {
  check_usage(!pairs.empty(), "build_index: empty reference set");
  const std::vector<CrossViewPair> src = prepare_for_model(model.config, pairs);
  Tape<float> tape;
  tape.set_recording(false);
  const std::size_t d = model.config.embed_dim;
  DescriptorIndex<float> idx;
  idx.matrix = Tensor<float>({src.size(), d});
  idx.ids.reserve(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    const Tensor<float> desc =
        forward_descriptor(tape, model, src[i].aerial, Branch::kAerial);
    std::copy(desc.data().begin(), desc.data().end(),
              idx.matrix.data().begin() + std::ptrdiff_t(i * d));
    idx.ids.push_back(src[i].id);
  }
  idx.validate();
  return idx;
}

// Query-side descriptors (ground images), rows in input order.
inline Tensor<float> query_descriptors(const EgoTrModel<float>& model,
                                       const std::vector<CrossViewPair>& pairs) {
  check_usage(!pairs.empty(), "query_descriptors: empty query set");
  Tape<float> tape;
  tape.set_recording(false);
  const std::size_t d = model.config.embed_dim;
  Tensor<float> q({pairs.size(), d});
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const Tensor<float> desc =
        forward_descriptor(tape, model, pairs[i].ground, Branch::kGround);
    std::copy(desc.data().begin(), desc.data().end(),
              q.data().begin() + std::ptrdiff_t(i * d));
  }
  return q;
}

// Ground-to-aerial retrieval over a pair set: every aerial image becomes a
// reference, every ground image a query, and pair ids define the truth.
inline RecallReport evaluate_retrieval(const EgoTrModel<float>& model,
                                       const std::vector<CrossViewPair>& pairs) {
  const DescriptorIndex<float> index = build_index(model, pairs);
  const Tensor<float> queries = query_descriptors(model, pairs);
  std::vector<std::uint64_t> truth;
  truth.reserve(pairs.size());
  for (const CrossViewPair& p : pairs) truth.push_back(p.id);
  return recall_at_k(queries, index, truth);
}

// Cosine similarity between each layer's class token and the final layer's,
// for one forward pass. The final entry is 1 by definition.
template <typename T>
std::vector<double> class_token_similarity(
    const std::vector<Tensor<T>>& layer_outputs) {
  check_usage(!layer_outputs.empty(), "class token similarity: no layers");
  const std::size_t d = layer_outputs.back().dim(1);
  const std::span<const T> fin = layer_outputs.back().data().subspan(0, d);
  std::vector<double> sims(layer_outputs.size());
  for (std::size_t l = 0; l + 1 < layer_outputs.size(); ++l) {
    check_dims(layer_outputs[l].rank() == 2 && layer_outputs[l].dim(1) == d,
               "class token similarity: inconsistent layer shapes");
    const std::span<const T> cur = layer_outputs[l].data().subspan(0, d);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      dot += double(cur[k]) * double(fin[k]);
      na += double(cur[k]) * double(cur[k]);
      nb += double(fin[k]) * double(fin[k]);
    }
    const double denom = std::sqrt(na) * std::sqrt(nb);
    sims[l] = denom > 0.0 ? std::clamp(dot / denom, -1.0, 1.0) : 0.0;
  }
  sims.back() = 1.0;
  return sims;
}

// Per-layer class-token similarity averaged over an evaluation set.
inline std::vector<double> cross_layer_similarity(
    const EgoTrModel<float>& model, Branch which,
    const std::vector<CrossViewPair>& pairs) {
  check_usage(!pairs.empty(), "cross_layer_similarity: empty evaluation set");
  const std::vector<CrossViewPair> src =
      which == Branch::kAerial ? prepare_for_model(model.config, pairs) : pairs;
  Tape<float> tape;
  tape.set_recording(false);
  std::vector<double> accum(model.config.depth, 0.0);
  std::vector<Tensor<float>> louts;
  for (const CrossViewPair& p : src) {
    const Tensor<float>& img =
        which == Branch::kGround ? p.ground : p.aerial;
    forward_descriptor(tape, model, img, which, &louts);
    const std::vector<double> sims = class_token_similarity(louts);
    check_dims(sims.size() == accum.size(),
               "cross_layer_similarity: depth mismatch");
    for (std::size_t l = 0; l < sims.size(); ++l) accum[l] += sims[l];
  }
  for (double& v : accum) v /= double(src.size());
  return accum;
}

// Pairwise dot products between patch positional-embedding rows. Row 0 of
// the input holds the class position and is excluded. Each (i, j) entry is
// computed once and mirrored, so the result is symmetric to the bit.
template <typename T>
Tensor<T> pos_embed_gram(const Tensor<T>& pos) {
  check_dims(pos.rank() == 2 && pos.dim(0) >= 2,
             "positional gram: want [N+1, D] with at least one patch row");
  const std::size_t n = pos.dim(0) - 1;
  const std::size_t d = pos.dim(1);
  Tensor<T> g({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    const std::span<const T> ri = pos.data().subspan((i + 1) * d, d);
    for (std::size_t j = i; j < n; ++j) {
      const std::span<const T> rj = pos.data().subspan((j + 1) * d, d);
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k)
        acc += double(ri[k]) * double(rj[k]);
      g.at(i, j) = T(acc);
      g.at(j, i) = T(acc);
    }
  }
  return g;
}

// One position's affinity to every grid position, as a [grid_h, grid_w] map.
template <typename T>
Tensor<T> gram_row_as_grid(const Tensor<T>& gram, std::size_t row,
                           std::size_t grid_h, std::size_t grid_w) {
  check_dims(gram.rank() == 2 && gram.dim(0) == gram.dim(1),
             "gram row: want a square matrix");
  check_usage(grid_h * grid_w == gram.dim(0),
              "gram row: grid does not match matrix size");
  check_usage(row < gram.dim(0), "gram row: position out of range");
  Tensor<T> out({grid_h, grid_w});
  std::copy_n(gram.data().begin() + std::ptrdiff_t(row * gram.dim(1)),
              grid_h * grid_w, out.data().begin());
  return out;
}

// Mean positional affinity between 4-neighborhood grid pairs versus all
// remaining position pairs, with standard errors for a trend comparison.
struct AdjacencyStats {
  double adjacent_mean = 0.0;
  double other_mean = 0.0;
  double adjacent_se = 0.0;
  double other_se = 0.0;
  double pooled_se = 0.0;  // sqrt(adjacent_se^2 + other_se^2)
  std::size_t adjacent_count = 0;
  std::size_t other_count = 0;
};

template <typename T>
AdjacencyStats pos_embed_adjacency(const Tensor<T>& gram, std::size_t grid_h,
                                   std::size_t grid_w) {
  check_dims(gram.rank() == 2 && gram.dim(0) == gram.dim(1),
             "adjacency: want a square gram matrix");
  check_usage(grid_h * grid_w == gram.dim(0),
              "adjacency: grid does not match gram size");
  std::vector<double> adjacent, other;
  const std::size_t n = gram.dim(0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t ri = i / grid_w, ci = i % grid_w;
    for (std::size_t j = i + 1; j < n; ++j) {
      const std::size_t rj = j / grid_w, cj = j % grid_w;
      const std::size_t manhattan =
          (ri > rj ? ri - rj : rj - ri) + (ci > cj ? ci - cj : cj - ci);
      (manhattan == 1 ? adjacent : other).push_back(double(gram.at(i, j)));
    }
  }
  check_usage(adjacent.size() >= 2 && other.size() >= 2,
              "adjacency: grid too small for a trend comparison");
  const auto mean_se = [](const std::vector<double>& xs) {
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= double(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= double(xs.size() - 1);
    return std::pair{mean, std::sqrt(var / double(xs.size()))};
  };
  AdjacencyStats s;
  std::tie(s.adjacent_mean, s.adjacent_se) = mean_se(adjacent);
  std::tie(s.other_mean, s.other_se) = mean_se(other);
  s.pooled_se =
      std::sqrt(s.adjacent_se * s.adjacent_se + s.other_se * s.other_se);
  s.adjacent_count = adjacent.size();
  s.other_count = other.size();
  return s;
}

}  // namespace egotr
