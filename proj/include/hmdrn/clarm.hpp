#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "hmdrn/backbone.hpp"
#include "hmdrn/ops.hpp"

namespace hmdrn {

// Row-stack of the K support sequences of one class, in sampler order.
template <typename T>
Tensor<T> build_support_pool(const std::vector<Tensor<T>>& support_sequences) {
  if (support_sequences.empty())
    throw ShapeError("build_support_pool: empty support class");
  for (const auto& s : support_sequences)
    if (s.shape() != support_sequences[0].shape())
      throw ShapeError("build_support_pool: ragged support sequences");
  return concat_rows(support_sequences);
}

// One feature level's reconstruction projections. Queries are rebuilt from a
// class pool as softmax(Q W_Q (pool W_K)^T / sqrt(d)) (pool W_V); the
// value-projected query Q W_V is what reconstructions are measured against.
template <typename T>
struct ClarmLevel {
  Tensor<T> wq, wk, wv;
  std::size_t dim = 0;

  static ClarmLevel init(std::size_t dim, Rng& rng) {
    ClarmLevel lvl;
    lvl.dim = dim;
    const T stddev = std::sqrt(T(1) / static_cast<T>(dim));
    for (auto* w : {&lvl.wq, &lvl.wk}) {
      *w = Tensor<T>::normal(rng, {dim, dim}, T(0), stddev);
      w->set_requires_grad(true);
    }
    // Small value-projection init keeps untrained reconstruction distances
    // near-uniform across classes; the learnable temperature restores scale
    // during training.
    lvl.wv = Tensor<T>::normal(rng, {dim, dim}, T(0), T(0.02) * stddev);
    lvl.wv.set_requires_grad(true);
    return lvl;
  }

  struct PoolProjection {
    Tensor<T> keys, values;  // [K*r, d]
  };
  struct QueryProjection {
    Tensor<T> attended, measured;  // Q W_Q and Q W_V, both [r, d]
  };

  PoolProjection project_pool(const Tensor<T>& pool) const {
    return {matmul(pool, wk), matmul(pool, wv)};
  }

  QueryProjection project_query(const Tensor<T>& query_seq) const {
    return {matmul(query_seq, wq), matmul(query_seq, wv)};
  }

  Tensor<T> reconstruct_from(const Tensor<T>& attended,
                             const PoolProjection& pool) const {
    auto scores = scale(matmul(attended, transpose2d(pool.keys)),
                        T(1) / std::sqrt(static_cast<T>(dim)));
    return matmul(softmax(scores, 1), pool.values);
  }

  // (Q W_V, reconstruction) for one query against one class pool.
  std::pair<Tensor<T>, Tensor<T>> reconstruct(const Tensor<T>& query_seq,
                                              const Tensor<T>& pool) const {
    if (query_seq.dim(1) != dim || pool.dim(1) != dim)
      throw ShapeError("clarm: feature width does not match parameters");
    auto q = project_query(query_seq);
    return {q.measured, reconstruct_from(q.attended, project_pool(pool))};
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".wq", wq, true});
    out.push_back({prefix + ".wk", wk, true});
    out.push_back({prefix + ".wv", wv, true});
  }
};

// One level's reconstructions for a whole episode.
template <typename T>
struct ClarmLevelOutput {
  std::vector<Tensor<T>> query_values;                  // per query, [r,d]
  std::vector<std::vector<Tensor<T>>> reconstructions;  // [class][query]
};

// Reconstruct every query from every class pool at one level. Pool and query
// projections are computed once and reused across the class/query grid.
template <typename T>
ClarmLevelOutput<T> clarm_level_forward(
    const ClarmLevel<T>& level,
    const std::vector<std::vector<Tensor<T>>>& support_per_class,
    const std::vector<Tensor<T>>& queries) {
  ClarmLevelOutput<T> out;
  std::vector<typename ClarmLevel<T>::PoolProjection> pools;
  for (const auto& klass : support_per_class)
    pools.push_back(level.project_pool(build_support_pool(klass)));
  std::vector<typename ClarmLevel<T>::QueryProjection> projected;
  for (const auto& q : queries) {
    projected.push_back(level.project_query(q));
    out.query_values.push_back(projected.back().measured);
  }
  out.reconstructions.resize(support_per_class.size());
  for (std::size_t c = 0; c < support_per_class.size(); ++c) {
    out.reconstructions[c].reserve(queries.size());
    for (std::size_t i = 0; i < queries.size(); ++i)
      out.reconstructions[c].push_back(
          level.reconstruct_from(projected[i].attended, pools[c]));
  }
  return out;
}

template <typename T>
struct ReconstructionOutput {
  std::array<ClarmLevelOutput<T>, 2> levels;
};

// Both feature levels independently, as used by the full model.
template <typename T>
ReconstructionOutput<T> clarm_forward(
    const ClarmLevel<T>& level1, const ClarmLevel<T>& level2,
    const std::vector<std::vector<Tensor<T>>>& support_level1,
    const std::vector<std::vector<Tensor<T>>>& support_level2,
    const std::vector<Tensor<T>>& queries_level1,
    const std::vector<Tensor<T>>& queries_level2) {
  ReconstructionOutput<T> out;
  out.levels[0] = clarm_level_forward(level1, support_level1, queries_level1);
  out.levels[1] = clarm_level_forward(level2, support_level2, queries_level2);
  return out;
}

}  // namespace hmdrn
