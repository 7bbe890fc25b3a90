#pragma once

#include <string>
#include <vector>

#include "hmdrn/backbone.hpp"
#include "hmdrn/ops.hpp"

namespace hmdrn {

// Learnable fusion scalars combining the two feature levels' negative
// distances, s = -tau * (w1*d1 + w2*d2). Unconstrained after initialization.
template <typename T>
struct FusionParams {
  Tensor<T> w1, w2, tau;

  static FusionParams init() {
    FusionParams f;
    f.w1 = Tensor<T>::scalar(T(0.5));
    f.w2 = Tensor<T>::scalar(T(0.5));
    f.tau = Tensor<T>::scalar(T(1));
    for (auto* t : {&f.w1, &f.w2, &f.tau}) t->set_requires_grad(true);
    return f;
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".w1", w1, true});
    out.push_back({prefix + ".w2", w2, true});
    out.push_back({prefix + ".tau", tau, true});
  }
};

// Squared Euclidean gap between the value-projected query and its
// reconstruction, summed over all positions and channels.
template <typename T>
Tensor<T> recon_distance(const Tensor<T>& query_value,
                         const Tensor<T>& reconstruction) {
  detail::require_same_shape(query_value, reconstruction, "recon_distance");
  auto diff = sub(query_value, reconstruction);
  return sum_all(mul(diff, diff));
}

template <typename T>
Tensor<T> fuse_similarity(const Tensor<T>& d1, const Tensor<T>& d2,
                          const FusionParams<T>& fusion) {
  return neg(mul_scalar(
      add(mul_scalar(d1, fusion.w1), mul_scalar(d2, fusion.w2)), fusion.tau));
}

// Single-level ablation score: s = -tau * w * d.
template <typename T>
Tensor<T> fuse_similarity_single(const Tensor<T>& d, const Tensor<T>& w,
                                 const Tensor<T>& tau) {
  return neg(mul_scalar(mul_scalar(d, w), tau));
}

template <typename T>
Tensor<T> normalize_scores(const Tensor<T>& scores) {
  if (scores.rank() != 2) throw ShapeError("normalize_scores: expected [Q,C]");
  return softmax(scores, 1);
}

// Mean cross-entropy of the true classes; takes raw scores and goes through
// log-sum-exp, never log(softmax).
template <typename T>
Tensor<T> episode_loss(const Tensor<T>& raw_scores,
                       const std::vector<int>& labels) {
  return cross_entropy_with_logits(raw_scores, labels);
}

// Prototype scores: class means over support vectors, negative squared
// Euclidean distance per query. support[c][k] and queries[i] are [d] vectors.
template <typename T>
Tensor<T> protonet_score(const std::vector<std::vector<Tensor<T>>>& support,
                         const std::vector<Tensor<T>>& queries) {
  const std::size_t n_class = support.size();
  const std::size_t n_query = queries.size();
  if (n_class == 0 || n_query == 0)
    throw ShapeError("protonet_score: empty episode");
  std::vector<Tensor<T>> protos;
  for (const auto& vecs : support) {
    if (vecs.empty()) throw ShapeError("protonet_score: empty support class");
    if (vecs.size() == 1) {
      protos.push_back(vecs[0]);
      continue;
    }
    std::vector<Tensor<T>> rows;
    for (const auto& v : vecs) rows.push_back(reshape(v, {1, v.size()}));
    protos.push_back(mean_rows(concat_rows(rows)));
  }
  std::vector<Tensor<T>> cells;
  cells.reserve(n_query * n_class);
  for (const auto& q : queries)
    for (const auto& p : protos) {
      auto diff = sub(q, p);
      cells.push_back(neg(sum_all(mul(diff, diff))));
    }
  return stack_scalars(cells, n_query, n_class);
}

template <typename T>
double top1_accuracy(const Tensor<T>& scores, const std::vector<int>& labels) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    hits += (argmax_row(scores, i) == static_cast<std::size_t>(labels[i]));
  return double(hits) / double(labels.size());
}

}  // namespace hmdrn
