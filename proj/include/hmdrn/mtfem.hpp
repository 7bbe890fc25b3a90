#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "hmdrn/backbone.hpp"
#include "hmdrn/ops.hpp"

namespace hmdrn {

// Fixed sinusoidal encoding over row-major flattened positions:
// E[p,2i] = sin(p / 10000^(2i/d)), E[p,2i+1] = cos(p / 10000^(2i/d)).
template <typename T>
Tensor<T> positional_encoding(std::size_t r, std::size_t d) {
  if (d % 2 != 0)
    throw ShapeError("positional_encoding: feature dimension must be even");
  Tensor<T> e(Shape{r, d});
  for (std::size_t p = 0; p < r; ++p)
    for (std::size_t i = 0; i < d / 2; ++i) {
      const double freq =
          std::pow(10000.0, -2.0 * double(i) / double(d));
      const double angle = double(p) * freq;
      e(p, 2 * i) = static_cast<T>(std::sin(angle));
      e(p, 2 * i + 1) = static_cast<T>(std::cos(angle));
    }
  return e;
}

// Indicator of per-position squared norm strictly above the positional mean.
// Computed from raw values and detached: gradients treat the mask as a
// constant factor in q * M(q).
template <typename T>
Tensor<T> binary_mask(const Tensor<T>& q) {
  if (q.rank() != 2) throw ShapeError("binary_mask: expected [r,d]");
  const std::size_t r = q.dim(0), d = q.dim(1);
  std::vector<T> scores(r, T(0));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < d; ++j) scores[i] += q(i, j) * q(i, j);
  T mean = 0;
  for (T s : scores) mean += s;
  mean /= static_cast<T>(r);
  Tensor<T> mask(Shape{r});
  for (std::size_t i = 0; i < r; ++i) mask(i) = scores[i] > mean ? T(1) : T(0);
  return mask;
}

// softmax(q k^T / sqrt(d)) v with full-width heads (d_k equals the channel
// width). When apply_mask is set the query rows are gated by binary_mask(q)
// first; positions whose row is fully zeroed attend uniformly.
template <typename T>
Tensor<T> masked_attention(const Tensor<T>& q, const Tensor<T>& k,
                           const Tensor<T>& v, bool apply_mask,
                           std::vector<T>* mask_out = nullptr) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
    throw ShapeError("masked_attention: expected rank-2 inputs");
  if (q.dim(1) != k.dim(1) || k.shape() != v.shape())
    throw ShapeError("masked_attention: shape mismatch");
  const std::size_t d = q.dim(1);
  Tensor<T> qq = q;
  if (apply_mask) {
    Tensor<T> m = binary_mask(q);
    if (mask_out) *mask_out = m.values();
    Tensor<T> rows(q.shape());
    for (std::size_t i = 0; i < q.dim(0); ++i)
      for (std::size_t j = 0; j < d; ++j) rows(i, j) = m(i);
    qq = mul(q, rows);
  }
  auto scores = scale(matmul(qq, transpose2d(k)),
                      T(1) / std::sqrt(static_cast<T>(d)));
  return matmul(softmax(scores, 1), v);
}

struct MtfemConfig {
  std::size_t layers = 3;
  std::size_t heads = 2;
  std::size_t hidden_ratio = 4;
  bool use_bias = false;
};

template <typename T>
struct MtfemLayer {
  std::vector<Tensor<T>> wq, wk, wv;  // one d x d triple per head
  Tensor<T> wo;                       // heads*d x d
  Tensor<T> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
  Tensor<T> mlp_w1, mlp_w2;
  Tensor<T> mlp_b1, mlp_b2;  // defined only when biases are enabled
};

// Records the binary masks drawn while enhancing one query image.
template <typename T>
struct MaskTrace {
  std::vector<std::vector<std::vector<T>>> masks;  // [layer][head][r]
};

// Transformer self-reconstruction over one image's feature sequence. Masking
// applies to query-set images only, in every layer; support images run the
// standard attention path.
template <typename T>
struct Mtfem {
  MtfemConfig cfg;
  std::size_t dim = 0;
  std::vector<MtfemLayer<T>> layers;

  static Mtfem init(const MtfemConfig& cfg, std::size_t dim, Rng& rng) {
    if (cfg.heads < 1 || dim % 2 != 0)
      throw ShapeError("mtfem: heads >= 1 and even dim required");
    Mtfem m;
    m.cfg = cfg;
    m.dim = dim;
    const std::size_t hidden = cfg.hidden_ratio * dim;
    auto xavier = [&](std::size_t in, std::size_t out) {
      const T stddev = std::sqrt(T(2) / static_cast<T>(in + out));
      auto w = Tensor<T>::normal(rng, {in, out}, T(0), stddev);
      w.set_requires_grad(true);
      return w;
    };
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      MtfemLayer<T> layer;
      for (std::size_t h = 0; h < cfg.heads; ++h) {
        layer.wq.push_back(xavier(dim, dim));
        layer.wk.push_back(xavier(dim, dim));
        layer.wv.push_back(xavier(dim, dim));
      }
      layer.wo = xavier(cfg.heads * dim, dim);
      layer.ln1_gamma = Tensor<T>::full({dim}, T(1));
      layer.ln1_beta = Tensor<T>::zeros({dim});
      layer.ln2_gamma = Tensor<T>::full({dim}, T(1));
      layer.ln2_beta = Tensor<T>::zeros({dim});
      for (auto* t : {&layer.ln1_gamma, &layer.ln1_beta, &layer.ln2_gamma,
                      &layer.ln2_beta})
        t->set_requires_grad(true);
      layer.mlp_w1 = xavier(dim, hidden);
      layer.mlp_w2 = xavier(hidden, dim);
      if (cfg.use_bias) {
        layer.mlp_b1 = Tensor<T>::zeros({hidden});
        layer.mlp_b2 = Tensor<T>::zeros({dim});
        layer.mlp_b1.set_requires_grad(true);
        layer.mlp_b2.set_requires_grad(true);
      }
      m.layers.push_back(std::move(layer));
    }
    return m;
  }

  // Multi-head self-attention: each head projects with its own d x d triple,
  // derives its own mask from its own q, and the concatenated heads are
  // projected by wo.
  Tensor<T> msa(const Tensor<T>& z, const MtfemLayer<T>& layer,
                bool apply_mask,
                std::vector<std::vector<T>>* head_masks = nullptr) const {
    std::vector<Tensor<T>> heads;
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      auto q = matmul(z, layer.wq[h]);
      auto k = matmul(z, layer.wk[h]);
      auto v = matmul(z, layer.wv[h]);
      std::vector<T> mask;
      heads.push_back(masked_attention(q, k, v, apply_mask,
                                       head_masks ? &mask : nullptr));
      if (head_masks) head_masks->push_back(std::move(mask));
    }
    return matmul(cfg.heads == 1 ? heads[0] : concat_cols(heads), layer.wo);
  }

  Tensor<T> encoder_layer(const Tensor<T>& z, const MtfemLayer<T>& layer,
                          bool apply_mask,
                          std::vector<std::vector<T>>* head_masks = nullptr) const {
    auto attended = msa(layer_norm(z, layer.ln1_gamma, layer.ln1_beta), layer,
                        apply_mask, head_masks);
    auto a = add(attended, z);
    auto hidden = matmul(layer_norm(a, layer.ln2_gamma, layer.ln2_beta),
                         layer.mlp_w1);
    if (cfg.use_bias) hidden = add_rowvec(hidden, layer.mlp_b1);
    auto mlp = matmul(gelu(hidden), layer.mlp_w2);
    if (cfg.use_bias) mlp = add_rowvec(mlp, layer.mlp_b2);
    return add(mlp, a);
  }

  Tensor<T> forward(const Tensor<T>& sequence, bool is_query_image,
                    MaskTrace<T>* trace = nullptr) const {
    if (sequence.rank() != 2 || sequence.dim(1) != dim)
      throw ShapeError("mtfem: sequence width " +
                       std::to_string(sequence.dim(1)) +
                       " does not match parameters (" + std::to_string(dim) +
                       ")");
    auto z = add(sequence, positional_encoding<T>(sequence.dim(0), dim));
    for (const auto& layer : layers) {
      std::vector<std::vector<T>> head_masks;
      z = encoder_layer(z, layer, is_query_image,
                        trace && is_query_image ? &head_masks : nullptr);
      if (trace && is_query_image) trace->masks.push_back(std::move(head_masks));
    }
    return z;
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = prefix + ".layer" + std::to_string(l);
      for (std::size_t h = 0; h < cfg.heads; ++h) {
        const std::string hp = p + ".head" + std::to_string(h);
        out.push_back({hp + ".wq", layers[l].wq[h], true});
        out.push_back({hp + ".wk", layers[l].wk[h], true});
        out.push_back({hp + ".wv", layers[l].wv[h], true});
      }
      out.push_back({p + ".wo", layers[l].wo, true});
      out.push_back({p + ".ln1.gamma", layers[l].ln1_gamma, true});
      out.push_back({p + ".ln1.beta", layers[l].ln1_beta, true});
      out.push_back({p + ".ln2.gamma", layers[l].ln2_gamma, true});
      out.push_back({p + ".ln2.beta", layers[l].ln2_beta, true});
      out.push_back({p + ".mlp.w1", layers[l].mlp_w1, true});
      out.push_back({p + ".mlp.w2", layers[l].mlp_w2, true});
      if (cfg.use_bias) {
        out.push_back({p + ".mlp.b1", layers[l].mlp_b1, true});
        out.push_back({p + ".mlp.b2", layers[l].mlp_b2, true});
      }
    }
  }
};

}  // namespace hmdrn
