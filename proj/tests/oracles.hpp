#pragma once

// Brute-force reference implementations, kept independent of the library's
// execution paths (no Eigen, no im2col, no tape). Everything here is plain
// nested loops operating on std::vector buffers.

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

namespace oracle {

template <typename T>
std::vector<T> matmul(const std::vector<T>& a, const std::vector<T>& b,
                      std::size_t m, std::size_t k, std::size_t n) {
  std::vector<T> out(m * n, T(0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      out[i * n + j] = acc;
    }
  return out;
}

template <typename T>
std::vector<T> conv2d(const std::vector<T>& x, const std::vector<T>& w,
                      std::size_t b, std::size_t c, std::size_t h,
                      std::size_t wd, std::size_t o, std::size_t kh,
                      std::size_t kw, std::size_t stride, std::size_t pad) {
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::size_t wo = (wd + 2 * pad - kw) / stride + 1;
  std::vector<T> out(b * o * ho * wo, T(0));
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t oc = 0; oc < o; ++oc)
      for (std::size_t oh = 0; oh < ho; ++oh)
        for (std::size_t ow = 0; ow < wo; ++ow) {
          T acc = 0;
          for (std::size_t ic = 0; ic < c; ++ic)
            for (std::size_t ki = 0; ki < kh; ++ki)
              for (std::size_t kj = 0; kj < kw; ++kj) {
                const std::ptrdiff_t ih =
                    std::ptrdiff_t(oh * stride + ki) - std::ptrdiff_t(pad);
                const std::ptrdiff_t iw =
                    std::ptrdiff_t(ow * stride + kj) - std::ptrdiff_t(pad);
                if (ih < 0 || ih >= std::ptrdiff_t(h) || iw < 0 ||
                    iw >= std::ptrdiff_t(wd))
                  continue;
                acc += x[((bi * c + ic) * h + ih) * wd + iw] *
                       w[((oc * c + ic) * kh + ki) * kw + kj];
              }
          out[((bi * o + oc) * ho + oh) * wo + ow] = acc;
        }
  return out;
}

template <typename T>
std::vector<T> max_pool2d(const std::vector<T>& x, std::size_t b,
                          std::size_t c, std::size_t h, std::size_t w,
                          std::size_t window, std::size_t stride) {
  const std::size_t ho = (h - window) / stride + 1;
  const std::size_t wo = (w - window) / stride + 1;
  std::vector<T> out(b * c * ho * wo);
  for (std::size_t p = 0; p < b * c; ++p)
    for (std::size_t oh = 0; oh < ho; ++oh)
      for (std::size_t ow = 0; ow < wo; ++ow) {
        T best = -std::numeric_limits<T>::infinity();
        for (std::size_t ki = 0; ki < window; ++ki)
          for (std::size_t kj = 0; kj < window; ++kj)
            best = std::max(
                best, x[p * h * w + (oh * stride + ki) * w + ow * stride + kj]);
        out[p * ho * wo + oh * wo + ow] = best;
      }
  return out;
}

// Scaled dot-product attention with optional per-position query mask:
// softmax(q' k^T / sqrt(dk)) v, q' = q masked row-wise when mask given.
template <typename T>
std::vector<T> attention(const std::vector<T>& q, const std::vector<T>& k,
                         const std::vector<T>& v, std::size_t rq,
                         std::size_t rk, std::size_t d, T dk_scale,
                         const std::vector<T>* row_mask = nullptr) {
  std::vector<T> out(rq * d, T(0));
  for (std::size_t i = 0; i < rq; ++i) {
    std::vector<T> scores(rk);
    for (std::size_t j = 0; j < rk; ++j) {
      T acc = 0;
      for (std::size_t p = 0; p < d; ++p) {
        T qv = q[i * d + p];
        if (row_mask) qv *= (*row_mask)[i];
        acc += qv * k[j * d + p];
      }
      scores[j] = acc * dk_scale;
    }
    T mx = scores[0];
    for (T s : scores) mx = std::max(mx, s);
    T denom = 0;
    for (auto& s : scores) {
      s = std::exp(s - mx);
      denom += s;
    }
    for (std::size_t j = 0; j < rk; ++j)
      for (std::size_t p = 0; p < d; ++p)
        out[i * d + p] += (scores[j] / denom) * v[j * d + p];
  }
  return out;
}

// Squared-norm-above-mean indicator per row of a [r,d] sequence.
template <typename T>
std::vector<T> binary_mask(const std::vector<T>& q, std::size_t r,
                           std::size_t d) {
  std::vector<T> scores(r, T(0));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < d; ++j)
      scores[i] += q[i * d + j] * q[i * d + j];
  T mean = 0;
  for (T s : scores) mean += s;
  mean /= static_cast<T>(r);
  std::vector<T> mask(r);
  for (std::size_t i = 0; i < r; ++i) mask[i] = scores[i] > mean ? T(1) : T(0);
  return mask;
}

template <typename T>
T sq_distance(const std::vector<T>& a, const std::vector<T>& b) {
  T acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    acc += (a[i] - b[i]) * (a[i] - b[i]);
  return acc;
}

// Prototype scores: class means over support vectors, negative squared
// Euclidean distance per query. support is [n_class][shot][dim], queries
// [nq][dim]; returns [nq][n_class] row-major.
template <typename T>
std::vector<T> protonet_scores(const std::vector<std::vector<std::vector<T>>>& support,
                               const std::vector<std::vector<T>>& queries) {
  const std::size_t nc = support.size();
  const std::size_t dim = support[0][0].size();
  std::vector<std::vector<T>> protos(nc, std::vector<T>(dim, T(0)));
  for (std::size_t c = 0; c < nc; ++c) {
    for (const auto& s : support[c])
      for (std::size_t i = 0; i < dim; ++i) protos[c][i] += s[i];
    for (std::size_t i = 0; i < dim; ++i)
      protos[c][i] /= static_cast<T>(support[c].size());
  }
  std::vector<T> out(queries.size() * nc);
  for (std::size_t qi = 0; qi < queries.size(); ++qi)
    for (std::size_t c = 0; c < nc; ++c)
      out[qi * nc + c] = -sq_distance(queries[qi], protos[c]);
  return out;
}

}  // namespace oracle
