#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "hmdrn/tensor.hpp"

namespace hmdrn {

namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapM = Eigen::Map<const MatRM<T>>;
template <typename T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using CArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <typename T>
inline void require_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                               const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out = Tensor<T>::uninit(a.shape());
  detail::ArrMap<T>(out.data(), out.size()) =
      detail::CArrMap<T>(a.data(), a.size()) +
      detail::CArrMap<T>(b.data(), b.size());
  if (detail::tracking(a, b)) {
    out.set_requires_grad(true);
    GradTape<T>::active()->record([an = a.node(), bn = b.node(),
                                   on = out.node()] {
      if (on->grad.empty()) return;
      if (an->requires_grad) detail::accumulate(*an, on->grad);
      if (bn->requires_grad) detail::accumulate(*bn, on->grad);
    });
  }
  detail::check_finite(out, "add");
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out = Tensor<T>::uninit(a.shape());
  detail::ArrMap<T>(out.data(), out.size()) =
      detail::CArrMap<T>(a.data(), a.size()) -
      detail::CArrMap<T>(b.data(), b.size());
  if (detail::tracking(a, b)) {
    out.set_requires_grad(true);
    GradTape<T>::active()->record([an = a.node(), bn = b.node(),
                                   on = out.node()] {
      if (on->grad.empty()) return;
      if (an->requires_grad) detail::accumulate(*an, on->grad);
      if (bn->requires_grad) {
        detail::ensure_zero_grad(*bn);
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          bn->grad[i] -= on->grad[i];
      }
    });
  }
  detail::check_finite(out, "sub");
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out = Tensor<T>::uninit(a.shape());
  detail::ArrMap<T>(out.data(), out.size()) =
      detail::CArrMap<T>(a.data(), a.size()) *
      detail::CArrMap<T>(b.data(), b.size());
  if (detail::tracking(a, b)) {
    out.set_requires_grad(true);
    GradTape<T>::active()->record([an = a.node(), bn = b.node(),
                                   on = out.node()] {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        detail::ensure_zero_grad(*an);
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          an->grad[i] += on->grad[i] * bn->values[i];
      }
      if (bn->requires_grad) {
        detail::ensure_zero_grad(*bn);
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          bn->grad[i] += on->grad[i] * an->values[i];
      }
    });
  }
  detail::check_finite(out, "mul");
  return out;
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::uninit(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out(i) = -x.data()[i];
  if (detail::tracking(x)) {
    out.set_requires_grad(true);
    GradTape<T>::active()->record([xn = x.node(), on = out.node()] {
      if (on->grad.empty() || !xn->requires_grad) return;
      detail::ensure_zero_grad(*xn);
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        xn->grad[i] -= on->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  Tensor<T> out = Tensor<T>::uninit(x.shape());
  detail::ArrMap<T>(out.data(), out.size()) =
      detail::CArrMap<T>(x.data(), x.size()) * c;
  if (detail::tracking(x)) {
    out.set_requires_grad(true);
    GradTape<T>::active()->record([xn = x.node(), on = out.node(), c] {
      if (on->grad.empty() || !xn->requires_grad) return;
      detail::ensure_zero_grad(*xn);
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        xn->grad[i] += c * on->grad[i];
    });
  }
  detail::check_finite(out, "scale");
  return out;
}

// Broadcast multiply by a one-element tensor; gradient reaches both sides.
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.size() != 1)
    throw ShapeError("mul_scalar: scalar operand has shape " +
                     shape_str(s.shape()));
  Tensor<T> out = Tensor<T>::uninit(x.shape());
  const T sv = s.data()[0];
  for (std::size_t i = 0; i < x.size(); ++i) out(i) = sv * x.data()[i];
  if (detail::tracking(x, s)) {
    out.set_requires_grad(true);
    GradTape<T>::active()->record([xn = x.node(), sn = s.node(),
                                   on = out.node()] {
      if (on->grad.empty()) return;
      if (xn->requires_grad) {
        detail::ensure_zero_grad(*xn);
        const T sv = sn->values[0];
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          xn->grad[i] += sv * on->grad[i];
      }
      if (sn->requires_grad) {
        detail::ensure_zero_grad(*sn);
        T acc = 0;
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          acc += on->grad[i] * xn->values[i];
        sn->grad[0] += acc;
      }
    });
  }
  detail::check_finite(out, "mul_scalar");
  return out;
}

// Adds a length-c vector to every row of a [r,c] matrix.
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
  if (x.rank() != 2 || v.size() != x.dim(1))
    throw ShapeError("add_rowvec: want [r,c] and [c]");
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor<T> out = Tensor<T>::uninit(x.shape());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(i, j) = x(i, j) + v.data()[j];
  if (detail::tracking(x, v)) {
    out.set_requires_grad(true);
    GradTape<T>::active()->record([xn = x.node(), vn = v.node(),
                                   on = out.node(), r, c] {
      if (on->grad.empty()) return;
      if (xn->requires_grad) detail::accumulate(*xn, on->grad);
      if (vn->requires_grad) {
        detail::ensure_zero_grad(*vn);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j)
            vn->grad[j] += on->grad[i * c + j];
      }
    });
  }
  detail::check_finite(out, "add_rowvec");
  return out;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::uninit(x.shape());
  detail::ArrMap<T>(out.data(), out.size()) =
      detail::CArrMap<T>(x.data(), x.size()).max(T(0));
  if (detail::tracking(x)) {
    out.set_requires_grad(true);
    GradTape<T>::active()->record([xn = x.node(), on = out.node()] {
      if (on->grad.empty() || !xn->requires_grad) return;
      detail::ensure_zero_grad(*xn);
      const std::size_t n = on->grad.size();
      for (std::size_t i = 0; i < n; ++i)
        xn->grad[i] += xn->values[i] > T(0) ? on->grad[i] : T(0);
    });
  }
  return out;
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  Tensor<T> out = Tensor<T>::uninit(x.shape());
  {
    detail::CArrMap<T> xv(x.data(), x.size());
    detail::ArrMap<T>(out.data(), out.size()) = xv.max(T(0)) +
                                                xv.min(T(0)) * slope;
  }
  if (detail::tracking(x)) {
    out.set_requires_grad(true);
    GradTape<T>::active()->record([xn = x.node(), on = out.node(), slope] {
      if (on->grad.empty() || !xn->requires_grad) return;
      detail::ensure_zero_grad(*xn);
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        xn->grad[i] +=
            (xn->values[i] > T(0) ? on->grad[i] : slope * on->grad[i]);
    });
  }
  return out;
}

inline constexpr double kGeluRoot2OverPi = 0.7978845608;
inline constexpr double kGeluCubicCoeff = 0.044715;

// tanh approximation of GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T k0 = static_cast<T>(kGeluRoot2OverPi);
  const T k1 = static_cast<T>(kGeluCubicCoeff);
  Tensor<T> out = Tensor<T>::uninit(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T v = x.data()[i];
    const T u = k0 * (v + k1 * v * v * v);
    out(i) = T(0.5) * v * (T(1) + std::tanh(u));
  }
  if (detail::tracking(x)) {
    out.set_requires_grad(true);
    GradTape<T>::active()->record([xn = x.node(), on = out.node(), k0, k1] {
      if (on->grad.empty() || !xn->requires_grad) return;
      detail::ensure_zero_grad(*xn);
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const T v = xn->values[i];
        const T u = k0 * (v + k1 * v * v * v);
        const T t = std::tanh(u);
        const T du = k0 * (T(1) + T(3) * k1 * v * v);
        const T d = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du;
        xn->grad[i] += on->grad[i] * d;
      }
    });
  }
  detail::check_finite(out, "gelu");
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x.data()[i];
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (detail::tracking(x)) {
    out.set_requires_grad(true);
    GradTape<T>::active()->record([xn = x.node(), on = out.node()] {
      if (on->grad.empty() || !xn->requires_grad) return;
      detail::ensure_zero_grad(*xn);
      const T g = on->grad[0];
      for (auto& gv : xn->grad) gv += g;
    });
  }
  detail::check_finite(out, "sum_all");
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.size()));
}

// Mean over axis 0 of a 2-D tensor: [r,c] -> [c].
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("mean_rows: expected rank-2 input");
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor<T> out(Shape{c});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(j) += x(i, j);
  const T inv = T(1) / static_cast<T>(r);
  for (std::size_t j = 0; j < c; ++j) out(j) *= inv;
  if (detail::tracking(x)) {
    out.set_requires_grad(true);
    GradTape<T>::active()->record([xn = x.node(), on = out.node(), r, c, inv] {
      if (on->grad.empty() || !xn->requires_grad) return;
      detail::ensure_zero_grad(*xn);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
          xn->grad[i * c + j] += on->grad[j] * inv;
    });
  }
  detail::check_finite(out, "mean_rows");
  return out;
}

// ---------------------------------------------------------------------------
// Structure
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.size())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  Tensor<T> out = Tensor<T>::from(std::move(shape), x.values());
  if (detail::tracking(x)) {
    out.set_requires_grad(true);
    GradTape<T>::active()->record([xn = x.node(), on = out.node()] {
      if (on->grad.empty() || !xn->requires_grad) return;
      detail::accumulate(*xn, on->grad);
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("transpose2d: expected rank-2 input");
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor<T> out = Tensor<T>::uninit(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(j, i) = x(i, j);
  if (detail::tracking(x)) {
    out.set_requires_grad(true);
    GradTape<T>::active()->record([xn = x.node(), on = out.node(), r, c] {
      if (on->grad.empty() || !xn->requires_grad) return;
      detail::ensure_zero_grad(*xn);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
          xn->grad[i * c + j] += on->grad[j * r + i];
    });
  }
  return out;
}

// Row-stack of 2-D tensors sharing a column count.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t c = parts[0].dim(1);
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != c)
      throw ShapeError("concat_rows: ragged inputs");
    rows += p.dim(0);
  }
  Tensor<T> out = Tensor<T>::uninit(Shape{rows, c});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.values().begin(), p.values().end(), out.data() + off);
    off += p.size();
  }
  bool track = false;
  for (const auto& p : parts) track = track || detail::tracking(p);
  if (track) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<detail::TensorNode<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    GradTape<T>::active()->record([nodes, on = out.node()] {
      if (on->grad.empty()) return;
      std::size_t off = 0;
      for (auto& nd : nodes) {
        if (nd->requires_grad) {
          detail::ensure_zero_grad(*nd);
          for (std::size_t i = 0; i < nd->values.size(); ++i)
            nd->grad[i] += on->grad[off + i];
        }
        off += nd->values.size();
      }
    });
  }
  return out;
}

// Column-concat of 2-D tensors sharing a row count.
template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t r = parts[0].dim(0);
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != r)
      throw ShapeError("concat_cols: ragged inputs");
    cols += p.dim(1);
  }
  Tensor<T> out = Tensor<T>::uninit(Shape{r, cols});
  std::size_t coff = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.dim(1);
    for (std::size_t i = 0; i < r; ++i)
      std::copy(p.data() + i * pc, p.data() + (i + 1) * pc,
                out.data() + i * cols + coff);
    coff += pc;
  }
  bool track = false;
  for (const auto& p : parts) track = track || detail::tracking(p);
  if (track) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<detail::TensorNode<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    GradTape<T>::active()->record([nodes, on = out.node(), r, cols] {
      if (on->grad.empty()) return;
      std::size_t coff = 0;
      for (auto& nd : nodes) {
        const std::size_t pc = nd->shape[1];
        if (nd->requires_grad) {
          detail::ensure_zero_grad(*nd);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < pc; ++j)
              nd->grad[i * pc + j] += on->grad[i * cols + coff + j];
        }
        coff += pc;
      }
    });
  }
  return out;
}

// Select index i along axis 0; the result drops that axis.
template <typename T>
Tensor<T> select_batch(const Tensor<T>& x, std::size_t i) {
  if (x.rank() < 2) throw ShapeError("select_batch: expected rank >= 2");
  const std::size_t b = x.dim(0);
  if (i >= b) throw ShapeError("select_batch: index out of range");
  Shape out_shape(x.shape().begin() + 1, x.shape().end());
  const std::size_t chunk = x.size() / b;
  Tensor<T> out = Tensor<T>::uninit(out_shape);
  std::copy(x.data() + i * chunk, x.data() + (i + 1) * chunk, out.data());
  if (detail::tracking(x)) {
    out.set_requires_grad(true);
    GradTape<T>::active()->record([xn = x.node(), on = out.node(), i, chunk] {
      if (on->grad.empty() || !xn->requires_grad) return;
      detail::ensure_zero_grad(*xn);
      for (std::size_t k = 0; k < chunk; ++k)
        xn->grad[i * chunk + k] += on->grad[k];
    });
  }
  return out;
}

// Assemble a [rows, cols] matrix from rows*cols one-element tensors, row-major.
template <typename T>
Tensor<T> stack_scalars(const std::vector<Tensor<T>>& parts, std::size_t rows,
                        std::size_t cols) {
  if (parts.size() != rows * cols)
    throw ShapeError("stack_scalars: need rows*cols inputs");
  Tensor<T> out = Tensor<T>::uninit(Shape{rows, cols});
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].size() != 1)
      throw ShapeError("stack_scalars: inputs must be scalars");
    out(i) = parts[i].item();
  }
  bool track = false;
  for (const auto& p : parts) track = track || detail::tracking(p);
  if (track) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<detail::TensorNode<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    GradTape<T>::active()->record([nodes, on = out.node()] {
      if (on->grad.empty()) return;
      for (std::size_t i = 0; i < nodes.size(); ++i) {
        auto& nd = nodes[i];
        if (!nd->requires_grad) continue;
        detail::ensure_zero_grad(*nd);
        nd->grad[0] += on->grad[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: expected rank-2 inputs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul: inner dimensions " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::uninit(Shape{m, n});
  detail::CMapM<T> am(a.data(), m, k), bm(b.data(), k, n);
  detail::MapM<T> om(out.data(), m, n);
  om.noalias() = am * bm;
  if (detail::tracking(a, b)) {
    out.set_requires_grad(true);
    GradTape<T>::active()->record([an = a.node(), bn = b.node(),
                                   on = out.node(), m, k, n] {
      if (on->grad.empty()) return;
      detail::CMapM<T> g(on->grad.data(), m, n);
      if (an->requires_grad) {
        detail::ensure_zero_grad(*an);
        detail::MapM<T> da(an->grad.data(), m, k);
        detail::CMapM<T> bm(bn->values.data(), k, n);
        da.noalias() += g * bm.transpose();
      }
      if (bn->requires_grad) {
        detail::ensure_zero_grad(*bn);
        detail::MapM<T> db(bn->grad.data(), k, n);
        detail::CMapM<T> am(an->values.data(), m, k);
        db.noalias() += am.transpose() * g;
      }
    });
  }
  detail::check_finite(out, "matmul");
  return out;
}

// ---------------------------------------------------------------------------
// Softmax / cross-entropy
// ---------------------------------------------------------------------------

namespace detail {

struct AxisSpan {
  std::size_t outer, len, stride, outer_stride;
};

inline AxisSpan axis_span(const Shape& shape, std::size_t axis) {
  if (shape.size() > 2 || axis >= shape.size())
    throw ShapeError("softmax: axis " + std::to_string(axis) +
                     " invalid for " + shape_str(shape));
  if (shape.size() == 1) return {1, shape[0], 1, 0};
  if (axis == 1) return {shape[0], shape[1], 1, shape[1]};
  return {shape[1], shape[0], shape[1], 1};
}

}  // namespace detail

// Max-subtracted softmax along `axis` of a rank-1 or rank-2 tensor.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto sp = detail::axis_span(x.shape(), axis);
  Tensor<T> out = Tensor<T>::uninit(x.shape());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    const T* xv = x.data() + o * sp.outer_stride;
    T* ov = out.data() + o * sp.outer_stride;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < sp.len; ++i)
      mx = std::max(mx, xv[i * sp.stride]);
    T denom = 0;
    for (std::size_t i = 0; i < sp.len; ++i) {
      const T e = std::exp(xv[i * sp.stride] - mx);
      ov[i * sp.stride] = e;
      denom += e;
    }
    const T inv = T(1) / denom;
    for (std::size_t i = 0; i < sp.len; ++i) ov[i * sp.stride] *= inv;
  }
  if (detail::tracking(x)) {
    out.set_requires_grad(true);
    GradTape<T>::active()->record([xn = x.node(), on = out.node(), sp] {
      if (on->grad.empty() || !xn->requires_grad) return;
      detail::ensure_zero_grad(*xn);
      for (std::size_t o = 0; o < sp.outer; ++o) {
        const T* y = on->values.data() + o * sp.outer_stride;
        const T* g = on->grad.data() + o * sp.outer_stride;
        T* dx = xn->grad.data() + o * sp.outer_stride;
        T dot = 0;
        for (std::size_t i = 0; i < sp.len; ++i)
          dot += g[i * sp.stride] * y[i * sp.stride];
        for (std::size_t i = 0; i < sp.len; ++i)
          dx[i * sp.stride] +=
              y[i * sp.stride] * (g[i * sp.stride] - dot);
      }
    });
  }
  detail::check_finite(out, "softmax");
  return out;
}

// Mean negative log-likelihood of `labels` under softmax(logits), computed
// through log-sum-exp rather than log(softmax).
template <typename T>
Tensor<T> cross_entropy_with_logits(const Tensor<T>& logits,
                                    const std::vector<int>& labels) {
  if (logits.rank() != 2)
    throw ShapeError("cross_entropy_with_logits: expected rank-2 logits");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  if (labels.size() != rows)
    throw ShapeError("cross_entropy_with_logits: label count mismatch");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= cols)
      throw ShapeError("cross_entropy_with_logits: label out of range");
  T acc = 0;
  std::vector<T> probs(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* v = logits.data() + r * cols;
    T mx = v[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, v[c]);
    T denom = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      probs[r * cols + c] = std::exp(v[c] - mx);
      denom += probs[r * cols + c];
    }
    for (std::size_t c = 0; c < cols; ++c) probs[r * cols + c] /= denom;
    const T lse = mx + std::log(denom);
    acc += lse - v[static_cast<std::size_t>(labels[r])];
  }
  Tensor<T> out = Tensor<T>::scalar(acc / static_cast<T>(rows));
  if (detail::tracking(logits)) {
    out.set_requires_grad(true);
    GradTape<T>::active()->record([xn = logits.node(), on = out.node(),
                                   probs = std::move(probs), labels, rows,
                                   cols] {
      if (on->grad.empty() || !xn->requires_grad) return;
      detail::ensure_zero_grad(*xn);
      const T g = on->grad[0] / static_cast<T>(rows);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
          T p = probs[r * cols + c];
          if (c == static_cast<std::size_t>(labels[r])) p -= T(1);
          xn->grad[r * cols + c] += g * p;
        }
    });
  }
  detail::check_finite(out, "cross_entropy_with_logits");
  return out;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-5;

// Normalizes the last axis to zero mean / unit variance, then applies the
// affine pair. Leading axes are treated as rows.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(kLayerNormEps)) {
  if (x.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (gamma.size() != d || beta.size() != d)
    throw ShapeError("layer_norm: affine size mismatch");
  const std::size_t rows = x.size() / d;
  Tensor<T> out = Tensor<T>::uninit(x.shape());
  std::vector<T> mean(rows), invstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* v = x.data() + r * d;
    T m = 0;
    for (std::size_t i = 0; i < d; ++i) m += v[i];
    m /= static_cast<T>(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (v[i] - m) * (v[i] - m);
    var /= static_cast<T>(d);
    mean[r] = m;
    invstd[r] = T(1) / std::sqrt(var + eps);
    T* ov = out.data() + r * d;
    for (std::size_t i = 0; i < d; ++i)
      ov[i] = gamma.data()[i] * (v[i] - m) * invstd[r] + beta.data()[i];
  }
  if (detail::tracking(x, gamma, beta)) {
    out.set_requires_grad(true);
    GradTape<T>::active()->record([xn = x.node(), gn = gamma.node(),
                                   bn = beta.node(), on = out.node(),
                                   mean = std::move(mean),
                                   invstd = std::move(invstd), rows, d] {
      if (on->grad.empty()) return;
      for (std::size_t r = 0; r < rows; ++r) {
        const T* g = on->grad.data() + r * d;
        const T* v = xn->values.data() + r * d;
        const T m = mean[r], is = invstd[r];
        if (gn->requires_grad || bn->requires_grad) {
          if (gn->requires_grad) detail::ensure_zero_grad(*gn);
          if (bn->requires_grad) detail::ensure_zero_grad(*bn);
          for (std::size_t i = 0; i < d; ++i) {
            const T xhat = (v[i] - m) * is;
            if (gn->requires_grad) gn->grad[i] += g[i] * xhat;
            if (bn->requires_grad) bn->grad[i] += g[i];
          }
        }
        if (xn->requires_grad) {
          detail::ensure_zero_grad(*xn);
          T sum_dx = 0, sum_dx_xhat = 0;
          for (std::size_t i = 0; i < d; ++i) {
            const T xhat = (v[i] - m) * is;
            const T dxhat = g[i] * gn->values[i];
            sum_dx += dxhat;
            sum_dx_xhat += dxhat * xhat;
          }
          const T invd = T(1) / static_cast<T>(d);
          T* dx = xn->grad.data() + r * d;
          for (std::size_t i = 0; i < d; ++i) {
            const T xhat = (v[i] - m) * is;
            const T dxhat = g[i] * gn->values[i];
            dx[i] += is * (dxhat - sum_dx * invd - xhat * sum_dx_xhat * invd);
          }
        }
      }
    });
  }
  detail::check_finite(out, "layer_norm");
  return out;
}

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// Per-channel batch normalization over [B,C,H,W]. Training mode normalizes
// with batch statistics and updates the running buffers in place (momentum
// convention: running = (1-m)*running + m*batch, unbiased variance stored);
// eval mode reads the running buffers. Training requires batch size >= 2.
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma,
                       const Tensor<T>& beta, Tensor<T>& running_mean,
                       Tensor<T>& running_var, bool training,
                       T momentum = T(kBatchNormMomentum),
                       T eps = T(kBatchNormEps)) {
  if (x.rank() != 4) throw ShapeError("batch_norm2d: expected [B,C,H,W]");
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (gamma.size() != c || beta.size() != c || running_mean.size() != c ||
      running_var.size() != c)
    throw ShapeError("batch_norm2d: per-channel parameter size mismatch");
  if (training && b < 2)
    throw ShapeError("batch_norm2d: training mode needs batch size >= 2");

  const std::size_t plane = h * w;
  const std::size_t count = b * plane;
  std::vector<T> mean(c), invstd(c);
  if (training) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      T m = 0;
      for (std::size_t bi = 0; bi < b; ++bi)
        m += detail::CArrMap<T>(x.data() + (bi * c + ch) * plane, plane).sum();
      m /= static_cast<T>(count);
      T var = 0;
      for (std::size_t bi = 0; bi < b; ++bi)
        var += (detail::CArrMap<T>(x.data() + (bi * c + ch) * plane, plane) -
                m)
                   .square()
                   .sum();
      var /= static_cast<T>(count);
      mean[ch] = m;
      invstd[ch] = T(1) / std::sqrt(var + eps);
      const T unbiased = var * static_cast<T>(count) /
                         static_cast<T>(count - 1);
      running_mean(ch) = (T(1) - momentum) * running_mean(ch) + momentum * m;
      running_var(ch) =
          (T(1) - momentum) * running_var(ch) + momentum * unbiased;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = running_mean(ch);
      invstd[ch] = T(1) / std::sqrt(running_var(ch) + eps);
    }
  }

  Tensor<T> out = Tensor<T>::uninit(x.shape());
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T scale = gamma.data()[ch] * invstd[ch];
      const T shift = beta.data()[ch] - mean[ch] * scale;
      detail::ArrMap<T>(out.data() + (bi * c + ch) * plane, plane) =
          detail::CArrMap<T>(x.data() + (bi * c + ch) * plane, plane) * scale +
          shift;
    }

  if (detail::tracking(x, gamma, beta)) {
    out.set_requires_grad(true);
    GradTape<T>::active()->record([xn = x.node(), gn = gamma.node(),
                                   bn = beta.node(), on = out.node(),
                                   mean = std::move(mean),
                                   invstd = std::move(invstd), training, b, c,
                                   plane] {
      if (on->grad.empty()) return;
      const std::size_t count = b * plane;
      std::vector<T> sum_g(c, T(0)), sum_g_xhat(c, T(0));
      for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t ch = 0; ch < c; ++ch) {
          detail::CArrMap<T> g(on->grad.data() + (bi * c + ch) * plane, plane);
          detail::CArrMap<T> v(xn->values.data() + (bi * c + ch) * plane,
                               plane);
          sum_g[ch] += g.sum();
          sum_g_xhat[ch] += (g * (v - mean[ch])).sum() * invstd[ch];
        }
      if (gn->requires_grad) {
        detail::ensure_zero_grad(*gn);
        for (std::size_t ch = 0; ch < c; ++ch)
          gn->grad[ch] += sum_g_xhat[ch];
      }
      if (bn->requires_grad) {
        detail::ensure_zero_grad(*bn);
        for (std::size_t ch = 0; ch < c; ++ch) bn->grad[ch] += sum_g[ch];
      }
      if (xn->requires_grad) {
        detail::ensure_zero_grad(*xn);
        const T invn = T(1) / static_cast<T>(count);
        for (std::size_t bi = 0; bi < b; ++bi)
          for (std::size_t ch = 0; ch < c; ++ch) {
            detail::CArrMap<T> g(on->grad.data() + (bi * c + ch) * plane,
                                 plane);
            detail::CArrMap<T> v(xn->values.data() + (bi * c + ch) * plane,
                                 plane);
            detail::ArrMap<T> dx(xn->grad.data() + (bi * c + ch) * plane,
                                 plane);
            const T ga = gn->values[ch], is = invstd[ch];
            if (training) {
              dx += ga * is *
                    (g - sum_g[ch] * invn -
                     (v - mean[ch]) * is * (sum_g_xhat[ch] * invn));
            } else {
              dx += ga * is * g;
            }
          }
      }
    });
  }
  detail::check_finite(out, "batch_norm2d");
  return out;
}

// ---------------------------------------------------------------------------
// Convolution / pooling
// ---------------------------------------------------------------------------

namespace detail {

// Unpacks one [C,H,W] image into patch columns of a [C*kh*kw, total_cols]
// matrix, starting at column col_off.
template <typename T>
void im2col_cols(const T* img, std::size_t c, std::size_t h, std::size_t w,
                 std::size_t kh, std::size_t kw, std::size_t stride,
                 std::size_t pad, std::size_t ho, std::size_t wo, T* cols,
                 std::size_t col_off, std::size_t total_cols) {
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        T* row = cols + ((ch * kh + ki) * kw + kj) * total_cols + col_off;
        for (std::size_t oh = 0; oh < ho; ++oh) {
          const std::ptrdiff_t ih =
              std::ptrdiff_t(oh * stride + ki) - std::ptrdiff_t(pad);
          if (ih < 0 || ih >= std::ptrdiff_t(h)) {
            std::fill(row + oh * wo, row + (oh + 1) * wo, T(0));
            continue;
          }
          const T* src = img + (ch * h + std::size_t(ih)) * w;
          if (stride == 1 && kj >= pad && w >= kj - pad + wo) {
            // contiguous span, no horizontal clipping
            std::copy(src + (kj - pad), src + (kj - pad) + wo, row + oh * wo);
            continue;
          }
          for (std::size_t ow = 0; ow < wo; ++ow) {
            const std::ptrdiff_t iw =
                std::ptrdiff_t(ow * stride + kj) - std::ptrdiff_t(pad);
            row[oh * wo + ow] =
                (iw < 0 || iw >= std::ptrdiff_t(w)) ? T(0) : src[iw];
          }
        }
      }
}

template <typename T>
void col2im_add_cols(const T* cols, std::size_t c, std::size_t h,
                     std::size_t w, std::size_t kh, std::size_t kw,
                     std::size_t stride, std::size_t pad, std::size_t ho,
                     std::size_t wo, T* img, std::size_t col_off,
                     std::size_t total_cols) {
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const T* row =
            cols + ((ch * kh + ki) * kw + kj) * total_cols + col_off;
        for (std::size_t oh = 0; oh < ho; ++oh) {
          const std::ptrdiff_t ih =
              std::ptrdiff_t(oh * stride + ki) - std::ptrdiff_t(pad);
          if (ih < 0 || ih >= std::ptrdiff_t(h)) continue;
          T* dst = img + (ch * h + std::size_t(ih)) * w;
          for (std::size_t ow = 0; ow < wo; ++ow) {
            const std::ptrdiff_t iw =
                std::ptrdiff_t(ow * stride + kj) - std::ptrdiff_t(pad);
            if (iw >= 0 && iw < std::ptrdiff_t(w))
              dst[iw] += row[oh * wo + ow];
          }
        }
      }
}

}  // namespace detail

// Cross-correlation (no kernel flip) over [B,C,H,W] with square stride and
// symmetric zero padding. Lowered to a GEMM per image via im2col; the patch
// matrix is recomputed in the backward pass instead of being stored.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight,
                 std::size_t stride = 1, std::size_t padding = 0) {
  if (x.rank() != 4 || weight.rank() != 4)
    throw ShapeError("conv2d: expected [B,C,H,W] input and [O,C,kh,kw] weight");
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t o = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != c)
    throw ShapeError("conv2d: channel mismatch " + shape_str(x.shape()) +
                     " vs " + shape_str(weight.shape()));
  if (h + 2 * padding < kh || w + 2 * padding < kw)
    throw ShapeError("conv2d: kernel larger than padded input");
  const std::size_t ho = (h + 2 * padding - kh) / stride + 1;
  const std::size_t wo = (w + 2 * padding - kw) / stride + 1;
  const std::size_t ckk = c * kh * kw;

  Tensor<T> out = Tensor<T>::uninit(Shape{b, o, ho, wo});
  const std::size_t patch = ho * wo;
  std::vector<T> cols = detail::BufferPool<T>::instance().take(ckk * b * patch);
  detail::CMapM<T> wm(weight.data(), o, ckk);
  for (std::size_t bi = 0; bi < b; ++bi)
    detail::im2col_cols(x.data() + bi * c * h * w, c, h, w, kh, kw, stride,
                        padding, ho, wo, cols.data(), bi * patch, b * patch);
  {
    detail::CMapM<T> cm(cols.data(), ckk, b * patch);
    // product is [o, b*patch]; out layout is [b][o][patch], so copy per image
    std::vector<T> prod = detail::BufferPool<T>::instance().take(o * b * patch);
    detail::MapM<T> pm(prod.data(), o, b * patch);
    pm.noalias() = wm * cm;
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t oc = 0; oc < o; ++oc)
        std::copy(prod.data() + oc * b * patch + bi * patch,
                  prod.data() + oc * b * patch + (bi + 1) * patch,
                  out.data() + (bi * o + oc) * patch);
    detail::BufferPool<T>::instance().give(std::move(prod));
  }
  detail::BufferPool<T>::instance().give(std::move(cols));

  if (detail::tracking(x, weight)) {
    out.set_requires_grad(true);
    GradTape<T>::active()->record([xn = x.node(), wn = weight.node(),
                                   on = out.node(), b, c, h, w, o, kh, kw,
                                   stride, padding, ho, wo, ckk] {
      if (on->grad.empty()) return;
      const std::size_t patch = ho * wo;
      auto& pool = detail::BufferPool<T>::instance();
      if (wn->requires_grad) detail::ensure_zero_grad(*wn);
      if (xn->requires_grad) detail::ensure_zero_grad(*xn);
      // regroup upstream grad into [o, b*patch] to match the column layout
      std::vector<T> gcat = pool.take(o * b * patch);
      for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t oc = 0; oc < o; ++oc)
          std::copy(on->grad.data() + (bi * o + oc) * patch,
                    on->grad.data() + (bi * o + oc + 1) * patch,
                    gcat.data() + oc * b * patch + bi * patch);
      detail::CMapM<T> g(gcat.data(), o, b * patch);
      detail::CMapM<T> wm(wn->values.data(), o, ckk);
      if (wn->requires_grad) {
        std::vector<T> cols = pool.take(ckk * b * patch);
        for (std::size_t bi = 0; bi < b; ++bi)
          detail::im2col_cols(xn->values.data() + bi * c * h * w, c, h, w, kh,
                              kw, stride, padding, ho, wo, cols.data(),
                              bi * patch, b * patch);
        detail::CMapM<T> cm(cols.data(), ckk, b * patch);
        detail::MapM<T> dw(wn->grad.data(), o, ckk);
        dw.noalias() += g * cm.transpose();
        pool.give(std::move(cols));
      }
      if (xn->requires_grad) {
        std::vector<T> dcols = pool.take(ckk * b * patch);
        detail::MapM<T> dc(dcols.data(), ckk, b * patch);
        dc.noalias() = wm.transpose() * g;
        for (std::size_t bi = 0; bi < b; ++bi)
          detail::col2im_add_cols(dcols.data(), c, h, w, kh, kw, stride,
                                  padding, ho, wo,
                                  xn->grad.data() + bi * c * h * w,
                                  bi * patch, b * patch);
        pool.give(std::move(dcols));
      }
      pool.give(std::move(gcat));
    });
  }
  detail::check_finite(out, "conv2d");
  return out;
}

// Window maximum over [B,C,H,W]; gradient routes to the first maximal element
// of each window in row-major order.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t window,
                     std::size_t stride = 0) {
  if (x.rank() != 4) throw ShapeError("max_pool2d: expected [B,C,H,W]");
  if (stride == 0) stride = window;
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (window > h || window > w)
    throw ShapeError("max_pool2d: window exceeds spatial extent");
  const std::size_t ho = (h - window) / stride + 1;
  const std::size_t wo = (w - window) / stride + 1;
  Tensor<T> out = Tensor<T>::uninit(Shape{b, c, ho, wo});
  std::vector<std::uint32_t> argmax(out.size());
  for (std::size_t p = 0; p < b * c; ++p) {
    const T* plane = x.data() + p * h * w;
    const std::size_t obase = p * ho * wo;
    if (window == 2 && stride == 2) {
      for (std::size_t oh = 0; oh < ho; ++oh) {
        const T* r0 = plane + 2 * oh * w;
        const T* r1 = r0 + w;
        T* ov = out.data() + obase + oh * wo;
        std::uint32_t* av = argmax.data() + obase + oh * wo;
        const std::uint32_t rbase = std::uint32_t(2 * oh * w);
        for (std::size_t ow = 0; ow < wo; ++ow) {
          const T a = r0[2 * ow], bb = r0[2 * ow + 1];
          const T cc = r1[2 * ow], d = r1[2 * ow + 1];
          T m = a;
          std::uint32_t idx = rbase + std::uint32_t(2 * ow);
          if (bb > m) { m = bb; idx = rbase + std::uint32_t(2 * ow + 1); }
          if (cc > m) { m = cc; idx = rbase + std::uint32_t(w + 2 * ow); }
          if (d > m) { m = d; idx = rbase + std::uint32_t(w + 2 * ow + 1); }
          ov[ow] = m;
          av[ow] = idx;
        }
      }
      continue;
    }
    for (std::size_t oh = 0; oh < ho; ++oh)
      for (std::size_t ow = 0; ow < wo; ++ow) {
        T best = -std::numeric_limits<T>::infinity();
        std::uint32_t best_idx = 0;
        for (std::size_t ki = 0; ki < window; ++ki)
          for (std::size_t kj = 0; kj < window; ++kj) {
            const std::size_t idx = (oh * stride + ki) * w + (ow * stride + kj);
            if (plane[idx] > best) {
              best = plane[idx];
              best_idx = static_cast<std::uint32_t>(idx);
            }
          }
        out.data()[obase + oh * wo + ow] = best;
        argmax[obase + oh * wo + ow] = best_idx;
      }
  }
  if (detail::tracking(x)) {
    out.set_requires_grad(true);
    GradTape<T>::active()->record([xn = x.node(), on = out.node(),
                                   argmax = std::move(argmax), b, c, h, w, ho,
                                   wo] {
      if (on->grad.empty() || !xn->requires_grad) return;
      detail::ensure_zero_grad(*xn);
      for (std::size_t p = 0; p < b * c; ++p) {
        T* dplane = xn->grad.data() + p * h * w;
        const std::size_t obase = p * ho * wo;
        for (std::size_t i = 0; i < ho * wo; ++i)
          dplane[argmax[obase + i]] += on->grad[obase + i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Misc helpers used across modules
// ---------------------------------------------------------------------------

template <typename T>
std::size_t argmax_row(const Tensor<T>& m, std::size_t row) {
  const std::size_t c = m.dim(1);
  std::size_t best = 0;
  for (std::size_t j = 1; j < c; ++j)
    if (m(row, j) > m(row, best)) best = j;
  return best;
}

}  // namespace hmdrn
