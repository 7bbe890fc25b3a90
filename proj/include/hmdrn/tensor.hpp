#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hmdrn/rng.hpp"

namespace hmdrn {

using Shape = std::vector<std::size_t>;

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

// Recycles large value/grad buffers between tensors. Fresh multi-megabyte
// allocations hit kernel zero-page faulting on every episode; reuse keeps the
// hot working set mapped. Buffers come back with stale contents, so callers
// that need zeros must fill explicitly.
template <typename T>
class BufferPool {
 public:
  static BufferPool& instance() {
    static thread_local BufferPool pool;
    return pool;
  }

  std::vector<T> take(std::size_t n) {
    auto it = free_.find(n);
    if (it != free_.end() && !it->second.empty()) {
      std::vector<T> v = std::move(it->second.back());
      it->second.pop_back();
      return v;
    }
    std::vector<T> v;
    v.resize(n);
    return v;
  }

  void give(std::vector<T>&& v) {
    if (v.size() < kMinPooled) return;
    auto& stack = free_[v.size()];
    if (stack.size() < 8) stack.push_back(std::move(v));
  }

 private:
  static constexpr std::size_t kMinPooled = 1 << 15;
  std::unordered_map<std::size_t, std::vector<std::vector<T>>> free_;
};

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // allocated on first use
  bool requires_grad = false;

  ~TensorNode() {
    BufferPool<T>::instance().give(std::move(values));
    BufferPool<T>::instance().give(std::move(grad));
  }
};

template <typename T>
inline void ensure_zero_grad(TensorNode<T>& node) {
  if (!node.grad.empty()) return;
  node.grad = BufferPool<T>::instance().take(node.values.size());
  std::fill(node.grad.begin(), node.grad.end(), T(0));
}

// Finite checks after every op are on by default; FiniteCheckGuard turns them
// off for a scope (used by benchmarks, never by the training loop).
inline thread_local bool finite_checks_on = true;

}  // namespace detail

struct FiniteCheckGuard {
  explicit FiniteCheckGuard(bool enable) : prev(detail::finite_checks_on) {
    detail::finite_checks_on = enable;
  }
  ~FiniteCheckGuard() { detail::finite_checks_on = prev; }
  bool prev;
};

// Dense row-major tensor handle. Copies share the underlying node, like
// numpy views of the whole buffer; ops never mutate their inputs, so sharing
// is observable only through explicit in-place methods (fill, add_, ...).
template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  using Node = detail::TensorNode<T>;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : n_(std::make_shared<Node>()) {
    validate_shape(shape);
    n_->shape = std::move(shape);
    n_->values = detail::BufferPool<T>::instance().take(shape_numel(n_->shape));
    std::fill(n_->values.begin(), n_->values.end(), T(0));
    n_->requires_grad = requires_grad;
  }

  // Pooled storage with unspecified contents; for op outputs that overwrite
  // every element before returning.
  static Tensor uninit(Shape shape) {
    Tensor t;
    t.n_ = std::make_shared<Node>();
    validate_shape(shape);
    t.n_->shape = std::move(shape);
    t.n_->values =
        detail::BufferPool<T>::instance().take(shape_numel(t.n_->shape));
    return t;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), requires_grad);
  }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.n_->values.begin(), t.n_->values.end(), value);
    return t;
  }

  static Tensor scalar(T value) {
    Tensor t(Shape{1});
    t.n_->values[0] = value;
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values) {
    Tensor t;
    t.n_ = std::make_shared<Node>();
    validate_shape(shape);
    if (shape_numel(shape) != values.size())
      throw ShapeError("from: " + std::to_string(values.size()) +
                       " values for shape " + shape_str(shape));
    t.n_->shape = std::move(shape);
    t.n_->values = std::move(values);
    return t;
  }

  static Tensor uniform(Rng& rng, Shape shape, T lo, T hi,
                        bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    for (auto& v : t.n_->values) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  static Tensor normal(Rng& rng, Shape shape, T mean, T stddev,
                       bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    for (auto& v : t.n_->values) v = static_cast<T>(rng.normal(mean, stddev));
    return t;
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  std::size_t rank() const { return n_->shape.size(); }
  std::size_t size() const { return n_->values.size(); }
  std::size_t dim(std::size_t i) const { return n_->shape.at(i); }

  const std::vector<T>& values() const { return n_->values; }
  std::vector<T>& values() { return n_->values; }
  const T* data() const { return n_->values.data(); }
  T* data() { return n_->values.data(); }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool b) { n_->requires_grad = b; }

  bool has_grad() const { return !n_->grad.empty(); }
  std::vector<T>& grad() {
    ensure_grad();
    return n_->grad;
  }
  const std::vector<T>& grad_view() const { return n_->grad; }
  void ensure_grad() { detail::ensure_zero_grad(*n_); }
  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
  }

  T item() const {
    if (size() != 1)
      throw ShapeError("item: tensor has shape " + shape_str(shape()));
    return n_->values[0];
  }

  T& operator()(std::size_t i) { return n_->values[i]; }
  T operator()(std::size_t i) const { return n_->values[i]; }
  T& operator()(std::size_t i, std::size_t j) {
    return n_->values[i * dim(1) + j];
  }
  T operator()(std::size_t i, std::size_t j) const {
    return n_->values[i * dim(1) + j];
  }
  T& operator()(std::size_t c, std::size_t h, std::size_t w) {
    return n_->values[(c * dim(1) + h) * dim(2) + w];
  }
  T operator()(std::size_t c, std::size_t h, std::size_t w) const {
    return n_->values[(c * dim(1) + h) * dim(2) + w];
  }
  T& operator()(std::size_t b, std::size_t c, std::size_t h, std::size_t w) {
    return n_->values[((b * dim(1) + c) * dim(2) + h) * dim(3) + w];
  }
  T operator()(std::size_t b, std::size_t c, std::size_t h,
               std::size_t w) const {
    return n_->values[((b * dim(1) + c) * dim(2) + h) * dim(3) + w];
  }

  void fill(T v) { std::fill(n_->values.begin(), n_->values.end(), v); }

  std::shared_ptr<Node> node() const { return n_; }

  // Deep copy of values; grad and requires_grad are not carried over.
  Tensor clone() const {
    Tensor t = uninit(n_->shape);
    std::copy(n_->values.begin(), n_->values.end(), t.n_->values.begin());
    return t;
  }

  bool all_finite() const {
    for (const T v : n_->values)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  static void validate_shape(const Shape& s) {
    for (std::size_t d : s)
      if (d == 0) throw ShapeError("zero-sized dimension in " + shape_str(s));
  }

  std::shared_ptr<Node> n_;
};

// Reverse-mode tape. Ops append their adjoint closures in execution order,
// which is already a topological order; backward() replays them in reverse.
// One tape per thread may be active at a time (nesting restores the outer
// tape on destruction).
template <typename T>
class GradTape {
 public:
  GradTape() : prev_(current_ref()) { current_ref() = this; }
  ~GradTape() { current_ref() = prev_; }
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active() { return current_ref(); }

  void record(std::function<void()> backward_fn) {
    entries_.push_back(std::move(backward_fn));
  }

  std::size_t size() const { return entries_.size(); }

  void run_backward() {
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  }

 private:
  static GradTape*& current_ref() {
    static thread_local GradTape* current = nullptr;
    return current;
  }

  std::vector<std::function<void()>> entries_;
  GradTape* prev_;
};

namespace detail {

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* op) {
  if (!finite_checks_on) return;
  for (const T v : t.values())
    if (!std::isfinite(v))
      throw NonFiniteError(std::string(op) + ": non-finite value in output " +
                           shape_str(t.shape()));
}

// True when the op's output must be tracked on the active tape.
template <typename T, typename... Ts>
inline bool tracking(const Tensor<T>& first, const Ts&... rest) {
  if (GradTape<T>::active() == nullptr) return false;
  return (first.requires_grad() || ... || rest.requires_grad());
}

template <typename T>
inline void accumulate(detail::TensorNode<T>& node, const std::vector<T>& g) {
  ensure_zero_grad(node);
  for (std::size_t i = 0; i < g.size(); ++i) node.grad[i] += g[i];
}

}  // namespace detail

// Seeds d(loss)/d(loss) = 1 and replays the tape. Leaf grads accumulate
// across calls until zeroed.
template <typename T>
void backward(Tensor<T>& loss, GradTape<T>& tape) {
  if (loss.size() != 1)
    throw ShapeError("backward: loss must be scalar, got " +
                     shape_str(loss.shape()));
  loss.ensure_grad();
  loss.grad()[0] += T(1);
  tape.run_backward();
}

}  // namespace hmdrn
