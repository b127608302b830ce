#pragma once

// Dense CHW-style tensor with a define-by-run reverse-mode tape.
//
// A Tensor is a cheap handle onto shared storage. Operations that consume a
// tensor with requires_grad() record a Node on their output; backward() walks
// those nodes in reverse topological order exactly once and then releases
// them, so a graph cannot be replayed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace flowup {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class AutogradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using Shape = std::vector<std::int64_t>;
using Rng = std::mt19937_64;

inline std::int64_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

template <typename T>
class Tensor;

namespace detail {

// 64-byte aligned storage. Vectorised kernels peel differently depending on
// buffer alignment, so fixed alignment keeps results bit-reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

}  // namespace detail

template <typename T>
using Buffer = std::vector<T, detail::AlignedAllocator<T>>;

namespace detail {

template <typename T>
struct TensorImpl;

template <typename T>
struct Node {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  // Receives the gradient of the node's output and accumulates into inputs.
  std::function<void(std::span<const T>)> backward;
  bool consumed = false;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;
  bool requires_grad = false;
  std::shared_ptr<Node<T>> node;

  std::span<T> ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

inline thread_local bool grad_disabled = false;

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_disabled) { detail::grad_disabled = true; }
  ~NoGradGuard() { detail::grad_disabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return !detail::grad_disabled; }

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Impl = detail::TensorImpl<T>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : impl_(std::make_shared<Impl>()) {
    for (auto extent : shape) {
      if (extent < 0) throw DimensionError("negative extent in shape " + shape_str(shape));
    }
    impl_->data.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, Buffer<T> values) : impl_(std::make_shared<Impl>()) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
      throw DimensionError("shape " + shape_str(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
  }

  Tensor(Shape shape, const std::vector<T>& values)
      : Tensor(std::move(shape), Buffer<T>(values.begin(), values.end())) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor full(Shape shape, T value) { return Tensor(std::move(shape), value); }
  static Tensor scalar(T value) { return Tensor(Shape{}, value); }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.impl_->data) v = static_cast<T>(dist(rng));
    return t;
  }

  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : t.impl_->data) v = static_cast<T>(dist(rng));
    return t;
  }

  bool defined() const { return static_cast<bool>(impl_); }

  const Shape& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::int64_t dim(int axis) const {
    const int n = ndim();
    if (axis < 0) axis += n;
    if (axis < 0 || axis >= n) {
      throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                           shape_str(shape()));
    }
    return impl_->shape[static_cast<std::size_t>(axis)];
  }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  const Buffer<T>& values() const { return impl_->data; }

  T& operator[](std::int64_t i) { return impl_->data[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return impl_->data[static_cast<std::size_t>(i)]; }

  // Row-major multi-index access; bounds are the caller's responsibility.
  template <typename... Idx>
  T& at(Idx... idx) {
    return impl_->data[offset({static_cast<std::int64_t>(idx)...})];
  }
  template <typename... Idx>
  const T& at(Idx... idx) const {
    return impl_->data[offset({static_cast<std::int64_t>(idx)...})];
  }

  T item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }

  Tensor& requires_grad_(bool flag = true) {
    if (impl_->node) throw AutogradError("requires_grad_ is only valid on leaf tensors");
    impl_->requires_grad = flag;
    return *this;
  }

  bool is_leaf() const { return !impl_->node; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> grad_mut() { return impl_->ensure_grad(); }

  Tensor grad_tensor() const {
    if (!has_grad()) return Tensor(shape());
    return Tensor(shape(), impl_->grad);
  }

  void zero_grad() { impl_->grad.clear(); }

  /// Copy of the values with no graph attached.
  Tensor detach() const { return Tensor(shape(), impl_->data); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(impl_->data.begin(), impl_->data.end());
    return Tensor<U>(shape(), std::move(out));
  }

  const std::shared_ptr<Impl>& impl() const { return impl_; }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::size_t offset(std::initializer_list<std::int64_t> idx) const {
    std::size_t off = 0;
    std::size_t axis = 0;
    for (auto i : idx) {
      off = off * static_cast<std::size_t>(impl_->shape[axis]) + static_cast<std::size_t>(i);
      ++axis;
    }
    return off;
  }

  std::shared_ptr<Impl> impl_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

namespace detail {

template <typename T>
bool needs_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (grad_disabled) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor<T>* t) { return t && t->defined() && t->requires_grad(); });
}

// Attaches a backward closure to `out`. `fn` receives the output gradient and
// is responsible for accumulating into each input that requires grad.
template <typename T, typename Fn>
void record(Tensor<T>& out, const char* op, std::initializer_list<const Tensor<T>*> inputs,
            Fn&& fn) {
  if (!needs_grad<T>(inputs)) return;
  auto node = std::make_shared<Node<T>>();
  node->op = op;
  for (const auto* t : inputs) {
    if (t && t->defined() && t->requires_grad()) node->inputs.push_back(t->impl());
  }
  node->backward = std::forward<Fn>(fn);
  out.impl()->requires_grad = true;
  out.impl()->node = std::move(node);
}

template <typename T>
void record_many(Tensor<T>& out, const char* op, const std::vector<Tensor<T>>& inputs,
                 std::function<void(std::span<const T>)> fn) {
  if (grad_disabled) return;
  auto node = std::make_shared<Node<T>>();
  node->op = op;
  for (const auto& t : inputs) {
    if (t.requires_grad()) node->inputs.push_back(t.impl());
  }
  if (node->inputs.empty()) return;
  node->backward = std::move(fn);
  out.impl()->requires_grad = true;
  out.impl()->node = std::move(node);
}

// Gradient buffer of `t` if it participates in differentiation, else empty.
template <typename T>
std::span<T> grad_sink(const Tensor<T>& t) {
  if (!t.defined() || !t.requires_grad()) return {};
  return t.impl()->ensure_grad();
}

}  // namespace detail

/// Recorded operations reachable from a root, in topological order
/// (inputs before outputs).
template <typename T>
class Graph {
 public:
  static Graph build(const Tensor<T>& root) {
    Graph g;
    g.root_ = root.impl();
    std::unordered_set<const detail::TensorImpl<T>*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<std::shared_ptr<detail::TensorImpl<T>>, std::size_t>> stack;
    stack.emplace_back(root.impl(), 0);
    seen.insert(root.impl().get());
    while (!stack.empty()) {
      auto& [impl, next] = stack.back();
      const auto& node = impl->node;
      if (node && node->consumed) {
        throw AutogradError(std::string("graph through '") + node->op +
                            "' was already consumed by backward(); rebuild it before "
                            "calling backward() again");
      }
      if (node && next < node->inputs.size()) {
        const auto& child = node->inputs[next++];
        if (seen.insert(child.get()).second) stack.emplace_back(child, 0);
        continue;
      }
      g.order_.push_back(impl);
      stack.pop_back();
    }
    return g;
  }

  std::size_t size() const { return order_.size(); }

  std::vector<std::string> op_names() const {
    std::vector<std::string> names;
    for (const auto& impl : order_) names.emplace_back(impl->node ? impl->node->op : "leaf");
    return names;
  }

  void backward() {
    if (!root_) throw AutogradError("backward() on an empty graph");
    if (root_->data.size() != 1) {
      throw AutogradError("backward() requires a scalar loss, got shape " +
                          shape_str(root_->shape));
    }
    if (root_->node && root_->node->consumed) {
      throw AutogradError("backward() called twice on the same graph");
    }
    root_->ensure_grad()[0] += T(1);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      const auto& impl = *it;
      if (!impl->node) continue;
      auto g = impl->ensure_grad();
      if (impl->node->backward) impl->node->backward(g);
      impl->node->consumed = true;
      impl->node->backward = nullptr;
      impl->node->inputs.clear();
    }
    order_.clear();
  }

 private:
  std::shared_ptr<detail::TensorImpl<T>> root_;
  std::vector<std::shared_ptr<detail::TensorImpl<T>>> order_;
};

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.requires_grad()) throw AutogradError("loss does not require grad");
  Graph<T>::build(loss).backward();
}

}  // namespace flowup
