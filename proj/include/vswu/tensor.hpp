#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace vswu {

using Shape = std::vector<std::size_t>;

/// 64-byte aligned allocation for tensor buffers. Vectorized kernels choose
/// their loop peeling from the buffer address, so a fixed alignment keeps
/// results bit-identical from run to run.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlignment = 64;

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kAlignment}));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{kAlignment}); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <class T>
using Storage = std::vector<T, AlignedAllocator<T>>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// FLOP accounting. Matrix-like kernels (matmul, bmm, conv2d) report
// 2 * multiply-accumulates here; elementwise work is not counted.

namespace detail {
inline std::uint64_t& flop_counter() {
  thread_local std::uint64_t count = 0;
  return count;
}
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

/// Hash of the branch taken by every piecewise op (relu, clamps) while
/// enabled; two forward passes with equal hashes ran on the same smooth piece.
struct BranchTrace {
  bool enabled = false;
  std::uint64_t hash = 0xcbf29ce484222325ULL;
};
inline BranchTrace& branch_trace() {
  thread_local BranchTrace t;
  return t;
}
inline void record_branch(bool taken) {
  auto& t = branch_trace();
  t.hash = (t.hash ^ (taken ? 0x9e37ULL : 0x51edULL)) * 0x100000001b3ULL;
}
}  // namespace detail

inline void add_flops(std::uint64_t n) { detail::flop_counter() += n; }
inline std::uint64_t flop_count() { return detail::flop_counter(); }
inline void reset_flops() { detail::flop_counter() = 0; }

/// Disables graph recording for its lifetime (inference, validation).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

namespace detail {

template <class T>
struct Node {
  Shape shape;
  Storage<T> data;
  Storage<T> grad;
  bool requires_grad = false;
  bool retain_grad = false;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the grads of `inputs`.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }

  T* grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

}  // namespace detail

template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodeType = detail::Node<T>;
  using NodePtr = std::shared_ptr<NodeType>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<NodeType>()) {
    validate_shape(shape);
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, Storage<T> data) : node_(std::make_shared<NodeType>()) {
    validate_shape(shape);
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
  }

  template <class A>
  Tensor(Shape shape, const std::vector<T, A>& data) : Tensor(std::move(shape), Storage<T>(data.begin(), data.end())) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  /// Direct write access. Intended for leaves (parameters, inputs).
  std::span<T> mutable_data() { return node_->data; }
  const Storage<T>& values() const { return node_->data; }
  std::vector<T> to_vector() const { return {node_->data.begin(), node_->data.end()}; }

  T operator[](std::size_t i) const { return node_->data[i]; }

  T item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (!on) node_->grad.clear();
    return *this;
  }

  bool has_grad() const { return node_->grad.size() == node_->data.size() && !node_->data.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return std::span<T>(node_->grad_buffer(), numel()); }
  void zero_grad() {
    if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }
  void clear_grad() { node_->grad.clear(); }
  /// Keep this (non-leaf) tensor's gradient after backward().
  void retain_grad() { node_->retain_grad = true; }

  bool is_leaf() const { return node_->is_leaf(); }

  /// Value copy without graph history.
  Tensor detach() const { return Tensor(shape(), node_->data); }

  template <class U>
  Tensor<U> cast() const {
    Storage<U> out(numel());
    std::transform(node_->data.begin(), node_->data.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape(), std::move(out));
  }

  void backward() const;

  const NodePtr& node() const { return node_; }

 private:
  static void validate_shape(const Shape& s) {
    if (s.empty()) throw DimensionError("tensor shape must have at least one extent");
    for (auto e : s) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(s));
    }
  }

  NodePtr node_;
};

/// Nodes reachable from `root` that carry a backward function, ordered so
/// that every node appears after all nodes producing its inputs.
template <class T>
std::vector<detail::Node<T>*> topological_order(const Tensor<T>& root) {
  using N = detail::Node<T>;
  std::vector<N*> order;
  std::unordered_set<N*> visited;
  std::vector<std::pair<N*, std::size_t>> stack;
  N* r = root.node().get();
  if (r->is_leaf()) return order;
  stack.emplace_back(r, 0);
  visited.insert(r);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      N* in = node->inputs[next++].get();
      if (!in->is_leaf() && in->requires_grad && visited.insert(in).second) stack.emplace_back(in, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

template <class T>
void Tensor<T>::backward() const {
  if (!defined()) throw GraphError("backward on undefined tensor");
  if (numel() != 1) throw GraphError("backward requires a scalar loss, got shape " + shape_str(shape()));
  if (node_->consumed) throw GraphError("backward called twice on the same graph; run a new forward pass");
  if (!node_->requires_grad || node_->is_leaf()) {
    throw GraphError("backward requires a loss produced by a recorded graph");
  }
  auto order = topological_order(*this);
  node_->grad_buffer()[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* n = *it;
    if (n->grad.size() == n->data.size()) n->backward_fn(*n);
  }
  for (auto* n : order) {
    n->backward_fn = nullptr;
    n->inputs.clear();
    n->consumed = true;
    n->requires_grad = false;
    if (!n->retain_grad) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

namespace detail {

template <class T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> ins) {
  for (auto* t : ins) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

/// Builds an op result. Graph edges are recorded only when grad mode is on
/// and at least one input requires a gradient.
template <class T, class Fn>
Tensor<T> make_result(Shape shape, Storage<T> data, std::vector<Tensor<T>> inputs, Fn&& backward) {
  Tensor<T> out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool needs = false;
  for (auto& in : inputs) needs = needs || (in.defined() && in.requires_grad());
  if (!needs) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.inputs.reserve(inputs.size());
  for (auto& in : inputs) node.inputs.push_back(in.node());
  node.backward_fn = std::forward<Fn>(backward);
  return out;
}

/// Gradient buffer of input `i` of `n`, or nullptr when it needs none.
template <class T>
T* input_grad(Node<T>& n, std::size_t i) {
  if (i >= n.inputs.size() || !n.inputs[i]) return nullptr;
  auto& in = *n.inputs[i];
  return in.requires_grad ? in.grad_buffer() : nullptr;
}

template <class T>
const Storage<T>& input_data(const Node<T>& n, std::size_t i) {
  return n.inputs[i]->data;
}

}  // namespace detail

}  // namespace vswu
