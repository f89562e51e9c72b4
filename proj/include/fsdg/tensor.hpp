#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fsdg/errors.hpp"

namespace fsdg {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace detail {

struct TensorImpl;

struct GradFn {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  // Reads the output's grad and accumulates into the inputs' grads.
  std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::shared_ptr<GradFn> grad_fn;

  std::vector<double>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline std::uint64_t next_seq() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major f64 array of rank 0-4 with reverse-mode autodiff.
///
/// Copies share storage. Values are immutable once an op has consumed the
/// tensor; only leaves (parameters) are updated in place by optimizers.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : impl_(std::make_shared<detail::TensorImpl>()) {
    impl_->data.assign(fsdg::numel(shape), fill);
    impl_->shape = std::move(shape);
    impl_->seq = detail::next_seq();
  }

  Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<detail::TensorImpl>()) {
    if (values.size() != fsdg::numel(shape)) {
      throw DimensionError("tensor: " + std::to_string(values.size()) + " values for shape " +
                           to_string(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
    impl_->seq = detail::next_seq();
  }

  static Tensor scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor(Shape{n}, std::move(values));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> values;
    const std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& row : rows) {
      if (row.size() != cols) throw DimensionError("matrix: ragged rows");
      values.insert(values.end(), row.begin(), row.end());
    }
    return Tensor(Shape{rows.size(), cols}, std::move(values));
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  /// Raw access for leaves; used by optimizers and initializers.
  std::span<double> mutable_data() { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }

  double item() const {
    if (numel() != 1) throw DimensionError("item: tensor has " + std::to_string(numel()) + " elements");
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag = true) {
    if (impl_->grad_fn) throw ContractError("set_requires_grad: only leaves can be marked");
    impl_->requires_grad = flag;
    return *this;
  }
  bool is_leaf() const { return !impl_->grad_fn; }

  bool has_grad() const { return impl_->grad.size() == impl_->data.size() && !impl_->data.empty(); }
  std::span<const double> grad() const {
    if (!has_grad()) impl_->ensure_grad();
    return impl_->grad;
  }
  std::span<double> mutable_grad() { return impl_->ensure_grad(); }
  void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0); }

  /// Accumulates d(this)/d(leaf) into every reachable leaf; this must be rank 0.
  void backward() const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

/// Builds an op result; records a backward edge only when some input needs a
/// gradient and recording is enabled.
inline Tensor make_result(Shape shape, std::vector<double> values, const char* op,
                          std::vector<Tensor> inputs,
                          std::function<void(const TensorImpl&)> backward) {
  Tensor out(std::move(shape), std::move(values));
  if (!grad_mode()) return out;
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
  if (!needs) return out;
  auto fn = std::make_shared<GradFn>();
  fn->op = op;
  fn->inputs.reserve(inputs.size());
  for (const auto& t : inputs) fn->inputs.push_back(t.impl());
  fn->backward = std::move(backward);
  out.impl()->requires_grad = true;
  out.impl()->grad_fn = std::move(fn);
  return out;
}

inline bool wants_grad(const std::shared_ptr<TensorImpl>& t) { return t->requires_grad; }

}  // namespace detail

enum class TapeOrder {
  depth_first,  // post-order DFS from the root
  creation,     // ascending creation sequence
};

/// Ordered record of the operations a scalar depends on.
class Tape {
 public:
  static Tape record(const Tensor& root, TapeOrder order = TapeOrder::depth_first) {
    Tape tape;
    tape.root_ = root.impl();
    std::unordered_set<const detail::TensorImpl*> seen;
    // Iterative post-order so deep graphs do not exhaust the stack.
    std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
    stack.emplace_back(root.impl().get(), 0);
    seen.insert(root.impl().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      const auto* fn = node->grad_fn.get();
      if (fn && next < fn->inputs.size()) {
        auto* child = fn->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        continue;
      }
      tape.nodes_.push_back(node);
      stack.pop_back();
    }
    if (order == TapeOrder::creation) {
      std::sort(tape.nodes_.begin(), tape.nodes_.end(),
                [](const auto* a, const auto* b) { return a->seq < b->seq; });
    }
    return tape;
  }

  /// Number of recorded operations (leaves excluded).
  std::size_t size() const {
    return static_cast<std::size_t>(std::count_if(nodes_.begin(), nodes_.end(),
                                                  [](const auto* n) { return n->grad_fn != nullptr; }));
  }

  std::vector<std::string> ops() const {
    std::vector<std::string> names;
    for (const auto* n : nodes_) {
      if (n->grad_fn) names.push_back(n->grad_fn->op);
    }
    return names;
  }

  /// Seeds the root with 1 and runs every backward in reverse order.
  /// Intermediate grads are reset; leaf grads accumulate.
  void replay() const {
    for (auto* n : nodes_) {
      if (!n->grad_fn) continue;
      auto& g = n->ensure_grad();
      std::fill(g.begin(), g.end(), 0.0);
    }
    auto& seed = root_->ensure_grad();
    for (auto& g : seed) g += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      detail::TensorImpl* n = *it;
      if (!n->grad_fn) continue;
      for (const auto& in : n->grad_fn->inputs) {
        if (in->requires_grad) in->ensure_grad();
      }
      n->grad_fn->backward(*n);
    }
  }

 private:
  std::shared_ptr<detail::TensorImpl> root_;
  std::vector<detail::TensorImpl*> nodes_;
};

inline void Tensor::backward() const {
  if (rank() != 0) {
    throw DimensionError("backward: loss must be rank 0, got shape " + to_string(shape()));
  }
  if (!requires_grad()) throw ContractError("backward: loss does not depend on any trainable tensor");
  Tape::record(*this).replay();
}

inline void backward(const Tensor& loss) { loss.backward(); }

inline bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](double v) { return std::isfinite(v); });
}

}  // namespace fsdg
