#pragma once

// Dense float64 tensors with a thread-local reverse-mode gradient tape.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "segprompt/errors.hpp"

namespace segprompt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty == no gradient
  bool requires_grad = false;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

using ImplPtr = std::shared_ptr<TensorImpl>;

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : p_(std::make_shared<detail::TensorImpl>()) {
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("shape " + shape_str(shape) + " does not match " +
                           std::to_string(data.size()) + " values");
    }
    p_->shape = std::move(shape);
    p_->data = std::move(data);
    p_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }
  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }
  static Tensor eye(std::size_t n) {
    auto t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.p_->data[i * n + i] = 1.0;
    return t;
  }

  bool defined() const { return static_cast<bool>(p_); }
  const Shape& shape() const { return p_->shape; }
  std::size_t rank() const { return p_->shape.size(); }
  std::size_t dim(std::size_t i) const { return p_->shape.at(i); }
  std::size_t numel() const { return p_->data.size(); }

  std::span<const double> data() const { return p_->data; }
  /// Direct write access, for parameter initialisation and optimizer updates.
  std::span<double> mutable_data() { return p_->data; }
  double operator[](std::size_t i) const { return p_->data[i]; }
  double item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return p_->data[0];
  }

  bool requires_grad() const { return p_->requires_grad; }
  void set_requires_grad(bool v) {
    p_->requires_grad = v;
    if (!v) p_->grad.clear();
  }
  bool has_grad() const { return !p_->grad.empty(); }
  std::span<const double> grad() const { return p_->grad; }
  std::span<double> mutable_grad() { return p_->grad_buffer(); }
  void zero_grad() { std::fill(p_->grad.begin(), p_->grad.end(), 0.0); }
  void clear_grad() { p_->grad.clear(); }

  /// Fresh leaf with copied data and no gradient history.
  Tensor detach() const { return Tensor(shape(), p_->data, false); }
  Tensor clone(bool requires_grad) const { return Tensor(shape(), p_->data, requires_grad); }

  const void* id() const { return p_.get(); }
  const detail::ImplPtr& impl() const { return p_; }

 private:
  detail::ImplPtr p_;
};

/// Append-only record of differentiable operations executed on this thread.
class GradTape {
 public:
  /// Receives the op's output (value and accumulated gradient).
  using BackwardFn = std::function<void(const detail::TensorImpl& out)>;

  struct Node {
    std::vector<detail::ImplPtr> inputs;
    detail::ImplPtr output;
    BackwardFn backward;
  };

  static GradTape& current() {
    thread_local GradTape tape;
    return tape;
  }

  void record(std::vector<detail::ImplPtr> inputs, detail::ImplPtr output, BackwardFn fn) {
    nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(fn)});
  }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }
  void clear() { nodes_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and walks the tape once in reverse order.
  /// Leaf gradients accumulate; call zero_grad between steps.
  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " +
                          (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) {
      throw ContractError("loss is not connected to any tensor that requires grad");
    }
    auto& g = loss.impl()->grad_buffer();
    g[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->output->grad.empty()) continue;
      it->backward(*it->output);
    }
  }

 private:
  std::vector<Node> nodes_;
};

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Disables tape recording for the current thread (inference mode).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

namespace detail {

/// Builds an op result. If any input requires grad (and recording is on)
/// the output requires grad and `backward` is recorded on the tape.
/// `backward` receives the output impl and must only touch inputs
/// whose requires_grad flag is set.
template <class Fn>
Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   Fn&& backward) {
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  Tensor out(std::move(shape), std::move(data), needs);
  if (needs) {
    std::vector<ImplPtr> ins;
    ins.reserve(inputs.size());
    for (const auto& t : inputs) ins.push_back(t.impl());
    GradTape::current().record(std::move(ins), out.impl(), std::forward<Fn>(backward));
  }
  return out;
}

}  // namespace detail

}  // namespace segprompt
