#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lgaf {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when operand shapes disagree. The message names the offending
/// dimension.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Mode { train, eval };

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct Node;

template <typename T>
struct Storage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node<T>> producer;

  T* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

template <typename T>
struct Node {
  std::string op;
  std::vector<std::shared_ptr<Storage<T>>> inputs;
  // Reads out.grad and accumulates into the inputs' grad buffers.
  std::function<void(const Storage<T>& out)> backward;
};

}  // namespace detail

/// Whether operations currently record a graph for backward().
bool grad_enabled();

/// Disables graph recording for its lifetime (eval-mode forwards).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major n-dimensional array with an optional gradient slot.
///
/// A Tensor is a cheap handle: copies share storage. Data produced by an
/// operation is treated as immutable; only leaves (parameters, test inputs)
/// are written through mutable_data().
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  /// Negative axes count from the back.
  std::int64_t dim(int axis) const;
  std::int64_t numel() const;

  std::span<const T> data() const;
  std::span<T> mutable_data();
  T item() const;
  T at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  /// Same data, no graph history, no gradient flow.
  Tensor detach() const;
  /// Deep copy of the data without graph history.
  Tensor clone() const;
  bool is_leaf() const;
  /// Name of the producing op, or empty for leaves.
  std::string producer_op() const;

  const std::shared_ptr<detail::Storage<T>>& storage() const { return impl_; }
  static Tensor from_storage(std::shared_ptr<detail::Storage<T>> storage);

 private:
  const detail::Storage<T>& impl() const;
  std::shared_ptr<detail::Storage<T>> impl_;
};

/// Reverse-mode pass from a scalar loss. Leaf gradients accumulate across
/// calls; interior gradients are recomputed each call. Traversal order is a
/// deterministic post-order DFS over producer inputs.
template <typename T>
void backward(const Tensor<T>& loss);

/// Names of the ops recorded in the graph that produced t.
template <typename T>
std::set<std::string> graph_ops(const Tensor<T>& t);

/// Negative-control hook for the gradient-check suite: when set, the
/// backward contribution of every node whose op matches is scaled by 1.5.
void set_gradient_fault(std::string op);
const std::string& gradient_fault();

namespace detail {

/// Wraps freshly computed data in a Tensor and, when grad mode is on and any
/// input requires grad, records the node.
template <typename T>
Tensor<T> make_result(std::string op, Shape shape, std::vector<T> data,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(const Storage<T>&)> backward_fn);

/// Gradient buffer of t if it participates in backward, else nullptr.
template <typename T>
T* grad_target(const Tensor<T>& t);

}  // namespace detail

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace lgaf
