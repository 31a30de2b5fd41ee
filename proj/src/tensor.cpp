#include "lgaf/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace lgaf {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;
std::string g_gradient_fault;

void check_shape(const Shape& shape) {
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] <= 0) {
      throw ShapeError("tensor dimension " + std::to_string(i) + " must be positive, got " +
                       std::to_string(shape[i]));
    }
  }
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void set_gradient_fault(std::string op) { g_gradient_fault = std::move(op); }
const std::string& gradient_fault() { return g_gradient_fault; }

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
  check_shape(shape);
  if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  impl_ = std::make_shared<detail::Storage<T>>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  check_shape(shape);
  auto n = static_cast<std::size_t>(shape_numel(shape));
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
const detail::Storage<T>& Tensor<T>::impl() const {
  if (!impl_) throw std::logic_error("use of an undefined tensor");
  return *impl_;
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  return impl().shape;
}

template <typename T>
int Tensor<T>::rank() const {
  return static_cast<int>(impl().shape.size());
}

template <typename T>
std::int64_t Tensor<T>::dim(int axis) const {
  const auto& s = impl().shape;
  int r = static_cast<int>(s.size());
  int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[static_cast<std::size_t>(a)];
}

template <typename T>
std::int64_t Tensor<T>::numel() const {
  return static_cast<std::int64_t>(impl().data.size());
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  return impl().data;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  impl();
  return impl_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw ShapeError("item() requires a single-element tensor, got shape " + shape_str(shape()));
  }
  return impl().data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::int64_t> index) const {
  const auto& s = impl().shape;
  if (index.size() != s.size()) {
    throw ShapeError("index rank " + std::to_string(index.size()) + " does not match shape " +
                     shape_str(s));
  }
  std::int64_t flat = 0;
  std::size_t i = 0;
  for (auto v : index) {
    if (v < 0 || v >= s[i]) {
      throw ShapeError("index " + std::to_string(v) + " out of range in dimension " +
                       std::to_string(i));
    }
    flat = flat * s[i] + v;
    ++i;
  }
  return impl().data[static_cast<std::size_t>(flat)];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return impl().requires_grad;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool value) {
  impl();
  impl_->requires_grad = value;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return !impl().grad.empty();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  return impl().grad;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  impl();
  impl_->grad_buffer();
  return impl_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  impl();
  std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  // Copies: a later in-place parameter update must not alter the constant.
  return clone();
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(impl().shape, impl().data, false);
}

template <typename T>
bool Tensor<T>::is_leaf() const {
  return impl().producer == nullptr;
}

template <typename T>
std::string Tensor<T>::producer_op() const {
  const auto& p = impl().producer;
  return p ? p->op : std::string();
}

template <typename T>
Tensor<T> Tensor<T>::from_storage(std::shared_ptr<detail::Storage<T>> storage) {
  Tensor t;
  t.impl_ = std::move(storage);
  return t;
}

namespace detail {

template <typename T>
Tensor<T> make_result(std::string op, Shape shape, std::vector<T> data,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(const Storage<T>&)> backward_fn) {
  Tensor<T> out(std::move(shape), std::move(data), false);
  if (!g_grad_enabled) return out;
  bool any = std::any_of(inputs.begin(), inputs.end(),
                         [](const Tensor<T>& t) { return t.defined() && t.requires_grad(); });
  if (!any) return out;
  auto node = std::make_shared<Node<T>>();
  node->op = std::move(op);
  for (const auto& t : inputs) {
    if (t.defined()) node->inputs.push_back(t.storage());
  }
  node->backward = std::move(backward_fn);
  auto storage = out.storage();
  storage->requires_grad = true;
  storage->producer = std::move(node);
  return out;
}

template <typename T>
T* grad_target(const Tensor<T>& t) {
  if (!t.defined() || !t.requires_grad()) return nullptr;
  return t.storage()->grad_buffer();
}

}  // namespace detail

template <typename T>
std::set<std::string> graph_ops(const Tensor<T>& t) {
  std::set<std::string> ops;
  if (!t.defined()) return ops;
  using S = detail::Storage<T>;
  std::unordered_set<const S*> visited{t.storage().get()};
  std::vector<const S*> stack{t.storage().get()};
  while (!stack.empty()) {
    const S* s = stack.back();
    stack.pop_back();
    if (!s->producer) continue;
    ops.insert(s->producer->op);
    for (const auto& in : s->producer->inputs) {
      if (visited.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  return ops;
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    throw std::invalid_argument("backward: loss does not depend on any tensor requiring grad");
  }

  using S = detail::Storage<T>;
  std::vector<S*> order;
  std::unordered_set<S*> visited;
  std::vector<std::pair<S*, std::size_t>> stack;
  S* root = loss.storage().get();
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto* producer = node->producer.get();
    if (producer && next < producer->inputs.size()) {
      S* child = producer->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  for (S* s : order) {
    if (s->producer) s->grad.assign(s->data.size(), T(0));
  }
  root->grad_buffer()[0] += T(1);

  const std::string& fault = g_gradient_fault;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    S* s = *it;
    if (!s->producer) continue;
    auto& node = *s->producer;
    if (!fault.empty() && node.op == fault) {
      std::vector<std::vector<T>> before;
      for (auto& in : node.inputs) before.push_back(in->grad);
      node.backward(*s);
      for (std::size_t i = 0; i < node.inputs.size(); ++i) {
        auto& g = node.inputs[i]->grad;
        for (std::size_t j = 0; j < g.size(); ++j) {
          T prev = before[i].empty() ? T(0) : before[i][j];
          g[j] += T(0.5) * (g[j] - prev);
        }
      }
    } else {
      node.backward(*s);
    }
  }
}

template class Tensor<float>;
template class Tensor<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);
template std::set<std::string> graph_ops<float>(const Tensor<float>&);
template std::set<std::string> graph_ops<double>(const Tensor<double>&);
template Tensor<float> detail::make_result<float>(std::string, Shape, std::vector<float>,
                                                  std::vector<Tensor<float>>,
                                                  std::function<void(const detail::Storage<float>&)>);
template Tensor<double> detail::make_result<double>(
    std::string, Shape, std::vector<double>, std::vector<Tensor<double>>,
    std::function<void(const detail::Storage<double>&)>);
template float* detail::grad_target<float>(const Tensor<float>&);
template double* detail::grad_target<double>(const Tensor<double>&);

}  // namespace lgaf
