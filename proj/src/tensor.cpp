#include "attmask/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "attmask/error.hpp"

namespace attmask {

namespace {
thread_local bool t_grad_enabled = true;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (const auto s : shape) {
    n *= s;
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "x" : "") << shape[i];
  }
  os << ']';
  return os.str();
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

template <typename T>
void Node<T>::accumulate_grad(std::span<const T> g) {
  if (grad.empty()) {
    grad.assign(g.begin(), g.end());
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) {
    grad[i] += g[i];
  }
}

template <typename T>
std::span<T> Node<T>::grad_buffer() {
  if (grad.empty()) {
    grad.assign(value.size(), T(0));
  }
  return grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_string(shape));
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::rows() const {
  const auto& s = node_->shape;
  if (s.size() <= 1) {
    return 1;
  }
  std::size_t r = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) {
    r *= s[i];
  }
  return r;
}

template <typename T>
std::size_t Tensor<T>::cols() const {
  const auto& s = node_->shape;
  return s.empty() ? 1 : s.back();
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw ContractError("item() on tensor of shape " + shape_string(shape()));
  }
  return node_->value[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
  node_->requires_grad = on;
}

template <typename T>
void Tensor<T>::zero_grad() {
  node_->grad.clear();
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + shape_string(shape()));
  }
  if (!node_->requires_grad) {
    return;
  }
  // Iterative post-order DFS gives a topological order without recursion
  // depth limits on deep graphs.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }
  const T one(1);
  node_->accumulate_grad(std::span<const T>(&one, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) {
      n->backward_fn(*n);
    }
  }
  // Interior gradients are consumed; only leaves keep theirs.
  for (Node<T>* n : order) {
    if (n->backward_fn) {
      std::vector<T>().swap(n->grad);
    }
  }
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from(shape(), node_->value, false);
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  auto t = from(shape(), node_->value, node_->requires_grad);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape new_shape) const {
  if (shape_numel(new_shape) != numel()) {
    throw DimensionError("cannot reshape " + shape_string(shape()) + " to " +
                         shape_string(new_shape));
  }
  auto src = node_;
  return make_result<T>(std::move(new_shape), node_->value, {this},
                        [src](Node<T>& out) { src->accumulate_grad(out.grad); });
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (grad_enabled()) {
    for (const auto* in : inputs) {
      if (in->defined() && in->requires_grad()) {
        node->requires_grad = true;
        break;
      }
    }
  }
  if (node->requires_grad) {
    for (const auto* in : inputs) {
      if (in->defined()) {
        node->inputs.push_back(in->node_ptr());
      }
    }
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (grad_enabled()) {
    node->requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                      [](const Tensor<T>& t) { return t.requires_grad(); });
  }
  if (node->requires_grad) {
    for (const auto& in : inputs) {
      node->inputs.push_back(in.node_ptr());
    }
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
std::vector<std::vector<T>> reverse_mode_gradient(const Tensor<T>& loss,
                                                  std::span<Tensor<T>> parameters) {
  for (auto& p : parameters) {
    p.zero_grad();
  }
  loss.backward();
  std::vector<std::vector<T>> grads;
  grads.reserve(parameters.size());
  for (auto& p : parameters) {
    if (p.has_grad()) {
      grads.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      grads.emplace_back(p.numel(), T(0));
    }
  }
  return grads;
}

#define ATTMASK_INSTANTIATE(T)                                                                  \
  template struct Node<T>;                                                                      \
  template class Tensor<T>;                                                                     \
  template Tensor<T> make_result<T>(Shape, std::vector<T>,                                      \
                                    std::initializer_list<const Tensor<T>*>,                    \
                                    std::function<void(Node<T>&)>);                             \
  template Tensor<T> make_result<T>(Shape, std::vector<T>, const std::vector<Tensor<T>>&,       \
                                    std::function<void(Node<T>&)>);                             \
  template std::vector<std::vector<T>> reverse_mode_gradient<T>(const Tensor<T>&,               \
                                                                std::span<Tensor<T>>);

ATTMASK_INSTANTIATE(float)
ATTMASK_INSTANTIATE(double)
#undef ATTMASK_INSTANTIATE

}  // namespace attmask
