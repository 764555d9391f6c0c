#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace attmask {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Scoped switch that stops operations from recording a backward graph.
/// Thread-local: a no-grad teacher forward on one thread does not affect
/// another thread's student forward.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into inputs.
  std::function<void(Node&)> backward_fn;

  void accumulate_grad(std::span<const T> g);
  std::span<T> grad_buffer();
};

/// Dense row-major array with optional reverse-mode gradient tracking.
/// Copies share storage (handle semantics), like the tensors of most
/// autograd frameworks; use clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  [[nodiscard]] bool defined() const { return node_ != nullptr; }
  [[nodiscard]] const Shape& shape() const { return node_->shape; }
  [[nodiscard]] std::size_t dim() const { return node_->shape.size(); }
  [[nodiscard]] std::size_t numel() const { return node_->value.size(); }
  /// Rows/cols treat a 1-D tensor as a single row.
  [[nodiscard]] std::size_t rows() const;
  [[nodiscard]] std::size_t cols() const;

  [[nodiscard]] std::span<const T> data() const { return node_->value; }
  [[nodiscard]] std::span<T> mutable_data() { return node_->value; }
  [[nodiscard]] T operator[](std::size_t i) const { return node_->value[i]; }
  [[nodiscard]] T at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  [[nodiscard]] T item() const;

  [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);
  [[nodiscard]] bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient view; empty span when nothing has flowed into this tensor.
  [[nodiscard]] std::span<const T> grad() const { return node_->grad; }
  void zero_grad();

  /// Runs reverse-mode accumulation from this scalar. Throws ContractError
  /// when the tensor is not a scalar.
  void backward() const;

  [[nodiscard]] Tensor detach() const;
  [[nodiscard]] Tensor clone() const;
  [[nodiscard]] Tensor reshape(Shape shape) const;

  [[nodiscard]] Node<T>* node() const { return node_.get(); }
  [[nodiscard]] const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds an op result. The graph edge and backward closure are only recorded
/// when grad mode is on and some input requires a gradient.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward_fn);

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs,
                      std::function<void(Node<T>&)> backward_fn);

/// Zeroes each parameter's gradient, back-propagates from `loss`, and returns
/// one gradient vector per parameter (zeros for parameters the graph does not
/// reach).
template <typename T>
std::vector<std::vector<T>> reverse_mode_gradient(const Tensor<T>& loss,
                                                  std::span<Tensor<T>> parameters);

}  // namespace attmask
