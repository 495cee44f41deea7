#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "iap/errors.hpp"

namespace iap::diff {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until the first accumulation
  bool requires_grad = false;
  bool trainable = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Node&)> backward;

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

/// Handle to a node of a dynamically built computation graph. Copies share
/// the node; values are stored row-major. Graphs are released when the last
/// handle to the output goes away, leaves (parameters) persist.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<T> values) {
    check_count(shape, values.size());
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape) {
    const auto count = shape_numel(shape);
    return constant(std::move(shape), std::vector<T>(count, T(0)));
  }

  static Tensor scalar(T v) { return constant({1}, {v}); }

  static Tensor parameter(Shape shape, std::vector<T> values) {
    Tensor t = constant(std::move(shape), std::move(values));
    t.set_trainable(true);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }

  /// Mutable access is restricted to graph leaves (parameters and constants).
  std::span<T> mutable_values() {
    if (!node_->parents.empty() || node_->backward) {
      throw StateError("mutable_values() on a non-leaf tensor");
    }
    return node_->value;
  }

  T item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  bool trainable() const { return node_->trainable; }
  void set_trainable(bool on) {
    node_->trainable = on;
    node_->requires_grad = on;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Reverse-mode sweep from a single-element tensor.
  void backward() const;

  Tensor detach() const { return constant(shape(), node_->value); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  static void check_count(const Shape& shape, std::size_t count) {
    for (auto e : shape) {
      if (e == 0) throw DimensionError("zero extent in shape " + shape_str(shape));
    }
    if (shape_numel(shape) != count) {
      throw DimensionError("shape " + shape_str(shape) + " needs " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(count));
    }
  }

  std::shared_ptr<Node<T>> node_;
};

/// Ordered name -> tensor mapping. Iteration follows insertion order.
template <typename T>
class ParameterSet {
 public:
  void add(const std::string& name, Tensor<T> tensor);
  bool contains(const std::string& name) const;
  Tensor<T>& at(const std::string& name);
  const Tensor<T>& at(const std::string& name) const;

  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void set_trainable(bool on);
  void zero_grad();
  std::size_t scalar_count() const;

  /// Merges another set; names must not collide.
  void extend(const ParameterSet& other);

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
};

/// Decrements every trainable tensor by lr * grad, then clears gradients.
/// Throws StateError if a trainable tensor has no gradient.
template <typename T>
void sgd_step(ParameterSet<T>& params, T lr);

/// Adam, used only for backbone pre-training.
template <typename T>
class Adam {
 public:
  Adam(T lr, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8))
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(ParameterSet<T>& params);

 private:
  T lr_, beta1_, beta2_, eps_;
  long step_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

/// FNV-1a over the raw bytes of every value, in set order.
template <typename T>
std::uint64_t checksum(const ParameterSet<T>& params);

}  // namespace iap::diff
