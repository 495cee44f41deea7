#include "iap/diffcore/tensor.hpp"

#include <cmath>
#include <cstring>
#include <unordered_set>

namespace iap::diff {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) {
    throw DimensionError("index rank " + std::to_string(index.size()) + " for shape " +
                         shape_str(shape()));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape()[axis]) throw IndexError("index out of range for shape " + shape_str(shape()));
    flat = flat * shape()[axis] + i;
    ++axis;
  }
  return node_->value[flat];
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw DimensionError("backward() needs a single-element tensor, got " + shape_str(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS for a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

template <typename T>
void ParameterSet<T>::add(const std::string& name, Tensor<T> tensor) {
  if (contains(name)) throw ArgumentError("duplicate parameter name: " + name);
  entries_.emplace_back(name, std::move(tensor));
}

template <typename T>
bool ParameterSet<T>::contains(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return true;
  }
  return false;
}

template <typename T>
Tensor<T>& ParameterSet<T>::at(const std::string& name) {
  for (auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw IndexError("no parameter named " + name);
}

template <typename T>
const Tensor<T>& ParameterSet<T>::at(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw IndexError("no parameter named " + name);
}

template <typename T>
void ParameterSet<T>::set_trainable(bool on) {
  for (auto& [n, t] : entries_) t.set_trainable(on);
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& [n, t] : entries_) t.zero_grad();
}

template <typename T>
std::size_t ParameterSet<T>::scalar_count() const {
  std::size_t c = 0;
  for (const auto& [n, t] : entries_) c += t.numel();
  return c;
}

template <typename T>
void ParameterSet<T>::extend(const ParameterSet& other) {
  for (const auto& [n, t] : other) add(n, t);
}

template <typename T>
void sgd_step(ParameterSet<T>& params, T lr) {
  for (auto& [name, t] : params) {
    if (!t.trainable()) continue;
    if (!t.has_grad()) throw StateError("sgd_step: trainable tensor '" + name + "' has no gradient");
  }
  for (auto& [name, t] : params) {
    if (!t.trainable()) continue;
    auto v = t.mutable_values();
    auto g = t.grad();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
    t.zero_grad();
  }
}

template <typename T>
void Adam<T>::step(ParameterSet<T>& params) {
  if (m_.empty()) {
    for (const auto& [n, t] : params) {
      m_.emplace_back(t.numel(), T(0));
      v_.emplace_back(t.numel(), T(0));
    }
  }
  if (m_.size() != params.size()) throw StateError("Adam: parameter set changed between steps");
  ++step_;
  const T c1 = T(1) - static_cast<T>(std::pow(beta1_, step_));
  const T c2 = T(1) - static_cast<T>(std::pow(beta2_, step_));
  std::size_t k = 0;
  for (auto& [name, t] : params) {
    auto& m = m_[k];
    auto& v = v_[k];
    ++k;
    if (!t.trainable() || !t.has_grad()) continue;
    auto w = t.mutable_values();
    auto g = t.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1_ * m[i] + (T(1) - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (T(1) - beta2_) * g[i] * g[i];
      w[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
    t.zero_grad();
  }
}

template <typename T>
std::uint64_t checksum(const ParameterSet<T>& params) {
  std::uint64_t h = 14695981039346656037ULL;
  auto mix = [&h](const void* data, std::size_t bytes) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, t] : params) {
    mix(name.data(), name.size());
    mix(t.values().data(), t.values().size_bytes());
  }
  return h;
}

template class Tensor<float>;
template class Tensor<double>;
template class ParameterSet<float>;
template class ParameterSet<double>;
template class Adam<float>;
template class Adam<double>;
template void sgd_step(ParameterSet<float>&, float);
template void sgd_step(ParameterSet<double>&, double);
template std::uint64_t checksum(const ParameterSet<float>&);
template std::uint64_t checksum(const ParameterSet<double>&);

}  // namespace iap::diff
