#include "residen/tensor.hpp"

#include <cmath>
#include <sstream>

namespace residen {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
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

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " elements but buffer has " +
                         std::to_string(data.size()));
  }
  node_ = std::make_shared<TensorNode<T>>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value, bool requires_grad) {
  return Tensor(shape, std::vector<T>(shape_numel(shape), value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  return grad_buffer(*node_);
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(node_->shape, node_->data, false);
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(const Shape& shape) const {
  return Tensor(shape, node_->data, false);
}

template <typename T>
bool Tape<T>::should_record(std::initializer_list<const Tensor<T>*> inputs) {
  if (active_ == nullptr) return false;
  for (const auto* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
bool Tape<T>::should_record(const std::vector<Tensor<T>>& inputs) {
  if (active_ == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor<T>& t) { return t.defined() && t.requires_grad(); });
}

template <typename T>
void Tape<T>::record(std::string op, std::vector<NodePtr> inputs, NodePtr output,
                     std::function<void()> backward) {
  output->requires_grad = true;
  entries_.push_back(Entry{std::move(op), std::move(inputs), std::move(output), std::move(backward)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward requires a scalar loss, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  const bool on_tape = std::any_of(entries_.begin(), entries_.end(),
                                   [&](const Entry& e) { return e.output == loss.node(); });
  if (!on_tape) throw UsageError("backward: loss was not produced on this tape");

  grad_buffer(*loss.node())[0] += T(1);
  last_visited_ = 0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // unreachable from the loss
    it->backward();
    ++last_visited_;
  }
}

template <typename T>
void ParamSet<T>::add(const std::string& name, Tensor<T> tensor, bool trainable) {
  if (contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  tensor.set_requires_grad(trainable);
  index_.emplace(name, entries_.size());
  entries_.push_back(Entry{name, std::move(tensor), trainable, false});
}

template <typename T>
void ParamSet<T>::add_buffer(const std::string& name, Tensor<T> tensor) {
  if (contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  tensor.set_requires_grad(false);
  index_.emplace(name, entries_.size());
  entries_.push_back(Entry{name, std::move(tensor), false, true});
}

template <typename T>
Tensor<T>& ParamSet<T>::at(const std::string& name) {
  return entry(name).tensor;
}

template <typename T>
const Tensor<T>& ParamSet<T>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return entries_[it->second].tensor;
}

template <typename T>
typename ParamSet<T>::Entry& ParamSet<T>::entry(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return entries_[it->second];
}

template <typename T>
void ParamSet<T>::set_trainable(const std::string& prefix, bool trainable) {
  for (auto& e : entries_) {
    if (e.buffer || e.name.rfind(prefix, 0) != 0) continue;
    e.trainable = trainable;
    e.tensor.set_requires_grad(trainable);
  }
}

template <typename T>
void ParamSet<T>::zero_grad() {
  for (auto& e : entries_) e.tensor.clear_grad();
}

template <typename T>
std::size_t ParamSet<T>::count_elements(bool trainable_only) const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (e.buffer) continue;
    if (trainable_only && !e.trainable) continue;
    n += e.tensor.numel();
  }
  return n;
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template class ParamSet<float>;
template class ParamSet<double>;

}  // namespace residen
