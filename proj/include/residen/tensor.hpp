#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <utility>
#include <vector>

#include "residen/error.hpp"

namespace residen {

enum class DType : std::uint8_t { Float32 = 0, Float64 = 1 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::Float32 : DType::Float64;
}

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty when absent
  bool requires_grad = false;
};

/// Handle to a dense row-major tensor. Copies share storage; use clone() for
/// a deep copy. A default-constructed Tensor is undefined (no storage).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }
  static constexpr DType dtype() { return dtype_of<T>(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  /// Grad buffer, allocated as zeros on first access.
  std::span<T> mutable_grad();
  void clear_grad() { node_->grad.clear(); }

  /// Deep copy of values; the copy does not require grad.
  Tensor clone() const;
  /// Same values under a new shape with equal element count (deep copy).
  Tensor reshaped(const Shape& shape) const;

  bool is_same(const Tensor& other) const noexcept { return node_ == other.node_; }
  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}
  std::shared_ptr<TensorNode<T>> node_;

  template <typename U>
  friend class Tape;
};

/// Records differentiable operations in execution order. Ops record onto the
/// tape installed for the current thread via Tape::Scope; with no active tape
/// nothing is recorded and outputs never require grad.
template <typename T>
class Tape {
 public:
  using NodePtr = std::shared_ptr<TensorNode<T>>;

  struct Entry {
    std::string op;
    std::vector<NodePtr> inputs;
    NodePtr output;
    std::function<void()> backward;
  };

  class Scope {
   public:
    explicit Scope(Tape& tape) : previous_(active_) { active_ = &tape; }
    ~Scope() { active_ = previous_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  /// True when an op over `inputs` must be recorded.
  static bool should_record(std::initializer_list<const Tensor<T>*> inputs);
  static bool should_record(const std::vector<Tensor<T>>& inputs);

  void record(std::string op, std::vector<NodePtr> inputs, NodePtr output,
              std::function<void()> backward);

  /// Seeds d(loss)/d(loss) = 1 and runs every reachable backward rule once,
  /// in reverse recording order. Grads accumulate into existing buffers.
  void backward(const Tensor<T>& loss);

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  /// Number of backward rules executed by the most recent backward().
  std::size_t last_visited() const { return last_visited_; }

 private:
  std::vector<Entry> entries_;
  std::size_t last_visited_ = 0;
  static inline thread_local Tape* active_ = nullptr;
};

/// Grad buffer of a node, allocated as zeros on first use.
template <typename T>
std::vector<T>& grad_buffer(TensorNode<T>& node) {
  if (node.grad.empty()) node.grad.assign(node.data.size(), T(0));
  return node.grad;
}

/// Ordered name -> tensor map. Iteration follows insertion order.
template <typename T>
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    bool trainable = true;
    bool buffer = false;  // running statistics; saved but never optimized
  };

  void add(const std::string& name, Tensor<T> tensor, bool trainable = true);
  void add_buffer(const std::string& name, Tensor<T> tensor);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor<T>& at(const std::string& name);
  const Tensor<T>& at(const std::string& name) const;
  Entry& entry(const std::string& name);

  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  /// Sets the trainable flag (and requires_grad) on every non-buffer entry
  /// whose name starts with `prefix`.
  void set_trainable(const std::string& prefix, bool trainable);
  void zero_grad();
  std::size_t count_elements(bool trainable_only = false) const;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace residen
