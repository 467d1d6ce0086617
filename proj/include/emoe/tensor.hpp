#pragma once
// Dense 64-bit tensors and the tape that records operations on them for
// reverse-mode differentiation.
//
// A Tensor is an immutable value: its buffer is shared between copies and is
// never written after construction. A Tape owns one node per tensor produced
// during a forward pass; backward() replays the recorded entries in reverse
// and returns fresh gradient buffers, leaving the tape untouched.

#include <cmath>
#include <cstddef>
#include <functional>
#include <concepts>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "emoe/error.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace emoe {

/// Keeps large activation buffers on the heap instead of per-allocation
/// mmap/munmap. Call once at program start.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// True when every value is finite. x*0 is NaN exactly for NaN/Inf inputs, so
/// the accumulation vectorizes without a per-element branch.
inline bool all_finite(std::span<const double> v) {
  double acc = 0.0;
  for (double x : v) acc += x * 0.0;
  return acc == 0.0;
}

/// Cache-line aligned storage. Vectorized reductions peel by address, so a
/// fixed alignment keeps results bit-identical from run to run.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  // Sized construction leaves values uninitialized; every op writes its full output.
  template <class U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

class Tensor {
 public:
  Tensor() : data_(std::make_shared<const Buffer>(1, 0.0)) {}

  Tensor(Shape shape, const std::vector<double>& data) : Tensor(std::move(shape), Buffer(data.begin(), data.end())) {}

  template <class A>
    requires std::same_as<A, AlignedAllocator<double>>
  Tensor(Shape shape, std::vector<double, A>&& data) : shape_(std::move(shape)) {
    if (numel(shape_) != data.size()) {
      throw ShapeError("tensor shape " + to_string(shape_) + " needs " +
                       std::to_string(numel(shape_)) + " values, got " +
                       std::to_string(data.size()));
    }
    data_ = std::make_shared<const Buffer>(std::move(data));
  }

  static Tensor zeros(Shape shape) { return filled(std::move(shape), 0.0); }
  static Tensor filled(Shape shape, double v) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), Buffer(n, v));
  }
  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor vector(std::vector<double> v) {
    const auto n = v.size();
    return Tensor({n}, std::move(v));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_->size(); }
  const double* data() const noexcept { return data_->data(); }
  std::span<const double> values() const noexcept { return {data_->data(), data_->size()}; }
  double operator[](std::size_t i) const { return (*data_)[i]; }

  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
    return (*data_)[0];
  }

  /// Same buffer viewed under another shape with identical element count.
  Tensor reshaped(Shape shape) const {
    if (numel(shape) != size()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  std::vector<double> to_vector() const { return {data_->begin(), data_->end()}; }
  bool finite() const { return all_finite(values()); }

 private:
  Shape shape_;
  std::shared_ptr<const Buffer> data_;
};

using NodeId = std::size_t;
class Tape;

/// Handle to a node on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  Tape* tape() const noexcept { return tape_; }
  NodeId id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }
  // By value: node storage may move when later ops are recorded.
  inline Tensor value() const;
  Shape shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  inline bool needs_grad() const;

 private:
  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

/// Backward rule of one recorded operation: receives the gradient of the
/// output and accumulates (+=) into the gradient buffers of its inputs. An
/// empty span marks an input that does not need a gradient.
using BackwardFn =
    std::function<void(std::span<const double> grad_out, std::span<const std::span<double>> grad_in)>;

/// Gradients of one backward() call, keyed by leaf node.
class Gradients {
 public:
  const Tensor& operator[](const Var& v) const { return at(v.id()); }
  const Tensor& at(NodeId id) const {
    auto it = grads_.find(id);
    if (it == grads_.end()) throw Error("no gradient recorded for node " + std::to_string(id));
    return it->second;
  }
  bool contains(const Var& v) const { return grads_.count(v.id()) != 0; }
  std::size_t size() const { return grads_.size(); }
  void set(NodeId id, Tensor g) { grads_.insert_or_assign(id, std::move(g)); }

 private:
  std::unordered_map<NodeId, Tensor> grads_;
};

/// The computation record of one forward pass.
class Tape {
 public:
  struct Entry {
    std::string_view op;
    std::vector<NodeId> inputs;
    NodeId output;
    BackwardFn backward;  // empty when no input needs a gradient
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    return push(std::move(value), requires_grad, true);
  }
  Var constant(Tensor value) { return push(std::move(value), false, true); }

  /// Adds the result of an operation. `make_backward` is only invoked when
  /// some input needs a gradient, so saved values are not retained otherwise.
  template <class MakeBackward>
  Var record(std::string_view op, std::vector<Var> inputs, Tensor out, MakeBackward&& make_backward) {
    if (!out.finite()) {
      throw DomainError(std::string(op) + ": non-finite output");
    }
    bool any = false;
    std::vector<NodeId> ids;
    ids.reserve(inputs.size());
    for (const auto& v : inputs) {
      if (v.tape() != this) throw Error(std::string(op) + ": input belongs to another tape");
      ids.push_back(v.id());
      any = any || nodes_[v.id()].needs_grad;
    }
    Var result = push(std::move(out), any, false);
    entries_.push_back(Entry{op, std::move(ids), result.id(),
                             any ? BackwardFn(make_backward()) : BackwardFn{}});
    return result;
  }

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  bool needs_grad(NodeId id) const { return nodes_.at(id).needs_grad; }
  bool is_leaf(NodeId id) const { return nodes_.at(id).leaf; }
  std::size_t node_count() const noexcept { return nodes_.size(); }
  const std::vector<Entry>& entries() const noexcept { return entries_; }

  /// Gradients of a scalar root with respect to every requires_grad leaf.
  /// Leaves the root does not depend on receive zero gradients.
  Gradients backward(const Var& root) const {
    if (root.tape() != this) throw Error("backward: root belongs to another tape");
    if (value(root.id()).size() != 1) {
      throw ShapeError("backward: root must be scalar, got " + to_string(value(root.id()).shape()));
    }
    std::vector<Buffer> grads(nodes_.size());
    if (nodes_[root.id()].needs_grad) {
      grads[root.id()].assign(1, 1.0);
      std::vector<std::span<double>> spans;
      for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        if (it->output > root.id() || !it->backward || grads[it->output].empty()) continue;
        spans.assign(it->inputs.size(), {});
        for (std::size_t i = 0; i < it->inputs.size(); ++i) {
          const NodeId in = it->inputs[i];
          if (!nodes_[in].needs_grad) continue;
          if (grads[in].empty()) grads[in].assign(nodes_[in].value.size(), 0.0);
          spans[i] = grads[in];
        }
        it->backward(grads[it->output], spans);
        Buffer().swap(grads[it->output]);
      }
    }
    Gradients out;
    for (NodeId id = 0; id < nodes_.size(); ++id) {
      const auto& n = nodes_[id];
      if (!n.leaf || !n.needs_grad) continue;
      if (grads[id].empty()) {
        out.set(id, Tensor::zeros(n.value.shape()));
      } else {
        out.set(id, Tensor(n.value.shape(), std::move(grads[id])));
      }
    }
    return out;
  }

 private:
  struct Node {
    Tensor value;
    bool needs_grad;
    bool leaf;
  };

  Var push(Tensor value, bool needs_grad, bool leaf) {
    nodes_.push_back(Node{std::move(value), needs_grad, leaf});
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::vector<Entry> entries_;
};

inline Tensor Var::value() const { return tape_->value(id_); }
inline bool Var::needs_grad() const { return tape_->needs_grad(id_); }

}  // namespace emoe
