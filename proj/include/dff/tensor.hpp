// SPDX-FileCopyrightText: © 2026 DFF-Adapter contributors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dff/error.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace dff {

namespace detail {

/// Activation buffers are a few hundred KiB each and churn every op; keep
/// freed heap pages mapped instead of returning them to the kernel.
inline void retain_heap_pages() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
}

inline const bool heap_tuned = (retain_heap_pages(), true);

}  // namespace detail

/// Cache-line aligned storage for tensor buffers.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {
struct TensorData {
  Shape shape;
  Buffer values;
  Buffer grad;  // empty until the first accumulation
  bool requires_grad = false;
};
}  // namespace detail

/// Dense row-major double tensor. Copies share storage (a handle, like a
/// graph node reference); use clone() for an independent deep copy.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::initializer_list<double> values, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer(values), requires_grad) {}

  Tensor(Shape shape, const std::vector<double>& values, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer(values.begin(), values.end()), requires_grad) {}

  Tensor(Shape shape, Buffer values, bool requires_grad = false) : data_(std::make_shared<detail::TensorData>()) {
    for (std::size_t extent : shape) {
      if (extent == 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
    }
    if (values.size() != shape_size(shape)) {
      throw DimensionError("tensor of shape " + to_string(shape) + " needs " + std::to_string(shape_size(shape)) +
                           " values, got " + std::to_string(values.size()));
    }
    data_->shape = std::move(shape);
    data_->values = std::move(values);
    data_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::size_t n = shape_size(shape);
    return Tensor(std::move(shape), Buffer(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    std::size_t n = shape_size(shape);
    return Tensor(std::move(shape), Buffer(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) { return Tensor({}, {value}, requires_grad); }

  static Tensor vector(std::vector<double> values, bool requires_grad = false) {
    std::size_t n = values.size();
    return Tensor({n}, std::move(values), requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values, bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(values), requires_grad);
  }

  static Tensor identity(std::size_t n) {
    Tensor t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data_->values[i * n + i] = 1.0;
    return t;
  }

  bool defined() const { return static_cast<bool>(data_); }
  explicit operator bool() const { return defined(); }

  const Shape& shape() const { return data_->shape; }
  std::size_t rank() const { return data_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return data_->shape.at(axis); }
  std::size_t size() const { return data_->values.size(); }
  bool is_scalar() const { return size() == 1 && rank() <= 1; }

  std::span<const double> values() const { return data_->values; }
  std::span<double> mutable_values() { return data_->values; }
  double operator[](std::size_t i) const { return data_->values[i]; }
  double item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return data_->values[0];
  }
  double at(std::size_t row, std::size_t col) const { return data_->values[row * data_->shape[1] + col]; }

  bool requires_grad() const { return data_->requires_grad; }
  void set_requires_grad(bool on) { data_->requires_grad = on; }

  bool has_grad() const { return !data_->grad.empty(); }
  std::span<const double> grad() const { return data_->grad; }
  /// Gradient buffer, allocated (zero-filled) on first use.
  std::span<double> mutable_grad() {
    if (data_->grad.empty()) data_->grad.assign(data_->values.size(), 0.0);
    return data_->grad;
  }
  void zero_grad() { data_->grad.clear(); }

  Tensor clone() const {
    Tensor t(data_->shape, data_->values, data_->requires_grad);
    return t;
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw DimensionError("cannot reshape " + to_string(this->shape()) + " to " + to_string(shape));
    }
    return Tensor(std::move(shape), data_->values, false);
  }

  bool same_storage(const Tensor& other) const { return data_ == other.data_; }

 private:
  std::shared_ptr<detail::TensorData> data_;
};

class Tape;

/// One recorded operation. The backward rule reads output.grad() and
/// accumulates into the grads of inputs that require them.
struct TapeNode {
  std::vector<Tensor> inputs;
  Tensor output;
  std::function<void(TapeNode&)> backward;
  const char* name = "";
};

/// Define-by-run recording of operations for reverse-mode differentiation.
/// A tape and every tensor it references belong to one thread.
class Tape {
 public:
  enum class Mode { kRecord, kInference };

  Tape() = default;
  explicit Tape(Mode mode) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool recording() const { return mode_ == Mode::kRecord; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<TapeNode>& nodes() const { return nodes_; }

  void record(const char* name, Tensor output, std::vector<Tensor> inputs, std::function<void(TapeNode&)> fn) {
    nodes_.push_back(TapeNode{std::move(inputs), std::move(output), std::move(fn), name});
  }

  /// Populate d(seed * loss)/d(t) on every requires_grad tensor reachable
  /// from `loss`. Gradients add into existing buffers, so several tapes may
  /// feed one optimizer step.
  void backward(const Tensor& loss, double seed = 1.0) {
    if (!loss.defined() || loss.size() != 1) {
      throw ContractError("backward needs a scalar loss, got shape " +
                          (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
    }
    if (consumed_) throw ContractError("backward already ran on this tape");
    auto it = std::find_if(nodes_.rbegin(), nodes_.rend(),
                           [&](const TapeNode& n) { return n.output.same_storage(loss); });
    if (it == nodes_.rend()) {
      if (loss.requires_grad()) {  // a leaf loss: d loss / d loss
        Tensor l = loss;
        l.mutable_grad()[0] += seed;
        consumed_ = true;
        return;
      }
      throw ContractError("backward: loss was not produced on this tape");
    }
    Tensor l = loss;
    l.mutable_grad()[0] += seed;
    for (; it != nodes_.rend(); ++it) {
      if (it->output.has_grad()) it->backward(*it);
    }
    consumed_ = true;
  }

 private:
  Mode mode_ = Mode::kRecord;
  std::vector<TapeNode> nodes_;
  bool consumed_ = false;
};

}  // namespace dff
