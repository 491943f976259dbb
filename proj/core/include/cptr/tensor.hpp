#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cptr/error.hpp"

namespace cptr {

template <class S>
class TapeT;

// When enabled, every op scans its output for NaN/Inf and throws on the first
// hit. Off by default; forward speed matters more than the guard in release
// runs.
bool debug_checks_enabled();
void set_debug_checks(bool enabled);

namespace detail {
inline std::atomic<bool>& debug_checks_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}
}  // namespace detail

inline bool debug_checks_enabled() { return detail::debug_checks_flag().load(std::memory_order_relaxed); }
inline void set_debug_checks(bool enabled) { detail::debug_checks_flag().store(enabled, std::memory_order_relaxed); }

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense n-dimensional array of S (float for training, double for gradient
// checking). Data is held behind a shared_ptr and treated as immutable once
// the tensor has been consumed by an op, so copies are cheap and inference
// over frozen tensors is thread-safe. A tensor produced while a tape is
// attached remembers its node id for reverse-mode differentiation.
template <class S>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(std::vector<int> shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<S>>(checked_size(shape_), S(0))) {}

  TensorT(std::vector<int> shape, std::vector<S> data)
      : shape_(std::move(shape)), data_(std::make_shared<std::vector<S>>(std::move(data))) {
    if (static_cast<long long>(data_->size()) != checked_size(shape_))
      throw ShapeError("tensor data length " + std::to_string(data_->size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static TensorT zeros(std::vector<int> shape) { return TensorT(std::move(shape)); }

  static TensorT full(std::vector<int> shape, S v) {
    TensorT t(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), v);
    return t;
  }

  static TensorT ones(std::vector<int> shape) { return full(std::move(shape), S(1)); }

  static TensorT scalar(S v) { return TensorT({1}, {v}); }

  bool empty() const { return !data_; }
  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  long long size() const { return data_ ? static_cast<long long>(data_->size()) : 0; }

  // 2-D accessors; most of the model lives on matrices.
  int rows() const { return rank() == 2 ? shape_[0] : (rank() == 1 ? 1 : throw_rank2()); }
  int cols() const { return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : throw_rank2()); }

  const S* data() const { return data_->data(); }
  S* mutable_data() { return data_->data(); }
  const std::vector<S>& vec() const { return *data_; }

  S operator()(int r, int c) const { return (*data_)[static_cast<size_t>(r) * cols() + c]; }

  S item() const {
    if (size() != 1) throw ShapeError("item() called on tensor of shape " + shape_str(shape_));
    return (*data_)[0];
  }

  bool requires_grad() const { return node_ >= 0; }
  int node() const { return node_; }
  TapeT<S>* tape() const { return tape_; }

  // Same storage, detached from any tape.
  TensorT detached() const {
    TensorT t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }

  // Deep copy of the storage.
  TensorT clone() const {
    TensorT t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<S>>(*data_);
    return t;
  }

  template <class T>
  TensorT<T> cast() const {
    std::vector<T> out(data_->size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>((*data_)[i]);
    return TensorT<T>(shape_, std::move(out));
  }

  void attach(TapeT<S>* tape, int node) {
    tape_ = tape;
    node_ = node;
  }

  void add_in_place(const TensorT& other) {
    if (shape_ != other.shape_)
      throw ShapeError("accumulate shape mismatch: " + shape_str(shape_) + " vs " + shape_str(other.shape_));
    S* a = data_->data();
    const S* b = other.data();
    const size_t n = data_->size();
    for (size_t i = 0; i < n; ++i) a[i] += b[i];
  }

 private:
  static long long checked_size(const std::vector<int>& shape) {
    if (shape.empty()) throw ShapeError("tensor must have at least one dimension");
    long long n = 1;
    for (int d : shape) {
      if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
      n *= d;
    }
    return n;
  }

  [[noreturn]] int throw_rank2() const {
    throw ShapeError("expected rank <= 2 tensor, got shape " + shape_str(shape_));
  }

  std::vector<int> shape_;
  std::shared_ptr<std::vector<S>> data_;
  TapeT<S>* tape_ = nullptr;
  int node_ = -1;
};

// Reverse-mode gradient tape. Ops append nodes in execution order, so inputs
// always precede their consumers; backward() walks the list once in reverse.
// A tape is single-threaded and single-shot: recording after freeze or a
// second backward() is an error.
template <class S>
class TapeT {
 public:
  using BackwardFn = std::function<void(TapeT&, const TensorT<S>&)>;

  TapeT() = default;
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  // Registers t as a differentiable leaf. Returns a copy bound to this tape.
  TensorT<S> watch(const TensorT<S>& t) {
    TensorT<S> out = t.detached();
    out.attach(this, record("leaf", {}, t.shape(), nullptr));
    return out;
  }

  int record(const char* op, std::vector<int> inputs, std::vector<int> out_shape, BackwardFn backward) {
    if (frozen_) throw Error("gradient tape is frozen; cannot record op '" + std::string(op) + "'");
    nodes_.push_back(Node{op, std::move(inputs), std::move(out_shape), std::move(backward)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  size_t node_count() const { return nodes_.size(); }
  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }

  // Seeds d(loss)/d(loss) = 1 and propagates through every node in reverse
  // topological order, visiting each node exactly once.
  void backward(const TensorT<S>& loss) {
    if (nodes_.empty()) throw Error("backward on empty tape");
    if (consumed_) throw Error("backward already ran on this tape; gradients would double-accumulate");
    if (loss.tape() != this || loss.node() < 0) throw Error("loss tensor is not recorded on this tape");
    if (loss.size() != 1) throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    frozen_ = true;
    consumed_ = true;
    grads_.assign(nodes_.size(), TensorT<S>());
    grads_[static_cast<size_t>(loss.node())] = TensorT<S>::ones(loss.shape());
    for (int id = loss.node(); id >= 0; --id) {
      const Node& n = nodes_[static_cast<size_t>(id)];
      if (grads_[static_cast<size_t>(id)].empty() || !n.backward) continue;
      n.backward(*this, grads_[static_cast<size_t>(id)]);
    }
  }

  // Adds g into the gradient slot of `node`. node < 0 marks a constant input
  // and is ignored. The first accumulation deep-copies so later in-place adds
  // can never alias a gradient shared across parents.
  void accumulate(int node, const TensorT<S>& g) {
    if (node < 0) return;
    TensorT<S>& slot = grads_[static_cast<size_t>(node)];
    if (slot.empty()) {
      slot = g.clone();
    } else {
      slot.add_in_place(g);
    }
  }

  // Gradient of a tensor recorded on this tape; zeros if the loss never
  // reached it.
  TensorT<S> grad(const TensorT<S>& t) const {
    if (t.tape() != this || t.node() < 0) throw Error("grad() of a tensor that is not on this tape");
    if (!consumed_) throw Error("grad() before backward()");
    const TensorT<S>& g = grads_[static_cast<size_t>(t.node())];
    if (g.empty()) return TensorT<S>::zeros(t.shape());
    return g;
  }

  const char* op_kind(int node) const { return nodes_[static_cast<size_t>(node)].op; }

 private:
  struct Node {
    const char* op;
    std::vector<int> inputs;
    std::vector<int> out_shape;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  std::vector<TensorT<S>> grads_;
  bool frozen_ = false;
  bool consumed_ = false;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

namespace detail {

template <class S>
void check_finite(const TensorT<S>& t, const char* op) {
  if (!debug_checks_enabled()) return;
  const S* p = t.data();
  const long long n = t.size();
  for (long long i = 0; i < n; ++i) {
    if (!std::isfinite(static_cast<double>(p[i])))
      throw ValueError(std::string("non-finite value produced by op '") + op + "' at flat index " + std::to_string(i));
  }
}

// Resolves the tape shared by a set of inputs; mixing tapes is an error.
template <class S>
TapeT<S>* result_tape(std::initializer_list<const TensorT<S>*> inputs) {
  TapeT<S>* tape = nullptr;
  for (const TensorT<S>* t : inputs) {
    if (!t->tape()) continue;
    if (tape && tape != t->tape()) throw Error("op inputs recorded on different tapes");
    tape = t->tape();
  }
  return tape;
}

}  // namespace detail
}  // namespace cptr
