#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace prognet {

#ifdef PROGNET_SINGLE_PRECISION
using real_t = float;
#else
using real_t = double;
#endif

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

template <typename S>
struct TapeT;

// Shared value buffer. The tape attachment lives here (not in the tensor
// handle) so that every copy of a handle sees the same recording state.
template <typename S>
struct StorageT {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // allocated on demand, same length as data
  bool requires_grad = false;
  int node = -1;            // node id on `tape`, -1 when unattached
  TapeT<S>* tape = nullptr;

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), S(0));
  }
  void zero_grad() { grad.assign(data.size(), S(0)); }
  int node_on(const TapeT<S>* t) const { return tape == t ? node : -1; }
};

// Dense row-major tensor handle with value semantics over shared storage.
template <typename S>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(Shape shape, S fill = S(0), bool requires_grad = false) {
    for (int64_t d : shape)
      if (d <= 0) throw std::invalid_argument("tensor: nonpositive dim in " + shape_str(shape));
    st_ = std::make_shared<StorageT<S>>();
    st_->shape = std::move(shape);
    st_->data.assign(static_cast<size_t>(numel_of(st_->shape)), fill);
    st_->requires_grad = requires_grad;
  }

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    return TensorT(std::move(shape), S(0), requires_grad);
  }
  static TensorT full(Shape shape, S v, bool requires_grad = false) {
    return TensorT(std::move(shape), v, requires_grad);
  }
  static TensorT scalar(S v, bool requires_grad = false) {
    return TensorT(Shape{1}, v, requires_grad);
  }
  static TensorT from_data(Shape shape, std::vector<S> values, bool requires_grad = false) {
    TensorT t(shape, S(0), requires_grad);
    if (static_cast<int64_t>(values.size()) != t.numel())
      throw std::invalid_argument("tensor: data length " + std::to_string(values.size()) +
                                  " does not match shape " + shape_str(shape));
    t.st_->data = std::move(values);
    return t;
  }

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return st_->shape; }
  int ndim() const { return static_cast<int>(st_->shape.size()); }
  int64_t dim(int i) const { return st_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return st_->numel(); }

  std::vector<S>& data() { return st_->data; }
  const std::vector<S>& data() const { return st_->data; }
  S& at(int64_t i) { return st_->data[static_cast<size_t>(i)]; }
  S at(int64_t i) const { return st_->data[static_cast<size_t>(i)]; }

  bool requires_grad() const { return st_->requires_grad; }
  TensorT& set_requires_grad(bool v) {
    st_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return st_ && st_->grad.size() == st_->data.size(); }
  std::vector<S>& grad() {
    if (!has_grad()) throw std::runtime_error("tensor: gradient not populated; run backward first");
    return st_->grad;
  }
  const std::vector<S>& grad() const {
    if (!has_grad()) throw std::runtime_error("tensor: gradient not populated; run backward first");
    return st_->grad;
  }
  void zero_grad() { st_->zero_grad(); }

  S value() const {
    if (numel() != 1) throw std::runtime_error("tensor: value() on non-scalar " + shape_str(shape()));
    return st_->data[0];
  }

  bool all_finite() const {
    for (S v : st_->data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::shared_ptr<StorageT<S>> storage() const { return st_; }

 private:
  std::shared_ptr<StorageT<S>> st_;
};

// Execution-ordered record of one forward pass. Nodes are appended as
// primitives run, so index order is a topological order of the graph.
template <typename S>
struct TapeT {
  struct Node {
    std::vector<int> parents;
    std::function<void()> backward;  // reads output grad, accumulates into parents
  };

  std::vector<Node> nodes;
  std::vector<std::shared_ptr<StorageT<S>>> leaves;
  bool consumed = false;

  TapeT() = default;
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;
  ~TapeT() { detach_all(); }

  static TapeT*& current() {
    thread_local TapeT* t = nullptr;
    return t;
  }

  // Registers a storage as a gradient leaf (an input the pass reads).
  int add_leaf(const std::shared_ptr<StorageT<S>>& st) {
    int id = st->node_on(this);
    if (id >= 0) return id;
    id = static_cast<int>(nodes.size());
    nodes.push_back(Node{{}, nullptr});
    st->node = id;
    st->tape = this;
    leaves.push_back(st);
    owned_.push_back(st);
    return id;
  }

  int add_node(const std::shared_ptr<StorageT<S>>& out, std::vector<int> parents,
               std::function<void()> backward) {
    const int id = static_cast<int>(nodes.size());
    nodes.push_back(Node{std::move(parents), std::move(backward)});
    out->node = id;
    out->tape = this;
    owned_.push_back(out);
    return id;
  }

  void backward(const TensorT<S>& loss) { backward(loss, {}); }

  // Runs reverse accumulation from a scalar loss. Every leaf registered on
  // the tape, plus any tensor in `extra_leaves`, ends up with a gradient
  // buffer; leaves the loss does not depend on get exact zeros.
  void backward(const TensorT<S>& loss, std::span<const TensorT<S>> extra_leaves) {
    if (loss.numel() != 1)
      throw std::runtime_error("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (consumed) throw std::runtime_error("backward: tape already consumed; rerun the forward pass");
    consumed = true;

    for (auto& leaf : leaves) leaf->zero_grad();
    for (const auto& t : extra_leaves) t.storage()->zero_grad();

    auto ls = loss.storage();
    const int loss_node = ls->node_on(this);
    if (loss_node < 0) return;  // constant loss: all gradients stay zero

    ls->ensure_grad();
    ls->grad[0] = S(1);
    for (int i = loss_node; i >= 0; --i) {
      if (nodes[static_cast<size_t>(i)].backward) nodes[static_cast<size_t>(i)].backward();
    }
  }

 private:
  // Storages referencing this tape must forget it before the tape dies.
  void detach_all() {
    for (auto& st : owned_) {
      if (st->tape == this) {
        st->tape = nullptr;
        st->node = -1;
      }
    }
  }
  std::vector<std::shared_ptr<StorageT<S>>> owned_;
};

// RAII scope making a tape the recording target for the current thread.
template <typename S>
class TapeScopeT {
 public:
  explicit TapeScopeT(TapeT<S>& t) : prev_(TapeT<S>::current()) { TapeT<S>::current() = &t; }
  ~TapeScopeT() { TapeT<S>::current() = prev_; }
  TapeScopeT(const TapeScopeT&) = delete;
  TapeScopeT& operator=(const TapeScopeT&) = delete;

 private:
  TapeT<S>* prev_;
};

using Tensor = TensorT<real_t>;
using Tape = TapeT<real_t>;
using TapeScope = TapeScopeT<real_t>;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

}  // namespace prognet
