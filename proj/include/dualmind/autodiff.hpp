#pragma once
// Reverse-mode automatic differentiation over dense row-major tensors.
//
// A tensor is a cheap shared handle on (shape, values, gradient). Operators
// live in ops.hpp as free functions; when a thread-active tape exists and an
// input requires gradients, the operator pushes one backward closure onto the
// tape. The tape is a DAG in creation order; backward() seeds the scalar loss
// with 1 and replays closures in strict reverse creation order, accumulating
// gradients in place. Nodes off the loss path see an empty output gradient
// and return without touching anything.

#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dm {

using shape_t = std::vector<int>;

inline std::int64_t shape_numel(const shape_t& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const shape_t& s) {
  std::ostringstream o;
  o << '[';
  for (std::size_t i = 0; i < s.size(); ++i) o << (i ? "," : "") << s[i];
  o << ']';
  return o.str();
}

inline void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

template <class S>
class tensor {
  struct payload {
    shape_t shape;
    std::vector<S> value;
    std::vector<S> grad;  // empty until backward touches this tensor
    bool requires_grad = false;
  };
  std::shared_ptr<payload> p_;

 public:
  tensor() = default;

  static tensor zeros(shape_t shape, bool requires_grad = false) {
    tensor t;
    t.p_ = std::make_shared<payload>();
    t.p_->value.assign(std::size_t(shape_numel(shape)), S(0));
    t.p_->shape = std::move(shape);
    t.p_->requires_grad = requires_grad;
    return t;
  }

  static tensor from(shape_t shape, std::vector<S> data, bool requires_grad = false) {
    check(std::int64_t(data.size()) == shape_numel(shape),
          "tensor::from: " + std::to_string(data.size()) + " values for shape " + shape_str(shape));
    tensor t;
    t.p_ = std::make_shared<payload>();
    t.p_->shape = std::move(shape);
    t.p_->value = std::move(data);
    t.p_->requires_grad = requires_grad;
    return t;
  }

  static tensor scalar(S v) { return from({}, {v}); }

  bool defined() const { return bool(p_); }
  int rank() const { return int(p_->shape.size()); }
  const shape_t& shape() const { return p_->shape; }
  int dim(int axis) const { return p_->shape[std::size_t(axis)]; }
  std::int64_t numel() const { return std::int64_t(p_->value.size()); }

  std::vector<S>& value() { return p_->value; }
  const std::vector<S>& value() const { return p_->value; }

  bool requires_grad() const { return p_->requires_grad; }
  void set_requires_grad(bool b) { p_->requires_grad = b; }

  bool has_grad() const { return !p_->grad.empty(); }
  void ensure_grad() {
    if (p_->grad.empty()) p_->grad.assign(p_->value.size(), S(0));
  }
  std::vector<S>& grad() {
    ensure_grad();
    return p_->grad;
  }
  const std::vector<S>& grad_view() const { return p_->grad; }
  void clear_grad() { p_->grad.clear(); }

  S item() const {
    check(numel() == 1, "item: tensor is not scalar, shape " + shape_str(shape()));
    return p_->value[0];
  }

  bool same_object(const tensor& o) const { return p_ == o.p_; }
};

inline bool& grad_mode() {
  thread_local bool on = true;
  return on;
}

// RAII: disables tape recording (used by rollouts, finite differences, eval).
class no_grad {
  bool prev_;

 public:
  no_grad() : prev_(grad_mode()) { grad_mode() = false; }
  ~no_grad() { grad_mode() = prev_; }
  no_grad(const no_grad&) = delete;
  no_grad& operator=(const no_grad&) = delete;
};

template <class S>
class tape {
 public:
  struct node {
    const char* op;
    std::function<void()> back;
  };

  void push(const char* op, std::function<void()> back) {
    nodes_.push_back(node{op, std::move(back)});
  }
  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }
  const char* op_at(std::size_t i) const { return nodes_[i].op; }

  // Seeds d(loss)/d(loss) = 1 and visits nodes in strict reverse creation order.
  void backward_from(tensor<S> loss) {
    check(loss.numel() == 1, "backward: loss must be scalar, got " + shape_str(loss.shape()));
    check(loss.requires_grad(), "backward: loss does not depend on any differentiable input");
    loss.grad()[0] += S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->back();
  }

  static tape*& active() {
    thread_local tape* t = nullptr;
    return t;
  }

 private:
  std::vector<node> nodes_;
};

// RAII: makes a tape the active recording target on this thread.
template <class S>
class tape_scope {
  tape<S>* prev_;

 public:
  explicit tape_scope(tape<S>& t) : prev_(tape<S>::active()) { tape<S>::active() = &t; }
  ~tape_scope() { tape<S>::active() = prev_; }
  tape_scope(const tape_scope&) = delete;
  tape_scope& operator=(const tape_scope&) = delete;
};

template <class S>
inline bool recording() {
  return grad_mode() && tape<S>::active() != nullptr;
}

template <class S>
inline void record(const char* op, std::function<void()> back) {
  tape<S>::active()->push(op, std::move(back));
}

// Detaches x from the graph: values copied, no node recorded, gradients never
// flow through the result.
template <class S>
tensor<S> stop_gradient(const tensor<S>& x) {
  return tensor<S>::from(x.shape(), x.value(), false);
}

}  // namespace dm
