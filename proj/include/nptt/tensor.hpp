#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nptt/real.hpp"

NPTT_NAMESPACE_BEGIN

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
struct Node;
}

class Tensor;

// Called during backward with the gradient flowing into the op's output.
using BackwardFn = std::function<void(std::span<const Real> out_grad)>;

// Dense row-major array with optional participation in a reverse-mode tape.
//
// A Tensor is a cheap handle; copies share storage. Operations on tensors that
// require gradients record a backward closure on the result while gradient
// mode is enabled. Calling backward() on a scalar result walks the recorded
// graph once, accumulates into every leaf's grad buffer, and then releases the
// graph so intermediate buffers do not outlive the pass.
class Tensor {
 public:
  Tensor();

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false);
  static Tensor scalar(Real value);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<Real> values();
  std::span<const Real> values() const;
  Real item() const;
  Real at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<Real> grad();
  std::span<const Real> grad() const;
  void zero_grad();

  // True when this tensor was produced by a recorded operation.
  bool is_taped() const;
  void backward() const;

  // Fresh storage with the same values, detached from any tape.
  Tensor clone() const;
  Tensor detach() const { return clone(); }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  // Hooks for operation implementations.
  detail::Node& node() const;
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  friend Tensor record_op(Shape, std::vector<Real>, const std::vector<Tensor>&, BackwardFn);
  std::shared_ptr<detail::Node> node_;
};

// Creates the result of a differentiable operation. The closure is only
// retained when gradient mode is on and at least one input requires grad.
Tensor record_op(Shape shape, std::vector<Real> values, const std::vector<Tensor>& inputs,
                 BackwardFn backward);

// Gradient accumulator of `t`, allocated on first use. Empty when `t` does not
// require grad.
std::span<Real> grad_sink(const Tensor& t);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

NPTT_NAMESPACE_END
