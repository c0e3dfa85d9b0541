#include "nptt/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_set>

NPTT_NAMESPACE_BEGIN

namespace detail {

struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
};

}  // namespace detail

namespace {

thread_local bool g_grad_enabled = true;

std::shared_ptr<detail::Node> make_node(Shape shape, std::vector<Real> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw TensorError("tensor of shape " + shape_str(shape) + " cannot hold " +
                      std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  if (requires_grad) node->grad.assign(node->value.size(), Real(0));
  return node;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

Tensor::Tensor() = default;

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(make_node(std::move(shape), std::vector<Real>(n, Real(0)), requires_grad));
}

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(make_node(std::move(shape), std::vector<Real>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<Real> values, bool requires_grad) {
  return Tensor(make_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(Real value) { return from({}, {value}); }

detail::Node& Tensor::node() const {
  if (!node_) throw TensorError("use of an undefined tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return node().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw TensorError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return node().value.size(); }

std::span<Real> Tensor::values() { return node().value; }
std::span<const Real> Tensor::values() const { return node().value; }

Real Tensor::item() const {
  if (numel() != 1) throw TensorError("item() on tensor of shape " + shape_str(shape()));
  return node().value[0];
}

Real Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw TensorError("index rank does not match " + shape_str(s));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= s[axis]) throw TensorError("index out of range for " + shape_str(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node().value[flat];
}

bool Tensor::requires_grad() const { return node().requires_grad; }

void Tensor::set_requires_grad(bool on) {
  auto& n = node();
  n.requires_grad = on;
  if (on && n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), Real(0));
  if (!on) n.grad.clear();
}

bool Tensor::has_grad() const { return node().requires_grad && !node().grad.empty(); }

std::span<Real> Tensor::grad() {
  if (!requires_grad()) throw TensorError("grad() on a tensor that does not require grad");
  return node().grad;
}

std::span<const Real> Tensor::grad() const {
  if (!requires_grad()) throw TensorError("grad() on a tensor that does not require grad");
  return node().grad;
}

void Tensor::zero_grad() {
  auto& n = node();
  std::fill(n.grad.begin(), n.grad.end(), Real(0));
}

bool Tensor::is_taped() const { return static_cast<bool>(node().backward); }

Tensor Tensor::clone() const {
  return Tensor(make_node(shape(), node().value, false));
}

void Tensor::backward() const {
  auto& root = node();
  if (root.value.size() != 1 || !root.shape.empty()) {
    throw TensorError("backward() requires a scalar, got shape " + shape_str(root.shape));
  }
  if (!root.backward) throw TensorError("backward() on a tensor that is not part of a recorded computation");

  // Iterative post-order DFS gives a topological order of the recorded graph.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{&root, 0}};
  seen.insert(&root);
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      auto* p = n->parents[next++].get();
      if (p->backward && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (auto* n : order) n->grad.assign(n->value.size(), Real(0));
  root.grad[0] = Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    n->backward(n->grad);
  }
  // Release the tape: intermediate results no longer keep their inputs alive.
  for (auto* n : order) {
    n->backward = nullptr;
    n->parents.clear();
    n->grad.clear();
    n->requires_grad = false;
  }
}

Tensor record_op(Shape shape, std::vector<Real> values, const std::vector<Tensor>& inputs,
                 BackwardFn backward) {
  const bool track = g_grad_enabled && std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) {
                       return t.requires_grad();
                     });
  auto node = make_node(std::move(shape), std::move(values), false);
  if (track) {
    node->requires_grad = true;
    node->backward = std::move(backward);
    for (const auto& t : inputs) {
      if (t.requires_grad()) node->parents.push_back(t.node_);
    }
  }
  return Tensor(std::move(node));
}

std::span<Real> grad_sink(const Tensor& t) {
  auto& n = t.node();
  if (!n.requires_grad) return {};
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), Real(0));
  return n.grad;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

NPTT_NAMESPACE_END
