#include "i3net/autodiff/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace i3net::ad {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  if (numel(shape) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= node_->shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(node_->shape));
  }
  return node_->shape[axis];
}

std::size_t Tensor::size() const { return node_->data.size(); }
std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
  if (node_->data.size() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_str(node_->shape));
  }
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& shape = node_->shape;
  if (index.size() != shape.size()) throw ShapeError("index rank mismatch for shape " + shape_str(shape));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape[axis]) throw ShapeError("index out of range for shape " + shape_str(shape));
    flat = flat * shape[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool value) { node_->requires_grad = value; }

bool Tensor::has_grad() const { return node_->grad.size() == node_->data.size(); }

std::span<const double> Tensor::grad() const { return node_->ensure_grad(); }
std::span<double> Tensor::mutable_grad() { return node_->ensure_grad(); }

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return from(node_->shape, node_->data, false); }

void Tensor::backward() const {
  if (node_->data.size() != 1 || !node_->shape.empty()) {
    throw ShapeError("backward() requires a scalar seed, got shape " + shape_str(node_->shape));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS; `order` ends up topologically sorted (inputs first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
  // Intermediate buffers are no longer needed; leaves keep their gradients.
  for (Node* n : order) {
    if (n->backward_fn) std::vector<double>().swap(n->grad);
  }
}

namespace {
template <typename Inputs>
Tensor make_result_impl(Shape shape, std::vector<double> data, const Inputs& inputs, const char* op,
                        std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& t : inputs) node->parents.push_back(t.node_ptr());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}
}  // namespace

Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs, const char* op,
                   std::function<void(Node&)> backward_fn) {
  return make_result_impl(std::move(shape), std::move(data), inputs, op, std::move(backward_fn));
}

Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs, const char* op,
                   std::function<void(Node&)> backward_fn) {
  return make_result_impl(std::move(shape), std::move(data), inputs, op, std::move(backward_fn));
}

}  // namespace i3net::ad
