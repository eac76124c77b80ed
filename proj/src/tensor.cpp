#include "fmc/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace fmc {

Index numel_of(const Shape &shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 0)
      throw std::invalid_argument("negative dimension in shape " +
                                  shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape &shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i)
    os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

std::vector<double> &Node::ensure_grad() {
  if (grad.empty())
    grad.assign(value.size(), 0.0);
  return grad;
}

void check_finite(std::span<const double> values, const char *op) {
  for (double v : values)
    if (!std::isfinite(v))
      throw std::domain_error(std::string(op) + ": non-finite value produced");
}

} // namespace detail

namespace {
thread_local bool tls_grad_enabled = true;

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<double> value,
                                       bool requires_grad) {
  if (numel_of(shape) != static_cast<Index>(value.size()))
    throw std::invalid_argument("tensor data length " +
                                std::to_string(value.size()) +
                                " does not match shape " + shape_str(shape));
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}
} // namespace

bool grad_enabled() { return tls_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(tls_grad_enabled) {
  tls_grad_enabled = false;
}
NoGradGuard::~NoGradGuard() { tls_grad_enabled = previous_; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const Index n = numel_of(shape);
  return Tensor(new_node(std::move(shape),
                         std::vector<double>(static_cast<std::size_t>(n), value),
                         requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  return Tensor(new_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

const Shape &Tensor::shape() const {
  if (!node_)
    throw std::logic_error("use of undefined tensor");
  return node_->shape;
}

Index Tensor::dim(int axis) const {
  const Shape &s = shape();
  if (axis < 0)
    axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw std::out_of_range("axis out of range for shape " + shape_str(s));
  return s[static_cast<std::size_t>(axis)];
}

Index Tensor::numel() const { return static_cast<Index>(node_->value.size()); }

std::span<const double> Tensor::data() const {
  shape();
  return node_->value;
}

std::span<double> Tensor::mutable_data() {
  shape();
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1)
    throw std::invalid_argument("item() on tensor of shape " +
                                shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::initializer_list<Index> idx) const {
  const Shape &s = shape();
  if (idx.size() != s.size())
    throw std::invalid_argument("at(): rank mismatch");
  Index flat = 0;
  std::size_t i = 0;
  for (Index v : idx) {
    if (v < 0 || v >= s[i])
      throw std::out_of_range("at(): index out of range");
    flat = flat * s[i] + v;
    ++i;
  }
  return node_->value[static_cast<std::size_t>(flat)];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  shape();
  node_->requires_grad = on;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  shape();
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  shape();
  return node_->ensure_grad();
}

void Tensor::zero_grad() {
  shape();
  node_->grad.assign(node_->value.size(), 0.0);
}

Tensor Tensor::detach() const {
  shape();
  // Shares nothing with the graph; values are copied so later in-place
  // parameter updates cannot alias a detached target.
  return Tensor(new_node(node_->shape, node_->value, false));
}

Tensor Tensor::clone() const {
  shape();
  return Tensor(new_node(node_->shape, node_->value, node_->requires_grad));
}

std::vector<detail::Node *> topological_order(const Tensor &root) {
  std::vector<detail::Node *> order;
  if (!root.requires_grad())
    return order;
  enum class Mark { Open, Done };
  std::unordered_map<detail::Node *, Mark> marks;
  struct Frame {
    detail::Node *node;
    std::size_t next;
  };
  std::vector<Frame> stack{{root.node().get(), 0}};
  marks[root.node().get()] = Mark::Open;
  while (!stack.empty()) {
    Frame &f = stack.back();
    if (f.next < f.node->inputs.size()) {
      detail::Node *child = f.node->inputs[f.next++].get();
      if (!child->requires_grad)
        continue;
      auto it = marks.find(child);
      if (it == marks.end()) {
        marks[child] = Mark::Open;
        stack.push_back({child, 0});
      } else if (it->second == Mark::Open) {
        throw std::logic_error("backward: cycle detected in graph");
      }
    } else {
      marks[f.node] = Mark::Done;
      order.push_back(f.node);
      stack.pop_back();
    }
  }
  return order;
}

void backward(const Tensor &root) {
  if (!root.defined())
    throw std::invalid_argument("backward: undefined root");
  if (root.numel() != 1)
    throw std::invalid_argument("backward: root must be scalar, got shape " +
                                shape_str(root.shape()));
  if (!root.requires_grad())
    throw std::invalid_argument("backward: root is not on a graph");
  std::vector<detail::Node *> order = topological_order(root);
  root.node()->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node *n = *it;
    if (!n->backward)
      continue;
    n->ensure_grad();
    n->backward(*n);
    // Interior gradients are not needed once propagated.
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

namespace detail {

Tensor make_result(Shape shape, std::vector<double> value,
                   std::vector<Tensor> inputs, std::function<void(Node &)> fn) {
  check_finite(value, "forward");
  auto node = new_node(std::move(shape), std::move(value), false);
  if (grad_enabled()) {
    bool any = false;
    for (const Tensor &t : inputs)
      any = any || t.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (const Tensor &t : inputs)
        node->inputs.push_back(t.node());
      node->backward = std::move(fn);
    }
  }
  return Tensor(std::move(node));
}

} // namespace detail

} // namespace fmc
