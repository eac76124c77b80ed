#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fmc {

using Index = std::int64_t;
using Shape = std::vector<Index>;

Index numel_of(const Shape &shape);
std::string shape_str(const Shape &shape);

class Tensor;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node &)> backward;

  std::vector<double> &ensure_grad();
};

} // namespace detail

// Dense row-major float64 tensor with reverse-mode autodiff. A Tensor is a
// cheap handle; copies alias the same storage. The graph is the DAG of nodes
// reachable from a root through `inputs`.
class Tensor {
public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape &shape() const;
  Index dim(int axis) const;
  int rank() const { return static_cast<int>(shape().size()); }
  Index numel() const;

  std::span<const double> data() const;
  // Mutable access for leaves (parameters, inputs). Mutating a tensor that
  // already feeds a recorded graph invalidates that graph.
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<Index> idx) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  // Empty span when no gradient has been accumulated.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Value copy without history.
  Tensor detach() const;
  Tensor clone() const;

  const std::shared_ptr<detail::Node> &node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
  std::shared_ptr<detail::Node> node_;
};

// True unless a NoGradGuard is active on this thread.
bool grad_enabled();

class NoGradGuard {
public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard &) = delete;
  NoGradGuard &operator=(const NoGradGuard &) = delete;

private:
  bool previous_;
};

// Nodes reachable from `root` that require grad, inputs before consumers.
std::vector<detail::Node *> topological_order(const Tensor &root);

// Populates grads of every requires_grad leaf reachable from a scalar root.
// Gradients accumulate; callers zero them between steps.
void backward(const Tensor &root);

namespace detail {
// Builds an op result. `fn` is kept only if some input requires grad and
// grad mode is on.
Tensor make_result(Shape shape, std::vector<double> value,
                   std::vector<Tensor> inputs,
                   std::function<void(Node &)> fn);
void check_finite(std::span<const double> values, const char *op);
} // namespace detail

} // namespace fmc
