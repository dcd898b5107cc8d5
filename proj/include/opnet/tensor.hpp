#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace opnet {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

/// Raised when tensor shapes are incompatible with an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename Scalar>
using Buffer = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;

template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

/// Graph recording switch. Disabled inside a NoGradGuard scope.
class GradMode {
 public:
  static bool enabled() { return flag(); }
  static void set(bool on) { flag() = on; }

 private:
  static bool& flag() {
    thread_local bool on = true;
    return on;
  }
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename Scalar>
struct TensorNode {
  Shape shape;
  Buffer<Scalar> data;
  Buffer<Scalar> grad;  // empty until populated
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Reads this node's grad and accumulates into the parents that require grad.
  std::function<void(TensorNode&)> backward;

  bool has_grad() const { return grad.size() == data.size() && data.size() > 0; }

  Buffer<Scalar>& ensure_grad() {
    if (grad.size() != data.size()) grad = Buffer<Scalar>::Zero(data.size());
    return grad;
  }
};

/// Dense row-major N-d tensor with reverse-mode autodiff. Copies share storage.
template <typename Scalar>
class Tensor {
 public:
  using Node = TensorNode<Scalar>;

  Tensor() = default;

  Tensor(Shape shape, Buffer<Scalar> data, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    for (Index d : shape) {
      if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + opnet::to_string(shape));
    }
    if (numel(shape) != data.size()) {
      throw ShapeError("tensor data size " + std::to_string(data.size()) + " does not match shape " +
                       opnet::to_string(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const Index n = numel(shape);
    return Tensor(std::move(shape), Buffer<Scalar>::Zero(n), requires_grad);
  }

  static Tensor constant(Shape shape, Scalar value, bool requires_grad = false) {
    const Index n = numel(shape);
    return Tensor(std::move(shape), Buffer<Scalar>::Constant(n, value), requires_grad);
  }

  static Tensor scalar(Scalar value, bool requires_grad = false) {
    return constant({1}, value, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  Index size() const { return node_->data.size(); }

  Buffer<Scalar>& data() { return node_->data; }
  const Buffer<Scalar>& data() const { return node_->data; }
  Scalar item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + opnet::to_string(shape()));
    return node_->data[0];
  }
  Scalar operator[](Index i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_->has_grad(); }
  const Buffer<Scalar>& grad() const { return node_->grad; }
  Buffer<Scalar>& grad() { return node_->grad; }
  void zero_grad() {
    if (node_->grad.size()) node_->grad.setZero();
  }
  void clear_grad() { node_->grad.resize(0); }

  /// Row-major matrix view of the flat data (rows * cols == size()).
  MatrixMap<Scalar> matrix(Index rows, Index cols) { return {node_->data.data(), rows, cols}; }
  ConstMatrixMap<Scalar> matrix(Index rows, Index cols) const {
    return {node_->data.data(), rows, cols};
  }

  /// Leaf copy without graph history.
  Tensor detach() const { return Tensor(shape(), data(), false); }
  Tensor clone() const { return Tensor(shape(), data(), requires_grad()); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

  /// Builds an op output; the graph is only recorded when an input requires grad.
  static Tensor from_op(Shape shape, Buffer<Scalar> data, std::vector<Tensor> inputs,
                        std::function<void(Node&)> backward) {
    Tensor out(std::move(shape), std::move(data));
    if (!GradMode::enabled()) return out;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    out.node_->parents.reserve(inputs.size());
    for (auto& in : inputs) out.node_->parents.push_back(in.node_);
    out.node_->backward = std::move(backward);
    return out;
  }

 private:
  std::shared_ptr<Node> node_;
};

/// Reverse pass from a scalar loss. Accumulates into every reachable grad.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  using Node = TensorNode<Scalar>;
  if (loss.size() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + to_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad() += Scalar(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && node->has_grad()) node->backward(*node);
  }
}

/// Accumulates `g` into parent `i` of `node` when that parent requires grad.
template <typename Scalar, typename Expr>
void accumulate_parent(TensorNode<Scalar>& node, std::size_t i, const Expr& g) {
  auto& parent = *node.parents[i];
  if (parent.requires_grad) parent.ensure_grad() += g;
}

template <typename Scalar>
bool parent_needs_grad(const TensorNode<Scalar>& node, std::size_t i) {
  return node.parents[i]->requires_grad;
}

}  // namespace opnet
