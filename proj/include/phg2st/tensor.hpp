#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace phg2st {

using Index = Eigen::Index;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Shape = std::vector<Index>;

using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<const Matrix>;

std::string to_string(const Shape& shape);
Index numel(const Shape& shape);

namespace detail {

struct Node {
  std::uint64_t id = 0;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Index rows() const;
  Index cols() const;
  ConstMatrixMap value_matrix() const { return {value.data(), rows(), cols()}; }
  ConstMatrixMap grad_matrix() const { return {grad.data(), rows(), cols()}; }
  void accumulate(const Eigen::Ref<const Matrix>& g);
};

std::uint64_t next_node_id();

}  // namespace detail

/// Dense row-major real array taking part in reverse-mode differentiation.
///
/// A tensor of any rank is viewed as a matrix whose columns are the last
/// extent and whose rows fold every leading extent; a rank-0 tensor is a 1x1
/// matrix. Copies share the underlying node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_matrix(const Eigen::Ref<const Matrix>& m, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index size() const { return static_cast<Index>(node_->value.size()); }
  Index rows() const { return node_->rows(); }
  Index cols() const { return node_->cols(); }

  ConstMatrixMap value() const { return node_->value_matrix(); }
  /// Mutable view of a leaf's storage (parameter updates, perturbation in
  /// finite-difference checks). Mutating a non-leaf invalidates its graph.
  MatrixMap mutable_value() const { return {node_->value.data(), rows(), cols()}; }
  const std::vector<double>& data() const { return node_->value; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient view; zeros if nothing has been accumulated yet.
  Matrix grad() const;
  void zero_grad() const { node_->grad.clear(); }

  bool is_leaf() const { return node_->parents.empty(); }
  std::uint64_t id() const { return node_->id; }

  /// Fresh leaf holding a copy of the values, detached from any graph.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

  // Records an op output. `backward` receives the output node and must
  // push gradients into `parents` through Node::accumulate.
  static Tensor make_result(Shape shape, std::vector<double> value,
                            std::vector<Tensor> parents,
                            std::function<void(detail::Node&)> backward);
  static Tensor make_result(Shape shape, const Eigen::Ref<const Matrix>& value,
                            std::vector<Tensor> parents,
                            std::function<void(detail::Node&)> backward);

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

/// Reverse sweep from a scalar loss.
///
/// Interior gradients are reset before the sweep; leaf gradients accumulate
/// across calls, so call zero_grad() on leaves between independent passes.
/// Nodes are visited once each in descending creation order.
void backward(const Tensor& loss);

}  // namespace phg2st
