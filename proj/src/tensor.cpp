#include "phg2st/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "phg2st/error.hpp"

namespace phg2st {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

namespace detail {

std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

Index Node::rows() const {
  if (shape.size() < 2) return 1;
  return numel(shape) / shape.back();
}

Index Node::cols() const { return shape.empty() ? 1 : shape.back(); }

void Node::accumulate(const Eigen::Ref<const Matrix>& g) {
  if (!requires_grad) return;
  if (g.rows() != rows() || g.cols() != cols())
    throw DimensionError("gradient shape " + std::to_string(g.rows()) + "x" +
                         std::to_string(g.cols()) + " does not match node " +
                         to_string(shape));
  if (grad.empty()) grad.assign(value.size(), 0.0);
  MatrixMap(grad.data(), rows(), cols()) += g;
}

}  // namespace detail

namespace {

void check_shape(const Shape& shape) {
  for (Index e : shape)
    if (e <= 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
}

}  // namespace

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  check_shape(shape);
  if (numel(shape) != static_cast<Index>(data.size()))
    throw DimensionError("data length " + std::to_string(data.size()) + " does not fill shape " +
                         to_string(shape));
  auto node = std::make_shared<detail::Node>();
  node->id = detail::next_node_id();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  check_shape(shape);
  const auto n = static_cast<std::size_t>(numel(shape));
  return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_matrix(const Eigen::Ref<const Matrix>& m, bool requires_grad) {
  std::vector<double> data(static_cast<std::size_t>(m.size()));
  MatrixMap(data.data(), m.rows(), m.cols()) = m;
  return from_data({m.rows(), m.cols()}, std::move(data), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from_data({}, {v}, requires_grad); }

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

Matrix Tensor::grad() const {
  if (node_->grad.empty()) return Matrix::Zero(rows(), cols());
  return node_->grad_matrix();
}

Tensor Tensor::detach() const { return from_data(shape(), node_->value, false); }

Tensor Tensor::make_result(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
                           std::function<void(detail::Node&)> backward) {
  Tensor out = from_data(std::move(shape), std::move(value), false);
  const bool any = std::any_of(parents.begin(), parents.end(),
                               [](const Tensor& p) { return p.requires_grad(); });
  if (any) {
    out.node_->requires_grad = true;
    out.node_->parents.reserve(parents.size());
    for (auto& p : parents) out.node_->parents.push_back(p.node_);
    out.node_->backward_fn = std::move(backward);
  }
  return out;
}

Tensor Tensor::make_result(Shape shape, const Eigen::Ref<const Matrix>& value,
                           std::vector<Tensor> parents,
                           std::function<void(detail::Node&)> backward) {
  std::vector<double> data(static_cast<std::size_t>(value.size()));
  MatrixMap(data.data(), value.rows(), value.cols()) = value;
  return make_result(std::move(shape), std::move(data), std::move(parents), std::move(backward));
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  if (!loss.requires_grad()) return;

  std::vector<detail::Node*> order;
  std::unordered_set<const detail::Node*> seen;
  std::vector<detail::Node*> stack{loss.node().get()};
  seen.insert(stack.back());
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->id > b->id; });

  for (detail::Node* n : order)
    if (!n->parents.empty()) n->grad.clear();

  loss.node()->accumulate(Matrix::Ones(1, 1));
  for (detail::Node* n : order) {
    if (n->parents.empty() || n->grad.empty() || !n->backward_fn) continue;
    n->backward_fn(*n);
  }
}

}  // namespace phg2st
