#include "phg2st/ops.hpp"

#include <cmath>
#include <numbers>

#include "phg2st/error.hpp"

namespace phg2st {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
}

Shape matrix_shape(Index r, Index c) { return {r, c}; }

double normal_cdf(double x) { return 0.5 * std::erfc(-x * std::numbers::sqrt2 / 2.0); }

double normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows() || a.rank() > 2 || b.rank() > 2)
    throw DimensionError("matmul: cannot multiply " + to_string(a.shape()) + " by " +
                         to_string(b.shape()));
  Matrix out = a.value() * b.value();
  return Tensor::make_result(matrix_shape(a.rows(), b.cols()), out, {a, b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto g = self.grad_matrix();
    if (pa.requires_grad) pa.accumulate(g * pb.value_matrix().transpose());
    if (pb.requires_grad) pb.accumulate(pa.value_matrix().transpose() * g);
  });
}

Tensor spmm(std::shared_ptr<const SparseMatrix> op, const Tensor& x) {
  if (op->cols() != x.rows())
    throw DimensionError("spmm: operator is " + std::to_string(op->rows()) + "x" +
                         std::to_string(op->cols()) + " but input is " + to_string(x.shape()));
  Matrix out = (*op) * x.value();
  return Tensor::make_result(matrix_shape(op->rows(), x.cols()), out, {x},
                             [op](detail::Node& self) {
                               self.parents[0]->accumulate(op->transpose() * self.grad_matrix());
                             });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Matrix out = a.value() + b.value();
  return Tensor::make_result(a.shape(), out, {a, b}, [](detail::Node& self) {
    self.parents[0]->accumulate(self.grad_matrix());
    self.parents[1]->accumulate(self.grad_matrix());
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Matrix out = a.value() - b.value();
  return Tensor::make_result(a.shape(), out, {a, b}, [](detail::Node& self) {
    self.parents[0]->accumulate(self.grad_matrix());
    self.parents[1]->accumulate(-self.grad_matrix());
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Matrix out = a.value().cwiseProduct(b.value());
  return Tensor::make_result(a.shape(), out, {a, b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto g = self.grad_matrix();
    if (pa.requires_grad) pa.accumulate(g.cwiseProduct(pb.value_matrix()));
    if (pb.requires_grad) pb.accumulate(g.cwiseProduct(pa.value_matrix()));
  });
}

Tensor scale(const Tensor& a, double factor) {
  Matrix out = a.value() * factor;
  return Tensor::make_result(a.shape(), out, {a}, [factor](detail::Node& self) {
    self.parents[0]->accumulate(self.grad_matrix() * factor);
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.size() != x.cols())
    throw DimensionError("add_bias: bias " + to_string(bias.shape()) + " does not match " +
                         to_string(x.shape()));
  const Eigen::Map<const Eigen::RowVectorXd> b(bias.data().data(), bias.size());
  Matrix out = x.value().rowwise() + b;
  return Tensor::make_result(x.shape(), out, {x, bias}, [](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto g = self.grad_matrix();
    px.accumulate(g);
    if (pb.requires_grad) {
      Matrix col_sum = g.colwise().sum();
      pb.accumulate(col_sum.reshaped<Eigen::RowMajor>(pb.rows(), pb.cols()));
    }
  });
}

Tensor relu(const Tensor& x) {
  Matrix out = x.value().cwiseMax(0.0);
  return Tensor::make_result(x.shape(), out, {x}, [](detail::Node& self) {
    auto& px = *self.parents[0];
    Matrix g = self.grad_matrix();
    const auto v = px.value_matrix();
    for (Index i = 0; i < g.size(); ++i)
      if (v.data()[i] <= 0.0) g.data()[i] = 0.0;
    px.accumulate(g);
  });
}

Tensor gelu(const Tensor& x) {
  Matrix out = x.value().unaryExpr([](double v) { return v * normal_cdf(v); });
  return Tensor::make_result(x.shape(), out, {x}, [](detail::Node& self) {
    auto& px = *self.parents[0];
    const Matrix d = px.value_matrix().unaryExpr(
        [](double v) { return normal_cdf(v) + v * normal_pdf(v); });
    px.accumulate(self.grad_matrix().cwiseProduct(d));
  });
}

Tensor square(const Tensor& x) {
  Matrix out = x.value().array().square();
  return Tensor::make_result(x.shape(), out, {x}, [](detail::Node& self) {
    auto& px = *self.parents[0];
    px.accumulate(2.0 * self.grad_matrix().cwiseProduct(px.value_matrix()));
  });
}

Tensor softmax(const Tensor& x, Index axis) {
  const Index last = x.rank() == 0 ? 0 : x.rank() - 1;
  if (axis < 0 || axis > last)
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         to_string(x.shape()));
  if (axis != last) {
    if (x.rank() != 2) throw DimensionError("softmax: only the last axis is supported for rank > 2");
    return transpose(softmax(transpose(x), 1));
  }
  Matrix out = x.value();
  for (Index r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    row.array() = (row.array() - row.maxCoeff()).exp();
    row /= row.sum();
  }
  // Backward reads the output values, stored on the result node itself.
  return Tensor::make_result(x.shape(), out, {x}, [](detail::Node& self) {
    const auto y = self.value_matrix();
    const auto g = self.grad_matrix();
    Matrix gx(y.rows(), y.cols());
    for (Index r = 0; r < y.rows(); ++r) {
      const double dot = g.row(r).dot(y.row(r));
      gx.row(r) = y.row(r).cwiseProduct((g.row(r).array() - dot).matrix());
    }
    self.parents[0]->accumulate(gx);
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const Index n = x.cols();
  if (n < 1) throw DimensionError("layer_norm: empty normalized axis");
  if (gain.size() != n || bias.size() != n)
    throw DimensionError("layer_norm: affine params must have " + std::to_string(n) + " entries");
  if (!(eps > 0.0)) throw ParameterError("layer_norm: eps must be positive");

  const auto xv = x.value();
  Matrix xhat(xv.rows(), n);
  Vector inv_std(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std[r];
  }
  const Eigen::Map<const Eigen::RowVectorXd> g(gain.data().data(), n);
  const Eigen::Map<const Eigen::RowVectorXd> b(bias.data().data(), n);
  Matrix out = (xhat.array().rowwise() * g.array()).rowwise() + b.array();

  return Tensor::make_result(
      x.shape(), out, {x, gain, bias},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), n](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto gy = self.grad_matrix();
        if (pg.requires_grad) {
          Matrix dg = gy.cwiseProduct(xhat).colwise().sum();
          pg.accumulate(dg.reshaped<Eigen::RowMajor>(pg.rows(), pg.cols()));
        }
        if (pb.requires_grad) {
          Matrix db = gy.colwise().sum();
          pb.accumulate(db.reshaped<Eigen::RowMajor>(pb.rows(), pb.cols()));
        }
        if (px.requires_grad) {
          const Eigen::Map<const Eigen::RowVectorXd> gain_row(pg.value.data(), n);
          Matrix dxhat = gy.array().rowwise() * gain_row.array();
          Matrix dx(gy.rows(), n);
          for (Index r = 0; r < gy.rows(); ++r) {
            const double m1 = dxhat.row(r).mean();
            const double m2 = dxhat.row(r).dot(xhat.row(r)) / static_cast<double>(n);
            dx.row(r) = inv_std[r] * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2).matrix();
          }
          px.accumulate(dx);
        }
      });
}

Tensor dropout(const Tensor& x, double p, bool training, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ParameterError("dropout: p must lie in [0, 1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  Matrix mask(x.rows(), x.cols());
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng.uniform() < p ? 0.0 : keep_scale;
  Matrix out = x.value().cwiseProduct(mask);
  return Tensor::make_result(x.shape(), out, {x}, [mask = std::move(mask)](detail::Node& self) {
    self.parents[0]->accumulate(self.grad_matrix().cwiseProduct(mask));
  });
}

Tensor sum(const Tensor& x) {
  const double s = x.value().sum();
  return Tensor::make_result({}, std::vector<double>{s}, {x}, [](detail::Node& self) {
    auto& px = *self.parents[0];
    px.accumulate(Matrix::Constant(px.rows(), px.cols(), self.grad[0]));
  });
}

Tensor mean(const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.size());
  const double m = x.value().sum() * inv;
  return Tensor::make_result({}, std::vector<double>{m}, {x}, [inv](detail::Node& self) {
    auto& px = *self.parents[0];
    px.accumulate(Matrix::Constant(px.rows(), px.cols(), self.grad[0] * inv));
  });
}

Tensor mse(const Tensor& a, const Tensor& b) { return mean(square(sub(a, b))); }

Tensor transpose(const Tensor& x) {
  if (x.rank() > 2) throw DimensionError("transpose: rank > 2 tensor " + to_string(x.shape()));
  Matrix out = x.value().transpose();
  return Tensor::make_result(matrix_shape(x.cols(), x.rows()), out, {x}, [](detail::Node& self) {
    self.parents[0]->accumulate(self.grad_matrix().transpose());
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size())
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  return Tensor::make_result(std::move(shape), x.data(), {x}, [](detail::Node& self) {
    auto& px = *self.parents[0];
    px.accumulate(ConstMatrixMap(self.grad.data(), px.rows(), px.cols()));
  });
}

Tensor slice_cols(const Tensor& x, Index begin, Index count) {
  if (begin < 0 || count <= 0 || begin + count > x.cols())
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of range for " + to_string(x.shape()));
  Matrix out = x.value().middleCols(begin, count);
  return Tensor::make_result(matrix_shape(x.rows(), count), out, {x},
                             [begin, count](detail::Node& self) {
                               auto& px = *self.parents[0];
                               Matrix g = Matrix::Zero(px.rows(), px.cols());
                               g.middleCols(begin, count) = self.grad_matrix();
                               px.accumulate(g);
                             });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
  const Index rows = parts.front().rows();
  Index cols = 0;
  std::vector<Index> offsets;
  for (const auto& p : parts) {
    if (p.rows() != rows)
      throw DimensionError("concat_cols: row mismatch " + to_string(parts.front().shape()) + " vs " +
                           to_string(p.shape()));
    offsets.push_back(cols);
    cols += p.cols();
  }
  Matrix out(rows, cols);
  for (std::size_t i = 0; i < parts.size(); ++i) out.middleCols(offsets[i], parts[i].cols()) = parts[i].value();
  std::vector<Tensor> parents(parts.begin(), parts.end());
  return Tensor::make_result(matrix_shape(rows, cols), out, std::move(parents),
                             [offsets = std::move(offsets)](detail::Node& self) {
                               const auto g = self.grad_matrix();
                               for (std::size_t i = 0; i < self.parents.size(); ++i) {
                                 auto& p = *self.parents[i];
                                 if (p.requires_grad) p.accumulate(g.middleCols(offsets[i], p.cols()));
                               }
                             });
}

}  // namespace phg2st
