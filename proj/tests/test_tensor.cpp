#include <doctest.h>

#include "gradcheck.hpp"
#include "phg2st/error.hpp"
#include "phg2st/ops.hpp"

using namespace phg2st;
using phg2st::testing::gradcheck;
using phg2st::testing::random_matrix;

namespace {

Tensor mat(std::initializer_list<std::initializer_list<double>> rows, bool grad = false) {
  const auto r = static_cast<Index>(rows.size());
  const auto c = static_cast<Index>(rows.begin()->size());
  Matrix m(r, c);
  Index i = 0;
  for (const auto& row : rows)
    for (double v : row) m.data()[i++] = v;
  return Tensor::from_matrix(m, grad);
}

}  // namespace

TEST_CASE("tensor invariants") {
  const Tensor t = Tensor::zeros({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK(t.rows() == 6);
  CHECK(t.cols() == 4);
  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(Tensor::zeros({0, 2}), DimensionError);
  CHECK(Tensor::scalar(3.5).item() == 3.5);
}

TEST_CASE("matmul") {
  const Tensor id = mat({{1, 0}, {0, 1}});
  const Tensor a = mat({{1, 2}, {3, 4}});
  CHECK(matmul(id, a).value() == a.value());
  const Matrix prod = matmul(a, mat({{5, 6}, {7, 8}})).value();
  CHECK(prod(0, 0) == 19);
  CHECK(prod(0, 1) == 22);
  CHECK(prod(1, 0) == 43);
  CHECK(prod(1, 1) == 50);

  const Tensor x = Tensor::zeros({2, 3});
  try {
    matmul(x, x);
    FAIL("expected dimension error");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("softmax") {
  const Matrix half = softmax(mat({{0, 0}}), 1).value();
  CHECK(half(0, 0) == doctest::Approx(0.5));
  const Matrix s = softmax(mat({{1, 2}}), 1).value();
  CHECK(s(0, 0) == doctest::Approx(0.2689414213699951).epsilon(1e-12));
  CHECK(s(0, 1) == doctest::Approx(0.7310585786300049).epsilon(1e-12));

  Rng rng(3);
  const Matrix x = random_matrix(5, 7, rng, -30, 30);
  const Matrix y = softmax(Tensor::from_matrix(x), 1).value();
  const Matrix shifted = softmax(Tensor::from_matrix((x.array() + 123.0).matrix()), 1).value();
  CHECK((y - shifted).cwiseAbs().maxCoeff() < 1e-12);
  for (Index r = 0; r < y.rows(); ++r) CHECK(std::abs(y.row(r).sum() - 1.0) < 1e-12);

  const Matrix cols = softmax(Tensor::from_matrix(x), 0).value();
  for (Index c = 0; c < cols.cols(); ++c) CHECK(std::abs(cols.col(c).sum() - 1.0) < 1e-12);
  CHECK_THROWS_AS(softmax(Tensor::from_matrix(x), 2), DimensionError);
}

TEST_CASE("layer_norm") {
  const Tensor g = Tensor::full({1, 3}, 1.0), b = Tensor::zeros({1, 3});
  CHECK(layer_norm(mat({{5, 5, 5}}), g, b).value().cwiseAbs().maxCoeff() == 0.0);

  const Matrix two = layer_norm(mat({{1, 3}}), Tensor::full({1, 2}, 1.0), Tensor::zeros({1, 2}), 1e-14).value();
  CHECK(two(0, 0) == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(two(0, 1) == doctest::Approx(1.0).epsilon(1e-9));

  const Matrix collapsed = layer_norm(mat({{1, 7, -2}}), Tensor::zeros({1, 3}), Tensor::full({1, 3}, 0.25)).value();
  CHECK((collapsed.array() == 0.25).all());

  Rng rng(11);
  const Matrix x = random_matrix(6, 9, rng);
  const Matrix y = layer_norm(Tensor::from_matrix(x), Tensor::full({1, 9}, 1.0), Tensor::zeros({1, 9})).value();
  for (Index r = 0; r < y.rows(); ++r) {
    CHECK(std::abs(y.row(r).mean()) < 1e-10);
    const double var = (y.row(r).array() - y.row(r).mean()).square().mean();
    // eps = 1e-5 shrinks the variance by var/(var + eps); inputs in [-2, 2]
    // over nine entries keep that within the bound.
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
  const Matrix y_tight = layer_norm(Tensor::from_matrix(x), Tensor::full({1, 9}, 1.0), Tensor::zeros({1, 9}), 1e-12).value();
  for (Index r = 0; r < y.rows(); ++r)
    CHECK(std::abs((y_tight.row(r).array() - y_tight.row(r).mean()).square().mean() - 1.0) < 1e-8);
}

TEST_CASE("gelu") {
  CHECK(gelu(Tensor::scalar(0.0)).item() == 0.0);
  CHECK(gelu(Tensor::scalar(1.0)).item() == doctest::Approx(0.8413447460685429).epsilon(1e-12));
  CHECK(std::abs(gelu(Tensor::scalar(-10.0)).item()) < 1e-6);
}

TEST_CASE("dropout") {
  Rng rng(5);
  const Tensor x = Tensor::full({100, 1000}, 1.0);
  CHECK(dropout(x, 0.0, true, rng).value() == x.value());
  CHECK(dropout(x, 0.7, false, rng).value() == x.value());
  const Matrix y = dropout(x, 0.5, true, rng).value();
  CHECK(std::abs(y.mean() - 1.0) < 0.05);
  CHECK(((y.array() == 0.0) || (y.array() == 2.0)).all());
  CHECK_THROWS_AS(dropout(x, 1.0, true, rng), ParameterError);
}

TEST_CASE("backward basics") {
  const Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
  backward(sum(x));
  CHECK(x.grad() == Matrix::Ones(1, 3));

  x.zero_grad();
  backward(sum(mul(x, x)));
  CHECK(x.grad()(0, 0) == 2);
  CHECK(x.grad()(0, 1) == 4);
  CHECK(x.grad()(0, 2) == 6);

  const Tensor s = Tensor::scalar(1.5, true);
  backward(add(s, s));
  CHECK(s.grad()(0, 0) == 2.0);

  CHECK_THROWS_AS(backward(x), ContractError);
}

TEST_CASE("backward is deterministic and revisits nothing") {
  Rng rng(21);
  const Tensor a = Tensor::from_matrix(random_matrix(4, 5, rng), true);
  const Tensor b = Tensor::from_matrix(random_matrix(5, 3, rng), true);
  const Tensor shared = gelu(matmul(a, b));
  const Tensor loss = sum(mul(softmax(shared, 1), shared)) + mean(shared);
  backward(loss);
  const Matrix ga = a.grad(), gb = b.grad();
  a.zero_grad();
  b.zero_grad();
  backward(loss);
  CHECK(a.grad() == ga);
  CHECK(b.grad() == gb);
}

TEST_CASE("finite-difference gradient of every differentiable op") {
  Rng rng(7);
  auto leaf = [&](Index r, Index c) { return Tensor::from_matrix(random_matrix(r, c, rng), true); };
  // Weighted sum keeps the upstream gradient non-uniform.
  const Tensor w35 = Tensor::from_matrix(random_matrix(3, 5, rng));
  const Tensor w34 = Tensor::from_matrix(random_matrix(3, 4, rng));
  auto probe = [](const Tensor& y, const Tensor& w) { return sum(mul(y, w)); };

  const Tensor a = leaf(3, 4), b = leaf(4, 5);
  CHECK(gradcheck({a, b}, [&] { return probe(matmul(a, b), w35); }) < 1e-4);

  const Tensor c = leaf(3, 4), d = leaf(3, 4);
  CHECK(gradcheck({c, d}, [&] { return probe(add(c, d), w34); }) < 1e-4);
  CHECK(gradcheck({c, d}, [&] { return probe(sub(c, d), w34); }) < 1e-4);
  CHECK(gradcheck({c, d}, [&] { return probe(mul(c, d), w34); }) < 1e-4);
  CHECK(gradcheck({c}, [&] { return probe(scale(c, -1.7), w34); }) < 1e-4);
  CHECK(gradcheck({c}, [&] { return probe(relu(c), w34); }) < 1e-4);
  CHECK(gradcheck({c}, [&] { return probe(gelu(c), w34); }) < 1e-4);
  CHECK(gradcheck({c}, [&] { return probe(square(c), w34); }) < 1e-4);
  CHECK(gradcheck({c}, [&] { return probe(softmax(c, 1), w34); }) < 1e-4);
  CHECK(gradcheck({c}, [&] { return probe(softmax(c, 0), w34); }) < 1e-4);
  CHECK(gradcheck({c}, [&] { return mean(c); }) < 1e-4);
  CHECK(gradcheck({c, d}, [&] { return mse(c, d); }) < 1e-4);

  const Tensor bias = leaf(1, 4);
  CHECK(gradcheck({c, bias}, [&] { return probe(add_bias(c, bias), w34); }) < 1e-4);

  const Tensor gain = leaf(1, 4), shift = leaf(1, 4);
  CHECK(gradcheck({c, gain, shift}, [&] { return probe(layer_norm(c, gain, shift), w34); }) < 1e-4);

  const Tensor w43 = Tensor::from_matrix(random_matrix(4, 3, rng));
  CHECK(gradcheck({c}, [&] { return probe(transpose(c), w43); }) < 1e-4);
  const Tensor w62 = Tensor::from_matrix(random_matrix(6, 2, rng));
  CHECK(gradcheck({c}, [&] { return probe(reshape(c, {6, 2}), w62); }) < 1e-4);
  const Tensor w32 = Tensor::from_matrix(random_matrix(3, 2, rng));
  CHECK(gradcheck({c}, [&] { return probe(slice_cols(c, 1, 2), w32); }) < 1e-4);
  const Tensor w38 = Tensor::from_matrix(random_matrix(3, 8, rng));
  CHECK(gradcheck({c, d}, [&] {
          const std::vector<Tensor> parts{c, d};
          return probe(concat_cols(parts), w38);
        }) < 1e-4);

  auto op = std::make_shared<SparseMatrix>(2, 3);
  op->insert(0, 0) = 0.5;
  op->insert(0, 2) = -1.5;
  op->insert(1, 1) = 2.0;
  const Tensor w24 = Tensor::from_matrix(random_matrix(2, 4, rng));
  CHECK(gradcheck({c}, [&] { return probe(spmm(op, c), w24); }) < 1e-4);

  // Dropout with a replayed stream has a fixed mask, hence a gradient.
  CHECK(gradcheck({c}, [&] {
          Rng r(99);
          return probe(dropout(c, 0.3, true, r), w34);
        }) < 1e-4);
}
