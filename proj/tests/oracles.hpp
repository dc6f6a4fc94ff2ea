#pragma once

#include <cmath>
#include <vector>

#include "phg2st/hypergraph.hpp"
#include "phg2st/rng.hpp"

namespace phg2st::testing {

/// Dv^-1/2 M We De^-1 M^T Dv^-1/2 X Theta as five dense matrices.
inline Matrix dense_conv(const Hypergraph& hg, const Matrix& x, const Matrix& theta) {
  const Index n = hg.n_nodes, e = hg.n_edges();
  Matrix m = Matrix::Zero(n, e);
  for (Index j = 0; j < e; ++j)
    for (Index v : hg.edges[static_cast<std::size_t>(j)]) m(v, j) = 1.0;
  const Matrix we = hg.edge_weight.asDiagonal();
  Matrix de_inv = Matrix::Zero(e, e);
  for (Index j = 0; j < e; ++j) de_inv(j, j) = 1.0 / m.col(j).sum();
  Matrix dv_isqrt = Matrix::Zero(n, n);
  for (Index i = 0; i < n; ++i) dv_isqrt(i, i) = 1.0 / std::sqrt((m.row(i) * hg.edge_weight)(0));
  return dv_isqrt * m * we * de_inv * m.transpose() * dv_isqrt * x * theta;
}

/// Random edges with every node covered at least once.
inline Hypergraph random_hypergraph(Index n, Rng& rng) {
  Hypergraph hg;
  hg.n_nodes = n;
  const Index e = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(2 * n)));
  std::vector<double> w;
  std::vector<bool> covered(static_cast<std::size_t>(n), false);
  for (Index j = 0; j < e; ++j) {
    std::vector<Index> edge;
    for (Index v = 0; v < n; ++v)
      if (rng.uniform() < 0.35) edge.push_back(v);
    if (edge.empty()) edge.push_back(static_cast<Index>(rng.below(static_cast<std::uint64_t>(n))));
    for (Index v : edge) covered[static_cast<std::size_t>(v)] = true;
    hg.edges.push_back(edge);
    w.push_back(kMinEdgeWeight + rng.uniform());
  }
  for (Index v = 0; v < n; ++v) {
    if (!covered[static_cast<std::size_t>(v)]) {
      hg.edges.push_back({v, (v + 1) % n});
      w.push_back(0.5 + rng.uniform());
    }
  }
  hg.edge_weight = Eigen::Map<Vector>(w.data(), static_cast<Index>(w.size()));
  return hg;
}

struct MetricOracle {
  long double mae = 0, pcc = 0, ccc = 0;
};

/// Direct two-pass summation with long double accumulators.
inline MetricOracle metric_oracle(const Vector& x, const Vector& y) {
  const auto n = static_cast<long double>(x.size());
  long double sx = 0, sy = 0, sa = 0;
  for (Index i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sa += std::fabs(static_cast<long double>(x[i]) - y[i]);
  }
  const long double mx = sx / n, my = sy / n;
  long double cxx = 0, cyy = 0, cxy = 0;
  for (Index i = 0; i < x.size(); ++i) {
    cxx += (x[i] - mx) * (x[i] - mx);
    cyy += (y[i] - my) * (y[i] - my);
    cxy += (x[i] - mx) * (y[i] - my);
  }
  MetricOracle o;
  o.mae = sa / n;
  o.pcc = cxy / std::sqrt(cxx * cyy);
  o.ccc = 2 * (cxy / n) / (cxx / n + cyy / n + (mx - my) * (mx - my));
  return o;
}

/// A correlated pair with a random scale spanning several decades.
inline std::pair<Vector, Vector> random_metric_pair(Rng& rng) {
  const Index n = 2 + static_cast<Index>(rng.below(60));
  Vector x(n), y(n);
  const double s = std::exp(3.0 * rng.normal());
  for (Index i = 0; i < n; ++i) {
    x[i] = s * rng.normal() + rng.normal();
    y[i] = 0.6 * x[i] + s * rng.normal();
  }
  return {x, y};
}

}  // namespace phg2st::testing
