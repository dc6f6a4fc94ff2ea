#include "phg2st/hypergraph.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

namespace phg2st {

Eigen::SparseMatrix<double> Hypergraph::membership() const {
  std::vector<Eigen::Triplet<double>> trip;
  for (Index e = 0; e < n_edges(); ++e)
    for (Index v : edges[static_cast<std::size_t>(e)]) trip.emplace_back(v, e, 1.0);
  Eigen::SparseMatrix<double> m(n_nodes, n_edges());
  m.setFromTriplets(trip.begin(), trip.end());
  return m;
}

Eigen::VectorXi Hypergraph::node_degree() const {
  Eigen::VectorXi deg = Eigen::VectorXi::Zero(n_nodes);
  for (const auto& e : edges)
    for (Index v : e) ++deg[v];
  return deg;
}

Eigen::VectorXi Hypergraph::edge_degree() const {
  Eigen::VectorXi deg(n_edges());
  for (Index e = 0; e < n_edges(); ++e) deg[e] = static_cast<int>(edges[static_cast<std::size_t>(e)].size());
  return deg;
}

void Hypergraph::validate() const {
  if (edge_weight.size() != n_edges()) throw ValidationError("hypergraph: one weight per edge required");
  for (Index e = 0; e < n_edges(); ++e) {
    const auto& members = edges[static_cast<std::size_t>(e)];
    if (members.empty()) throw ValidationError("hypergraph: empty edge " + std::to_string(e));
    for (Index v : members)
      if (v < 0 || v >= n_nodes) throw ValidationError("hypergraph: node id out of range in edge " + std::to_string(e));
    if (!(edge_weight[e] > 0.0)) throw ValidationError("hypergraph: non-positive weight on edge " + std::to_string(e));
  }
  if ((node_degree().array() == 0).any()) throw ValidationError("hypergraph: isolated node");
}

Matrix normalize_distances(const Eigen::Ref<const Matrix>& d, DistanceNorm norm, std::span<const bool> mask) {
  const Index n = d.rows();
  auto included = [&](Index i) { return mask.empty() || mask[static_cast<std::size_t>(i)]; };
  double lo = std::numeric_limits<double>::infinity(), hi = -lo, s = 0, s2 = 0, count = 0;
  for (Index i = 0; i < n; ++i) {
    if (!included(i)) continue;
    for (Index j = 0; j < n; ++j) {
      if (i == j || !included(j)) continue;
      const double v = d(i, j);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      s += v;
      s2 += v * v;
      ++count;
    }
  }
  Matrix out = Matrix::Zero(n, n);
  if (count == 0) return out;
  double shift = 0, div = 1;
  if (norm == DistanceNorm::kMinMax) {
    shift = lo;
    div = hi - lo;
  } else {
    shift = s / count;
    div = std::sqrt(std::max(s2 / count - shift * shift, 0.0));
  }
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j)
      if (i != j) out(i, j) = div > 0 ? (d(i, j) - shift) / div : 0.0;
  return out;
}

AffinityMatrix combine_distances(const AffinityMatrix& sim, const AffinityMatrix& pos, DistanceNorm norm) {
  if (sim.size() != pos.size())
    throw DimensionError("combine_distances: " + std::to_string(sim.size()) + " vs " + std::to_string(pos.size()) + " nodes");
  return {normalize_distances(sim.values, norm) + normalize_distances(pos.values, norm), AffinityKind::kCombined};
}

namespace {

double edge_weight_from(double mean_distance, EdgeWeightMode mode) {
  const double w = mode == EdgeWeightMode::kAffinity ? 1.0 - mean_distance : mean_distance;
  return mode == EdgeWeightMode::kAffinity ? std::clamp(w, kMinEdgeWeight, 1.0) : std::max(w, kMinEdgeWeight);
}

// k nearest by (distance, index) among candidates, excluding `self`.
std::vector<Index> nearest(const Eigen::Ref<const Matrix>& c, Index self, Index k, std::span<const bool> allowed) {
  std::vector<Index> cand;
  for (Index j = 0; j < c.cols(); ++j)
    if (j != self && (allowed.empty() || allowed[static_cast<std::size_t>(j)])) cand.push_back(j);
  const auto take = std::min<std::size_t>(static_cast<std::size_t>(k), cand.size());
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cand.end(), [&](Index a, Index b) {
    if (c(self, a) != c(self, b)) return c(self, a) < c(self, b);
    return a < b;
  });
  cand.resize(take);
  return cand;
}

void add_knn_edge(Hypergraph& hg, const Eigen::Ref<const Matrix>& c, Index self, Index k, EdgeWeightMode mode,
                  std::span<const bool> allowed, std::vector<double>& weights) {
  const auto members = nearest(c, self, k, allowed);
  std::vector<Index> edge{self};
  double total = 0;
  for (Index j : members) {
    edge.push_back(j);
    total += c(self, j);
  }
  weights.push_back(members.empty() ? kMinEdgeWeight
                                    : edge_weight_from(total / static_cast<double>(members.size()), mode));
  hg.edges.push_back(std::move(edge));
}

}  // namespace

Hypergraph build_incidence(const AffinityMatrix& sim, const AffinityMatrix& pos, const HypergraphOptions& opts) {
  const Index n = sim.size();
  if (opts.k < 1 || opts.k >= n)
    throw ParameterError("build_incidence: k=" + std::to_string(opts.k) + " must satisfy 1 <= k < n=" + std::to_string(n));
  const AffinityMatrix combined = combine_distances(sim, pos, opts.norm);
  Hypergraph hg;
  hg.n_nodes = n;
  std::vector<double> weights;
  for (Index i = 0; i < n; ++i) add_knn_edge(hg, combined.values, i, opts.k, opts.weight_mode, {}, weights);
  hg.edge_weight = Eigen::Map<Vector>(weights.data(), static_cast<Index>(weights.size()));
  return hg;
}

std::vector<Hypergraph> build_neighbor_subhypergraphs(const NeighborTensor& neighbors, const HypergraphOptions& opts) {
  if (opts.k < 1) throw ParameterError("build_neighbor_subhypergraphs: k must be >= 1");
  std::vector<Hypergraph> out;
  out.reserve(static_cast<std::size_t>(neighbors.spots()));
  for (Index s = 0; s < neighbors.spots(); ++s) {
    const auto tokens = neighbors.values.middleRows(s * kNeighborTokens, kNeighborTokens);
    std::array<bool, kNeighborTokens> valid{};
    for (Index t = 0; t < kNeighborTokens; ++t) valid[static_cast<std::size_t>(t)] = neighbors.is_valid(s, t);

    Matrix dist = Matrix::Zero(kNeighborTokens, kNeighborTokens);
    for (Index i = 0; i < kNeighborTokens; ++i)
      for (Index j = i + 1; j < kNeighborTokens; ++j) dist(i, j) = dist(j, i) = (tokens.row(i) - tokens.row(j)).norm();
    const Matrix c = normalize_distances(dist, opts.norm, valid);

    Hypergraph hg;
    hg.n_nodes = kNeighborTokens;
    std::vector<double> weights;
    for (Index t = 0; t < kNeighborTokens; ++t) {
      if (valid[static_cast<std::size_t>(t)]) {
        add_knn_edge(hg, c, t, opts.k, opts.weight_mode, valid, weights);
      } else {
        hg.edges.push_back({t});
        weights.push_back(kMinEdgeWeight);
      }
    }
    hg.edge_weight = Eigen::Map<Vector>(weights.data(), static_cast<Index>(weights.size()));
    out.push_back(std::move(hg));
  }
  return out;
}

Hypergraph disjoint_union(std::span<const Hypergraph> graphs) {
  Hypergraph out;
  std::vector<double> weights;
  for (const auto& g : graphs) {
    for (Index e = 0; e < g.n_edges(); ++e) {
      std::vector<Index> edge = g.edges[static_cast<std::size_t>(e)];
      for (Index& v : edge) v += out.n_nodes;
      out.edges.push_back(std::move(edge));
      weights.push_back(g.edge_weight[e]);
    }
    out.n_nodes += g.n_nodes;
  }
  out.edge_weight = Eigen::Map<Vector>(weights.data(), static_cast<Index>(weights.size()));
  return out;
}

std::shared_ptr<const SparseMatrix> propagation_operator(const Hypergraph& hg) {
  hg.validate();
  Vector dv = Vector::Zero(hg.n_nodes);
  for (Index e = 0; e < hg.n_edges(); ++e)
    for (Index v : hg.edges[static_cast<std::size_t>(e)]) dv[v] += hg.edge_weight[e];
  const Vector dv_isqrt = dv.cwiseSqrt().cwiseInverse();

  std::vector<Eigen::Triplet<double>> trip;
  for (Index e = 0; e < hg.n_edges(); ++e) {
    const auto& members = hg.edges[static_cast<std::size_t>(e)];
    const double scale = hg.edge_weight[e] / static_cast<double>(members.size());
    for (Index u : members)
      for (Index v : members) trip.emplace_back(u, v, scale * dv_isqrt[u] * dv_isqrt[v]);
  }
  auto op = std::make_shared<SparseMatrix>(hg.n_nodes, hg.n_nodes);
  op->setFromTriplets(trip.begin(), trip.end());
  op->makeCompressed();
  return op;
}

Tensor hypergraph_conv(const Tensor& x, std::shared_ptr<const SparseMatrix> propagation, const Tensor& theta) {
  if (x.cols() != theta.rows())
    throw DimensionError("hypergraph_conv: features " + to_string(x.shape()) + " vs theta " + to_string(theta.shape()));
  return matmul(spmm(std::move(propagation), x), theta);
}

Tensor hypergraph_conv(const Tensor& x, const SparseMatrix& propagation, const Tensor& theta) {
  return hypergraph_conv(x, std::make_shared<const SparseMatrix>(propagation), theta);
}

Tensor hypergraph_conv(const Tensor& x, const Hypergraph& hg, const Tensor& theta) {
  if (hg.n_nodes != x.rows())
    throw DimensionError("hypergraph_conv: " + std::to_string(hg.n_nodes) + " nodes but features " + to_string(x.shape()));
  return hypergraph_conv(x, propagation_operator(hg), theta);
}

Tensor wrap_conv_block(const Tensor& x, std::shared_ptr<const SparseMatrix> propagation, const Tensor& theta,
                       const Tensor& ln_gain, const Tensor& ln_bias, double p_drop, bool training, Rng& rng) {
  return dropout(layer_norm(relu(hypergraph_conv(x, std::move(propagation), theta)), ln_gain, ln_bias), p_drop,
                 training, rng);
}

void write_hypergraph_csv(const Hypergraph& hg, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw IoError("cannot write " + file.string());
  out << "edge_id,node_id,weight\n";
  out.precision(17);
  for (Index e = 0; e < hg.n_edges(); ++e)
    for (Index v : hg.edges[static_cast<std::size_t>(e)]) out << e << ',' << v << ',' << hg.edge_weight[e] << '\n';
}

}  // namespace phg2st
