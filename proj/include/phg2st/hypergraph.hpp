#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include "phg2st/data.hpp"
#include "phg2st/error.hpp"
#include "phg2st/ops.hpp"

namespace phg2st {

enum class AffinityKind { kFeature, kPositional, kCombined };

/// Symmetric pairwise distance matrix with zero diagonal.
struct AffinityMatrix {
  Matrix values;
  AffinityKind kind = AffinityKind::kFeature;

  Index size() const { return values.rows(); }
};

/// How each distance matrix is rescaled before the two are summed.
enum class DistanceNorm { kMinMax, kZScore };
/// kAffinity: w = 1 - mean normalized distance; kDistance: w = mean distance.
enum class EdgeWeightMode { kAffinity, kDistance };

inline constexpr double kMinEdgeWeight = 1e-3;

struct HypergraphOptions {
  Index k = 4;
  DistanceNorm norm = DistanceNorm::kMinMax;
  EdgeWeightMode weight_mode = EdgeWeightMode::kAffinity;
};

/// Node/hyperedge incidence. Edge e lists its members with the centroid
/// first; edge weights are positive.
struct Hypergraph {
  Index n_nodes = 0;
  std::vector<std::vector<Index>> edges;
  Vector edge_weight;

  Index n_edges() const { return static_cast<Index>(edges.size()); }
  /// n_nodes x n_edges 0/1 matrix.
  Eigen::SparseMatrix<double> membership() const;
  Eigen::VectorXi node_degree() const;
  Eigen::VectorXi edge_degree() const;
  void validate() const;
};

template <typename Derived>
AffinityMatrix pairwise_feature_distance(const Eigen::MatrixBase<Derived>& features) {
  const Index n = features.rows();
  if (n < 2) throw ParameterError("pairwise_feature_distance: need at least 2 rows, got " + std::to_string(n));
  const Matrix x = features.template cast<double>();
  AffinityMatrix out{Matrix::Zero(n, n), AffinityKind::kFeature};
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) out.values(i, j) = out.values(j, i) = (x.row(i) - x.row(j)).norm();
  return out;
}

/// Euclidean distance after per-axis min-max scaling of the coordinates to
/// [0, 1]. A constant axis maps to 0.
template <typename Derived>
AffinityMatrix pairwise_position_distance(const Eigen::MatrixBase<Derived>& coords) {
  const Index n = coords.rows();
  if (coords.cols() != 2) throw DimensionError("pairwise_position_distance: coords must be n x 2");
  Matrix scaled = coords.template cast<double>();
  for (Index a = 0; a < 2; ++a) {
    const double lo = scaled.col(a).minCoeff();
    const double span = scaled.col(a).maxCoeff() - lo;
    if (span > 0)
      scaled.col(a) = (scaled.col(a).array() - lo) / span;
    else
      scaled.col(a).setZero();
  }
  AffinityMatrix out{Matrix::Zero(n, n), AffinityKind::kPositional};
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) out.values(i, j) = out.values(j, i) = (scaled.row(i) - scaled.row(j)).norm();
  return out;
}

/// Rescale using off-diagonal statistics only; diagonal stays 0. `mask`
/// restricts which nodes contribute (empty = all).
Matrix normalize_distances(const Eigen::Ref<const Matrix>& d, DistanceNorm norm,
                           std::span<const bool> mask = {});

/// Combined distance C = Norm(sim) + Norm(pos).
AffinityMatrix combine_distances(const AffinityMatrix& sim, const AffinityMatrix& pos, DistanceNorm norm);

/// One hyperedge per node: the node plus its k nearest neighbours under the
/// combined distance (ties to the lower index).
Hypergraph build_incidence(const AffinityMatrix& sim, const AffinityMatrix& pos, const HypergraphOptions& opts);

/// One 25-node hypergraph per spot over its lattice window, built from
/// feature distances between valid tokens. Invalid tokens only get a
/// self-loop of weight kMinEdgeWeight.
std::vector<Hypergraph> build_neighbor_subhypergraphs(const NeighborTensor& neighbors, const HypergraphOptions& opts);

/// Block-diagonal union; node ids of graph g are offset by the node counts
/// of graphs before it.
Hypergraph disjoint_union(std::span<const Hypergraph> graphs);

/// Dv^-1/2 M We De^-1 M^T Dv^-1/2 with Dv the weighted node degree and De the
/// edge cardinality.
std::shared_ptr<const SparseMatrix> propagation_operator(const Hypergraph& hg);

/// Hypergraph convolution: propagation_operator(hg) * x * theta.
Tensor hypergraph_conv(const Tensor& x, const SparseMatrix& propagation, const Tensor& theta);
Tensor hypergraph_conv(const Tensor& x, std::shared_ptr<const SparseMatrix> propagation, const Tensor& theta);
Tensor hypergraph_conv(const Tensor& x, const Hypergraph& hg, const Tensor& theta);

/// Dropout(LayerNorm(ReLU(hypergraph_conv(x)))).
Tensor wrap_conv_block(const Tensor& x, std::shared_ptr<const SparseMatrix> propagation, const Tensor& theta,
                       const Tensor& ln_gain, const Tensor& ln_bias, double p_drop, bool training, Rng& rng);

/// Debug dump: edge_id,node_id,weight per membership.
void write_hypergraph_csv(const Hypergraph& hg, const std::filesystem::path& file);

}  // namespace phg2st
