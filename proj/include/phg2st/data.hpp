#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "phg2st/tensor.hpp"

namespace phg2st {

using CountMatrix = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using GridMatrix = Eigen::Matrix<Index, Eigen::Dynamic, 2, Eigen::RowMajor>;

// Patch geometry. Spots are 224 px tiles; the neighbourhood is a 1120 px
// window split into a 5x5 grid of spot-sized tiles, so on the spot lattice it
// spans offsets -2..+2 in row and column.
inline constexpr int kSpotPatchPx = 224;
inline constexpr int kNeighborhoodPx = 1120;
inline constexpr Index kNeighborSide = kNeighborhoodPx / kSpotPatchPx;
inline constexpr Index kNeighborTokens = kNeighborSide * kNeighborSide;
inline constexpr Index kCenterToken = kNeighborTokens / 2;

/// One slide: spot geometry, histology features and raw counts.
struct SlideBundle {
  std::string slide_id;
  std::string patient_id;
  std::vector<std::string> spot_ids;
  Matrix coords;          // n x 2, pixel centres (x, y)
  GridMatrix grid;        // n x 2, array (row, col)
  Matrix spot_features;   // n x d
  CountMatrix counts;     // n x m_raw
  std::vector<std::string> gene_names;

  Index n() const { return coords.rows(); }
  Index feature_dim() const { return spot_features.cols(); }
  Index raw_gene_count() const { return counts.cols(); }

  /// Throws ValidationError on any broken invariant.
  void validate() const;
};

/// Features of the 5x5 lattice window around each spot, flattened so that
/// row i*25 + slot holds token `slot` of spot i. Slot 12 is the spot itself.
struct NeighborTensor {
  Matrix values;                          // (n*25) x d
  Eigen::Array<bool, Eigen::Dynamic, 1> valid;  // n*25

  Index spots() const { return values.rows() / kNeighborTokens; }
  Index dim() const { return values.cols(); }
  auto token(Index spot, Index slot) const { return values.row(spot * kNeighborTokens + slot); }
  bool is_valid(Index spot, Index slot) const { return valid[spot * kNeighborTokens + slot]; }
};

/// Log-normalized expression restricted to a selected gene panel.
struct ExpressionMatrix {
  Matrix values;                   // n x m
  std::vector<Index> gene_index;   // columns of the raw count matrix
  std::vector<std::string> gene_names;

  Index genes() const { return values.cols(); }
};

// ---- on-disk bundle ------------------------------------------------------

SlideBundle load_slide_bundle(const std::filesystem::path& dir);
void save_slide_bundle(const SlideBundle& bundle, const std::filesystem::path& dir);

Matrix read_features(const std::filesystem::path& file);
void write_features(const Eigen::Ref<const Matrix>& features, const std::filesystem::path& file);

// ---- preprocessing -------------------------------------------------------

/// ln(1 + count * 1e6 / total) where total sums every raw gene of the spot.
/// Zero-total spots map to zero rows.
ExpressionMatrix normalize_counts(const CountMatrix& counts, std::span<const Index> selected,
                                  std::span<const std::string> gene_names = {});

enum class HvgCriterion { kLogNormalizedVariance, kRawVariance };

/// Top-k genes by pooled variance, highest first; ties go to the
/// lexicographically smaller gene name.
std::vector<Index> select_hvg(std::span<const SlideBundle> bundles, Index k,
                              HvgCriterion criterion = HvgCriterion::kLogNormalizedVariance);

NeighborTensor assemble_neighbor_features(const SlideBundle& bundle);

// ---- synthetic data ------------------------------------------------------

struct SynthConfig {
  Index n_rows = 10;
  Index n_cols = 10;
  Index d = 16;
  Index m = 20;
  Index latent_dim = 4;
  double noise_sigma = 0.1;
  /// Seeds the latent->feature and latent->expression maps shared by every
  /// slide of a dataset.
  std::uint64_t map_seed = 1;
  double library_size = 50000.0;
  /// Per-gene standard deviation of the latent contribution to log-expression.
  double expression_scale = 0.6;
  /// Per-patient latent shift scale (between-patient domain shift).
  double patient_shift = 0.3;
};

struct SyntheticSlide {
  SlideBundle bundle;
  Matrix latent;      // n x latent_dim
  Matrix expression;  // n x m designed log-expression field before count rounding
};

/// Smooth latent field over the grid; features = L*A + noise, log-expression
/// = offset + L*B + noise, counts rounded from that composition.
SyntheticSlide generate_synthetic_slide(const SynthConfig& cfg, std::uint64_t seed,
                                        std::string slide_id = "slide0",
                                        std::string patient_id = "patient0",
                                        const Eigen::VectorXd& latent_shift = {});

/// `patients` x `slides_per_patient` slides. Slides of one patient share a
/// latent shift.
std::vector<SyntheticSlide> generate_synthetic_dataset(const SynthConfig& cfg, Index patients,
                                                       Index slides_per_patient, std::uint64_t seed);

// ---- visualization -------------------------------------------------------

/// Binary PGM, one pixel per lattice position, min-max scaled to 0..255.
/// Constant input renders mid-gray (128); lattice holes are black.
void write_heatmap(std::span<const double> values, const GridMatrix& grid,
                   const std::filesystem::path& file);

using GrayImage = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
GrayImage read_pgm(const std::filesystem::path& file);

}  // namespace phg2st
