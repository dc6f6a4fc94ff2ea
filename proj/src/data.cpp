#include "phg2st/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "phg2st/error.hpp"
#include "phg2st/rng.hpp"

namespace fs = std::filesystem;

namespace phg2st {

namespace {

constexpr char kFeatureMagic[4] = {'P', 'H', 'G', 'F'};
constexpr std::uint32_t kFeatureVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian; add byte swapping for this target");

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) {
    if (!field.empty() && field.back() == '\r') field.pop_back();
    out.push_back(field);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::ifstream open_input(const fs::path& file, std::ios::openmode mode = std::ios::in) {
  std::ifstream in(file, mode);
  if (!in) throw IoError("cannot open " + file.string());
  return in;
}

std::ofstream open_output(const fs::path& file, std::ios::openmode mode = std::ios::out) {
  std::ofstream out(file, mode);
  if (!out) throw IoError("cannot write " + file.string());
  return out;
}

double parse_double(const std::string& s, const fs::path& file) {
  try {
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError(file.string() + ": not a number: '" + s + "'");
  }
}

std::int64_t parse_int(const std::string& s, const fs::path& file) {
  try {
    std::size_t pos = 0;
    long long v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError(file.string() + ": not an integer: '" + s + "'");
  }
}

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const fs::path& file) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError(file.string() + ": truncated");
  return v;
}

}  // namespace

void SlideBundle::validate() const {
  const Index rows = n();
  if (coords.cols() != 2) throw ValidationError(slide_id + ": coords must be n x 2");
  if (grid.rows() != rows || spot_features.rows() != rows || counts.rows() != rows ||
      static_cast<Index>(spot_ids.size()) != rows)
    throw ValidationError(slide_id + ": spot count disagrees across coords/grid/features/counts");
  if (static_cast<Index>(gene_names.size()) != counts.cols())
    throw ValidationError(slide_id + ": gene name count " + std::to_string(gene_names.size()) +
                          " != count columns " + std::to_string(counts.cols()));
  if (!coords.allFinite()) throw ValidationError(slide_id + ": non-finite coordinates");
  if (!spot_features.allFinite()) throw ValidationError(slide_id + ": non-finite spot features");
  if ((counts.array() < 0).any()) throw ValidationError(slide_id + ": negative counts");
  std::map<std::pair<Index, Index>, Index> seen;
  for (Index i = 0; i < rows; ++i) {
    auto [it, fresh] = seen.emplace(std::pair{grid(i, 0), grid(i, 1)}, i);
    if (!fresh)
      throw ValidationError(slide_id + ": spots " + spot_ids[it->second] + " and " + spot_ids[i] +
                            " share grid position");
  }
}

// ---- features.phgf -------------------------------------------------------

Matrix read_features(const fs::path& file) {
  auto in = open_input(file, std::ios::binary);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kFeatureMagic, 4) != 0)
    throw FormatError(file.string() + ": bad magic, expected PHGF");
  const auto version = read_pod<std::uint32_t>(in, file);
  if (version != kFeatureVersion)
    throw FormatError(file.string() + ": unsupported version " + std::to_string(version));
  const auto n = read_pod<std::uint64_t>(in, file);
  const auto d = read_pod<std::uint64_t>(in, file);
  std::vector<float> raw(n * d);
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(float))))
    throw FormatError(file.string() + ": truncated payload");
  Matrix out = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                   raw.data(), static_cast<Index>(n), static_cast<Index>(d))
                   .cast<double>();
  if (!out.allFinite()) throw ValidationError(file.string() + ": non-finite feature values");
  return out;
}

void write_features(const Eigen::Ref<const Matrix>& features, const fs::path& file) {
  auto out = open_output(file, std::ios::binary);
  out.write(kFeatureMagic, 4);
  write_pod(out, kFeatureVersion);
  write_pod(out, static_cast<std::uint64_t>(features.rows()));
  write_pod(out, static_cast<std::uint64_t>(features.cols()));
  const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> f = features.cast<float>();
  out.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * sizeof(float)));
  if (!out) throw IoError("failed writing " + file.string());
}

// ---- bundle directory ----------------------------------------------------

SlideBundle load_slide_bundle(const fs::path& dir) {
  for (const char* name : {"spots.csv", "counts.csv", "genes.txt", "meta.json", "features.phgf"})
    if (!fs::exists(dir / name)) throw IoError("missing " + (dir / name).string());

  SlideBundle b;
  {
    const fs::path file = dir / "meta.json";
    auto in = open_input(file);
    try {
      const auto meta = nlohmann::json::parse(in);
      b.slide_id = meta.at("slide_id").get<std::string>();
      b.patient_id = meta.at("patient_id").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(file.string() + ": " + e.what());
    }
  }

  std::vector<std::array<double, 2>> xy;
  std::vector<std::array<Index, 2>> rc;
  {
    const fs::path file = dir / "spots.csv";
    auto in = open_input(file);
    std::string line;
    std::getline(in, line);
    if (split_csv(line) != std::vector<std::string>{"spot_id", "x", "y", "row", "col"})
      throw FormatError(file.string() + ": header must be spot_id,x,y,row,col");
    while (std::getline(in, line)) {
      if (line.empty() || line == "\r") continue;
      const auto f = split_csv(line);
      if (f.size() != 5) throw FormatError(file.string() + ": expected 5 fields in '" + line + "'");
      b.spot_ids.push_back(f[0]);
      xy.push_back({parse_double(f[1], file), parse_double(f[2], file)});
      rc.push_back({parse_int(f[3], file), parse_int(f[4], file)});
    }
  }
  const auto n = static_cast<Index>(xy.size());
  b.coords.resize(n, 2);
  b.grid.resize(n, 2);
  for (Index i = 0; i < n; ++i) {
    b.coords(i, 0) = xy[i][0];
    b.coords(i, 1) = xy[i][1];
    b.grid(i, 0) = rc[i][0];
    b.grid(i, 1) = rc[i][1];
  }

  {
    const fs::path file = dir / "counts.csv";
    auto in = open_input(file);
    std::string line;
    std::getline(in, line);
    b.gene_names = split_csv(line);
    std::vector<std::int64_t> flat;
    Index rows = 0;
    while (std::getline(in, line)) {
      if (line.empty() || line == "\r") continue;
      const auto f = split_csv(line);
      if (f.size() != b.gene_names.size())
        throw FormatError(file.string() + ": row " + std::to_string(rows + 1) + " has " +
                          std::to_string(f.size()) + " fields, header has " +
                          std::to_string(b.gene_names.size()));
      for (const auto& s : f) flat.push_back(parse_int(s, file));
      ++rows;
    }
    if (rows != n)
      throw FormatError("row-count mismatch: spots.csv has " + std::to_string(n) + " spots, counts.csv has " +
                        std::to_string(rows) + " rows");
    b.counts = Eigen::Map<CountMatrix>(flat.data(), rows, static_cast<Index>(b.gene_names.size()));
  }

  {
    const fs::path file = dir / "genes.txt";
    auto in = open_input(file);
    std::vector<std::string> genes;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) genes.push_back(line);
    }
    if (genes != b.gene_names) throw FormatError(file.string() + ": gene list disagrees with counts.csv header");
  }

  b.spot_features = read_features(dir / "features.phgf");
  if (b.spot_features.rows() != n)
    throw FormatError("row-count mismatch: spots.csv has " + std::to_string(n) + " spots, features.phgf has " +
                      std::to_string(b.spot_features.rows()) + " rows");
  b.validate();
  return b;
}

void save_slide_bundle(const SlideBundle& bundle, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  {
    auto out = open_output(dir / "meta.json");
    out << nlohmann::json{{"slide_id", bundle.slide_id}, {"patient_id", bundle.patient_id}}.dump(2) << '\n';
  }
  {
    auto out = open_output(dir / "spots.csv");
    out << "spot_id,x,y,row,col\n";
    out.precision(17);
    for (Index i = 0; i < bundle.n(); ++i)
      out << bundle.spot_ids[i] << ',' << bundle.coords(i, 0) << ',' << bundle.coords(i, 1) << ','
          << bundle.grid(i, 0) << ',' << bundle.grid(i, 1) << '\n';
  }
  {
    auto out = open_output(dir / "counts.csv");
    for (std::size_t g = 0; g < bundle.gene_names.size(); ++g) out << (g ? "," : "") << bundle.gene_names[g];
    out << '\n';
    for (Index i = 0; i < bundle.counts.rows(); ++i) {
      for (Index g = 0; g < bundle.counts.cols(); ++g) out << (g ? "," : "") << bundle.counts(i, g);
      out << '\n';
    }
  }
  {
    auto out = open_output(dir / "genes.txt");
    for (const auto& g : bundle.gene_names) out << g << '\n';
  }
  write_features(bundle.spot_features, dir / "features.phgf");
}

// ---- preprocessing -------------------------------------------------------

ExpressionMatrix normalize_counts(const CountMatrix& counts, std::span<const Index> selected,
                                  std::span<const std::string> gene_names) {
  ExpressionMatrix out;
  out.gene_index.assign(selected.begin(), selected.end());
  out.values.resize(counts.rows(), static_cast<Index>(selected.size()));
  for (Index c : selected)
    if (c < 0 || c >= counts.cols())
      throw ParameterError("normalize_counts: gene index " + std::to_string(c) + " out of range");
  for (Index i = 0; i < counts.rows(); ++i) {
    const double total = static_cast<double>(counts.row(i).sum());
    for (std::size_t j = 0; j < selected.size(); ++j) {
      out.values(i, static_cast<Index>(j)) =
          total > 0.0 ? std::log1p(static_cast<double>(counts(i, selected[j])) * 1e6 / total) : 0.0;
    }
  }
  if (!gene_names.empty())
    for (Index c : selected) out.gene_names.push_back(gene_names[static_cast<std::size_t>(c)]);
  return out;
}

std::vector<Index> select_hvg(std::span<const SlideBundle> bundles, Index k, HvgCriterion criterion) {
  if (bundles.empty()) throw ParameterError("select_hvg: no bundles");
  const auto& names = bundles.front().gene_names;
  for (const auto& b : bundles)
    if (b.gene_names != names)
      throw ValidationError("select_hvg: slide " + b.slide_id + " has a different gene panel");
  const auto m = static_cast<Index>(names.size());
  if (k < 1 || k > m) throw ParameterError("select_hvg: k=" + std::to_string(k) + " outside [1, " + std::to_string(m) + "]");

  std::vector<Index> all(static_cast<std::size_t>(m));
  std::iota(all.begin(), all.end(), Index{0});
  Vector sum = Vector::Zero(m), sum_sq = Vector::Zero(m);
  double count = 0;
  for (const auto& b : bundles) {
    Matrix v = criterion == HvgCriterion::kLogNormalizedVariance ? normalize_counts(b.counts, all).values
                                                                 : Matrix(b.counts.cast<double>());
    sum += v.colwise().sum().transpose();
    sum_sq += v.array().square().matrix().colwise().sum().transpose();
    count += static_cast<double>(v.rows());
  }
  if (count == 0) throw ParameterError("select_hvg: no spots");
  const Vector variance = (sum_sq / count - (sum / count).cwiseAbs2()).cwiseMax(0.0);

  std::stable_sort(all.begin(), all.end(), [&](Index a, Index b) {
    if (variance[a] != variance[b]) return variance[a] > variance[b];
    return names[static_cast<std::size_t>(a)] < names[static_cast<std::size_t>(b)];
  });
  all.resize(static_cast<std::size_t>(k));
  return all;
}

NeighborTensor assemble_neighbor_features(const SlideBundle& bundle) {
  const Index n = bundle.n();
  const Index d = bundle.feature_dim();
  std::map<std::pair<Index, Index>, Index> at;
  for (Index i = 0; i < n; ++i) at.emplace(std::pair{bundle.grid(i, 0), bundle.grid(i, 1)}, i);

  NeighborTensor out;
  out.values = Matrix::Zero(n * kNeighborTokens, d);
  out.valid = Eigen::Array<bool, Eigen::Dynamic, 1>::Constant(n * kNeighborTokens, false);
  constexpr Index reach = kNeighborSide / 2;
  for (Index i = 0; i < n; ++i) {
    for (Index dr = -reach; dr <= reach; ++dr) {
      for (Index dc = -reach; dc <= reach; ++dc) {
        const auto it = at.find({bundle.grid(i, 0) + dr, bundle.grid(i, 1) + dc});
        if (it == at.end()) continue;
        const Index row = i * kNeighborTokens + (dr + reach) * kNeighborSide + (dc + reach);
        out.values.row(row) = bundle.spot_features.row(it->second);
        out.valid[row] = true;
      }
    }
  }
  return out;
}

// ---- synthetic data ------------------------------------------------------

namespace {

Matrix gaussian_matrix(Index rows, Index cols, double sd, Rng& rng) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = sd * rng.normal();
  return m;
}

constexpr int kFieldWaves = 3;

}  // namespace

SyntheticSlide generate_synthetic_slide(const SynthConfig& cfg, std::uint64_t seed, std::string slide_id,
                                        std::string patient_id, const Eigen::VectorXd& latent_shift) {
  if (cfg.n_rows < 1 || cfg.n_cols < 1 || cfg.n_rows * cfg.n_cols < kNeighborTokens)
    throw ParameterError("synthetic grid must hold at least 25 spots, got " + std::to_string(cfg.n_rows) + "x" +
                         std::to_string(cfg.n_cols));
  if (cfg.d < 1 || cfg.m < 1 || cfg.latent_dim < 1) throw ParameterError("synthetic d, m, latent_dim must be >= 1");
  if (!(cfg.noise_sigma >= 0.0)) throw ParameterError("noise_sigma must be non-negative");
  if (!(cfg.library_size > 0.0)) throw ParameterError("library_size must be positive");
  if (!(cfg.expression_scale >= 0.0)) throw ParameterError("expression_scale must be non-negative");
  if (latent_shift.size() != 0 && latent_shift.size() != cfg.latent_dim)
    throw ParameterError("latent_shift must have latent_dim entries");

  Rng map_rng(cfg.map_seed);
  const Matrix to_features = gaussian_matrix(cfg.latent_dim, cfg.d, 1.0, map_rng);
  // Centred across genes and equal-norm per gene, so library-size
  // normalization removes no first-order signal and no gene is drowned by the
  // residual compositional shift.
  Matrix to_expression = gaussian_matrix(cfg.latent_dim, cfg.m, 1.0, map_rng);
  if (cfg.m > 1) to_expression.colwise() -= to_expression.rowwise().mean();
  for (Index g = 0; g < cfg.m; ++g) {
    const double norm = to_expression.col(g).norm();
    if (norm > 0) to_expression.col(g) *= cfg.expression_scale / norm;
  }

  Rng rng(seed);
  Rng field_rng = rng.split(1);
  Rng noise_rng = rng.split(2);

  const Index n = cfg.n_rows * cfg.n_cols;
  SyntheticSlide s;
  auto& b = s.bundle;
  b.slide_id = std::move(slide_id);
  b.patient_id = std::move(patient_id);
  b.coords.resize(n, 2);
  b.grid.resize(n, 2);
  for (Index r = 0; r < cfg.n_rows; ++r) {
    for (Index c = 0; c < cfg.n_cols; ++c) {
      const Index i = r * cfg.n_cols + c;
      b.spot_ids.push_back("s" + std::to_string(i));
      b.grid(i, 0) = r;
      b.grid(i, 1) = c;
      b.coords(i, 0) = (static_cast<double>(c) + 0.5) * kSpotPatchPx;
      b.coords(i, 1) = (static_cast<double>(r) + 0.5) * kSpotPatchPx;
    }
  }

  // Low-frequency field: a few plane waves per latent dimension.
  s.latent = Matrix::Zero(n, cfg.latent_dim);
  const double amp = 1.0 / std::sqrt(static_cast<double>(kFieldWaves)) * std::numbers::sqrt2;
  for (Index l = 0; l < cfg.latent_dim; ++l) {
    for (int w = 0; w < kFieldWaves; ++w) {
      const double fx = 0.5 + 1.5 * field_rng.uniform();
      const double fy = 0.5 + 1.5 * field_rng.uniform();
      const double sx = field_rng.uniform() < 0.5 ? -1.0 : 1.0;
      const double phase = 2.0 * std::numbers::pi * field_rng.uniform();
      for (Index i = 0; i < n; ++i) {
        const double u = static_cast<double>(b.grid(i, 1)) / static_cast<double>(std::max<Index>(cfg.n_cols - 1, 1));
        const double v = static_cast<double>(b.grid(i, 0)) / static_cast<double>(std::max<Index>(cfg.n_rows - 1, 1));
        s.latent(i, l) += amp * std::cos(2.0 * std::numbers::pi * (sx * fx * u + fy * v) / 2.0 + phase);
      }
    }
  }
  if (latent_shift.size() != 0) s.latent.rowwise() += latent_shift.transpose();

  b.spot_features = s.latent * to_features + gaussian_matrix(n, cfg.d, cfg.noise_sigma, noise_rng);

  // Offset so the composition sums to roughly 1e6 per spot and log1p inverts cleanly.
  const double offset = std::log(1e6 / static_cast<double>(cfg.m));
  s.expression = (s.latent * to_expression).array() + offset;
  s.expression += gaussian_matrix(n, cfg.m, cfg.noise_sigma, noise_rng);
  s.expression = s.expression.cwiseMax(0.0);

  b.counts.resize(n, cfg.m);
  for (Index i = 0; i < n; ++i) {
    const Eigen::RowVectorXd share = s.expression.row(i).array().unaryExpr([](double v) { return std::expm1(v); });
    const double total = share.sum();
    for (Index g = 0; g < cfg.m; ++g)
      b.counts(i, g) = total > 0 ? static_cast<std::int64_t>(std::llround(cfg.library_size * share[g] / total)) : 0;
  }
  for (Index g = 0; g < cfg.m; ++g) {
    std::ostringstream name;
    name << "G" << std::setw(4) << std::setfill('0') << g;
    b.gene_names.push_back(name.str());
  }
  b.validate();
  return s;
}

std::vector<SyntheticSlide> generate_synthetic_dataset(const SynthConfig& cfg, Index patients,
                                                       Index slides_per_patient, std::uint64_t seed) {
  if (patients < 1 || slides_per_patient < 1) throw ParameterError("synthetic dataset needs >= 1 patient and slide");
  std::vector<SyntheticSlide> out;
  const Rng root(seed);
  for (Index p = 0; p < patients; ++p) {
    Rng patient_rng = root.split(static_cast<std::uint64_t>(p));
    Eigen::VectorXd shift(cfg.latent_dim);
    for (Index l = 0; l < cfg.latent_dim; ++l) shift[l] = cfg.patient_shift * patient_rng.normal();
    for (Index s = 0; s < slides_per_patient; ++s) {
      const std::string pid = "P" + std::to_string(p);
      out.push_back(generate_synthetic_slide(cfg, patient_rng.split(static_cast<std::uint64_t>(s) + 1).next_u64(),
                                             pid + "_S" + std::to_string(s), pid, shift));
    }
  }
  return out;
}

// ---- heatmap -------------------------------------------------------------

void write_heatmap(std::span<const double> values, const GridMatrix& grid, const fs::path& file) {
  if (static_cast<Index>(values.size()) != grid.rows())
    throw DimensionError("write_heatmap: " + std::to_string(values.size()) + " values for " +
                         std::to_string(grid.rows()) + " spots");
  if (values.empty()) throw ParameterError("write_heatmap: no spots");
  const Index r0 = grid.col(0).minCoeff(), c0 = grid.col(1).minCoeff();
  const Index height = grid.col(0).maxCoeff() - r0 + 1;
  const Index width = grid.col(1).maxCoeff() - c0 + 1;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  std::vector<unsigned char> pixels(static_cast<std::size_t>(height * width), 0);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double t = *hi > *lo ? (values[i] - *lo) / (*hi - *lo) : 128.0 / 255.0;
    const auto level = static_cast<unsigned char>(std::lround(255.0 * t));
    const auto ii = static_cast<Index>(i);
    pixels[static_cast<std::size_t>((grid(ii, 0) - r0) * width + (grid(ii, 1) - c0))] = level;
  }
  auto out = open_output(file, std::ios::binary);
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw IoError("failed writing " + file.string());
}

GrayImage read_pgm(const fs::path& file) {
  auto in = open_input(file, std::ios::binary);
  std::string magic;
  Index width = 0, height = 0;
  int maxval = 0;
  in >> magic >> width >> height >> maxval;
  if (magic != "P5" || width <= 0 || height <= 0 || maxval != 255) throw FormatError(file.string() + ": not an 8-bit P5 PGM");
  in.get();
  std::vector<unsigned char> pixels(static_cast<std::size_t>(width * height));
  if (!in.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size())))
    throw FormatError(file.string() + ": truncated pixel data");
  GrayImage img(height, width);
  for (Index i = 0; i < img.size(); ++i) img.data()[i] = pixels[static_cast<std::size_t>(i)];
  return img;
}

}  // namespace phg2st
