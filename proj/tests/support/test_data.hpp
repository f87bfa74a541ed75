#ifndef ICE_TESTS_TEST_DATA_HPP
#define ICE_TESTS_TEST_DATA_HPP

// Seeded generators shared by the unit and acceptance suites.

#include "ice/ice.hpp"

#include <filesystem>
#include <random>
#include <string>

namespace ice::testing {

inline Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double lo = 0.0,
                             double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

inline Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> d(0.0, sd);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

inline FeatureMapBatch random_batch(std::size_t n, std::size_t h, std::size_t w, std::size_t c, std::mt19937_64& rng) {
  const Matrix v = uniform_matrix(static_cast<Eigen::Index>(n * h * w), static_cast<Eigen::Index>(c), rng);
  return unflatten(v, n, h, w, true);
}

inline ClassifierHead random_head(Eigen::Index c, Eigen::Index k, std::mt19937_64& rng) {
  const Matrix w = gaussian_matrix(c, k, rng, 0.5);
  const Vector b = gaussian_matrix(k, 1, rng, 0.1);
  return ClassifierHead(w, b);
}

/// Feature maps built from a fixed set of non-negative concepts: per-position
/// sparse non-negative mixtures of `concepts` basis rows plus |noise|.
struct SyntheticConcepts {
  Matrix basis;  // concepts x c
  FeatureMapBatch train;
  FeatureMapBatch eval;
};

inline FeatureMapBatch concept_maps(const Matrix& basis, std::size_t n, std::size_t h, std::size_t w, double noise,
                                    std::mt19937_64& rng) {
  const auto m = static_cast<Eigen::Index>(n * h * w);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, noise);
  Matrix s = Matrix::Zero(m, basis.rows());
  for (Eigen::Index r = 0; r < m; ++r)
    for (Eigen::Index j = 0; j < basis.rows(); ++j)
      if (unit(rng) < 0.3) s(r, j) = unit(rng);
  Matrix v = s * basis;
  for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] += std::abs(gauss(rng));
  return unflatten(v, n, h, w, true);
}

inline SyntheticConcepts synthetic_concepts(Eigen::Index concepts, Eigen::Index channels, std::size_t n_train,
                                            std::size_t n_eval, std::size_t h, std::size_t w, double noise,
                                            std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Matrix basis = Matrix::Zero(concepts, channels);
  for (Eigen::Index i = 0; i < basis.size(); ++i) {
    if (unit(rng) < 0.4) basis.data()[i] = unit(rng);
  }
  for (Eigen::Index j = 0; j < concepts; ++j) basis(j, j % channels) += 0.5;
  auto train = concept_maps(basis, n_train, h, w, noise, rng);
  auto eval = concept_maps(basis, n_eval, h, w, noise, rng);
  return {basis, std::move(train), std::move(eval)};
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::mt19937_64 rng(std::random_device{}());
    path_ = std::filesystem::temp_directory_path() / ("ice_" + tag + "_" + std::to_string(rng()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline double relative_gap(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

}  // namespace ice::testing

#endif  // ICE_TESTS_TEST_DATA_HPP
