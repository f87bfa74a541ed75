#ifndef ICE_REDUCERS_HPP
#define ICE_REDUCERS_HPP

// Channel reducers: NMF (multiplicative updates), PCA (SVD) and k-means (Lloyd).
// Each maps an m x c matrix of channel vectors to m x c' concept scores and back.

#include "ice/common.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <variant>
#include <vector>

namespace ice {

enum class Method { nmf, pca, kmeans };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::nmf: return "nmf";
    case Method::pca: return "pca";
    case Method::kmeans: return "kmeans";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "nmf") return Method::nmf;
  if (s == "pca") return Method::pca;
  if (s == "kmeans") return Method::kmeans;
  throw ValidationError("unknown method '" + s + "' (expected nmf, pca or kmeans)");
}

/// NMF starting point. `identity` (P = I, S = V) is only valid when c' == c.
enum class NmfInit { random_uniform, nndsvd, from_kmeans, identity };

inline std::string to_string(NmfInit i) {
  switch (i) {
    case NmfInit::random_uniform: return "random-uniform";
    case NmfInit::nndsvd: return "nndsvd";
    case NmfInit::from_kmeans: return "from-kmeans";
    case NmfInit::identity: return "identity";
  }
  return "?";
}

inline NmfInit parse_nmf_init(const std::string& s) {
  if (s == "random-uniform") return NmfInit::random_uniform;
  if (s == "nndsvd") return NmfInit::nndsvd;
  if (s == "from-kmeans") return NmfInit::from_kmeans;
  if (s == "identity") return NmfInit::identity;
  throw ValidationError("unknown NMF init '" + s + "'");
}

struct FitOptions {
  int max_iterations = 200;
  double tolerance = 1e-4;  // relative objective change that ends NMF iterations
  std::uint64_t seed = 0;
  NmfInit nmf_init = NmfInit::random_uniform;  // k-means always seeds with k-means++

  void validate() const {
    detail::require(max_iterations >= 1, "max_iterations must be at least 1");
    detail::require(tolerance > 0.0, "tolerance must be positive");
  }

  friend bool operator==(const FitOptions&, const FitOptions&) = default;
};

/// Denominator guard for multiplicative updates.
inline constexpr double kMuEpsilon = 1e-12;

struct NmfModel {
  Matrix basis;  // c' x c, rows are the non-negative concept vectors
  int iterations = 0;
  double final_objective = 0.0;  // ||V - SP||_F at the end of fitting
  FitOptions options;
  std::vector<double> objective_trace;  // initial objective, then one entry per iteration

  Eigen::Index concepts() const { return basis.rows(); }
  Eigen::Index channels() const { return basis.cols(); }
};

struct PcaModel {
  RowVector mean;                // length c
  Matrix components;             // c' x c, orthonormal rows
  Vector explained_variance;     // length c', non-increasing
  Vector singular_values;        // all singular values of the centered matrix

  Eigen::Index concepts() const { return components.rows(); }
  Eigen::Index channels() const { return components.cols(); }
};

struct KMeansModel {
  Matrix centroids;  // c' x c
  double inertia = 0.0;
  int iterations = 0;
  std::vector<double> inertia_trace;  // inertia after every assignment step

  Eigen::Index concepts() const { return centroids.rows(); }
  Eigen::Index channels() const { return centroids.cols(); }
};

using ReducerModel = std::variant<NmfModel, PcaModel, KMeansModel>;

struct NmfFit {
  NmfModel model;
  Matrix scores;  // S, m x c'
};

struct PcaFit {
  PcaModel model;
  Matrix scores;
};

struct KMeansFit {
  KMeansModel model;
  std::vector<Eigen::Index> labels;
};

namespace reducer_detail {

inline void require_non_negative(const Matrix& v) {
  if (v.size() > 0 && v.minCoeff() < 0.0) throw ValidationError("negative input: NMF requires V >= 0");
}

inline void require_concepts(const Matrix& v, Eigen::Index k) {
  const auto limit = std::min(v.rows(), v.cols());
  if (k < 1 || k > limit) {
    throw ValidationError("concept count " + std::to_string(k) + " out of range [1, " + std::to_string(limit) +
                          "] for a " + detail::shape_str(v.rows(), v.cols()) + " matrix");
  }
}

inline double objective(const Matrix& v, const Matrix& s, const Matrix& p) { return (v - s * p).norm(); }

inline bool converged(double previous, double current, double tolerance) {
  if (current == 0.0) return true;
  return std::abs(previous - current) / std::max(previous, std::numeric_limits<double>::min()) < tolerance;
}

inline void update_basis(const Matrix& v, const Matrix& s, Matrix& p) {
  const Matrix numer = s.transpose() * v;
  const Matrix denom = (s.transpose() * s) * p;
  p.array() *= numer.array() / (denom.array() + kMuEpsilon);
}

inline void update_scores(const Matrix& v, Matrix& s, const Matrix& p) {
  const Matrix numer = v * p.transpose();
  const Matrix denom = s * (p * p.transpose());
  s.array() *= numer.array() / (denom.array() + kMuEpsilon);
}

inline double squared_distance(const Eigen::Ref<const RowVector>& a, const Eigen::Ref<const RowVector>& b) {
  return (a - b).squaredNorm();
}

/// Nearest centroid per row (ties go to the lower index) and the summed squared distance.
inline double assign(const Matrix& v, const Matrix& centroids, std::vector<Eigen::Index>& labels,
                     std::vector<double>* distances = nullptr) {
  labels.assign(static_cast<std::size_t>(v.rows()), 0);
  if (distances) distances->assign(static_cast<std::size_t>(v.rows()), 0.0);
  double total = 0.0;
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    double best = std::numeric_limits<double>::infinity();
    Eigen::Index arg = 0;
    for (Eigen::Index j = 0; j < centroids.rows(); ++j) {
      const double d = squared_distance(v.row(r), centroids.row(j));
      if (d < best) {
        best = d;
        arg = j;
      }
    }
    labels[static_cast<std::size_t>(r)] = arg;
    if (distances) (*distances)[static_cast<std::size_t>(r)] = best;
    total += best;
  }
  return total;
}

inline Eigen::Index distinct_rows(const Matrix& v) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(v.rows()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  auto row_less = [&](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index c = 0; c < v.cols(); ++c) {
      if (v(a, c) != v(b, c)) return v(a, c) < v(b, c);
    }
    return false;
  };
  std::sort(order.begin(), order.end(), row_less);
  Eigen::Index count = order.empty() ? 0 : 1;
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (row_less(order[i - 1], order[i])) ++count;
  }
  return count;
}

inline Matrix kmeanspp_seeds(const Matrix& v, Eigen::Index k, std::mt19937_64& rng) {
  const auto m = v.rows();
  Matrix centers(k, v.cols());
  std::uniform_int_distribution<Eigen::Index> first(0, m - 1);
  centers.row(0) = v.row(first(rng));
  std::vector<double> d2(static_cast<std::size_t>(m));
  for (Eigen::Index r = 0; r < m; ++r) d2[static_cast<std::size_t>(r)] = squared_distance(v.row(r), centers.row(0));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (Eigen::Index j = 1; j < k; ++j) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    const double target = unit(rng) * total;
    double running = 0.0;
    Eigen::Index pick = -1;
    for (Eigen::Index r = 0; r < m; ++r) {
      running += d2[static_cast<std::size_t>(r)];
      if (running > target && d2[static_cast<std::size_t>(r)] > 0.0) {
        pick = r;
        break;
      }
    }
    if (pick < 0) {
      // rounding left target at the very end of the cumulative sum: take the last positive weight
      for (Eigen::Index r = m - 1; r >= 0; --r) {
        if (d2[static_cast<std::size_t>(r)] > 0.0) {
          pick = r;
          break;
        }
      }
    }
    centers.row(j) = v.row(pick);
    for (Eigen::Index r = 0; r < m; ++r) {
      auto& d = d2[static_cast<std::size_t>(r)];
      d = std::min(d, squared_distance(v.row(r), centers.row(j)));
    }
  }
  return centers;
}

inline Matrix random_uniform(Eigen::Index rows, Eigen::Index cols, double scale, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Matrix out(rows, cols);
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = unit(rng) * scale;
  return out;
}

/// NNDSVD with zeros filled by small random values ("NNDSVDar").
inline void nndsvd_init(const Matrix& v, Eigen::Index k, std::mt19937_64& rng, Matrix& s, Matrix& p) {
  Eigen::BDCSVD<Eigen::MatrixXd> svd(Eigen::MatrixXd(v), Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::MatrixXd& u = svd.matrixU();
  const Eigen::MatrixXd& w = svd.matrixV();
  const Eigen::VectorXd& sigma = svd.singularValues();
  s = Matrix::Zero(v.rows(), k);
  p = Matrix::Zero(k, v.cols());
  s.col(0) = std::sqrt(sigma(0)) * u.col(0).cwiseAbs();
  p.row(0) = std::sqrt(sigma(0)) * w.col(0).cwiseAbs().transpose();
  for (Eigen::Index j = 1; j < k; ++j) {
    const Eigen::VectorXd x = u.col(j), y = w.col(j);
    const Eigen::VectorXd xp = x.cwiseMax(0.0), xn = (-x).cwiseMax(0.0);
    const Eigen::VectorXd yp = y.cwiseMax(0.0), yn = (-y).cwiseMax(0.0);
    const double pos = xp.norm() * yp.norm();
    const double neg = xn.norm() * yn.norm();
    Eigen::VectorXd a, b;
    double mag;
    if (pos >= neg) {
      a = xp.norm() > 0 ? Eigen::VectorXd(xp / xp.norm()) : xp;
      b = yp.norm() > 0 ? Eigen::VectorXd(yp / yp.norm()) : yp;
      mag = pos;
    } else {
      a = xn.norm() > 0 ? Eigen::VectorXd(xn / xn.norm()) : xn;
      b = yn.norm() > 0 ? Eigen::VectorXd(yn / yn.norm()) : yn;
      mag = neg;
    }
    const double scale = std::sqrt(sigma(j) * mag);
    s.col(j) = scale * a;
    p.row(j) = scale * b.transpose();
  }
  const double fill = v.mean() / 100.0;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (s.data()[i] <= 0.0) s.data()[i] = unit(rng) * fill;
  }
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p.data()[i] <= 0.0) p.data()[i] = unit(rng) * fill;
  }
}

/// Multiplicative updates on S only. The start is the unconstrained least-squares
/// solution with entries lifted to a small positive floor, since updates cannot
/// move an exact zero.
inline Matrix solve_scores(const Matrix& v, const Matrix& p, const FitOptions& opts, int* iterations = nullptr) {
  const auto k = p.rows();
  const double mean = v.size() > 0 ? v.mean() : 0.0;
  const double floor = 1e-3 * std::sqrt(mean / static_cast<double>(k));
  const Eigen::MatrixXd gram = p * p.transpose();
  const Eigen::MatrixXd rhs = (v * p.transpose()).transpose();
  Matrix s = gram.completeOrthogonalDecomposition().solve(rhs).transpose();
  s = s.cwiseMax(floor);
  double previous = objective(v, s, p);
  int it = 0;
  while (it < opts.max_iterations && previous > 0.0) {
    update_scores(v, s, p);
    ++it;
    const double current = objective(v, s, p);
    const bool done = converged(previous, current, opts.tolerance);
    previous = current;
    if (done) break;
  }
  if (iterations) *iterations = it;
  return s;
}

}  // namespace reducer_detail

// ---------------------------------------------------------------- k-means

/// Lloyd's algorithm from k-means++ seeds. Deterministic for a given seed.
inline KMeansFit fit_kmeans(const Matrix& v, Eigen::Index k, const FitOptions& opts = {}) {
  using namespace reducer_detail;
  opts.validate();
  detail::require(k >= 1, "concept count must be at least 1");
  detail::require(v.rows() >= k, "k-means needs at least as many rows as clusters");
  if (distinct_rows(v) < k) {
    throw ValidationError("k-means needs " + std::to_string(k) + " distinct points, found " +
                          std::to_string(distinct_rows(v)));
  }
  std::mt19937_64 rng(opts.seed);
  KMeansFit fit;
  auto& model = fit.model;
  model.centroids = kmeanspp_seeds(v, k, rng);

  std::vector<Eigen::Index> labels, next;
  std::vector<double> dist;
  model.inertia_trace.push_back(assign(v, model.centroids, labels, &dist));
  for (int it = 0; it < opts.max_iterations; ++it) {
    std::vector<Eigen::Index> counts(static_cast<std::size_t>(k), 0);
    for (auto l : labels) ++counts[static_cast<std::size_t>(l)];
    // empty clusters take over the point farthest from its own centroid
    std::vector<bool> taken(labels.size(), false);
    for (Eigen::Index j = 0; j < k; ++j) {
      if (counts[static_cast<std::size_t>(j)] > 0) continue;
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t r = 0; r < labels.size(); ++r) {
        if (!taken[r] && counts[static_cast<std::size_t>(labels[r])] > 1 && dist[r] > far_d) {
          far_d = dist[r];
          far = r;
        }
      }
      --counts[static_cast<std::size_t>(labels[far])];
      labels[far] = j;
      counts[static_cast<std::size_t>(j)] = 1;
      taken[far] = true;
    }
    Matrix sums = Matrix::Zero(k, v.cols());
    for (std::size_t r = 0; r < labels.size(); ++r) sums.row(labels[r]) += v.row(static_cast<Eigen::Index>(r));
    for (Eigen::Index j = 0; j < k; ++j) {
      model.centroids.row(j) = sums.row(j) / static_cast<double>(counts[static_cast<std::size_t>(j)]);
    }
    ++model.iterations;
    model.inertia_trace.push_back(assign(v, model.centroids, next, &dist));
    const bool stable = next == labels;
    labels.swap(next);
    if (stable) break;
  }
  model.inertia = model.inertia_trace.back();
  fit.labels = std::move(labels);
  return fit;
}

/// One-hot nearest-centroid scores; ties go to the lower centroid index.
inline Matrix kmeans_transform(const Matrix& v, const KMeansModel& model) {
  if (v.cols() != model.channels()) {
    throw ValidationError("k-means transform: input has " + std::to_string(v.cols()) + " channels, model has " +
                          std::to_string(model.channels()));
  }
  std::vector<Eigen::Index> labels;
  reducer_detail::assign(v, model.centroids, labels);
  Matrix s = Matrix::Zero(v.rows(), model.concepts());
  for (std::size_t r = 0; r < labels.size(); ++r) s(static_cast<Eigen::Index>(r), labels[r]) = 1.0;
  return s;
}

inline Matrix kmeans_inverse(const Matrix& s, const KMeansModel& model) {
  detail::require(s.cols() == model.concepts(), "k-means inverse: score width does not match cluster count");
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    int ones = 0;
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
      const double x = s(r, j);
      if (x == 1.0) {
        ++ones;
      } else if (x != 0.0) {
        ones = -1;
        break;
      }
    }
    if (ones != 1) throw ValidationError("k-means inverse: row " + std::to_string(r) + " is not one-hot");
  }
  return s * model.centroids;
}

// ---------------------------------------------------------------- NMF

/// min ||V - SP||_F subject to S, P >= 0 by Lee-Seung multiplicative updates.
/// Each iteration updates P, then S; the objective never increases.
inline NmfFit fit_nmf(const Matrix& v, Eigen::Index k, const FitOptions& opts = {}) {
  using namespace reducer_detail;
  opts.validate();
  require_non_negative(v);
  require_concepts(v, k);
  if (v.maxCoeff() == 0.0) throw ValidationError("cannot factorize an all-zero matrix");

  std::mt19937_64 rng(opts.seed);
  Matrix s, p;
  switch (opts.nmf_init) {
    case NmfInit::random_uniform: {
      const double scale = std::sqrt(v.mean() / static_cast<double>(k));
      s = random_uniform(v.rows(), k, scale, rng);
      p = random_uniform(k, v.cols(), scale, rng);
      break;
    }
    case NmfInit::nndsvd:
      nndsvd_init(v, k, rng, s, p);
      break;
    case NmfInit::from_kmeans: {
      const auto km = fit_kmeans(v, k, opts);
      p = km.model.centroids;
      s = Matrix::Zero(v.rows(), k);
      for (std::size_t r = 0; r < km.labels.size(); ++r) s(static_cast<Eigen::Index>(r), km.labels[r]) = 1.0;
      break;
    }
    case NmfInit::identity:
      detail::require(k == v.cols(), "identity NMF init needs c' == c");
      p = Matrix::Identity(k, k);
      s = v;
      break;
  }

  NmfFit fit;
  auto& model = fit.model;
  model.options = opts;
  double previous = objective(v, s, p);
  model.objective_trace.push_back(previous);
  while (model.iterations < opts.max_iterations && previous > 0.0) {
    update_basis(v, s, p);
    update_scores(v, s, p);
    ++model.iterations;
    const double current = objective(v, s, p);
    model.objective_trace.push_back(current);
    const bool done = converged(previous, current, opts.tolerance);
    previous = current;
    if (done) break;
  }
  for (Eigen::Index j = 0; j < k; ++j) {
    if (p.row(j).maxCoeff() <= 0.0) {
      throw NumericalError("NMF produced an all-zero concept vector (row " + std::to_string(j) + ")");
    }
  }
  model.final_objective = previous;
  model.basis = std::move(p);
  fit.scores = std::move(s);
  return fit;
}

/// Scores for new rows with the basis held fixed.
inline Matrix nmf_transform(const Matrix& v, const Matrix& basis, const FitOptions& opts = {}) {
  opts.validate();
  if (v.cols() != basis.cols()) {
    throw ValidationError("NMF transform: input has " + std::to_string(v.cols()) + " channels, basis has " +
                          std::to_string(basis.cols()));
  }
  reducer_detail::require_non_negative(v);
  return reducer_detail::solve_scores(v, basis, opts);
}

inline Matrix nmf_inverse(const Matrix& s, const Matrix& basis) {
  if (s.cols() != basis.rows()) {
    throw ValidationError("NMF inverse: " + detail::shape_str(s.rows(), s.cols()) + " scores against a " +
                          detail::shape_str(basis.rows(), basis.cols()) + " basis");
  }
  return s * basis;
}

// ---------------------------------------------------------------- PCA

/// Affine PCA through the SVD of the column-centered matrix.
inline PcaFit fit_pca(const Matrix& v, Eigen::Index k) {
  reducer_detail::require_concepts(v, k);
  PcaFit fit;
  auto& model = fit.model;
  model.mean = v.colwise().mean();
  const Eigen::MatrixXd centered = (v.rowwise() - model.mean).eval();
  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
  const Eigen::MatrixXd& right = svd.matrixV();
  model.singular_values = svd.singularValues();
  model.components = right.leftCols(k).transpose();
  // sign convention: the largest-magnitude entry of each component is positive
  for (Eigen::Index j = 0; j < k; ++j) {
    Eigen::Index arg;
    model.components.row(j).cwiseAbs().maxCoeff(&arg);
    if (model.components(j, arg) < 0.0) model.components.row(j) *= -1.0;
  }
  const double dof = v.rows() > 1 ? static_cast<double>(v.rows() - 1) : 1.0;
  model.explained_variance = model.singular_values.head(k).array().square() / dof;
  fit.scores = (v.rowwise() - model.mean) * model.components.transpose();
  return fit;
}

inline Matrix pca_transform(const Matrix& v, const PcaModel& model) {
  if (v.cols() != model.channels()) {
    throw ValidationError("PCA transform: input has " + std::to_string(v.cols()) + " channels, model has " +
                          std::to_string(model.channels()));
  }
  return (v.rowwise() - model.mean) * model.components.transpose();
}

inline Matrix pca_inverse(const Matrix& s, const PcaModel& model) {
  detail::require(s.cols() == model.concepts(), "PCA inverse: score width does not match component count");
  return (s * model.components).rowwise() + model.mean;
}

// ---------------------------------------------------------------- common surface

inline Method method_of(const ReducerModel& r) {
  return std::visit(
      [](const auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, NmfModel>) return Method::nmf;
        else if constexpr (std::is_same_v<T, PcaModel>) return Method::pca;
        else return Method::kmeans;
      },
      r);
}

inline Eigen::Index concept_count(const ReducerModel& r) {
  return std::visit([](const auto& m) { return m.concepts(); }, r);
}

inline Eigen::Index channel_count(const ReducerModel& r) {
  return std::visit([](const auto& m) { return m.channels(); }, r);
}

/// Concept directions in channel space: P, PCA components or centroids.
inline const Matrix& concept_vectors(const ReducerModel& r) {
  return std::visit(
      [](const auto& m) -> const Matrix& {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, NmfModel>) return m.basis;
        else if constexpr (std::is_same_v<T, PcaModel>) return m.components;
        else return m.centroids;
      },
      r);
}

inline Matrix transform(const ReducerModel& r, const Matrix& v) {
  return std::visit(
      [&](const auto& m) -> Matrix {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, NmfModel>) return nmf_transform(v, m.basis, m.options);
        else if constexpr (std::is_same_v<T, PcaModel>) return pca_transform(v, m);
        else return kmeans_transform(v, m);
      },
      r);
}

inline Matrix inverse(const ReducerModel& r, const Matrix& s) {
  return std::visit(
      [&](const auto& m) -> Matrix {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, NmfModel>) return nmf_inverse(s, m.basis);
        else if constexpr (std::is_same_v<T, PcaModel>) return pca_inverse(s, m);
        else return kmeans_inverse(s, m);
      },
      r);
}

/// ||V - inverse(transform(V))||_F
inline double reconstruction_error(const Matrix& v, const ReducerModel& r) {
  return (v - inverse(r, transform(r, v))).norm();
}

/// Fit any reducer and return the model with the training scores.
struct ReducerFit {
  ReducerModel model;
  Matrix scores;
};

inline ReducerFit fit_reducer(Method method, const Matrix& v, Eigen::Index k, const FitOptions& opts = {}) {
  switch (method) {
    case Method::nmf: {
      auto f = fit_nmf(v, k, opts);
      return {std::move(f.model), std::move(f.scores)};
    }
    case Method::pca: {
      auto f = fit_pca(v, k);
      return {std::move(f.model), std::move(f.scores)};
    }
    case Method::kmeans: {
      auto f = fit_kmeans(v, k, opts);
      Matrix s = kmeans_transform(v, f.model);
      return {std::move(f.model), std::move(s)};
    }
  }
  throw ValidationError("unknown method");
}

}  // namespace ice

#endif  // ICE_REDUCERS_HPP
