#ifndef ICE_FIDELITY_HPP
#define ICE_FIDELITY_HPP

// Fidelity of the approximate model  y^ = GAP(inverse(transform(V))) W + b  against
// the original logits, as label agreement (Fid_c) and relative score error (Fid_r).

#include "ice/explainer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <exception>
#include <fstream>
#include <optional>
#include <sstream>
#include <thread>
#include <vector>

namespace ice {

struct EvalBatch {
  FeatureMapBatch acts;
  Matrix exact_logits;  // n x K, pre-softmax
  std::vector<Eigen::Index> ground_truth;

  void validate() const {
    const auto n = static_cast<Eigen::Index>(acts.n());
    detail::require(exact_logits.rows() == n, "eval logits row count does not match the image count");
    detail::require(static_cast<Eigen::Index>(ground_truth.size()) == n,
                    "eval ground truth length does not match the image count");
    for (auto g : ground_truth) {
      detail::require(g >= 0 && g < exact_logits.cols(), "ground-truth class index out of range");
    }
  }
};

/// Head applied to the pooled reconstruction of A: n x K.
inline Matrix approximate_predict(const Explainer& e, const FeatureMapBatch& a) {
  const Matrix reconstructed = inverse(e.reducer, position_scores(e, a));
  return e.head.apply(block_row_means(reconstructed, a.positions_per_image()));
}

/// Index of the largest entry among `candidates` (all columns if empty); ties go to the lower index.
inline Eigen::Index argmax(const Eigen::Ref<const RowVector>& row, const std::vector<Eigen::Index>& candidates = {}) {
  Eigen::Index best = -1;
  auto consider = [&](Eigen::Index j) {
    if (best < 0 || row(j) > row(best) || (row(j) == row(best) && j < best)) best = j;
  };
  if (candidates.empty()) {
    for (Eigen::Index j = 0; j < row.size(); ++j) consider(j);
  } else {
    for (auto j : candidates) consider(j);
  }
  return best;
}

/// The t highest entries of a row; ties go to the lower index.
inline std::vector<Eigen::Index> top_classes(const Eigen::Ref<const RowVector>& row, Eigen::Index t) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(row.size()));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  const auto keep = std::min<Eigen::Index>(t, row.size());
  std::partial_sort(idx.begin(), idx.begin() + keep, idx.end(), [&](Eigen::Index a, Eigen::Index b) {
    return row(a) > row(b) || (row(a) == row(b) && a < b);
  });
  idx.resize(static_cast<std::size_t>(keep));
  return idx;
}

/// Fraction of rows whose predicted label agrees. With `top`, the approximate
/// model's argmax is restricted to the exact model's top-t classes.
inline double fid_classification(const Matrix& exact, const Matrix& approx, std::optional<Eigen::Index> top = 5) {
  detail::require(exact.rows() == approx.rows() && exact.cols() == approx.cols(),
                  "classification fidelity needs equally shaped logit matrices");
  detail::require(exact.rows() > 0, "classification fidelity needs at least one row");
  if (top && *top < 1) throw ValidationError("top-candidate count must be at least 1");
  Eigen::Index agree = 0;
  for (Eigen::Index r = 0; r < exact.rows(); ++r) {
    const Eigen::Index label = argmax(exact.row(r));
    const auto candidates = top ? top_classes(exact.row(r), *top) : std::vector<Eigen::Index>{};
    if (argmax(approx.row(r), candidates) == label) ++agree;
  }
  return static_cast<double>(agree) / static_cast<double>(exact.rows());
}

inline constexpr double kRelativeErrorEpsilon = 1e-12;

/// sum |F - F^| / sum (|F| + eps)
inline double fid_regression(const Vector& exact, const Vector& approx, double epsilon = kRelativeErrorEpsilon) {
  if (exact.size() == 0) throw ValidationError("regression fidelity needs a non-empty input");
  detail::require(exact.size() == approx.size(), "regression fidelity needs equal-length score vectors");
  const double numer = (exact - approx).cwiseAbs().sum();
  const double denom = (exact.cwiseAbs().array() + epsilon).sum();
  return numer / denom;
}

// ---------------------------------------------------------------- sweeps

struct SweepCell {
  Method method = Method::nmf;
  Eigen::Index c_prime = 0;
  double fid_c = 0.0;
  double fid_r = 0.0;
  double approx_accuracy = 0.0;
  double reconstruction_error = 0.0;
  double fit_seconds = 0.0;

  friend bool operator==(const SweepCell&, const SweepCell&) = default;
};

struct ClassReport {
  Eigen::Index class_index = -1;
  std::vector<SweepCell> cells;

  friend bool operator==(const ClassReport&, const ClassReport&) = default;
};

/// `cells` holds the per-class results for a single-class sweep and the
/// unweighted class means otherwise; `per_class` always holds every class.
struct FidelityReport {
  std::vector<SweepCell> cells;
  std::vector<ClassReport> per_class;

  friend bool operator==(const FidelityReport&, const FidelityReport&) = default;
};

struct SweepOptions {
  FitOptions fit;
  std::optional<Eigen::Index> top_candidates = 5;
  bool record_timing = true;  // false writes fit_seconds = 0 so reports are byte-reproducible
  unsigned threads = 1;
};

struct ClassSweep {
  Eigen::Index class_index = -1;
  FeatureMapBatch train;
  EvalBatch eval;
};

inline std::vector<Eigen::Index> default_cprime_values() {
  std::vector<Eigen::Index> v;
  for (Eigen::Index c = 5; c <= 50; c += 5) v.push_back(c);
  return v;
}

inline std::vector<Method> all_methods() { return {Method::nmf, Method::pca, Method::kmeans}; }

/// Fit one reducer and score it against the eval batch.
inline SweepCell evaluate_cell(const ClassSweep& task, const ClassifierHead& head, Method method, Eigen::Index c_prime,
                               const SweepOptions& opts) {
  const auto start = std::chrono::steady_clock::now();
  const Explainer e = fit_explainer(task.train, head, c_prime, method, opts.fit, {task.class_index, {}, 0});
  const auto stop = std::chrono::steady_clock::now();

  const auto& eval = task.eval;
  const Matrix v = flatten_channels(eval.acts);
  const Matrix reconstructed = inverse(e.reducer, transform(e.reducer, v));
  const Matrix approx = head.apply(block_row_means(reconstructed, eval.acts.positions_per_image()));

  Vector exact_gt(approx.rows()), approx_gt(approx.rows());
  Eigen::Index correct = 0;
  for (Eigen::Index r = 0; r < approx.rows(); ++r) {
    const auto g = eval.ground_truth[static_cast<std::size_t>(r)];
    exact_gt(r) = eval.exact_logits(r, g);
    approx_gt(r) = approx(r, g);
    if (argmax(approx.row(r)) == g) ++correct;
  }
  SweepCell cell;
  cell.method = method;
  cell.c_prime = c_prime;
  cell.fid_c = fid_classification(eval.exact_logits, approx, opts.top_candidates);
  cell.fid_r = fid_regression(exact_gt, approx_gt);
  cell.approx_accuracy = static_cast<double>(correct) / static_cast<double>(approx.rows());
  cell.reconstruction_error = (v - reconstructed).norm();
  cell.fit_seconds = opts.record_timing ? std::chrono::duration<double>(stop - start).count() : 0.0;
  return cell;
}

inline void sort_cells(std::vector<SweepCell>& cells) {
  std::stable_sort(cells.begin(), cells.end(), [](const SweepCell& a, const SweepCell& b) {
    const auto ma = to_string(a.method), mb = to_string(b.method);
    return ma != mb ? ma < mb : a.c_prime < b.c_prime;
  });
}

/// Every (class, method, c') cell. Cells run on up to `opts.threads` workers;
/// the report order does not depend on the thread count.
inline FidelityReport sweep(const std::vector<ClassSweep>& classes, const ClassifierHead& head,
                            const std::vector<Method>& methods, const std::vector<Eigen::Index>& c_values,
                            const SweepOptions& opts = {}) {
  detail::require(!classes.empty(), "sweep needs at least one class");
  detail::require(!methods.empty(), "sweep needs at least one method");
  detail::require(!c_values.empty(), "sweep needs at least one concept count");
  opts.fit.validate();
  for (const auto& c : classes) c.eval.validate();

  struct Task {
    std::size_t cls;
    Method method;
    Eigen::Index c_prime;
  };
  std::vector<Task> tasks;
  for (std::size_t c = 0; c < classes.size(); ++c)
    for (auto m : methods)
      for (auto k : c_values) tasks.push_back({c, m, k});

  std::vector<SweepCell> results(tasks.size());
  std::vector<std::exception_ptr> errors(tasks.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < tasks.size(); i = next++) {
      try {
        results[i] = evaluate_cell(classes[tasks[i].cls], head, tasks[i].method, tasks[i].c_prime, opts);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const unsigned workers = std::max(1u, std::min<unsigned>(opts.threads, static_cast<unsigned>(tasks.size())));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < workers; ++t) pool.emplace_back(worker);
  }
  for (auto& err : errors) {
    if (err) std::rethrow_exception(err);
  }

  FidelityReport report;
  const std::size_t per = methods.size() * c_values.size();
  for (std::size_t c = 0; c < classes.size(); ++c) {
    ClassReport cr;
    cr.class_index = classes[c].class_index;
    cr.cells.assign(results.begin() + static_cast<std::ptrdiff_t>(c * per),
                    results.begin() + static_cast<std::ptrdiff_t>((c + 1) * per));
    sort_cells(cr.cells);
    report.per_class.push_back(std::move(cr));
  }
  report.cells = report.per_class.front().cells;
  if (classes.size() > 1) {
    const double n = static_cast<double>(classes.size());
    for (std::size_t i = 0; i < report.cells.size(); ++i) {
      SweepCell mean = report.cells[i];
      mean.fid_c = mean.fid_r = mean.approx_accuracy = mean.reconstruction_error = mean.fit_seconds = 0.0;
      for (const auto& cr : report.per_class) {
        const auto& c = cr.cells[i];
        mean.fid_c += c.fid_c / n;
        mean.fid_r += c.fid_r / n;
        mean.approx_accuracy += c.approx_accuracy / n;
        mean.reconstruction_error += c.reconstruction_error / n;
        mean.fit_seconds += c.fit_seconds / n;
      }
      report.cells[i] = mean;
    }
  }
  return report;
}

/// Single-class sweep.
inline FidelityReport sweep(const FeatureMapBatch& train, const EvalBatch& eval, const ClassifierHead& head,
                            const std::vector<Method>& methods, const std::vector<Eigen::Index>& c_values,
                            const SweepOptions& opts = {}, Eigen::Index class_index = -1) {
  return sweep(std::vector<ClassSweep>{{class_index, train, eval}}, head, methods, c_values, opts);
}

// ---------------------------------------------------------------- report output

enum class ReportFormat { json, csv };

inline constexpr const char* kReportCsvHeader =
    "method,c_prime,fid_c,fid_r,approx_accuracy,reconstruction_error,fit_seconds";

inline json to_json(const SweepCell& c) {
  return json{{"method", to_string(c.method)},
              {"c_prime", c.c_prime},
              {"fid_c", c.fid_c},
              {"fid_r", c.fid_r},
              {"approx_accuracy", c.approx_accuracy},
              {"reconstruction_error", c.reconstruction_error},
              {"fit_seconds", c.fit_seconds}};
}

inline SweepCell cell_from_json(const json& j) {
  SweepCell c;
  c.method = parse_method(j.at("method").get<std::string>());
  c.c_prime = j.at("c_prime").get<Eigen::Index>();
  c.fid_c = j.at("fid_c").get<double>();
  c.fid_r = j.at("fid_r").get<double>();
  c.approx_accuracy = j.at("approx_accuracy").get<double>();
  c.reconstruction_error = j.at("reconstruction_error").get<double>();
  c.fit_seconds = j.at("fit_seconds").get<double>();
  return c;
}

inline json to_json(const FidelityReport& r) {
  json cells = json::array(), per_class = json::array();
  for (const auto& c : r.cells) cells.push_back(to_json(c));
  for (const auto& cr : r.per_class) {
    json cc = json::array();
    for (const auto& c : cr.cells) cc.push_back(to_json(c));
    per_class.push_back({{"class_index", cr.class_index}, {"cells", cc}});
  }
  return json{{"cells", cells}, {"per_class", per_class}};
}

inline FidelityReport report_from_json(const json& j) {
  FidelityReport r;
  for (const auto& c : j.at("cells")) r.cells.push_back(cell_from_json(c));
  for (const auto& pc : j.at("per_class")) {
    ClassReport cr;
    cr.class_index = pc.at("class_index").get<Eigen::Index>();
    for (const auto& c : pc.at("cells")) cr.cells.push_back(cell_from_json(c));
    r.per_class.push_back(std::move(cr));
  }
  return r;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Header plus one row per cell of `report.cells`; numbers carry 17 significant digits.
inline std::string to_csv(const FidelityReport& r) {
  std::string out = std::string(kReportCsvHeader) + "\n";
  for (const auto& c : r.cells) {
    out += to_string(c.method) + "," + std::to_string(c.c_prime) + "," + format_double(c.fid_c) + "," +
           format_double(c.fid_r) + "," + format_double(c.approx_accuracy) + "," +
           format_double(c.reconstruction_error) + "," + format_double(c.fit_seconds) + "\n";
  }
  return out;
}

inline std::string render_report(const FidelityReport& r, ReportFormat format) {
  return format == ReportFormat::json ? to_json(r).dump(2) + "\n" : to_csv(r);
}

inline void write_report(const FidelityReport& r, const std::filesystem::path& path, ReportFormat format) {
  const std::string text = render_report(r, format);
  write_file_bytes(path, std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(text.data()),
                                                        text.size()));
}

}  // namespace ice

#endif  // ICE_FIDELITY_HPP
