// Acceptance checks: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include "support/test_data.hpp"

#include "ice/cli.hpp"

#include <chrono>
#include <cstdio>
#include <functional>
#include <sstream>
#include <thread>

namespace {

using namespace ice;
using ice::testing::random_batch;
using ice::testing::random_head;
using ice::testing::relative_gap;
using ice::testing::TempDir;
using ice::testing::uniform_matrix;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::vector<Matrix> random_matrices() {
  std::vector<Matrix> out;
  for (std::uint64_t s = 0; s < 50; ++s) {
    std::mt19937_64 rng(1000 + s);
    out.push_back(uniform_matrix(200, 64, rng));
  }
  return out;
}

const std::vector<Eigen::Index> kSmallRanks{5, 10, 20};

Outcome nmf_monotonicity() {
  const auto t0 = Clock::now();
  FitOptions o;
  o.tolerance = 1e-300;  // run every iteration
  double worst = 0.0;
  std::size_t steps = 0;
  for (const auto& v : random_matrices()) {
    for (auto k : kSmallRanks) {
      const auto& trace = fit_nmf(v, k, o).model.objective_trace;
      for (std::size_t i = 1; i < trace.size(); ++i) {
        worst = std::max(worst, (trace[i] - trace[i - 1]) / trace[i - 1]);
        ++steps;
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-10 && secs < 30.0,
          std::to_string(steps) + " steps, worst relative rise " + fmt("%.3g", worst) + ", " + fmt("%.1f", secs) + " s"};
}

Outcome factorization_ordering() {
  double worst = -1.0;
  FitOptions from_km;
  from_km.nmf_init = NmfInit::from_kmeans;
  for (const auto& v : random_matrices()) {
    for (auto k : kSmallRanks) {
      const auto pca = fit_pca(v, k);
      const double e_pca = (v - inverse(ReducerModel(pca.model), pca.scores)).norm();
      const auto nmf = fit_nmf(v, k);
      const double e_nmf = (v - nmf.scores * nmf.model.basis).norm();
      const auto km = fit_kmeans(v, k);
      double e_km2 = 0.0;
      for (std::size_t r = 0; r < km.labels.size(); ++r) {
        e_km2 += (v.row(static_cast<Eigen::Index>(r)) - km.model.centroids.row(km.labels[r])).squaredNorm();
      }
      const double e_km = std::sqrt(e_km2);
      const auto seeded = fit_nmf(v, k, from_km);
      const double e_seeded = (v - seeded.scores * seeded.model.basis).norm();
      // positive slack means an ordering was violated
      worst = std::max({worst, e_pca / e_nmf - 1.0, e_pca / e_km - 1.0, e_seeded / e_km - 1.0});
    }
  }
  return {worst <= 1e-9, "150 cases, largest ratio - 1 among ordered pairs " + fmt("%.3g", worst)};
}

Outcome decomposition_identity() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  double worst = 0.0;
  const Method methods[] = {Method::nmf, Method::pca, Method::kmeans};
  for (int t = 0; t < 100; ++t) {
    const ClassifierHead head = random_head(24, 6, rng);
    const FeatureMapBatch train = random_batch(5, 5, 5, 24, rng);
    const Method m = methods[t % 3];
    const Explainer e = fit_explainer(train, head, 2 + t % 7, m);
    const FeatureMapBatch a = random_batch(1, 5, 5, 24, rng);
    const Matrix exact = head.apply(gap(a));
    for (Eigen::Index k = 0; k < 6; ++k) {
      const auto local = explain_local(e, a, k);
      const double rebuilt = local.contributions.sum() + local.residual_term + local.bias_term;
      worst = std::max(worst, relative_gap(exact(0, k), rebuilt));
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-9 && secs < 10.0,
          "600 scores, worst relative gap " + fmt("%.3g", worst) + ", " + fmt("%.2f", secs) + " s"};
}

Outcome weight_estimator_agreement() {
  std::mt19937_64 rng(77);
  double worst = 0.0;
  int checked = 0;
  for (int t = 0; t < 10; ++t) {
    const ClassifierHead head = random_head(32, 5, rng);
    const FeatureMapBatch train = random_batch(4, 4, 4, 32, rng);
    const Method m = t % 2 ? Method::pca : Method::nmf;
    const Explainer e = fit_explainer(train, head, 6, m);
    const Matrix& p = concept_vectors(e.reducer);
    const Matrix oracle = p * head.weights;
    const FeatureMapBatch probe = random_batch(1, 4, 4, 32, rng);
    for (double eps : {1e-1, 1e-3, 1e-6}) {
      for (Eigen::Index k = 0; k < 5; ++k) {
        const Vector est = estimate_all_concept_weights_directional(linear_classifier(head), p, probe, k, eps);
        for (Eigen::Index j = 0; j < est.size(); ++j) {
          worst = std::max(worst, relative_gap(est(j), oracle(j, k)));
          ++checked;
        }
      }
    }
  }
  return {worst <= 1e-6, std::to_string(checked) + " weights over 3 step sizes, worst relative gap " + fmt("%.3g", worst)};
}

Outcome fidelity_endpoints() {
  std::mt19937_64 rng(31);
  const ClassifierHead head = random_head(16, 8, rng);
  const FeatureMapBatch train = random_batch(6, 4, 4, 16, rng);
  const FeatureMapBatch ev = random_batch(10, 4, 4, 16, rng);
  EvalBatch batch{ev, head.apply(gap(ev)), {}};
  for (Eigen::Index r = 0; r < batch.exact_logits.rows(); ++r) batch.ground_truth.push_back(argmax(batch.exact_logits.row(r)));
  SweepOptions o;
  o.fit.nmf_init = NmfInit::identity;
  o.record_timing = false;
  const auto report = sweep(train, batch, head, {Method::nmf, Method::pca}, {16}, o);
  bool ok = true;
  double worst_r = 0.0;
  for (const auto& c : report.cells) {
    ok = ok && c.fid_c == 1.0;
    worst_r = std::max(worst_r, c.fid_r);
  }
  ok = ok && worst_r < 1e-9;

  Matrix exact = Matrix::Zero(3, 8), approx = Matrix::Zero(3, 8);
  exact(0, 3) = exact(1, 7) = exact(2, 7) = 1.0;
  approx(0, 3) = approx(1, 7) = approx(2, 2) = 1.0;
  const double fc = fid_classification(exact, approx, std::nullopt);
  const double fr = fid_regression((Vector(2) << 4, 2).finished(), (Vector(2) << 3, 1).finished());
  const bool hand = std::abs(fc - 2.0 / 3.0) <= 1e-12 && std::abs(fr - 2.0 / (6.0 + 2e-12)) <= 1e-12;
  return {ok && hand, "identity Fid_c " + fmt("%.17g", report.cells[0].fid_c) + "/" + fmt("%.17g", report.cells[1].fid_c) +
                          ", Fid_r max " + fmt("%.3g", worst_r) + ", hand Fid_c " + fmt("%.12f", fc) + ", Fid_r " +
                          fmt("%.12f", fr)};
}

Outcome synthetic_sweep_trend() {
  const auto t0 = Clock::now();
  const auto syn = ice::testing::synthetic_concepts(20, 256, 10, 20, 7, 7, 0.01, 11);
  std::mt19937_64 head_rng(5);
  const ClassifierHead head = random_head(256, 10, head_rng);
  EvalBatch batch{syn.eval, head.apply(gap(syn.eval)), {}};
  for (Eigen::Index r = 0; r < batch.exact_logits.rows(); ++r) batch.ground_truth.push_back(argmax(batch.exact_logits.row(r)));
  SweepOptions o;
  o.fit.max_iterations = 2000;
  o.fit.tolerance = 1e-7;
  o.record_timing = false;
  o.threads = std::max(1u, std::thread::hardware_concurrency());
  const auto report = sweep(syn.train, batch, head, all_methods(), default_cprime_values(), o);
  auto cell = [&](Method m, Eigen::Index k) -> const SweepCell& {
    for (const auto& c : report.cells)
      if (c.method == m && c.c_prime == k) return c;
    throw std::logic_error("missing cell");
  };
  bool ok = true;
  std::string detail;
  for (auto m : all_methods()) {
    const double lo = cell(m, 5).fid_r, hi = cell(m, 50).fid_r;
    ok = ok && hi < lo;
    detail += to_string(m) + " " + fmt("%.3g", lo) + "->" + fmt("%.3g", hi) + ", ";
  }
  double worst_ratio = 0.0;
  for (Eigen::Index k = 20; k <= 50; k += 5) {
    worst_ratio = std::max(worst_ratio, cell(Method::nmf, k).fid_r / cell(Method::pca, k).fid_r);
  }
  ok = ok && worst_ratio <= 2.0;
  const double secs = seconds_since(t0);
  ok = ok && secs < 300.0;
  return {ok, detail + "NMF/PCA Fid_r ratio at c'>=20 max " + fmt("%.3g", worst_ratio) + ", " + fmt("%.0f", secs) + " s"};
}

Outcome render_pipeline() {
  std::mt19937_64 rng(55);
  bool ok = true;
  for (int t = 0; t < 200; ++t) {
    const Matrix map = uniform_matrix(1 + t % 7, 1 + t % 5, rng, 0.0, 10.0);
    const Heatmap hm = concept_heatmap(map, 32, 40, 0);
    ok = ok && hm.values.minCoeff() >= 0.0 && hm.values.maxCoeff() <= 1.0;
    long count = 0;
    for (Eigen::Index y = 0; y < hm.values.rows(); ++y)
      for (Eigen::Index x = 0; x < hm.values.cols(); ++x) count += hm.values(y, x) > 0.5;
    ok = ok && threshold_mask(hm, 0.5).count() == count;
    ok = ok && threshold_mask(concept_heatmap(Matrix::Constant(3, 3, 0.1 * t), 12, 12, 0), 0.5).count() == 0;
  }

  TempDir dir("acceptance_render");
  const ClassifierHead head = random_head(12, 4, rng);
  const FeatureMapBatch data = random_batch(7, 3, 3, 12, rng);
  const Explainer e = fit_explainer(data, head, 3, Method::nmf);
  std::vector<std::filesystem::path> images;
  for (int i = 0; i < 7; ++i) {
    images.push_back(dir / ("img" + std::to_string(i) + ".png"));
    write_png(RgbImage(12, 12, static_cast<std::uint8_t>(30 * i)), images.back());
  }
  const std::size_t m = 5;
  auto assets = prototype_assets(e, data, images, m, 0.5);
  const FeatureMapBatch one = data.slice(0, 1);
  for (Eigen::Index j = 0; j < 3; ++j) {
    assets[static_cast<std::size_t>(j)].instance_overlay = highlight(read_png(images[0]), concept_map(e, one, 0, j), j, 0, 0.5);
  }
  const auto files = render_explanation(explain_local(e, one, 1), assets, dir / "out");
  std::size_t on_disk = 0;
  for (const auto& entry : std::filesystem::directory_iterator(dir / "out")) on_disk += entry.is_regular_file();
  const std::size_t expected = 3 * m + 3 + 2;
  ok = ok && files.size() == expected && on_disk == expected;
  return {ok, "200 heatmaps checked, " + std::to_string(on_disk) + " files for c'=3, m=5 (expected " +
                  std::to_string(expected) + ")"};
}

int quiet_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "ice");
  std::ostringstream out, err;
  return cli::run(args, out, err);
}

Outcome determinism() {
  TempDir dir("acceptance_det");
  auto p = [&](const std::string& n) { return (dir / n).string(); };
  std::mt19937_64 rng(8);
  const ClassifierHead head = random_head(20, 3, rng);
  const FeatureMapBatch train = random_batch(6, 4, 4, 20, rng);
  const FeatureMapBatch ev = random_batch(4, 4, 4, 20, rng);
  Archive h;
  h.tensors["W"] = Tensor::from_matrix(head.weights);
  h.tensors["b"] = Tensor::from_vector(head.bias);
  save_archive(h, p("head.npz"));
  Archive a;
  a.tensors["acts"] = to_channel_first(train);
  save_archive(a, p("train.npz"));
  Archive b;
  b.tensors["acts"] = to_channel_first(ev);
  b.tensors["logits"] = Tensor::from_matrix(head.apply(gap(ev)));
  b.tensors["labels"] = Tensor({4}, {0, 1, 2, 1});
  save_archive(b, p("eval.npz"));
  write_png(RgbImage(8, 8, 90), p("img.png"));

  std::vector<std::string> mismatched;
  auto same = [&](const std::string& label, const std::vector<std::string>& outputs, const std::function<void()>& run) {
    std::vector<std::vector<unsigned char>> first;
    run();
    for (const auto& o : outputs) first.push_back(read_file_bytes(o));
    run();
    for (std::size_t i = 0; i < outputs.size(); ++i) {
      if (read_file_bytes(outputs[i]) != first[i]) mismatched.push_back(label + ":" + outputs[i]);
    }
  };
  int failures = 0;
  for (const char* method : {"nmf", "pca", "kmeans"}) {
    for (const char* init : {"random-uniform", "nndsvd", "from-kmeans"}) {
      const std::string out = p(std::string(method) + "_" + init + ".npz");
      same(std::string("fit ") + method, {out}, [&] {
        failures += quiet_cli({"fit", "--acts", p("train.npz"), "--head", p("head.npz"), "--method", method, "--init",
                               init, "--cprime", "4", "--seed", "3", "--out", out}) != 0;
      });
    }
  }
  same("sweep", {p("sweep/report.json"), p("sweep/report.csv")}, [&] {
    failures += quiet_cli({"sweep", "--acts", p("train.npz"), "--eval-acts", p("eval.npz"), "--head", p("head.npz"),
                           "--cprime-list", "2:10:4", "--seed", "3", "--threads", "2", "--no-timing", "--out",
                           p("sweep")}) != 0;
  });
  const std::vector<std::string> explain_files{p("ex/explanation.json"), p("ex/contributions.png"),
                                               p("ex/concept_0_instance.png"), p("ex/concept_3_instance.png")};
  same("explain", explain_files, [&] {
    failures += quiet_cli({"explain", "--explainer", p("nmf_random-uniform.npz"), "--acts", p("train.npz"), "--image",
                           p("img.png"), "--out", p("ex")}) != 0;
  });
  const bool ok = failures == 0 && mismatched.empty();
  std::string detail = "9 fits, sweep and explain each run twice, " + std::to_string(failures) + " command failures, " +
                       std::to_string(mismatched.size()) + " differing outputs";
  if (!mismatched.empty()) detail += " (first: " + mismatched.front() + ")";
  return {ok, detail};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> checks{
      {"nmf-monotonicity", nmf_monotonicity},
      {"factorization-ordering", factorization_ordering},
      {"decomposition-identity", decomposition_identity},
      {"weight-estimator-agreement", weight_estimator_agreement},
      {"fidelity-endpoints", fidelity_endpoints},
      {"synthetic-sweep-trend", synthetic_sweep_trend},
      {"render-pipeline", render_pipeline},
      {"determinism", determinism},
  };
  int failed = 0;
  for (const auto& [name, check] : checks) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
