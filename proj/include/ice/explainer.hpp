#ifndef ICE_EXPLAINER_HPP
#define ICE_EXPLAINER_HPP

// Explainer = fitted reducer + final dense layer. Splits a class score into
// per-concept contributions, a residual the reducer cannot represent, and a bias:
//
//   GAP(A) W_k + b_k = GAP(S) (P W_k) + GAP(U) W_k + b_k,   U = V - SP
//
// For PCA the mean offset is folded into the bias: bias = mean . W_k + b_k.

#include "ice/archive.hpp"
#include "ice/reducers.hpp"
#include "ice/tensor.hpp"

#include <json.hpp>

#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace ice {

using json = nlohmann::json;

struct ClassifierHead {
  Matrix weights;  // c x K
  Vector bias;     // K
  std::vector<std::string> class_names;

  ClassifierHead() = default;

  ClassifierHead(Matrix w, Vector b, std::vector<std::string> names = {})
      : weights(std::move(w)), bias(std::move(b)), class_names(std::move(names)) {
    if (class_names.empty()) {
      for (Eigen::Index k = 0; k < weights.cols(); ++k) class_names.push_back(std::to_string(k));
    }
    validate();
  }

  Eigen::Index channels() const { return weights.rows(); }
  Eigen::Index classes() const { return weights.cols(); }

  void validate() const {
    if (weights.cols() != bias.size() || static_cast<std::size_t>(bias.size()) != class_names.size()) {
      throw ValidationError("classifier head: W has " + std::to_string(weights.cols()) + " columns, b has " +
                            std::to_string(bias.size()) + " entries, " + std::to_string(class_names.size()) +
                            " class names");
    }
  }

  /// Scores for pooled features (n x c) -> n x K.
  Matrix apply(const Matrix& pooled) const {
    detail::require(pooled.cols() == channels(), "classifier head: feature width does not match W");
    return (pooled * weights).rowwise() + bias.transpose();
  }

  /// Class by name, falling back to a numeric index.
  Eigen::Index resolve_class(const std::string& key) const {
    for (std::size_t i = 0; i < class_names.size(); ++i) {
      if (class_names[i] == key) return static_cast<Eigen::Index>(i);
    }
    try {
      std::size_t used = 0;
      const long idx = std::stol(key, &used);
      if (used == key.size() && idx >= 0 && idx < classes()) return idx;
    } catch (const std::exception&) {
    }
    throw ValidationError("unknown class '" + key + "'");
  }
};

/// Reads W, b and the optional class_names.json member of a head archive.
inline ClassifierHead load_head(const Archive& a) {
  a.require({"W", "b"});
  std::vector<std::string> names;
  if (a.texts.count("class_names.json")) names = json::parse(a.text("class_names.json")).get<std::vector<std::string>>();
  return ClassifierHead(a.tensor("W").to_matrix(), a.tensor("b").to_vector(), std::move(names));
}

/// Black-box classifier over feature maps: n images -> n x K scores.
using FeatureClassifier = std::function<Matrix(const FeatureMapBatch&)>;

/// GAP followed by the dense layer.
inline FeatureClassifier linear_classifier(const ClassifierHead& head) {
  return [head](const FeatureMapBatch& a) { return head.apply(gap(a)); };
}

struct TrainedOn {
  Eigen::Index class_index = -1;
  std::string class_name;
  std::size_t image_count = 0;

  friend bool operator==(const TrainedOn&, const TrainedOn&) = default;
};

struct Explainer {
  ReducerModel reducer;
  ClassifierHead head;
  Matrix concept_weights;  // c' x K
  std::string layer_name;
  TrainedOn trained_on;
  FitOptions options;

  Method method() const { return method_of(reducer); }
  Eigen::Index concepts() const { return concept_count(reducer); }

  /// Bias of class k in the concept-space linear model.
  double concept_bias(Eigen::Index k) const {
    double offset = head.bias(k);
    if (const auto* pca = std::get_if<PcaModel>(&reducer)) offset += pca->mean.dot(head.weights.col(k));
    return offset;
  }
};

struct LocalExplanation {
  Eigen::Index class_index = 0;
  Vector concept_scores;
  Vector weights;  // concept_weights column of the class
  Vector contributions;
  double residual_term = 0.0;
  double bias_term = 0.0;
  double approx_score = 0.0;
  double exact_score = 0.0;
};

inline json to_json(const LocalExplanation& e) {
  auto vec = [](const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  return json{{"class_index", e.class_index},   {"concept_scores", vec(e.concept_scores)},
              {"weights", vec(e.weights)},
              {"contributions", vec(e.contributions)}, {"residual_term", e.residual_term},
              {"bias_term", e.bias_term},       {"approx_score", e.approx_score},
              {"exact_score", e.exact_score}};
}

struct PrototypeSet {
  Eigen::Index concept_index = 0;
  std::vector<std::size_t> image_indices;
  std::vector<double> scores;  // descending
};

/// P W: importance of each concept vector for every class. Independent of any input.
inline Matrix estimate_concept_weights_linear(const Matrix& concept_vectors, const ClassifierHead& head) {
  if (concept_vectors.cols() != head.channels()) {
    throw ValidationError("concept vectors have " + std::to_string(concept_vectors.cols()) +
                          " channels, head expects " + std::to_string(head.channels()));
  }
  return concept_vectors * head.weights;
}

/// Default finite-difference step: 1e-3 of the RMS activation.
inline double default_epsilon(const FeatureMapBatch& a) {
  const auto d = a.data();
  const double ss = std::inner_product(d.begin(), d.end(), d.begin(), 0.0);
  const double rms = d.empty() ? 0.0 : std::sqrt(ss / static_cast<double>(d.size()));
  return rms > 0.0 ? 1e-3 * rms : 1e-3;
}

/// Average central-difference derivative of class k along `direction`, taken over
/// every spatial position of A. The classifier sees each perturbed channel vector
/// as a 1x1 feature map.
inline double estimate_concept_weights_directional(const FeatureClassifier& classifier, const RowVector& direction,
                                                   const FeatureMapBatch& a, Eigen::Index k, double epsilon) {
  if (!(epsilon > 0.0)) throw ValidationError("epsilon must be positive");
  detail::require(direction.size() == static_cast<Eigen::Index>(a.c()), "direction length must equal channel count");
  const Matrix v = flatten_channels(a);
  const Matrix step = (epsilon * direction).replicate(v.rows(), 1);
  const auto positions = static_cast<std::size_t>(v.rows());
  const Matrix plus = v + step, minus = v - step;
  const Matrix up = classifier(FeatureMapBatch(positions, 1, 1, a.c(),
                                               std::vector<double>(plus.data(), plus.data() + plus.size()), false));
  const Matrix down = classifier(FeatureMapBatch(
      positions, 1, 1, a.c(), std::vector<double>(minus.data(), minus.data() + minus.size()), false));
  detail::require(k >= 0 && k < up.cols(), "class index out of range");
  return ((up.col(k) - down.col(k)) / (2.0 * epsilon)).mean();
}

inline double estimate_concept_weights_directional(const FeatureClassifier& classifier, const RowVector& direction,
                                                   const FeatureMapBatch& a, Eigen::Index k) {
  return estimate_concept_weights_directional(classifier, direction, a, k, default_epsilon(a));
}

/// Directional estimates for every concept vector of a reducer: c' values for class k.
inline Vector estimate_all_concept_weights_directional(const FeatureClassifier& classifier,
                                                       const Matrix& concept_vectors, const FeatureMapBatch& a,
                                                       Eigen::Index k, double epsilon) {
  Vector out(concept_vectors.rows());
  for (Eigen::Index j = 0; j < concept_vectors.rows(); ++j) {
    out(j) = estimate_concept_weights_directional(classifier, RowVector(concept_vectors.row(j)), a, k, epsilon);
  }
  return out;
}

inline void require_head_matches(const ReducerModel& r, const ClassifierHead& head) {
  if (channel_count(r) != head.channels()) {
    throw ValidationError("reducer works on " + std::to_string(channel_count(r)) + " channels, head expects " +
                          std::to_string(head.channels()));
  }
}

/// Fit a single-class explainer on the feature maps of that class.
inline Explainer fit_explainer(const FeatureMapBatch& a, const ClassifierHead& head, Eigen::Index concepts,
                               Method method, const FitOptions& opts = {}, TrainedOn trained_on = {},
                               std::string layer_name = {}) {
  head.validate();
  if (static_cast<Eigen::Index>(a.c()) != head.channels()) {
    throw ValidationError("feature maps have " + std::to_string(a.c()) + " channels, head expects " +
                          std::to_string(head.channels()));
  }
  Explainer e;
  e.reducer = fit_reducer(method, flatten_channels(a), concepts, opts).model;
  e.head = head;
  e.concept_weights = estimate_concept_weights_linear(concept_vectors(e.reducer), head);
  e.layer_name = std::move(layer_name);
  trained_on.image_count = a.n();
  if (trained_on.class_index >= 0 && trained_on.class_name.empty() && trained_on.class_index < head.classes()) {
    trained_on.class_name = head.class_names[static_cast<std::size_t>(trained_on.class_index)];
  }
  e.trained_on = std::move(trained_on);
  e.options = opts;
  return e;
}

namespace explainer_detail {

inline void require_channels(const Explainer& e, const FeatureMapBatch& a) {
  if (static_cast<Eigen::Index>(a.c()) != channel_count(e.reducer)) {
    throw ValidationError("feature maps have " + std::to_string(a.c()) + " channels, explainer expects " +
                          std::to_string(channel_count(e.reducer)));
  }
}

}  // namespace explainer_detail

/// Per-position concept scores S for a batch: (n*h*w) x c'.
inline Matrix position_scores(const Explainer& e, const FeatureMapBatch& a) {
  explainer_detail::require_channels(e, a);
  return transform(e.reducer, flatten_channels(a));
}

/// GAP of the decomposed maps: n x c'.
inline Matrix concept_scores(const Explainer& e, const FeatureMapBatch& a) {
  return block_row_means(position_scores(e, a), a.positions_per_image());
}

/// h x w map of one concept's scores for one image.
inline Matrix concept_map(const Explainer& e, const FeatureMapBatch& a, std::size_t image, Eigen::Index concept_index) {
  detail::require(image < a.n(), "image index out of range");
  detail::require(concept_index >= 0 && concept_index < e.concepts(), "concept index out of range");
  const FeatureMapBatch one = a.slice(image, 1);
  const Matrix s = position_scores(e, one);
  Matrix out(static_cast<Eigen::Index>(a.h()), static_cast<Eigen::Index>(a.w()));
  for (Eigen::Index r = 0; r < s.rows(); ++r) out(r / out.cols(), r % out.cols()) = s(r, concept_index);
  return out;
}

inline LocalExplanation explain_local(const Explainer& e, const FeatureMapBatch& a_one, Eigen::Index k) {
  detail::require(a_one.n() == 1, "local explanations take exactly one image");
  if (k < 0 || k >= e.head.classes()) {
    throw ValidationError("class index " + std::to_string(k) + " out of range [0, " +
                          std::to_string(e.head.classes()) + ")");
  }
  const Matrix s = position_scores(e, a_one);
  const Matrix reconstructed = inverse(e.reducer, s);
  const auto positions = static_cast<double>(a_one.positions_per_image());
  const RowVector pooled = gap(a_one).row(0);
  const RowVector pooled_reconstruction = reconstructed.colwise().sum() / positions;

  LocalExplanation out;
  out.class_index = k;
  out.concept_scores = (s.colwise().sum() / positions).transpose();
  out.weights = e.concept_weights.col(k);
  out.contributions = out.concept_scores.cwiseProduct(out.weights);
  out.bias_term = e.concept_bias(k);
  out.approx_score = out.contributions.sum() + out.bias_term;
  out.residual_term = (pooled - pooled_reconstruction).dot(e.head.weights.col(k));
  out.exact_score = pooled.dot(e.head.weights.col(k)) + e.head.bias(k);
  return out;
}

/// The m highest-scoring images, descending; ties go to the lower image index.
inline PrototypeSet top_images(const Vector& scores, Eigen::Index concept_index, std::size_t m) {
  if (m > static_cast<std::size_t>(scores.size())) {
    throw ValidationError("requested " + std::to_string(m) + " prototypes from " + std::to_string(scores.size()) +
                          " images");
  }
  std::vector<std::size_t> order(static_cast<std::size_t>(scores.size()));
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores(static_cast<Eigen::Index>(a)) > scores(static_cast<Eigen::Index>(b));
  });
  PrototypeSet p;
  p.concept_index = concept_index;
  p.image_indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(m));
  for (auto i : p.image_indices) p.scores.push_back(scores(static_cast<Eigen::Index>(i)));
  return p;
}

inline PrototypeSet select_prototypes(const Explainer& e, const FeatureMapBatch& dataset, Eigen::Index concept_index,
                                      std::size_t m = 5) {
  if (concept_index < 0 || concept_index >= e.concepts()) {
    throw ValidationError("concept index " + std::to_string(concept_index) + " out of range [0, " +
                          std::to_string(e.concepts()) + ")");
  }
  return top_images(concept_scores(e, dataset).col(concept_index), concept_index, m);
}

// ---------------------------------------------------------------- persistence

inline constexpr int kExplainerFormatVersion = 1;

inline json options_to_json(const FitOptions& o) {
  return json{{"max_iterations", o.max_iterations},
              {"tolerance", o.tolerance},
              {"seed", o.seed},
              {"nmf_init", to_string(o.nmf_init)}};
}

inline FitOptions options_from_json(const json& j) {
  FitOptions o;
  o.max_iterations = j.at("max_iterations").get<int>();
  o.tolerance = j.at("tolerance").get<double>();
  o.seed = j.at("seed").get<std::uint64_t>();
  o.nmf_init = parse_nmf_init(j.at("nmf_init").get<std::string>());
  return o;
}

inline Archive to_archive(const Explainer& e) {
  Archive a;
  json meta{{"format_version", kExplainerFormatVersion},
            {"method", to_string(e.method())},
            {"concepts", e.concepts()},
            {"channels", e.head.channels()},
            {"classes", e.head.classes()},
            {"class_names", e.head.class_names},
            {"layer_name", e.layer_name},
            {"trained_on",
             {{"class_index", e.trained_on.class_index},
              {"class_name", e.trained_on.class_name},
              {"image_count", e.trained_on.image_count}}},
            {"options", options_to_json(e.options)}};
  std::visit(
      [&](const auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, NmfModel>) {
          a.tensors["P"] = Tensor::from_matrix(m.basis);
          meta["fit"] = {{"iterations", m.iterations}, {"final_objective", m.final_objective},
                         {"transform_options", options_to_json(m.options)}};
        } else if constexpr (std::is_same_v<T, PcaModel>) {
          a.tensors["mean"] = Tensor::from_vector(m.mean.transpose());
          a.tensors["components"] = Tensor::from_matrix(m.components);
          a.tensors["explained_variance"] = Tensor::from_vector(m.explained_variance);
          a.tensors["singular_values"] = Tensor::from_vector(m.singular_values);
          meta["fit"] = json::object();
        } else {
          a.tensors["centroids"] = Tensor::from_matrix(m.centroids);
          meta["fit"] = {{"iterations", m.iterations}, {"inertia", m.inertia}};
        }
      },
      e.reducer);
  a.tensors["W"] = Tensor::from_matrix(e.head.weights);
  a.tensors["b"] = Tensor::from_vector(e.head.bias);
  a.tensors["concept_weights"] = Tensor::from_matrix(e.concept_weights);
  a.texts["explainer.json"] = meta.dump(2) + "\n";
  return a;
}

inline Explainer from_archive(const Archive& a) {
  const json meta = json::parse(a.text("explainer.json"));
  const int version = meta.value("format_version", 0);
  if (version != kExplainerFormatVersion) {
    throw IoError("explainer format version " + std::to_string(version) + " is not supported (expected " +
                  std::to_string(kExplainerFormatVersion) + ")");
  }
  Explainer e;
  const Method method = parse_method(meta.at("method").get<std::string>());
  const json& fit = meta.at("fit");
  switch (method) {
    case Method::nmf: {
      NmfModel m;
      m.basis = a.tensor("P").to_matrix();
      m.iterations = fit.at("iterations").get<int>();
      m.final_objective = fit.at("final_objective").get<double>();
      m.options = options_from_json(fit.at("transform_options"));
      e.reducer = std::move(m);
      break;
    }
    case Method::pca: {
      PcaModel m;
      m.mean = a.tensor("mean").to_vector().transpose();
      m.components = a.tensor("components").to_matrix();
      m.explained_variance = a.tensor("explained_variance").to_vector();
      m.singular_values = a.tensor("singular_values").to_vector();
      e.reducer = std::move(m);
      break;
    }
    case Method::kmeans: {
      KMeansModel m;
      m.centroids = a.tensor("centroids").to_matrix();
      m.iterations = fit.at("iterations").get<int>();
      m.inertia = fit.at("inertia").get<double>();
      e.reducer = std::move(m);
      break;
    }
  }
  e.head = ClassifierHead(a.tensor("W").to_matrix(), a.tensor("b").to_vector(),
                          meta.at("class_names").get<std::vector<std::string>>());
  e.concept_weights = a.tensor("concept_weights").to_matrix();
  e.layer_name = meta.at("layer_name").get<std::string>();
  const json& t = meta.at("trained_on");
  e.trained_on = {t.at("class_index").get<Eigen::Index>(), t.at("class_name").get<std::string>(),
                  t.at("image_count").get<std::size_t>()};
  e.options = options_from_json(meta.at("options"));
  require_head_matches(e.reducer, e.head);
  if (e.concept_weights.rows() != e.concepts() || e.concept_weights.cols() != e.head.classes()) {
    throw IoError("explainer concept_weights has shape " +
                  detail::shape_str(e.concept_weights.rows(), e.concept_weights.cols()));
  }
  return e;
}

inline std::vector<unsigned char> encode_explainer(const Explainer& e) { return encode_archive(to_archive(e)); }

inline void save_explainer(const Explainer& e, const std::filesystem::path& path) { save_archive(to_archive(e), path); }

inline Explainer load_explainer(const std::filesystem::path& path) { return from_archive(load_archive(path)); }

}  // namespace ice

#endif  // ICE_EXPLAINER_HPP
