#ifndef ICE_RENDER_HPP
#define ICE_RENDER_HPP

// Concept heatmaps, threshold masks, image overlays and explanation file sets.

#include "ice/explainer.hpp"
#include "ice/image.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace ice {

using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Heatmap {
  Matrix values;  // out_h x out_w, in [0, 1]
  Eigen::Index source_concept = -1;
  std::size_t source_image = 0;
};

/// Corner-aligned bilinear resampling: output corners coincide with input corners.
inline Matrix bilinear_upsample(const Matrix& src, Eigen::Index out_h, Eigen::Index out_w) {
  detail::require(src.rows() >= 1 && src.cols() >= 1, "cannot resample an empty map");
  detail::require(out_h >= 1 && out_w >= 1, "output size must be positive");
  auto coord = [](Eigen::Index i, Eigen::Index out, Eigen::Index in) {
    return out > 1 ? static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out - 1) : 0.0;
  };
  Matrix out(out_h, out_w);
  for (Eigen::Index y = 0; y < out_h; ++y) {
    const double fy = coord(y, out_h, src.rows());
    const auto y0 = std::min(static_cast<Eigen::Index>(std::floor(fy)), src.rows() - 1);
    const auto y1 = std::min(y0 + 1, src.rows() - 1);
    const double ty = fy - static_cast<double>(y0);
    for (Eigen::Index x = 0; x < out_w; ++x) {
      const double fx = coord(x, out_w, src.cols());
      const auto x0 = std::min(static_cast<Eigen::Index>(std::floor(fx)), src.cols() - 1);
      const auto x1 = std::min(x0 + 1, src.cols() - 1);
      const double tx = fx - static_cast<double>(x0);
      // std::lerp keeps equal endpoints exact, so constant maps stay constant
      const double top = std::lerp(src(y0, x0), src(y0, x1), tx);
      const double bottom = std::lerp(src(y1, x0), src(y1, x1), tx);
      out(y, x) = std::lerp(top, bottom, ty);
    }
  }
  return out;
}

/// Min-max scaling to [0, 1]. A constant map becomes all zeros.
inline Matrix min_max_normalize(const Matrix& m) {
  detail::require(m.size() > 0, "cannot normalize an empty map");
  const double lo = m.minCoeff(), hi = m.maxCoeff();
  if (!(hi > lo)) return Matrix::Zero(m.rows(), m.cols());
  return ((m.array() - lo) / (hi - lo)).cwiseMin(1.0).cwiseMax(0.0).matrix();
}

inline Heatmap concept_heatmap(const Matrix& scores, Eigen::Index out_h, Eigen::Index out_w,
                               Eigen::Index concept_index = -1, std::size_t image = 0) {
  detail::require(scores.size() > 0, "empty concept map");
  detail::require(out_h >= scores.rows() && out_w >= scores.cols(), "heatmap cannot be smaller than its source map");
  return Heatmap{min_max_normalize(bilinear_upsample(scores, out_h, out_w)), concept_index, image};
}

/// Pixels strictly above the threshold.
inline Mask threshold_mask(const Heatmap& hm, double threshold = 0.5) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ValidationError("threshold must lie in [0, 1]");
  return hm.values.array() > threshold;
}

enum class OverlayMode { highlight_mask, heat_blend };

struct Overlay {
  RgbImage image;
  OverlayMode mode = OverlayMode::highlight_mask;
  double threshold = 0.5;
};

inline constexpr double kHeatAlpha = 0.4;

/// Blue -> cyan -> green -> yellow -> red.
inline std::array<std::uint8_t, 3> heat_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  static constexpr std::array<std::array<double, 3>, 5> stops{
      {{0, 0, 255}, {0, 255, 255}, {0, 255, 0}, {255, 255, 0}, {255, 0, 0}}};
  const double pos = t * 4.0;
  const auto i = std::min(static_cast<std::size_t>(pos), std::size_t{3});
  const double f = pos - static_cast<double>(i);
  std::array<std::uint8_t, 3> out{};
  for (std::size_t c = 0; c < 3; ++c) {
    out[c] = static_cast<std::uint8_t>(std::lround((1.0 - f) * stops[i][c] + f * stops[i + 1][c]));
  }
  return out;
}

/// highlight-mask keeps masked pixels and halves the rest; heat-blend
/// composites the heat ramp at 0.4 alpha.
inline Overlay overlay(const RgbImage& image, const Heatmap& hm, OverlayMode mode, double threshold = 0.5) {
  if (hm.values.rows() != image.height || hm.values.cols() != image.width) {
    throw ValidationError("heatmap is " + detail::shape_str(hm.values.rows(), hm.values.cols()) + " but image is " +
                          std::to_string(image.height) + "x" + std::to_string(image.width));
  }
  Overlay out{image, mode, threshold};
  if (mode == OverlayMode::highlight_mask) {
    const Mask mask = threshold_mask(hm, threshold);
    for (int y = 0; y < image.height; ++y)
      for (int x = 0; x < image.width; ++x) {
        if (mask(y, x)) continue;
        auto* px = out.image.at(x, y);
        for (int c = 0; c < 3; ++c) px[c] = static_cast<std::uint8_t>(px[c] / 2);
      }
  } else {
    for (int y = 0; y < image.height; ++y)
      for (int x = 0; x < image.width; ++x) {
        const auto color = heat_color(hm.values(y, x));
        auto* px = out.image.at(x, y);
        for (int c = 0; c < 3; ++c) {
          px[c] = static_cast<std::uint8_t>(
              std::lround((1.0 - kHeatAlpha) * px[c] + kHeatAlpha * static_cast<double>(color[static_cast<std::size_t>(c)])));
        }
      }
  }
  return out;
}

/// Highlight-mask overlay of one concept map, resampled to the image size.
inline RgbImage highlight(const RgbImage& img, const Matrix& map, Eigen::Index concept_index, std::size_t image,
                          double threshold) {
  const Heatmap hm = concept_heatmap(map, img.height, img.width, concept_index, image);
  return overlay(img, hm, OverlayMode::highlight_mask, threshold).image;
}

/// Horizontal bars: one per concept contribution, then residual and bias.
/// Positive values extend right of the zero axis, negative ones left.
inline RgbImage contribution_chart(const LocalExplanation& local) {
  std::vector<double> values(local.contributions.data(), local.contributions.data() + local.contributions.size());
  values.push_back(local.residual_term);
  values.push_back(local.bias_term);
  constexpr int kWidth = 400, kBar = 16, kGap = 6, kMargin = 10;
  const int height = kMargin * 2 + static_cast<int>(values.size()) * (kBar + kGap);
  RgbImage img(kWidth, height, 255);
  double scale = 0.0;
  for (double v : values) scale = std::max(scale, std::abs(v));
  const int axis = kWidth / 2;
  const int half = axis - kMargin;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const bool is_residual = i + 2 == values.size(), is_bias = i + 1 == values.size();
    std::array<std::uint8_t, 3> color = values[i] >= 0 ? std::array<std::uint8_t, 3>{46, 160, 67}
                                                       : std::array<std::uint8_t, 3>{200, 50, 50};
    if (is_residual) color = {150, 150, 150};
    if (is_bias) color = {60, 90, 200};
    const int len = scale > 0 ? static_cast<int>(std::lround(std::abs(values[i]) / scale * half)) : 0;
    const int x0 = values[i] >= 0 ? axis : axis - len;
    const int y0 = kMargin + static_cast<int>(i) * (kBar + kGap);
    for (int y = y0; y < y0 + kBar; ++y)
      for (int x = x0; x < x0 + len; ++x) std::copy(color.begin(), color.end(), img.at(x, y));
  }
  for (int y = 0; y < height; ++y) {
    auto* px = img.at(axis, y);
    px[0] = px[1] = px[2] = 0;
  }
  return img;
}

/// Rendered assets for one concept of an explanation.
struct ConceptAssets {
  PrototypeSet prototypes;
  std::vector<RgbImage> prototype_overlays;  // one per prototype image
  RgbImage instance_overlay;                 // the explained image, this concept highlighted
};

/// Top-m prototypes of every concept with their overlays; `images` pairs with
/// the dataset rows.
inline std::vector<ConceptAssets> prototype_assets(const Explainer& e, const FeatureMapBatch& dataset,
                                                   const std::vector<std::filesystem::path>& images, std::size_t m,
                                                   double threshold) {
  if (images.size() != dataset.n()) {
    throw ValidationError("manifest lists " + std::to_string(images.size()) + " images but acts hold " +
                          std::to_string(dataset.n()));
  }
  detail::require(m >= 1, "--prototypes must be at least 1");
  if (m > dataset.n()) {
    throw ValidationError("requested " + std::to_string(m) + " prototypes from " + std::to_string(dataset.n()) +
                          " images");
  }
  const Matrix scores = concept_scores(e, dataset);
  std::vector<ConceptAssets> out;
  std::map<std::size_t, RgbImage> cache;
  for (Eigen::Index j = 0; j < e.concepts(); ++j) {
    ConceptAssets assets;
    assets.prototypes = top_images(scores.col(j), j, m);
    for (auto i : assets.prototypes.image_indices) {
      auto it = cache.find(i);
      if (it == cache.end()) it = cache.emplace(i, read_png(images[i])).first;
      assets.prototype_overlays.push_back(highlight(it->second, concept_map(e, dataset, i, j), j, i, threshold));
    }
    out.push_back(std::move(assets));
  }
  return out;
}

inline std::string prototype_file(Eigen::Index concept_index, std::size_t rank) {
  return "concept_" + std::to_string(concept_index) + "_prototype_" + std::to_string(rank) + ".png";
}

inline std::string instance_file(Eigen::Index concept_index) { return "concept_" + std::to_string(concept_index) + "_instance.png"; }

inline constexpr const char* kChartFile = "contributions.png";
inline constexpr const char* kExplanationFile = "explanation.json";

inline json explanation_json(const LocalExplanation& local, const std::vector<ConceptAssets>& concepts,
                             const std::string& class_name = {}) {
  json items = json::array();
  for (std::size_t j = 0; j < concepts.size(); ++j) {
    const auto idx = static_cast<Eigen::Index>(j);
    json files = json::array();
    for (std::size_t r = 0; r < concepts[j].prototype_overlays.size(); ++r) files.push_back(prototype_file(idx, r));
    items.push_back({{"index", idx},
                     {"score", local.concept_scores(idx)},
                     {"weight", local.weights(idx)},
                     {"contribution", local.contributions(idx)},
                     {"prototype_images", concepts[j].prototypes.image_indices},
                     {"prototype_files", files},
                     {"instance_overlay", instance_file(idx)}});
  }
  return json{{"class", local.class_index},
              {"class_name", class_name},
              {"exact_score", local.exact_score},
              {"approx_score", local.approx_score},
              {"bias", local.bias_term},
              {"residual", local.residual_term},
              {"chart", kChartFile},
              {"concepts", items}};
}

/// Writes every overlay, the contribution chart and explanation.json into
/// out_dir; returns the written paths in write order.
inline std::vector<std::filesystem::path> render_explanation(const LocalExplanation& local,
                                                             const std::vector<ConceptAssets>& concepts,
                                                             const std::filesystem::path& out_dir,
                                                             const std::string& class_name = {}) {
  detail::require(static_cast<Eigen::Index>(concepts.size()) == local.contributions.size(),
                  "need assets for every concept of the explanation");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) {
    throw IoError("cannot create output directory '" + out_dir.string() + "'");
  }
  std::vector<std::filesystem::path> written;
  for (std::size_t j = 0; j < concepts.size(); ++j) {
    const auto idx = static_cast<Eigen::Index>(j);
    for (std::size_t r = 0; r < concepts[j].prototype_overlays.size(); ++r) {
      written.push_back(out_dir / prototype_file(idx, r));
      write_png(concepts[j].prototype_overlays[r], written.back());
    }
    written.push_back(out_dir / instance_file(idx));
    write_png(concepts[j].instance_overlay, written.back());
  }
  written.push_back(out_dir / kChartFile);
  write_png(contribution_chart(local), written.back());
  const std::string text = explanation_json(local, concepts, class_name).dump(2) + "\n";
  written.push_back(out_dir / kExplanationFile);
  write_file_bytes(written.back(),
                   std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
  return written;
}

}  // namespace ice

#endif  // ICE_RENDER_HPP
