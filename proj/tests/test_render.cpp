#include "support/test_data.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <set>

namespace {

using namespace ice;
using ice::testing::gaussian_matrix;
using ice::testing::random_batch;
using ice::testing::random_head;
using ice::testing::TempDir;
using ice::testing::uniform_matrix;

RgbImage random_image(int w, int h, std::mt19937_64& rng) {
  RgbImage img(w, h);
  std::uniform_int_distribution<int> byte(0, 255);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(byte(rng));
  return img;
}

Heatmap heat(const Matrix& values) { return Heatmap{values, 0, 0}; }

// ---------------------------------------------------------------- resampling

TEST(Bilinear, HandExample) {
  Matrix src(2, 2);
  src << 0, 3, 6, 9;
  const Matrix up = bilinear_upsample(src, 4, 4);
  for (Eigen::Index y = 0; y < 4; ++y)
    for (Eigen::Index x = 0; x < 4; ++x) EXPECT_NEAR(up(y, x), static_cast<double>(x + 2 * y), 1e-12);
  const Heatmap hm = concept_heatmap(src, 4, 4, 0);
  for (Eigen::Index y = 0; y < 4; ++y)
    for (Eigen::Index x = 0; x < 4; ++x) EXPECT_NEAR(hm.values(y, x), static_cast<double>(x + 2 * y) / 9.0, 1e-12);
}

TEST(Bilinear, CornersAreKept) {
  std::mt19937_64 rng(1);
  const Matrix src = gaussian_matrix(3, 5, rng);
  const Matrix up = bilinear_upsample(src, 13, 17);
  EXPECT_DOUBLE_EQ(up(0, 0), src(0, 0));
  EXPECT_DOUBLE_EQ(up(0, 16), src(0, 4));
  EXPECT_DOUBLE_EQ(up(12, 0), src(2, 0));
  EXPECT_DOUBLE_EQ(up(12, 16), src(2, 4));
  EXPECT_LE(up.maxCoeff(), src.maxCoeff() + 1e-12);
  EXPECT_GE(up.minCoeff(), src.minCoeff() - 1e-12);
}

TEST(Bilinear, SameSizeIsIdentity) {
  std::mt19937_64 rng(2);
  const Matrix src = gaussian_matrix(4, 6, rng);
  EXPECT_LT((bilinear_upsample(src, 4, 6) - src).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Heatmap, ConstantAndSinglePositionMapsAreZero) {
  EXPECT_EQ(concept_heatmap(Matrix::Constant(3, 3, 2.5), 9, 9, 1).values, Matrix::Zero(9, 9));
  EXPECT_EQ(concept_heatmap(Matrix::Constant(1, 1, 7.0), 5, 6, 1).values, Matrix::Zero(5, 6));
}

TEST(Heatmap, ConstantMapsGiveEmptyMasks) {
  for (int t = 0; t < 50; ++t) {
    const Heatmap hm = concept_heatmap(Matrix::Constant(3, 4, 0.1 * t), 13, 17, 0);
    EXPECT_EQ(hm.values, Matrix::Zero(13, 17)) << t;
    EXPECT_EQ(threshold_mask(hm, 0.5).count(), 0) << t;
  }
}

TEST(Heatmap, NormalizationIsIdempotent) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 20; ++t) {
    const Matrix once = min_max_normalize(gaussian_matrix(5, 7, rng));
    EXPECT_DOUBLE_EQ(once.minCoeff(), 0.0);
    EXPECT_DOUBLE_EQ(once.maxCoeff(), 1.0);
    EXPECT_LT((min_max_normalize(once) - once).cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(Heatmap, Errors) {
  EXPECT_THROW(concept_heatmap(Matrix(0, 0), 4, 4, 0), ValidationError);
  EXPECT_THROW(concept_heatmap(Matrix::Ones(4, 4), 2, 8, 0), ValidationError);
}

// ---------------------------------------------------------------- masks

TEST(Mask, HandExample) {
  Matrix v(1, 2);
  v << 0.2, 0.6;
  const Mask m = threshold_mask(heat(v), 0.5);
  EXPECT_FALSE(m(0, 0));
  EXPECT_TRUE(m(0, 1));
}

TEST(Mask, StrictInequality) {
  const Mask m = threshold_mask(heat(Matrix::Constant(2, 2, 0.5)), 0.5);
  EXPECT_EQ(m.count(), 0);
  EXPECT_EQ(threshold_mask(heat(Matrix::Ones(3, 3)), 0.5).count(), 9);
}

TEST(Mask, CountMatchesOracle) {
  std::mt19937_64 rng(4);
  for (double thr : {0.0, 0.1, 0.5, 0.9, 1.0}) {
    const Matrix v = uniform_matrix(8, 11, rng);
    long expected = 0;
    for (Eigen::Index i = 0; i < v.size(); ++i) expected += v.data()[i] > thr;
    EXPECT_EQ(threshold_mask(heat(v), thr).count(), expected);
  }
}

TEST(Mask, ThresholdOutsideUnitInterval) {
  EXPECT_THROW(threshold_mask(heat(Matrix::Ones(2, 2)), -0.01), ValidationError);
  EXPECT_THROW(threshold_mask(heat(Matrix::Ones(2, 2)), 1.01), ValidationError);
  EXPECT_THROW(threshold_mask(heat(Matrix::Ones(2, 2)), std::nan("")), ValidationError);
}

// ---------------------------------------------------------------- overlays

TEST(Overlay, FullMaskKeepsImage) {
  std::mt19937_64 rng(5);
  const RgbImage img = random_image(6, 4, rng);
  EXPECT_EQ(overlay(img, heat(Matrix::Ones(4, 6)), OverlayMode::highlight_mask).image, img);
}

TEST(Overlay, EmptyMaskHalvesImage) {
  std::mt19937_64 rng(6);
  const RgbImage img = random_image(6, 4, rng);
  const RgbImage out = overlay(img, heat(Matrix::Zero(4, 6)), OverlayMode::highlight_mask).image;
  for (std::size_t i = 0; i < img.pixels.size(); ++i) EXPECT_EQ(out.pixels[i], img.pixels[i] / 2);
}

TEST(Overlay, MaskedAndUnmaskedPartition) {
  std::mt19937_64 rng(7);
  const RgbImage img = random_image(9, 7, rng);
  const Heatmap hm = heat(uniform_matrix(7, 9, rng));
  const Mask mask = threshold_mask(hm, 0.4);
  const RgbImage out = overlay(img, hm, OverlayMode::highlight_mask, 0.4).image;
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 9; ++x)
      for (int c = 0; c < 3; ++c) {
        const auto want = mask(y, x) ? img.at(x, y)[c] : static_cast<std::uint8_t>(img.at(x, y)[c] / 2);
        EXPECT_EQ(out.at(x, y)[c], want);
      }
}

TEST(Overlay, HeatBlendEndpoints) {
  const RgbImage img(3, 2, 100);
  const RgbImage cold = overlay(img, heat(Matrix::Zero(2, 3)), OverlayMode::heat_blend).image;
  const RgbImage hot = overlay(img, heat(Matrix::Ones(2, 3)), OverlayMode::heat_blend).image;
  const auto c0 = heat_color(0.0), c1 = heat_color(1.0);
  for (int c = 0; c < 3; ++c) {
    EXPECT_EQ(cold.at(1, 1)[c], static_cast<std::uint8_t>(std::lround(60.0 + 0.4 * c0[static_cast<std::size_t>(c)])));
    EXPECT_EQ(hot.at(2, 0)[c], static_cast<std::uint8_t>(std::lround(60.0 + 0.4 * c1[static_cast<std::size_t>(c)])));
  }
  EXPECT_NE(cold, hot);
}

TEST(Overlay, DimensionMismatch) {
  const RgbImage img(6, 4);
  EXPECT_THROW(overlay(img, heat(Matrix::Ones(6, 4)), OverlayMode::highlight_mask), ValidationError);
}

// ---------------------------------------------------------------- png

TEST(Png, RoundTrip) {
  std::mt19937_64 rng(8);
  TempDir dir("png");
  for (auto [w, h] : {std::pair{1, 1}, std::pair{17, 5}, std::pair{64, 48}}) {
    const RgbImage img = random_image(w, h, rng);
    EXPECT_EQ(decode_png(encode_png(img)), img);
    write_png(img, dir / "x.png");
    EXPECT_EQ(read_png(dir / "x.png"), img);
  }
}

TEST(Png, Errors) {
  const std::vector<unsigned char> junk{1, 2, 3, 4, 5};
  EXPECT_THROW(decode_png(junk), IoError);
  EXPECT_THROW(read_png("/nonexistent/image.png"), IoError);
}

// ---------------------------------------------------------------- explanation files

class RenderPipeline : public ::testing::Test {
 protected:
  static constexpr std::size_t kImages = 8;
  static constexpr int kSide = 16;

  void SetUp() override {
    std::mt19937_64 rng(9);
    head = random_head(10, 4, rng);
    dataset = random_batch(kImages, 4, 4, 10, rng);
    explainer = fit_explainer(dataset, head, 3, Method::nmf);
    for (std::size_t i = 0; i < kImages; ++i) {
      paths.push_back(dir / ("img_" + std::to_string(i) + ".png"));
      write_png(random_image(kSide, kSide, rng), paths.back());
    }
    instance = random_image(kSide, kSide, rng);
    one = dataset.slice(2, 1);
    local = explain_local(explainer, one, 1);
  }

  std::vector<ConceptAssets> assets(std::size_t m) const {
    auto out = prototype_assets(explainer, dataset, paths, m, 0.5);
    for (Eigen::Index j = 0; j < explainer.concepts(); ++j) {
      out[static_cast<std::size_t>(j)].instance_overlay = highlight(instance, concept_map(explainer, one, 0, j), j, 0, 0.5);
    }
    return out;
  }

  TempDir dir{"render"};
  ClassifierHead head;
  FeatureMapBatch dataset{1, 1, 1, 1, {0.0}};
  FeatureMapBatch one{1, 1, 1, 1, {0.0}};
  Explainer explainer;
  std::vector<std::filesystem::path> paths;
  RgbImage instance;
  LocalExplanation local;
};

TEST_F(RenderPipeline, WritesEveryFile) {
  const auto out = dir / "out";
  const auto files = render_explanation(local, assets(5), out, "dog");
  EXPECT_EQ(files.size(), 3u * 5u + 3u + 2u);
  std::set<std::string> names;
  for (const auto& f : files) {
    EXPECT_TRUE(std::filesystem::exists(f)) << f;
    names.insert(f.filename().string());
  }
  EXPECT_EQ(names.size(), files.size());
  for (Eigen::Index j = 0; j < 3; ++j) {
    EXPECT_TRUE(names.count(instance_file(j)));
    for (std::size_t r = 0; r < 5; ++r) EXPECT_TRUE(names.count(prototype_file(j, r)));
  }
  EXPECT_TRUE(names.count(kChartFile));
  EXPECT_TRUE(names.count(kExplanationFile));
  EXPECT_EQ(read_png(out / prototype_file(0, 0)).width, kSide);
}

TEST_F(RenderPipeline, JsonAgreesWithExplanation) {
  const auto out = dir / "out";
  const auto a = assets(5);
  render_explanation(local, a, out, "dog");
  const auto bytes = read_file_bytes(out / kExplanationFile);
  const json j = json::parse(bytes.begin(), bytes.end());
  EXPECT_EQ(j.at("class"), 1);
  EXPECT_EQ(j.at("class_name"), "dog");
  double total = j.at("bias").get<double>();
  ASSERT_EQ(j.at("concepts").size(), 3u);
  for (std::size_t c = 0; c < 3; ++c) {
    const auto& item = j.at("concepts")[c];
    total += item.at("contribution").get<double>();
    EXPECT_DOUBLE_EQ(item.at("contribution").get<double>(), local.contributions(static_cast<Eigen::Index>(c)));
    EXPECT_EQ(item.at("prototype_images").get<std::vector<std::size_t>>(), a[c].prototypes.image_indices);
    EXPECT_EQ(item.at("prototype_files").size(), 5u);
  }
  EXPECT_NEAR(total, j.at("approx_score").get<double>(), 1e-9 * std::max(1.0, std::abs(total)));
  EXPECT_NEAR(j.at("approx_score").get<double>() + j.at("residual").get<double>(), j.at("exact_score").get<double>(),
              1e-9 * std::max(1.0, std::abs(local.exact_score)));
}

TEST_F(RenderPipeline, PrototypesAreTopScoringImages) {
  const auto a = assets(5);
  const Matrix scores = concept_scores(explainer, dataset);
  for (std::size_t j = 0; j < 3; ++j) {
    const auto& picked = a[j].prototypes.image_indices;
    ASSERT_EQ(picked.size(), 5u);
    double weakest = scores(static_cast<Eigen::Index>(picked.back()), static_cast<Eigen::Index>(j));
    for (std::size_t i = 0; i < kImages; ++i) {
      if (std::find(picked.begin(), picked.end(), i) != picked.end()) continue;
      EXPECT_LE(scores(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)), weakest);
    }
  }
}

TEST_F(RenderPipeline, RerenderIsByteIdentical) {
  const auto first = render_explanation(local, assets(5), dir / "a", "dog");
  const auto second = render_explanation(local, assets(5), dir / "b", "dog");
  ASSERT_EQ(first.size(), second.size());
  for (std::size_t i = 0; i < first.size(); ++i) EXPECT_EQ(read_file_bytes(first[i]), read_file_bytes(second[i])) << first[i];
}

TEST_F(RenderPipeline, Errors) {
  std::ofstream(dir / "blocker") << "x";
  EXPECT_THROW(render_explanation(local, assets(5), dir / "blocker" / "out"), IoError);
  EXPECT_THROW(prototype_assets(explainer, dataset, paths, kImages + 1, 0.5), ValidationError);
  auto fewer = paths;
  fewer.pop_back();
  EXPECT_THROW(prototype_assets(explainer, dataset, fewer, 5, 0.5), ValidationError);
  auto short_assets = assets(2);
  short_assets.pop_back();
  EXPECT_THROW(render_explanation(local, short_assets, dir / "out"), ValidationError);
}

TEST_F(RenderPipeline, ChartHasOneBarPerTerm) {
  const RgbImage chart = contribution_chart(local);
  EXPECT_EQ(chart.width, 400);
  EXPECT_EQ(chart.height, 20 + 5 * 22);
}

}  // namespace
