#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include "support.hpp"
#include "vlmattack/augmentation.hpp"
#include "vlmattack/encoders.hpp"
#include "vlmattack/errors.hpp"

using namespace vlmattack;
using namespace vlmattack::testing;

namespace {

TransformPair rot(double deg, bool h = false, bool v = false) {
  TransformPair t;
  t.rotation_deg = deg;
  t.hflip = h;
  t.vflip = v;
  return t;
}

}  // namespace

TEST(Transforms, IdentityLeavesImageAndFeaturesAlone) {
  Rng rng(1);
  const auto x = random_image({6, 6, 3}, rng);
  EXPECT_EQ(apply_image_transform(TransformPair{}, x), x);
  const Eigen::MatrixXd f = Eigen::MatrixXd::Random(4, 9);
  EXPECT_EQ(apply_feature_transform(TransformPair{}, f, 3, 3), f);
}

TEST(Transforms, FlipsAndQuarterTurnsComposeToIdentity) {
  Rng rng(2);
  const auto x = random_image({8, 8, 3}, rng);
  auto y = x;
  for (int k = 0; k < 4; ++k) y = apply_image_transform(rot(90), y);
  EXPECT_EQ(y, x);
  EXPECT_EQ(apply_image_transform(rot(0, true), apply_image_transform(rot(0, true), x)), x);
  EXPECT_EQ(apply_image_transform(rot(180), x), apply_image_transform(rot(0, true, true), x));
}

TEST(Transforms, HorizontalFlipMirrorsColumns) {
  Rng rng(3);
  const auto x = random_image({4, 5, 2}, rng);
  const auto y = apply_image_transform(rot(0, true), x);
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 5; ++c) {
      for (int k = 0; k < 2; ++k) EXPECT_EQ(y.at(r, c, k), x.at(r, 4 - c, k));
    }
  }
}

TEST(GridMap, ExactTransformsArePermutations) {
  for (bool h : {false, true}) {
    for (bool v : {false, true}) {
      for (double d : {0.0, 90.0, 180.0, 270.0}) {
        const auto t = rot(d, h, v);
        EXPECT_TRUE(t.is_exact());
        EXPECT_TRUE(GridMap::build(t, 4, 4).is_permutation()) << d << h << v;
      }
    }
  }
  TransformPair zoom;
  zoom.scale = 1.5;
  EXPECT_FALSE(zoom.is_exact());
  EXPECT_FALSE(GridMap::build(zoom, 4, 4).is_permutation());
}

TEST(FeatureTransform, AdjointSatisfiesInnerProductIdentity) {
  Rng rng(4);
  std::vector<TransformPair> ts{rot(90), rot(270, true), rot(33.0), rot(0, false, true)};
  TransformPair zoom_in, zoom_out;
  zoom_in.scale = 1.3;
  zoom_out.scale = 0.7;
  zoom_out.rotation_deg = 180;
  ts.push_back(zoom_in);
  ts.push_back(zoom_out);
  for (const auto& t : ts) {
    Eigen::MatrixXd a(3, 20), b(3, 20);
    for (Eigen::Index i = 0; i < a.size(); ++i) {
      a.data()[i] = standard_normal(rng);
      b.data()[i] = standard_normal(rng);
    }
    const double lhs = apply_feature_transform(t, a, 4, 5).cwiseProduct(b).sum();
    const double rhs = a.cwiseProduct(feature_transform_adjoint(t, b, 4, 5)).sum();
    EXPECT_NEAR(lhs, rhs, 1e-12);
  }
}

TEST(FeatureTransform, CommutesWithAveragePoolEncoderForExactTransforms) {
  Rng rng(5);
  const AveragePoolEncoder enc({12, 12, 3}, 3, 3);
  const auto x = random_image({12, 12, 3}, rng);
  for (double d : {0.0, 90.0, 180.0, 270.0}) {
    for (bool h : {false, true}) {
      const auto t = rot(d, h);
      const auto lhs = apply_feature_transform(t, patch_features(enc.encode(x)), 3, 3);
      const auto rhs = patch_features(enc.encode(apply_image_transform(t, x)));
      EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-12);
    }
  }
}

TEST(Sampling, IdentityConfigAlwaysGivesIdentity) {
  Rng rng(6);
  const auto cfg = TransformConfig::identity();
  for (int i = 0; i < 100; ++i) EXPECT_TRUE(sample_transform(rng, cfg).is_identity());
}

TEST(Sampling, DrawsFromConfiguredChoicesWithExpectedFlipRate) {
  Rng rng(7);
  TransformConfig cfg;
  cfg.hflip_prob = 0.3;
  cfg.rotation_choices = {0.0, 90.0};
  cfg.resize_min = 0.9;
  cfg.resize_max = 1.1;
  const int n = 20000;
  int flips = 0;
  for (int i = 0; i < n; ++i) {
    const auto t = sample_transform(rng, cfg);
    flips += t.hflip;
    EXPECT_TRUE(t.rotation_deg == 0.0 || t.rotation_deg == 90.0);
    EXPECT_GE(t.scale, 0.9);
    EXPECT_LE(t.scale, 1.1);
    EXPECT_FALSE(t.vflip);
  }
  const double sd = std::sqrt(n * 0.3 * 0.7);
  EXPECT_NEAR(flips, n * 0.3, 4 * sd);
}

TEST(Sampling, SameSeedSameSequence) {
  TransformConfig cfg;
  Rng a(8), b(8);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sample_transform(a, cfg), sample_transform(b, cfg));
}

TEST(TransformConfig, ValidateAndJsonRoundTrip) {
  TransformConfig bad;
  bad.hflip_prob = 1.5;
  EXPECT_THROW(bad.validate(), ContractViolation);
  bad = {};
  bad.resize_min = 2.0;
  EXPECT_THROW(bad.validate(), ContractViolation);

  TransformConfig c;
  c.vflip_prob = 0.25;
  c.rotation_range = std::make_pair(-15.0, 15.0);
  c.resize_enabled = false;
  c.samples_per_step = 3;
  const auto back = TransformConfig::from_json(c.to_json());
  EXPECT_EQ(back.vflip_prob, 0.25);
  EXPECT_EQ(back.rotation_range, c.rotation_range);
  EXPECT_FALSE(back.resize_enabled);
  EXPECT_EQ(back.samples_per_step, 3);
}
