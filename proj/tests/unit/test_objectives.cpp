#include <gtest/gtest.h>

#include "support.hpp"
#include "vlmattack/errors.hpp"
#include "vlmattack/objectives.hpp"

using namespace vlmattack;
using namespace vlmattack::testing;

namespace {

void expect_gradient(const Objective& obj, const ImageTensor& x, Rng& rng, double tol = 1e-5) {
  const auto e = obj.evaluate(x);
  const double h = 1e-6;
  for (int k = 0; k < 12; ++k) {
    const auto i = static_cast<std::size_t>(uniform_index(rng, x.size()));
    auto p = x.data(), m = x.data();
    p[i] += h;
    m[i] -= h;
    const double fd = (obj.evaluate(ImageTensor(x.shape(), p)).value -
                       obj.evaluate(ImageTensor(x.shape(), m)).value) / (2 * h);
    EXPECT_LT(relative_error(fd, e.gradient[i], 1e-12), tol) << obj.id() << " coordinate " << i;
  }
}

}  // namespace

TEST(FeatureDistance, NormsMatchDefinitions) {
  Eigen::MatrixXd d(2, 2);
  d << 3, 0, 4, 1;
  EXPECT_DOUBLE_EQ(feature_distance(d, FeatureNorm::frobenius), std::sqrt(26.0));
  EXPECT_DOUBLE_EQ(feature_distance(d, FeatureNorm::per_patch_l2), 5.0 + 1.0);
  EXPECT_TRUE(feature_distance_gradient(Eigen::MatrixXd::Zero(2, 2), FeatureNorm::frobenius).isZero());
  EXPECT_EQ(feature_norm_from_id("frobenius"), FeatureNorm::frobenius);
  EXPECT_FALSE(feature_norm_from_id("l1").has_value());
}

TEST(FeatureMatchObjective, ZeroAtTargetAndFiniteDifferenceGradient) {
  Rng rng(1);
  for (auto norm : {FeatureNorm::frobenius, FeatureNorm::per_patch_l2}) {
    for (const char* id : {"avgpool", "conv"}) {
      const auto b = toy(id, {8, 8, 3}, 2, 3);
      const auto xt = random_image({8, 8, 3}, rng, 0.1, 0.9);
      const FeatureMatchObjective obj(b.encoder, patch_features(b.encoder->encode(xt)), norm);
      EXPECT_NEAR(obj.evaluate(xt).value, 0.0, 1e-12);
      expect_gradient(obj, random_image({8, 8, 3}, rng, 0.1, 0.9), rng);
    }
  }
}

TEST(FeatureMatchObjective, RejectsWrongTargetShape) {
  const auto b = toy("avgpool", {8, 8, 3}, 2);
  EXPECT_THROW(FeatureMatchObjective(b.encoder, Eigen::MatrixXd::Zero(3, 5)), ContractViolation);
}

TEST(LatentObjective, DistanceToTextLatentAndGradient) {
  Rng rng(2);
  for (const char* id : {"avgpool", "conv"}) {
    const auto b = toy(id, {8, 8, 3}, 2, 4);
    const LatentObjective obj(b, "a flower bouquet");
    const auto x = random_image({8, 8, 3}, rng, 0.1, 0.9);
    const auto z = b.projection->project(b.encoder->encode(x));
    EXPECT_NEAR(obj.evaluate(x).value, (z - b.text->encode("a flower bouquet")).norm(), 1e-12);
    expect_gradient(obj, x, rng);
  }
}

TEST(ContrastiveObjective, ReducesToFeatureMatchUnderIdentityWithoutTriplet) {
  Rng rng(3);
  const auto b = toy("conv", {8, 8, 3}, 2, 5);
  const auto x = random_image({8, 8, 3}, rng);
  const auto xt = random_image({8, 8, 3}, rng);
  const auto adv = random_image({8, 8, 3}, rng);
  const ContrastiveObjective c(b.encoder, x, xt, 0.0);
  const FeatureMatchObjective f(b.encoder, patch_features(b.encoder->encode(xt)));
  const auto ec = c.evaluate(adv, TransformPair{});
  const auto ef = f.evaluate(adv);
  EXPECT_EQ(ec.value, ef.value);
  EXPECT_EQ(ec.gradient, ef.gradient);
}

TEST(ContrastiveObjective, TripletTermMatchesDefinition) {
  Rng rng(4);
  const auto b = toy("avgpool", {8, 8, 3}, 2);
  const auto x = random_image({8, 8, 3}, rng);
  const auto xt = random_image({8, 8, 3}, rng);
  const auto adv = random_image({8, 8, 3}, rng);
  TransformPair t;
  t.hflip = true;
  const ContrastiveObjective c(b.encoder, x, xt, 0.3);
  const auto& e = *b.encoder;
  const auto ft = apply_feature_transform(t, patch_features(e.encode(adv)), 2, 2);
  const double pos = (ft - patch_features(e.encode(apply_image_transform(t, xt)))).norm();
  const double neg = (ft - patch_features(e.encode(apply_image_transform(t, x)))).norm();
  EXPECT_NEAR(c.evaluate(adv, t).value, pos - 0.3 * neg, 1e-12);
}

TEST(ContrastiveObjective, GradientUnderTransformsMatchesFiniteDifferences) {
  Rng rng(5);
  for (const char* id : {"avgpool", "conv"}) {
    const auto b = toy(id, {12, 12, 3}, 3, 6);
    const ContrastiveObjective c(b.encoder, random_image({12, 12, 3}, rng), random_image({12, 12, 3}, rng), 0.3);
    TransformPair a, z;
    a.rotation_deg = 270;
    a.vflip = true;
    z.scale = 1.2;
    z.rotation_deg = 20;
    const BoundContrastiveObjective obj(c, {a, z});
    expect_gradient(obj, random_image({12, 12, 3}, rng, 0.1, 0.9), rng);
  }
}

TEST(BoundContrastiveObjective, AveragesPairs) {
  Rng rng(6);
  const auto b = toy("avgpool", {8, 8, 3}, 2);
  const ContrastiveObjective c(b.encoder, random_image({8, 8, 3}, rng), random_image({8, 8, 3}, rng), 0.3);
  TransformPair h;
  h.hflip = true;
  const auto adv = random_image({8, 8, 3}, rng);
  const BoundContrastiveObjective both(c, {TransformPair{}, h});
  EXPECT_NEAR(both.evaluate(adv).value, 0.5 * (c.evaluate(adv, {}).value + c.evaluate(adv, h).value), 1e-14);
  EXPECT_THROW(BoundContrastiveObjective(c, {}), ContractViolation);
}
