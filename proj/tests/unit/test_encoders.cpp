#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include "support.hpp"
#include "vlmattack/encoders.hpp"
#include "vlmattack/errors.hpp"

using namespace vlmattack;
using namespace vlmattack::testing;

namespace {

// Checks backward() against central differences of <G, E(x)>.
void expect_vjp_matches_finite_differences(const VisualEncoder& enc, std::uint64_t seed) {
  Rng rng(seed);
  const auto shape = enc.spec().input;
  const auto x = random_image(shape, rng, 0.05, 0.95);
  const auto f = enc.encode(x).matrix();
  Eigen::MatrixXd g(f.rows(), f.cols());
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = standard_normal(rng);
  const auto grad = enc.backward(x, g);
  ASSERT_EQ(grad.size(), x.size());
  const double h = 1e-6;
  for (int k = 0; k < 15; ++k) {
    const auto i = static_cast<std::size_t>(uniform_index(rng, x.size()));
    auto p = x.data(), m = x.data();
    p[i] += h;
    m[i] -= h;
    const double fd = ((enc.encode(ImageTensor(shape, p)).matrix().cwiseProduct(g)).sum() -
                       (enc.encode(ImageTensor(shape, m)).matrix().cwiseProduct(g)).sum()) /
                      (2 * h);
    EXPECT_LT(relative_error(fd, grad[i], 1e-12), 1e-5) << "coordinate " << i;
  }
}

}  // namespace

TEST(AveragePoolEncoder, ShapeAndClsIsPatchMean) {
  Rng rng(1);
  const AveragePoolEncoder enc({8, 12, 3}, 2, 3);
  const auto f = enc.encode(random_image({8, 12, 3}, rng));
  EXPECT_EQ(f.matrix().rows(), 3);
  EXPECT_EQ(f.matrix().cols(), 1 + 6);
  const auto patches = patch_features(f);
  EXPECT_TRUE(f.cls().isApprox(patches.rowwise().mean(), 1e-14));
}

TEST(AveragePoolEncoder, PatchFeatureIsBlockMeanOracle) {
  Rng rng(2);
  const ImageShape shape{8, 8, 2};
  const AveragePoolEncoder enc(shape, 2, 2);
  const auto x = random_image(shape, rng);
  const auto patches = patch_features(enc.encode(x));
  for (int gy = 0; gy < 2; ++gy) {
    for (int gx = 0; gx < 2; ++gx) {
      for (int c = 0; c < 2; ++c) {
        double s = 0;
        for (int y = 0; y < 4; ++y) {
          for (int xx = 0; xx < 4; ++xx) s += x.at(gy * 4 + y, gx * 4 + xx, c);
        }
        EXPECT_NEAR(patches(c, gy * 2 + gx), s / 16.0, 1e-14);
      }
    }
  }
}

TEST(AveragePoolEncoder, IsLinear) {
  Rng rng(3);
  const ImageShape shape{8, 8, 3};
  const AveragePoolEncoder enc(shape, 4, 4);
  const auto a = random_image(shape, rng, 0, 0.5);
  const auto b = random_image(shape, rng, 0, 0.5);
  std::vector<double> sum(a.size());
  for (std::size_t i = 0; i < sum.size(); ++i) sum[i] = a.data()[i] + b.data()[i];
  const Eigen::MatrixXd lhs = enc.encode(ImageTensor(shape, sum)).matrix();
  const Eigen::MatrixXd rhs = enc.encode(a).matrix() + enc.encode(b).matrix();
  EXPECT_TRUE(lhs.isApprox(rhs, 1e-13));
}

TEST(AveragePoolEncoder, RejectsIndivisibleGridAndWrongInput) {
  EXPECT_THROW(AveragePoolEncoder({10, 10, 3}, 3, 3), ContractViolation);
  const AveragePoolEncoder enc({8, 8, 3}, 2, 2);
  EXPECT_THROW(enc.encode(ImageTensor::filled({8, 8, 1}, 0.5)), ContractViolation);
}

TEST(AveragePoolEncoder, BackwardMatchesFiniteDifferences) {
  Rng rng(4);
  const AveragePoolEncoder plain({8, 8, 3}, 2, 2);
  expect_vjp_matches_finite_differences(plain, 10);
  Eigen::MatrixXd mix(5, 3);
  for (Eigen::Index i = 0; i < mix.size(); ++i) mix.data()[i] = standard_normal(rng);
  const AveragePoolEncoder mixed({8, 8, 3}, 2, 2, mix);
  expect_vjp_matches_finite_differences(mixed, 11);
}

TEST(ConvPatchEncoder, BackwardMatchesFiniteDifferences) {
  const ConvPatchEncoder enc({12, 12, 3}, 3, 3, 6, 5, 42);
  expect_vjp_matches_finite_differences(enc, 12);
}

TEST(ConvPatchEncoder, DeterministicForSeed) {
  Rng rng(5);
  const auto x = random_image({8, 8, 3}, rng);
  const ConvPatchEncoder a({8, 8, 3}, 2, 2, 4, 4, 9), b({8, 8, 3}, 2, 2, 4, 4, 9), c({8, 8, 3}, 2, 2, 4, 4, 10);
  EXPECT_EQ(a.encode(x).matrix(), b.encode(x).matrix());
  EXPECT_NE(a.encode(x).matrix(), c.encode(x).matrix());
}

TEST(PatchFeatures, WithClsIsInverse) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Random(4, 7);
  const PatchGridFeatures f(m, 2, 3);
  const auto back = with_cls(f.cls(), patch_features(f), 2, 3);
  EXPECT_EQ(back.matrix(), m);
  EXPECT_THROW(PatchGridFeatures(m, 2, 2), ContractViolation);
}

TEST(HashTextEncoder, UnitNormAndDeterministic) {
  const HashTextEncoder t(16, 3);
  const auto a = t.encode("a flower bouquet");
  EXPECT_NEAR(a.norm(), 1.0, 1e-12);
  EXPECT_EQ(a, t.encode("a flower bouquet"));
  EXPECT_NE(a, t.encode("a red balloon"));
}

TEST(LatentProjection, ProjectsCls) {
  Eigen::MatrixXd w(2, 3);
  w << 1, 0, 0, 0, 1, 1;
  const LatentProjection p(w);
  Eigen::MatrixXd m(3, 2);
  m << 1, 9, 2, 9, 3, 9;
  const auto z = p.project(PatchGridFeatures(m, 1, 1));
  EXPECT_DOUBLE_EQ(z[0], 1);
  EXPECT_DOUBLE_EQ(z[1], 5);
}

TEST(BackendRegistry, KnowsToyBackendsAndRejectsUnknownIds) {
  auto& r = BackendRegistry::instance();
  EXPECT_TRUE(r.contains("avgpool"));
  EXPECT_TRUE(r.contains("conv"));
  EXPECT_TRUE(r.contains("external"));
  BackendConfig c;
  c.id = "no-such-backend";
  EXPECT_THROW(r.create(c), BackendError);
  c.id = "avgpool";
  c.latent_dim = 7;
  const auto b = r.create(c);
  EXPECT_EQ(b.projection->latent_dim(), 7);
  EXPECT_EQ(b.text->dim(), 7);
}

TEST(BackendConfig, JsonRoundTrip) {
  BackendConfig c;
  c.id = "conv";
  c.input = {24, 16, 3};
  c.grid_h = 3;
  c.grid_w = 2;
  c.feature_dim = 9;
  c.seed = 77;
  const auto back = BackendConfig::from_json(c.to_json());
  EXPECT_EQ(back.id, "conv");
  EXPECT_EQ(back.input, c.input);
  EXPECT_EQ(back.grid_h, 3);
  EXPECT_EQ(back.feature_dim, 9);
  EXPECT_EQ(back.seed, 77u);
}
