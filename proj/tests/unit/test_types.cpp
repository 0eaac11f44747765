#include <gtest/gtest.h>

#include "support.hpp"
#include "vlmattack/errors.hpp"
#include "vlmattack/io.hpp"
#include "vlmattack/types.hpp"

using namespace vlmattack;
using namespace vlmattack::testing;

TEST(ImageTensor, RejectsValuesOutsideUnitRange) {
  EXPECT_THROW(ImageTensor({1, 1, 1}, {1.5}), ContractViolation);
  EXPECT_THROW(ImageTensor({1, 1, 1}, {-0.1}), ContractViolation);
  EXPECT_THROW(ImageTensor({1, 2, 1}, {0.5}), ContractViolation);
  EXPECT_THROW(ImageTensor({1, 1, 1}, {std::nan("")}), ContractViolation);
  EXPECT_NO_THROW(ImageTensor({1, 2, 1}, {0.0, 1.0}));
}

TEST(ProjectLinf, StaysInsideBallAndUnitBox) {
  Rng rng(1);
  const ImageShape shape{6, 5, 3};
  for (int trial = 0; trial < 200; ++trial) {
    const auto x = random_image(shape, rng);
    const double eps = uniform(rng, 0.001, 0.5);
    std::vector<double> delta(shape.size());
    for (auto& d : delta) d = uniform(rng, -1.0, 1.0);
    const auto p = project_linf(x, delta, eps);
    EXPECT_LE(p.linf_norm(), eps);
    const auto adv = compose(x, p);
    for (std::size_t i = 0; i < adv.size(); ++i) {
      EXPECT_GE(adv.data()[i], 0.0);
      EXPECT_LE(adv.data()[i], 1.0);
    }
  }
}

TEST(ProjectLinf, FeasibleDeltaIsUnchangedBitForBit) {
  Rng rng(2);
  const ImageShape shape{4, 4, 3};
  const auto x = random_image(shape, rng, 0.3, 0.7);
  std::vector<double> delta(shape.size());
  for (auto& d : delta) d = uniform(rng, -0.1, 0.1);
  const auto p = project_linf(x, delta, 0.1);
  EXPECT_EQ(p.delta(), delta);
}

TEST(ProjectLinf, IsIdempotent) {
  Rng rng(3);
  const ImageShape shape{5, 5, 3};
  const auto x = random_image(shape, rng);
  std::vector<double> delta(shape.size());
  for (auto& d : delta) d = uniform(rng, -1.0, 1.0);
  const auto once = project_linf(x, delta, 0.07);
  const auto twice = project_linf(x, once.delta(), 0.07);
  EXPECT_EQ(once, twice);
}

TEST(ProjectLinf, MatchesElementwiseClipOracle) {
  Rng rng(4);
  const ImageShape shape{3, 7, 2};
  const auto x = random_image(shape, rng);
  std::vector<double> delta(shape.size());
  for (auto& d : delta) d = uniform(rng, -0.5, 0.5);
  const double eps = 0.2;
  const auto p = project_linf(x, delta, eps);
  for (std::size_t i = 0; i < delta.size(); ++i) {
    const double expected = std::clamp(x.data()[i] + std::clamp(delta[i], -eps, eps), 0.0, 1.0) - x.data()[i];
    EXPECT_NEAR(p.delta()[i], expected, 1e-15);
  }
}

TEST(ProjectLinf, RejectsShapeMismatchAndBadEpsilon) {
  const auto x = ImageTensor::filled({2, 2, 1}, 0.5);
  EXPECT_THROW(project_linf(x, std::vector<double>(3, 0.0), 0.1), ContractViolation);
  EXPECT_THROW(project_linf(x, std::vector<double>(4, 0.0), 0.0), ContractViolation);
}

TEST(Quantize, RoundsToMultiplesOf255AndRoundTripsBytes) {
  Rng rng(5);
  const auto x = random_image({4, 3, 3}, rng);
  const auto q = quantize_8bit(x);
  for (std::size_t i = 0; i < q.size(); ++i) {
    EXPECT_LE(std::abs(q.data()[i] - x.data()[i]), 0.5 / 255.0 + 1e-12);
    EXPECT_DOUBLE_EQ(q.data()[i] * 255.0, std::round(q.data()[i] * 255.0));
  }
  EXPECT_EQ(from_bytes(q.shape(), to_bytes(q)), q);
  EXPECT_EQ(quantize_8bit(q), q);
}

TEST(AttackConfig, ValidateRejectsBrokenInvariants) {
  AttackConfig ok;
  EXPECT_NO_THROW(ok.validate());
  auto bad = ok;
  bad.alpha = ok.epsilon * 2;
  EXPECT_THROW(bad.validate(), ContractViolation);
  bad = ok;
  bad.steps = 0;
  EXPECT_THROW(bad.validate(), ContractViolation);
  bad = ok;
  bad.epsilon = 0;
  EXPECT_THROW(bad.validate(), ContractViolation);
  bad = ok;
  bad.vmi_samples = 0;
  EXPECT_THROW(bad.validate(), ContractViolation);
}

TEST(AttackConfig, DefaultsFollowTheExperimentalSetup) {
  const AttackConfig c;
  EXPECT_DOUBLE_EQ(c.epsilon, 16.0 / 255.0);
  EXPECT_DOUBLE_EQ(c.alpha, 1.0 / 255.0);
  EXPECT_EQ(c.steps, 200);
  EXPECT_DOUBLE_EQ(c.triplet_weight, 0.3);
}

TEST(TargetSpec, RequiresObjectAndPrompt) {
  EXPECT_THROW((TargetSpec{"", "x"}.validate()), ContractViolation);
  EXPECT_THROW((TargetSpec{"x", ""}.validate()), ContractViolation);
  EXPECT_NO_THROW((TargetSpec{"balloon", "flowers"}.validate()));
}

TEST(Io, SidecarRoundTripsFloat32) {
  Rng rng(6);
  TempDir tmp;
  const auto x = random_image({5, 4, 3}, rng);
  io::write_sidecar(tmp / "x.f32", x);
  const auto s = io::read_sidecar(tmp / "x.f32");
  EXPECT_EQ(s.shape, x.shape());
  const auto rounded = io::round_to_float(x);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(static_cast<double>(s.values[i]), rounded.data()[i]);
  EXPECT_EQ(std::filesystem::file_size(tmp / "x.f32"), 12 + 4 * x.size());
}

TEST(Io, PngRoundTripsQuantizedImages) {
  Rng rng(7);
  TempDir tmp;
  const auto q = quantize_8bit(random_image({9, 7, 3}, rng));
  io::write_png(tmp / "q.png", q);
  EXPECT_EQ(io::read_png(tmp / "q.png"), q);
}

TEST(Io, FeatureFileRoundTrip) {
  TempDir tmp;
  Eigen::MatrixXd m(3, 5);
  m << 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15;
  io::write_features(tmp / "f.bin", m, 2, 2);
  const auto f = io::read_features(tmp / "f.bin", true);
  EXPECT_EQ(f.grid_h, 2);
  EXPECT_EQ(f.grid_w, 2);
  EXPECT_EQ(f.matrix, m);
  EXPECT_THROW(io::read_features(tmp / "f.bin", false), Error);
}

TEST(Io, ResizeKeepsConstantImagesConstant) {
  const auto x = ImageTensor::filled({10, 6, 3}, 0.25);
  const auto r = io::resize_bilinear(x, 7, 13);
  EXPECT_EQ(r.shape(), (ImageShape{7, 13, 3}));
  for (double v : r.values()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(Io, ContentHashDependsOnValuesAndShape) {
  const auto a = ImageTensor::filled({2, 2, 1}, 0.5);
  const auto b = ImageTensor::filled({1, 4, 1}, 0.5);
  const auto c = ImageTensor::filled({2, 2, 1}, 0.25);
  EXPECT_EQ(io::content_hash(a), io::content_hash(ImageTensor::filled({2, 2, 1}, 0.5)));
  EXPECT_NE(io::content_hash(a), io::content_hash(b));
  EXPECT_NE(io::content_hash(a), io::content_hash(c));
  EXPECT_EQ(io::sha256_hex(std::string("abc")),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
