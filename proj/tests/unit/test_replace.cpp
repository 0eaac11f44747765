#include <gtest/gtest.h>

#include <atomic>

#include <nlohmann/json.hpp>

#include "support.hpp"
#include "vlmattack/errors.hpp"
#include "vlmattack/io.hpp"
#include "vlmattack/replace.hpp"

using namespace vlmattack;
using namespace vlmattack::testing;

namespace {

template <typename Inner>
bool nested_is(const StageError& e) {
  try {
    std::rethrow_if_nested(e);
  } catch (const Inner&) {
    return true;
  } catch (...) {
  }
  return false;
}

class CountingSegmenter final : public Segmenter {
 public:
  std::string id() const override { return "counting"; }
  std::vector<double> probability_map(const ImageTensor& x, std::string_view object) const override {
    ++calls;
    return CenterBoxSegmenter(0.5).probability_map(x, object);
  }
  mutable std::atomic<int> calls{0};
};

class BleedingInpainter final : public Inpainter {
 public:
  std::string id() const override { return "bleeding"; }
  ImageTensor fill(const ImageTensor& x, const BinaryMask&, std::string_view) const override {
    return ImageTensor::filled(x.shape(), 0.5);
  }
};

class ThrowingEncoder final : public VisualEncoder {
 public:
  std::string id() const override { return "throwing"; }
  GridSpec spec() const override { return {{8, 8, 3}, 3, 2, 2}; }
  PatchGridFeatures encode(const ImageTensor&) const override { throw BackendError("encoder offline"); }
  std::vector<double> backward(const ImageTensor&, const Eigen::MatrixXd&) const override {
    throw BackendError("encoder offline");
  }
};

const TargetSpec kSpec{"balloon", "a red apple"};

}  // namespace

TEST(ThresholdMask, MatchesBruteForce) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const int h = 5 + trial % 4, w = 7;
    std::vector<double> p(static_cast<std::size_t>(h) * w);
    for (auto& v : p) v = uniform01(rng);
    p[3] = 0.99;
    const SegmentOptions opt{0.3 + 0.02 * trial, 0};
    const auto m = threshold_mask(p, h, w, opt);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        EXPECT_EQ(m.at(y, x), p[static_cast<std::size_t>(y) * w + x] > opt.threshold ? 0 : 1);
      }
    }
  }
}

TEST(ThresholdMask, ThresholdIsStrict) {
  const std::vector<double> p{0.5, 0.5, 0.51, 0.2};
  const auto m = threshold_mask(p, 2, 2);
  EXPECT_EQ(m.values(), (std::vector<std::uint8_t>{1, 1, 0, 1}));
  EXPECT_THROW(threshold_mask(std::vector<double>{0.5, 0.5}, 1, 2), TargetNotFound);
}

TEST(ThresholdMask, DilationGrowsTargetSquare) {
  std::vector<double> p(49, 0.0);
  p[3 * 7 + 3] = 1.0;
  const auto m = threshold_mask(p, 7, 7, {0.5, 2});
  for (int y = 0; y < 7; ++y) {
    for (int x = 0; x < 7; ++x) {
      const bool inside = std::abs(y - 3) <= 2 && std::abs(x - 3) <= 2;
      EXPECT_EQ(m.at(y, x), inside ? 0 : 1);
    }
  }
  EXPECT_EQ(m.zero_count(), 25u);
}

TEST(ThresholdMask, RejectsBadInput) {
  EXPECT_THROW(threshold_mask(std::vector<double>(5, 1.0), 2, 2), ContractViolation);
  EXPECT_THROW(threshold_mask(std::vector<double>{std::nan(""), 1, 1, 1}, 2, 2), BackendError);
  EXPECT_THROW(BinaryMask(2, 2, {0, 1, 2, 1}), ContractViolation);
}

TEST(ApplyMask, IsElementwiseProductBroadcastOverChannels) {
  Rng rng(2);
  const auto x = random_image({3, 4, 3}, rng);
  const BinaryMask m(3, 4, {1, 0, 1, 1, 0, 0, 1, 0, 1, 1, 1, 0});
  const auto y = apply_mask(x, m);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) {
      for (int k = 0; k < 3; ++k) EXPECT_EQ(y.at(r, c, k), m.at(r, c) * x.at(r, c, k));
    }
  }
  EXPECT_THROW(apply_mask(x, BinaryMask::filled(4, 3, 1)), ContractViolation);
}

TEST(Inpaint, KeepsBackgroundAndFillsTarget) {
  Rng rng(3);
  const auto x = random_image({8, 8, 3}, rng);
  const auto m = segment_target(CenterBoxSegmenter(0.5), x, "thing");
  EXPECT_EQ(m.zero_count(), 16u);
  const std::vector<double> color{0.1, 0.2, 0.3};
  const ConstantFillInpainter fill(color);
  const auto y = inpaint(fill, x, m, "anything");
  for (int r = 0; r < 8; ++r) {
    for (int c = 0; c < 8; ++c) {
      for (int k = 0; k < 3; ++k) {
        EXPECT_EQ(y.at(r, c, k), m.at(r, c) ? x.at(r, c, k) : color[k]);
      }
    }
  }
}

TEST(Inpaint, RejectsEmptyRegionEmptyPromptAndBackgroundChanges) {
  Rng rng(4);
  const auto x = random_image({8, 8, 3}, rng);
  const PromptColorInpainter fill;
  EXPECT_THROW(inpaint(fill, x, BinaryMask::filled(8, 8, 1), "an apple"), ContractViolation);
  const auto m = segment_target(CenterBoxSegmenter(0.5), x, "thing");
  EXPECT_THROW(inpaint(fill, x, m, ""), ContractViolation);
  EXPECT_THROW(inpaint(BleedingInpainter(), x, m, "an apple"), BackendError);
}

TEST(PromptColorInpainter, ColourDependsOnPrompt) {
  const PromptColorInpainter fill;
  EXPECT_EQ(fill.color_for("a red apple", 3), fill.color_for("a red apple", 3));
  EXPECT_NE(fill.color_for("a red apple", 3), fill.color_for("a blue car", 3));
  for (double v : fill.color_for("kite", 3)) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Factories, KnownAndUnknownIds) {
  EXPECT_EQ(make_segmenter({{"id", "center_box"}, {"fraction", 0.25}})->id(), "center_box");
  EXPECT_EQ(make_inpainter({{"id", "constant"}, {"color", {0.0, 0.0, 0.0}}})->id(), "constant");
  EXPECT_THROW(make_segmenter({{"id", "clipseg-ish"}}), BackendError);
  EXPECT_THROW(make_inpainter({{"id", "nope"}}), BackendError);
}

TEST(ReplacePipeline, OutputIsQuantizedAndFeaturesMatchEncoder) {
  Rng rng(5);
  const auto b = toy("avgpool", {16, 16, 3}, 4);
  ReplacePipeline p(b.encoder, std::make_shared<CenterBoxSegmenter>(0.5),
                    std::make_shared<PromptColorInpainter>());
  const auto x = quantize_8bit(random_image({16, 16, 3}, rng));
  const auto out = p.replace(x, kSpec);
  EXPECT_EQ(quantize_8bit(out.target_image), out.target_image);
  EXPECT_EQ(out.grid_h, 4);
  const Eigen::MatrixXd f = patch_features(b.encoder->encode(out.target_image));
  EXPECT_LT((f - out.target_features).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_EQ(out.mask.zero_count(), 64u);
}

TEST(ReplacePipeline, MemoryAndDiskCacheHits) {
  Rng rng(6);
  TempDir dir;
  const auto b = toy("avgpool", {16, 16, 3}, 4);
  auto seg = std::make_shared<CountingSegmenter>();
  const auto x = quantize_8bit(random_image({16, 16, 3}, rng));

  ReplacePipeline first(b.encoder, seg, std::make_shared<PromptColorInpainter>(), {}, dir.path());
  const auto a = first.replace(x, kSpec);
  const auto again = first.replace(x, kSpec);
  EXPECT_EQ(first.cache_misses(), 1u);
  EXPECT_EQ(first.cache_hits(), 1u);
  EXPECT_EQ(seg->calls, 1);
  EXPECT_EQ(again.target_image, a.target_image);

  ReplacePipeline second(b.encoder, seg, std::make_shared<PromptColorInpainter>(), {}, dir.path());
  const auto disk = second.replace(x, kSpec);
  EXPECT_EQ(seg->calls, 1);
  EXPECT_EQ(second.cache_hits(), 1u);
  EXPECT_EQ(disk.target_image, a.target_image);
  EXPECT_EQ(disk.mask, a.mask);
  EXPECT_EQ(disk.target_features, a.target_features);

  second.replace(x, {"balloon", "a blue car"});
  EXPECT_EQ(seg->calls, 2);
  EXPECT_NE(second.cache_key(x, kSpec), second.cache_key(x, {"balloon", "a blue car"}));
}

TEST(ReplacePipeline, FailuresNameTheStage) {
  Rng rng(7);
  const auto x = random_image({8, 8, 3}, rng);
  const auto b = toy("avgpool", {8, 8, 3}, 2);

  ReplacePipeline no_target(b.encoder, std::make_shared<ProbabilityMapSegmenter>(8, 8, std::vector<double>(64, 0.1)),
                            std::make_shared<PromptColorInpainter>());
  try {
    no_target.replace(x, kSpec);
    FAIL() << "expected StageError";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "segment");
    EXPECT_TRUE(nested_is<TargetNotFound>(e));
  }

  ReplacePipeline bleeding(b.encoder, std::make_shared<CenterBoxSegmenter>(), std::make_shared<BleedingInpainter>());
  try {
    bleeding.replace(x, kSpec);
    FAIL() << "expected StageError";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "inpaint");
    EXPECT_TRUE(nested_is<BackendError>(e));
  }

  ReplacePipeline offline(std::make_shared<ThrowingEncoder>(), std::make_shared<CenterBoxSegmenter>(),
                          std::make_shared<PromptColorInpainter>());
  try {
    offline.replace(x, kSpec);
    FAIL() << "expected StageError";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "encode");
  }

  EXPECT_THROW(no_target.replace(x, {"", "x"}), ContractViolation);
}
