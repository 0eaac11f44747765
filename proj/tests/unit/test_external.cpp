#include <gtest/gtest.h>

#include <cstdlib>

#include <nlohmann/json.hpp>

#include "support.hpp"
#include "vlmattack/encoders.hpp"
#include "vlmattack/errors.hpp"
#include "vlmattack/evaluation.hpp"
#include "vlmattack/external.hpp"
#include "vlmattack/replace.hpp"

using namespace vlmattack;
using namespace vlmattack::testing;

namespace {

std::string bridge() { return source_path("scripts/stub_bridge.py").string(); }

VisionBackend external_backend() {
  BackendConfig c;
  c.id = "external";
  c.command = bridge();
  c.weights_path = "/nonexistent/weights.bin";  // accepted and ignored by the stub
  return BackendRegistry::instance().create(c);
}

// Sets an environment variable for the lifetime of the object.
class ScopedEnv {
 public:
  ScopedEnv(const char* name, const char* value) : name_(name) { ::setenv(name, value, 1); }
  ~ScopedEnv() { ::unsetenv(name_); }

 private:
  const char* name_;
};

}  // namespace

TEST(Command, SplitAndRun) {
  EXPECT_EQ(split_command("  python3  bridge.py --x "), (std::vector<std::string>{"python3", "bridge.py", "--x"}));
  EXPECT_EQ(run_command({"true"}).exit_code, 0);
  EXPECT_EQ(run_command({"sh", "-c", "echo hi; exit 4"}).exit_code, 4);
  EXPECT_NE(run_command({"sh", "-c", "echo hi; exit 4"}).output.find("hi"), std::string::npos);
  std::filesystem::path kept;
  {
    ScratchDir s;
    kept = s.path();
    EXPECT_TRUE(std::filesystem::is_directory(kept));
  }
  EXPECT_FALSE(std::filesystem::exists(kept));
}

TEST(ExternalEncoder, MatchesBuiltInAveragePool) {
  const auto ext = external_backend();
  const auto spec = ext.encoder->spec();
  EXPECT_EQ(spec.input, (ImageShape{16, 16, 3}));
  EXPECT_EQ(spec.grid_h, 4);
  EXPECT_EQ(spec.feature_dim, 3);

  const AveragePoolEncoder builtin({16, 16, 3}, 4, 4);
  Rng rng(1);
  const auto x = random_image({16, 16, 3}, rng);
  const Eigen::MatrixXd a = ext.encoder->encode(x).matrix();
  const Eigen::MatrixXd b = builtin.encode(x).matrix();
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-6);

  Eigen::MatrixXd g(3, 17);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = standard_normal(rng);
  const auto ga = ext.encoder->backward(x, g);
  const auto gb = builtin.backward(x, g);
  ASSERT_EQ(ga.size(), gb.size());
  for (std::size_t i = 0; i < ga.size(); ++i) EXPECT_NEAR(ga[i], gb[i], 1e-6);
}

TEST(ExternalEncoder, TextAndProjection) {
  const auto ext = external_backend();
  const auto z = ext.text->encode("abc");
  // letters a, b, c once each plus one, normalised
  ASSERT_EQ(z.size(), 3);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(z[i], 1.0 / std::sqrt(3.0), 1e-6);
  Rng rng(2);
  const auto x = random_image({16, 16, 3}, rng);
  const auto f = ext.encoder->encode(x);
  EXPECT_LT((ext.projection->project(f) - f.cls()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ExternalSegmenterAndInpainter, RunThroughTheReplacePipeline) {
  const auto seg = make_segmenter({{"id", "external"}, {"command", bridge()}});
  const auto inp = make_inpainter({{"id", "external"}, {"command", bridge()}, {"tolerance", 1e-6}});
  Rng rng(3);
  const auto x = quantize_8bit(random_image({16, 16, 3}, rng));
  EXPECT_EQ(segment_target(*seg, x, "balloon"), segment_target(CenterBoxSegmenter(0.5), x, "balloon"));
  const auto ext = external_backend();
  ReplacePipeline p(ext.encoder, seg, inp);
  const auto out = p.replace(x, {"balloon", "an apple"});
  for (int r = 0; r < 16; ++r) {
    for (int c = 0; c < 16; ++c) {
      if (!out.mask.at(r, c)) continue;
      for (int k = 0; k < 3; ++k) EXPECT_NEAR(out.target_image.at(r, c, k), x.at(r, c, k), 1e-6);
    }
  }
  EXPECT_NE(out.target_image, x);
}

TEST(ExternalEmbedding, CosineOfLetterHistograms) {
  const auto sim = eval::make_similarity({{"id", "letters"}, {"command", bridge()}});
  EXPECT_EQ(sim->id(), "letters");
  EXPECT_NEAR(sim->similarity("ab", "ba"), 1.0, 1e-12);
  EXPECT_NEAR(sim->similarity("aa", "ab"), 1.0 / std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(sim->similarity("a", "b"), 0.0, 1e-12);
}

TEST(ExternalBackends, FailuresSurfaceAsErrors) {
  EXPECT_THROW(
      {
        BackendConfig c;
        c.id = "external";
        c.command = "/nonexistent/bridge";
        BackendRegistry::instance().create(c);
      },
      BackendError);

  const auto ext = external_backend();
  Rng rng(4);
  const auto x = random_image({16, 16, 3}, rng);
  {
    ScopedEnv fail("STUB_BRIDGE_FAIL", "forward");
    EXPECT_THROW(ext.encoder->encode(x), BackendError);
  }
  {
    ScopedEnv fail("STUB_BRIDGE_FAIL", "segment");
    ReplacePipeline p(ext.encoder, make_segmenter({{"id", "external"}, {"command", bridge()}}),
                      std::make_shared<PromptColorInpainter>());
    try {
      p.replace(x, {"balloon", "an apple"});
      FAIL() << "expected StageError";
    } catch (const StageError& e) {
      EXPECT_EQ(e.stage(), "segment");
      EXPECT_NE(std::string(e.what()).find("exited with"), std::string::npos) << e.what();
    }
  }
  {
    ScopedEnv fail("STUB_BRIDGE_FAIL", "embed");
    EXPECT_THROW(eval::make_similarity({{"id", "letters"}, {"command", bridge()}})->similarity("a", "b"),
                 BackendError);
  }
}
