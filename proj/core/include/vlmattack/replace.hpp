#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include "vlmattack/encoders.hpp"
#include "vlmattack/types.hpp"

namespace vlmattack {

/// H x W mask with values exactly 0 or 1. The target region is 0, the
/// background 1.
class BinaryMask {
 public:
  BinaryMask(int height, int width, std::vector<std::uint8_t> values);
  static BinaryMask filled(int height, int width, std::uint8_t value);

  int height() const { return height_; }
  int width() const { return width_; }
  std::uint8_t at(int y, int x) const { return values_[static_cast<std::size_t>(y) * width_ + x]; }
  const std::vector<std::uint8_t>& values() const { return values_; }
  std::size_t zero_count() const;

  bool operator==(const BinaryMask&) const = default;

 private:
  int height_;
  int width_;
  std::vector<std::uint8_t> values_;
};

struct SegmentOptions {
  double threshold = 0.5;  // pixels with probability > threshold become target (0)
  int dilation = 0;        // square dilation of the target region, in pixels
};

/// Text-prompted segmentation backend: per-pixel probability that the pixel
/// belongs to the named object.
class Segmenter {
 public:
  virtual ~Segmenter() = default;
  virtual std::string id() const = 0;
  // H*W values in [0, 1], row-major.
  virtual std::vector<double> probability_map(const ImageTensor& x, std::string_view object) const = 0;
  virtual bool concurrent_safe() const { return true; }
};

/// Prompt-conditioned inpainting backend. fill receives the unmasked image
/// and the mask so it can use the surrounding context.
class Inpainter {
 public:
  virtual ~Inpainter() = default;
  virtual std::string id() const = 0;
  virtual ImageTensor fill(const ImageTensor& x, const BinaryMask& m, std::string_view prompt) const = 0;
  // Largest mean absolute background change accepted; 0 means exact.
  virtual double background_tolerance() const { return 0.0; }
  virtual bool concurrent_safe() const { return true; }
};

// Thresholds a probability map; throws TargetNotFound when no pixel exceeds the threshold.
BinaryMask threshold_mask(std::span<const double> probabilities, int height, int width,
                          const SegmentOptions& options = {});

BinaryMask segment_target(const Segmenter& segmenter, const ImageTensor& x, std::string_view object,
                          const SegmentOptions& options = {});

// m broadcast over channels times x.
ImageTensor apply_mask(const ImageTensor& x, const BinaryMask& m);

// Runs the backend and checks its output keeps the background.
ImageTensor inpaint(const Inpainter& inpainter, const ImageTensor& x, const BinaryMask& m,
                    std::string_view prompt);

/// Always returns the same probability map.
class ProbabilityMapSegmenter final : public Segmenter {
 public:
  ProbabilityMapSegmenter(int height, int width, std::vector<double> probabilities);

  std::string id() const override { return "probability_map"; }
  std::vector<double> probability_map(const ImageTensor& x, std::string_view object) const override;

 private:
  int height_;
  int width_;
  std::vector<double> probabilities_;
};

/// Probability 1 inside a centred box covering `fraction` of each side, 0 elsewhere.
class CenterBoxSegmenter final : public Segmenter {
 public:
  explicit CenterBoxSegmenter(double fraction = 0.5);

  std::string id() const override { return "center_box"; }
  std::vector<double> probability_map(const ImageTensor& x, std::string_view object) const override;

 private:
  double fraction_;
};

/// m*x + (1-m)*c with a fixed per-channel colour c.
class ConstantFillInpainter final : public Inpainter {
 public:
  explicit ConstantFillInpainter(std::vector<double> color);

  std::string id() const override { return "constant"; }
  ImageTensor fill(const ImageTensor& x, const BinaryMask& m, std::string_view prompt) const override;

 private:
  std::vector<double> color_;
};

/// Like ConstantFillInpainter but the colour is derived from the prompt text,
/// so different prompts give different targets.
class PromptColorInpainter final : public Inpainter {
 public:
  explicit PromptColorInpainter(std::uint64_t seed = 0) : seed_(seed) {}

  std::string id() const override { return "prompt_color"; }
  ImageTensor fill(const ImageTensor& x, const BinaryMask& m, std::string_view prompt) const override;

  std::vector<double> color_for(std::string_view prompt, int channels) const;

 private:
  std::uint64_t seed_;
};

// {"id": "center_box", "fraction": 0.5} / {"id": "external", "command": ...}
std::shared_ptr<const Segmenter> make_segmenter(const nlohmann::json& config);
// {"id": "constant", "color": [..]} / {"id": "prompt_color", "seed": 0} / {"id": "external", ...}
std::shared_ptr<const Inpainter> make_inpainter(const nlohmann::json& config);

struct ReplaceOutput {
  ImageTensor target_image;        // 8-bit quantized
  Eigen::MatrixXd target_features;  // N_f x (N_h*N_w), float32 precision
  BinaryMask mask;
  int grid_h = 0;
  int grid_w = 0;
};

/// segment -> mask -> inpaint -> encode, with results cached by
/// (image hash, object, prompt, backend ids, options). The cache lives in
/// memory and, when a directory is given, on disk:
///   <dir>/<key>/target.png, features.bin, mask.png, provenance.json
class ReplacePipeline {
 public:
  ReplacePipeline(std::shared_ptr<const VisualEncoder> encoder,
                  std::shared_ptr<const Segmenter> segmenter,
                  std::shared_ptr<const Inpainter> inpainter, SegmentOptions options = {},
                  std::optional<std::filesystem::path> cache_dir = std::nullopt);

  ReplaceOutput replace(const ImageTensor& x, const TargetSpec& spec);

  std::string cache_key(const ImageTensor& x, const TargetSpec& spec) const;
  std::size_t cache_hits() const;
  std::size_t cache_misses() const;

  const VisualEncoder& encoder() const { return *encoder_; }

 private:
  std::optional<ReplaceOutput> load_from_disk(const std::string& key) const;
  void store_to_disk(const std::string& key, const ReplaceOutput& out, const TargetSpec& spec) const;

  std::shared_ptr<const VisualEncoder> encoder_;
  std::shared_ptr<const Segmenter> segmenter_;
  std::shared_ptr<const Inpainter> inpainter_;
  SegmentOptions options_;
  std::optional<std::filesystem::path> cache_dir_;

  mutable std::mutex mutex_;
  std::map<std::string, ReplaceOutput> memory_;
  std::size_t hits_ = 0;
  std::size_t misses_ = 0;
};

}  // namespace vlmattack
