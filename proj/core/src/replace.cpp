#include "vlmattack/replace.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <sstream>

#include <nlohmann/json.hpp>

#include "vlmattack/errors.hpp"
#include "vlmattack/external.hpp"
#include "vlmattack/io.hpp"
#include "vlmattack/random.hpp"

namespace vlmattack {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- mask

BinaryMask::BinaryMask(int height, int width, std::vector<std::uint8_t> values)
    : height_(height), width_(width), values_(std::move(values)) {
  if (height_ <= 0 || width_ <= 0) throw ContractViolation("mask dimensions must be positive");
  if (values_.size() != static_cast<std::size_t>(height_) * width_) {
    throw ContractViolation("mask has " + std::to_string(values_.size()) + " values for a " +
                            std::to_string(height_) + "x" + std::to_string(width_) + " grid");
  }
  for (auto v : values_) {
    if (v > 1) throw ContractViolation("mask values must be 0 or 1");
  }
}

BinaryMask BinaryMask::filled(int height, int width, std::uint8_t value) {
  return BinaryMask(height, width,
                    std::vector<std::uint8_t>(static_cast<std::size_t>(height) * width, value));
}

std::size_t BinaryMask::zero_count() const {
  return static_cast<std::size_t>(std::count(values_.begin(), values_.end(), 0));
}

BinaryMask threshold_mask(std::span<const double> probabilities, int height, int width,
                          const SegmentOptions& options) {
  if (probabilities.size() != static_cast<std::size_t>(height) * width) {
    throw ContractViolation("probability map has " + std::to_string(probabilities.size()) +
                            " values, expected " + std::to_string(height * width));
  }
  if (options.dilation < 0) throw ContractViolation("dilation must be >= 0");
  std::vector<std::uint8_t> m(probabilities.size(), 1);
  bool any = false;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!std::isfinite(probabilities[i])) throw BackendError("probability map is not finite");
    if (probabilities[i] > options.threshold) {
      m[i] = 0;
      any = true;
    }
  }
  if (!any) {
    throw TargetNotFound("no pixel has target probability above " +
                         std::to_string(options.threshold));
  }
  if (options.dilation > 0) {
    const int r = options.dilation;
    std::vector<std::uint8_t> d = m;
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        if (m[static_cast<std::size_t>(y) * width + x] != 0) continue;
        for (int yy = std::max(0, y - r); yy <= std::min(height - 1, y + r); ++yy) {
          for (int xx = std::max(0, x - r); xx <= std::min(width - 1, x + r); ++xx) {
            d[static_cast<std::size_t>(yy) * width + xx] = 0;
          }
        }
      }
    }
    m = std::move(d);
  }
  return BinaryMask(height, width, std::move(m));
}

BinaryMask segment_target(const Segmenter& segmenter, const ImageTensor& x, std::string_view object,
                          const SegmentOptions& options) {
  if (object.empty()) throw ContractViolation("target object must not be empty");
  const auto probabilities = segmenter.probability_map(x, object);
  return threshold_mask(probabilities, x.height(), x.width(), options);
}

namespace {

void check_mask_shape(const ImageTensor& x, const BinaryMask& m) {
  if (m.height() != x.height() || m.width() != x.width()) {
    throw ContractViolation("mask is " + std::to_string(m.height()) + "x" +
                            std::to_string(m.width()) + ", image is " + to_string(x.shape()));
  }
}

}  // namespace

ImageTensor apply_mask(const ImageTensor& x, const BinaryMask& m) {
  check_mask_shape(x, m);
  std::vector<double> out(x.data());
  const int c = x.channels();
  for (std::size_t p = 0; p < m.values().size(); ++p) {
    if (m.values()[p] == 0) std::fill_n(out.begin() + p * c, c, 0.0);
  }
  return ImageTensor(x.shape(), std::move(out));
}

ImageTensor inpaint(const Inpainter& inpainter, const ImageTensor& x, const BinaryMask& m,
                    std::string_view prompt) {
  check_mask_shape(x, m);
  if (m.zero_count() == 0) throw ContractViolation("mask has no region to fill");
  if (prompt.empty()) throw ContractViolation("inpainting prompt must not be empty");
  ImageTensor out = inpainter.fill(x, m, prompt);
  if (!(out.shape() == x.shape())) {
    throw BackendError("inpainter '" + inpainter.id() + "' returned " + to_string(out.shape()) +
                       " for input " + to_string(x.shape()));
  }
  const int c = x.channels();
  double total = 0.0;
  std::size_t count = 0;
  bool exact = true;
  for (std::size_t p = 0; p < m.values().size(); ++p) {
    if (m.values()[p] == 0) continue;
    for (int k = 0; k < c; ++k) {
      const double d = std::abs(out.data()[p * c + k] - x.data()[p * c + k]);
      exact = exact && d == 0.0;
      total += d;
      ++count;
    }
  }
  const double tol = inpainter.background_tolerance();
  if (tol == 0.0 ? !exact : (count > 0 && total / count > tol)) {
    throw BackendError("inpainter '" + inpainter.id() + "' changed the background beyond tolerance");
  }
  return out;
}

// ---------------------------------------------------------------- stubs

ProbabilityMapSegmenter::ProbabilityMapSegmenter(int height, int width,
                                                 std::vector<double> probabilities)
    : height_(height), width_(width), probabilities_(std::move(probabilities)) {
  if (probabilities_.size() != static_cast<std::size_t>(height_) * width_) {
    throw ContractViolation("probability map size does not match its dimensions");
  }
}

std::vector<double> ProbabilityMapSegmenter::probability_map(const ImageTensor& x,
                                                             std::string_view) const {
  if (x.height() != height_ || x.width() != width_) {
    throw BackendError("probability map is " + std::to_string(height_) + "x" +
                       std::to_string(width_) + ", image is " + to_string(x.shape()));
  }
  return probabilities_;
}

CenterBoxSegmenter::CenterBoxSegmenter(double fraction) : fraction_(fraction) {
  if (!(fraction_ > 0.0 && fraction_ <= 1.0)) throw ContractViolation("box fraction must be in (0, 1]");
}

std::vector<double> CenterBoxSegmenter::probability_map(const ImageTensor& x,
                                                        std::string_view) const {
  const int bh = std::max(1, static_cast<int>(std::lround(x.height() * fraction_)));
  const int bw = std::max(1, static_cast<int>(std::lround(x.width() * fraction_)));
  const int y0 = (x.height() - bh) / 2;
  const int x0 = (x.width() - bw) / 2;
  std::vector<double> p(static_cast<std::size_t>(x.height()) * x.width(), 0.0);
  for (int y = y0; y < y0 + bh; ++y) {
    for (int xx = x0; xx < x0 + bw; ++xx) p[static_cast<std::size_t>(y) * x.width() + xx] = 1.0;
  }
  return p;
}

namespace {

ImageTensor fill_constant(const ImageTensor& x, const BinaryMask& m, const std::vector<double>& color) {
  if (color.size() != static_cast<std::size_t>(x.channels())) {
    throw ContractViolation("fill colour has " + std::to_string(color.size()) +
                            " channels, image has " + std::to_string(x.channels()));
  }
  std::vector<double> out(x.data());
  const int c = x.channels();
  for (std::size_t p = 0; p < m.values().size(); ++p) {
    if (m.values()[p] == 0) std::copy(color.begin(), color.end(), out.begin() + p * c);
  }
  return ImageTensor(x.shape(), std::move(out));
}

}  // namespace

ConstantFillInpainter::ConstantFillInpainter(std::vector<double> color) : color_(std::move(color)) {
  for (double v : color_) {
    if (!(v >= 0.0 && v <= 1.0)) throw ContractViolation("fill colour must be in [0, 1]");
  }
}

ImageTensor ConstantFillInpainter::fill(const ImageTensor& x, const BinaryMask& m,
                                        std::string_view) const {
  if (color_.size() == 1 && x.channels() != 1) {
    return fill_constant(x, m, std::vector<double>(x.channels(), color_[0]));
  }
  return fill_constant(x, m, color_);
}

std::vector<double> PromptColorInpainter::color_for(std::string_view prompt, int channels) const {
  Rng rng(mix_seed(seed_, fnv1a(prompt)));
  std::vector<double> color(channels);
  // Multiples of 1/255 so the filled region survives 8-bit storage.
  for (auto& v : color) v = static_cast<double>(uniform_index(rng, 256)) / 255.0;
  return color;
}

ImageTensor PromptColorInpainter::fill(const ImageTensor& x, const BinaryMask& m,
                                       std::string_view prompt) const {
  return fill_constant(x, m, color_for(prompt, x.channels()));
}

std::shared_ptr<const Segmenter> make_segmenter(const nlohmann::json& config) {
  const std::string id = config.value("id", "center_box");
  if (id == "center_box") return std::make_shared<CenterBoxSegmenter>(config.value("fraction", 0.5));
  if (id == "external") return make_external_segmenter(config);
  throw BackendError("unknown segmenter '" + id + "' (known: center_box, external)");
}

std::shared_ptr<const Inpainter> make_inpainter(const nlohmann::json& config) {
  const std::string id = config.value("id", "prompt_color");
  if (id == "constant") {
    return std::make_shared<ConstantFillInpainter>(
        config.value("color", std::vector<double>{0.5}));
  }
  if (id == "prompt_color") {
    return std::make_shared<PromptColorInpainter>(config.value("seed", std::uint64_t{0}));
  }
  if (id == "external") return make_external_inpainter(config);
  throw BackendError("unknown inpainter '" + id + "' (known: constant, prompt_color, external)");
}

// ---------------------------------------------------------------- pipeline

ReplacePipeline::ReplacePipeline(std::shared_ptr<const VisualEncoder> encoder,
                                 std::shared_ptr<const Segmenter> segmenter,
                                 std::shared_ptr<const Inpainter> inpainter, SegmentOptions options,
                                 std::optional<fs::path> cache_dir)
    : encoder_(std::move(encoder)),
      segmenter_(std::move(segmenter)),
      inpainter_(std::move(inpainter)),
      options_(options),
      cache_dir_(std::move(cache_dir)) {
  if (!encoder_ || !segmenter_ || !inpainter_) {
    throw BackendError("replace pipeline needs an encoder, a segmenter and an inpainter");
  }
}

std::string ReplacePipeline::cache_key(const ImageTensor& x, const TargetSpec& spec) const {
  const auto s = encoder_->spec();
  nlohmann::json key = {
      {"image", io::content_hash(x)},
      {"object", spec.target_object},
      {"prompt", spec.target_prompt},
      {"encoder", encoder_->id()},
      {"grid", {s.feature_dim, s.grid_h, s.grid_w}},
      {"segmenter", segmenter_->id()},
      {"inpainter", inpainter_->id()},
      {"threshold", options_.threshold},
      {"dilation", options_.dilation},
  };
  return io::sha256_hex(key.dump()).substr(0, 32);
}

std::size_t ReplacePipeline::cache_hits() const {
  std::lock_guard lock(mutex_);
  return hits_;
}

std::size_t ReplacePipeline::cache_misses() const {
  std::lock_guard lock(mutex_);
  return misses_;
}

namespace {

template <typename F>
auto run_stage(const char* stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    std::throw_with_nested(StageError(stage, e.what()));
  }
}

ImageTensor mask_image(const BinaryMask& m) {
  std::vector<double> v(m.values().begin(), m.values().end());
  return ImageTensor({m.height(), m.width(), 1}, std::move(v));
}

}  // namespace

ReplaceOutput ReplacePipeline::replace(const ImageTensor& x, const TargetSpec& spec) {
  spec.validate();
  const std::string key = cache_key(x, spec);
  {
    std::lock_guard lock(mutex_);
    if (auto it = memory_.find(key); it != memory_.end()) {
      ++hits_;
      return it->second;
    }
  }
  if (auto cached = run_stage("cache", [&] { return load_from_disk(key); })) {
    std::lock_guard lock(mutex_);
    ++hits_;
    return memory_.emplace(key, std::move(*cached)).first->second;
  }

  const auto s = encoder_->spec();
  BinaryMask mask =
      run_stage("segment", [&] { return segment_target(*segmenter_, x, spec.target_object, options_); });
  ImageTensor target = run_stage("inpaint", [&] {
    return quantize_8bit(inpaint(*inpainter_, x, mask, spec.target_prompt));
  });
  Eigen::MatrixXd features = run_stage("encode", [&] {
    Eigen::MatrixXd f = patch_features(encoder_->encode(target));
    return Eigen::MatrixXd(f.cast<float>().cast<double>());
  });

  ReplaceOutput out{std::move(target), std::move(features), std::move(mask), s.grid_h, s.grid_w};
  run_stage("cache", [&] {
    store_to_disk(key, out, spec);
    return 0;
  });
  std::lock_guard lock(mutex_);
  ++misses_;
  return memory_.emplace(key, std::move(out)).first->second;
}

std::optional<ReplaceOutput> ReplacePipeline::load_from_disk(const std::string& key) const {
  if (!cache_dir_) return std::nullopt;
  const fs::path dir = *cache_dir_ / key;
  const fs::path target = dir / "target.png";
  const fs::path features = dir / "features.bin";
  const fs::path mask = dir / "mask.png";
  if (!fs::exists(target) || !fs::exists(features) || !fs::exists(mask)) return std::nullopt;

  ImageTensor image = io::read_png(target);
  auto f = io::read_features(features, false);
  const ImageTensor mask_img = io::read_png(mask);
  std::vector<std::uint8_t> m(mask_img.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = mask_img.data()[i] >= 0.5 ? 1 : 0;
  return ReplaceOutput{std::move(image), std::move(f.matrix),
                       BinaryMask(mask_img.height(), mask_img.width(), std::move(m)), f.grid_h,
                       f.grid_w};
}

void ReplacePipeline::store_to_disk(const std::string& key, const ReplaceOutput& out,
                                    const TargetSpec& spec) const {
  if (!cache_dir_) return;
  std::lock_guard lock(mutex_);
  const fs::path dir = *cache_dir_ / key;
  fs::create_directories(dir);
  io::write_png(dir / "target.png", out.target_image);
  io::write_features(dir / "features.bin", out.target_features, out.grid_h, out.grid_w);
  io::write_png(dir / "mask.png", mask_image(out.mask));
  const nlohmann::json provenance = {
      {"encoder", encoder_->id()},
      {"segmenter", segmenter_->id()},
      {"inpainter", inpainter_->id()},
      {"threshold", options_.threshold},
      {"dilation", options_.dilation},
      {"target_object", spec.target_object},
      {"target_prompt", spec.target_prompt},
  };
  io::write_text_atomic(dir / "provenance.json", provenance.dump(2) + "\n");
}

}  // namespace vlmattack
