#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "vlmattack/encoders.hpp"

namespace vlmattack {

class Segmenter;
class Inpainter;

/// Bridges to out-of-process models (real CLIP, segmentation and inpainting
/// networks). Each call runs `command [--weights PATH] <verb> <files...>` and
/// exchanges data through temporary files:
///
///   encoder:   info     INFO_OUT
///              forward  IMAGE FEATURES_OUT
///              backward IMAGE FEATURE_GRAD GRAD_OUT
///              text     TEXT_FILE LATENT_OUT
///              projection MATRIX_OUT
///   segmenter: segment IMAGE OBJECT_FILE PROB_OUT
///   inpainter: inpaint IMAGE MASK PROMPT_FILE IMAGE_OUT
///
/// Images, masks, probability maps and gradients use the sidecar format;
/// feature and matrix files use the feature format (io.hpp). `info` writes
/// {"input": [h, w, c], "grid": [gh, gw], "feature_dim": n, "latent_dim": l}
/// to its single file argument.

struct CommandResult {
  int exit_code = -1;
  std::string output;  // stdout and stderr, for diagnostics
};

// Runs argv[0] (looked up on PATH) and waits for it.
CommandResult run_command(const std::vector<std::string>& argv);

// Scratch directory removed on destruction.
class ScratchDir {
 public:
  ScratchDir();
  ~ScratchDir();
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path file(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

// Splits a command string on whitespace (no quoting).
std::vector<std::string> split_command(const std::string& command);

VisionBackend make_external_backend(const BackendConfig& config);

// config: {"id": "external", "command": "...", "weights": "...", "tolerance": 0.05}
std::shared_ptr<const Segmenter> make_external_segmenter(const nlohmann::json& config);
std::shared_ptr<const Inpainter> make_external_inpainter(const nlohmann::json& config);

}  // namespace vlmattack
