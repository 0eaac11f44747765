#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include "vlmattack/types.hpp"

namespace vlmattack {

// Input geometry and output layout a visual encoder commits to.
struct GridSpec {
  ImageShape input;
  int feature_dim = 0;
  int grid_h = 0;
  int grid_w = 0;

  int patches() const { return grid_h * grid_w; }
};

/// Encoder output: column 0 is the CLS token, columns 1..N_h*N_w are the
/// patch features in row-major grid order.
class PatchGridFeatures {
 public:
  PatchGridFeatures(Eigen::MatrixXd matrix, int grid_h, int grid_w);

  const Eigen::MatrixXd& matrix() const { return matrix_; }
  int grid_h() const { return grid_h_; }
  int grid_w() const { return grid_w_; }
  int feature_dim() const { return static_cast<int>(matrix_.rows()); }

  Eigen::VectorXd cls() const { return matrix_.col(0); }

 private:
  Eigen::MatrixXd matrix_;
  int grid_h_;
  int grid_w_;
};

using LatentVector = Eigen::VectorXd;

// N_f x (N_h*N_w) block without the CLS column.
Eigen::MatrixXd patch_features(const PatchGridFeatures& f);

// Inverse of patch_features.
PatchGridFeatures with_cls(const Eigen::VectorXd& cls, const Eigen::MatrixXd& patches, int grid_h,
                           int grid_w);

/// Frozen visual encoder. Implementations are deterministic and expose the
/// vector-Jacobian product with respect to the input image only.
class VisualEncoder {
 public:
  virtual ~VisualEncoder() = default;

  virtual std::string id() const = 0;
  virtual GridSpec spec() const = 0;
  virtual PatchGridFeatures encode(const ImageTensor& x) const = 0;

  // feature_grad has the shape of encode(x).matrix(); returns dL/dx in HWC order.
  virtual std::vector<double> backward(const ImageTensor& x,
                                       const Eigen::MatrixXd& feature_grad) const = 0;

  // False means callers must serialize access.
  virtual bool concurrent_safe() const { return true; }

 protected:
  void check_input(const ImageTensor& x) const;
};

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual std::string id() const = 0;
  virtual int dim() const = 0;
  virtual LatentVector encode(std::string_view text) const = 0;
};

/// Linear visual-to-latent projection applied to the CLS column.
class LatentProjection {
 public:
  explicit LatentProjection(Eigen::MatrixXd weights);

  int latent_dim() const { return static_cast<int>(weights_.rows()); }
  int feature_dim() const { return static_cast<int>(weights_.cols()); }
  const Eigen::MatrixXd& weights() const { return weights_; }

  LatentVector project(const PatchGridFeatures& f) const;

 private:
  Eigen::MatrixXd weights_;
};

/// Per-patch channel means followed by a fixed channel-mixing matrix. CLS is
/// the mean of the patch columns. Linear, and any flip or quarter-turn of the
/// image permutes the patch columns the same way.
class AveragePoolEncoder final : public VisualEncoder {
 public:
  // Identity channel mixing (feature_dim == channels).
  AveragePoolEncoder(ImageShape input, int grid_h, int grid_w);
  AveragePoolEncoder(ImageShape input, int grid_h, int grid_w, Eigen::MatrixXd channel_mix);

  std::string id() const override { return "avgpool"; }
  GridSpec spec() const override;
  PatchGridFeatures encode(const ImageTensor& x) const override;
  std::vector<double> backward(const ImageTensor& x,
                               const Eigen::MatrixXd& feature_grad) const override;

 private:
  ImageShape input_;
  int grid_h_;
  int grid_w_;
  int patch_h_;
  int patch_w_;
  Eigen::MatrixXd mix_;  // feature_dim x channels
};

/// 3x3 convolution (zero padding) -> tanh -> per-patch mean -> linear map ->
/// tanh. CLS is the mean of the patch columns. Weights come from a fixed seed.
class ConvPatchEncoder final : public VisualEncoder {
 public:
  ConvPatchEncoder(ImageShape input, int grid_h, int grid_w, int hidden_channels, int feature_dim,
                   std::uint64_t seed);

  std::string id() const override { return "conv"; }
  GridSpec spec() const override;
  PatchGridFeatures encode(const ImageTensor& x) const override;
  std::vector<double> backward(const ImageTensor& x,
                               const Eigen::MatrixXd& feature_grad) const override;

 private:
  struct Activations {
    std::vector<double> hidden;  // tanh(conv(x)), HWK
    Eigen::MatrixXd pooled;      // K x patches
    Eigen::MatrixXd patches;     // feature_dim x patches (after tanh)
  };
  Activations forward(const ImageTensor& x) const;

  ImageShape input_;
  int grid_h_;
  int grid_w_;
  int patch_h_;
  int patch_w_;
  int hidden_;
  int feature_dim_;
  std::vector<double> kernel_;  // [k][dy][dx][c]
  std::vector<double> bias_;
  Eigen::MatrixXd readout_;  // feature_dim x hidden
};

/// Deterministic text stub: the FNV-1a hash of the text seeds a Gaussian
/// draw, normalised to unit length.
class HashTextEncoder final : public TextEncoder {
 public:
  HashTextEncoder(int dim, std::uint64_t seed);

  std::string id() const override { return "hash"; }
  int dim() const override { return dim_; }
  LatentVector encode(std::string_view text) const override;

 private:
  int dim_;
  std::uint64_t seed_;
};

struct BackendConfig {
  std::string id = "avgpool";
  std::string weights_path;  // used by external backends only
  std::string command;       // external bridge executable
  ImageShape input{32, 32, 3};
  int grid_h = 4;
  int grid_w = 4;
  int feature_dim = 0;  // 0 = backend default
  int hidden_channels = 8;
  int latent_dim = 0;  // 0 = feature_dim
  std::uint64_t seed = 0;

  static BackendConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

// Everything an attack needs from one victim model.
struct VisionBackend {
  std::string id;
  std::shared_ptr<const VisualEncoder> encoder;
  std::shared_ptr<const LatentProjection> projection;
  std::shared_ptr<const TextEncoder> text;
};

class BackendRegistry {
 public:
  using Factory = std::function<VisionBackend(const BackendConfig&)>;

  // Registry pre-populated with "avgpool", "conv" and "external".
  static BackendRegistry& instance();

  void add(const std::string& id, Factory factory);
  bool contains(const std::string& id) const;
  std::vector<std::string> ids() const;
  VisionBackend create(const BackendConfig& config) const;

 private:
  mutable std::mutex mutex_;
  std::map<std::string, Factory> factories_;
};

}  // namespace vlmattack
