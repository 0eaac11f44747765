#include "vlmattack/encoders.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "vlmattack/errors.hpp"
#include "vlmattack/external.hpp"
#include "vlmattack/random.hpp"

namespace vlmattack {

PatchGridFeatures::PatchGridFeatures(Eigen::MatrixXd matrix, int grid_h, int grid_w)
    : matrix_(std::move(matrix)), grid_h_(grid_h), grid_w_(grid_w) {
  if (grid_h_ <= 0 || grid_w_ <= 0) throw ContractViolation("grid dimensions must be positive");
  if (matrix_.cols() != static_cast<Eigen::Index>(grid_h_) * grid_w_ + 1) {
    throw ContractViolation("feature matrix has " + std::to_string(matrix_.cols()) +
                            " columns, grid " + std::to_string(grid_h_) + "x" +
                            std::to_string(grid_w_) + " needs one CLS column plus patches");
  }
  if (matrix_.rows() <= 0) throw ContractViolation("feature dimension must be positive");
  if (!matrix_.allFinite()) throw ContractViolation("feature matrix contains non-finite values");
}

Eigen::MatrixXd patch_features(const PatchGridFeatures& f) {
  return f.matrix().rightCols(f.matrix().cols() - 1);
}

PatchGridFeatures with_cls(const Eigen::VectorXd& cls, const Eigen::MatrixXd& patches, int grid_h,
                           int grid_w) {
  if (cls.size() != patches.rows()) throw ContractViolation("CLS length differs from feature_dim");
  Eigen::MatrixXd m(patches.rows(), patches.cols() + 1);
  m.col(0) = cls;
  m.rightCols(patches.cols()) = patches;
  return PatchGridFeatures(std::move(m), grid_h, grid_w);
}

void VisualEncoder::check_input(const ImageTensor& x) const {
  const auto s = spec();
  if (!(x.shape() == s.input)) {
    throw ContractViolation("encoder '" + id() + "' expects input " + to_string(s.input) +
                            ", got " + to_string(x.shape()));
  }
}

LatentProjection::LatentProjection(Eigen::MatrixXd weights) : weights_(std::move(weights)) {
  if (weights_.rows() == 0 || weights_.cols() == 0) {
    throw ContractViolation("latent projection must be non-empty");
  }
}

LatentVector LatentProjection::project(const PatchGridFeatures& f) const {
  if (f.feature_dim() != feature_dim()) {
    throw ContractViolation("projection expects feature_dim " + std::to_string(feature_dim()) +
                            ", got " + std::to_string(f.feature_dim()));
  }
  return weights_ * f.matrix().col(0);
}

namespace {

void check_grid(ImageShape input, int grid_h, int grid_w) {
  if (grid_h <= 0 || grid_w <= 0) throw ContractViolation("grid dimensions must be positive");
  if (input.height <= 0 || input.width <= 0 || input.channels <= 0) {
    throw ContractViolation("input dimensions must be positive");
  }
  if (input.height % grid_h != 0 || input.width % grid_w != 0) {
    throw ContractViolation("input " + to_string(input) + " is not divisible into a " +
                            std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid");
  }
}

}  // namespace

// ---------------------------------------------------------------- avgpool

AveragePoolEncoder::AveragePoolEncoder(ImageShape input, int grid_h, int grid_w)
    : AveragePoolEncoder(input, grid_h, grid_w,
                         Eigen::MatrixXd::Identity(input.channels, input.channels)) {}

AveragePoolEncoder::AveragePoolEncoder(ImageShape input, int grid_h, int grid_w,
                                       Eigen::MatrixXd channel_mix)
    : input_(input), grid_h_(grid_h), grid_w_(grid_w), mix_(std::move(channel_mix)) {
  check_grid(input, grid_h, grid_w);
  if (mix_.cols() != input.channels || mix_.rows() == 0) {
    throw ContractViolation("channel mix must be feature_dim x channels");
  }
  patch_h_ = input.height / grid_h;
  patch_w_ = input.width / grid_w;
}

GridSpec AveragePoolEncoder::spec() const {
  return {input_, static_cast<int>(mix_.rows()), grid_h_, grid_w_};
}

PatchGridFeatures AveragePoolEncoder::encode(const ImageTensor& x) const {
  check_input(x);
  const int channels = input_.channels;
  Eigen::MatrixXd means = Eigen::MatrixXd::Zero(channels, grid_h_ * grid_w_);
  for (int y = 0; y < input_.height; ++y) {
    for (int xx = 0; xx < input_.width; ++xx) {
      const int p = (y / patch_h_) * grid_w_ + xx / patch_w_;
      for (int c = 0; c < channels; ++c) means(c, p) += x.at(y, xx, c);
    }
  }
  means /= static_cast<double>(patch_h_ * patch_w_);
  const Eigen::MatrixXd patches = mix_ * means;
  return with_cls(patches.rowwise().mean(), patches, grid_h_, grid_w_);
}

std::vector<double> AveragePoolEncoder::backward(const ImageTensor& x,
                                                 const Eigen::MatrixXd& feature_grad) const {
  check_input(x);
  const int n = grid_h_ * grid_w_;
  if (feature_grad.rows() != mix_.rows() || feature_grad.cols() != n + 1) {
    throw ContractViolation("feature gradient has the wrong shape");
  }
  // CLS = mean of patches, so its gradient spreads evenly over the patch columns.
  Eigen::MatrixXd patch_grad = feature_grad.rightCols(n);
  patch_grad.colwise() += feature_grad.col(0) / static_cast<double>(n);
  const Eigen::MatrixXd mean_grad =
      mix_.transpose() * patch_grad / static_cast<double>(patch_h_ * patch_w_);

  std::vector<double> grad(x.size());
  for (int y = 0; y < input_.height; ++y) {
    for (int xx = 0; xx < input_.width; ++xx) {
      const int p = (y / patch_h_) * grid_w_ + xx / patch_w_;
      for (int c = 0; c < input_.channels; ++c) grad[x.index(y, xx, c)] = mean_grad(c, p);
    }
  }
  return grad;
}

// ---------------------------------------------------------------- conv

ConvPatchEncoder::ConvPatchEncoder(ImageShape input, int grid_h, int grid_w, int hidden_channels,
                                   int feature_dim, std::uint64_t seed)
    : input_(input),
      grid_h_(grid_h),
      grid_w_(grid_w),
      hidden_(hidden_channels),
      feature_dim_(feature_dim) {
  check_grid(input, grid_h, grid_w);
  if (hidden_ <= 0 || feature_dim_ <= 0) {
    throw ContractViolation("hidden_channels and feature_dim must be positive");
  }
  patch_h_ = input.height / grid_h;
  patch_w_ = input.width / grid_w;

  Rng rng(mix_seed(seed, 0x636f6e76));
  const double kernel_scale = 2.0 / std::sqrt(9.0 * input.channels);
  kernel_.resize(static_cast<std::size_t>(hidden_) * 9 * input.channels);
  for (double& w : kernel_) w = kernel_scale * standard_normal(rng);
  bias_.resize(hidden_);
  for (double& b : bias_) b = 0.1 * standard_normal(rng);
  readout_.resize(feature_dim_, hidden_);
  const double readout_scale = 2.0 / std::sqrt(static_cast<double>(hidden_));
  for (Eigen::Index i = 0; i < readout_.size(); ++i) {
    readout_.data()[i] = readout_scale * standard_normal(rng);
  }
}

GridSpec ConvPatchEncoder::spec() const { return {input_, feature_dim_, grid_h_, grid_w_}; }

ConvPatchEncoder::Activations ConvPatchEncoder::forward(const ImageTensor& x) const {
  const int h = input_.height;
  const int w = input_.width;
  const int c_in = input_.channels;
  Activations a;
  a.hidden.assign(static_cast<std::size_t>(h) * w * hidden_, 0.0);
  a.pooled = Eigen::MatrixXd::Zero(hidden_, grid_h_ * grid_w_);

  for (int y = 0; y < h; ++y) {
    for (int xx = 0; xx < w; ++xx) {
      const int p = (y / patch_h_) * grid_w_ + xx / patch_w_;
      for (int k = 0; k < hidden_; ++k) {
        double z = bias_[k];
        for (int dy = 0; dy < 3; ++dy) {
          const int sy = y + dy - 1;
          if (sy < 0 || sy >= h) continue;
          for (int dx = 0; dx < 3; ++dx) {
            const int sx = xx + dx - 1;
            if (sx < 0 || sx >= w) continue;
            const double* kw = &kernel_[((static_cast<std::size_t>(k) * 3 + dy) * 3 + dx) * c_in];
            for (int c = 0; c < c_in; ++c) z += kw[c] * x.at(sy, sx, c);
          }
        }
        const double t = std::tanh(z);
        a.hidden[(static_cast<std::size_t>(y) * w + xx) * hidden_ + k] = t;
        a.pooled(k, p) += t;
      }
    }
  }
  a.pooled /= static_cast<double>(patch_h_ * patch_w_);
  a.patches = (readout_ * a.pooled).array().tanh().matrix();
  return a;
}

PatchGridFeatures ConvPatchEncoder::encode(const ImageTensor& x) const {
  check_input(x);
  const auto a = forward(x);
  return with_cls(a.patches.rowwise().mean(), a.patches, grid_h_, grid_w_);
}

std::vector<double> ConvPatchEncoder::backward(const ImageTensor& x,
                                               const Eigen::MatrixXd& feature_grad) const {
  check_input(x);
  const int n = grid_h_ * grid_w_;
  if (feature_grad.rows() != feature_dim_ || feature_grad.cols() != n + 1) {
    throw ContractViolation("feature gradient has the wrong shape");
  }
  const auto a = forward(x);
  Eigen::MatrixXd patch_grad = feature_grad.rightCols(n);
  patch_grad.colwise() += feature_grad.col(0) / static_cast<double>(n);
  const Eigen::MatrixXd pre_grad =
      (patch_grad.array() * (1.0 - a.patches.array().square())).matrix();
  const Eigen::MatrixXd pooled_grad =
      readout_.transpose() * pre_grad / static_cast<double>(patch_h_ * patch_w_);

  const int h = input_.height;
  const int w = input_.width;
  const int c_in = input_.channels;
  std::vector<double> grad(x.size(), 0.0);
  for (int y = 0; y < h; ++y) {
    for (int xx = 0; xx < w; ++xx) {
      const int p = (y / patch_h_) * grid_w_ + xx / patch_w_;
      for (int k = 0; k < hidden_; ++k) {
        const double t = a.hidden[(static_cast<std::size_t>(y) * w + xx) * hidden_ + k];
        const double dz = pooled_grad(k, p) * (1.0 - t * t);
        for (int dy = 0; dy < 3; ++dy) {
          const int sy = y + dy - 1;
          if (sy < 0 || sy >= h) continue;
          for (int dx = 0; dx < 3; ++dx) {
            const int sx = xx + dx - 1;
            if (sx < 0 || sx >= w) continue;
            const double* kw = &kernel_[((static_cast<std::size_t>(k) * 3 + dy) * 3 + dx) * c_in];
            for (int c = 0; c < c_in; ++c) grad[x.index(sy, sx, c)] += kw[c] * dz;
          }
        }
      }
    }
  }
  return grad;
}

// ---------------------------------------------------------------- text

HashTextEncoder::HashTextEncoder(int dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
  if (dim_ <= 0) throw ContractViolation("text encoder dimension must be positive");
}

LatentVector HashTextEncoder::encode(std::string_view text) const {
  if (text.empty()) throw ContractViolation("text must not be empty");
  Rng rng(mix_seed(seed_, fnv1a(text)));
  LatentVector v(dim_);
  for (int i = 0; i < dim_; ++i) v[i] = standard_normal(rng);
  return v / v.norm();
}

// ---------------------------------------------------------------- config + registry

BackendConfig BackendConfig::from_json(const nlohmann::json& j) {
  BackendConfig c;
  c.id = j.value("id", c.id);
  c.weights_path = j.value("weights", c.weights_path);
  c.command = j.value("command", c.command);
  if (j.contains("resolution")) {
    const auto& r = j.at("resolution");
    c.input.height = r.at(0).get<int>();
    c.input.width = r.at(1).get<int>();
  }
  c.input.channels = j.value("channels", c.input.channels);
  if (j.contains("grid")) {
    c.grid_h = j.at("grid").at(0).get<int>();
    c.grid_w = j.at("grid").at(1).get<int>();
  }
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.hidden_channels = j.value("hidden_channels", c.hidden_channels);
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.seed = j.value("seed", c.seed);
  return c;
}

nlohmann::json BackendConfig::to_json() const {
  return {{"id", id},
          {"weights", weights_path},
          {"command", command},
          {"resolution", {input.height, input.width}},
          {"channels", input.channels},
          {"grid", {grid_h, grid_w}},
          {"feature_dim", feature_dim},
          {"hidden_channels", hidden_channels},
          {"latent_dim", latent_dim},
          {"seed", seed}};
}

namespace {

Eigen::MatrixXd random_projection(int rows, int cols, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x70726f6a));
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = standard_normal(rng) / std::sqrt(static_cast<double>(cols));
  }
  return m;
}

VisionBackend toy_backend(std::shared_ptr<const VisualEncoder> encoder, const BackendConfig& c) {
  const int nf = encoder->spec().feature_dim;
  const int latent = c.latent_dim > 0 ? c.latent_dim : nf;
  // Identity projection when the latent space matches the feature space.
  Eigen::MatrixXd proj = latent == nf ? Eigen::MatrixXd::Identity(nf, nf).eval()
                                      : random_projection(latent, nf, c.seed);
  VisionBackend b;
  b.id = c.id;
  b.encoder = std::move(encoder);
  b.projection = std::make_shared<LatentProjection>(std::move(proj));
  b.text = std::make_shared<HashTextEncoder>(latent, c.seed);
  return b;
}

}  // namespace

BackendRegistry& BackendRegistry::instance() {
  static BackendRegistry registry;
  static std::once_flag once;
  std::call_once(once, [] {
    BackendRegistry& r = registry;
    r.add("avgpool", [](const BackendConfig& c) {
      std::shared_ptr<const VisualEncoder> enc;
      if (c.feature_dim > 0 && c.feature_dim != c.input.channels) {
        enc = std::make_shared<AveragePoolEncoder>(
            c.input, c.grid_h, c.grid_w, random_projection(c.feature_dim, c.input.channels, c.seed));
      } else {
        enc = std::make_shared<AveragePoolEncoder>(c.input, c.grid_h, c.grid_w);
      }
      return toy_backend(std::move(enc), c);
    });
    r.add("conv", [](const BackendConfig& c) {
      const int nf = c.feature_dim > 0 ? c.feature_dim : 8;
      auto enc = std::make_shared<ConvPatchEncoder>(c.input, c.grid_h, c.grid_w,
                                                    c.hidden_channels, nf, c.seed);
      return toy_backend(std::move(enc), c);
    });
    r.add("external", [](const BackendConfig& c) { return make_external_backend(c); });
  });
  return registry;
}

void BackendRegistry::add(const std::string& id, Factory factory) {
  std::lock_guard lock(mutex_);
  factories_[id] = std::move(factory);
}

bool BackendRegistry::contains(const std::string& id) const {
  std::lock_guard lock(mutex_);
  return factories_.contains(id);
}

std::vector<std::string> BackendRegistry::ids() const {
  std::lock_guard lock(mutex_);
  std::vector<std::string> out;
  for (const auto& [id, _] : factories_) out.push_back(id);
  return out;
}

VisionBackend BackendRegistry::create(const BackendConfig& config) const {
  Factory factory;
  {
    std::lock_guard lock(mutex_);
    auto it = factories_.find(config.id);
    if (it == factories_.end()) throw BackendError("unknown encoder backend '" + config.id + "'");
    factory = it->second;
  }
  return factory(config);
}

}  // namespace vlmattack
