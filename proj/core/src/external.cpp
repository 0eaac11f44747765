#include "vlmattack/external.hpp"

#include <atomic>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <mutex>
#include <sstream>

#include <fcntl.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "vlmattack/errors.hpp"
#include "vlmattack/io.hpp"
#include "vlmattack/replace.hpp"

extern char** environ;

namespace vlmattack {

namespace fs = std::filesystem;

CommandResult run_command(const std::vector<std::string>& argv) {
  if (argv.empty()) throw ContractViolation("empty command");
  ScratchDir scratch;
  const fs::path log = scratch.file("output.log");

  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  posix_spawn_file_actions_addopen(&actions, STDOUT_FILENO, log.c_str(), O_WRONLY | O_CREAT | O_TRUNC,
                                   0644);
  posix_spawn_file_actions_adddup2(&actions, STDOUT_FILENO, STDERR_FILENO);

  std::vector<char*> args;
  for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
  args.push_back(nullptr);

  pid_t pid = 0;
  const int rc = posix_spawnp(&pid, args[0], &actions, nullptr, args.data(), environ);
  posix_spawn_file_actions_destroy(&actions);
  if (rc != 0) throw BackendError("cannot start '" + argv[0] + "': " + std::strerror(rc));

  int status = 0;
  while (waitpid(pid, &status, 0) < 0) {
    if (errno != EINTR) throw BackendError("waitpid failed for '" + argv[0] + "'");
  }
  CommandResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : 128 + WTERMSIG(status);
  if (fs::exists(log)) r.output = io::read_text(log);
  return r;
}

ScratchDir::ScratchDir() {
  static std::atomic<unsigned long> counter{0};
  path_ = fs::temp_directory_path() /
          ("vlmattack-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  fs::create_directories(path_);
}

ScratchDir::~ScratchDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

std::vector<std::string> split_command(const std::string& command) {
  std::istringstream in(command);
  std::vector<std::string> out;
  for (std::string part; in >> part;) out.push_back(part);
  return out;
}

namespace {

class Bridge {
 public:
  Bridge(const std::string& command, const std::string& weights) : base_(split_command(command)) {
    if (base_.empty()) throw BackendError("external backend needs a command");
    if (!weights.empty()) {
      base_.push_back("--weights");
      base_.push_back(weights);
    }
  }

  void call(const std::string& verb, const std::vector<fs::path>& files) const {
    std::vector<std::string> argv = base_;
    argv.push_back(verb);
    for (const auto& f : files) argv.push_back(f.string());
    const auto r = run_command(argv);
    if (r.exit_code != 0) {
      throw BackendError("'" + base_.front() + " " + verb + "' exited with " +
                         std::to_string(r.exit_code) + ": " + r.output);
    }
  }

 private:
  std::vector<std::string> base_;
};

void write_plain(const fs::path& path, std::string_view text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw BackendError("cannot write " + path.string());
}

ImageTensor sidecar_image(const io::Sidecar& s) {
  std::vector<double> v(s.values.begin(), s.values.end());
  return clamped_image(s.shape, v);
}

class ExternalEncoder final : public VisualEncoder {
 public:
  ExternalEncoder(std::shared_ptr<const Bridge> bridge, GridSpec spec)
      : bridge_(std::move(bridge)), spec_(spec) {}

  std::string id() const override { return "external"; }
  GridSpec spec() const override { return spec_; }

  PatchGridFeatures encode(const ImageTensor& x) const override {
    check_input(x);
    ScratchDir dir;
    io::write_sidecar(dir.file("image.bin"), x);
    bridge_->call("forward", {dir.file("image.bin"), dir.file("features.bin")});
    auto f = io::read_features(dir.file("features.bin"), true);
    if (f.grid_h != spec_.grid_h || f.grid_w != spec_.grid_w ||
        f.matrix.rows() != spec_.feature_dim) {
      throw BackendError("external encoder returned features that do not match its declared grid");
    }
    return PatchGridFeatures(std::move(f.matrix), f.grid_h, f.grid_w);
  }

  std::vector<double> backward(const ImageTensor& x,
                               const Eigen::MatrixXd& feature_grad) const override {
    check_input(x);
    ScratchDir dir;
    io::write_sidecar(dir.file("image.bin"), x);
    io::write_features(dir.file("grad_in.bin"), feature_grad, spec_.grid_h, spec_.grid_w);
    bridge_->call("backward", {dir.file("image.bin"), dir.file("grad_in.bin"), dir.file("grad.bin")});
    const auto g = io::read_sidecar(dir.file("grad.bin"));
    if (!(g.shape == x.shape())) throw BackendError("external encoder returned a gradient of wrong shape");
    return std::vector<double>(g.values.begin(), g.values.end());
  }

  // One model process per call; a GPU bridge should not be hit concurrently.
  bool concurrent_safe() const override { return false; }

 private:
  std::shared_ptr<const Bridge> bridge_;
  GridSpec spec_;
};

class ExternalText final : public TextEncoder {
 public:
  ExternalText(std::shared_ptr<const Bridge> bridge, int dim) : bridge_(std::move(bridge)), dim_(dim) {}

  std::string id() const override { return "external"; }
  int dim() const override { return dim_; }

  LatentVector encode(std::string_view text) const override {
    ScratchDir dir;
    write_plain(dir.file("text.txt"), text);
    bridge_->call("text", {dir.file("text.txt"), dir.file("latent.bin")});
    auto f = io::read_features(dir.file("latent.bin"), true);
    if (f.matrix.rows() != dim_ || f.matrix.cols() != 1) {
      throw BackendError("external text encoder returned a latent of wrong size");
    }
    return f.matrix.col(0);
  }

 private:
  std::shared_ptr<const Bridge> bridge_;
  int dim_;
};

class ExternalSegmenter final : public Segmenter {
 public:
  explicit ExternalSegmenter(Bridge bridge) : bridge_(std::move(bridge)) {}

  std::string id() const override { return "external"; }
  bool concurrent_safe() const override { return false; }

  std::vector<double> probability_map(const ImageTensor& x, std::string_view object) const override {
    ScratchDir dir;
    io::write_sidecar(dir.file("image.bin"), x);
    write_plain(dir.file("object.txt"), object);
    bridge_.call("segment", {dir.file("image.bin"), dir.file("object.txt"), dir.file("prob.bin")});
    const auto p = io::read_sidecar(dir.file("prob.bin"));
    if (p.shape.height != x.height() || p.shape.width != x.width() || p.shape.channels != 1) {
      throw BackendError("external segmenter returned a probability map of wrong shape");
    }
    return std::vector<double>(p.values.begin(), p.values.end());
  }

 private:
  Bridge bridge_;
};

class ExternalInpainter final : public Inpainter {
 public:
  ExternalInpainter(Bridge bridge, double tolerance)
      : bridge_(std::move(bridge)), tolerance_(tolerance) {}

  std::string id() const override { return "external"; }
  double background_tolerance() const override { return tolerance_; }
  bool concurrent_safe() const override { return false; }

  ImageTensor fill(const ImageTensor& x, const BinaryMask& m, std::string_view prompt) const override {
    ScratchDir dir;
    io::write_sidecar(dir.file("image.bin"), x);
    std::vector<double> mask(m.values().begin(), m.values().end());
    io::write_sidecar(dir.file("mask.bin"), {m.height(), m.width(), 1}, mask);
    write_plain(dir.file("prompt.txt"), prompt);
    bridge_.call("inpaint", {dir.file("image.bin"), dir.file("mask.bin"), dir.file("prompt.txt"),
                             dir.file("out.bin")});
    return sidecar_image(io::read_sidecar(dir.file("out.bin")));
  }

 private:
  Bridge bridge_;
  double tolerance_;
};

}  // namespace

VisionBackend make_external_backend(const BackendConfig& config) {
  auto bridge = std::make_shared<const Bridge>(config.command, config.weights_path);
  ScratchDir dir;
  bridge->call("info", {dir.file("info.json")});
  nlohmann::json info;
  try {
    info = nlohmann::json::parse(io::read_text(dir.file("info.json")));
  } catch (const nlohmann::json::exception& e) {
    throw BackendError(std::string("external encoder info is not valid JSON: ") + e.what());
  }
  GridSpec spec;
  spec.input = {info.at("input").at(0).get<int>(), info.at("input").at(1).get<int>(),
                info.at("input").at(2).get<int>()};
  spec.grid_h = info.at("grid").at(0).get<int>();
  spec.grid_w = info.at("grid").at(1).get<int>();
  spec.feature_dim = info.at("feature_dim").get<int>();
  const int latent = info.value("latent_dim", spec.feature_dim);

  bridge->call("projection", {dir.file("projection.bin")});
  auto proj = io::read_features(dir.file("projection.bin"), false);
  if (proj.matrix.rows() != latent || proj.matrix.cols() != spec.feature_dim) {
    throw BackendError("external projection is not latent_dim x feature_dim");
  }

  VisionBackend b;
  b.id = config.id;
  b.encoder = std::make_shared<ExternalEncoder>(bridge, spec);
  b.projection = std::make_shared<LatentProjection>(std::move(proj.matrix));
  b.text = std::make_shared<ExternalText>(bridge, latent);
  return b;
}

std::shared_ptr<const Segmenter> make_external_segmenter(const nlohmann::json& config) {
  return std::make_shared<ExternalSegmenter>(
      Bridge(config.value("command", ""), config.value("weights", "")));
}

std::shared_ptr<const Inpainter> make_external_inpainter(const nlohmann::json& config) {
  return std::make_shared<ExternalInpainter>(
      Bridge(config.value("command", ""), config.value("weights", "")),
      config.value("tolerance", 0.05));
}

}  // namespace vlmattack
