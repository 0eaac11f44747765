#include "vlmattack/harness.hpp"

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <thread>

#include "vlmattack/attack.hpp"
#include "vlmattack/errors.hpp"
#include "vlmattack/external.hpp"
#include "vlmattack/io.hpp"
#include "vlmattack/optimizers.hpp"
#include "vlmattack/random.hpp"

namespace vlmattack::harness {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

fs::path resolve(const fs::path& base, const fs::path& p) {
  if (p.empty() || p.is_absolute()) return p;
  return (base / p).lexically_normal();
}

// Message of an exception and every exception nested inside it.
std::string describe(const std::exception& e) {
  std::string out = e.what();
  try {
    std::rethrow_if_nested(e);
  } catch (const std::exception& inner) {
    out += ": " + describe(inner);
  } catch (...) {
    out += ": unknown error";
  }
  return out;
}

void log_line(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

// 16/255 -> "16"; other values keep six decimals.
std::string epsilon_label(double eps) {
  const double k = eps * 255.0;
  if (std::abs(k - std::round(k)) < 1e-9) return std::to_string(static_cast<long>(std::round(k)));
  std::ostringstream out;
  out << std::fixed << std::setprecision(6) << k;
  return out.str();
}

}  // namespace

double parse_fraction(const json& value) {
  if (value.is_number()) return value.get<double>();
  if (!value.is_string()) throw ContractViolation("expected a number or \"a/b\", got " + value.dump());
  const auto s = value.get<std::string>();
  try {
    std::size_t used = 0;
    const auto slash = s.find('/');
    if (slash == std::string::npos) {
      const double v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    }
    const auto num_text = s.substr(0, slash);
    const auto den_text = s.substr(slash + 1);
    const double num = std::stod(num_text, &used);
    if (used != num_text.size()) throw std::invalid_argument(s);
    const double den = std::stod(den_text, &used);
    if (used != den_text.size() || den == 0.0) throw std::invalid_argument(s);
    return num / den;
  } catch (const std::logic_error&) {
    throw ContractViolation("cannot parse '" + s + "' as a number or fraction");
  }
}

// ---------------------------------------------------------------- run config

RunConfig RunConfig::from_json(const json& j, const fs::path& base_dir) {
  std::vector<std::string> errors;
  RunConfig c;
  if (!j.is_object()) throw ValidationError({"config must be a JSON object"});

  auto guard = [&](const char* key, auto&& fn) {
    if (!j.contains(key)) return;
    try {
      fn(j.at(key));
    } catch (const std::exception& e) {
      errors.push_back(std::string(key) + ": " + e.what());
    }
  };

  guard("run_id", [&](const json& v) { c.run_id = v.get<std::string>(); });
  if (c.run_id.empty() || c.run_id.find('/') != std::string::npos) {
    errors.push_back("run_id must be non-empty and contain no '/'");
  }
  if (!j.contains("dataset")) errors.push_back("dataset is required");
  guard("dataset", [&](const json& v) { c.dataset = resolve(base_dir, v.get<std::string>()); });
  guard("encoder", [&](const json& v) {
    c.encoder = BackendConfig::from_json(v);
    if (!c.encoder.weights_path.empty()) {
      c.encoder.weights_path = resolve(base_dir, c.encoder.weights_path).string();
    }
    if (!BackendRegistry::instance().contains(c.encoder.id)) {
      std::string known;
      for (const auto& id : BackendRegistry::instance().ids()) known += (known.empty() ? "" : ", ") + id;
      throw BackendError("unknown backend '" + c.encoder.id + "' (registered: " + known + ")");
    }
  });
  guard("segmenter", [&](const json& v) { c.segmenter = v; });
  guard("inpainter", [&](const json& v) { c.inpainter = v; });
  guard("segmentation", [&](const json& v) {
    c.segmentation.threshold = v.value("threshold", c.segmentation.threshold);
    c.segmentation.dilation = v.value("dilation", c.segmentation.dilation);
  });
  guard("method", [&](const json& v) { c.method = v.get<std::string>(); });
  guard("objective", [&](const json& v) { c.objective = v.get<std::string>(); });
  guard("feature_norm", [&](const json& v) {
    const auto id = v.get<std::string>();
    const auto norm = feature_norm_from_id(id);
    if (!norm) throw ContractViolation("unknown feature norm '" + id + "'");
    c.norm = *norm;
  });
  guard("attack", [&](const json& v) {
    auto& a = c.attack;
    for (const auto& [key, value] : v.items()) {
      if (key == "epsilon") a.epsilon = parse_fraction(value);
      else if (key == "alpha") a.alpha = parse_fraction(value);
      else if (key == "steps") a.steps = value.get<int>();
      else if (key == "momentum_weight") a.momentum_weight = parse_fraction(value);
      else if (key == "triplet_weight") a.triplet_weight = parse_fraction(value);
      else if (key == "vmi_beta") a.vmi_beta = parse_fraction(value);
      else if (key == "vmi_samples") a.vmi_samples = value.get<int>();
      else if (key == "sini_scales") a.sini_scales = value.get<int>();
      else if (key == "pi_amplification") a.pi_amplification = parse_fraction(value);
      else if (key == "pi_project_factor") a.pi_project_factor = parse_fraction(value);
      else if (key == "stall_limit") a.stall_limit = value.get<int>();
      else if (key == "targeted") a.targeted = value.get<bool>();
      else if (key == "seed") a.seed = value.get<std::uint64_t>();
      else throw ContractViolation("unknown attack field '" + key + "'");
    }
  });
  guard("epsilon_sweep", [&](const json& v) {
    for (const auto& e : v) c.epsilon_sweep.push_back(parse_fraction(e));
  });
  guard("transforms", [&](const json& v) { c.transforms = TransformConfig::from_json(v); });
  guard("providers", [&](const json& v) {
    for (const auto& p : v) {
      make_provider(p);  // validates
      c.providers.push_back(p);
    }
  });
  guard("target_provider", [&](const json& v) { c.target_provider = v.get<std::string>(); });
  guard("metrics", [&](const json& v) {
    c.metrics.clear();
    for (const auto& m : v) {
      eval::make_similarity(m);
      c.metrics.push_back(m);
    }
  });
  guard("workers", [&](const json& v) { c.workers = v.get<int>(); });
  guard("images", [&](const json& v) { c.images = v.get<std::vector<std::string>>(); });
  guard("output_dir", [&](const json& v) { c.output_dir = v.get<std::string>(); });
  guard("answer_cache", [&](const json& v) { c.answer_cache = v.get<std::string>(); });
  guard("replace_cache", [&](const json& v) { c.replace_cache = v.get<std::string>(); });

  c.output_dir = resolve(base_dir, c.output_dir);
  c.answer_cache = c.answer_cache.empty() ? c.output_dir / "answer_cache.jsonl"
                                          : resolve(base_dir, c.answer_cache);
  c.replace_cache = c.replace_cache.empty() ? c.output_dir / "replace_cache"
                                            : resolve(base_dir, c.replace_cache);

  const auto method = method_from_id(c.method);
  if (!method) {
    std::string known;
    for (const auto& id : method_ids()) known += (known.empty() ? "" : ", ") + id;
    errors.push_back("unknown method '" + c.method + "' (known: " + known + ")");
  }
  const auto objectives = objective_ids();
  if (std::find(objectives.begin(), objectives.end(), c.objective) == objectives.end()) {
    errors.push_back("unknown objective '" + c.objective + "'");
  } else if (method) {
    try {
      check_compatible(*method, c.objective);
    } catch (const std::exception& e) {
      errors.push_back(e.what());
    }
  }
  try {
    c.attack.validate();
  } catch (const std::exception& e) {
    errors.push_back(std::string("attack: ") + e.what());
  }
  for (double eps : c.epsilon_sweep) {
    if (!(eps > 0.0 && eps <= 1.0)) errors.push_back("epsilon_sweep values must lie in (0, 1]");
  }
  if (c.workers < 1) errors.push_back("workers must be >= 1");
  std::set<std::string> provider_ids;
  for (const auto& p : c.providers) {
    if (!provider_ids.insert(p.value("id", "")).second) {
      errors.push_back("duplicate provider id '" + p.value("id", "") + "'");
    }
  }
  if (!c.target_provider.empty() && !provider_ids.count(c.target_provider)) {
    errors.push_back("target_provider '" + c.target_provider + "' is not in providers");
  }
  if (!errors.empty()) throw ValidationError(std::move(errors));
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  json j;
  try {
    j = json::parse(io::read_text(path));
  } catch (const json::parse_error& e) {
    throw ValidationError({path.string() + ": " + e.what()});
  }
  return from_json(j, fs::absolute(path).parent_path());
}

json RunConfig::to_json() const {
  json providers_json = json::array();
  for (const auto& p : providers) providers_json.push_back(p);
  json metrics_json = json::array();
  for (const auto& m : metrics) metrics_json.push_back(m);
  json sweep = json::array();
  for (double e : epsilon_sweep) sweep.push_back(e);
  return {
      {"run_id", run_id},
      {"dataset", dataset.string()},
      {"encoder", encoder.to_json()},
      {"segmenter", segmenter},
      {"inpainter", inpainter},
      {"segmentation", {{"threshold", segmentation.threshold}, {"dilation", segmentation.dilation}}},
      {"method", method},
      {"objective", objective},
      {"feature_norm", std::string(feature_norm_id(norm))},
      {"attack",
       {{"epsilon", attack.epsilon},
        {"alpha", attack.alpha},
        {"steps", attack.steps},
        {"momentum_weight", attack.momentum_weight},
        {"triplet_weight", attack.triplet_weight},
        {"vmi_beta", attack.vmi_beta},
        {"vmi_samples", attack.vmi_samples},
        {"sini_scales", attack.sini_scales},
        {"pi_amplification", attack.pi_amplification},
        {"pi_project_factor", attack.pi_project_factor},
        {"stall_limit", attack.stall_limit},
        {"targeted", attack.targeted},
        {"seed", attack.seed}}},
      {"epsilon_sweep", sweep},
      {"transforms", transforms.to_json()},
      {"providers", providers_json},
      {"target_provider", target_provider},
      {"metrics", metrics_json},
      {"workers", workers},
      {"images", images},
      {"output_dir", output_dir.string()},
      {"answer_cache", answer_cache.string()},
      {"replace_cache", replace_cache.string()},
  };
}

// ---------------------------------------------------------------- run manifest

json RunManifest::to_json() const {
  json imgs = json::array();
  for (const auto& r : images) {
    imgs.push_back({{"image_id", r.image_id},
                    {"status", r.status},
                    {"error", r.error},
                    {"original", r.original},
                    {"target", r.target},
                    {"adversarial", r.adversarial},
                    {"sidecar", r.sidecar},
                    {"loss_initial", r.loss_initial},
                    {"loss_final", r.loss_final},
                    {"linf", r.linf}});
  }
  return {{"run_id", run_id},     {"parent", parent},         {"epsilon", epsilon},
          {"config", config},     {"images", imgs},           {"children", children},
          {"started_at", started_at}, {"finished_at", finished_at}};
}

RunManifest RunManifest::from_json(const json& j) {
  RunManifest m;
  m.run_id = j.at("run_id").get<std::string>();
  m.parent = j.value("parent", "");
  m.epsilon = j.value("epsilon", 0.0);
  m.config = j.value("config", json::object());
  m.children = j.value("children", std::vector<std::string>{});
  m.started_at = j.value("started_at", "");
  m.finished_at = j.value("finished_at", "");
  for (const auto& r : j.value("images", json::array())) {
    ImageRecord rec;
    rec.image_id = r.at("image_id").get<std::string>();
    rec.status = r.value("status", "");
    rec.error = r.value("error", "");
    rec.original = r.value("original", "");
    rec.target = r.value("target", "");
    rec.adversarial = r.value("adversarial", "");
    rec.sidecar = r.value("sidecar", "");
    rec.loss_initial = r.value("loss_initial", 0.0);
    rec.loss_final = r.value("loss_final", 0.0);
    rec.linf = r.value("linf", 0.0);
    m.images.push_back(std::move(rec));
  }
  return m;
}

RunManifest RunManifest::load(const fs::path& run_dir) {
  const auto path = run_dir / "manifest.json";
  if (!fs::exists(path)) throw Error("no run manifest at " + path.string());
  RunManifest m = from_json(json::parse(io::read_text(path)));
  m.dir = run_dir;
  return m;
}

void RunManifest::save() const {
  fs::create_directories(dir);
  io::write_text_atomic(dir / "manifest.json", to_json().dump(2) + "\n");
}

// ---------------------------------------------------------------- attack

namespace {

struct Backends {
  VisionBackend vision;
  std::shared_ptr<ReplacePipeline> replace;
  bool concurrent = true;
};

Backends make_backends(const RunConfig& config) {
  Backends b;
  b.vision = BackendRegistry::instance().create(config.encoder);
  auto segmenter = make_segmenter(config.segmenter);
  auto inpainter = make_inpainter(config.inpainter);
  b.concurrent = b.vision.encoder->concurrent_safe() && segmenter->concurrent_safe() &&
                 inpainter->concurrent_safe();
  b.replace = std::make_shared<ReplacePipeline>(b.vision.encoder, std::move(segmenter),
                                                std::move(inpainter), config.segmentation,
                                                config.replace_cache);
  return b;
}

ImageRecord attack_one(const RunConfig& config, const AttackConfig& cfg, const Backends& backends,
                       const DatasetManifest& dataset, const ImageEntry& entry, const fs::path& dir) {
  ImageRecord rec;
  rec.image_id = entry.image_id;
  try {
    const auto input = backends.vision.encoder->spec().input;
    ImageTensor raw = io::read_png(dataset.image_path(entry));
    if (raw.channels() != input.channels) {
      throw ContractViolation("image has " + std::to_string(raw.channels()) +
                              " channels, encoder expects " + std::to_string(input.channels));
    }
    if (raw.height() != input.height || raw.width() != input.width) {
      raw = io::resize_bilinear(raw, input.height, input.width);
    }
    const ImageTensor x = quantize_8bit(raw);
    const TargetSpec spec{entry.target_object, entry.target_prompt};

    // The target image is also needed to collect ans_target, so it is built
    // for every objective; the pipeline cache serves run_attack's lookup.
    const ReplaceOutput replaced = backends.replace->replace(x, spec);

    AttackContext ctx;
    ctx.backend = backends.vision;
    ctx.replace = backends.replace;
    ctx.transforms = config.transforms;
    ctx.norm = config.norm;
    const AttackRun run = run_attack(x, spec, config.method, config.objective, cfg, ctx);

    rec.original = "images/" + entry.image_id + ".original.png";
    rec.target = "images/" + entry.image_id + ".target.png";
    rec.adversarial = "images/" + entry.image_id + ".adversarial.png";
    rec.sidecar = "sidecars/" + entry.image_id + ".adversarial.f32";
    io::write_png(dir / rec.original, x);
    io::write_png(dir / rec.target, replaced.target_image);
    io::write_png(dir / rec.adversarial, io::round_to_float(run.result.adversarial_image));
    io::write_sidecar(dir / rec.sidecar, run.result.adversarial_image);
    rec.loss_initial = run.result.loss_trace.front();
    rec.loss_final = run.result.loss_trace.back();
    rec.linf = linf_distance(run.result.adversarial_image, x);
    rec.status = "ok";
  } catch (const std::exception& e) {
    rec.status = "failed";
    rec.error = describe(e);
  }
  return rec;
}

RunManifest run_single(const RunConfig& config, const AttackConfig& cfg, const std::string& run_id,
                       const std::string& parent, const Backends& backends,
                       const DatasetManifest& dataset, const AttackOptions& options) {
  RunManifest m;
  m.run_id = run_id;
  m.parent = parent;
  m.epsilon = cfg.epsilon;
  m.config = config.to_json();
  m.config["attack"]["epsilon"] = cfg.epsilon;
  m.config["run_id"] = run_id;
  m.dir = config.output_dir / run_id;
  m.started_at = utc_now();
  for (const char* sub : {"images", "sidecars", "scores", "tables", "plots"}) {
    fs::create_directories(m.dir / sub);
  }

  std::vector<const ImageEntry*> entries;
  if (config.images.empty()) {
    for (const auto& e : dataset.entries) entries.push_back(&e);
  } else {
    for (const auto& id : config.images) {
      const auto* e = dataset.find(id);
      if (!e) throw ContractViolation("image id '" + id + "' is not in the dataset");
      entries.push_back(e);
    }
  }

  m.images.resize(entries.size());
  const int workers =
      backends.concurrent ? std::min<int>(config.workers, static_cast<int>(entries.size())) : 1;
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto work = [&] {
    for (std::size_t i = next++; i < entries.size(); i = next++) {
      m.images[i] = attack_one(config, cfg, backends, dataset, *entries[i], m.dir);
      if (options.log) {
        std::lock_guard lock(log_mutex);
        const auto& r = m.images[i];
        options.log(run_id + " " + r.image_id + ": " +
                    (r.status == "ok" ? "loss " + std::to_string(r.loss_initial) + " -> " +
                                            std::to_string(r.loss_final)
                                      : "failed: " + r.error));
      }
    }
  };
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  m.finished_at = utc_now();
  m.save();
  return m;
}

}  // namespace

std::vector<RunManifest> cmd_attack(const RunConfig& config, const AttackOptions& options) {
  // Fail fast: everything that can be checked without touching images.
  const DatasetManifest dataset = load_manifest(config.dataset);
  const Backends backends = make_backends(config);
  for (const auto& p : config.providers) make_provider(p);

  if (config.epsilon_sweep.empty()) {
    const auto count = config.images.empty() ? dataset.entries.size() : config.images.size();
    log_line(options.log, "run " + config.run_id + ": " + std::to_string(count) + " images");
    return {run_single(config, config.attack, config.run_id, "", backends, dataset, options)};
  }

  RunManifest parent;
  parent.run_id = config.run_id;
  parent.config = config.to_json();
  parent.dir = config.output_dir / config.run_id;
  parent.started_at = utc_now();
  std::vector<RunManifest> children;
  for (double eps : config.epsilon_sweep) {
    AttackConfig cfg = config.attack;
    cfg.epsilon = eps;
    cfg.validate();
    const std::string child_id = config.run_id + "__eps" + epsilon_label(eps);
    log_line(options.log, "run " + child_id + ": epsilon " + epsilon_label(eps) + "/255");
    children.push_back(run_single(config, cfg, child_id, config.run_id, backends, dataset, options));
    parent.children.push_back(child_id);
  }
  parent.finished_at = utc_now();
  parent.save();
  return children;
}

std::vector<RunManifest> cmd_attack(const fs::path& config_path, const AttackOptions& options) {
  return cmd_attack(RunConfig::load(config_path), options);
}

// ---------------------------------------------------------------- providers

namespace {

struct NamedColor {
  const char* name;
  double r, g, b;
};

constexpr NamedColor kColors[] = {
    {"black", 0, 0, 0},         {"white", 1, 1, 1},       {"gray", 0.5, 0.5, 0.5},
    {"red", 0.85, 0.1, 0.1},    {"green", 0.1, 0.7, 0.2}, {"blue", 0.1, 0.2, 0.85},
    {"yellow", 0.95, 0.9, 0.1}, {"cyan", 0.1, 0.85, 0.9}, {"magenta", 0.85, 0.1, 0.8},
    {"orange", 1.0, 0.55, 0.0}, {"purple", 0.5, 0.1, 0.6}, {"brown", 0.55, 0.35, 0.15},
};

std::string color_name(const std::array<double, 3>& rgb) {
  const NamedColor* best = &kColors[0];
  double best_d = 1e300;
  for (const auto& c : kColors) {
    const double d = (rgb[0] - c.r) * (rgb[0] - c.r) + (rgb[1] - c.g) * (rgb[1] - c.g) +
                     (rgb[2] - c.b) * (rgb[2] - c.b);
    if (d < best_d) {
      best_d = d;
      best = &c;
    }
  }
  return best->name;
}

// Mean colour inside (inner = true) or outside the centred half-size box.
std::array<double, 3> region_mean(const ImageTensor& x, bool inner) {
  std::array<double, 3> sum{0, 0, 0};
  std::size_t n = 0;
  const int y0 = x.height() / 4, y1 = x.height() - x.height() / 4;
  const int x0 = x.width() / 4, x1 = x.width() - x.width() / 4;
  for (int y = 0; y < x.height(); ++y) {
    for (int c = 0; c < x.width(); ++c) {
      const bool in = y >= y0 && y < y1 && c >= x0 && c < x1;
      if (in != inner) continue;
      for (int k = 0; k < 3; ++k) sum[k] += x.at(y, c, std::min(k, x.channels() - 1));
      ++n;
    }
  }
  if (n == 0) return sum;
  for (auto& v : sum) v /= static_cast<double>(n);
  return sum;
}

bool yes_no_question(std::string_view q) {
  for (const char* w : {"is ", "are ", "does ", "do ", "can ", "was "}) {
    std::string lower;
    for (char ch : q.substr(0, std::min<std::size_t>(q.size(), 6))) {
      lower += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
    if (lower.rfind(w, 0) == 0) return true;
  }
  return false;
}

}  // namespace

StubProvider::StubProvider(std::string id, std::vector<std::string> fail_on)
    : id_(std::move(id)), fail_on_(std::move(fail_on)), style_(fnv1a(id_) % 3) {}

std::string StubProvider::answer(const ImageTensor& image, std::string_view question) const {
  for (const auto& f : fail_on_) {
    if (question.find(f) != std::string_view::npos) {
      throw BackendError("stub provider " + id_ + " refuses: " + std::string(question));
    }
  }
  const auto centre = color_name(region_mean(image, true));
  const auto border = color_name(region_mean(image, false));
  const bool yn = yes_no_question(question);
  switch (style_) {
    case 0:
      return (yn ? "Yes, there is a " : "There is a ") + centre + " object in the middle of a " +
             border + " scene.";
    case 1:
      return (yn ? "Yes. " : "") + std::string("The image shows something ") + centre +
             " surrounded by " + border + ".";
    default:
      return (yn ? "yes, " : "") + centre + " object, " + border + " background";
  }
}

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3) + 1, '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<std::uint8_t> encode_png(const ImageTensor& image) {
  ScratchDir scratch;
  const auto path = scratch.file("image.png");
  io::write_png(path, image);
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string HttpChatProvider::answer(const ImageTensor& image, std::string_view question) const {
  std::string key;
  if (!options_.api_key_env.empty()) {
    const char* env = std::getenv(options_.api_key_env.c_str());
    if (!env || !*env) throw BackendError("environment variable " + options_.api_key_env + " is not set");
    key = env;
  }
  json body = {{"model", options_.model},
               {"messages",
                json::array({{{"role", "user"},
                              {"content",
                               json::array({{{"type", "text"}, {"text", std::string(question)}},
                                            {{"type", "image_url"},
                                             {"image_url",
                                              {{"url", "data:image/png;base64," +
                                                           base64_encode(encode_png(image))}}}}})}}})}};
  for (const auto& [k, v] : options_.decoding.items()) body[k] = v;

  httplib::Client client(options_.base_url);
  client.set_connection_timeout(options_.timeout_seconds, 0);
  client.set_read_timeout(options_.timeout_seconds, 0);
  httplib::Headers headers;
  if (!key.empty()) headers.emplace("Authorization", "Bearer " + key);
  const auto res = client.Post(options_.path, headers, body.dump(), "application/json");
  if (!res) throw BackendError(options_.id + ": request failed (" + httplib::to_string(res.error()) + ")");
  if (res->status != 200) {
    throw BackendError(options_.id + ": HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200));
  }
  const auto reply = json::parse(res->body);
  const auto& content = reply.at("choices").at(0).at("message").at("content");
  if (!content.is_string()) throw BackendError(options_.id + ": response has no text content");
  return content.get<std::string>();
}

std::shared_ptr<const AnswerProvider> make_provider(const json& config) {
  if (!config.is_object() || !config.contains("id")) {
    throw ContractViolation("provider entries need an \"id\"");
  }
  const auto id = config.at("id").get<std::string>();
  const auto kind = config.value("kind", "stub");
  if (kind == "stub") {
    return std::make_shared<StubProvider>(id, config.value("fail_on", std::vector<std::string>{}));
  }
  if (kind == "http") {
    HttpChatProvider::Options o;
    o.id = id;
    o.base_url = config.at("base_url").get<std::string>();
    o.path = config.value("path", o.path);
    o.model = config.at("model").get<std::string>();
    o.api_key_env = config.value("api_key_env", "");
    o.timeout_seconds = config.value("timeout_seconds", o.timeout_seconds);
    if (config.contains("decoding")) o.decoding = config.at("decoding");
    return std::make_shared<HttpChatProvider>(std::move(o));
  }
  throw BackendError("unknown provider kind '" + kind + "' for provider " + id + " (known: stub, http)");
}

// ---------------------------------------------------------------- answer cache

AnswerCache::AnswerCache(fs::path path) : path_(std::move(path)) {
  if (!fs::exists(path_)) return;
  std::ifstream in(path_);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      entries_.emplace(AnswerKey{j.at("provider").get<std::string>(), j.at("image_hash").get<std::string>(),
                                 j.at("query_id").get<std::string>()},
                       j.at("answer").get<std::string>());
    } catch (const std::exception& e) {
      throw Error(path_.string() + ":" + std::to_string(lineno) + ": bad cache entry: " + e.what());
    }
  }
}

std::optional<std::string> AnswerCache::get(const AnswerKey& key) const {
  std::lock_guard lock(mutex_);
  const auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

bool AnswerCache::put(const AnswerKey& key, const std::string& answer, const json& decoding) {
  std::lock_guard lock(mutex_);
  if (entries_.count(key)) return false;
  if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
  std::ofstream out(path_, std::ios::app);
  const json line = {{"provider", key.provider}, {"image_hash", key.image_hash},
                     {"query_id", key.query_id}, {"answer", answer},
                     {"decoding", decoding},     {"retrieved_at", utc_now()}};
  out << line.dump() << "\n";
  out.flush();
  if (!out) throw Error("cannot append to answer cache " + path_.string());
  entries_.emplace(key, answer);
  return true;
}

std::size_t AnswerCache::size() const {
  std::lock_guard lock(mutex_);
  return entries_.size();
}

json to_json(const AnswerRecord& r) {
  auto opt = [](const std::optional<std::string>& s) { return s ? json(*s) : json(nullptr); };
  return {{"run_id", r.run_id},       {"query_id", r.query_id},
          {"provider", r.provider},   {"ans", opt(r.ans)},
          {"ans_target", opt(r.ans_target)}, {"ans_adv", opt(r.ans_adv)}};
}

AnswerRecord answer_record_from_json(const json& j) {
  auto opt = [&](const char* key) -> std::optional<std::string> {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<std::string>();
  };
  return {j.at("run_id").get<std::string>(), j.at("query_id").get<std::string>(),
          j.at("provider").get<std::string>(), opt("ans"), opt("ans_target"), opt("ans_adv")};
}

void write_answer_records(const fs::path& path, const std::vector<AnswerRecord>& records) {
  std::string text;
  for (const auto& r : records) text += to_json(r).dump() + "\n";
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  io::write_text_atomic(path, text);
}

std::vector<AnswerRecord> read_answer_records(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<AnswerRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(answer_record_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw ValidationError({path.string() + ":" + std::to_string(lineno) + ": " + e.what()});
    }
  }
  return out;
}

std::vector<AnswerRecord> fetch_answers(const RunManifest& run, const DatasetManifest& dataset,
                                        const std::vector<std::shared_ptr<const AnswerProvider>>& providers,
                                        const AnswerProvider& target, AnswerCache& cache,
                                        FetchStats* stats, const FetchOptions& options) {
  FetchStats local;
  FetchStats& s = stats ? *stats : local;

  auto lookup = [&](const AnswerProvider& p, const std::optional<ImageTensor>& image,
                    const std::string& hash, const QueryRecord& q) -> std::optional<std::string> {
    ++s.requests;
    if (!image) {
      ++s.failures;
      return std::nullopt;
    }
    const AnswerKey key{p.id(), hash, q.query_id};
    if (auto hit = cache.get(key)) {
      ++s.cache_hits;
      return hit;
    }
    for (int attempt = 0; attempt < std::max(1, options.max_attempts); ++attempt) {
      ++s.provider_calls;
      try {
        auto text = p.answer(*image, q.text);
        cache.put(key, text, p.decoding());
        return text;
      } catch (const std::exception&) {
      }
    }
    ++s.failures;
    return std::nullopt;
  };

  auto load = [&](const std::string& rel) -> std::optional<ImageTensor> {
    if (rel.empty()) return std::nullopt;
    try {
      return io::read_png(run.dir / rel);
    } catch (const std::exception&) {
      return std::nullopt;
    }
  };

  std::vector<AnswerRecord> out;
  for (const auto& rec : run.images) {
    const ImageEntry* entry = dataset.find(rec.image_id);
    if (!entry) throw ContractViolation("run image '" + rec.image_id + "' is not in the dataset");
    const bool ok = rec.status == "ok";
    const auto x = ok ? load(rec.original) : std::nullopt;
    const auto x_target = ok ? load(rec.target) : std::nullopt;
    const auto x_adv = ok ? load(rec.adversarial) : std::nullopt;
    const auto h = x ? io::content_hash(*x) : "";
    const auto h_target = x_target ? io::content_hash(*x_target) : "";
    const auto h_adv = x_adv ? io::content_hash(*x_adv) : "";
    for (const auto& q : entry->queries) {
      const auto adv = lookup(target, x_adv, h_adv, q);
      for (const auto& p : providers) {
        AnswerRecord r;
        r.run_id = run.run_id;
        r.query_id = q.query_id;
        r.provider = p->id();
        r.ans = lookup(*p, x, h, q);
        r.ans_target = lookup(*p, x_target, h_target, q);
        r.ans_adv = adv;
        out.push_back(std::move(r));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------- evaluation

namespace {

std::string format_fixed(double v, int digits) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(digits) << v;
  return out.str();
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

void write_file(const fs::path& path, const std::string& text, std::vector<fs::path>& files) {
  fs::create_directories(path.parent_path());
  io::write_text_atomic(path, text);
  files.push_back(path);
}

}  // namespace

EvaluateOutput evaluate_answers(const std::vector<AnswerRecord>& answers,
                                const std::map<std::string, Polarity>& polarity,
                                const std::vector<std::shared_ptr<const eval::Similarity>>& metrics,
                                const std::vector<RunColumn>& runs, const fs::path& out_dir) {
  if (metrics.empty()) throw ContractViolation("at least one metric is required");
  EvaluateOutput out;

  std::vector<std::string> run_order;
  for (const auto& r : runs) run_order.push_back(r.run_id);
  std::vector<std::string> metric_order;
  for (const auto& m : metrics) metric_order.push_back(m->id());
  std::set<std::string> run_set(run_order.begin(), run_order.end());

  std::vector<AnswerRecord> sorted;
  for (const auto& a : answers) {
    if (!run_set.count(a.run_id)) continue;
    if (!polarity.count(a.query_id)) {
      throw ContractViolation("answer for unknown query '" + a.query_id + "'");
    }
    sorted.push_back(a);
  }
  std::sort(sorted.begin(), sorted.end(), [](const AnswerRecord& a, const AnswerRecord& b) {
    return std::tie(a.run_id, a.query_id, a.provider) < std::tie(b.run_id, b.query_id, b.provider);
  });

  std::string missing_csv = "run_id,query_id,provider,missing\n";
  for (const auto& a : sorted) {
    if (a.complete()) {
      for (const auto& m : metrics) {
        const eval::AnswerSet set{*a.ans, *a.ans_target, *a.ans_adv, a.provider, a.query_id};
        out.records.push_back({a.query_id, a.provider, m->id(),
                               static_cast<double>(eval::binary_score(set, *m)), a.run_id});
      }
    } else {
      std::string which;
      if (!a.ans) which += "ans ";
      if (!a.ans_target) which += "ans_target ";
      if (!a.ans_adv) which += "ans_adv ";
      which.pop_back();
      missing_csv += csv_field(a.run_id) + "," + csv_field(a.query_id) + "," + csv_field(a.provider) +
                     "," + which + "\n";
    }
  }

  eval::write_score_records(out_dir / "scores" / "scores.jsonl", out.records);
  out.files.push_back(out_dir / "scores" / "scores.jsonl");
  write_file(out_dir / "scores" / "missing_answers.csv", missing_csv, out.files);

  std::set<std::string> provider_set;
  for (const auto& a : sorted) provider_set.insert(a.provider);
  const std::vector<std::string> providers(provider_set.begin(), provider_set.end());

  const std::vector<std::pair<std::string, std::optional<Polarity>>> views{
      {"all", std::nullopt}, {"positive", Polarity::positive}, {"negative", Polarity::negative}};
  for (const auto& [name, pol] : views) {
    eval::TableOptions opts;
    opts.runs = run_order;
    opts.providers = providers;
    opts.metrics = metric_order;
    if (pol) {
      opts.query_filter = [&polarity, p = *pol](const std::string& q) { return polarity.at(q) == p; };
    }
    auto table = eval::aggregate_table(out.records, opts);
    write_file(out_dir / "tables" / (name + ".csv"), eval::to_csv(table), out.files);
    write_file(out_dir / "tables" / (name + ".txt"), eval::to_text(table), out.files);
    out.tables.emplace(name, std::move(table));
  }

  // Positive questions: consistency of ans_adv with ans, compared across runs.
  if (runs.size() >= 2) {
    for (const auto& m : metrics) {
      eval::MethodScores scores;
      std::map<std::pair<std::string, std::string>, int> coverage;
      for (const auto& a : sorted) {
        if (!a.complete() || polarity.at(a.query_id) != Polarity::positive) continue;
        ++coverage[{a.query_id, a.provider}];
      }
      for (const auto& a : sorted) {
        if (!a.complete() || polarity.at(a.query_id) != Polarity::positive) continue;
        const std::pair<std::string, std::string> item{a.query_id, a.provider};
        if (coverage[item] != static_cast<int>(runs.size())) continue;
        scores[a.run_id][item] = m->similarity(*a.ans_adv, *a.ans);
      }
      if (scores.size() < 2) continue;
      const auto cmp = eval::positive_question_comparison(scores);
      std::string csv = "run_id,avg_rank,elo\n";
      for (const auto& r : run_order) {
        if (!cmp.avg_rank.count(r)) continue;
        csv += csv_field(r) + "," + format_fixed(cmp.avg_rank.at(r), 6) + "," +
               format_fixed(cmp.elo.at(r), 6) + "\n";
      }
      write_file(out_dir / "tables" / ("positive_comparison_" + m->id() + ".csv"), csv, out.files);
    }
  }

  // Score vs epsilon, one series per run label, from the avg rows of the full table.
  std::set<double> eps_values;
  for (const auto& r : runs) eps_values.insert(r.epsilon);
  if (eps_values.size() >= 2) {
    const auto& table = out.tables.at("all");
    for (const auto& m : metric_order) {
      std::map<std::string, Series> series;
      for (const auto& row : table.rows) {
        if (row.group != "avg" || row.metric != m) continue;
        for (std::size_t c = 0; c < runs.size(); ++c) {
          if (!row.cells[c]) continue;
          auto& s = series[runs[c].label];
          s.name = runs[c].label;
          s.points.emplace_back(runs[c].epsilon * 255.0, *row.cells[c]);
        }
      }
      std::vector<Series> list;
      for (auto& [_, s] : series) {
        std::sort(s.points.begin(), s.points.end());
        list.push_back(std::move(s));
      }
      write_file(out_dir / "plots" / (m + "_vs_epsilon.svg"),
                 line_plot_svg(m + " (avg) vs epsilon", "epsilon x 255", m, list), out.files);
    }
  }
  return out;
}

EvaluateOutput cmd_evaluate(const EvaluateRequest& request) {
  if (request.metrics.empty()) throw ContractViolation("usage: at least one metric is required");
  if (request.run_ids.empty()) throw ContractViolation("usage: at least one run id is required");

  std::vector<std::shared_ptr<const eval::Similarity>> metrics;
  for (const auto& m : request.metrics) metrics.push_back(eval::make_similarity(m));

  // Expand sweep parents; runs without a manifest are allowed only with an answers file.
  std::vector<RunManifest> manifests;
  std::vector<RunColumn> columns;
  for (const auto& id : request.run_ids) {
    const auto dir = request.runs_dir / id;
    if (!fs::exists(dir / "manifest.json")) {
      if (!request.answers) throw Error("run '" + id + "' not found under " + request.runs_dir.string());
      columns.push_back({id, id, 0.0});
      continue;
    }
    RunManifest m = RunManifest::load(dir);
    if (!m.children.empty()) {
      for (const auto& child : m.children) {
        RunManifest c = RunManifest::load(request.runs_dir / child);
        columns.push_back({c.run_id, m.run_id, c.epsilon});
        manifests.push_back(std::move(c));
      }
    } else {
      columns.push_back({m.run_id, m.parent.empty() ? m.run_id : m.parent, m.epsilon});
      manifests.push_back(std::move(m));
    }
  }

  fs::path dataset_path;
  if (request.dataset) {
    dataset_path = *request.dataset;
  } else if (!manifests.empty()) {
    dataset_path = manifests.front().config.value("dataset", "");
  }
  if (dataset_path.empty()) throw ContractViolation("usage: no dataset known; pass one explicitly");
  const DatasetManifest dataset = load_manifest(dataset_path, {.check_files = false});
  std::map<std::string, Polarity> polarity;
  for (const auto& e : dataset.entries) {
    for (const auto& q : e.queries) polarity.emplace(q.query_id, q.polarity);
  }

  std::vector<AnswerRecord> answers;
  if (request.answers) {
    answers = read_answer_records(*request.answers);
  } else {
    for (const auto& m : manifests) {
      const RunConfig cfg = RunConfig::from_json(m.config, m.dir);
      if (cfg.providers.empty()) throw ContractViolation("run " + m.run_id + " configures no providers");
      std::vector<std::shared_ptr<const AnswerProvider>> providers;
      std::shared_ptr<const AnswerProvider> target;
      for (const auto& p : cfg.providers) {
        providers.push_back(make_provider(p));
        if (providers.back()->id() == cfg.target_provider) target = providers.back();
      }
      if (!target) target = providers.front();
      AnswerCache cache(cfg.answer_cache);
      FetchStats stats;
      auto fetched = fetch_answers(m, dataset, providers, *target, cache, &stats);
      log_line(request.log, m.run_id + ": " + std::to_string(stats.requests) + " answers, " +
                                std::to_string(stats.cache_hits) + " cached, " +
                                std::to_string(stats.provider_calls) + " provider calls, " +
                                std::to_string(stats.failures) + " missing");
      answers.insert(answers.end(), fetched.begin(), fetched.end());
    }
  }

  const fs::path out_dir = request.out_dir ? *request.out_dir : request.runs_dir / request.run_ids.front();
  auto result = evaluate_answers(answers, polarity, metrics, columns, out_dir);
  if (!request.answers) {
    write_answer_records(out_dir / "scores" / "answers.jsonl", answers);
    result.files.push_back(out_dir / "scores" / "answers.jsonl");
  }
  for (const auto& cell : result.tables.at("all").missing) log_line(request.log, "missing: " + cell);
  return result;
}

// ---------------------------------------------------------------- plots

std::string line_plot_svg(const std::string& title, const std::string& x_label,
                          const std::string& y_label, const std::vector<Series>& series) {
  constexpr double W = 640, H = 420, L = 70, R = 160, T = 40, B = 60;
  static constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                             "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  double x_min = 1e300, x_max = -1e300, y_min = 0.0, y_max = 1.0;
  for (const auto& s : series) {
    for (const auto& [x, y] : s.points) {
      x_min = std::min(x_min, x);
      x_max = std::max(x_max, x);
      y_min = std::min(y_min, y);
      y_max = std::max(y_max, y);
    }
  }
  if (x_min > x_max) x_min = 0, x_max = 1;
  if (x_min == x_max) x_min -= 1, x_max += 1;
  auto px = [&](double x) { return L + (x - x_min) / (x_max - x_min) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y_min) / (y_max - y_min) * (H - T - B); };
  auto esc = [](const std::string& s) {
    std::string o;
    for (char c : s) {
      if (c == '<') o += "&lt;";
      else if (c == '>') o += "&gt;";
      else if (c == '&') o += "&amp;";
      else o += c;
    }
    return o;
  };

  std::ostringstream svg;
  svg << std::fixed << std::setprecision(2);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << esc(title)
      << "</text>\n";
  svg << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double y = y_min + (y_max - y_min) * i / 4.0;
    svg << "<line x1=\"" << L - 4 << "\" y1=\"" << py(y) << "\" x2=\"" << W - R << "\" y2=\"" << py(y)
        << "\" stroke=\"#ddd\"/>\n";
    svg << "<text x=\"" << L - 8 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\">"
        << format_fixed(y, 2) << "</text>\n";
  }
  std::set<double> xs;
  for (const auto& s : series) {
    for (const auto& p : s.points) xs.insert(p.first);
  }
  for (double x : xs) {
    svg << "<text x=\"" << px(x) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">"
        << format_fixed(x, x == std::round(x) ? 0 : 2) << "</text>\n";
  }
  svg << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 18 << "\" text-anchor=\"middle\">"
      << esc(x_label) << "</text>\n";
  svg << "<text x=\"18\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
      << (T + H - B) / 2 << ")\">" << esc(y_label) << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = kPalette[i % std::size(kPalette)];
    const auto& s = series[i];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (const auto& [x, y] : s.points) svg << px(x) << "," << py(y) << " ";
    svg << "\"/>\n";
    for (const auto& [x, y] : s.points) {
      svg << "<circle cx=\"" << px(x) << "\" cy=\"" << py(y) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    }
    const double ly = T + 16 + 18.0 * static_cast<double>(i);
    svg << "<line x1=\"" << W - R + 12 << "\" y1=\"" << ly - 4 << "\" x2=\"" << W - R + 32 << "\" y2=\""
        << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << W - R + 38 << "\" y=\"" << ly << "\">" << esc(s.name) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace vlmattack::harness
