#pragma once

#include <unistd.h>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "vlmattack/encoders.hpp"
#include "vlmattack/random.hpp"
#include "vlmattack/types.hpp"

namespace vlmattack::testing {

inline ImageTensor random_image(ImageShape shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
  std::vector<double> v(shape.size());
  for (auto& x : v) x = uniform(rng, lo, hi);
  return ImageTensor(shape, std::move(v));
}

inline VisionBackend toy(const std::string& id, ImageShape input, int grid, std::uint64_t seed = 0,
                         int feature_dim = 0) {
  BackendConfig c;
  c.id = id;
  c.input = input;
  c.grid_h = grid;
  c.grid_w = grid;
  c.seed = seed;
  c.feature_dim = feature_dim;
  return BackendRegistry::instance().create(c);
}

// Removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("vlmattack-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

// |a - b| / max(|a|, |b|), with differences below `floor` counted as exact.
inline double relative_error(double a, double b, double floor = 1e-10) {
  const double diff = std::abs(a - b);
  if (diff <= floor) return 0.0;
  return diff / std::max(std::abs(a), std::abs(b));
}

inline std::filesystem::path fixture(const std::string& name) {
  return std::filesystem::path(VLMATTACK_FIXTURES) / name;
}

inline std::filesystem::path source_path(const std::string& name) {
  return std::filesystem::path(VLMATTACK_SOURCE_DIR) / name;
}

}  // namespace vlmattack::testing
