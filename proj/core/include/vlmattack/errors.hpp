#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace vlmattack {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller broke a documented precondition (shape mismatch, bad config, ...).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

// A model backend is missing, misconfigured or failed while running.
class BackendError : public Error {
 public:
  using Error::Error;
};

// Segmentation produced an empty target region.
class TargetNotFound : public Error {
 public:
  using Error::Error;
};

// Carries every violation found, not only the first one.
class ValidationError : public Error {
 public:
  explicit ValidationError(std::vector<std::string> violations)
      : Error(join(violations)), violations_(std::move(violations)) {}

  const std::vector<std::string>& violations() const { return violations_; }

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string out = std::to_string(v.size()) + " validation error(s)";
    for (const auto& s : v) out += "\n  - " + s;
    return out;
  }

  std::vector<std::string> violations_;
};

// Failure inside one stage of a multi-stage pipeline.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error("[" + stage + "] " + what), stage_(std::move(stage)) {}

  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

}  // namespace vlmattack
