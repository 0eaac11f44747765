#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmattack/dataset.hpp"
#include "vlmattack/errors.hpp"
#include "vlmattack/harness.hpp"

namespace {

namespace fs = std::filesystem;
using namespace vlmattack;

void log_stderr(const std::string& msg) { std::cerr << msg << "\n"; }

// "bleu,gleu" and repeated flags both work; "name=command" selects an external embedding.
std::vector<nlohmann::json> parse_metrics(const std::vector<std::string>& raw) {
  std::vector<nlohmann::json> out;
  for (const auto& item : raw) {
    std::size_t start = 0;
    while (start <= item.size()) {
      const auto comma = item.find(',', start);
      const auto token = item.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
      if (!token.empty()) {
        const auto eq = token.find('=');
        if (eq == std::string::npos) {
          out.emplace_back(token);
        } else {
          out.push_back({{"id", token.substr(0, eq)}, {"command", token.substr(eq + 1)}});
        }
      }
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
  }
  return out;
}

int run_attack(const std::string& config) {
  const auto runs = harness::cmd_attack(fs::path(config), {.log = log_stderr});
  std::size_t failed = 0;
  for (const auto& run : runs) {
    for (const auto& img : run.images) failed += img.status != "ok";
    std::cout << (run.dir / "manifest.json").string() << "\n";
  }
  if (failed) std::cerr << failed << " image(s) failed; see the run manifest\n";
  return 0;
}

int run_evaluate(harness::EvaluateRequest request) {
  request.log = log_stderr;
  const auto out = harness::cmd_evaluate(request);
  for (const auto& f : out.files) std::cout << f.string() << "\n";
  std::cout << "\n" << eval::to_text(out.tables.at("all"));
  return 0;
}

int run_validate(const std::string& manifest) {
  try {
    load_manifest(manifest);
  } catch (const ValidationError& e) {
    for (const auto& v : e.violations()) std::cout << "error: " << v << "\n";
    std::cout << e.violations().size() << " problem(s) in " << manifest << "\n";
    return 1;
  }
  std::cout << manifest << ": ok\n";
  return 0;
}

int run_stats(const std::string& manifest) {
  const auto s = manifest_stats(load_manifest(manifest, {.check_files = false}));
  std::cout << "images     " << s.images << "\n"
            << "queries    " << s.queries << "\n"
            << "positive   " << s.positives << "\n"
            << "negative   " << s.negatives << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Targeted adversarial attacks on vision-language models"};
  app.require_subcommand(1);

  std::string config;
  auto* attack = app.add_subcommand("attack", "Run the attack described by a config file");
  attack->add_option("--config", config, "Run config (JSON)")->required()->check(CLI::ExistingFile);

  harness::EvaluateRequest request;
  std::vector<std::string> run_ids;
  std::vector<std::string> metrics;
  std::string runs_dir = "runs";
  std::string answers, dataset, out_dir;
  auto* evaluate = app.add_subcommand("evaluate", "Score a run and write tables and plots");
  evaluate->add_option("--run", run_ids, "Run id(s); a sweep parent expands to its children")->required();
  evaluate->add_option("--metrics", metrics, "Comma-separated metric ids (bleu, gleu, hash, name=command)")
      ->required();
  evaluate->add_option("--runs-dir", runs_dir, "Directory holding the runs")->capture_default_str();
  evaluate->add_option("--answers", answers, "Score this answers JSONL instead of querying providers")
      ->check(CLI::ExistingFile);
  evaluate->add_option("--dataset", dataset, "Dataset manifest (default: from the run config)")
      ->check(CLI::ExistingFile);
  evaluate->add_option("--out", out_dir, "Output directory (default: the first run's directory)");

  auto* ds = app.add_subcommand("dataset", "Dataset manifest tools");
  ds->require_subcommand(1);
  std::string manifest;
  auto* validate = ds->add_subcommand("validate", "Check a manifest and list every problem");
  validate->add_option("manifest", manifest)->required();
  auto* stats = ds->add_subcommand("stats", "Print image and query counts");
  stats->add_option("manifest", manifest)->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*attack) return run_attack(config);
    if (*evaluate) {
      request.run_ids = run_ids;
      request.metrics = parse_metrics(metrics);
      if (request.metrics.empty()) {
        std::cerr << "evaluate: --metrics must name at least one metric\n";
        return 2;
      }
      request.runs_dir = runs_dir;
      if (!answers.empty()) request.answers = answers;
      if (!dataset.empty()) request.dataset = dataset;
      if (!out_dir.empty()) request.out_dir = out_dir;
      return run_evaluate(std::move(request));
    }
    if (*validate) return run_validate(manifest);
    if (*stats) return run_stats(manifest);
  } catch (const ValidationError& e) {
    for (const auto& v : e.violations()) std::cerr << "error: " << v << "\n";
    return 1;
  } catch (const ContractViolation& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
