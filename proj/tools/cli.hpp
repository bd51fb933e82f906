#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "disagg/evaluation.hpp"
#include "disagg/model.hpp"
#include "disagg/synth.hpp"
#include "disagg/uncertainty.hpp"

namespace disagg::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInvalid = 1;
inline constexpr int kExitRuntime = 2;

struct RunConfig {
  nlohmann::json doc;  // effective document after env and --set overrides
  std::uint64_t seed = 0;

  std::filesystem::path shapes;
  std::filesystem::path covariates;
  std::filesystem::path population;
  std::filesystem::path output = "out";
  std::optional<std::filesystem::path> model_path;
  std::optional<std::filesystem::path> hypergrid_path;
  std::string id_field = "id";
  std::string response_field = "response";

  model::ModelSpec spec;
  model::TrainConfig train;

  std::size_t k = 5;
  std::size_t repeats = 20;
  std::size_t k_outer = 5;
  std::size_t k_inner = 5;
  eval::HyperGridConfig sampler;
  eval::CiMethod ci = eval::CiMethod::student_t;
  bool disqualify_nonfinite = false;

  std::size_t mc_samples = 100;
  std::uint64_t mc_seed = 0;
  unc::Scale mc_scale = unc::Scale::rate;
  std::size_t normality_pixels = 9;

  synth::SynthSpec synth;
  std::size_t bench_repeats = 50;
};

/// Validates `doc` and resolves relative paths against `base_dir`. Errors are
/// ValidationError naming the offending field path.
RunConfig parse_run_config(const nlohmann::json& doc, const std::filesystem::path& base_dir);

/// Applies `a.b.c=value`; the value is read as JSON when it parses, else as a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Returns the process exit code; diagnostics go to `err`.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_command(int argc, char** argv);

}  // namespace disagg::cli
