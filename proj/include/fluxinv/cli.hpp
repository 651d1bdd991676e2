#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fluxinv/osse.hpp"
#include "fluxinv/prior.hpp"
#include "fluxinv/samplers.hpp"
#include "fluxinv/sif_link.hpp"
#include "fluxinv/transport.hpp"

namespace fluxinv::cli {

inline constexpr int kSchemaVersion = 1;

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,   ///< runtime error inside a stage
  kExitUsage = 2,     ///< bad flags, missing config or manifest
  kExitEssFloor = 3,  ///< inversion finished but some ESS is below the floor
};

/// Parsed run configuration. Relative paths resolve against the config file's directory.
struct RunConfig {
  std::filesystem::path source;  ///< config file, empty when built in code
  std::uint64_t seed = 0;
  std::filesystem::path output;

  std::optional<std::filesystem::path> grid, bottom_up, sif_pairs, observations, truth;
  std::optional<std::filesystem::path> osse_manifest;

  int start_year = 2015;
  unsigned start_month = 1;
  int months = 24;
  std::array<int, kComponentCount> harmonics{3, 3, 2};
  FixedTermPolicy fixed;
  ValidityConfig validity;
  ToyTransportConfig transport;
  PriorSettings prior;
  Hyperpriors hyper;
  GibbsConfig gibbs;
  StageOneConfig stage_one;
  double ess_floor = 100.0;
  double length_in_situ = 1.0;           ///< days, starting e-folding time
  double length_satellite = 1.0 / 1440.0;
  std::optional<EvaluationWindow> window;  ///< default: periods 2 .. Q-1
  int jobs = 1;

  /// FNV-1a of the canonical JSON form; identical configs hash identically.
  std::uint64_t hash = 0;

  Calendar calendar() const { return Calendar(start_year, start_month, 1); }
  TimePartition periods() const { return TimePartition::monthly(calendar(), start_year, start_month, months); }
};

/// Throws ConfigError on schema violations, unknown keys, a wrong schema_version
/// or a referenced file that does not exist.
RunConfig parse_run_config(const std::string& json_text, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

/// OSSE manifest: the desk scenario and experiment-grid settings.
struct OsseManifest {
  DeskScenarioConfig desk;
  OsseConfig osse;
  int sample_output_thin = 10;  ///< every k-th stored draw is written to samples.csv
  bool export_inputs = false;   ///< also write the desk world as pipeline inputs
  std::uint64_t hash = 0;
};
OsseManifest parse_osse_manifest(const std::string& json_text);
OsseManifest load_osse_manifest(const std::filesystem::path& path);

/// manifest.json with command, config hash, seed, schema and version.
void write_run_manifest(const std::filesystem::path& dir, const std::string& command, std::uint64_t config_hash,
                        std::uint64_t seed);
std::string version_string();

// ---------------------------------------------------------------- stages

struct DecomposeResult {
  bool cache_hit = false;
  std::size_t dimension = 0;
  std::filesystem::path cache;
};
/// Fits the decomposition and writes <output>/basis/basis.bin. A cache whose
/// header hash matches the inputs is reused without refitting.
DecomposeResult cmd_decompose(const RunConfig& config);

/// Reads the basis cache written by decompose; CacheInvalidError when corrupt,
/// ConfigError when absent or stale.
FluxBasisSet load_basis(const RunConfig& config);

/// Builds the per cell-month link; writes <output>/link/sif_link.csv.
SifLinkModel cmd_link(const RunConfig& config);

struct RespondResult {
  std::size_t rows = 0;
  std::size_t dropped_sif = 0;  ///< SIF observations in invalid cell-months
};
/// Response matrix and baseline for the usable observations; writes
/// <output>/respond/{response.bin, observations.csv}.
RespondResult cmd_respond(const RunConfig& config);

struct InvertResult {
  PosteriorSamples samples;
  std::map<std::string, ErrorParams> errors;  ///< stage-one estimates
  double min_ess = 0.0;
  bool ess_ok = true;
};
/// Stage one then the main run; writes <output>/invert/{alpha_samples.csv,
/// parameter_samples.csv, diagnostics.csv, error_params.csv}.
InvertResult cmd_invert(const RunConfig& config);

/// Scores <output>/invert/alpha_samples.csv against the truth file; writes
/// <output>/score/scores.csv.
std::vector<ScoreRow> cmd_score(const RunConfig& config);

/// Runs the experiment grid; writes <output>/osse/report.txt and one
/// directory per experiment. Returns the report text.
std::string cmd_osse(const RunConfig& config, const OsseManifest& manifest);

// ---------------------------------------------------------------- formats

/// Columns index,value over the full alpha layout.
std::string format_alpha_vector(const Eigen::VectorXd& alpha);
Eigen::VectorXd read_alpha_vector(const std::filesystem::path& path, std::size_t size);
/// Inverse of format_alpha_samples for a layout of `full_size` elements.
PosteriorSamples read_alpha_samples(const std::filesystem::path& path, std::size_t full_size);
/// Columns group,gamma,rho,length,rho_fixed.
std::string format_error_params(const std::map<std::string, ErrorParams>& errors);

/// Exports the desk world as pipeline inputs under `dir`: grid.csv,
/// bottom_up.csv, sif_pairs.csv, one observations_<case>.csv and
/// truth_<case>.csv per case, and a config.json that points at them.
void export_desk_inputs(const DeskScenario& scenario, const ExperimentGrid& grid, const OsseConfig& osse,
                        std::uint64_t seed, const std::filesystem::path& dir);

/// Entry point of the fluxinv binary.
int run(int argc, char** argv);

}  // namespace fluxinv::cli
