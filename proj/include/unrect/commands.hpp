#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "unrect/constant_rank.hpp"
#include "unrect/cover.hpp"
#include "unrect/test_sets.hpp"

namespace unrect {

// Exit codes of the command-line driver.
inline constexpr int kExitOk = 0;
inline constexpr int kExitGuard = 2;
inline constexpr int kExitInfeasible = 3;
inline constexpr int kExitBudget = 4;

/// Maps an exception to the exit code above (1 for anything unexpected).
int exit_code_for(std::exception_ptr error);

/// Test-set source shared by all commands: either a cloud file or a
/// generator spec.
struct SetSpec {
  std::string set = "four-corner";  // four-corner | sierpinski | segment | graph
  int depth = 3;
  Vec a = make_vec({0.0, 0.0});
  Vec b = make_vec({1.0, 0.0});
  int samples = 1000;
  std::vector<double> coefficients{0.0, 0.0, 1.0};
  double x0 = 0.0;
  double x1 = 1.0;
  std::optional<std::filesystem::path> input;
};

WeightedCloud load_set(const SetSpec& spec);

struct GenConfig {
  SetSpec set;
  std::filesystem::path out = "cloud.csv";
};

/// Writes the cloud CSV and its JSON sidecar.
nlohmann::json run_gen(const GenConfig& config);

struct FavardConfig {
  SetSpec set;
  /// Depth list for generated self-similar sets; ignored with an input file.
  std::vector<int> depths;
  int angles = 720;
  /// Empty means 4^-k for four-corner depth k, else the cloud cell size.
  std::optional<double> delta;
  std::filesystem::path table = "favard.csv";
  std::optional<std::filesystem::path> svg;
};

struct FavardRow {
  int depth = 0;
  double delta = 0.0;
  std::size_t points = 0;
  double favard = 0.0;
};

/// CSV `depth,delta,angles,points,favard_length`.
std::string favard_table_csv(const std::vector<FavardRow>& rows, int angles);

nlohmann::json run_favard(const FavardConfig& config);

/// Default normal-form chart around a cloud: centre of the bounding box,
/// radius 0.75 * diag / sqrt(2).
struct ChartChoice {
  Vec center;
  double radius = 0.0;
};

ChartChoice default_chart(const WeightedCloud& cloud);

/// Map source: a JSON file, or the projection onto the line at `line_angle`.
struct MapSpec {
  std::optional<std::filesystem::path> file;
  double line_angle = 1.1071487177940904;  // atan2(2, 1)
  std::optional<Vec> chart_center;
  std::optional<double> chart_radius;
};

ConstantRankMap load_map(const MapSpec& spec, int n);

struct PerturbConfig {
  SetSpec set;
  MapSpec map;
  double epsilon = 0.1;
  double rho = 0.3;
  int trials = 256;
  std::optional<double> delta;
  std::optional<std::uint64_t> seed;
  int grid = 64;
  std::filesystem::path report = "perturb.json";
  std::optional<std::filesystem::path> trace;
};

/// Search report plus pushforward estimates of the winner and of theta = id.
nlohmann::json run_perturb(const PerturbConfig& config);

struct IterateConfig {
  SetSpec set;
  MapSpec map;
  double epsilon = 0.1;
  int steps = 3;
  int trials = 64;
  double rho = 0.3;
  std::optional<double> delta;
  std::optional<std::uint64_t> seed;
  /// Grid spacing; empty means 2^-9 times the domain diameter.
  std::optional<double> spacing;
  std::size_t element = 0;
  std::filesystem::path out_dir = "run";
  bool svg = false;
};

/// Runs iterate_element and writes ledger.csv and summary.json (and
/// iterate.svg). Outputs are written before a failure is rethrown.
nlohmann::json run_iterate(const IterateConfig& config);

/// Command-line entry: args exclude the program name. `--config <json>`
/// supplies defaults that explicit flags override.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace unrect
