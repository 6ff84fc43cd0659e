#include <algorithm>
#include <sstream>

#include <CLI11.hpp>

#include "unrect/commands.hpp"
#include "unrect/errors.hpp"
#include "unrect/io.hpp"

namespace unrect {

namespace {

std::vector<double> parse_numbers(const std::string& text, const std::string& what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ValidationError("cannot parse '" + text + "' as a number list for " + what);
    }
  }
  if (out.empty()) throw ValidationError(what + " is empty");
  return out;
}

Vec parse_vec(const std::string& text, const std::string& what) {
  const auto v = parse_numbers(text, what);
  if (v.size() < 2 || v.size() > 3) throw ValidationError(what + " needs 2 or 3 coordinates");
  Vec out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out(static_cast<Eigen::Index>(i)) = v[i];
  return out;
}

// "1..6" or "1,3,5".
std::vector<int> parse_depths(const std::string& text) {
  std::vector<int> out;
  const auto dots = text.find("..");
  try {
    if (dots != std::string::npos) {
      const int lo = std::stoi(text.substr(0, dots));
      const int hi = std::stoi(text.substr(dots + 2));
      if (hi < lo) throw ValidationError("empty depth range " + text);
      for (int k = lo; k <= hi; ++k) out.push_back(k);
      return out;
    }
  } catch (const std::logic_error&) {
    throw ValidationError("cannot parse depth range " + text);
  }
  for (double v : parse_numbers(text, "depths")) out.push_back(static_cast<int>(v));
  return out;
}

std::string json_scalar(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_array()) {
    std::string s;
    for (const auto& x : v) {
      if (!s.empty()) s += ',';
      s += json_scalar(x);
    }
    return s;
  }
  if (v.is_number_float()) return format_double(v.get<double>());
  return v.dump();
}

// Config entries become leading flags so later explicit flags win.
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::vector<std::string> rest;
  std::optional<std::string> config_path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw ValidationError("--config needs a path");
      config_path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      config_path = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (!config_path) return rest;

  nlohmann::json config;
  try {
    config = nlohmann::json::parse(read_file(*config_path));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config " + *config_path + ": " + e.what());
  } catch (const std::runtime_error& e) {
    throw ValidationError(e.what());
  }
  if (!config.is_object()) throw ValidationError("config must be a JSON object");

  auto command_pos = std::find_if(rest.begin(), rest.end(),
                                  [](const std::string& a) { return !a.empty() && a[0] != '-'; });
  if (command_pos == rest.end()) {
    if (!config.contains("command")) throw ValidationError("no command given");
    rest.insert(rest.begin(), config["command"].get<std::string>());
    command_pos = rest.begin();
  }
  std::vector<std::string> flags;
  for (const auto& [key, value] : config.items()) {
    if (key == "command") continue;
    std::string name = key;
    std::replace(name.begin(), name.end(), '_', '-');
    if (value.is_boolean()) {
      if (value.get<bool>()) flags.push_back("--" + name);
      continue;
    }
    if (value.is_null()) continue;
    flags.push_back("--" + name);
    flags.push_back(json_scalar(value));
  }
  rest.insert(command_pos + 1, flags.begin(), flags.end());
  return rest;
}

struct SetFlags {
  std::string a = "0,0";
  std::string b = "1,0";
  std::string coefficients = "0,0,1";
  std::string input;
};

void add_set_options(CLI::App* cmd, SetSpec& spec, SetFlags& flags) {
  cmd->add_option("--set", spec.set, "four-corner, sierpinski, segment or graph")->capture_default_str();
  cmd->add_option("--depth", spec.depth, "generation depth")->capture_default_str();
  cmd->add_option("--a", flags.a, "segment start x,y[,z]")->capture_default_str();
  cmd->add_option("--b", flags.b, "segment end x,y[,z]")->capture_default_str();
  cmd->add_option("--samples", spec.samples, "curve samples")->capture_default_str();
  cmd->add_option("--coefficients", flags.coefficients, "graph polynomial c0,c1,...")->capture_default_str();
  cmd->add_option("--x0", spec.x0, "graph interval start")->capture_default_str();
  cmd->add_option("--x1", spec.x1, "graph interval end")->capture_default_str();
  cmd->add_option("--input", flags.input, "read the cloud from a CSV instead of generating it");
}

void finish_set(SetSpec& spec, const SetFlags& flags) {
  spec.a = parse_vec(flags.a, "--a");
  spec.b = parse_vec(flags.b, "--b");
  spec.coefficients = parse_numbers(flags.coefficients, "--coefficients");
  if (!flags.input.empty()) spec.input = flags.input;
}

struct MapFlags {
  std::string file;
  std::string center;
  double radius = 0.0;
  CLI::Option* radius_opt = nullptr;
};

void add_map_options(CLI::App* cmd, MapSpec& spec, MapFlags& flags) {
  cmd->add_option("--map", flags.file, "constant-rank map JSON");
  cmd->add_option("--line-angle", spec.line_angle, "direction of the projection line")->capture_default_str();
  cmd->add_option("--chart-center", flags.center, "chart centre in phi-coordinates");
  flags.radius_opt = cmd->add_option("--chart-radius", flags.radius, "chart radius");
}

void finish_map(MapSpec& spec, const MapFlags& flags) {
  if (!flags.file.empty()) spec.file = flags.file;
  if (!flags.center.empty()) spec.chart_center = parse_vec(flags.center, "--chart-center");
  if (flags.radius_opt->count() > 0) spec.chart_radius = flags.radius;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"unrect: constant-rank measure-zeroing laboratory"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  app.set_version_flag("--version", "unrect 1.0");
  app.add_option("--config", "JSON file of flag defaults");

  std::uint64_t seed = 0;
  double delta = 0.0;

  GenConfig gen;
  SetFlags gen_set;
  std::string gen_out = gen.out.string();
  auto* gen_cmd = app.add_subcommand("gen", "generate a weighted test cloud");
  add_set_options(gen_cmd, gen.set, gen_set);
  gen_cmd->add_option("--out", gen_out, "cloud CSV path (sidecar gets .json)")->capture_default_str();

  FavardConfig fav;
  SetFlags fav_set;
  std::string fav_depths;
  std::string fav_table = fav.table.string();
  std::string fav_svg;
  auto* fav_cmd = app.add_subcommand("favard", "Favard length decay table");
  add_set_options(fav_cmd, fav.set, fav_set);
  fav_cmd->add_option("--depths", fav_depths, "depth list: 1..6 or 1,2,3");
  fav_cmd->add_option("--angles", fav.angles, "equispaced directions in [0, pi)")->capture_default_str();
  auto* fav_delta = fav_cmd->add_option("--delta", delta, "interval width");
  fav_cmd->add_option("--table", fav_table, "CSV table path")->capture_default_str();
  fav_cmd->add_option("--svg", fav_svg, "decay plot path");

  PerturbConfig per;
  SetFlags per_set;
  MapFlags per_map;
  std::string per_report = per.report.string();
  std::string per_trace;
  auto* per_cmd = app.add_subcommand("perturb", "rotation search for the local variant");
  add_set_options(per_cmd, per.set, per_set);
  add_map_options(per_cmd, per.map, per_map);
  per_cmd->add_option("--epsilon", per.epsilon, "C1 budget")->capture_default_str();
  per_cmd->add_option("--rho", per.rho, "maximal rotation angle")->capture_default_str();
  per_cmd->add_option("--trials", per.trials, "random rotations")->capture_default_str();
  per_cmd->add_option("--grid", per.grid, "C1 grid points per axis")->capture_default_str();
  auto* per_delta = per_cmd->add_option("--delta", delta, "covering scale");
  auto* per_seed = per_cmd->add_option("--seed", seed, "random seed (required)");
  per_cmd->add_option("--report", per_report, "JSON report path")->capture_default_str();
  per_cmd->add_option("--trace", per_trace, "trial trace CSV path");

  IterateConfig it;
  SetFlags it_set;
  MapFlags it_map;
  std::string it_out = it.out_dir.string();
  double it_spacing = 0.0;
  auto* it_cmd = app.add_subcommand("iterate", "collar iteration on one cover element");
  add_set_options(it_cmd, it.set, it_set);
  add_map_options(it_cmd, it.map, it_map);
  it_cmd->add_option("--epsilon", it.epsilon, "total C1 budget")->capture_default_str();
  it_cmd->add_option("--steps", it.steps, "iteration count N")->capture_default_str();
  it_cmd->add_option("--trials", it.trials, "rotation trials per step")->capture_default_str();
  it_cmd->add_option("--rho", it.rho, "maximal rotation angle")->capture_default_str();
  it_cmd->add_option("--element", it.element, "cover element index")->capture_default_str();
  auto* it_spacing_opt = it_cmd->add_option("--spacing", it_spacing, "cover grid spacing");
  auto* it_delta = it_cmd->add_option("--delta", delta, "covering scale");
  auto* it_seed = it_cmd->add_option("--seed", seed, "random seed (required)");
  it_cmd->add_option("--out-dir", it_out, "output directory")->capture_default_str();
  it_cmd->add_flag("--svg", it.svg, "also write iterate.svg");

  try {
    std::vector<std::string> argv = expand_config(args);
    std::reverse(argv.begin(), argv.end());
    app.parse(argv);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitGuard;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(std::current_exception());
  }

  try {
    if (gen_cmd->parsed()) {
      finish_set(gen.set, gen_set);
      gen.out = gen_out;
      out << run_gen(gen).dump(2) << "\n";
    } else if (fav_cmd->parsed()) {
      finish_set(fav.set, fav_set);
      if (!fav_depths.empty()) fav.depths = parse_depths(fav_depths);
      if (fav_delta->count() > 0) fav.delta = delta;
      fav.table = fav_table;
      if (!fav_svg.empty()) fav.svg = fav_svg;
      const auto summary = run_favard(fav);
      out << read_file(fav.table);
      for (const auto& w : summary["warnings"]) err << "warning: " << w.get<std::string>() << "\n";
    } else if (per_cmd->parsed()) {
      finish_set(per.set, per_set);
      finish_map(per.map, per_map);
      if (per_delta->count() > 0) per.delta = delta;
      if (per_seed->count() > 0) per.seed = seed;
      per.report = per_report;
      if (!per_trace.empty()) per.trace = per_trace;
      const auto r = run_perturb(per);
      out << "baseline_measure " << format_double(r["search"]["baseline_measure"].get<double>()) << "\n"
          << "best_measure " << format_double(r["search"]["best_measure"].get<double>()) << "\n"
          << "measure_ratio " << format_double(r["measure_ratio"].get<double>()) << "\n"
          << "best_angle " << format_double(r["search"]["best_angle"].get<double>()) << "\n"
          << "best_c1 " << format_double(r["search"]["best_c1"].get<double>()) << "\n"
          << "feasible " << r["search"]["feasible"].get<std::size_t>() << "\n";
    } else if (it_cmd->parsed()) {
      finish_set(it.set, it_set);
      finish_map(it.map, it_map);
      if (it_spacing_opt->count() > 0) it.spacing = it_spacing;
      if (it_delta->count() > 0) it.delta = delta;
      if (it_seed->count() > 0) it.seed = seed;
      it.out_dir = it_out;
      run_iterate(it);
      out << read_file(it.out_dir / "ledger.csv");
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(std::current_exception());
  }
  return kExitOk;
}

}  // namespace unrect
