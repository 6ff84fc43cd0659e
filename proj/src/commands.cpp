#include "unrect/commands.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>

#include "unrect/errors.hpp"
#include "unrect/flow.hpp"
#include "unrect/io.hpp"
#include "unrect/json_util.hpp"
#include "unrect/measure.hpp"
#include "unrect/svg.hpp"

namespace unrect {

int exit_code_for(std::exception_ptr error) {
  if (!error) return kExitOk;
  try {
    std::rethrow_exception(error);
  } catch (const ValidationError&) {
    return kExitGuard;
  } catch (const DomainError&) {
    return kExitGuard;
  } catch (const InfeasibleError&) {
    return kExitInfeasible;
  } catch (const BudgetError&) {
    return kExitBudget;
  } catch (...) {
    return 1;
  }
}

namespace {

void require(bool condition, const std::string& message) {
  if (!condition) throw ValidationError(message);
}

std::uint64_t require_seed(const std::optional<std::uint64_t>& seed) {
  require(seed.has_value(), "--seed is required for randomised commands");
  return *seed;
}

double default_delta(const WeightedCloud& cloud) {
  return cloud.cell_size > 0.0 ? cloud.cell_size : 1.0 / 4096.0;
}

nlohmann::json set_json(const SetSpec& spec) {
  if (spec.input) return {{"input", spec.input->string()}};
  nlohmann::json j{{"set", spec.set}};
  if (spec.set == "four-corner" || spec.set == "sierpinski") {
    j["depth"] = spec.depth;
  } else if (spec.set == "segment") {
    j["a"] = vec_to_json(spec.a);
    j["b"] = vec_to_json(spec.b);
    j["samples"] = spec.samples;
  } else {
    j["coefficients"] = spec.coefficients;
    j["x0"] = spec.x0;
    j["x1"] = spec.x1;
    j["samples"] = spec.samples;
  }
  return j;
}

}  // namespace

WeightedCloud load_set(const SetSpec& spec) {
  if (spec.input) return read_cloud(*spec.input);
  if (spec.set == "four-corner") {
    require(spec.depth >= 0 && spec.depth <= kMaxFourCornerDepth, "four-corner depth must be in 0..8");
    return four_corner_cantor(spec.depth);
  }
  if (spec.set == "sierpinski") return ifs_set(IfsSystem::sierpinski(), spec.depth);
  require(spec.samples >= 1 && spec.samples <= 10000000, "samples must be in 1..1e7");
  if (spec.set == "segment") return rectifiable_curve(SegmentCurve{spec.a, spec.b}, spec.samples);
  if (spec.set == "graph") {
    return rectifiable_curve(PolynomialGraph{spec.coefficients, spec.x0, spec.x1}, spec.samples);
  }
  throw ValidationError("unknown set '" + spec.set + "'");
}

nlohmann::json run_gen(const GenConfig& config) {
  const WeightedCloud cloud = load_set(config.set);
  write_cloud(cloud, config.out);
  nlohmann::json j = cloud_metadata(cloud);
  j["points"] = cloud.size();
  j["out"] = config.out.string();
  return j;
}

// ---------------------------------------------------------------------------
// favard

std::string favard_table_csv(const std::vector<FavardRow>& rows, int angles) {
  std::string out = "depth,delta,angles,points,favard_length\n";
  for (const auto& r : rows) {
    out += std::to_string(r.depth) + "," + format_double(r.delta) + "," + std::to_string(angles) + "," +
           std::to_string(r.points) + "," + format_double(r.favard) + "\n";
  }
  return out;
}

nlohmann::json run_favard(const FavardConfig& config) {
  require(config.angles >= 1 && config.angles <= 100000, "angles must be in 1..1e5");
  require(!config.delta || *config.delta > 0.0, "delta must be positive");
  std::vector<WeightedCloud> clouds;
  const bool generated = !config.set.input && (config.set.set == "four-corner" || config.set.set == "sierpinski");
  if (generated && !config.depths.empty()) {
    for (int k : config.depths) {
      SetSpec spec = config.set;
      spec.depth = k;
      clouds.push_back(load_set(spec));
    }
  } else {
    clouds.push_back(load_set(config.set));
  }

  std::vector<FavardRow> rows;
  nlohmann::json warnings = nlohmann::json::array();
  for (const auto& cloud : clouds) {
    FavardRow row;
    row.depth = cloud.generation;
    row.delta = config.delta.value_or(default_delta(cloud));
    row.points = cloud.size();
    if (!cloud.empty()) {
      require(cloud.dim() == 2, "favard requires a planar cloud");
      const MeasureEstimate e = favard_length(cloud, config.angles, row.delta);
      row.favard = e.value;
      if (e.warning) warnings.push_back(*e.warning);
    }
    rows.push_back(row);
  }
  write_file_atomic(config.table, favard_table_csv(rows, config.angles));

  if (config.svg) {
    PlotSeries series{"favard length", {}, {}};
    for (const auto& r : rows) {
      series.x.push_back(r.depth);
      series.y.push_back(r.favard);
    }
    write_file_atomic(*config.svg, svg_line_plot({series}, "Favard length decay", "depth", "favard length"));
  }

  nlohmann::json table = nlohmann::json::array();
  for (const auto& r : rows) {
    table.push_back({{"depth", r.depth}, {"delta", r.delta}, {"points", r.points}, {"favard_length", r.favard}});
  }
  return {{"source", set_json(config.set)}, {"angles", config.angles}, {"rows", table},
          {"warnings", warnings}, {"table", config.table.string()}};
}

// ---------------------------------------------------------------------------
// Maps and charts

ChartChoice default_chart(const WeightedCloud& cloud) {
  require(!cloud.empty(), "cannot place a chart around an empty cloud");
  const Box box = bounding_box(cloud.points);
  const double diag = std::max(box.diameter(), 1e-9);
  return ChartChoice{box.center(), 0.75 * diag / std::sqrt(2.0)};
}

ConstantRankMap load_map(const MapSpec& spec, int n) {
  if (spec.file) return ConstantRankMap::from_json(nlohmann::json::parse(read_file(*spec.file)));
  require(n == 2, "the default line projection needs a planar cloud; pass --map");
  return ConstantRankMap::projection(Plane::line(spec.line_angle));
}

namespace {

struct PreparedMap {
  ConstantRankMap base;      // as loaded
  ConstantRankMap centred;   // written in the chart centred on the cloud
  ChartChoice chart;         // centre in phi-coordinates
};

PreparedMap prepare_map(const MapSpec& spec, const WeightedCloud& cloud) {
  require(!cloud.empty(), "the cloud is empty");
  ConstantRankMap base = load_map(spec, cloud.dim());
  require(base.dim() == cloud.dim(), "map and cloud dimensions differ");
  ChartChoice chart;
  if (spec.chart_center && spec.chart_radius) {
    chart = ChartChoice{*spec.chart_center, *spec.chart_radius};
  } else {
    std::vector<Vec> images;
    images.reserve(cloud.size());
    for (const Vec& p : cloud.points) images.push_back(base.phi()->forward(p));
    WeightedCloud chart_cloud;
    chart_cloud.points = std::move(images);
    chart = default_chart(chart_cloud);
    if (spec.chart_center) chart.center = *spec.chart_center;
    if (spec.chart_radius) chart.radius = *spec.chart_radius;
  }
  require(chart.center.size() == cloud.dim(), "chart centre dimension differs from the cloud");
  require(chart.radius > 0.0, "chart radius must be positive");
  return PreparedMap{base, base.recentred(chart.center, chart.radius), chart};
}

nlohmann::json chart_json(const ChartChoice& chart) {
  return {{"center", vec_to_json(chart.center)}, {"radius", chart.radius}};
}

std::string trace_csv(const SearchReport& report) {
  std::string out = "trial,angle,c1,feasible,measure\n";
  for (std::size_t i = 0; i < report.trace.size(); ++i) {
    const auto& t = report.trace[i];
    out += std::to_string(i) + "," + format_double(t.angle) + "," + format_double(t.c1) + "," +
           (t.feasible ? "1" : "0") + "," + (std::isnan(t.measure) ? "" : format_double(t.measure)) + "\n";
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// perturb

nlohmann::json run_perturb(const PerturbConfig& config) {
  const std::uint64_t seed = require_seed(config.seed);
  require(config.epsilon > 0.0 && config.epsilon <= 1.0, "epsilon must be in (0, 1]");
  require(config.rho > 0.0 && config.rho <= M_PI, "rho must be in (0, pi]");
  require(config.trials >= 1 && config.trials <= 100000, "trials must be in 1..1e5");
  require(config.grid >= 4 && config.grid <= 512, "grid must be in 4..512");
  const WeightedCloud cloud = load_set(config.set);
  const PreparedMap map = prepare_map(config.map, cloud);

  SearchOptions options;
  options.epsilon = config.epsilon;
  options.rho = config.rho;
  options.trials = config.trials;
  options.delta = config.delta.value_or(default_delta(cloud));
  require(options.delta > 0.0, "delta must be positive");
  options.seed = seed;
  options.grid = chart_grid(*map.centred.phi(), map.centred.chart_radius(), config.grid);

  nlohmann::json out{{"source", set_json(config.set)},
                     {"map", map.base.to_json()},
                     {"chart", chart_json(map.chart)},
                     {"epsilon", config.epsilon},
                     {"rho", config.rho},
                     {"trials", config.trials},
                     {"delta", options.delta},
                     {"seed", seed}};
  SearchReport report;
  try {
    report = search_rotation(map.centred, cloud, options);
  } catch (const InfeasibleError& e) {
    out["infeasible"] = e.what();
    write_file_atomic(config.report, out.dump(2) + "\n");
    throw;
  }
  const PushforwardEstimate before =
      pushforward_measure_after(map.centred, Rotation::identity(cloud.dim()), cloud, options.delta);
  const PushforwardEstimate after = pushforward_measure_after(map.centred, report.best, cloud, options.delta);

  double feasible_min = std::numeric_limits<double>::infinity();
  double feasible_max = 0.0;
  double max_c1 = 0.0;
  for (const auto& t : report.trace) {
    if (!t.feasible) continue;
    feasible_min = std::min(feasible_min, t.measure);
    feasible_max = std::max(feasible_max, t.measure);
    max_c1 = std::max(max_c1, t.c1);
  }
  out["search"] = to_json(report);
  out["baseline"] = to_json(before);
  out["best"] = to_json(after);
  out["measure_ratio"] = report.baseline_measure > 0.0 ? report.best_measure / report.baseline_measure : 0.0;
  out["feasible_measure_min"] = feasible_min;
  out["feasible_measure_max"] = feasible_max;
  out["feasible_c1_max"] = max_c1;
  write_file_atomic(config.report, out.dump(2) + "\n");
  if (config.trace) write_file_atomic(*config.trace, trace_csv(report));
  return out;
}

// ---------------------------------------------------------------------------
// iterate

nlohmann::json run_iterate(const IterateConfig& config) {
  const std::uint64_t seed = require_seed(config.seed);
  require(config.epsilon > 0.0 && config.epsilon <= 1.0, "epsilon must be in (0, 1]");
  require(config.steps >= 0 && config.steps <= 12, "steps must be in 0..12");
  require(config.trials >= 1 && config.trials <= 100000, "trials must be in 1..1e5");
  require(config.rho > 0.0 && config.rho <= M_PI, "rho must be in (0, pi]");
  const WeightedCloud cloud = load_set(config.set);
  const PreparedMap map = prepare_map(config.map, cloud);

  const ChartPiece piece{map.chart.center, map.chart.radius, std::nullopt};
  std::vector<Vec> rim = chart_boundary_samples(*map.base.phi(), map.chart.radius, 720);
  for (Vec& p : rim) p = map.base.phi()->inverse(map.chart.center + map.base.phi()->forward(p));
  Box domain = bounding_box(rim);
  const double h = config.spacing.value_or(default_grid_spacing(domain));
  require(h > 0.0, "grid spacing must be positive");
  domain = domain.expanded(h);
  const CoverFamily cover = build_cover(map.base.phi(), {piece}, domain, h);
  require(config.element < cover.elements.size(), "cover element out of range");

  IterationOptions options;
  options.epsilon = config.epsilon;
  options.steps = config.steps;
  options.delta = config.delta.value_or(default_delta(cloud));
  require(options.delta > 0.0, "delta must be positive");
  options.seed = seed;
  options.trials = config.trials;
  options.rho = config.rho;

  const IterationResult result = iterate_element(map.base, cloud, cover, config.element, options);

  namespace fs = std::filesystem;
  nlohmann::json summary{{"source", set_json(config.set)},
                         {"map", map.base.to_json()},
                         {"chart", chart_json(map.chart)},
                         {"cover", to_json(cover)},
                         {"element", config.element},
                         {"epsilon", config.epsilon},
                         {"steps", config.steps},
                         {"delta", options.delta},
                         {"seed", seed},
                         {"result", to_json(result)}};
  std::exception_ptr failure = result.failure;
  if (!failure) {
    try {
      assert_ledger(result);
    } catch (...) {
      failure = std::current_exception();
    }
  }
  summary["exit_code"] = exit_code_for(failure);
  write_file_atomic(config.out_dir / "ledger.csv", ledger_to_csv(result.rows));
  write_file_atomic(config.out_dir / "summary.json", summary.dump(2) + "\n");
  if (config.svg) {
    std::vector<Vec> before;
    const CoverElement& element = cover.elements[config.element];
    for (const Vec& p : cloud.points) {
      const auto c = cover.grid.cell_of(p);
      if (c && element.mask[*c]) before.push_back(p);
    }
    write_file_atomic(config.out_dir / "iterate.svg",
                      svg_scatter({ScatterLayer{"before", before, "#1f77b4"},
                                   ScatterLayer{"after", result.final_points, "#d62728"}},
                                  "Element points before and after the iteration"));
  }
  if (failure) std::rethrow_exception(failure);
  return summary;
}

}  // namespace unrect
