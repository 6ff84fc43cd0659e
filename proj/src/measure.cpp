#include "unrect/measure.hpp"

#include <algorithm>
#include <array>
#include <cstdint>
#include <cmath>
#include <numbers>
#include <unordered_set>

#include "unrect/io.hpp"
#include "unrect/parallel.hpp"

namespace unrect {

namespace {

constexpr double kMinDelta = 1e-9;

void check_delta(double delta) {
  if (!(delta >= kMinDelta) || !std::isfinite(delta)) {
    throw ValidationError("covering scale delta must be >= 1e-9 and finite");
  }
}

struct CellHash {
  std::size_t operator()(const std::array<std::int64_t, 3>& c) const noexcept {
    std::uint64_t h = 1469598103934665603ull;
    for (auto v : c) {
      h ^= static_cast<std::uint64_t>(v) + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    }
    return static_cast<std::size_t>(h);
  }
};

}  // namespace

std::string to_string(MeasureMethod method) {
  switch (method) {
    case MeasureMethod::GridCover:
      return "grid_cover";
    case MeasureMethod::IntervalUnion:
      return "interval_union";
    case MeasureMethod::FavardQuadrature:
      return "favard_quadrature";
  }
  return "unknown";
}

nlohmann::json to_json(const MeasureEstimate& e) {
  nlohmann::json j{{"value", e.value},
                   {"delta", e.delta},
                   {"method", to_string(e.method)},
                   {"samples", e.samples},
                   {"cells", e.cells}};
  if (e.warning) j["warning"] = *e.warning;
  return j;
}

std::optional<std::string> scale_warning(const WeightedCloud& cloud, double delta) {
  if (cloud.cell_size <= 0.0 || cloud.generation <= 0) return std::nullopt;
  const double ratio = delta / cloud.cell_size;
  if (ratio > 16.0 || ratio < 1.0 / 16.0) {
    return "covering scale " + format_double(delta) + " is far from the construction scale " +
           format_double(cloud.cell_size) + "; finite clouds are only meaningful at matched scale";
  }
  return std::nullopt;
}

MeasureEstimate box_cover_measure(const std::vector<Vec>& points, int m, double delta,
                                  const Vec& offset) {
  check_delta(delta);
  MeasureEstimate est;
  est.delta = delta;
  est.method = MeasureMethod::GridCover;
  est.samples = points.size();
  if (points.empty()) return est;
  const int n = static_cast<int>(points.front().size());
  if (m < 1 || m >= n + 1) throw ValidationError("measure dimension must satisfy 1 <= m <= n");
  std::unordered_set<std::array<std::int64_t, 3>, CellHash> cells;
  cells.reserve(points.size());
  for (const Vec& p : points) {
    std::array<std::int64_t, 3> key{0, 0, 0};
    for (int d = 0; d < n; ++d) {
      const double o = offset.size() == n ? offset(d) : 0.0;
      key[static_cast<std::size_t>(d)] = static_cast<std::int64_t>(std::floor((p(d) - o) / delta));
    }
    cells.insert(key);
  }
  est.cells = cells.size();
  est.value = static_cast<double>(cells.size()) * std::pow(delta, m);
  return est;
}

MeasureEstimate box_cover_measure(const WeightedCloud& cloud, int m, double delta,
                                  const Vec& offset) {
  if (!cloud.empty() && m >= cloud.dim()) {
    throw ValidationError("box cover measure requires m < n");
  }
  MeasureEstimate est = box_cover_measure(cloud.points, m, delta, offset);
  est.warning = scale_warning(cloud, delta);
  return est;
}

MeasureEstimate box_cover_measure_averaged(const std::vector<Vec>& points, int m, double delta,
                                           int offsets) {
  if (offsets < 1) throw ValidationError("need at least one grid offset");
  MeasureEstimate acc;
  acc.delta = delta;
  acc.samples = points.size();
  if (points.empty()) {
    check_delta(delta);
    return acc;
  }
  const int n = static_cast<int>(points.front().size());
  // Additive recurrence with irrational steps per axis; k = 0 is the plain grid.
  const double steps[3] = {0.6180339887498949, 0.4142135623730950, 0.7320508075688772};
  double sum = 0.0;
  std::size_t cell_sum = 0;
  for (int k = 0; k < offsets; ++k) {
    Vec o(n);
    for (int d = 0; d < n; ++d) {
      const double frac = k * steps[d] - std::floor(k * steps[d]);
      o(d) = frac * delta;
    }
    const auto e = box_cover_measure(points, m, delta, o);
    sum += e.value;
    cell_sum += e.cells;
  }
  acc.value = sum / offsets;
  acc.cells = cell_sum / static_cast<std::size_t>(offsets);
  return acc;
}

MeasureEstimate box_cover_measure_averaged(const WeightedCloud& cloud, int m, double delta,
                                           int offsets) {
  if (!cloud.empty() && m >= cloud.dim()) {
    throw ValidationError("box cover measure requires m < n");
  }
  MeasureEstimate est = box_cover_measure_averaged(cloud.points, m, delta, offsets);
  est.warning = scale_warning(cloud, delta);
  return est;
}

MeasureEstimate interval_union_length(std::vector<double> t, double delta) {
  check_delta(delta);
  MeasureEstimate est;
  est.delta = delta;
  est.method = MeasureMethod::IntervalUnion;
  est.samples = t.size();
  if (t.empty()) return est;
  std::sort(t.begin(), t.end());
  const double half = 0.5 * delta;
  double total = 0.0;
  double lo = t.front() - half;
  double hi = t.front() + half;
  std::size_t components = 1;
  for (std::size_t i = 1; i < t.size(); ++i) {
    const double a = t[i] - half;
    const double b = t[i] + half;
    if (a > hi) {
      total += hi - lo;
      lo = a;
      hi = b;
      ++components;
    } else {
      hi = std::max(hi, b);
    }
  }
  total += hi - lo;
  est.value = total;
  est.cells = components;
  return est;
}

MeasureEstimate projected_length(const WeightedCloud& cloud, double angle, double delta) {
  if (!cloud.empty() && cloud.dim() != 2) throw ValidationError("projected_length requires n = 2");
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  std::vector<double> t;
  t.reserve(cloud.size());
  for (const Vec& p : cloud.points) t.push_back(p(0) * c + p(1) * s);
  MeasureEstimate est = interval_union_length(std::move(t), delta);
  est.warning = scale_warning(cloud, delta);
  return est;
}

std::vector<AngleSample> projected_length_trace(const WeightedCloud& cloud, int angles,
                                                double delta) {
  if (angles < 1) throw ValidationError("need at least one angle");
  check_delta(delta);
  std::vector<AngleSample> trace(static_cast<std::size_t>(angles));
  parallel_for(trace.size(), [&](std::size_t j) {
    const double a = std::numbers::pi * static_cast<double>(j) / angles;
    trace[j] = AngleSample{a, projected_length(cloud, a, delta)};
  });
  return trace;
}

MeasureEstimate favard_length(const WeightedCloud& cloud, int angles, double delta) {
  if (angles < 8) throw ValidationError("favard_length needs at least 8 angles");
  const auto trace = projected_length_trace(cloud, angles, delta);
  double sum = 0.0;
  for (const auto& s : trace) sum += s.estimate.value;
  MeasureEstimate est;
  est.value = sum / angles;
  est.delta = delta;
  est.method = MeasureMethod::FavardQuadrature;
  est.samples = static_cast<std::size_t>(angles);
  est.warning = scale_warning(cloud, delta);
  return est;
}

std::string trace_to_csv(const std::vector<AngleSample>& trace) {
  std::string out = "angle,value,delta,method\n";
  for (const auto& s : trace) {
    out += format_double(s.angle) + "," + format_double(s.estimate.value) + "," +
           format_double(s.estimate.delta) + "," + to_string(s.estimate.method) + "\n";
  }
  return out;
}

MeasureEstimate coordinate_measure(const std::vector<Vec>& coordinates, double delta) {
  if (coordinates.empty()) return interval_union_length({}, delta);
  const int m = static_cast<int>(coordinates.front().size());
  if (m == 1) {
    std::vector<double> t;
    t.reserve(coordinates.size());
    for (const Vec& c : coordinates) t.push_back(c(0));
    return interval_union_length(std::move(t), delta);
  }
  return box_cover_measure(coordinates, m, delta);
}

}  // namespace unrect
