#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "unrect/geometry.hpp"
#include "unrect/test_sets.hpp"

namespace unrect {

// Hausdorff-measure convention: all estimates are unnormalised delta-scale
// contents (no alpha_m / 2^m constant). Acceptance quantities are ratios or
// zero/positive dichotomies, so the constant cancels.

enum class MeasureMethod { GridCover, IntervalUnion, FavardQuadrature };

std::string to_string(MeasureMethod method);

struct MeasureEstimate {
  double value = 0.0;
  double delta = 0.0;
  MeasureMethod method = MeasureMethod::GridCover;
  std::size_t samples = 0;
  /// Occupied cells (grid cover) or merged intervals (interval union).
  std::size_t cells = 0;
  /// Set when delta is far from the cloud's construction scale.
  std::optional<std::string> warning;
};

nlohmann::json to_json(const MeasureEstimate& estimate);

/// N(delta) * delta^m over the axis-aligned delta-grid anchored at `offset`
/// (zero when empty).
MeasureEstimate box_cover_measure(const std::vector<Vec>& points, int m, double delta,
                                  const Vec& offset = Vec());
MeasureEstimate box_cover_measure(const WeightedCloud& cloud, int m, double delta,
                                  const Vec& offset = Vec());

/// Mean of box_cover_measure over `offsets` deterministic grid anchors
/// (offset 0 first, then low-discrepancy shifts inside one cell).
MeasureEstimate box_cover_measure_averaged(const WeightedCloud& cloud, int m, double delta,
                                           int offsets = 4);
MeasureEstimate box_cover_measure_averaged(const std::vector<Vec>& points, int m, double delta,
                                           int offsets = 4);

/// Length of the union of the closed intervals [t_i - delta/2, t_i + delta/2]
/// by sort-and-sweep.
MeasureEstimate interval_union_length(std::vector<double> coordinates, double delta);

/// Interval-union length of the 1-D projections <p, (cos angle, sin angle)>.
MeasureEstimate projected_length(const WeightedCloud& cloud, double angle, double delta);

/// Angle mean of projected_length over `angles` equispaced directions in
/// [0, pi): (1/pi) * sum_j L(pi j / angles) * (pi / angles).
MeasureEstimate favard_length(const WeightedCloud& cloud, int angles, double delta);

struct AngleSample {
  double angle;
  MeasureEstimate estimate;
};

std::vector<AngleSample> projected_length_trace(const WeightedCloud& cloud, int angles,
                                                double delta);

/// CSV `angle,value,delta,method`.
std::string trace_to_csv(const std::vector<AngleSample>& trace);

/// Measure of a point set given in m-dimensional coordinates: interval union
/// for m = 1, grid cover otherwise.
MeasureEstimate coordinate_measure(const std::vector<Vec>& coordinates, double delta);

/// Warning text if delta is far (factor > 16) from the cloud's cell size.
std::optional<std::string> scale_warning(const WeightedCloud& cloud, double delta);

}  // namespace unrect
