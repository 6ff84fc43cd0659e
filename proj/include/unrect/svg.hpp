#pragma once

#include <string>
#include <vector>

#include "unrect/geometry.hpp"

namespace unrect {

struct PlotSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct ScatterLayer {
  std::string name;
  std::vector<Vec> points;  // first two coordinates are drawn
  std::string colour = "#1f77b4";
};

/// Static line plot with markers; empty series render as an empty frame.
std::string svg_line_plot(const std::vector<PlotSeries>& series, const std::string& title,
                          const std::string& x_label, const std::string& y_label);

/// Static scatter plot with equal axis scaling.
std::string svg_scatter(const std::vector<ScatterLayer>& layers, const std::string& title);

}  // namespace unrect
