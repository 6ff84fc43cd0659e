#include "unrect/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace unrect {

namespace {

constexpr double kWidth = 640.0;
constexpr double kHeight = 480.0;
constexpr double kMargin = 60.0;
const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string label_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();

  void add(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void settle() {
    if (!(lo <= hi)) {
      lo = 0.0;
      hi = 1.0;
    }
    if (hi - lo < 1e-12) {
      lo -= 0.5;
      hi += 0.5;
    }
  }
};

std::string header(const std::string& title) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(kWidth) + "\" height=\"" +
         num(kHeight) + "\" viewBox=\"0 0 " + num(kWidth) + " " + num(kHeight) + "\">\n" +
         "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n" +
         "<text x=\"" + num(kWidth / 2) + "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"16\">" + escape(title) + "</text>\n";
}

std::string frame(const Range& xr, const Range& yr, const std::string& xl, const std::string& yl) {
  const double x0 = kMargin;
  const double x1 = kWidth - kMargin / 2;
  const double y0 = kHeight - kMargin;
  const double y1 = kMargin / 1.5;
  std::string s = "<rect x=\"" + num(x0) + "\" y=\"" + num(y1) + "\" width=\"" + num(x1 - x0) +
                  "\" height=\"" + num(y0 - y1) + "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double fx = x0 + (x1 - x0) * k / 4.0;
    const double fy = y0 - (y0 - y1) * k / 4.0;
    s += "<text x=\"" + num(fx) + "\" y=\"" + num(y0 + 16) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" +
         label_num(xr.lo + (xr.hi - xr.lo) * k / 4.0) + "</text>\n";
    s += "<text x=\"" + num(x0 - 6) + "\" y=\"" + num(fy + 4) +
         "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" +
         label_num(yr.lo + (yr.hi - yr.lo) * k / 4.0) + "</text>\n";
  }
  s += "<text x=\"" + num((x0 + x1) / 2) + "\" y=\"" + num(kHeight - 18) +
       "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">" + escape(xl) + "</text>\n";
  s += "<text x=\"16\" y=\"" + num((y0 + y1) / 2) + "\" transform=\"rotate(-90 16 " +
       num((y0 + y1) / 2) + ")\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">" +
       escape(yl) + "</text>\n";
  return s;
}

double map_x(const Range& r, double v) {
  return kMargin + (kWidth - 1.5 * kMargin) * (v - r.lo) / (r.hi - r.lo);
}

double map_y(const Range& r, double v) {
  const double y0 = kHeight - kMargin;
  const double y1 = kMargin / 1.5;
  return y0 - (y0 - y1) * (v - r.lo) / (r.hi - r.lo);
}

std::string legend(const std::vector<std::string>& names, const std::vector<std::string>& colours) {
  std::string s;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const double y = kMargin / 1.5 + 16 + 16 * static_cast<double>(i);
    s += "<rect x=\"" + num(kWidth - 200) + "\" y=\"" + num(y - 9) +
         "\" width=\"10\" height=\"10\" fill=\"" + colours[i] + "\"/>\n";
    s += "<text x=\"" + num(kWidth - 185) + "\" y=\"" + num(y) +
         "\" font-family=\"sans-serif\" font-size=\"12\">" + escape(names[i]) + "</text>\n";
  }
  return s;
}

}  // namespace

std::string svg_line_plot(const std::vector<PlotSeries>& series, const std::string& title,
                          const std::string& x_label, const std::string& y_label) {
  Range xr;
  Range yr;
  for (const auto& s : series) {
    for (double v : s.x) xr.add(v);
    for (double v : s.y) yr.add(v);
  }
  yr.add(0.0);
  xr.settle();
  yr.settle();
  std::string out = header(title) + frame(xr, yr, x_label, y_label);
  std::vector<std::string> names;
  std::vector<std::string> colours;
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const std::string colour = kPalette[i % std::size(kPalette)];
    names.push_back(s.name);
    colours.push_back(colour);
    const std::size_t count = std::min(s.x.size(), s.y.size());
    if (count == 0) continue;
    std::string path;
    for (std::size_t k = 0; k < count; ++k) {
      if (!std::isfinite(s.x[k]) || !std::isfinite(s.y[k])) continue;
      path += (path.empty() ? "M" : " L") + num(map_x(xr, s.x[k])) + " " + num(map_y(yr, s.y[k]));
      out += "<circle cx=\"" + num(map_x(xr, s.x[k])) + "\" cy=\"" + num(map_y(yr, s.y[k])) +
             "\" r=\"3\" fill=\"" + colour + "\"/>\n";
    }
    if (!path.empty()) {
      out += "<path d=\"" + path + "\" fill=\"none\" stroke=\"" + colour + "\" stroke-width=\"1.5\"/>\n";
    }
  }
  out += legend(names, colours);
  out += "</svg>\n";
  return out;
}

std::string svg_scatter(const std::vector<ScatterLayer>& layers, const std::string& title) {
  Range xr;
  Range yr;
  for (const auto& l : layers) {
    for (const Vec& p : l.points) {
      if (p.size() < 2) continue;
      xr.add(p(0));
      yr.add(p(1));
    }
  }
  xr.settle();
  yr.settle();
  // Equal scaling: widen the narrower range about its centre.
  const double plot_w = kWidth - 1.5 * kMargin;
  const double plot_h = kHeight - kMargin - kMargin / 1.5;
  const double scale = std::max((xr.hi - xr.lo) / plot_w, (yr.hi - yr.lo) / plot_h);
  const double cx = 0.5 * (xr.lo + xr.hi);
  const double cy = 0.5 * (yr.lo + yr.hi);
  xr.lo = cx - 0.5 * scale * plot_w;
  xr.hi = cx + 0.5 * scale * plot_w;
  yr.lo = cy - 0.5 * scale * plot_h;
  yr.hi = cy + 0.5 * scale * plot_h;

  std::string out = header(title) + frame(xr, yr, "x", "y");
  std::vector<std::string> names;
  std::vector<std::string> colours;
  for (const auto& l : layers) {
    names.push_back(l.name + " (" + std::to_string(l.points.size()) + ")");
    colours.push_back(l.colour);
    // Thin very large clouds so the file stays small.
    const std::size_t stride = std::max<std::size_t>(1, l.points.size() / 20000);
    for (std::size_t k = 0; k < l.points.size(); k += stride) {
      const Vec& p = l.points[k];
      if (p.size() < 2) continue;
      out += "<circle cx=\"" + num(map_x(xr, p(0))) + "\" cy=\"" + num(map_y(yr, p(1))) +
             "\" r=\"1.2\" fill=\"" + l.colour + "\" fill-opacity=\"0.7\"/>\n";
    }
  }
  out += legend(names, colours);
  out += "</svg>\n";
  return out;
}

}  // namespace unrect
