#include "unrect/cover.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <map>

#include "unrect/io.hpp"
#include "unrect/json_util.hpp"
#include "unrect/measure.hpp"
#include "unrect/parallel.hpp"

namespace unrect {

// ---------------------------------------------------------------------------
// Grid

CellGrid::CellGrid(const Box& box, double h) : dim_(box.dim()), h_(h), box_(box) {
  check_dimension(dim_);
  if (!(h > 0.0) || !std::isfinite(h)) throw ValidationError("grid spacing must be positive");
  size_ = 1;
  for (int d = 0; d < dim_; ++d) {
    const double span = box.hi(d) - box.lo(d);
    extent_[static_cast<std::size_t>(d)] = std::max(1, static_cast<int>(std::ceil(span / h)));
    box_.hi(d) = box.lo(d) + extent_[static_cast<std::size_t>(d)] * h;
    size_ *= static_cast<std::size_t>(extent_[static_cast<std::size_t>(d)]);
  }
  if (size_ > 50'000'000) throw ValidationError("occupancy grid exceeds 5e7 cells");
}

std::optional<std::size_t> CellGrid::cell_of(const Vec& p) const {
  std::size_t flat = 0;
  std::size_t stride = 1;
  for (int d = 0; d < dim_; ++d) {
    const double u = std::floor((p(d) - box_.lo(d)) / h_);
    const int e = extent_[static_cast<std::size_t>(d)];
    if (!(u >= 0.0 && u < e)) return std::nullopt;
    flat += static_cast<std::size_t>(u) * stride;
    stride *= static_cast<std::size_t>(e);
  }
  return flat;
}

Vec CellGrid::center(std::size_t cell) const {
  Vec c(dim_);
  for (int d = 0; d < dim_; ++d) {
    const auto e = static_cast<std::size_t>(extent_[static_cast<std::size_t>(d)]);
    c(d) = box_.lo(d) + (static_cast<double>(cell % e) + 0.5) * h_;
    cell /= e;
  }
  return c;
}

void CellGrid::neighbours(std::size_t cell, std::vector<std::size_t>& out) const {
  out.clear();
  std::size_t stride = 1;
  std::size_t rest = cell;
  for (int d = 0; d < dim_; ++d) {
    const auto e = static_cast<std::size_t>(extent_[static_cast<std::size_t>(d)]);
    const std::size_t i = rest % e;
    rest /= e;
    if (i > 0) out.push_back(cell - stride);
    if (i + 1 < e) out.push_back(cell + stride);
    stride *= e;
  }
}

std::size_t mask_count(const CellMask& mask) {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

namespace {

// Centres of unoccupied cells touching the mask, including virtual cells
// just outside the grid.
std::vector<Vec> rim_points(const CellGrid& grid, const CellMask& mask) {
  std::vector<Vec> rim;
  std::vector<std::uint8_t> taken(grid.size(), 0);
  std::vector<std::size_t> nb;
  const int n = grid.dim();
  for (std::size_t c = 0; c < grid.size(); ++c) {
    if (!mask[c]) continue;
    grid.neighbours(c, nb);
    for (std::size_t q : nb) {
      if (!mask[q] && !taken[q]) {
        taken[q] = 1;
        rim.push_back(grid.center(q));
      }
    }
    if (static_cast<int>(nb.size()) < 2 * n) {
      const Vec centre = grid.center(c);
      for (int d = 0; d < n; ++d) {
        for (double s : {-1.0, 1.0}) {
          Vec q = centre;
          q(d) += s * grid.spacing();
          if (!grid.cell_of(q)) rim.push_back(q);
        }
      }
    }
  }
  return rim;
}

// Exact squared distance transform of one line (Felzenszwalb-Huttenlocher).
void edt_line(std::vector<double>& f, std::vector<double>& d, std::vector<int>& v,
              std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  constexpr double inf = std::numeric_limits<double>::infinity();
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[static_cast<std::size_t>(q)] == inf) continue;
    double s = -inf;
    while (k >= 0) {
      const int p = v[static_cast<std::size_t>(k)];
      s = ((f[static_cast<std::size_t>(q)] + q * q) - (f[static_cast<std::size_t>(p)] + p * p)) /
          (2.0 * (q - p));
      if (s > z[static_cast<std::size_t>(k)]) break;
      --k;
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = k == 0 ? -inf : s;
    z[static_cast<std::size_t>(k) + 1] = inf;
  }
  if (k < 0) {
    std::fill(d.begin(), d.end(), inf);
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[static_cast<std::size_t>(j) + 1] < q) ++j;
    const int p = v[static_cast<std::size_t>(j)];
    d[static_cast<std::size_t>(q)] = (q - p) * (q - p) + f[static_cast<std::size_t>(p)];
  }
}

// Distance from every cell centre to the nearest rim point, in cells. The
// grid is padded by one layer so rim points just outside it count.
std::vector<float> centre_distances(const CellGrid& grid, const std::vector<Vec>& rim) {
  const int n = grid.dim();
  std::array<std::size_t, 3> ext{1, 1, 1};
  std::size_t total = 1;
  for (int d = 0; d < n; ++d) {
    ext[static_cast<std::size_t>(d)] = static_cast<std::size_t>(grid.extent()[static_cast<std::size_t>(d)]) + 2;
    total *= ext[static_cast<std::size_t>(d)];
  }
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> sq(total, inf);
  for (const Vec& p : rim) {
    std::size_t idx = 0;
    std::size_t stride = 1;
    bool ok = true;
    for (int d = 0; d < n; ++d) {
      const long i = std::lround((p(d) - grid.box().lo(d)) / grid.spacing() - 0.5) + 1;
      if (i < 0 || i >= static_cast<long>(ext[static_cast<std::size_t>(d)])) {
        ok = false;
        break;
      }
      idx += static_cast<std::size_t>(i) * stride;
      stride *= ext[static_cast<std::size_t>(d)];
    }
    if (ok) sq[idx] = 0.0;
  }
  std::size_t stride = 1;
  for (int d = 0; d < n; ++d) {
    const std::size_t len = ext[static_cast<std::size_t>(d)];
    std::vector<double> f(len), out(len), z(len + 1);
    std::vector<int> v(len);
    for (std::size_t base = 0; base < total; ++base) {
      if ((base / stride) % len != 0) continue;
      for (std::size_t i = 0; i < len; ++i) f[i] = sq[base + i * stride];
      edt_line(f, out, v, z);
      for (std::size_t i = 0; i < len; ++i) sq[base + i * stride] = out[i];
    }
    stride *= len;
  }
  std::vector<float> result(grid.size());
  for (std::size_t c = 0; c < grid.size(); ++c) {
    std::size_t rem = c;
    std::size_t idx = 0;
    std::size_t st = 1;
    for (int d = 0; d < n; ++d) {
      const auto e = static_cast<std::size_t>(grid.extent()[static_cast<std::size_t>(d)]);
      idx += (rem % e + 1) * st;
      rem /= e;
      st *= ext[static_cast<std::size_t>(d)];
    }
    // Rounded down so the value stays a lower bound.
    result[c] = std::nextafter(static_cast<float>(std::sqrt(sq[idx])), 0.0f);
  }
  return result;
}

}  // namespace

GridRegion::GridRegion(const CellGrid& grid, CellMask mask)
    : grid_(grid), mask_(std::move(mask)) {
  if (mask_.size() != grid_.size()) throw ValidationError("mask size does not match the grid");
  count_ = mask_count(mask_);
  std::vector<Vec> rim = rim_points(grid_, mask_);
  if (!rim.empty()) {
    centre_distance_ = centre_distances(grid_, rim);
    rim_ = PointIndex(std::move(rim), 4.0 * grid_.spacing());
  }
  if (count_ > 0) {
    Vec lo = Vec::Constant(grid_.dim(), std::numeric_limits<double>::infinity());
    Vec hi = -lo;
    for (std::size_t c = 0; c < mask_.size(); ++c) {
      if (!mask_[c]) continue;
      const Vec p = grid_.center(c);
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
    bounds_ = Box{lo.array() - 0.5 * grid_.spacing(), hi.array() + 0.5 * grid_.spacing()};
  } else {
    bounds_ = Box{grid_.box().center(), grid_.box().center()};
  }
}

bool GridRegion::contains(const Vec& y) const {
  const auto c = grid_.cell_of(y);
  return c && mask_[*c];
}

double GridRegion::distance(const Vec& y) const {
  if (contains(y)) return 0.0;
  if (count_ == 0) return std::numeric_limits<double>::infinity();
  return std::max(0.0, rim_.nearest(y).distance - 0.5 * grid_.spacing());
}

Vec GridRegion::distance_gradient(const Vec& y) const {
  if (count_ == 0 || contains(y)) return Vec::Zero(y.size());
  const auto hit = rim_.nearest(y);
  if (hit.distance <= 0.5 * grid_.spacing()) return Vec::Zero(y.size());
  return (y - rim_.points()[hit.index]) / hit.distance;
}

bool GridRegion::farther_than(const Vec& y, double r) const {
  if (count_ == 0) return true;
  const auto c = grid_.cell_of(y);
  if (!c) return distance(y) >= r;
  if (mask_[*c]) return r <= 0.0;
  const double h = grid_.spacing();
  const double lower = (centre_distance_[*c] - 0.5 * std::sqrt(static_cast<double>(grid_.dim())) - 0.5) * h;
  return lower >= r || distance(y) >= r;
}

double GridRegion::distance_with_gradient(const Vec& y, Vec& gradient) const {
  gradient = Vec::Zero(y.size());
  if (contains(y)) return 0.0;
  if (count_ == 0) return std::numeric_limits<double>::infinity();
  const auto hit = rim_.nearest(y);
  if (hit.distance <= 0.5 * grid_.spacing()) return 0.0;
  gradient = (y - rim_.points()[hit.index]) / hit.distance;
  return hit.distance - 0.5 * grid_.spacing();
}

std::vector<Vec> GridRegion::samples() const {
  std::vector<Vec> out;
  out.reserve(count_);
  for (std::size_t c = 0; c < mask_.size(); ++c) {
    if (mask_[c]) out.push_back(grid_.center(c));
  }
  return out;
}

BoundaryDistance::BoundaryDistance(const CellGrid& grid, const CellMask& mask)
    : grid_(&grid), mask_(&mask) {
  std::vector<Vec> rim = rim_points(grid, mask);
  if (!rim.empty()) index_ = PointIndex(std::move(rim), 4.0 * grid.spacing());
}

double BoundaryDistance::operator()(const Vec& y) const {
  const auto c = grid_->cell_of(y);
  if (!c || !(*mask_)[*c] || index_.empty()) return 0.0;
  return std::max(0.0, index_.nearest(y).distance - 0.5 * grid_->spacing());
}

// ---------------------------------------------------------------------------
// Cover

bool ChartPiece::contains_open(const Vec& z) const {
  const Vec u = z - center;
  if (half_extents) return (u.cwiseAbs().array() < half_extents->array()).all();
  return u.norm() < radius;
}

bool ChartPiece::contains_closed(const Vec& z) const {
  const Vec u = z - center;
  if (half_extents) return (u.cwiseAbs().array() <= half_extents->array()).all();
  return u.norm() <= radius;
}

double ChartPiece::outer_radius() const { return half_extents ? half_extents->norm() : radius; }

double default_grid_spacing(const Box& domain) { return std::ldexp(domain.diameter(), -9); }

CoverFamily build_cover(const DiffeoPtr& phi, const std::vector<ChartPiece>& charts,
                        const Box& domain, double h, const DomainPredicate& inside) {
  if (!phi) throw ValidationError("cover needs the chart map phi");
  if (charts.empty()) throw ValidationError("cover needs at least one chart");
  const int n = phi->dim();
  for (const auto& c : charts) {
    if (c.center.size() != n) throw ValidationError("chart centre dimension mismatch");
    if (c.half_extents) {
      if (c.half_extents->size() != n || !(c.half_extents->minCoeff() > 0.0)) {
        throw ValidationError("chart box half extents must be positive");
      }
    } else if (!(c.radius > 0.0)) {
      throw ValidationError("chart radius must be positive");
    }
  }
  CoverFamily cover;
  cover.phi = phi;
  cover.charts = charts;
  cover.grid = CellGrid(domain.expanded(2.0 * h), h);
  const CellGrid& grid = cover.grid;

  std::vector<int> label(grid.size(), -1);
  std::size_t uncovered = 0;
  for (std::size_t c = 0; c < grid.size(); ++c) {
    const Vec x = grid.center(c);
    const Vec z = phi->forward(x);
    bool in_domain = domain.contains(x);
    bool any_closed = false;
    int first_closed = -1;
    for (std::size_t k = 0; k < charts.size(); ++k) {
      if (charts[k].contains_closed(z)) {
        any_closed = true;
        if (first_closed < 0) first_closed = static_cast<int>(k);
      }
    }
    in_domain = in_domain && (inside ? inside(x) : any_closed);
    if (!in_domain) continue;
    if (!any_closed) {
      ++uncovered;
      continue;
    }
    // Earliest chart whose closure contains z; keep the cell only if z is in
    // that chart's interior.
    if (charts[static_cast<std::size_t>(first_closed)].contains_open(z)) label[c] = first_closed;
  }
  if (uncovered > 0) {
    throw ValidationError("charts fail to cover the domain: " + std::to_string(uncovered) +
                          " grid cells uncovered");
  }

  std::vector<std::uint8_t> seen(grid.size(), 0);
  std::vector<std::size_t> nb;
  for (std::size_t k = 0; k < charts.size(); ++k) {
    for (std::size_t start = 0; start < grid.size(); ++start) {
      if (seen[start] || label[start] != static_cast<int>(k)) continue;
      CoverElement element;
      element.chart = static_cast<int>(k);
      element.mask.assign(grid.size(), 0);
      std::deque<std::size_t> queue{start};
      seen[start] = 1;
      while (!queue.empty()) {
        const std::size_t c = queue.front();
        queue.pop_front();
        element.mask[c] = 1;
        ++element.cells;
        grid.neighbours(c, nb);
        for (std::size_t q : nb) {
          if (!seen[q] && label[q] == static_cast<int>(k)) {
            seen[q] = 1;
            queue.push_back(q);
          }
        }
      }
      element.boundary = rim_points(grid, element.mask);
      cover.elements.push_back(std::move(element));
    }
  }
  return cover;
}

nlohmann::json to_json(const CoverFamily& cover) {
  nlohmann::json elements = nlohmann::json::array();
  for (const auto& e : cover.elements) {
    elements.push_back({{"chart", e.chart},
                        {"cells", e.cells},
                        {"area", static_cast<double>(e.cells) *
                                     std::pow(cover.grid.spacing(), cover.grid.dim())},
                        {"boundary_samples", e.boundary.size()}});
  }
  return {{"grid_spacing", cover.grid.spacing()},
          {"grid_cells", cover.grid.size()},
          {"elements", elements}};
}

// ---------------------------------------------------------------------------
// Collar

CollarChoice select_collar(const std::vector<double>& distances, const std::vector<double>& weights,
                           double budget, double mu0, double mu_limit, double mu_min,
                           double next_budget, double margin) {
  if (!(budget > 0.0)) throw ValidationError("collar budget must be positive");
  if (!(mu0 > 0.0)) throw ValidationError("initial collar width must be positive");
  if (distances.size() != weights.size()) throw ValidationError("collar weights mismatch");
  auto mass_below = [&](double lo, double hi) {
    double m = 0.0;
    for (std::size_t i = 0; i < distances.size(); ++i) {
      if (distances[i] >= lo && distances[i] < hi) m += weights[i];
    }
    return m;
  };
  auto lookahead = [&](double mu) {
    for (int j = 1; j < 64; ++j) {
      const double next = std::ldexp(mu, -j);
      if (next < mu_min) break;
      if (mass_below(-1.0, next + margin) + mass_below(mu - next - margin, mu + margin) <
          next_budget) {
        return true;
      }
    }
    return false;
  };

  CollarChoice plain;
  bool have_plain = false;
  CollarChoice choice;
  choice.budget = budget;
  for (int j = 0; j < 64; ++j) {
    const double mu = std::ldexp(mu0, -j);
    if (mu >= mu_limit) continue;
    if (mu < mu_min) break;
    ++choice.candidates;
    if (distances.empty()) {
      choice.mu = mu;
      choice.empty = true;
      return choice;
    }
    const bool on_shell = std::any_of(distances.begin(), distances.end(),
                                      [mu](double d) { return std::abs(d - mu) <= 1e-12 * mu; });
    if (on_shell) {
      ++choice.rejected_shell;
      continue;
    }
    const double mass = mass_below(-1.0, mu);
    if (!(mass < budget)) continue;
    choice.mu = mu;
    choice.mass = mass;
    if (next_budget <= 0.0 || lookahead(mu)) return choice;
    if (!have_plain) {
      plain = choice;
      have_plain = true;
    }
  }
  if (have_plain) {
    plain.candidates = choice.candidates;
    plain.rejected_shell = choice.rejected_shell;
    plain.lookahead_ok = false;
    return plain;
  }
  throw InfeasibleError("no admissible collar width above grid resolution (budget " +
                        format_double(budget) + ")");
}

// ---------------------------------------------------------------------------
// Iteration

std::vector<double> geometric_schedule(double eps, int n) {
  if (!(eps > 0.0)) throw ValidationError("epsilon must be positive");
  std::vector<double> s;
  for (int k = 1; k <= n; ++k) s.push_back(std::ldexp(eps, -k));
  return s;
}

bool IterationResult::ok() const {
  return !failure && std::all_of(rows.begin(), rows.end(), [](const LedgerRow& r) { return r.ok(); });
}

Vec apply_steps(const IterationResult& result, std::size_t k, const Vec& x) {
  Vec y = x;
  for (std::size_t i = 0; i < std::min(k, result.steps.size()); ++i) {
    if (result.steps[i]) y = result.steps[i]->forward(y);
  }
  return y;
}

SmoothMap composed_map(const IterationResult& result, std::size_t k) {
  SmoothMap map = identity_smooth_map();
  for (std::size_t i = 0; i < std::min(k, result.steps.size()); ++i) {
    if (!result.steps[i]) continue;
    const auto step = result.steps[i];
    SmoothMap s{[step](const Vec& x) { return step->forward(x); },
                [step](const Vec& x) { return step->jacobian(x); }};
    map = compose(std::move(s), std::move(map));
  }
  return map;
}

namespace {

double image_measure(const ConstantRankMap& f, const std::vector<Vec>& points, double delta) {
  const Mat basis = f.plane().basis();
  std::vector<Vec> coords;
  coords.reserve(points.size());
  for (const Vec& p : points) coords.push_back(basis.transpose() * f.psi_inv()->inverse(f.evaluate(p)));
  if (coords.empty()) return 0.0;
  return coordinate_measure(coords, delta).value;
}

std::vector<Vec> grid_in_mask(const CellGrid& grid, const CellMask& mask, int per_axis) {
  // Regular subsample of the mask's cell centres, about per_axis per axis.
  const GridRegion region(grid, mask);
  const Box b = region.bounds();
  const int n = grid.dim();
  std::size_t total = 1;
  for (int d = 0; d < n; ++d) total *= static_cast<std::size_t>(per_axis);
  std::vector<Vec> out;
  for (std::size_t k = 0; k < total; ++k) {
    std::size_t rem = k;
    Vec y(n);
    for (int d = 0; d < n; ++d) {
      y(d) = b.lo(d) + (static_cast<double>(rem % static_cast<std::size_t>(per_axis)) + 0.5) *
                           (b.hi(d) - b.lo(d)) / per_axis;
      rem /= static_cast<std::size_t>(per_axis);
    }
    const auto c = grid.cell_of(y);
    if (c && mask[*c]) out.push_back(grid.center(*c));
  }
  std::sort(out.begin(), out.end(), [](const Vec& a, const Vec& b) {
    return std::lexicographical_compare(a.data(), a.data() + a.size(), b.data(), b.data() + b.size());
  });
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

}  // namespace

IterationResult iterate_element(const ConstantRankMap& f_in, const WeightedCloud& cloud,
                                const CoverFamily& cover, std::size_t element_index,
                                const IterationOptions& options) {
  if (element_index >= cover.elements.size()) throw ValidationError("cover element out of range");
  if (options.steps < 0) throw ValidationError("step count must be nonnegative");
  if (!(options.epsilon > 0.0)) throw ValidationError("epsilon must be positive");
  if (cover.phi != f_in.phi()) throw ValidationError("cover must be built in the chart of f");
  if (!cloud.empty() && cloud.dim() != f_in.dim()) throw ValidationError("cloud dimension mismatch");
  const CoverElement& element = cover.elements[element_index];
  const ChartPiece& piece = cover.charts[static_cast<std::size_t>(element.chart)];
  const CellGrid& grid = cover.grid;
  const double h = grid.spacing();

  IterationResult result;
  result.schedule = options.schedule.empty() ? geometric_schedule(options.epsilon, options.steps)
                                             : options.schedule;
  if (static_cast<int>(result.schedule.size()) < options.steps) {
    throw ValidationError("schedule shorter than the step count");
  }
  double schedule_sum = 0.0;
  for (int k = 0; k < options.steps; ++k) schedule_sum += result.schedule[static_cast<std::size_t>(k)];
  if (schedule_sum > options.epsilon * (1.0 + 1e-12)) {
    throw ValidationError("schedule sums to more than epsilon");
  }

  ConstantRankMap f = f_in.recentred(piece.center, piece.outer_radius());
  const std::vector<Vec> element_grid = grid_in_mask(grid, element.mask, options.distance_grid);
  double lip = 0.0;
  for (const Vec& x : element_grid) lip = std::max(lip, operator_norm(f.jacobian(x)));
  if (lip > 1.0) {
    f = f.rescaled(1.0 / lip);
    result.lipschitz_scale = 1.0 / lip;
  }

  std::vector<Vec> points;
  std::vector<double> weights;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto c = grid.cell_of(cloud.points[i]);
    if (c && element.mask[*c]) {
      points.push_back(cloud.points[i]);
      weights.push_back(cloud.weights[i]);
    }
  }
  for (double w : weights) result.sigma += w;
  result.initial_measure = image_measure(f, points, options.delta);

  LedgerRow row0;
  row0.image_measure = result.initial_measure;
  row0.whole_image_measure = result.initial_measure;
  row0.region_mass = result.sigma;
  row0.active_cells = element.cells;
  result.rows.push_back(row0);

  std::vector<Vec> search_grid;
  if (options.steps > 0) search_grid = chart_grid(*f.phi(), f.chart_radius(), options.search_grid);

  CellMask region = element.mask;
  double mu_prev = std::numeric_limits<double>::infinity();
  double mu0 = 0.0;
  {
    const BoundaryDistance bd(grid, region);
    for (std::size_t c = 0; c < grid.size(); ++c) {
      if (region[c]) mu0 = std::max(mu0, bd(grid.center(c)));
    }
    mu0 /= 4.0;
  }
  double cum_budget = 0.0;
  std::vector<std::uint8_t> moved_last(points.size(), 0);

  for (int n = 1; n <= options.steps; ++n) {
    try {
      const double eps_n = result.schedule[static_cast<std::size_t>(n - 1)];
      cum_budget += eps_n;
      LedgerRow row;
      row.step = n;
      row.collar_budget = result.sigma / std::pow(3.0, n);
      row.image_budget = result.sigma / std::pow(2.0, n) + 4.0 * options.delta;
      row.step_budget = eps_n;
      row.cum_budget = cum_budget;
      row.active_cells = mask_count(region);

      const BoundaryDistance bd(grid, region);
      std::vector<std::size_t> inside;
      std::vector<double> dist;
      std::vector<double> w_inside;
      for (std::size_t i = 0; i < points.size(); ++i) {
        const auto c = grid.cell_of(points[i]);
        if (c && region[*c]) {
          inside.push_back(i);
          dist.push_back(bd(points[i]));
          w_inside.push_back(weights[i]);
        }
      }
      for (double w : w_inside) row.region_mass += w;

      std::shared_ptr<const FlowDiffeo> zeta;
      if (!inside.empty() && row.active_cells > 0) {
        const CollarChoice collar =
            select_collar(dist, w_inside, row.collar_budget, mu0, mu_prev, 2.0 * h,
                          n < options.steps ? row.collar_budget / 3.0 : 0.0, 2.0 * h);
        row.mu = collar.mu;
        row.collar_mass = collar.mass;
        mu_prev = collar.mu;

        CellMask core(grid.size(), 0);
        for (std::size_t c = 0; c < grid.size(); ++c) {
          if (region[c] && bd(grid.center(c)) >= collar.mu + 0.5 * h) core[c] = 1;
        }
        auto core_region = std::make_shared<GridRegion>(grid, core);

        WeightedCloud core_cloud;
        std::vector<Vec> collar_points;
        for (std::size_t k = 0; k < inside.size(); ++k) {
          if (dist[k] >= collar.mu) {
            core_cloud.points.push_back(points[inside[k]]);
            core_cloud.weights.push_back(w_inside[k]);
          } else {
            collar_points.push_back(points[inside[k]]);
          }
        }

        if (!core_region->empty() && !core_cloud.empty()) {
          SearchOptions so;
          so.epsilon = eps_n;
          so.rho = options.rho;
          so.trials = options.trials;
          so.delta = options.delta;
          so.seed = options.seed + static_cast<std::uint64_t>(n);
          so.grid = search_grid;
          const SearchReport search = search_rotation(f, core_cloud, so);
          row.searched_angle = search.best.angle();

          KeyLemmaOptions lo = options.lemma;
          lo.chart_radius = std::numeric_limits<double>::infinity();
          const KeyLemmaResult lemma =
              key_lemma_diffeo(f.phi(), search.best, core_region, collar.mu, 0.99 * eps_n / 3.0, lo);
          zeta = lemma.zeta;
          row.t_star = lemma.report.t_star;
          row.realised_angle = lemma.report.realised.angle();
          row.step_distance = lemma.report.c1_norm;
          nlohmann::json rep = to_json(lemma.report);
          rep["step"] = n;
          rep["search"] = {{"best_angle", search.best.angle()},
                           {"best_measure", search.best_measure},
                           {"baseline_measure", search.baseline_measure},
                           {"feasible", search.feasible},
                           {"trials", search.trace.size()}};
          result.lemma_reports.push_back(rep);

          // U_{n+1} = U_n minus zeta_n(O_n).
          const auto& field = zeta->field();
          std::vector<std::uint8_t> remove(grid.size(), 0);
          parallel_for(grid.size(), [&](std::size_t c) {
            if (!region[c]) return;
            const Vec y = grid.center(c);
            const Vec x = field.is_active(y) ? zeta->inverse(y) : y;
            if (core_region->contains(x)) remove[c] = 1;
          });
          for (std::size_t c = 0; c < grid.size(); ++c) {
            if (remove[c]) region[c] = 0;
          }
        } else {
          result.lemma_reports.push_back({{"step", n}, {"identity", true}});
        }

        std::vector<Vec> moved_collar;
        moved_collar.reserve(collar_points.size());
        for (const Vec& p : collar_points) moved_collar.push_back(zeta ? zeta->forward(p) : p);
        row.image_measure = image_measure(f, moved_collar, options.delta);
      } else {
        result.lemma_reports.push_back({{"step", n}, {"identity", true}, {"empty", true}});
      }

      result.steps.push_back(zeta);
      for (std::size_t i = 0; i < points.size(); ++i) {
        if (!zeta) {
          moved_last[i] = 0;
          continue;
        }
        const Vec q = zeta->forward(points[i]);
        moved_last[i] = !(q.array() == points[i].array()).all();
        points[i] = q;
      }
      row.whole_image_measure = image_measure(f, points, options.delta);
      row.cum_distance = c1_distance(composed_map(result, static_cast<std::size_t>(n)),
                                     identity_smooth_map(), element_grid);

      row.collar_ok = row.collar_mass < row.collar_budget;
      row.image_ok = row.image_measure <= row.image_budget;
      row.step_ok = row.step_distance <= row.step_budget;
      row.cum_ok = row.cum_distance <= row.cum_budget && row.cum_distance < options.epsilon;
      result.rows.push_back(row);
    } catch (const std::exception& e) {
      result.failure = std::current_exception();
      result.failure_message = "step " + std::to_string(n) + ": " + e.what();
      break;
    }
  }

  double stable = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!moved_last[i]) stable += weights[i];
  }
  result.stabilised_fraction = result.sigma > 0.0 ? stable / result.sigma : 1.0;
  result.final_points = std::move(points);
  result.final_region = std::move(region);
  return result;
}

void assert_ledger(const IterationResult& result) {
  if (result.failure) std::rethrow_exception(result.failure);
  for (const auto& r : result.rows) {
    const std::string at = "ledger step " + std::to_string(r.step) + ": ";
    if (!r.collar_ok) throw BudgetError(at + "collar mass exceeds sigma/3^n");
    if (!r.image_ok) throw BudgetError(at + "image measure exceeds sigma/2^n + 4 delta");
    if (!r.step_ok) throw BudgetError(at + "step distance exceeds eps_n");
    if (!r.cum_ok) throw BudgetError(at + "cumulative distance exceeds the scheduled sum");
  }
}

nlohmann::json to_json(const LedgerRow& r) {
  return {{"step", r.step},
          {"mu", r.mu},
          {"collar_mass", r.collar_mass},
          {"collar_budget", r.collar_budget},
          {"image_measure", r.image_measure},
          {"image_budget", r.image_budget},
          {"step_distance", r.step_distance},
          {"step_budget", r.step_budget},
          {"cum_distance", r.cum_distance},
          {"cum_budget", r.cum_budget},
          {"whole_image_measure", r.whole_image_measure},
          {"region_mass", r.region_mass},
          {"active_cells", r.active_cells},
          {"t_star", r.t_star},
          {"searched_angle", r.searched_angle},
          {"realised_angle", r.realised_angle},
          {"ok", r.ok()}};
}

nlohmann::json to_json(const IterationResult& result) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : result.rows) rows.push_back(to_json(r));
  return {{"sigma", result.sigma},
          {"initial_measure", result.initial_measure},
          {"lipschitz_scale", result.lipschitz_scale},
          {"schedule", result.schedule},
          {"stabilised_fraction", result.stabilised_fraction},
          {"ledger", rows},
          {"lemma", result.lemma_reports},
          {"ok", result.ok()},
          {"failure", result.failure_message}};
}

std::string ledger_to_csv(const std::vector<LedgerRow>& rows) {
  std::string out = "step,mu,collar_mass,image_measure,step_distance,cum_distance\n";
  for (const auto& r : rows) {
    out += std::to_string(r.step) + "," + format_double(r.mu) + "," + format_double(r.collar_mass) +
           "," + format_double(r.image_measure) + "," + format_double(r.step_distance) + "," +
           format_double(r.cum_distance) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cauchy and gluing

CauchyReport check_cauchy(const std::vector<SmoothMap>& maps, const std::vector<double>& schedule,
                          const std::vector<Vec>& grid, double tail_after) {
  if (maps.size() < 3) throw ValidationError("Cauchy check needs at least 3 successive maps");
  if (schedule.size() + 1 < maps.size()) throw ValidationError("schedule shorter than the map list");
  if (grid.empty()) throw ValidationError("Cauchy check needs a nonempty grid");
  std::vector<std::vector<Vec>> values(maps.size());
  std::vector<std::vector<Mat>> jacs(maps.size());
  for (std::size_t k = 0; k < maps.size(); ++k) {
    values[k].resize(grid.size());
    jacs[k].resize(grid.size());
    parallel_for(grid.size(), [&](std::size_t i) {
      values[k][i] = maps[k].value(grid[i]);
      jacs[k][i] = maps[k].jacobian(grid[i]);
    });
  }
  CauchyReport report;
  report.limit_tail = tail_after;
  for (std::size_t m = 0; m < maps.size(); ++m) {
    for (std::size_t n = m + 1; n < maps.size(); ++n) {
      CauchyEntry e;
      e.m = m;
      e.n = n;
      double vp = 0.0;
      double jp = 0.0;
      for (std::size_t i = 0; i < grid.size(); ++i) {
        vp = std::max(vp, (values[n][i] - values[m][i]).norm());
        jp = std::max(jp, operator_norm(jacs[n][i] - jacs[m][i]));
      }
      e.measured = vp + jp;
      for (std::size_t k = m + 1; k <= n; ++k) e.bound += schedule[k - 1];
      e.ok = e.measured <= e.bound * (1.0 + 1e-9) + 1e-15;
      if (!e.ok && !report.first_violation) report.first_violation = e;
      report.ok = report.ok && e.ok;
      report.entries.push_back(e);
    }
  }
  return report;
}

nlohmann::json to_json(const CauchyReport& report) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : report.entries) {
    entries.push_back({{"m", e.m}, {"n", e.n}, {"measured", e.measured}, {"bound", e.bound},
                       {"ok", e.ok}});
  }
  nlohmann::json j{{"entries", entries}, {"limit_tail", report.limit_tail}, {"ok", report.ok}};
  if (report.first_violation) {
    j["first_violation"] = {{"m", report.first_violation->m}, {"n", report.first_violation->n}};
  }
  return j;
}

Vec glued_map(const std::vector<IterationResult>& elements, std::size_t n, const Vec& x,
              bool reverse_order) {
  Vec y = x;
  const std::size_t count = elements.size();
  for (std::size_t j = 0; j < count; ++j) {
    // Outermost factor zeta_{1,n} is applied last.
    const std::size_t i = reverse_order ? j : count - 1 - j;
    const std::size_t k = n + 1 > i + 1 ? n - i : 0;
    y = apply_steps(elements[i], k, y);
  }
  return y;
}

nlohmann::json to_json(const GlueReport& r) {
  return {{"min_support_gap", std::isfinite(r.min_support_gap) ? r.min_support_gap : -1.0},
          {"disjoint", r.disjoint},
          {"order_difference", r.order_difference},
          {"element_mismatch", r.element_mismatch},
          {"residual_motion", r.residual_motion},
          {"checked_points", r.checked_points},
          {"support_cells", r.support_cells}};
}

GlueReport glue_global(const std::vector<IterationResult>& elements, const CoverFamily& cover,
                       std::size_t n) {
  const CellGrid& grid = cover.grid;
  GlueReport report;
  std::vector<int> owner(grid.size(), -1);
  std::vector<std::vector<Vec>> support(elements.size());
  bool overlap = false;
  for (std::size_t i = 0; i < elements.size(); ++i) {
    const std::size_t k = n + 1 > i + 1 ? n - i : 0;
    std::vector<std::shared_ptr<const FlowDiffeo>> used;
    for (std::size_t s = 0; s < std::min(k, elements[i].steps.size()); ++s) {
      if (elements[i].steps[s]) used.push_back(elements[i].steps[s]);
    }
    for (std::size_t c = 0; c < grid.size(); ++c) {
      const Vec y = grid.center(c);
      const bool active = std::any_of(used.begin(), used.end(),
                                      [&](const auto& z) { return z->field().is_active(y); });
      if (!active) continue;
      if (owner[c] >= 0) overlap = true;
      owner[c] = static_cast<int>(i);
      support[i].push_back(y);
    }
    report.support_cells.push_back(support[i].size());
  }
  report.min_support_gap = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < elements.size(); ++i) {
    if (support[i].empty()) continue;
    const PointIndex index(support[i], grid.spacing());
    for (std::size_t j = i + 1; j < elements.size(); ++j) {
      for (const Vec& p : support[j]) {
        report.min_support_gap = std::min(report.min_support_gap, index.nearest(p).distance);
      }
    }
  }
  report.disjoint = !overlap && report.min_support_gap > grid.spacing() * (1.0 - 1e-9);

  // Every support cell plus a thinned sample of the rest.
  const std::size_t stride = std::max<std::size_t>(1, grid.size() / 20000);
  for (std::size_t c = 0; c < grid.size(); ++c) {
    if (owner[c] < 0 && c % stride != 0) continue;
    const Vec x = grid.center(c);
    const Vec a = glued_map(elements, n, x, false);
    const Vec b = glued_map(elements, n, x, true);
    report.order_difference = std::max(report.order_difference, (a - b).norm());
    if (owner[c] >= 0) {
      const auto i = static_cast<std::size_t>(owner[c]);
      const std::size_t k = n + 1 > i + 1 ? n - i : 0;
      report.element_mismatch =
          std::max(report.element_mismatch, (a - apply_steps(elements[i], k, x)).norm());
    } else {
      report.residual_motion = std::max(report.residual_motion, (a - x).norm());
    }
    ++report.checked_points;
  }
  if (!report.disjoint) {
    throw BudgetError("supports of zeta - id overlap across cover elements (gap " +
                      format_double(report.min_support_gap) + ")");
  }
  return report;
}

}  // namespace unrect
