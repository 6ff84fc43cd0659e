#include "unrect/flow.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "unrect/json_util.hpp"
#include "unrect/parallel.hpp"

namespace unrect {

DiffeoPtr conjugated_rotation(const DiffeoPtr& phi, const Rotation& theta, double chart_radius) {
  if (!phi) throw ValidationError("conjugated rotation needs a chart");
  const int n = phi->dim();
  if (theta.dim() != n) throw ValidationError("rotation dimension does not match the chart");
  if (std::isfinite(chart_radius)) {
    for (const Vec& b : chart_boundary_samples(*phi, chart_radius, n == 2 ? 360 : 1000)) {
      if (theta.apply(phi->forward(b)).norm() > chart_radius * (1.0 + 1e-9)) {
        throw DomainError("rotation pushes chart points outside the chart ball");
      }
    }
  }
  if (theta.is_identity()) return identity_diffeo(n);
  return compose_diffeos({phi, affine_diffeo(theta.matrix(), Vec::Zero(n)), inverse_diffeo(phi)});
}

double estimate_lipschitz(const VectorField& field, const std::vector<Vec>& samples) {
  double lip = 0.0;
  for (const Vec& y : samples) {
    if (field.is_active(y)) lip = std::max(lip, operator_norm(field.jacobian(y)));
  }
  return lip;
}

VectorField generator_field(const DiffeoPtr& phi, const Mat& generator, double chart_radius) {
  if (!phi) throw ValidationError("generator field needs a chart");
  const int n = phi->dim();
  if (generator.rows() != n || generator.cols() != n) {
    throw ValidationError("generator dimension does not match the chart");
  }
  const double scale = std::max(1.0, generator.cwiseAbs().maxCoeff());
  if ((generator + generator.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
    throw ValidationError("rotation generator must be skew-symmetric");
  }
  VectorField v;
  v.dim = n;
  v.value = [phi, generator](const Vec& y) -> Vec {
    return phi->jacobian(y).inverse() * (generator * phi->forward(y));
  };
  v.jacobian = [phi, generator, n](const Vec& y) -> Mat {
    const Mat a = phi->jacobian(y);
    const Mat a_inv = a.inverse();
    const Vec w = a_inv * (generator * phi->forward(y));
    Mat d = a_inv * generator * a;
    for (int j = 0; j < n; ++j) {
      d.col(j) -= a_inv * (phi->jacobian_derivative(y, Vec::Unit(n, j)) * w);
    }
    return d;
  };
  v.description = "generator";
  v.lipschitz = estimate_lipschitz(v, chart_grid(*phi, chart_radius, 16));
  return v;
}

VectorField cutoff_field(const VectorField& field, const CutoffProfile& profile) {
  VectorField w;
  w.dim = field.dim;
  const RegionPtr region = profile.center_ptr();
  const double plateau = profile.plateau_radius();
  const double support = profile.support_radius();
  const double band = support - plateau;
  const VectorField base = field;
  w.active = [region, support](const Vec& y) { return !region->farther_than(y, support); };
  w.value = [region, base, plateau, support, band](const Vec& y) -> Vec {
    const double d = region->distance(y);
    if (d >= support) return Vec::Zero(y.size());
    const double c = cutoff_transition((d - plateau) / band);
    if (c == 1.0) return base.value(y);
    return c * base.value(y);
  };
  w.jacobian = [region, base, plateau, support, band](const Vec& y) -> Mat {
    const auto n = y.size();
    Vec dgrad;
    const double d = region->distance_with_gradient(y, dgrad);
    if (d >= support) return Mat::Zero(n, n);
    const double u = (d - plateau) / band;
    const double c = cutoff_transition(u);
    if (u <= 0.0) return base.jacobian(y);
    const Vec grad = (cutoff_transition_derivative(u) / band) * dgrad;
    return base.value(y) * grad.transpose() + c * base.jacobian(y);
  };
  w.description = "cutoff(" + field.description + ")";
  w.lipschitz = estimate_lipschitz(w, support_samples(profile));
  return w;
}

std::vector<Vec> support_samples(const CutoffProfile& profile, int directions,
                                 std::size_t max_centers) {
  const Region& region = profile.center();
  const int n = region.dim();
  std::vector<Vec> centers = region.samples();
  if (centers.size() > max_centers) {
    std::vector<Vec> thinned;
    const double stride = static_cast<double>(centers.size()) / static_cast<double>(max_centers);
    for (std::size_t k = 0; k < max_centers; ++k) {
      thinned.push_back(centers[static_cast<std::size_t>(static_cast<double>(k) * stride)]);
    }
    centers = std::move(thinned);
  }
  std::vector<Vec> dirs;
  if (n == 2) {
    for (int k = 0; k < directions; ++k) {
      const double a = 2.0 * std::numbers::pi * k / directions;
      dirs.push_back(make_vec({std::cos(a), std::sin(a)}));
    }
  } else {
    const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
    const int count = std::max(directions, 8) * 2;
    for (int k = 0; k < count; ++k) {
      const double z = 1.0 - 2.0 * (k + 0.5) / count;
      const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
      dirs.push_back(make_vec({r * std::cos(golden * k), r * std::sin(golden * k), z}));
    }
  }
  const double step = profile.width() / 8.0;
  const double support = profile.support_radius();
  std::vector<Vec> out;
  for (const Vec& c : centers) {
    out.push_back(c);
    for (const Vec& u : dirs) {
      for (int k = 1; k < 4096; ++k) {
        const Vec y = c + (k * step) * u;
        const double d = region.distance(y);
        if (d > 0.0) out.push_back(y);
        if (d >= support) break;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Flow

FlowDiffeo::FlowDiffeo(VectorField field, double time, int steps)
    : field_(std::move(field)), time_(time), steps_(steps) {
  check_dimension(field_.dim);
  if (steps_ < kMinFlowSteps) throw ValidationError("flow integration needs at least 16 steps");
  if (!std::isfinite(time_)) throw ValidationError("flow time must be finite");
}

Vec FlowDiffeo::integrate(const Vec& x, double t) const {
  if (t == 0.0 || !field_.is_active(x)) return x;
  const double h = t / steps_;
  Vec y = x;
  for (int s = 0; s < steps_; ++s) {
    const Vec k1 = field_.value(y);
    const Vec k2 = field_.value(y + 0.5 * h * k1);
    const Vec k3 = field_.value(y + 0.5 * h * k2);
    const Vec k4 = field_.value(y + h * k3);
    y += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  return y;
}

std::pair<Vec, Mat> FlowDiffeo::integrate_with_jacobian(const Vec& x, double t) const {
  const auto n = x.size();
  if (t == 0.0 || !field_.is_active(x)) return {x, Mat::Identity(n, n)};
  const double h = t / steps_;
  Vec y = x;
  Mat j = Mat::Identity(n, n);
  for (int s = 0; s < steps_; ++s) {
    const Vec k1 = field_.value(y);
    const Mat q1 = field_.jacobian(y) * j;
    const Vec y2 = y + 0.5 * h * k1;
    const Mat j2 = j + 0.5 * h * q1;
    const Vec k2 = field_.value(y2);
    const Mat q2 = field_.jacobian(y2) * j2;
    const Vec y3 = y + 0.5 * h * k2;
    const Mat j3 = j + 0.5 * h * q2;
    const Vec k3 = field_.value(y3);
    const Mat q3 = field_.jacobian(y3) * j3;
    const Vec y4 = y + h * k3;
    const Mat j4 = j + h * q3;
    const Vec k4 = field_.value(y4);
    const Mat q4 = field_.jacobian(y4) * j4;
    y += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    j += (h / 6.0) * (q1 + 2.0 * q2 + 2.0 * q3 + q4);
  }
  return {y, j};
}

Vec FlowDiffeo::forward(const Vec& x) const { return integrate(x, time_); }
Vec FlowDiffeo::inverse(const Vec& y) const { return integrate(y, -time_); }
Mat FlowDiffeo::jacobian(const Vec& x) const { return integrate_with_jacobian(x, time_).second; }
Mat FlowDiffeo::inverse_jacobian(const Vec& y) const {
  return integrate_with_jacobian(y, -time_).second;
}

std::pair<Vec, Mat> FlowDiffeo::forward_with_jacobian(const Vec& x) const {
  return integrate_with_jacobian(x, time_);
}

Mat FlowDiffeo::jacobian_derivative(const Vec& x, const Vec& v) const {
  const double norm = v.norm();
  if (norm == 0.0) return Mat::Zero(x.size(), x.size());
  const double h = 1e-5 / norm;
  return (jacobian(x + h * v) - jacobian(x - h * v)) / (2.0 * h);
}

nlohmann::json FlowDiffeo::to_json() const {
  return {{"type", "flow"}, {"field", field_.description}, {"time", time_}, {"steps", steps_}};
}

std::shared_ptr<const FlowDiffeo> integrate_flow(const VectorField& field, double t, int steps) {
  if (steps < kMinFlowSteps) throw ValidationError("flow integration needs at least 16 steps");
  if (!std::isfinite(field.lipschitz)) throw ValidationError("vector field has no Lipschitz estimate");
  if (!(std::abs(t) * field.lipschitz < 1.0)) {
    throw ValidationError("flow stability guard violated: |t| * Lip(W) >= 1");
  }
  return std::make_shared<FlowDiffeo>(field, t, steps);
}

// ---------------------------------------------------------------------------
// Pushforward and search

namespace {

std::vector<Vec> chart_points(const ConstantRankMap& f, const std::vector<Vec>& points) {
  std::vector<Vec> out;
  out.reserve(points.size());
  for (const Vec& x : points) {
    if (!f.in_domain(x)) throw DomainError("cloud point outside the chart domain of f");
    out.push_back(f.phi()->forward(x));
  }
  return out;
}

}  // namespace

nlohmann::json to_json(const PushforwardEstimate& e) {
  return {{"image", to_json(e.image)},
          {"chart_side", to_json(e.chart_side)},
          {"ambient", to_json(e.ambient)},
          {"tolerance", e.tolerance},
          {"agree", e.agree}};
}

MeasureEstimate chart_side_measure(const ConstantRankMap& f, const Rotation& theta,
                                   const std::vector<Vec>& chart_pts, double delta) {
  // Coordinates in the basis theta^{-1}(B) of theta^{-1}(V).
  const Mat rotated_basis = theta.matrix().transpose() * f.plane().basis();
  std::vector<Vec> coords;
  coords.reserve(chart_pts.size());
  for (const Vec& z : chart_pts) coords.push_back(rotated_basis.transpose() * z);
  if (coords.empty()) return interval_union_length({}, delta);
  return coordinate_measure(coords, delta);
}

PushforwardEstimate pushforward_measure_after(const ConstantRankMap& f, const Rotation& theta,
                                              const WeightedCloud& cloud, double delta) {
  if (!cloud.empty() && cloud.dim() != f.dim()) throw ValidationError("cloud dimension mismatch");
  const DiffeoPtr xi = conjugated_rotation(f.phi(), theta);
  const Mat basis = f.plane().basis();
  std::vector<Vec> image;
  std::vector<Vec> image_coords;
  image.reserve(cloud.size());
  image_coords.reserve(cloud.size());
  for (const Vec& x : cloud.points) {
    if (!f.in_domain(x)) throw DomainError("cloud point outside the chart domain of f");
    const Vec y = f.evaluate(xi->forward(x));
    image.push_back(y);
    image_coords.push_back(basis.transpose() * f.psi_inv()->inverse(y));
  }
  PushforwardEstimate e;
  e.chart_side = chart_side_measure(f, theta, chart_points(f, cloud.points), delta);
  e.image = box_cover_measure(image_coords, f.rank(), delta);
  e.ambient = box_cover_measure(image, f.rank(), delta);
  e.chart_side.warning = e.image.warning = scale_warning(cloud, delta);
  const double cells = static_cast<double>(std::max(e.chart_side.cells, e.image.cells));
  e.tolerance = 2.0 * std::pow(delta, f.rank()) * std::max(1.0, cells) + 1e-12;
  e.agree = std::abs(e.image.value - e.chart_side.value) <= e.tolerance;
  return e;
}

nlohmann::json to_json(const SearchReport& r) {
  nlohmann::json trace = nlohmann::json::array();
  for (const auto& t : r.trace) {
    nlohmann::json row{{"generator", mat_to_json(t.generator)},
                       {"angle", t.angle},
                       {"c1", t.c1},
                       {"feasible", t.feasible},
                       {"excluded", t.excluded}};
    if (!std::isnan(t.measure)) row["measure"] = t.measure;
    trace.push_back(row);
  }
  return {{"best_generator", mat_to_json(r.best.generator())},
          {"best_angle", r.best.angle()},
          {"best_measure", r.best_measure},
          {"best_c1", r.best_c1},
          {"baseline_measure", r.baseline_measure},
          {"ratio", r.baseline_measure > 0.0 ? r.best_measure / r.baseline_measure : 0.0},
          {"feasible", r.feasible},
          {"trials", r.trace.size()},
          {"trace", trace}};
}

SearchReport search_rotation(const ConstantRankMap& f, const WeightedCloud& cloud,
                             const std::vector<Rotation>& candidates, const SearchOptions& options) {
  if (!(options.epsilon > 0.0)) throw ValidationError("epsilon must be positive");
  if (candidates.empty()) throw ValidationError("rotation search needs at least one trial");
  const int n = f.dim();
  std::vector<Vec> grid = options.grid;
  if (grid.empty()) {
    if (!std::isfinite(f.chart_radius())) {
      throw ValidationError("rotation search needs a grid or a finite chart radius");
    }
    grid = chart_grid(*f.phi(), f.chart_radius());
  }
  const std::vector<Vec> chart_pts = chart_points(f, cloud.points);
  const SmoothMap fm = as_smooth_map(f);

  SearchReport report;
  report.baseline_measure = chart_side_measure(f, Rotation::identity(n), chart_pts, options.delta).value;
  report.trace.resize(candidates.size());
  parallel_for(candidates.size(), [&](std::size_t k) {
    const Rotation& theta = candidates[k];
    SearchTrial& trial = report.trace[k];
    trial.generator = theta.generator();
    trial.angle = theta.angle();
    if (theta.is_identity()) {
      trial.excluded = true;
      return;
    }
    const SmoothMap perturbed = compose(fm, as_smooth_map(conjugated_rotation(f.phi(), theta)));
    trial.c1 = c1_distance(perturbed, fm, grid);
    trial.feasible = trial.c1 <= options.epsilon;
    if (trial.feasible) trial.measure = chart_side_measure(f, theta, chart_pts, options.delta).value;
  });

  std::optional<std::size_t> best;
  for (std::size_t k = 0; k < report.trace.size(); ++k) {
    const auto& t = report.trace[k];
    if (!t.feasible) continue;
    ++report.feasible;
    if (!best || t.measure < report.trace[*best].measure ||
        (t.measure == report.trace[*best].measure && t.angle < report.trace[*best].angle)) {
      best = k;
    }
  }
  if (!best) {
    throw InfeasibleError("no feasible rotation: all " + std::to_string(candidates.size()) +
                          " trials violate the C1 budget or are the identity");
  }
  report.best = candidates[*best];
  report.best_measure = report.trace[*best].measure;
  report.best_c1 = report.trace[*best].c1;
  return report;
}

SearchReport search_rotation(const ConstantRankMap& f, const WeightedCloud& cloud,
                             const SearchOptions& options) {
  if (!(options.rho > 0.0)) throw ValidationError("rho must be positive");
  if (options.trials < 1) throw ValidationError("rotation search needs at least one trial");
  std::mt19937_64 rng(options.seed);
  std::vector<Rotation> candidates;
  candidates.reserve(static_cast<std::size_t>(options.trials));
  for (int k = 0; k < options.trials; ++k) {
    candidates.push_back(Rotation::from_generator(random_generator(rng, f.dim(), options.rho)));
  }
  return search_rotation(f, cloud, candidates, options);
}

// ---------------------------------------------------------------------------
// Key lemma

nlohmann::json to_json(const KeyLemmaReport& r) {
  return {{"t_star", r.t_star},
          {"realised_generator", mat_to_json(r.realised.generator())},
          {"realised_angle", r.realised.angle()},
          {"lipschitz", r.lipschitz},
          {"mu", r.mu},
          {"eta", r.eta},
          {"property_i", {{"holds", r.property_i}, {"max_error", r.property_i_error},
                          {"max_reach", r.property_i_reach}, {"limit", r.mu / 2.0}}},
          {"property_ii", {{"holds", r.property_ii}, {"points", r.property_ii_points},
                           {"moved", r.property_ii_moved}}},
          {"property_iii", {{"holds", r.property_iii}, {"c1_norm", r.c1_norm},
                            {"value_part", r.c1_value}, {"jacobian_part", r.c1_jacobian},
                            {"margin", r.eta - r.c1_norm}}},
          {"verification_points", r.verification_points},
          {"evaluations", r.evaluations}};
}

std::vector<Vec> lemma_verification_points(const CutoffProfile& profile, int grid_per_axis) {
  const Region& region = profile.center();
  const int n = region.dim();
  const double mu = profile.width();
  const double support = profile.support_radius();
  const Box box = region.bounds().expanded(support + mu / 8.0);
  std::vector<Vec> out;

  auto scan = [&](int per_axis, double d_min) {
    std::size_t total = 1;
    for (int d = 0; d < n; ++d) total *= static_cast<std::size_t>(per_axis);
    for (std::size_t k = 0; k < total; ++k) {
      std::size_t rem = k;
      Vec y(n);
      for (int d = 0; d < n; ++d) {
        const double t = static_cast<double>(rem % static_cast<std::size_t>(per_axis)) / (per_axis - 1);
        y(d) = box.lo(d) + t * (box.hi(d) - box.lo(d));
        rem /= static_cast<std::size_t>(per_axis);
      }
      const double dist = region.distance(y);
      if (dist >= d_min && dist < support + mu / 8.0) out.push_back(y);
    }
  };
  scan(grid_per_axis, 0.0);
  // Band where the cutoff varies, at spacing ~mu/8 (capped per axis).
  const double extent = (box.hi - box.lo).maxCoeff();
  const int cap = n == 2 ? 256 : 48;
  const int band_axis = std::clamp(static_cast<int>(std::ceil(8.0 * extent / mu)) + 1, 2, cap);
  scan(band_axis, mu / 8.0);

  std::vector<Vec> centers = region.samples();
  const std::size_t keep = std::min<std::size_t>(centers.size(), 512);
  for (std::size_t k = 0; k < keep; ++k) {
    out.push_back(centers[k * centers.size() / keep]);
  }
  return out;
}

namespace {

struct PointCheck {
  double value = 0.0;
  double jac = 0.0;
  double err_i = 0.0;
  double reach = 0.0;
  bool outside = false;
  bool moved = false;
};

}  // namespace

KeyLemmaResult key_lemma_diffeo(const DiffeoPtr& phi, const Rotation& theta, const RegionPtr& region,
                                double mu, double eta, const KeyLemmaOptions& options) {
  if (!phi || !region) throw ValidationError("key lemma needs a chart and a region");
  if (!(mu > 0.0)) throw ValidationError("mu must be positive");
  if (!(eta > 0.0)) throw ValidationError("eta must be positive");
  if (theta.is_identity()) throw ValidationError("key lemma needs theta != id");
  if (theta.dim() != phi->dim() || region->dim() != phi->dim()) {
    throw ValidationError("key lemma dimension mismatch");
  }

  if (std::isfinite(options.chart_radius)) {
    const int n = phi->dim();
    const auto boundary = chart_boundary_samples(*phi, options.chart_radius, n == 2 ? 4096 : 8000);
    const PointIndex index(boundary);
    const double need = mu * (1.0 - options.hypothesis_tolerance);
    for (const Vec& o : region->samples()) {
      if (!(phi->forward(o).norm() < options.chart_radius) || index.nearest(o).distance < need) {
        throw ValidationError("key lemma hypothesis violated: O must lie in U minus B_mu(dU)");
      }
    }
  }

  const CutoffProfile profile(region, mu);
  const VectorField v = generator_field(phi, theta.generator(), std::isfinite(options.chart_radius)
                                                                     ? options.chart_radius
                                                                     : 1.0);
  VectorField w = cutoff_field(v, profile);
  const std::vector<Vec> points = lemma_verification_points(profile, options.grid_per_axis);
  w.lipschitz = std::max(w.lipschitz, estimate_lipschitz(w, points));

  std::vector<double> dist(points.size());
  for (std::size_t k = 0; k < points.size(); ++k) dist[k] = region->distance(points[k]);
  const double inner = profile.width() / 4.0;
  const double support = profile.support_radius();

  KeyLemmaReport report;
  report.mu = mu;
  report.eta = eta;
  report.lipschitz = w.lipschitz;
  report.verification_points = points.size();

  auto evaluate = [&](double t, KeyLemmaReport& r) {
    const FlowDiffeo zeta(w, t, options.steps);
    const DiffeoPtr xi = conjugated_rotation(phi, theta.at(t));
    std::vector<PointCheck> checks(points.size());
    parallel_for(points.size(), [&](std::size_t k) {
      const Vec& y = points[k];
      PointCheck& c = checks[k];
      if (dist[k] >= support) {
        c.outside = true;
        const Vec z = zeta.forward(y);
        c.moved = !(z.array() == y.array()).all();
        return;
      }
      const auto [z, j] = zeta.forward_with_jacobian(y);
      c.value = (z - y).norm();
      c.jac = operator_norm(j - Mat::Identity(y.size(), y.size()));
      if (dist[k] < inner) {
        c.err_i = (z - xi->forward(y)).norm();
        c.reach = region->distance(z);
      }
    });
    r.property_i_error = r.property_i_reach = r.c1_value = r.c1_jacobian = 0.0;
    r.property_ii_points = r.property_ii_moved = 0;
    for (const auto& c : checks) {
      r.c1_value = std::max(r.c1_value, c.value);
      r.c1_jacobian = std::max(r.c1_jacobian, c.jac);
      r.property_i_error = std::max(r.property_i_error, c.err_i);
      r.property_i_reach = std::max(r.property_i_reach, c.reach);
      if (c.outside) ++r.property_ii_points;
      if (c.moved) ++r.property_ii_moved;
    }
    r.c1_norm = r.c1_value + r.c1_jacobian;
    r.property_i = r.property_i_error < 1e-7 && r.property_i_reach < mu / 2.0;
    r.property_ii = r.property_ii_moved == 0;
    r.property_iii = r.c1_norm <= eta;
    r.t_star = t;
    ++report.evaluations;
    return r.property_i && r.property_ii && r.property_iii;
  };

  const double t_max = std::min(1.0, 0.999 / w.lipschitz);
  double lo = 0.0;
  double hi = t_max;
  double t = t_max;
  std::optional<KeyLemmaReport> best;
  for (int iter = 0; iter < 60; ++iter) {
    KeyLemmaReport trial = report;
    const bool ok = evaluate(t, trial);
    if (ok) {
      lo = t;
      best = trial;
      if (t >= t_max) break;
    } else {
      hi = t;
    }
    if (best && hi - lo <= options.time_resolution * lo) break;
    if (ok && trial.c1_norm >= (1.0 - options.time_resolution) * eta) break;
    if (!best && hi < options.min_time) break;
    // The C1 norm grows roughly linearly in t: aim just below eta.
    double next = trial.c1_norm > 0.0 ? t * 0.995 * eta / trial.c1_norm : 0.5 * (lo + hi);
    if (!ok && (!trial.property_i || !trial.property_ii)) next = 0.5 * (lo + hi);
    if (!(next > lo && next < hi) || (ok && next < lo * (1.0 + options.time_resolution))) {
      next = 0.5 * (lo + hi);
    }
    t = next;
  }
  if (!best || best->t_star < options.min_time) {
    throw InfeasibleError("key lemma: no admissible flow time above " +
                          std::to_string(options.min_time));
  }
  KeyLemmaResult result;
  result.report = *best;
  result.report.evaluations = report.evaluations;
  result.report.realised = theta.at(result.report.t_star);
  result.zeta = std::make_shared<FlowDiffeo>(w, result.report.t_star, options.steps);
  return result;
}

}  // namespace unrect
