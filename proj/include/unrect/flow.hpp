#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "unrect/constant_rank.hpp"
#include "unrect/geometry.hpp"
#include "unrect/measure.hpp"
#include "unrect/test_sets.hpp"

namespace unrect {

/// Xi_theta = phi^{-1} o theta o phi. When chart_radius is finite, checks on
/// boundary samples that theta keeps phi(U) = B(0, chart_radius) inside itself.
DiffeoPtr conjugated_rotation(const DiffeoPtr& phi, const Rotation& theta,
                              double chart_radius = std::numeric_limits<double>::infinity());

struct VectorField {
  int dim = 0;
  std::function<Vec(const Vec&)> value;
  std::function<Mat(const Vec&)> jacobian;
  /// False only where the field vanishes identically; empty means everywhere active.
  std::function<bool(const Vec&)> active;
  /// Sampled bound on ||DW||; infinite when unknown.
  double lipschitz = std::numeric_limits<double>::infinity();
  std::string description;

  bool is_active(const Vec& y) const { return !active || active(y); }
};

double estimate_lipschitz(const VectorField& field, const std::vector<Vec>& samples);

/// V(y) = D phi(y)^{-1} X phi(y), the velocity of t -> Xi_{exp(tX)}(y) at t = 0.
/// The Lipschitz estimate is taken on chart_grid(phi, chart_radius, 16).
VectorField generator_field(const DiffeoPtr& phi, const Mat& generator, double chart_radius = 1.0);

/// W = c V with c the smooth cutoff of `profile`; supported in B_{3mu/4}(O).
VectorField cutoff_field(const VectorField& field, const CutoffProfile& profile);

/// Points spread over B_{3mu/4}(O): the region samples plus shells at
/// distances 0..3mu/4 in `directions` directions.
std::vector<Vec> support_samples(const CutoffProfile& profile, int directions = 16,
                                 std::size_t max_centers = 256);

inline constexpr int kMinFlowSteps = 16;
inline constexpr int kDefaultFlowSteps = 64;

/// Time-t map of the field by classical RK4. The inverse integrates to -t,
/// the Jacobian comes from the variational equation, and points where the
/// field is inactive are returned unchanged.
class FlowDiffeo final : public Diffeo {
 public:
  FlowDiffeo(VectorField field, double time, int steps);

  int dim() const override { return field_.dim; }
  Vec forward(const Vec& x) const override;
  Vec inverse(const Vec& y) const override;
  Mat jacobian(const Vec& x) const override;
  /// Central difference of the variational Jacobian.
  Mat jacobian_derivative(const Vec& x, const Vec& v) const override;
  Mat inverse_jacobian(const Vec& y) const override;
  nlohmann::json to_json() const override;

  /// Point and Jacobian in one integration.
  std::pair<Vec, Mat> forward_with_jacobian(const Vec& x) const;

  double time() const { return time_; }
  int steps() const { return steps_; }
  const VectorField& field() const { return field_; }

 private:
  Vec integrate(const Vec& x, double t) const;
  std::pair<Vec, Mat> integrate_with_jacobian(const Vec& x, double t) const;

  VectorField field_;
  double time_;
  int steps_;
};

/// Throws ValidationError unless steps >= 16 and |t| * Lip(W) < 1.
std::shared_ptr<const FlowDiffeo> integrate_flow(const VectorField& field, double t,
                                                 int steps = kDefaultFlowSteps);

// ---------------------------------------------------------------------------
// Pushforward measure and rotation search

struct PushforwardEstimate {
  /// Grid cover of the V-coordinates of psi(f(Xi_theta(x))).
  MeasureEstimate image;
  /// Measure of the coordinates of P_{theta^{-1} V}(phi(x)) in the rotated basis.
  MeasureEstimate chart_side;
  /// Grid cover of f(Xi_theta(x)) in the ambient R^n.
  MeasureEstimate ambient;
  double tolerance = 0.0;
  bool agree = false;
};

nlohmann::json to_json(const PushforwardEstimate& e);

/// Throws DomainError if a cloud point leaves the chart domain of f.
PushforwardEstimate pushforward_measure_after(const ConstantRankMap& f, const Rotation& theta,
                                              const WeightedCloud& cloud, double delta);

/// Chart-side measure only (the quantity minimised by the search).
MeasureEstimate chart_side_measure(const ConstantRankMap& f, const Rotation& theta,
                                   const std::vector<Vec>& chart_points, double delta);

struct SearchTrial {
  Mat generator;
  double angle = 0.0;
  double c1 = 0.0;
  bool feasible = false;
  bool excluded = false;  // theta = id
  double measure = std::numeric_limits<double>::quiet_NaN();
};

struct SearchReport {
  Rotation best = Rotation::identity(2);
  double best_measure = 0.0;
  double best_c1 = 0.0;
  double baseline_measure = 0.0;  // theta = id
  std::size_t feasible = 0;
  std::vector<SearchTrial> trace;
};

nlohmann::json to_json(const SearchReport& r);

struct SearchOptions {
  double epsilon = 0.1;
  double rho = 0.3;
  int trials = 256;
  double delta = 1.0 / 4096.0;
  std::uint64_t seed = 1;
  /// Grid for the C1 constraint; empty means chart_grid(phi, chart radius, 64).
  std::vector<Vec> grid;
};

/// Random rotations with angle uniform in (0, rho); keeps those with
/// c1_distance(f o Xi_theta, f) <= epsilon and returns the one with smallest
/// chart-side measure (ties: smaller angle). Throws InfeasibleError when no
/// trial is feasible.
SearchReport search_rotation(const ConstantRankMap& f, const WeightedCloud& cloud,
                             const SearchOptions& options);

/// Same with an explicit candidate list; identity candidates are excluded.
SearchReport search_rotation(const ConstantRankMap& f, const WeightedCloud& cloud,
                             const std::vector<Rotation>& candidates, const SearchOptions& options);

// ---------------------------------------------------------------------------
// Key lemma

struct KeyLemmaOptions {
  int steps = kDefaultFlowSteps;
  /// Standard verification grid per axis over the support box.
  int grid_per_axis = 64;
  /// Chart radius of U = phi^{-1}(B(0, r)) for the hypothesis check; infinite skips it.
  double chart_radius = std::numeric_limits<double>::infinity();
  /// Relative slack on the hypothesis distance d(O, dU) >= mu.
  double hypothesis_tolerance = 0.0;
  double min_time = 1e-6;
  /// Bisection stops when the bracket is below this fraction of t*.
  double time_resolution = 0.01;
};

struct KeyLemmaReport {
  double t_star = 0.0;
  Rotation realised = Rotation::identity(2);
  double lipschitz = 0.0;
  /// max |zeta - Xi_{theta_t*}| on B_{mu/4}(O).
  double property_i_error = 0.0;
  /// max d(zeta(y), O) over y in B_{mu/4}(O), to compare with mu/2.
  double property_i_reach = 0.0;
  /// Points outside B_{3mu/4}(O) checked, and how many moved (must be 0).
  std::size_t property_ii_points = 0;
  std::size_t property_ii_moved = 0;
  double c1_value = 0.0;
  double c1_jacobian = 0.0;
  double c1_norm = 0.0;
  double eta = 0.0;
  double mu = 0.0;
  std::size_t verification_points = 0;
  int evaluations = 0;
  bool property_i = false;
  bool property_ii = false;
  bool property_iii = false;
};

nlohmann::json to_json(const KeyLemmaReport& r);

struct KeyLemmaResult {
  std::shared_ptr<const FlowDiffeo> zeta;
  KeyLemmaReport report;
};

/// Builds W_theta = c V_theta around O and bisects for the largest t* <= 1 at
/// which (i)-(iii) hold on the verification set. Throws ValidationError when
/// the hypothesis fails and InfeasibleError when no t* >= min_time is found.
KeyLemmaResult key_lemma_diffeo(const DiffeoPtr& phi, const Rotation& theta, const RegionPtr& region,
                                double mu, double eta, const KeyLemmaOptions& options = {});

/// Verification set used by key_lemma_diffeo.
std::vector<Vec> lemma_verification_points(const CutoffProfile& profile, int grid_per_axis);

}  // namespace unrect
