#pragma once

#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "unrect/geometry.hpp"

namespace unrect {

/// Invertible smooth map of R^n with closed-form inverse and derivatives.
class Diffeo {
 public:
  virtual ~Diffeo() = default;

  virtual int dim() const = 0;
  virtual Vec forward(const Vec& x) const = 0;
  virtual Vec inverse(const Vec& y) const = 0;
  virtual Mat jacobian(const Vec& x) const = 0;
  /// Directional derivative of the Jacobian: d/ds J(x + s v) at s = 0.
  virtual Mat jacobian_derivative(const Vec& x, const Vec& v) const = 0;
  /// Jacobian of the inverse map at y.
  virtual Mat inverse_jacobian(const Vec& y) const;
  virtual nlohmann::json to_json() const = 0;
};

using DiffeoPtr = std::shared_ptr<const Diffeo>;

// Catalog.
DiffeoPtr identity_diffeo(int n);
DiffeoPtr affine_diffeo(Mat matrix, Vec offset);
DiffeoPtr translation_diffeo(Vec offset);
/// Adds amplitude * s(x[source]) to x[target], s(u) = sum_k coefficients[k] u^k.
/// Requires |amplitude| * sup_{|u| <= bound} |s'(u)| < 1.
DiffeoPtr shear_diffeo(int n, int source_axis, int target_axis, double amplitude,
                       std::vector<double> coefficients, double bound);
/// x -> c + (x - c)(1 + amplitude * (1 - |x-c|^2/R^2)^3) inside B(c, R), identity outside.
/// Radially monotone for amplitude in (-1, 49/32).
DiffeoPtr radial_bump_diffeo(Vec center, double radius, double amplitude);
/// maps[0] is applied first.
DiffeoPtr compose_diffeos(std::vector<DiffeoPtr> maps);
DiffeoPtr inverse_diffeo(DiffeoPtr map);

DiffeoPtr diffeo_from_json(const nlohmann::json& j);

struct SingularValueReport {
  std::vector<double> singular_values;  // descending
  int rank = 0;
  /// sigma_m / sigma_{m+1} (infinite when sigma_{m+1} == 0).
  double gap = 0.0;
};

inline constexpr double kRankThreshold = 1e-8;

SingularValueReport singular_value_report(const Mat& jacobian, int m);

/// f = psi_inv o P_V o phi on U = phi^{-1}(B(0, chart_radius)).
class ConstantRankMap {
 public:
  ConstantRankMap(DiffeoPtr phi, Plane plane, DiffeoPtr psi_inv,
                  double chart_radius = std::numeric_limits<double>::infinity());

  /// Orthogonal projection onto `plane` (phi = psi = id).
  static ConstantRankMap projection(const Plane& plane);

  int dim() const { return plane_.ambient_dim(); }
  int rank() const { return plane_.dim(); }
  const DiffeoPtr& phi() const { return phi_; }
  const Plane& plane() const { return plane_; }
  const DiffeoPtr& psi_inv() const { return psi_inv_; }
  double chart_radius() const { return chart_radius_; }

  bool in_domain(const Vec& x) const;
  Vec evaluate(const Vec& x) const;
  Mat jacobian(const Vec& x) const;

  /// Same map with the codomain scaled by `factor` (psi_inv replaced by
  /// factor * psi_inv).
  ConstantRankMap rescaled(double factor) const;
  ConstantRankMap with_chart_radius(double r) const;
  /// The same map written in the chart phi - c (so Xi_theta rotates about
  /// phi^{-1}(c)): psi_inv absorbs the constant P_V c.
  ConstantRankMap recentred(const Vec& chart_center, double chart_radius) const;

  nlohmann::json to_json() const;
  static ConstantRankMap from_json(const nlohmann::json& j);

 private:
  DiffeoPtr phi_;
  Plane plane_;
  DiffeoPtr psi_inv_;
  double chart_radius_;
};

/// Value plus Jacobian; the common currency for sampled C^1 norms.
struct SmoothMap {
  std::function<Vec(const Vec&)> value;
  std::function<Mat(const Vec&)> jacobian;
};

SmoothMap as_smooth_map(const ConstantRankMap& f);
SmoothMap as_smooth_map(const DiffeoPtr& map);
SmoothMap identity_smooth_map();
/// outer o inner.
SmoothMap compose(SmoothMap outer, SmoothMap inner);

struct C1Distance {
  double value_part = 0.0;     // max |f - g|
  double jacobian_part = 0.0;  // max ||Df - Dg||_op
  double total() const { return value_part + jacobian_part; }
};

/// Sampled C^1 distance: sup over the grid of |f - g| plus sup of the operator
/// norm of the Jacobian difference.
C1Distance c1_distance_parts(const SmoothMap& f, const SmoothMap& g, std::span<const Vec> grid);
double c1_distance(const SmoothMap& f, const SmoothMap& g, std::span<const Vec> grid);

/// Points of the per-axis grid over the bounding box of phi^{-1}(B(0, r))
/// that lie in the chart domain.
std::vector<Vec> chart_grid(const Diffeo& phi, double chart_radius, int per_axis = 64);
/// Samples of the chart boundary phi^{-1}(S(0, r)).
std::vector<Vec> chart_boundary_samples(const Diffeo& phi, double chart_radius, int count = 720);

}  // namespace unrect
