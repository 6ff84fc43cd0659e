#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "unrect/errors.hpp"

namespace unrect {

// Points and matrices live on the stack: the ambient dimension is 2 or 3.
using Vec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, 3, 1>;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, 3, 3>;

void check_dimension(int n);
Vec make_vec(std::initializer_list<double> coords);

// Largest singular value.
double operator_norm(const Mat& a);

struct Box {
  Vec lo;
  Vec hi;

  int dim() const { return static_cast<int>(lo.size()); }
  bool contains(const Vec& p) const;
  Box expanded(double r) const;
  Vec center() const { return 0.5 * (lo + hi); }
  double diameter() const { return (hi - lo).norm(); }
};

Box bounding_box(const std::vector<Vec>& points);

/// Element of SO(n) stored as its skew-symmetric generator X together with
/// exp(X). The path t -> exp(tX) is the geodesic from the identity.
class Rotation {
 public:
  static Rotation identity(int n);
  /// exp(t * generator). Throws ValidationError unless generator is skew.
  static Rotation from_generator(const Mat& generator, double t = 1.0);
  /// Planar rotation by `angle` radians.
  static Rotation planar(double angle);

  int dim() const { return static_cast<int>(matrix_.rows()); }
  const Mat& generator() const { return generator_; }
  const Mat& matrix() const { return matrix_; }

  Vec apply(const Vec& p) const { return matrix_ * p; }
  Rotation inverse() const;
  /// Point theta_t on the geodesic, i.e. exp(t X).
  Rotation at(double t) const;

  /// Rotation angle, |X|_F / sqrt(2).
  double angle() const;
  /// Operator norm of exp(X) - I; the metric used for B_SO(id, rho).
  double distance_to_identity() const;
  bool is_identity() const { return generator_.isZero(0.0); }

 private:
  Rotation(Mat generator, Mat matrix)
      : generator_(std::move(generator)), matrix_(std::move(matrix)) {}

  Mat generator_;
  Mat matrix_;
};

Mat matrix_exponential_skew(const Mat& x);

/// Generator with uniformly distributed direction on the unit sphere of so(n)
/// and angle uniform in (0, max_angle).
Mat random_generator(std::mt19937_64& rng, int n, double max_angle);

/// An m-dimensional linear subspace given by an orthonormal basis (columns).
class Plane {
 public:
  /// Orthonormalises the columns of `spanning` (must have full column rank).
  static Plane from_vectors(const Mat& spanning);
  /// Line through the origin in R^2 with direction (cos angle, sin angle).
  static Plane line(double angle);
  /// Span of the first m coordinate axes of R^n.
  static Plane coordinate(int n, int m);

  int ambient_dim() const { return static_cast<int>(basis_.rows()); }
  int dim() const { return static_cast<int>(basis_.cols()); }
  const Mat& basis() const { return basis_; }

  Mat projector() const { return basis_ * basis_.transpose(); }
  Vec project(const Vec& p) const { return basis_ * (basis_.transpose() * p); }
  /// Coordinates of P_V(p) in the basis of V.
  Vec coordinates(const Vec& p) const { return basis_.transpose() * p; }
  /// The image plane rotation(V).
  Plane transformed(const Rotation& rotation) const;

 private:
  explicit Plane(Mat basis) : basis_(std::move(basis)) {}
  Mat basis_;
};

/// Normalisation constant I_n of the standard mollifier (integral of
/// exp(-1/(1-|x|^2)) over the unit ball). Computed once per dimension.
double mollifier_normalisation(int n);
double mollifier_value(const Vec& x, double eps);

/// Uniform bucket grid for nearest-neighbour queries in R^2 / R^3.
class PointIndex {
 public:
  struct Hit {
    std::size_t index = 0;
    double distance = 0.0;
  };

  PointIndex() = default;
  explicit PointIndex(std::vector<Vec> points, double cell_size = 0.0);

  bool empty() const { return points_.empty(); }
  std::size_t size() const { return points_.size(); }
  const std::vector<Vec>& points() const { return points_; }
  double cell_size() const { return cell_; }

  /// Nearest stored point. Throws std::logic_error on an empty index.
  Hit nearest(const Vec& q) const;

 private:
  std::ptrdiff_t flat(const Eigen::Vector3i& c) const;

  std::vector<Vec> points_;
  int dim_ = 0;
  double cell_ = 1.0;
  Vec origin_;
  Eigen::Vector3i extent_ = Eigen::Vector3i::Ones();
  std::vector<std::size_t> start_;  // CSR layout: cell -> [start, start+1)
  std::vector<std::size_t> order_;
};

/// Set O with distance queries d(y, O). The r-neighbourhood B_r(O) is
/// {y : d(y, O) < r}.
class Region {
 public:
  virtual ~Region() = default;
  virtual int dim() const = 0;
  virtual double distance(const Vec& y) const = 0;
  /// Gradient of d(., O); zero inside O.
  virtual Vec distance_gradient(const Vec& y) const = 0;
  /// d(y, O) >= r; implementations may answer from a cheap lower bound.
  virtual bool farther_than(const Vec& y, double r) const { return distance(y) >= r; }
  virtual double distance_with_gradient(const Vec& y, Vec& gradient) const {
    gradient = distance_gradient(y);
    return distance(y);
  }
  virtual Box bounds() const = 0;
  /// Finite sample of points of O.
  virtual std::vector<Vec> samples() const = 0;
};

using RegionPtr = std::shared_ptr<const Region>;

class BallRegion final : public Region {
 public:
  BallRegion(Vec center, double radius);

  int dim() const override { return static_cast<int>(center_.size()); }
  double distance(const Vec& y) const override;
  Vec distance_gradient(const Vec& y) const override;
  Box bounds() const override;
  std::vector<Vec> samples() const override;

  const Vec& center() const { return center_; }
  double radius() const { return radius_; }

 private:
  Vec center_;
  double radius_;
};

/// Region known only through a finite sample; distances are to the nearest
/// sample point.
class SampledRegion final : public Region {
 public:
  explicit SampledRegion(std::vector<Vec> points);

  int dim() const override { return dim_; }
  double distance(const Vec& y) const override;
  Vec distance_gradient(const Vec& y) const override;
  Box bounds() const override { return bounds_; }
  std::vector<Vec> samples() const override { return index_.points(); }

 private:
  int dim_;
  PointIndex index_;
  Box bounds_;
};

/// C-infinity transition: 1 for u <= 0, 0 for u >= 1, monotone in between.
double cutoff_transition(double u);
double cutoff_transition_derivative(double u);

/// Cutoff around a region O with width mu: identically 1 on B_{mu/2}(O),
/// identically 0 outside B_{3mu/4}(O).
class CutoffProfile {
 public:
  CutoffProfile(RegionPtr center, double width);

  const Region& center() const { return *center_; }
  const RegionPtr& center_ptr() const { return center_; }
  double width() const { return width_; }
  double inner_radius() const { return 0.625 * width_; }
  double mollification_radius() const { return 0.125 * width_; }
  double plateau_radius() const { return 0.5 * width_; }
  double support_radius() const { return 0.75 * width_; }

 private:
  RegionPtr center_;
  double width_;
};

/// Closed-form radial transition of d(y, O) with the same support properties
/// as the mollified indicator of B_{5mu/8}(O).
double smooth_cutoff(const CutoffProfile& profile, const Vec& y);
Vec smooth_cutoff_gradient(const CutoffProfile& profile, const Vec& y);

/// Literal convolution (mollifier_{mu/8} * 1_{B_{5mu/8}(O)})(y) by tensor
/// quadrature with `nodes` points per axis. Slow; for cross-checks only.
double reference_cutoff(const CutoffProfile& profile, const Vec& y, int nodes = 40);

}  // namespace unrect
