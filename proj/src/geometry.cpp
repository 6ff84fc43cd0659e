#include "unrect/geometry.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <mutex>
#include <numbers>
#include <string>

#include <boost/math/quadrature/gauss_kronrod.hpp>

namespace unrect {

void check_dimension(int n) {
  if (n != 2 && n != 3) {
    throw ValidationError("ambient dimension must be 2 or 3, got " + std::to_string(n));
  }
}

Vec make_vec(std::initializer_list<double> coords) {
  Vec v(static_cast<Eigen::Index>(coords.size()));
  Eigen::Index i = 0;
  for (double c : coords) v(i++) = c;
  return v;
}

double operator_norm(const Mat& a) {
  if (a.size() == 0) return 0.0;
  // Symmetric eigenproblem on A^T A is exact enough for 3x3 and much faster
  // than a full SVD in the inner loops.
  const Mat ata = a.transpose() * a;
  Eigen::SelfAdjointEigenSolver<Mat> es(ata, Eigen::EigenvaluesOnly);
  return std::sqrt(std::max(0.0, es.eigenvalues().maxCoeff()));
}

bool Box::contains(const Vec& p) const {
  return (p.array() >= lo.array()).all() && (p.array() <= hi.array()).all();
}

Box Box::expanded(double r) const {
  return Box{lo.array() - r, hi.array() + r};
}

Box bounding_box(const std::vector<Vec>& points) {
  if (points.empty()) throw ValidationError("bounding box of an empty point set");
  Box b{points.front(), points.front()};
  for (const Vec& p : points) {
    b.lo = b.lo.cwiseMin(p);
    b.hi = b.hi.cwiseMax(p);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Rotations

Mat matrix_exponential_skew(const Mat& x) {
  const int n = static_cast<int>(x.rows());
  check_dimension(n);
  if (n == 2) {
    const double a = x(1, 0);
    Mat r(2, 2);
    r << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
    return r;
  }
  const Eigen::Vector3d w(x(2, 1), x(0, 2), x(1, 0));
  const double theta = w.norm();
  const Mat k = x;
  double a;  // sin(theta)/theta
  double b;  // (1-cos(theta))/theta^2
  if (theta < 1e-4) {
    const double t2 = theta * theta;
    a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
    b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
  } else {
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / (theta * theta);
  }
  return Mat::Identity(3, 3) + a * k + b * (k * k);
}

Rotation Rotation::identity(int n) {
  check_dimension(n);
  return Rotation(Mat::Zero(n, n), Mat::Identity(n, n));
}

Rotation Rotation::from_generator(const Mat& generator, double t) {
  const int n = static_cast<int>(generator.rows());
  check_dimension(n);
  if (generator.cols() != n) throw ValidationError("generator must be square");
  if (!std::isfinite(t) || !generator.allFinite()) {
    throw ValidationError("rotation generator and time must be finite");
  }
  const double scale = std::max(1.0, generator.cwiseAbs().maxCoeff());
  if ((generator + generator.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
    throw ValidationError("rotation generator is not skew-symmetric");
  }
  // Store the exactly antisymmetric part so the cached exponential is exact.
  Mat x = 0.5 * t * (generator - generator.transpose());
  Mat r = matrix_exponential_skew(x);
  return Rotation(std::move(x), std::move(r));
}

Rotation Rotation::planar(double angle) {
  Mat x(2, 2);
  x << 0.0, -angle, angle, 0.0;
  return from_generator(x);
}

Rotation Rotation::inverse() const {
  return Rotation(-generator_, matrix_.transpose());
}

Rotation Rotation::at(double t) const { return from_generator(generator_, t); }

double Rotation::angle() const { return generator_.norm() / std::numbers::sqrt2; }

double Rotation::distance_to_identity() const {
  return operator_norm(matrix_ - Mat::Identity(dim(), dim()));
}

Mat random_generator(std::mt19937_64& rng, int n, double max_angle) {
  check_dimension(n);
  if (!(max_angle > 0.0)) throw ValidationError("max_angle must be positive");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double magnitude = 0.0;
  while (magnitude <= 0.0) magnitude = max_angle * unit(rng);
  Mat x = Mat::Zero(n, n);
  if (n == 2) {
    const double sign = unit(rng) < 0.5 ? -1.0 : 1.0;
    x(1, 0) = sign * magnitude;
    x(0, 1) = -x(1, 0);
    return x;
  }
  std::normal_distribution<double> gauss;
  Eigen::Vector3d w;
  do {
    w = Eigen::Vector3d(gauss(rng), gauss(rng), gauss(rng));
  } while (w.norm() < 1e-12);
  w *= magnitude / w.norm();
  x << 0.0, -w.z(), w.y(), w.z(), 0.0, -w.x(), -w.y(), w.x(), 0.0;
  return x;
}

// ---------------------------------------------------------------------------
// Planes

Plane Plane::from_vectors(const Mat& spanning) {
  const int n = static_cast<int>(spanning.rows());
  check_dimension(n);
  const int m = static_cast<int>(spanning.cols());
  if (m < 1 || m >= n) throw ValidationError("plane dimension must satisfy 1 <= m < n");
  Eigen::HouseholderQR<Mat> qr(spanning);
  const Mat r = qr.matrixQR().topRows(m).triangularView<Eigen::Upper>();
  for (int i = 0; i < m; ++i) {
    if (std::abs(r(i, i)) < 1e-12 * std::max(1.0, spanning.norm())) {
      throw ValidationError("plane spanning vectors are linearly dependent");
    }
  }
  Mat q = qr.householderQ() * Mat::Identity(n, m);
  return Plane(std::move(q));
}

Plane Plane::line(double angle) {
  Mat b(2, 1);
  b << std::cos(angle), std::sin(angle);
  return Plane(std::move(b));
}

Plane Plane::coordinate(int n, int m) {
  check_dimension(n);
  if (m < 1 || m >= n) throw ValidationError("plane dimension must satisfy 1 <= m < n");
  return Plane(Mat::Identity(n, m));
}

Plane Plane::transformed(const Rotation& rotation) const {
  if (rotation.dim() != ambient_dim()) throw ValidationError("rotation/plane dimension mismatch");
  return Plane(rotation.matrix() * basis_);
}

// ---------------------------------------------------------------------------
// Mollifier

namespace {

double bump_profile(double r2) {
  if (r2 >= 1.0) return 0.0;
  return std::exp(-1.0 / (1.0 - r2));
}

double compute_normalisation(int n) {
  using boost::math::quadrature::gauss_kronrod;
  auto radial = [n](double r) {
    return std::pow(r, n - 1) * bump_profile(r * r);
  };
  const double integral = gauss_kronrod<double, 61>::integrate(radial, 0.0, 1.0, 15, 1e-14);
  // Surface area of the unit sphere S^{n-1}.
  const double area = n == 2 ? 2.0 * std::numbers::pi : 4.0 * std::numbers::pi;
  return area * integral;
}

}  // namespace

double mollifier_normalisation(int n) {
  check_dimension(n);
  static std::once_flag once;
  static std::array<double, 2> cache{};
  std::call_once(once, [] {
    cache[0] = compute_normalisation(2);
    cache[1] = compute_normalisation(3);
  });
  return cache[static_cast<std::size_t>(n - 2)];
}

double mollifier_value(const Vec& x, double eps) {
  if (!(eps > 0.0)) throw ValidationError("mollifier radius must be positive");
  const int n = static_cast<int>(x.size());
  const double r2 = x.squaredNorm() / (eps * eps);
  if (r2 >= 1.0) return 0.0;
  return std::pow(eps, -n) * bump_profile(r2) / mollifier_normalisation(n);
}

// ---------------------------------------------------------------------------
// Nearest-neighbour buckets

PointIndex::PointIndex(std::vector<Vec> points, double cell_size)
    : points_(std::move(points)) {
  if (points_.empty()) return;
  dim_ = static_cast<int>(points_.front().size());
  check_dimension(dim_);
  const Box box = bounding_box(points_);
  const Vec extent = box.hi - box.lo;
  if (cell_size <= 0.0) {
    // About two points per occupied cell for uniformly spread data.
    const double volume = std::max(extent.prod(), 1e-300);
    cell_size = std::pow(2.0 * volume / static_cast<double>(points_.size()), 1.0 / dim_);
    if (!(cell_size > 0.0) || !std::isfinite(cell_size)) cell_size = 1.0;
    const double max_extent = extent.maxCoeff();
    if (max_extent > 0.0) cell_size = std::max(cell_size, max_extent / 1024.0);
  }
  cell_ = cell_size;
  origin_ = box.lo;
  for (int d = 0; d < dim_; ++d) {
    extent_[d] = static_cast<int>(std::floor(extent(d) / cell_)) + 1;
  }
  const std::size_t cells = static_cast<std::size_t>(extent_.prod());
  std::vector<std::size_t> counts(cells + 1, 0);
  std::vector<std::size_t> owner(points_.size());
  for (std::size_t i = 0; i < points_.size(); ++i) {
    Eigen::Vector3i c = Eigen::Vector3i::Zero();
    for (int d = 0; d < dim_; ++d) {
      c[d] = std::clamp(static_cast<int>(std::floor((points_[i](d) - origin_(d)) / cell_)), 0,
                        extent_[d] - 1);
    }
    owner[i] = static_cast<std::size_t>(flat(c));
    ++counts[owner[i] + 1];
  }
  for (std::size_t c = 0; c < cells; ++c) counts[c + 1] += counts[c];
  start_ = counts;
  order_.resize(points_.size());
  std::vector<std::size_t> fill(counts.begin(), counts.end() - 1);
  for (std::size_t i = 0; i < points_.size(); ++i) order_[fill[owner[i]]++] = i;
}

std::ptrdiff_t PointIndex::flat(const Eigen::Vector3i& c) const {
  return (static_cast<std::ptrdiff_t>(c[2]) * extent_[1] + c[1]) * extent_[0] + c[0];
}

PointIndex::Hit PointIndex::nearest(const Vec& q) const {
  if (points_.empty()) throw std::logic_error("nearest() on an empty index");
  Eigen::Vector3i c0 = Eigen::Vector3i::Zero();
  for (int d = 0; d < dim_; ++d) {
    const double f = std::floor((q(d) - origin_(d)) / cell_);
    c0[d] = static_cast<int>(std::clamp(f, 0.0, static_cast<double>(extent_[d] - 1)));
  }
  const int max_ring = extent_.maxCoeff();
  double best2 = std::numeric_limits<double>::infinity();
  std::size_t best = 0;
  for (int r = 0; r <= max_ring; ++r) {
    const int rz = dim_ == 3 ? r : 0;
    for (int dz = -rz; dz <= rz; ++dz) {
      const int z = c0[2] + dz;
      if (z < 0 || z >= extent_[2]) continue;
      for (int dy = -r; dy <= r; ++dy) {
        const int y = c0[1] + dy;
        if (y < 0 || y >= extent_[1]) continue;
        const bool on_shell = std::abs(dz) == r || std::abs(dy) == r;
        const int step = on_shell ? 1 : 2 * r;
        for (int dx = -r; dx <= r; dx += std::max(step, 1)) {
          const int x = c0[0] + dx;
          if (x < 0 || x >= extent_[0]) continue;
          const auto cell = static_cast<std::size_t>(flat(Eigen::Vector3i(x, y, z)));
          for (std::size_t k = start_[cell]; k < start_[cell + 1]; ++k) {
            const std::size_t i = order_[k];
            const double d2 = (points_[i] - q).squaredNorm();
            if (d2 < best2) {
              best2 = d2;
              best = i;
            }
          }
        }
      }
    }
    // Cells outside the searched block lie beyond its faces; faces on the
    // grid edge have nothing behind them.
    double bound = std::numeric_limits<double>::infinity();
    for (int d = 0; d < dim_; ++d) {
      if (c0[d] - r > 0) bound = std::min(bound, q(d) - (origin_(d) + (c0[d] - r) * cell_));
      if (c0[d] + r < extent_[d] - 1) {
        bound = std::min(bound, origin_(d) + (c0[d] + r + 1) * cell_ - q(d));
      }
    }
    if (bound == std::numeric_limits<double>::infinity()) break;
    if (bound > 0.0 && best2 <= bound * bound) break;
  }
  return Hit{best, std::sqrt(best2)};
}

// ---------------------------------------------------------------------------
// Regions

BallRegion::BallRegion(Vec center, double radius) : center_(std::move(center)), radius_(radius) {
  check_dimension(static_cast<int>(center_.size()));
  if (!(radius_ >= 0.0)) throw ValidationError("ball radius must be nonnegative");
}

double BallRegion::distance(const Vec& y) const {
  return std::max(0.0, (y - center_).norm() - radius_);
}

Vec BallRegion::distance_gradient(const Vec& y) const {
  const Vec diff = y - center_;
  const double r = diff.norm();
  if (r <= radius_ || r == 0.0) return Vec::Zero(y.size());
  return diff / r;
}

Box BallRegion::bounds() const {
  return Box{center_.array() - radius_, center_.array() + radius_};
}

std::vector<Vec> BallRegion::samples() const { return {center_}; }

SampledRegion::SampledRegion(std::vector<Vec> points)
    : dim_(points.empty() ? 0 : static_cast<int>(points.front().size())),
      index_(points),
      bounds_(points.empty() ? Box{} : bounding_box(points)) {
  if (points.empty()) throw ValidationError("sampled region needs at least one point");
}

double SampledRegion::distance(const Vec& y) const { return index_.nearest(y).distance; }

Vec SampledRegion::distance_gradient(const Vec& y) const {
  const auto hit = index_.nearest(y);
  if (hit.distance == 0.0) return Vec::Zero(y.size());
  return (y - index_.points()[hit.index]) / hit.distance;
}

// ---------------------------------------------------------------------------
// Cutoff

double cutoff_transition(double u) {
  if (u <= 0.0) return 1.0;
  if (u >= 1.0) return 0.0;
  const double a = std::exp(-1.0 / (1.0 - u));
  const double b = std::exp(-1.0 / u);
  return a / (a + b);
}

double cutoff_transition_derivative(double u) {
  if (u <= 0.0 || u >= 1.0) return 0.0;
  const double a = std::exp(-1.0 / (1.0 - u));
  const double b = std::exp(-1.0 / u);
  const double s = a + b;
  if (s == 0.0) return 0.0;
  const double v = 1.0 - u;
  return -(a * b) * (1.0 / (v * v) + 1.0 / (u * u)) / (s * s);
}

CutoffProfile::CutoffProfile(RegionPtr center, double width)
    : center_(std::move(center)), width_(width) {
  if (!center_) throw ValidationError("cutoff profile needs a center region");
  if (!(width_ > 0.0) || !std::isfinite(width_)) {
    throw ValidationError("cutoff width must be positive");
  }
}

double smooth_cutoff(const CutoffProfile& profile, const Vec& y) {
  const double d = profile.center().distance(y);
  const double band = profile.support_radius() - profile.plateau_radius();
  return cutoff_transition((d - profile.plateau_radius()) / band);
}

Vec smooth_cutoff_gradient(const CutoffProfile& profile, const Vec& y) {
  const double d = profile.center().distance(y);
  const double band = profile.support_radius() - profile.plateau_radius();
  const double u = (d - profile.plateau_radius()) / band;
  if (u <= 0.0 || u >= 1.0) return Vec::Zero(y.size());
  return (cutoff_transition_derivative(u) / band) * profile.center().distance_gradient(y);
}

double reference_cutoff(const CutoffProfile& profile, const Vec& y, int nodes) {
  const int n = static_cast<int>(y.size());
  check_dimension(n);
  if (nodes < 2) throw ValidationError("reference cutoff needs at least 2 nodes per axis");
  const double eps = profile.mollification_radius();
  const double inner = profile.inner_radius();
  // Midpoint rule on the cube [-eps, eps]^n around y.
  const double h = 2.0 * eps / nodes;
  const double cell_volume = std::pow(h, n);
  double sum = 0.0;
  Vec z(n);
  Vec offset(n);
  const int total = n == 2 ? nodes * nodes : nodes * nodes * nodes;
  for (int k = 0; k < total; ++k) {
    int rem = k;
    for (int d = 0; d < n; ++d) {
      offset(d) = -eps + (rem % nodes + 0.5) * h;
      rem /= nodes;
    }
    const double kernel = mollifier_value(offset, eps);
    if (kernel == 0.0) continue;
    z = y - offset;
    if (profile.center().distance(z) < inner) sum += kernel * cell_volume;
  }
  return std::min(1.0, sum);
}

}  // namespace unrect
