#include "unrect/constant_rank.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "unrect/json_util.hpp"

namespace unrect {

Mat Diffeo::inverse_jacobian(const Vec& y) const { return jacobian(inverse(y)).inverse(); }

namespace {

class IdentityDiffeo final : public Diffeo {
 public:
  explicit IdentityDiffeo(int n) : n_(n) {}
  int dim() const override { return n_; }
  Vec forward(const Vec& x) const override { return x; }
  Vec inverse(const Vec& y) const override { return y; }
  Mat jacobian(const Vec&) const override { return Mat::Identity(n_, n_); }
  Mat jacobian_derivative(const Vec&, const Vec&) const override { return Mat::Zero(n_, n_); }
  Mat inverse_jacobian(const Vec&) const override { return Mat::Identity(n_, n_); }
  nlohmann::json to_json() const override { return {{"type", "identity"}, {"dim", n_}}; }

 private:
  int n_;
};

class AffineDiffeo final : public Diffeo {
 public:
  AffineDiffeo(Mat a, Vec b) : a_(std::move(a)), b_(std::move(b)) {
    check_dimension(static_cast<int>(a_.rows()));
    if (a_.cols() != a_.rows() || b_.size() != a_.rows()) {
      throw ValidationError("affine map dimension mismatch");
    }
    Eigen::JacobiSVD<Mat> svd(a_);
    const auto& s = svd.singularValues();
    if (s.minCoeff() < 1e-10 * std::max(1.0, s.maxCoeff())) {
      throw ValidationError("affine map matrix is singular");
    }
    a_inv_ = a_.inverse();
  }
  int dim() const override { return static_cast<int>(a_.rows()); }
  Vec forward(const Vec& x) const override { return a_ * x + b_; }
  Vec inverse(const Vec& y) const override { return a_inv_ * (y - b_); }
  Mat jacobian(const Vec&) const override { return a_; }
  Mat jacobian_derivative(const Vec&, const Vec&) const override { return Mat::Zero(dim(), dim()); }
  Mat inverse_jacobian(const Vec&) const override { return a_inv_; }
  nlohmann::json to_json() const override {
    if (a_.isIdentity(0.0)) return {{"type", "translation"}, {"offset", vec_to_json(b_)}};
    return {{"type", "affine"}, {"matrix", mat_to_json(a_)}, {"offset", vec_to_json(b_)}};
  }

 private:
  Mat a_;
  Mat a_inv_;
  Vec b_;
};

double poly(const std::vector<double>& c, double u, int derivative) {
  double v = 0.0;
  for (std::size_t k = c.size(); k-- > static_cast<std::size_t>(derivative);) {
    double factor = 1.0;
    for (int d = 0; d < derivative; ++d) factor *= static_cast<double>(k - static_cast<std::size_t>(d));
    v = v * u + factor * c[k];
  }
  return v;
}

class ShearDiffeo final : public Diffeo {
 public:
  ShearDiffeo(int n, int source, int target, double amplitude, std::vector<double> coefficients,
              double bound)
      : n_(n), source_(source), target_(target), amplitude_(amplitude),
        coefficients_(std::move(coefficients)), bound_(bound) {
    check_dimension(n_);
    if (source_ < 0 || source_ >= n_ || target_ < 0 || target_ >= n_ || source_ == target_) {
      throw ValidationError("shear axes must be distinct coordinates");
    }
    if (!(bound_ > 0.0)) throw ValidationError("shear bound must be positive");
    double sup = 0.0;
    for (int i = 0; i <= 1000; ++i) {
      const double u = -bound_ + 2.0 * bound_ * i / 1000.0;
      sup = std::max(sup, std::abs(poly(coefficients_, u, 1)));
    }
    if (std::abs(amplitude_) * sup >= 1.0) {
      throw ValidationError("shear violates |amplitude| * sup|s'| < 1");
    }
  }
  int dim() const override { return n_; }
  Vec forward(const Vec& x) const override {
    Vec y = x;
    y(target_) += amplitude_ * poly(coefficients_, x(source_), 0);
    return y;
  }
  Vec inverse(const Vec& y) const override {
    Vec x = y;
    x(target_) -= amplitude_ * poly(coefficients_, y(source_), 0);
    return x;
  }
  Mat jacobian(const Vec& x) const override {
    Mat j = Mat::Identity(n_, n_);
    j(target_, source_) = amplitude_ * poly(coefficients_, x(source_), 1);
    return j;
  }
  Mat jacobian_derivative(const Vec& x, const Vec& v) const override {
    Mat d = Mat::Zero(n_, n_);
    d(target_, source_) = amplitude_ * poly(coefficients_, x(source_), 2) * v(source_);
    return d;
  }
  nlohmann::json to_json() const override {
    return {{"type", "shear"},   {"dim", n_},
            {"source", source_}, {"target", target_},
            {"amplitude", amplitude_}, {"coefficients", coefficients_},
            {"bound", bound_}};
  }

 private:
  int n_;
  int source_;
  int target_;
  double amplitude_;
  std::vector<double> coefficients_;
  double bound_;
};

class RadialBumpDiffeo final : public Diffeo {
 public:
  RadialBumpDiffeo(Vec center, double radius, double amplitude)
      : c_(std::move(center)), r_(radius), beta_(amplitude) {
    check_dimension(static_cast<int>(c_.size()));
    if (!(r_ > 0.0)) throw ValidationError("radial bump radius must be positive");
    if (!(beta_ > -1.0 && beta_ < 49.0 / 32.0)) {
      throw ValidationError("radial bump amplitude must lie in (-1, 49/32)");
    }
  }
  int dim() const override { return static_cast<int>(c_.size()); }

  Vec forward(const Vec& x) const override {
    const Vec u = x - c_;
    return c_ + u * (1.0 + beta_ * h(u.squaredNorm() / (r_ * r_)));
  }

  Vec inverse(const Vec& y) const override {
    const Vec w = y - c_;
    const double target = w.norm();
    if (target >= r_ || target == 0.0) return y;
    // Solve g(rho) = rho (1 + beta h(rho^2/R^2)) = target on [0, R]; g is increasing.
    double lo = 0.0;
    double hi = r_;
    double rho = target / (1.0 + beta_ * h(target * target / (r_ * r_)));
    rho = std::clamp(rho, lo, hi);
    for (int it = 0; it < 100; ++it) {
      const double s = rho * rho / (r_ * r_);
      const double g = rho * (1.0 + beta_ * h(s)) - target;
      if (g > 0.0) hi = rho; else lo = rho;
      const double dg = 1.0 + beta_ * (h(s) + 2.0 * s * dh(s));
      double next = rho - g / dg;
      if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
      if (std::abs(next - rho) <= 1e-16 * r_) {
        rho = next;
        break;
      }
      rho = next;
    }
    return c_ + w * (rho / target);
  }

  Mat jacobian(const Vec& x) const override {
    const int n = dim();
    const Vec u = x - c_;
    const double s = u.squaredNorm() / (r_ * r_);
    Mat j = (1.0 + beta_ * h(s)) * Mat::Identity(n, n);
    j += (beta_ * dh(s) * 2.0 / (r_ * r_)) * (u * u.transpose());
    return j;
  }

  Mat jacobian_derivative(const Vec& x, const Vec& v) const override {
    const int n = dim();
    const Vec u = x - c_;
    const double k = 2.0 / (r_ * r_);
    const double s = u.squaredNorm() / (r_ * r_);
    const double uv = u.dot(v);
    Mat d = (beta_ * dh(s) * k * uv) * Mat::Identity(n, n);
    d += (beta_ * k * d2h(s) * k * uv) * (u * u.transpose());
    d += (beta_ * k * dh(s)) * (v * u.transpose() + u * v.transpose());
    return d;
  }

  nlohmann::json to_json() const override {
    return {{"type", "radial_bump"}, {"center", vec_to_json(c_)}, {"radius", r_},
            {"amplitude", beta_}};
  }

 private:
  static double h(double s) { return s < 1.0 ? (1.0 - s) * (1.0 - s) * (1.0 - s) : 0.0; }
  static double dh(double s) { return s < 1.0 ? -3.0 * (1.0 - s) * (1.0 - s) : 0.0; }
  static double d2h(double s) { return s < 1.0 ? 6.0 * (1.0 - s) : 0.0; }

  Vec c_;
  double r_;
  double beta_;
};

class CompositeDiffeo final : public Diffeo {
 public:
  explicit CompositeDiffeo(std::vector<DiffeoPtr> maps) : maps_(std::move(maps)) {
    if (maps_.empty()) throw ValidationError("composition needs at least one map");
    for (const auto& m : maps_) {
      if (!m || m->dim() != maps_.front()->dim()) throw ValidationError("composition dimension mismatch");
    }
  }
  int dim() const override { return maps_.front()->dim(); }
  Vec forward(const Vec& x) const override {
    Vec y = x;
    for (const auto& m : maps_) y = m->forward(y);
    return y;
  }
  Vec inverse(const Vec& y) const override {
    Vec x = y;
    for (auto it = maps_.rbegin(); it != maps_.rend(); ++it) x = (*it)->inverse(x);
    return x;
  }
  Mat jacobian(const Vec& x) const override {
    Vec p = x;
    Mat j = Mat::Identity(dim(), dim());
    for (const auto& m : maps_) {
      j = m->jacobian(p) * j;
      p = m->forward(p);
    }
    return j;
  }
  Mat jacobian_derivative(const Vec& x, const Vec& v) const override {
    Vec p = x;
    Mat j = Mat::Identity(dim(), dim());
    Mat dj = Mat::Zero(dim(), dim());
    for (const auto& m : maps_) {
      const Mat jm = m->jacobian(p);
      const Mat djm = m->jacobian_derivative(p, j * v);
      dj = djm * j + jm * dj;
      j = jm * j;
      p = m->forward(p);
    }
    return dj;
  }
  Mat inverse_jacobian(const Vec& y) const override {
    Vec p = y;
    Mat j = Mat::Identity(dim(), dim());
    for (auto it = maps_.rbegin(); it != maps_.rend(); ++it) {
      j = (*it)->inverse_jacobian(p) * j;
      p = (*it)->inverse(p);
    }
    return j;
  }
  nlohmann::json to_json() const override {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& m : maps_) list.push_back(m->to_json());
    return {{"type", "compose"}, {"maps", list}};
  }

 private:
  std::vector<DiffeoPtr> maps_;
};

class InverseDiffeo final : public Diffeo {
 public:
  explicit InverseDiffeo(DiffeoPtr base) : base_(std::move(base)) {
    if (!base_) throw ValidationError("inverse of a null map");
  }
  int dim() const override { return base_->dim(); }
  Vec forward(const Vec& x) const override { return base_->inverse(x); }
  Vec inverse(const Vec& y) const override { return base_->forward(y); }
  Mat jacobian(const Vec& x) const override { return base_->inverse_jacobian(x); }
  Mat jacobian_derivative(const Vec& y, const Vec& w) const override {
    // d(J^{-1}) = -J^{-1} dJ J^{-1}, with dJ taken along J^{-1} w at x = base^{-1}(y).
    const Vec x = base_->inverse(y);
    const Mat jinv = base_->jacobian(x).inverse();
    return -jinv * base_->jacobian_derivative(x, jinv * w) * jinv;
  }
  Mat inverse_jacobian(const Vec& y) const override { return base_->jacobian(y); }
  nlohmann::json to_json() const override { return {{"type", "inverse"}, {"map", base_->to_json()}}; }

 private:
  DiffeoPtr base_;
};

}  // namespace

DiffeoPtr identity_diffeo(int n) {
  check_dimension(n);
  return std::make_shared<IdentityDiffeo>(n);
}

DiffeoPtr affine_diffeo(Mat matrix, Vec offset) {
  return std::make_shared<AffineDiffeo>(std::move(matrix), std::move(offset));
}

DiffeoPtr translation_diffeo(Vec offset) {
  const auto n = offset.size();
  return std::make_shared<AffineDiffeo>(Mat::Identity(n, n), std::move(offset));
}

DiffeoPtr shear_diffeo(int n, int source_axis, int target_axis, double amplitude,
                       std::vector<double> coefficients, double bound) {
  return std::make_shared<ShearDiffeo>(n, source_axis, target_axis, amplitude,
                                       std::move(coefficients), bound);
}

DiffeoPtr radial_bump_diffeo(Vec center, double radius, double amplitude) {
  return std::make_shared<RadialBumpDiffeo>(std::move(center), radius, amplitude);
}

DiffeoPtr compose_diffeos(std::vector<DiffeoPtr> maps) {
  return std::make_shared<CompositeDiffeo>(std::move(maps));
}

DiffeoPtr inverse_diffeo(DiffeoPtr map) { return std::make_shared<InverseDiffeo>(std::move(map)); }

DiffeoPtr diffeo_from_json(const nlohmann::json& j) {
  const std::string type = j.at("type").get<std::string>();
  if (type == "identity") return identity_diffeo(j.at("dim").get<int>());
  if (type == "translation") return translation_diffeo(vec_from_json(j.at("offset")));
  if (type == "affine") {
    return affine_diffeo(mat_from_json(j.at("matrix")), vec_from_json(j.at("offset")));
  }
  if (type == "rotation") {
    // Planar rotation about `center` by `angle`.
    const double angle = j.at("angle").get<double>();
    const Vec c = j.contains("center") ? vec_from_json(j.at("center")) : Vec(Vec::Zero(2));
    const Mat r = Rotation::planar(angle).matrix();
    return affine_diffeo(r, c - r * c);
  }
  if (type == "shear") {
    return shear_diffeo(j.at("dim").get<int>(), j.at("source").get<int>(), j.at("target").get<int>(),
                        j.at("amplitude").get<double>(),
                        j.at("coefficients").get<std::vector<double>>(), j.value("bound", 1.0));
  }
  if (type == "radial_bump") {
    return radial_bump_diffeo(vec_from_json(j.at("center")), j.at("radius").get<double>(),
                              j.at("amplitude").get<double>());
  }
  if (type == "compose") {
    std::vector<DiffeoPtr> maps;
    for (const auto& m : j.at("maps")) maps.push_back(diffeo_from_json(m));
    return compose_diffeos(std::move(maps));
  }
  if (type == "inverse") return inverse_diffeo(diffeo_from_json(j.at("map")));
  throw ValidationError("unknown diffeomorphism type '" + type + "'");
}

// ---------------------------------------------------------------------------

SingularValueReport singular_value_report(const Mat& jacobian, int m) {
  Eigen::JacobiSVD<Mat> svd(jacobian);
  SingularValueReport r;
  const auto& s = svd.singularValues();
  for (Eigen::Index i = 0; i < s.size(); ++i) r.singular_values.push_back(s(i));
  r.rank = static_cast<int>(std::count_if(r.singular_values.begin(), r.singular_values.end(),
                                          [](double v) { return v > kRankThreshold; }));
  if (m >= 1 && m <= static_cast<int>(r.singular_values.size())) {
    const double above = r.singular_values[static_cast<std::size_t>(m - 1)];
    const double below = m < static_cast<int>(r.singular_values.size())
                             ? r.singular_values[static_cast<std::size_t>(m)]
                             : 0.0;
    r.gap = below == 0.0 ? std::numeric_limits<double>::infinity() : above / below;
  }
  return r;
}

ConstantRankMap::ConstantRankMap(DiffeoPtr phi, Plane plane, DiffeoPtr psi_inv, double chart_radius)
    : phi_(std::move(phi)), plane_(std::move(plane)), psi_inv_(std::move(psi_inv)),
      chart_radius_(chart_radius) {
  if (!phi_ || !psi_inv_) throw ValidationError("constant-rank map needs both charts");
  if (phi_->dim() != plane_.ambient_dim() || psi_inv_->dim() != plane_.ambient_dim()) {
    throw ValidationError("constant-rank map dimension mismatch");
  }
  if (!(chart_radius_ > 0.0)) throw ValidationError("chart radius must be positive");
}

ConstantRankMap ConstantRankMap::projection(const Plane& plane) {
  const int n = plane.ambient_dim();
  return ConstantRankMap(identity_diffeo(n), plane, identity_diffeo(n));
}

bool ConstantRankMap::in_domain(const Vec& x) const {
  if (x.size() != dim() || !x.allFinite()) return false;
  if (!std::isfinite(chart_radius_)) return true;
  return phi_->forward(x).norm() < chart_radius_;
}

Vec ConstantRankMap::evaluate(const Vec& x) const {
  if (!in_domain(x)) throw DomainError("point outside the chart domain of f");
  return psi_inv_->forward(plane_.project(phi_->forward(x)));
}

Mat ConstantRankMap::jacobian(const Vec& x) const {
  if (!in_domain(x)) throw DomainError("point outside the chart domain of f");
  const Vec z = phi_->forward(x);
  return psi_inv_->jacobian(plane_.project(z)) * plane_.projector() * phi_->jacobian(x);
}

ConstantRankMap ConstantRankMap::rescaled(double factor) const {
  if (!(factor > 0.0)) throw ValidationError("rescale factor must be positive");
  const int n = dim();
  auto scale = affine_diffeo(factor * Mat::Identity(n, n), Vec::Zero(n));
  return ConstantRankMap(phi_, plane_, compose_diffeos({psi_inv_, scale}), chart_radius_);
}

ConstantRankMap ConstantRankMap::with_chart_radius(double r) const {
  return ConstantRankMap(phi_, plane_, psi_inv_, r);
}

ConstantRankMap ConstantRankMap::recentred(const Vec& chart_center, double chart_radius) const {
  if (chart_center.size() != dim()) throw ValidationError("chart centre dimension mismatch");
  auto phi = compose_diffeos({phi_, translation_diffeo(-chart_center)});
  auto psi = compose_diffeos({translation_diffeo(plane_.project(chart_center)), psi_inv_});
  return ConstantRankMap(std::move(phi), plane_, std::move(psi), chart_radius);
}

nlohmann::json ConstantRankMap::to_json() const {
  nlohmann::json j{{"phi", phi_->to_json()},
                   {"plane", mat_to_json(plane_.basis())},
                   {"psi_inv", psi_inv_->to_json()}};
  if (std::isfinite(chart_radius_)) j["chart_radius"] = chart_radius_;
  return j;
}

ConstantRankMap ConstantRankMap::from_json(const nlohmann::json& j) {
  Plane plane = [&] {
    if (j.contains("angle")) return Plane::line(j.at("angle").get<double>());
    return Plane::from_vectors(mat_from_json(j.at("plane")));
  }();
  const int n = plane.ambient_dim();
  DiffeoPtr phi = j.contains("phi") ? diffeo_from_json(j.at("phi")) : identity_diffeo(n);
  DiffeoPtr psi = j.contains("psi_inv") ? diffeo_from_json(j.at("psi_inv")) : identity_diffeo(n);
  const double r = j.value("chart_radius", std::numeric_limits<double>::infinity());
  return ConstantRankMap(std::move(phi), std::move(plane), std::move(psi), r);
}

// ---------------------------------------------------------------------------

SmoothMap as_smooth_map(const ConstantRankMap& f) {
  return SmoothMap{[f](const Vec& x) { return f.evaluate(x); },
                   [f](const Vec& x) { return f.jacobian(x); }};
}

SmoothMap as_smooth_map(const DiffeoPtr& map) {
  return SmoothMap{[map](const Vec& x) { return map->forward(x); },
                   [map](const Vec& x) { return map->jacobian(x); }};
}

SmoothMap identity_smooth_map() {
  return SmoothMap{[](const Vec& x) { return x; },
                   [](const Vec& x) -> Mat { return Mat::Identity(x.size(), x.size()); }};
}

SmoothMap compose(SmoothMap outer, SmoothMap inner) {
  auto o = std::make_shared<SmoothMap>(std::move(outer));
  auto i = std::make_shared<SmoothMap>(std::move(inner));
  return SmoothMap{[o, i](const Vec& x) { return o->value(i->value(x)); },
                   [o, i](const Vec& x) -> Mat { return o->jacobian(i->value(x)) * i->jacobian(x); }};
}

C1Distance c1_distance_parts(const SmoothMap& f, const SmoothMap& g, std::span<const Vec> grid) {
  if (grid.empty()) throw ValidationError("C1 distance needs a nonempty grid");
  C1Distance d;
  for (const Vec& x : grid) {
    d.value_part = std::max(d.value_part, (f.value(x) - g.value(x)).norm());
    d.jacobian_part = std::max(d.jacobian_part, operator_norm(f.jacobian(x) - g.jacobian(x)));
  }
  return d;
}

double c1_distance(const SmoothMap& f, const SmoothMap& g, std::span<const Vec> grid) {
  return c1_distance_parts(f, g, grid).total();
}

std::vector<Vec> chart_boundary_samples(const Diffeo& phi, double chart_radius, int count) {
  const int n = phi.dim();
  std::vector<Vec> out;
  if (n == 2) {
    out.reserve(static_cast<std::size_t>(count));
    for (int k = 0; k < count; ++k) {
      const double a = 2.0 * std::numbers::pi * k / count;
      out.push_back(phi.inverse(make_vec({chart_radius * std::cos(a), chart_radius * std::sin(a)})));
    }
    return out;
  }
  // Fibonacci sphere.
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (int k = 0; k < count; ++k) {
    const double z = 1.0 - 2.0 * (k + 0.5) / count;
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double a = golden * k;
    out.push_back(phi.inverse(chart_radius * make_vec({r * std::cos(a), r * std::sin(a), z})));
  }
  return out;
}

std::vector<Vec> chart_grid(const Diffeo& phi, double chart_radius, int per_axis) {
  if (!(chart_radius > 0.0) || !std::isfinite(chart_radius)) {
    throw ValidationError("chart grid needs a finite positive chart radius");
  }
  if (per_axis < 2) throw ValidationError("chart grid needs at least 2 points per axis");
  const int n = phi.dim();
  auto boundary = chart_boundary_samples(phi, chart_radius, n == 2 ? 720 : 2000);
  boundary.push_back(phi.inverse(Vec::Zero(n)));
  const Box box = bounding_box(boundary);
  std::vector<Vec> grid;
  const int total = n == 2 ? per_axis * per_axis : per_axis * per_axis * per_axis;
  for (int k = 0; k < total; ++k) {
    int rem = k;
    Vec x(n);
    for (int d = 0; d < n; ++d) {
      const double t = (rem % per_axis) / static_cast<double>(per_axis - 1);
      x(d) = box.lo(d) + t * (box.hi(d) - box.lo(d));
      rem /= per_axis;
    }
    if (phi.forward(x).norm() < chart_radius) grid.push_back(x);
  }
  return grid;
}

}  // namespace unrect
