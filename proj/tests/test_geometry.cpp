#include <doctest.h>

#include <cmath>
#include <random>

#include "test_util.hpp"
#include "unrect/geometry.hpp"

using namespace unrect;
using unrect::testing::random_vec;

TEST_CASE("rotation from generator") {
  Mat x(2, 2);
  x << 0.0, -M_PI / 2, M_PI / 2, 0.0;

  SUBCASE("t = 0 gives the identity") {
    const Rotation r = Rotation::from_generator(x, 0.0);
    CHECK((r.matrix() - Mat::Identity(2, 2)).norm() == doctest::Approx(0.0));
  }
  SUBCASE("quarter turn") {
    const Rotation r = Rotation::from_generator(x, 1.0);
    const Vec p = r.apply(make_vec({2.0, 3.0}));
    CHECK(p(0) == doctest::Approx(-3.0).epsilon(1e-14));
    CHECK(p(1) == doctest::Approx(2.0).epsilon(1e-14));
  }
  SUBCASE("non-skew generator is rejected") {
    Mat bad(2, 2);
    bad << 0.0, 1.0, 1.0, 0.0;
    CHECK_THROWS_AS(Rotation::from_generator(bad), ValidationError);
  }
}

TEST_CASE("one-parameter group law and orthogonality") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  double worst_group = 0.0;
  double worst_orth = 0.0;
  double worst_det = 0.0;
  for (int n : {2, 3}) {
    for (int trial = 0; trial < 500; ++trial) {
      const Mat x = random_generator(rng, n, 3.0);
      const double s = u(rng);
      const double t = u(rng);
      const Mat lhs = Rotation::from_generator(x, s + t).matrix();
      const Mat rhs = Rotation::from_generator(x, s).matrix() * Rotation::from_generator(x, t).matrix();
      worst_group = std::max(worst_group, (lhs - rhs).cwiseAbs().maxCoeff());
      const Mat r = Rotation::from_generator(x).matrix();
      worst_orth = std::max(worst_orth, (r * r.transpose() - Mat::Identity(n, n)).cwiseAbs().maxCoeff());
      worst_det = std::max(worst_det, std::abs(r.determinant() - 1.0));
    }
  }
  CHECK(worst_group < 1e-12);
  CHECK(worst_orth < 1e-12);
  CHECK(worst_det < 1e-12);
}

TEST_CASE("geodesic point and angle") {
  const Rotation r = Rotation::planar(0.4);
  CHECK(r.angle() == doctest::Approx(0.4));
  CHECK(r.at(0.5).angle() == doctest::Approx(0.2));
  CHECK(r.inverse().matrix().isApprox(r.matrix().transpose(), 1e-14));
  CHECK(r.distance_to_identity() == doctest::Approx(2.0 * std::sin(0.2)));
  CHECK(Rotation::identity(3).is_identity());
}

TEST_CASE("random generator angles stay below the bound") {
  std::mt19937_64 rng(3);
  for (int n : {2, 3}) {
    for (int i = 0; i < 200; ++i) {
      const Rotation r = Rotation::from_generator(random_generator(rng, n, 0.3));
      CHECK(r.angle() > 0.0);
      CHECK(r.angle() < 0.3 + 1e-12);
    }
  }
}

TEST_CASE("projection onto a plane") {
  const Plane x_axis = Plane::line(0.0);
  const Vec p = x_axis.project(make_vec({3.0, 4.0}));
  CHECK(p(0) == doctest::Approx(3.0));
  CHECK(p(1) == doctest::Approx(0.0));

  std::mt19937_64 rng(5);
  for (int n : {2, 3}) {
    for (int m = 1; m < n; ++m) {
      const Plane v = Plane::from_vectors(Mat::Random(n, m));
      const Mat b = v.basis();
      CHECK((b.transpose() * b - Mat::Identity(m, m)).cwiseAbs().maxCoeff() < 1e-12);
      const Vec q = random_vec(rng, n);
      CHECK((v.project(v.project(q)) - v.project(q)).norm() < 1e-14);
    }
  }
  CHECK_THROWS_AS(Plane::from_vectors(Mat::Zero(2, 1)), ValidationError);
}

TEST_CASE("projection commutes with rotation") {
  // P_V(theta p) = theta(P_{theta^-1 V}(p)); both sides by direct matrices.
  std::mt19937_64 rng(17);
  double worst = 0.0;
  for (int n : {2, 3}) {
    for (int i = 0; i < 1000; ++i) {
      const int m = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(n - 1));
      Mat span(n, m);
      for (int c = 0; c < m; ++c) span.col(c) = random_vec(rng, n);
      const Plane v = Plane::from_vectors(span);
      const Rotation theta = Rotation::from_generator(random_generator(rng, n, M_PI));
      const Vec p = random_vec(rng, n, -5.0, 5.0);
      const Mat lhs_matrix = v.basis() * v.basis().transpose();
      const Mat w = theta.matrix().transpose() * v.basis();
      const Vec lhs = lhs_matrix * (theta.matrix() * p);
      const Vec rhs = theta.matrix() * (w * (w.transpose() * p));
      worst = std::max(worst, (lhs - rhs).norm());
      worst = std::max(worst, (v.transformed(theta.inverse()).project(p) - w * (w.transpose() * p)).norm());
    }
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("mollifier") {
  SUBCASE("vanishes outside the ball") {
    CHECK(mollifier_value(make_vec({0.5, 0.0}), 0.5) == 0.0);
    CHECK(mollifier_value(make_vec({0.4, 0.4}), 0.5) == 0.0);
  }
  SUBCASE("scaling at the origin") {
    const double unit = mollifier_value(make_vec({0.0, 0.0}), 1.0);
    CHECK(mollifier_value(make_vec({0.0, 0.0}), 0.25) == doctest::Approx(unit * 16.0));
    CHECK(unit == doctest::Approx(std::exp(-1.0) / mollifier_normalisation(2)));
  }
  SUBCASE("unit mass in 2D by midpoint quadrature") {
    const int k = 400;
    const double eps = 0.5;
    const double h = 2.0 * eps / k;
    double sum = 0.0;
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < k; ++j) {
        sum += mollifier_value(make_vec({-eps + (i + 0.5) * h, -eps + (j + 0.5) * h}), eps);
      }
    }
    CHECK(sum * h * h == doctest::Approx(1.0).epsilon(1e-3));
  }
  SUBCASE("unit mass in 3D by midpoint quadrature") {
    const int k = 80;
    const double h = 2.0 / k;
    double sum = 0.0;
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < k; ++j) {
        for (int l = 0; l < k; ++l) {
          sum += mollifier_value(make_vec({-1 + (i + 0.5) * h, -1 + (j + 0.5) * h, -1 + (l + 0.5) * h}), 1.0);
        }
      }
    }
    CHECK(sum * h * h * h == doctest::Approx(1.0).epsilon(1e-3));
  }
  CHECK_THROWS_AS(mollifier_value(make_vec({0.0, 0.0}), 0.0), ValidationError);
}

TEST_CASE("smooth cutoff support properties") {
  const double mu = 0.2;
  auto region = std::make_shared<BallRegion>(make_vec({0.0, 0.0}), 0.3);
  const CutoffProfile profile(region, mu);
  std::mt19937_64 rng(23);
  double max_grad = 0.0;
  for (int i = 0; i < 20000; ++i) {
    const Vec y = random_vec(rng, 2, -0.6, 0.6);
    const double d = region->distance(y);
    const double c = smooth_cutoff(profile, y);
    CHECK(c >= 0.0);
    CHECK(c <= 1.0);
    if (d < 0.5 * mu) CHECK(c == 1.0);
    if (d >= 0.75 * mu) CHECK(c == 0.0);
    max_grad = std::max(max_grad, smooth_cutoff_gradient(profile, y).norm());
  }
  MESSAGE("cutoff gradient constant C = |grad c| * mu = " << max_grad * mu);
  CHECK(max_grad * mu < 20.0);
}

TEST_CASE("cutoff gradient matches finite differences") {
  auto region = std::make_shared<BallRegion>(make_vec({0.1, -0.2}), 0.25);
  const CutoffProfile profile(region, 0.16);
  std::mt19937_64 rng(29);
  for (int i = 0; i < 200; ++i) {
    const Vec y = random_vec(rng, 2, -0.5, 0.5);
    const Mat fd = unrect::testing::fd_jacobian(
        [&](const Vec& q) { return make_vec({smooth_cutoff(profile, q)}); }, y, 1e-7);
    const Vec g = smooth_cutoff_gradient(profile, y);
    CHECK((fd.row(0).transpose() - g).norm() < 1e-5 * std::max(1.0, g.norm()));
  }
}

TEST_CASE("closed-form cutoff and literal convolution share the plateau and support") {
  auto region = std::make_shared<BallRegion>(make_vec({0.0, 0.0}), 0.2);
  const CutoffProfile profile(region, 0.4);
  for (double r : {0.0, 0.1, 0.35, 0.52, 0.6}) {
    const Vec y = make_vec({0.2 + r, 0.0});
    const double closed = smooth_cutoff(profile, y);
    const double literal = reference_cutoff(profile, y, 40);
    if (r <= 0.2 - 1e-12) {
      CHECK(closed == 1.0);
      CHECK(literal == doctest::Approx(1.0).epsilon(1e-3));
    }
    if (r >= 0.3) {
      CHECK(closed == 0.0);
      CHECK(literal == doctest::Approx(0.0).epsilon(1e-3));
    }
  }
}

TEST_CASE("nearest-neighbour index agrees with brute force") {
  std::mt19937_64 rng(31);
  for (int n : {2, 3}) {
    std::vector<Vec> pts;
    for (int i = 0; i < 700; ++i) pts.push_back(random_vec(rng, n, 0.0, 1.0));
    const PointIndex index(pts);
    for (int q = 0; q < 300; ++q) {
      const Vec y = random_vec(rng, n, -1.0, 2.0);
      double best = std::numeric_limits<double>::infinity();
      for (const Vec& p : pts) best = std::min(best, (p - y).norm());
      CHECK(index.nearest(y).distance == doctest::Approx(best).epsilon(1e-14));
    }
  }
  // A curve-like set with a fine cell size, queried far away.
  std::vector<Vec> arc;
  for (int i = 0; i < 400; ++i) arc.push_back(make_vec({std::cos(i * 0.01), std::sin(i * 0.01)}));
  const PointIndex fine(arc, 0.004);
  for (int q = 0; q < 100; ++q) {
    const Vec y = random_vec(rng, 2, -2.0, 2.0);
    double best = std::numeric_limits<double>::infinity();
    for (const Vec& p : arc) best = std::min(best, (p - y).norm());
    CHECK(fine.nearest(y).distance == doctest::Approx(best).epsilon(1e-14));
  }
}

TEST_CASE("sampled region distance") {
  const SampledRegion region({make_vec({0.0, 0.0}), make_vec({1.0, 0.0})});
  CHECK(region.distance(make_vec({0.5, 0.5})) == doctest::Approx(std::sqrt(0.5)));
  CHECK(region.distance(make_vec({1.0, 0.0})) == 0.0);
}
