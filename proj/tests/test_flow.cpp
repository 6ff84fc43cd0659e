#include <doctest.h>

#include <cmath>
#include <random>

#include "test_util.hpp"
#include "unrect/flow.hpp"
#include "unrect/measure.hpp"

using namespace unrect;
using unrect::testing::fd_jacobian;
using unrect::testing::random_vec;
using unrect::testing::relative_error;

namespace {

Mat skew2(double a) {
  Mat x(2, 2);
  x << 0.0, -a, a, 0.0;
  return x;
}

DiffeoPtr curved_phi() {
  return compose_diffeos({shear_diffeo(2, 0, 1, 0.25, {0.0, 0.0, 1.0}, 1.5),
                          radial_bump_diffeo(make_vec({0.1, 0.0}), 0.9, 0.3)});
}

// Interval-producing direction of the four-corner set; see tests/oracles.
constexpr double kBadAngle = 1.1071487177940904;
constexpr double kSweepRatio = 0.8153060425867047;
constexpr double kContinuousRatio = 0.800082779723573;

}  // namespace

TEST_CASE("conjugated rotation") {
  std::mt19937_64 rng(71);
  const Rotation theta = Rotation::planar(0.3);
  SUBCASE("identity chart gives the rotation") {
    const DiffeoPtr xi = conjugated_rotation(identity_diffeo(2), theta);
    for (int i = 0; i < 20; ++i) {
      const Vec x = random_vec(rng, 2);
      CHECK((xi->forward(x) - theta.apply(x)).norm() < 1e-15);
    }
  }
  SUBCASE("identity rotation gives the identity") {
    const DiffeoPtr xi = conjugated_rotation(curved_phi(), Rotation::identity(2));
    for (int i = 0; i < 20; ++i) {
      const Vec x = random_vec(rng, 2);
      CHECK((xi->forward(x) - x).norm() < 1e-12);
    }
  }
  SUBCASE("inverse is the conjugated inverse rotation") {
    const DiffeoPtr xi = conjugated_rotation(curved_phi(), theta);
    const DiffeoPtr back = conjugated_rotation(curved_phi(), theta.inverse());
    for (int i = 0; i < 50; ++i) {
      const Vec y = random_vec(rng, 2, -0.5, 0.5);
      CHECK((xi->inverse(y) - back->forward(y)).norm() < 1e-10);
      CHECK(relative_error(xi->jacobian(y), fd_jacobian([&](const Vec& p) { return xi->forward(p); }, y)) < 1e-6);
    }
  }
  SUBCASE("point-level conjugation identity") {
    Mat b(2, 2);
    b << 1.5, 0.2, -0.3, 0.8;
    const DiffeoPtr psi_inv = affine_diffeo(b, make_vec({0.1, 0.2}));
    const ConstantRankMap f(curved_phi(), Plane::line(0.4), psi_inv);
    const DiffeoPtr xi = conjugated_rotation(f.phi(), theta);
    for (int i = 0; i < 100; ++i) {
      const Vec x = random_vec(rng, 2, -0.5, 0.5);
      const Vec direct = psi_inv->forward(f.plane().project(theta.apply(f.phi()->forward(x))));
      CHECK((f.evaluate(xi->forward(x)) - direct).norm() < 1e-10);
    }
  }
}

TEST_CASE("pushforward measure") {
  const auto x_axis = ConstantRankMap::projection(Plane::line(0.0));
  SUBCASE("four-corner shadow on the x-axis") {
    const double delta = std::ldexp(1.0, -12);
    const auto e = pushforward_measure_after(x_axis, Rotation::identity(2), four_corner_cantor(6), delta);
    CHECK(std::abs(e.image.value - std::ldexp(1.0, -6)) <= 2 * delta);
    CHECK(e.agree);
  }
  SUBCASE("tilted segment") {
    const double delta = 1e-4;
    const auto seg = rectifiable_curve(
        SegmentCurve{make_vec({0.0, 0.0}), make_vec({std::sqrt(0.5), std::sqrt(0.5)})}, 20000);
    const auto e = pushforward_measure_after(x_axis, Rotation::identity(2), seg, delta);
    CHECK(std::abs(e.image.value - std::sqrt(0.5)) <= 2 * delta);
    CHECK(std::abs(e.chart_side.value - std::sqrt(0.5)) <= 2 * delta);
  }
  SUBCASE("image side and chart side agree under curved charts") {
    Mat b(2, 2);
    b << 1.0, 0.0, 0.0, 1.0;
    const ConstantRankMap f(curved_phi(), Plane::line(0.6), affine_diffeo(b, make_vec({0.3, 0.0})));
    const double delta = std::ldexp(1.0, -10);
    auto cloud = transformed_cloud(four_corner_cantor(5), [](const Vec& p) { return Vec(0.6 * p.array() - 0.3); }, "shrink");
    for (double a : {0.0, 0.05, -0.1}) {
      const auto e = pushforward_measure_after(f, Rotation::planar(a), cloud, delta);
      CHECK(std::abs(e.image.value - e.chart_side.value) <= 4 * delta * static_cast<double>(std::max(e.image.cells, e.chart_side.cells)));
      CHECK(e.agree);
    }
  }
  SUBCASE("chart violation") {
    const ConstantRankMap f = ConstantRankMap::projection(Plane::line(0.0)).with_chart_radius(0.1);
    CHECK_THROWS_AS(pushforward_measure_after(f, Rotation::identity(2), four_corner_cantor(2), 0.01), DomainError);
  }
}

TEST_CASE("rotation search") {
  SUBCASE("rectifiable segment keeps a positive shadow") {
    const auto seg = rectifiable_curve(SegmentCurve{make_vec({-0.5, 0.0}), make_vec({0.5, 0.0})}, 2000);
    const auto f = ConstantRankMap::projection(Plane::line(0.3)).with_chart_radius(0.75);
    SearchOptions o;
    o.rho = 0.19;
    o.trials = 128;
    o.delta = 1e-3;
    o.seed = 5;
    const SearchReport r = search_rotation(f, seg, o);
    CHECK(r.feasible > 0);
    for (const auto& t : r.trace) {
      if (t.feasible) CHECK(t.measure > 0.1);
    }
  }
  SUBCASE("four-corner at the bad angle") {
    const auto cloud = four_corner_cantor(6);
    const auto f = ConstantRankMap::projection(Plane::line(kBadAngle)).recentred(make_vec({0.5, 0.5}), 0.75);
    SearchOptions o;
    o.trials = 256;
    o.delta = std::ldexp(1.0, -12);
    o.seed = 1;
    const SearchReport r = search_rotation(f, cloud, o);
    const double ratio = r.best_measure / r.baseline_measure;
    MESSAGE("best ratio " << ratio << " (sweep oracle " << kSweepRatio << ")");
    CHECK(r.baseline_measure == doctest::Approx(1.0));
    CHECK(ratio < 0.9);
    CHECK(ratio >= kContinuousRatio - 1e-3);
    CHECK(r.best_c1 <= o.epsilon);
    // Filter semantics: every feasible trial satisfies the budget when rechecked.
    const auto grid = chart_grid(*f.phi(), f.chart_radius(), 64);
    int rechecked = 0;
    for (const auto& t : r.trace) {
      CHECK(t.feasible == (t.c1 <= o.epsilon && !t.excluded));
      if (t.feasible && rechecked < 5) {
        const auto theta = Rotation::from_generator(t.generator);
        const SmoothMap fm = as_smooth_map(f);
        const double c1 = c1_distance(compose(fm, as_smooth_map(conjugated_rotation(f.phi(), theta))), fm, grid);
        CHECK(c1 == doctest::Approx(t.c1).epsilon(1e-12));
        ++rechecked;
      }
    }
  }
  SUBCASE("identity is excluded") {
    const auto f = ConstantRankMap::projection(Plane::line(0.0)).with_chart_radius(2.0);
    SearchOptions o;
    o.trials = 1;
    o.delta = 0.01;
    CHECK_THROWS_AS(search_rotation(f, four_corner_cantor(2), {Rotation::identity(2)}, o), InfeasibleError);
  }
  SUBCASE("deterministic given the seed") {
    const auto f = ConstantRankMap::projection(Plane::line(0.2)).recentred(make_vec({0.5, 0.5}), 0.75);
    SearchOptions o;
    o.trials = 32;
    o.delta = std::ldexp(1.0, -8);
    o.seed = 9;
    const auto a = to_json(search_rotation(f, four_corner_cantor(4), o));
    const auto b = to_json(search_rotation(f, four_corner_cantor(4), o));
    CHECK(a == b);
  }
}

TEST_CASE("generator field") {
  std::mt19937_64 rng(73);
  SUBCASE("identity chart gives X y") {
    const VectorField v = generator_field(identity_diffeo(2), skew2(0.7));
    for (int i = 0; i < 20; ++i) {
      const Vec y = random_vec(rng, 2);
      CHECK((v.value(y) - skew2(0.7) * y).norm() < 1e-15);
    }
  }
  SUBCASE("linear in the generator") {
    Mat x1 = Mat::Zero(3, 3);
    x1(0, 1) = -1.0;
    x1(1, 0) = 1.0;
    Mat x2 = Mat::Zero(3, 3);
    x2(1, 2) = -1.0;
    x2(2, 1) = 1.0;
    const DiffeoPtr phi = radial_bump_diffeo(make_vec({0.0, 0.1, 0.0}), 1.0, 0.3);
    const VectorField v1 = generator_field(phi, x1);
    const VectorField v2 = generator_field(phi, x2);
    const VectorField v12 = generator_field(phi, 0.4 * x1 - 1.5 * x2);
    for (int i = 0; i < 20; ++i) {
      const Vec y = random_vec(rng, 3, -0.6, 0.6);
      CHECK((v12.value(y) - (0.4 * v1.value(y) - 1.5 * v2.value(y))).norm() < 1e-12);
    }
  }
  SUBCASE("velocity of the conjugated rotation path") {
    const DiffeoPtr phi = curved_phi();
    const VectorField v = generator_field(phi, skew2(0.8));
    const double h = 1e-5;
    for (int i = 0; i < 50; ++i) {
      const Vec y = random_vec(rng, 2, -0.5, 0.5);
      const Vec plus = conjugated_rotation(phi, Rotation::from_generator(skew2(0.8), h))->forward(y);
      const Vec minus = conjugated_rotation(phi, Rotation::from_generator(skew2(0.8), -h))->forward(y);
      CHECK(((plus - minus) / (2 * h) - v.value(y)).norm() < 1e-6);
      CHECK(relative_error(v.jacobian(y), fd_jacobian(v.value, y)) < 1e-6);
    }
  }
}

TEST_CASE("cutoff field") {
  const double mu = 0.2;
  auto region = std::make_shared<BallRegion>(make_vec({0.0, 0.0}), 0.15);
  const CutoffProfile profile(region, mu);
  const VectorField v = generator_field(identity_diffeo(2), skew2(1.0));
  const VectorField w = cutoff_field(v, profile);
  std::mt19937_64 rng(79);
  for (int i = 0; i < 5000; ++i) {
    const Vec y = random_vec(rng, 2, -0.5, 0.5);
    const double d = region->distance(y);
    if (d < 0.25 * mu) CHECK(w.value(y) == v.value(y));
    if (d >= 0.75 * mu) {
      CHECK(w.value(y).isZero(0.0));
      CHECK_FALSE(w.is_active(y));
    }
  }
  for (int i = 0; i < 100; ++i) {
    const Vec y = random_vec(rng, 2, -0.35, 0.35);
    CHECK(relative_error(w.jacobian(y), fd_jacobian(w.value, y)) < 1e-5);
  }
  const VectorField zero = cutoff_field(generator_field(identity_diffeo(2), Mat::Zero(2, 2)), profile);
  for (int i = 0; i < 20; ++i) CHECK(zero.value(random_vec(rng, 2)).isZero(0.0));
}

TEST_CASE("flow integration") {
  std::mt19937_64 rng(83);
  SUBCASE("zero field is the identity") {
    const auto flow = integrate_flow(generator_field(identity_diffeo(2), Mat::Zero(2, 2)), 0.7);
    for (int i = 0; i < 10; ++i) {
      const Vec x = random_vec(rng, 2);
      CHECK(flow->forward(x) == x);
    }
  }
  SUBCASE("uncut rotation field reaches exp(X)") {
    for (double a : {0.3, 0.9}) {
      const VectorField v = generator_field(identity_diffeo(2), skew2(a));
      const auto flow = integrate_flow(v, 1.0, 64);
      const Mat exact = Rotation::from_generator(skew2(a)).matrix();
      for (int i = 0; i < 50; ++i) {
        const Vec x = random_vec(rng, 2);
        CHECK((flow->forward(x) - exact * x).norm() < 1e-8);
      }
    }
    Mat x3 = Mat::Zero(3, 3);
    x3(0, 2) = -0.5;
    x3(2, 0) = 0.5;
    x3(1, 2) = 0.3;
    x3(2, 1) = -0.3;
    const auto flow3 = integrate_flow(generator_field(identity_diffeo(3), x3), 1.0, 64);
    const Mat exact3 = Rotation::from_generator(x3).matrix();
    for (int i = 0; i < 20; ++i) {
      const Vec x = random_vec(rng, 3);
      CHECK((flow3->forward(x) - exact3 * x).norm() < 1e-8);
    }
  }
  SUBCASE("semigroup, round trip and Jacobian") {
    auto region = std::make_shared<BallRegion>(make_vec({0.0, 0.0}), 0.2);
    const VectorField w = cutoff_field(generator_field(curved_phi(), skew2(1.0)), CutoffProfile(region, 0.3));
    REQUIRE(std::isfinite(w.lipschitz));
    const double t_max = 0.9 / w.lipschitz;
    std::uniform_real_distribution<double> u(0.05, 0.45);
    for (int rep = 0; rep < 10; ++rep) {
      const double s = u(rng) * t_max;
      const double t = u(rng) * t_max;
      const auto fs = integrate_flow(w, s, 128);
      const auto ft = integrate_flow(w, t, 128);
      const auto fst = integrate_flow(w, s + t, 256);
      for (int i = 0; i < 20; ++i) {
        const Vec x = random_vec(rng, 2, -0.45, 0.45);
        CHECK((fst->forward(x) - fs->forward(ft->forward(x))).norm() < 1e-7);
        CHECK((fst->inverse(fst->forward(x)) - x).norm() < 1e-7);
        CHECK(relative_error(fst->jacobian(x), fd_jacobian([&](const Vec& p) { return fst->forward(p); }, x)) < 1e-5);
      }
    }
  }
  SUBCASE("guards") {
    const VectorField v = generator_field(identity_diffeo(2), skew2(2.0));
    CHECK_THROWS_AS(integrate_flow(v, 0.1, 8), ValidationError);
    CHECK_THROWS_AS(integrate_flow(v, 0.6, 64), ValidationError);
  }
}

TEST_CASE("key lemma diffeomorphism") {
  const double mu = 0.2;
  auto region = std::make_shared<BallRegion>(make_vec({0.1, 0.0}), 0.15);
  SUBCASE("small rotation with a large budget runs to t = 1") {
    const auto r = key_lemma_diffeo(identity_diffeo(2), Rotation::planar(0.01), region, mu, 1.0);
    CHECK(r.report.t_star == 1.0);
    CHECK(r.report.property_i);
    CHECK(r.report.property_ii);
    CHECK(r.report.property_iii);
    CHECK(r.report.realised.angle() == doctest::Approx(0.01));
  }
  SUBCASE("properties on the verification set") {
    const DiffeoPtr phi = curved_phi();
    const Rotation theta = Rotation::planar(0.25);
    const double eta = 0.05;
    const auto r = key_lemma_diffeo(phi, theta, region, mu, eta);
    CHECK(r.report.t_star > 0.0);
    CHECK(r.report.t_star <= 1.0);
    CHECK(r.report.c1_norm <= eta);
    CHECK(r.report.property_i_error < 1e-7);
    CHECK(r.report.property_ii_moved == 0);
    CHECK(r.report.property_i_reach < 0.5 * mu);
    // (i) on fresh points near O, (ii) bitwise outside the support.
    const DiffeoPtr xi = conjugated_rotation(phi, r.report.realised);
    std::mt19937_64 rng(89);
    int near = 0;
    int far = 0;
    for (int i = 0; i < 4000; ++i) {
      const Vec y = random_vec(rng, 2, -0.5, 0.7);
      const double d = region->distance(y);
      if (d < 0.25 * mu) {
        CHECK((r.zeta->forward(y) - xi->forward(y)).norm() < 1e-7);
        ++near;
      } else if (d >= 0.75 * mu) {
        const Vec z = r.zeta->forward(y);
        CHECK(z(0) == y(0));
        CHECK(z(1) == y(1));
        ++far;
      }
    }
    CHECK(near > 100);
    CHECK(far > 100);
    const auto j = to_json(r.report);
    CHECK(j.contains("t_star"));
    CHECK(j["property_iii"]["c1_norm"].get<double>() == r.report.c1_norm);
  }
  SUBCASE("hypothesis on the chart boundary") {
    KeyLemmaOptions o;
    o.chart_radius = 0.3;
    CHECK_THROWS_AS(key_lemma_diffeo(identity_diffeo(2), Rotation::planar(0.1), region, mu, 0.1, o), ValidationError);
  }
  SUBCASE("identity rotation is rejected") {
    CHECK_THROWS_AS(key_lemma_diffeo(identity_diffeo(2), Rotation::identity(2), region, mu, 0.1), ValidationError);
  }
}
