#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "unrect/cover.hpp"
#include "unrect/io.hpp"
#include "unrect/measure.hpp"

using namespace unrect;

namespace {

Box square(double lo, double hi) { return Box{make_vec({lo, lo}), make_vec({hi, hi})}; }

ConstantRankMap slope_two_projection() {
  return ConstantRankMap::projection(Plane::line(std::atan2(2.0, 1.0)));
}

ChartPiece unit_square_ball() { return ChartPiece{make_vec({0.5, 0.5}), 0.75, std::nullopt}; }

CoverFamily unit_square_cover(const ConstantRankMap& f, double h) {
  return build_cover(f.phi(), {unit_square_ball()}, square(-0.25 - h, 1.25 + h), h);
}

// Label components of a mask by flood fill over face neighbours.
std::size_t component_count(const CellGrid& grid, const CellMask& mask) {
  std::vector<int> label(grid.size(), -1);
  std::vector<std::size_t> nb;
  std::size_t count = 0;
  for (std::size_t s = 0; s < grid.size(); ++s) {
    if (!mask[s] || label[s] >= 0) continue;
    std::vector<std::size_t> stack{s};
    label[s] = static_cast<int>(count);
    while (!stack.empty()) {
      const std::size_t c = stack.back();
      stack.pop_back();
      grid.neighbours(c, nb);
      for (std::size_t d : nb) {
        if (mask[d] && label[d] < 0) {
          label[d] = static_cast<int>(count);
          stack.push_back(d);
        }
      }
    }
    ++count;
  }
  return count;
}

}  // namespace

TEST_CASE("cell grid addressing") {
  const CellGrid grid(square(0.0, 1.0), 0.25);
  CHECK(grid.size() == 16);
  CHECK(grid.cell_of(make_vec({0.1, 0.1})) == std::optional<std::size_t>(0));
  CHECK_FALSE(grid.cell_of(make_vec({1.5, 0.1})).has_value());
  for (std::size_t c = 0; c < grid.size(); ++c) CHECK(grid.cell_of(grid.center(c)) == std::optional<std::size_t>(c));
  std::vector<std::size_t> nb;
  grid.neighbours(0, nb);
  CHECK(nb.size() == 2);
  grid.neighbours(5, nb);
  CHECK(nb.size() == 4);
  const CellGrid cube(Box{make_vec({0, 0, 0}), make_vec({1, 1, 1})}, 0.25);
  cube.neighbours(21, nb);
  CHECK(nb.size() == 6);
}

TEST_CASE("grid region distance") {
  const CellGrid grid(square(-1.0, 1.0), 0.05);
  CellMask mask(grid.size(), 0);
  for (std::size_t c = 0; c < grid.size(); ++c) {
    if (grid.center(c).norm() < 0.5) mask[c] = 1;
  }
  const GridRegion region(grid, mask);
  CHECK(region.contains(make_vec({0.0, 0.0})));
  CHECK(region.distance(make_vec({0.1, 0.0})) == 0.0);
  CHECK(region.distance(make_vec({0.9, 0.0})) == doctest::Approx(0.4).epsilon(0.1));
  const BoundaryDistance bd(grid, mask);
  CHECK(bd(make_vec({0.0, 0.0})) == doctest::Approx(0.5).epsilon(0.1));
  CHECK(bd(make_vec({0.9, 0.0})) == 0.0);
}

TEST_CASE("grid region threshold queries agree with exact distances") {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(-1.2, 1.2);
  const CellGrid grid(square(-1.0, 1.0), 0.04);
  // A ring touching the right edge of the grid plus a detached blob.
  CellMask mask(grid.size(), 0);
  for (std::size_t c = 0; c < grid.size(); ++c) {
    const Vec y = grid.center(c);
    const double r = (y - make_vec({0.6, 0.0})).norm();
    if ((r > 0.2 && r < 0.5) || (y - make_vec({-0.6, 0.5})).norm() < 0.1) mask[c] = 1;
  }
  const GridRegion region(grid, mask);
  int mismatches = 0;
  double worst = 0.0;
  for (int i = 0; i < 20000; ++i) {
    const Vec y = make_vec({u(rng), u(rng)});
    const double d = region.distance(y);
    for (double r : {0.0, 0.01, 0.05, 0.2, 0.6}) mismatches += region.farther_than(y, r) != (d >= r);
    Vec g;
    worst = std::max(worst, std::abs(region.distance_with_gradient(y, g) - d));
    worst = std::max(worst, (g - region.distance_gradient(y)).norm());
  }
  CHECK(mismatches == 0);
  CHECK(worst == 0.0);
}

TEST_CASE("cover by sequential differences") {
  const auto phi = identity_diffeo(2);
  SUBCASE("single ball gives one element") {
    const CoverFamily cover = build_cover(phi, {ChartPiece{make_vec({0, 0}), 1.0, std::nullopt}},
                                          square(-0.7, 0.7), 0.02);
    REQUIRE(cover.elements.size() == 1);
    CHECK(cover.elements[0].chart == 0);
    std::size_t in_domain = 0;
    for (std::size_t c = 0; c < cover.grid.size(); ++c) in_domain += square(-0.7, 0.7).contains(cover.grid.center(c));
    CHECK(cover.elements[0].cells == in_domain);
  }
  SUBCASE("ball then box leaves a left and a right remainder") {
    const ChartPiece ball{make_vec({0, 0}), 1.0, std::nullopt};
    const ChartPiece box{make_vec({0, 0}), 0.0, make_vec({2.0, 1.0})};
    const Box domain{make_vec({-1.99, -0.99}), make_vec({1.99, 0.99})};
    const CoverFamily cover = build_cover(phi, {ball, box}, domain, 0.02);
    REQUIRE(cover.elements.size() == 3);
    std::multiset<int> charts;
    CellMask seen(cover.grid.size(), 0);
    for (const auto& e : cover.elements) {
      charts.insert(e.chart);
      CHECK(component_count(cover.grid, e.mask) == 1);
      for (std::size_t c = 0; c < cover.grid.size(); ++c) {
        if (!e.mask[c]) continue;
        CHECK(seen[c] == 0);
        seen[c] = 1;
        const Vec y = cover.grid.center(c);
        if (e.chart == 0) CHECK(y.norm() < 1.0);
        if (e.chart == 1) CHECK(y.norm() > 1.0);
      }
    }
    CHECK(charts == std::multiset<int>{0, 1, 1});
  }
  SUBCASE("disjoint balls give one element each") {
    const std::vector<ChartPiece> balls{{make_vec({0, 0}), 0.5, std::nullopt},
                                        {make_vec({2, 0}), 0.5, std::nullopt}};
    const Box domain{make_vec({-0.6, -0.6}), make_vec({2.6, 0.6})};
    const auto inside = [](const Vec& y) {
      return y.norm() < 0.5 || (y - make_vec({2, 0})).norm() < 0.5;
    };
    const CoverFamily cover = build_cover(phi, balls, domain, 0.02, inside);
    REQUIRE(cover.elements.size() == 2);
    CHECK(cover.elements[0].chart != cover.elements[1].chart);
  }
  SUBCASE("uncovered domain cells are rejected") {
    const auto everywhere = [](const Vec&) { return true; };
    CHECK_THROWS_AS(build_cover(phi, {ChartPiece{make_vec({0, 0}), 0.5, std::nullopt}}, square(-1, 1), 0.05,
                                everywhere),
                    ValidationError);
  }
}

TEST_CASE("collar selection") {
  SUBCASE("mass far from the boundary accepts the first width") {
    const auto c = select_collar({0.8, 0.9}, {0.5, 0.5}, 1.0 / 3.0, 0.25, 1e9, 0.01);
    CHECK(c.mu == 0.25);
    CHECK(c.mass == 0.0);
    CHECK(c.candidates == 1);
  }
  SUBCASE("empty region is flagged") {
    const auto c = select_collar({}, {}, 0.1, 0.25, 1e9, 0.01);
    CHECK(c.empty);
  }
  SUBCASE("widths on a point shell are skipped") {
    const auto c = select_collar({0.125, 0.9}, {0.5, 0.5}, 0.4, 0.25, 1e9, 0.01);
    CHECK(c.rejected_shell == 1);
    CHECK(c.mu == 0.0625);
  }
  SUBCASE("all mass at the boundary is infeasible") {
    CHECK_THROWS_AS(select_collar({0.0, 0.001}, {0.5, 0.5}, 0.3, 0.25, 1e9, 0.01), InfeasibleError);
  }
  SUBCASE("four-corner cloud in the unit ball around the square") {
    const WeightedCloud cloud = four_corner_cantor(6);
    const Vec centre = make_vec({0.5, 0.5});
    std::vector<double> d;
    for (const Vec& p : cloud.points) d.push_back(0.75 - (p - centre).norm());
    const auto c = select_collar(d, cloud.weights, 1.0 / 3.0, 0.25, 1e9, 1e-3);
    double direct = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (d[i] < c.mu) direct += cloud.weights[i];
    }
    CHECK(c.mass == direct);
    CHECK(direct < 1.0 / 3.0);
  }
}

TEST_CASE("geometric schedule") {
  const auto s = geometric_schedule(0.1, 5);
  REQUIRE(s.size() == 5);
  double sum = 0.0;
  for (std::size_t k = 0; k < s.size(); ++k) {
    CHECK(s[k] == std::ldexp(0.1, -static_cast<int>(k) - 1));
    sum += s[k];
  }
  CHECK(sum < 0.1);
  CHECK_THROWS_AS(geometric_schedule(0.0, 2), ValidationError);
}

TEST_CASE("element iteration") {
  const ConstantRankMap f = slope_two_projection();
  const CoverFamily cover = unit_square_cover(f, 1.0 / 128.0);
  const WeightedCloud cloud = four_corner_cantor(4);
  IterationOptions options;
  options.delta = std::ldexp(1.0, -8);
  options.trials = 32;
  options.seed = 5;

  SUBCASE("zero steps records the initial state only") {
    options.steps = 0;
    const auto r = iterate_element(f, cloud, cover, 0, options);
    REQUIRE(r.rows.size() == 1);
    CHECK(r.sigma == doctest::Approx(1.0));
    CHECK(r.rows[0].image_measure == r.initial_measure);
    CHECK(r.steps.empty());
    CHECK(ledger_to_csv(r.rows) ==
          "step,mu,collar_mass,image_measure,step_distance,cum_distance\n0,0,0," +
              format_double(r.initial_measure) + ",0,0\n");
  }
  SUBCASE("one step shrinks the image and stays C1-close") {
    options.steps = 1;
    const auto r = iterate_element(f, cloud, cover, 0, options);
    REQUIRE_FALSE(r.failure);
    REQUIRE(r.rows.size() == 2);
    const auto& row = r.rows[1];
    CHECK(row.collar_mass < r.sigma / 3.0);
    CHECK(row.image_measure <= r.sigma / 2.0 + 4.0 * options.delta);
    CHECK(row.step_distance <= 0.05);
    CHECK(row.cum_distance < options.epsilon);
    CHECK_NOTHROW(assert_ledger(r));
    for (std::size_t c = 0; c < cover.grid.size(); ++c) {
      if (r.final_region[c]) CHECK(cover.elements[0].mask[c]);
    }

    const auto again = iterate_element(f, cloud, cover, 0, options);
    CHECK(ledger_to_csv(again.rows) == ledger_to_csv(r.rows));
  }
  SUBCASE("guards") {
    CHECK_THROWS_AS(iterate_element(f, cloud, cover, 3, options), ValidationError);
    options.schedule = {0.2};
    options.steps = 1;
    CHECK_THROWS_AS(iterate_element(f, cloud, cover, 0, options), ValidationError);
  }
}

TEST_CASE("Cauchy check") {
  const std::vector<Vec> grid{make_vec({0.1, 0.2}), make_vec({0.5, 0.5}), make_vec({0.9, 0.3})};
  const auto sched = geometric_schedule(0.1, 3);
  SUBCASE("constant sequence has zero differences") {
    std::vector<SmoothMap> maps(4, identity_smooth_map());
    const auto r = check_cauchy(maps, sched, grid, 0.1 / 8);
    CHECK(r.ok);
    CHECK(r.entries.size() == 6);
    for (const auto& e : r.entries) CHECK(e.measured == 0.0);
  }
  SUBCASE("translations by the schedule meet the bound and an overshoot fails") {
    auto shift = [](double s) {
      return SmoothMap{[s](const Vec& x) { return Vec(x + make_vec({s, 0.0})); },
                       [](const Vec& x) { return Mat(Mat::Identity(x.size(), x.size())); }};
    };
    std::vector<SmoothMap> maps{shift(0.0), shift(0.05), shift(0.075), shift(0.0875)};
    CHECK(check_cauchy(maps, sched, grid, 0.0125).ok);
    maps[3] = shift(0.2);
    const auto bad = check_cauchy(maps, sched, grid, 0.0125);
    CHECK_FALSE(bad.ok);
    REQUIRE(bad.first_violation.has_value());
    CHECK(bad.first_violation->n == 3);
  }
  CHECK_THROWS_AS(check_cauchy({identity_smooth_map()}, sched, grid, 0.0), ValidationError);
}

TEST_CASE("gluing two separated elements") {
  const ConstantRankMap f = slope_two_projection();
  const std::vector<ChartPiece> charts{unit_square_ball(),
                                       ChartPiece{make_vec({3.5, 0.5}), 0.75, std::nullopt}};
  const auto inside = [&](const Vec& y) {
    return charts[0].contains_closed(y) || charts[1].contains_closed(y);
  };
  const double h = 1.0 / 64.0;
  const CoverFamily cover =
      build_cover(f.phi(), charts, Box{make_vec({-0.3, -0.3}), make_vec({4.3, 1.3})}, h, inside);
  REQUIRE(cover.elements.size() == 2);

  WeightedCloud cloud = four_corner_cantor(3);
  const std::size_t half = cloud.size();
  for (std::size_t i = 0; i < half; ++i) {
    cloud.points.push_back(cloud.points[i] + make_vec({3.0, 0.0}));
    cloud.weights.push_back(cloud.weights[i]);
  }
  IterationOptions options;
  options.steps = 1;
  options.delta = std::ldexp(1.0, -6);
  options.trials = 16;
  options.seed = 9;
  std::vector<IterationResult> results;
  for (std::size_t e = 0; e < 2; ++e) {
    results.push_back(iterate_element(f, cloud, cover, e, options));
    REQUIRE_FALSE(results.back().failure);
  }
  const GlueReport g = glue_global(results, cover, 1);
  CHECK(g.disjoint);
  CHECK(g.min_support_gap > 1.0);
  CHECK(g.order_difference <= 1e-12);
  CHECK(g.element_mismatch <= 1e-12);
  CHECK(g.residual_motion == 0.0);
  CHECK(g.support_cells[0] > 0);

  const Vec far = make_vec({2.0, 0.5});
  CHECK((glued_map(results, 1, far) - far).norm() == 0.0);
}
