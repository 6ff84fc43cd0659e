#pragma once

#include <array>
#include <cstdint>
#include <exception>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "unrect/constant_rank.hpp"
#include "unrect/flow.hpp"
#include "unrect/geometry.hpp"
#include "unrect/test_sets.hpp"

namespace unrect {

/// Regular cell grid over a box; cells are addressed by a flat index.
class CellGrid {
 public:
  CellGrid() = default;
  CellGrid(const Box& box, double h);

  int dim() const { return dim_; }
  double spacing() const { return h_; }
  std::size_t size() const { return size_; }
  const Box& box() const { return box_; }
  const std::array<int, 3>& extent() const { return extent_; }

  /// Flat index of the cell containing p, or nullopt outside the grid.
  std::optional<std::size_t> cell_of(const Vec& p) const;
  Vec center(std::size_t cell) const;
  /// Face neighbours (4 in 2D, 6 in 3D).
  void neighbours(std::size_t cell, std::vector<std::size_t>& out) const;

 private:
  int dim_ = 0;
  double h_ = 0.0;
  Box box_;
  std::array<int, 3> extent_{1, 1, 1};
  std::size_t size_ = 0;
};

using CellMask = std::vector<std::uint8_t>;

std::size_t mask_count(const CellMask& mask);

/// Region given by the occupied cells of a grid. Distances are measured to
/// the centres of the outer boundary layer minus h/2; occupied cells have
/// distance zero.
class GridRegion final : public Region {
 public:
  GridRegion(const CellGrid& grid, CellMask mask);

  int dim() const override { return grid_.dim(); }
  double distance(const Vec& y) const override;
  Vec distance_gradient(const Vec& y) const override;
  bool farther_than(const Vec& y, double r) const override;
  double distance_with_gradient(const Vec& y, Vec& gradient) const override;
  Box bounds() const override { return bounds_; }
  std::vector<Vec> samples() const override;

  bool contains(const Vec& y) const;
  const CellMask& mask() const { return mask_; }
  const CellGrid& grid() const { return grid_; }
  bool empty() const { return count_ == 0; }

 private:
  CellGrid grid_;
  CellMask mask_;
  std::size_t count_ = 0;
  PointIndex rim_;  // unoccupied cells adjacent to occupied ones
  std::vector<float> centre_distance_;  // per cell, to the rim, in units of h
  Box bounds_;
};

/// Distance from y to the complement of the mask (to the centres of the
/// outside cells adjacent to it, minus h/2). Zero outside the mask.
class BoundaryDistance {
 public:
  BoundaryDistance(const CellGrid& grid, const CellMask& mask);
  double operator()(const Vec& y) const;
  bool empty() const { return index_.empty(); }

 private:
  const CellGrid* grid_;
  const CellMask* mask_;
  PointIndex index_;
};

// ---------------------------------------------------------------------------
// Cover

/// A chart piece phi^{-1}(c + S) with S a ball of radius `radius` or the box
/// with the given half extents.
struct ChartPiece {
  Vec center;
  double radius = 0.0;
  std::optional<Vec> half_extents;

  bool contains_open(const Vec& z) const;
  bool contains_closed(const Vec& z) const;
  /// Radius of the ball around the centre that contains the piece.
  double outer_radius() const;
};

struct CoverElement {
  CellMask mask;
  int chart = 0;
  std::size_t cells = 0;
  std::vector<Vec> boundary;
};

struct CoverFamily {
  CellGrid grid;
  DiffeoPtr phi;
  std::vector<ChartPiece> charts;
  std::vector<CoverElement> elements;
};

/// Working-domain membership; empty means the union of chart closures.
using DomainPredicate = std::function<bool(const Vec&)>;

/// Default grid spacing 2^-9 times the domain diameter.
double default_grid_spacing(const Box& domain);

/// Sequential differences int V_k minus closures of V_j (j < k) on the grid,
/// split into face-connected components. Throws ValidationError when some
/// domain cell lies in no chart closure.
CoverFamily build_cover(const DiffeoPtr& phi, const std::vector<ChartPiece>& charts,
                        const Box& domain, double h, const DomainPredicate& inside = {});

nlohmann::json to_json(const CoverFamily& cover);

// ---------------------------------------------------------------------------
// Collar selection

struct CollarChoice {
  double mu = 0.0;
  double mass = 0.0;
  double budget = 0.0;
  bool empty = false;  // no cloud mass in U_n
  int rejected_shell = 0;
  int candidates = 0;
  /// A later collar of the shrunken region can meet next_budget.
  bool lookahead_ok = true;
};

/// Largest mu = mu0 * 2^-j below `mu_limit` (and >= mu_min) with collar mass
/// < budget and no point exactly on the shell d = mu. `distances` are the
/// d(p, dU_n) of the cloud points inside U_n. Throws InfeasibleError.
///
/// With next_budget > 0, candidates are preferred for which some
/// mu' = mu 2^-j' >= mu_min leaves
/// mass{d < mu' + margin} + mass{mu - mu' - margin <= d < mu + margin}
/// below next_budget, i.e. the next region U_{n+1} (roughly the collar) has a
/// light collar of its own. Falls back to the plain rule when none does.
CollarChoice select_collar(const std::vector<double>& distances, const std::vector<double>& weights,
                           double budget, double mu0, double mu_limit, double mu_min,
                           double next_budget = 0.0, double margin = 0.0);

// ---------------------------------------------------------------------------
// Iteration

/// eps_k = eps * 2^-k, k = 1..n.
std::vector<double> geometric_schedule(double eps, int n);

struct IterationOptions {
  double epsilon = 0.1;
  int steps = 3;
  double delta = 1.0 / 4096.0;
  std::uint64_t seed = 1;
  int trials = 64;
  double rho = 0.3;
  /// Empty means geometric_schedule(epsilon, steps).
  std::vector<double> schedule;
  KeyLemmaOptions lemma;
  int search_grid = 48;
  int distance_grid = 48;
};

struct LedgerRow {
  int step = 0;
  double mu = 0.0;
  double collar_mass = 0.0;
  double image_measure = 0.0;
  double step_distance = 0.0;
  double cum_distance = 0.0;
  // Budgets and extra diagnostics (JSON only).
  double collar_budget = 0.0;
  double image_budget = 0.0;
  double step_budget = 0.0;
  double cum_budget = 0.0;
  double whole_image_measure = 0.0;
  double region_mass = 0.0;
  double t_star = 0.0;
  double realised_angle = 0.0;
  double searched_angle = 0.0;
  std::size_t active_cells = 0;
  bool collar_ok = true;
  bool image_ok = true;
  bool step_ok = true;
  bool cum_ok = true;

  bool ok() const { return collar_ok && image_ok && step_ok && cum_ok; }
};

struct IterationResult {
  double sigma = 0.0;           // cloud mass in the element
  double initial_measure = 0.0; // measure of f(cloud in element)
  double lipschitz_scale = 1.0; // codomain rescale applied to f
  std::vector<LedgerRow> rows;  // step 0 then 1..N
  /// zeta_1 .. zeta_N (nullptr for identity steps).
  std::vector<std::shared_ptr<const FlowDiffeo>> steps;
  std::vector<double> schedule;
  std::vector<Vec> final_points;
  double stabilised_fraction = 1.0;
  std::vector<nlohmann::json> lemma_reports;
  CellMask final_region;
  /// Set when a step failed; rows hold the partial trace up to that step.
  std::exception_ptr failure;
  std::string failure_message;
  bool ok() const;
};

/// Steps 3-5 of the construction on one element with parent chart
/// f.phi() recentred at the chart centre.
IterationResult iterate_element(const ConstantRankMap& f, const WeightedCloud& cloud,
                                const CoverFamily& cover, std::size_t element,
                                const IterationOptions& options);

/// Rethrows a recorded step failure, then throws BudgetError naming the
/// first violated ledger entry.
void assert_ledger(const IterationResult& result);

nlohmann::json to_json(const LedgerRow& row);
nlohmann::json to_json(const IterationResult& result);
/// CSV `step,mu,collar_mass,image_measure,step_distance,cum_distance`.
std::string ledger_to_csv(const std::vector<LedgerRow>& rows);

/// Composition zeta_k o ... o zeta_1 of the first k steps (identity for k = 0).
SmoothMap composed_map(const IterationResult& result, std::size_t k);
Vec apply_steps(const IterationResult& result, std::size_t k, const Vec& x);

// ---------------------------------------------------------------------------
// Cauchy check and gluing

struct CauchyEntry {
  std::size_t m = 0;
  std::size_t n = 0;
  double measured = 0.0;
  double bound = 0.0;
  bool ok = true;
};

struct CauchyReport {
  std::vector<CauchyEntry> entries;
  /// sup distance from the last map to the limit: sum of eps_k for k > N
  /// (for the geometric schedule, eps 2^-N).
  double limit_tail = 0.0;
  bool ok = true;
  std::optional<CauchyEntry> first_violation;
};

/// maps[k] is the k-fold composition (maps[0] = id); schedule[k-1] = eps_k.
/// `tail_after` is the scheduled mass beyond the last map.
CauchyReport check_cauchy(const std::vector<SmoothMap>& maps, const std::vector<double>& schedule,
                          const std::vector<Vec>& grid, double tail_after);

nlohmann::json to_json(const CauchyReport& report);

struct GlueReport {
  double min_support_gap = 0.0;
  bool disjoint = true;
  double order_difference = 0.0;
  double element_mismatch = 0.0;
  double residual_motion = 0.0;
  std::size_t checked_points = 0;
  std::vector<std::size_t> support_cells;
};

nlohmann::json to_json(const GlueReport& report);

/// Diagonal map xi_n = zeta_{1,n} o zeta_{2,n-1} o ... (element i uses its
/// first n+1-i steps).
Vec glued_map(const std::vector<IterationResult>& elements, std::size_t n, const Vec& x,
              bool reverse_order = false);

/// Checks support disjointness, order independence and agreement with each
/// element's own composition on the grid cell centres. Throws BudgetError on
/// support overlap.
GlueReport glue_global(const std::vector<IterationResult>& elements, const CoverFamily& cover,
                       std::size_t n);

}  // namespace unrect
