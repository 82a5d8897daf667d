#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace nbra::ot {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Cross-set feature cost plus the intra-set geometry of each side.
/// Entries are cosine distances in [0, 2]; `query_geometry` and
/// `candidate_geometry` are symmetric with zero diagonal.
struct CostBundle {
  Matrix feature;             // M x N, 1 - cos(q_j, c_l)
  Matrix query_geometry;      // M x M
  Matrix candidate_geometry;  // N x N
};

struct TransportPlan {
  Matrix coupling;  // M x N, nonnegative
  Vector mu;        // row marginal
  Vector nu;        // column marginal

  /// Largest absolute deviation of row/column sums from mu/nu.
  double marginal_violation() const;
};

struct SinkhornConfig {
  double epsilon = 0.05;
  int max_iters = 1000;
  double tol = 1e-6;
};

struct SinkhornResult {
  TransportPlan plan;
  int iterations = 0;
  double violation = 0.0;
  bool converged = false;
  bool log_domain = false;
  std::optional<std::string> warning;
};

struct FwConfig {
  double beta = 0.5;
  SinkhornConfig sinkhorn;
  int max_iters = 50;
  double rel_tol = 1e-6;
};

struct FgwResult {
  TransportPlan plan;
  double cost = 0.0;
  int iterations = 0;
  /// Objective at the initial plan followed by one value per accepted step.
  std::vector<double> objective_trace;
  std::vector<std::string> warnings;
};

struct Assignment {
  std::vector<std::pair<int, int>> pairs;  // (row, col), sorted by row
  double total_cost = 0.0;
};

/// Pairwise cosine distances within a set of row vectors.
Matrix cosine_distance_matrix(const std::vector<Vector>& points);

CostBundle cost_bundle(const std::vector<Vector>& query, const std::vector<Vector>& candidate);

Vector uniform_marginal(Eigen::Index n);

/// Minimum-cost one-to-one assignment of size min(M, N). Unassigned rows or
/// columns of a rectangular matrix carry no penalty.
Assignment hungarian(const Matrix& cost);

/// Entropic OT by alternating scaling. Switches to log-domain updates when
/// epsilon <= 1e-2 or when the plain kernel under/overflows.
SinkhornResult sinkhorn(const Matrix& cost, const Vector& mu, const Vector& nu, const SinkhornConfig& config);

/// sum_{j,j',l,l'} (A_jj' - B_ll')^2 T_jl T_j'l', evaluated through the
/// squared-loss decomposition. Exact for any nonnegative T, on or off the
/// marginal polytope.
double gw_term(const Matrix& query_geometry, const Matrix& candidate_geometry, const Matrix& coupling);

/// (1 - beta) <D, T> + beta * GW(T).
double fgw_objective(const CostBundle& bundle, const Matrix& coupling, double beta);

/// Frank-Wolfe on the fused objective with Sinkhorn linear minimization and
/// exact line search. Starts from outer(mu, nu); with beta > 0 and uniform
/// marginals it also runs from a distance-profile seed and keeps the lower cost.
FgwResult fgw_solve(const CostBundle& bundle, const Vector& mu, const Vector& nu, const FwConfig& config);

/// Pure GW discrepancy between two clouds under uniform marginals.
/// The clouds may live in different spaces.
double gw_distance(const std::vector<Vector>& cloud_a, const std::vector<Vector>& cloud_b, const FwConfig& config);

/// Dense text dump for debugging plans.
std::string format_plan(const TransportPlan& plan);

}  // namespace nbra::ot
