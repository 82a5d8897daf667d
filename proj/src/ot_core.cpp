#include "nbra/ot_core.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <utility>
#include <vector>

#include "nbra/error.hpp"

namespace nbra::ot {

namespace {

constexpr double kLogDomainEpsilon = 1e-2;
// exp(-x) underflows to subnormals past ~708; stay well clear.
constexpr double kMaxKernelExponent = 600.0;
// Per-stage budget and target while annealing epsilon.
constexpr int kAnnealIters = 200;
constexpr double kAnnealTol = 1e-4;
// Scaling iterations at the target epsilon before switching to Newton.
constexpr int kScalingBudget = 100;
// Largest replicated problem the exact restart seed will solve.
constexpr Eigen::Index kMaxExactSeedSize = 120;

void check_marginal(const Vector& m, const char* name) {
  if (m.size() == 0) fail(ErrorKind::Usage, std::string(name) + " marginal is empty");
  if ((m.array() <= 0.0).any() || !m.allFinite()) {
    fail(ErrorKind::Usage, std::string(name) + " marginal must be strictly positive");
  }
  if (std::abs(m.sum() - 1.0) > 1e-9) fail(ErrorKind::Usage, std::string(name) + " marginal must sum to 1");
}

double violation_of(const Matrix& T, const Vector& mu, const Vector& nu) {
  const double rows = (T.rowwise().sum() - mu).cwiseAbs().maxCoeff();
  const double cols = (T.colwise().sum().transpose() - nu).cwiseAbs().maxCoeff();
  return std::max(rows, cols);
}

double log_sum_exp(const Eigen::ArrayXd& x) {
  const double m = x.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((x - m).exp().sum());
}

// One log-domain scaling run at a fixed epsilon, warm-started from (f, g).
SinkhornResult sinkhorn_log_stage(const Matrix& cost, const Vector& mu, const Vector& nu, double eps,
                                  int max_iters, double tol, Eigen::ArrayXd& f, Eigen::ArrayXd& g) {
  const Eigen::Index M = cost.rows();
  const Eigen::Index N = cost.cols();
  const Eigen::ArrayXd log_mu = mu.array().log();
  const Eigen::ArrayXd log_nu = nu.array().log();

  SinkhornResult res;
  res.log_domain = true;
  Matrix T(M, N);
  auto build_plan = [&] {
    for (Eigen::Index j = 0; j < M; ++j)
      for (Eigen::Index l = 0; l < N; ++l) T(j, l) = std::exp((f[j] + g[l] - cost(j, l)) / eps);
  };
  for (int it = 1; it <= max_iters; ++it) {
    for (Eigen::Index j = 0; j < M; ++j) {
      f[j] = eps * log_mu[j] - eps * log_sum_exp((g - cost.row(j).transpose().array()) / eps);
    }
    for (Eigen::Index l = 0; l < N; ++l) {
      g[l] = eps * log_nu[l] - eps * log_sum_exp((f - cost.col(l).array()) / eps);
    }
    build_plan();
    res.iterations = it;
    res.violation = violation_of(T, mu, nu);
    if (res.violation <= tol) {
      res.converged = true;
      break;
    }
  }
  res.plan = TransportPlan{std::move(T), mu, nu};
  return res;
}

// Damped Newton ascent on the entropic dual, pinning the last column
// potential to remove the constant shift. Converges in a handful of steps
// where plain scaling crawls (near-degenerate transport problems).
SinkhornResult sinkhorn_newton(const Matrix& cost, const Vector& mu, const Vector& nu, double eps, int max_iters,
                               double tol, Eigen::ArrayXd& f, Eigen::ArrayXd& g) {
  const Eigen::Index M = cost.rows();
  const Eigen::Index N = cost.cols();
  auto plan_of = [&](const Eigen::ArrayXd& ff, const Eigen::ArrayXd& gg) {
    Matrix T(M, N);
    for (Eigen::Index j = 0; j < M; ++j)
      for (Eigen::Index l = 0; l < N; ++l) T(j, l) = std::exp((ff[j] + gg[l] - cost(j, l)) / eps);
    return T;
  };
  auto dual = [&](const Eigen::ArrayXd& ff, const Eigen::ArrayXd& gg, const Matrix& T) {
    return ff.matrix().dot(mu) + gg.matrix().dot(nu) - eps * T.sum();
  };

  SinkhornResult res;
  res.log_domain = true;
  Matrix T = plan_of(f, g);
  double phi = dual(f, g, T);
  const Eigen::Index n = M + N - 1;
  for (int it = 1; it <= max_iters; ++it) {
    const Vector row = T.rowwise().sum();
    const Vector col = T.colwise().sum().transpose();
    Vector grad(n);
    grad << mu - row, (nu - col).head(N - 1);
    Matrix H = Matrix::Zero(n, n);
    H.topLeftCorner(M, M) = row.asDiagonal();
    H.topRightCorner(M, N - 1) = T.leftCols(N - 1);
    H.bottomLeftCorner(N - 1, M) = T.leftCols(N - 1).transpose();
    H.bottomRightCorner(N - 1, N - 1) = col.head(N - 1).asDiagonal();
    const Vector step = eps * H.ldlt().solve(grad);
    if (!step.allFinite()) break;

    double t = 1.0;
    bool moved = false;
    for (int ls = 0; ls < 30; ++ls, t *= 0.5) {
      Eigen::ArrayXd ff = f + t * step.head(M).array();
      Eigen::ArrayXd gg = g;
      gg.head(N - 1) += t * step.tail(N - 1).array();
      Matrix TT = plan_of(ff, gg);
      const double phi_new = dual(ff, gg, TT);
      if (std::isfinite(phi_new) && phi_new >= phi + 1e-4 * t * grad.dot(step)) {
        f = std::move(ff);
        g = std::move(gg);
        T = std::move(TT);
        phi = phi_new;
        moved = true;
        break;
      }
    }
    res.iterations = it;
    res.violation = violation_of(T, mu, nu);
    if (res.violation <= tol) {
      res.converged = true;
      break;
    }
    if (!moved) break;
  }
  res.violation = violation_of(T, mu, nu);
  res.plan = TransportPlan{std::move(T), mu, nu};
  return res;
}

// Log-domain Sinkhorn with epsilon scaling: potentials are annealed from the
// cost range down to the target epsilon, then scaled at the target. Runs
// that are still short of tol finish with Newton steps on the same dual.
SinkhornResult sinkhorn_log(const Matrix& cost, const Vector& mu, const Vector& nu, const SinkhornConfig& cfg) {
  Eigen::ArrayXd f = Eigen::ArrayXd::Zero(cost.rows());
  Eigen::ArrayXd g = Eigen::ArrayXd::Zero(cost.cols());
  const double range = cost.maxCoeff() - cost.minCoeff();
  for (double e = range / 2.0; e > cfg.epsilon; e /= 2.0) {
    sinkhorn_log_stage(cost, mu, nu, e, kAnnealIters, std::max(cfg.tol, kAnnealTol), f, g);
  }
  const int scaling_budget = std::min(cfg.max_iters, kScalingBudget);
  auto res = sinkhorn_log_stage(cost, mu, nu, cfg.epsilon, scaling_budget, cfg.tol, f, g);
  if (res.converged || cfg.max_iters <= scaling_budget || cost.cols() < 2) return res;
  int used = res.iterations;
  auto polished = sinkhorn_newton(cost, mu, nu, cfg.epsilon, cfg.max_iters - used, cfg.tol, f, g);
  used += polished.iterations;
  if (!polished.converged && used < cfg.max_iters) {
    // Newton stalled (ill-conditioned Hessian); finish with plain scaling.
    polished = sinkhorn_log_stage(cost, mu, nu, cfg.epsilon, cfg.max_iters - used, cfg.tol, f, g);
    used += polished.iterations;
  }
  polished.iterations = used;
  return polished;
}

// Returns nullopt when the scaling iterates leave the representable range.
std::optional<SinkhornResult> sinkhorn_plain(const Matrix& cost, const Vector& mu, const Vector& nu,
                                             const SinkhornConfig& cfg) {
  const double shift = cost.minCoeff();
  if ((cost.maxCoeff() - shift) / cfg.epsilon > kMaxKernelExponent) return std::nullopt;
  const Matrix K = (-(cost.array() - shift) / cfg.epsilon).exp().matrix();
  Vector u = Vector::Ones(cost.rows());
  Vector v = Vector::Ones(cost.cols());

  SinkhornResult res;
  for (int it = 1; it <= cfg.max_iters; ++it) {
    u = mu.cwiseQuotient(K * v);
    v = nu.cwiseQuotient(K.transpose() * u);
    if (!u.allFinite() || !v.allFinite()) return std::nullopt;
    res.iterations = it;
    const double rows = (u.cwiseProduct(K * v) - mu).cwiseAbs().maxCoeff();
    if (rows <= cfg.tol) {
      res.converged = true;
      break;
    }
  }
  Matrix T = u.asDiagonal() * K * v.asDiagonal();
  if (!T.allFinite()) return std::nullopt;
  res.violation = violation_of(T, mu, nu);
  res.converged = res.converged && res.violation <= cfg.tol;
  res.plan = TransportPlan{std::move(T), mu, nu};
  return res;
}

double frobenius(const Matrix& a, const Matrix& b) { return (a.array() * b.array()).sum(); }

}  // namespace

double TransportPlan::marginal_violation() const { return violation_of(coupling, mu, nu); }

Matrix cosine_distance_matrix(const std::vector<Vector>& points) {
  const auto n = static_cast<Eigen::Index>(points.size());
  std::vector<Vector> unit;
  unit.reserve(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double norm = points[i].norm();
    if (norm == 0.0) fail(ErrorKind::Degenerate, "zero vector at position " + std::to_string(i));
    unit.push_back(points[i] / norm);
  }
  Matrix d = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index k = i + 1; k < n; ++k) {
      const double c = std::clamp(unit[i].dot(unit[k]), -1.0, 1.0);
      d(i, k) = d(k, i) = 1.0 - c;
    }
  }
  return d;
}

CostBundle cost_bundle(const std::vector<Vector>& query, const std::vector<Vector>& candidate) {
  if (query.empty() || candidate.empty()) fail(ErrorKind::Usage, "cost bundle needs nonempty sets");
  CostBundle b;
  b.query_geometry = cosine_distance_matrix(query);
  b.candidate_geometry = cosine_distance_matrix(candidate);
  const auto M = static_cast<Eigen::Index>(query.size());
  const auto N = static_cast<Eigen::Index>(candidate.size());
  b.feature.resize(M, N);
  for (Eigen::Index j = 0; j < M; ++j) {
    if (query[j].size() != candidate.front().size()) fail(ErrorKind::Usage, "query and candidate dims differ");
    const Vector qj = query[j] / query[j].norm();
    for (Eigen::Index l = 0; l < N; ++l) {
      const double c = std::clamp(qj.dot(candidate[l] / candidate[l].norm()), -1.0, 1.0);
      b.feature(j, l) = 1.0 - c;
    }
  }
  return b;
}

Vector uniform_marginal(Eigen::Index n) {
  if (n <= 0) fail(ErrorKind::Usage, "marginal size must be positive");
  return Vector::Constant(n, 1.0 / static_cast<double>(n));
}

Assignment hungarian(const Matrix& cost) {
  if (cost.size() == 0) return {};
  if (!cost.allFinite()) fail(ErrorKind::Usage, "hungarian needs finite costs");
  const bool transposed = cost.rows() > cost.cols();
  const Matrix a = transposed ? Matrix(cost.transpose()) : cost;
  const auto n = static_cast<int>(a.rows());
  const auto m = static_cast<int>(a.cols());
  const double inf = std::numeric_limits<double>::infinity();

  // Shortest augmenting paths with row/column potentials; 1-based, column 0 is a sentinel.
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> match(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    match[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = match[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const int j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  Assignment out;
  for (int j = 1; j <= m; ++j) {
    if (match[j] == 0) continue;
    const int r = match[j] - 1;
    const int c = j - 1;
    out.pairs.emplace_back(transposed ? c : r, transposed ? r : c);
  }
  std::sort(out.pairs.begin(), out.pairs.end());
  // Sum from the original entries rather than the dual, so the value is exact.
  for (const auto& [r, c] : out.pairs) out.total_cost += cost(r, c);
  return out;
}

SinkhornResult sinkhorn(const Matrix& cost, const Vector& mu, const Vector& nu, const SinkhornConfig& config) {
  if (cost.rows() != mu.size() || cost.cols() != nu.size()) fail(ErrorKind::Usage, "sinkhorn shape mismatch");
  if (!cost.allFinite()) fail(ErrorKind::Usage, "sinkhorn cost must be finite");
  if (!(config.epsilon > 0.0)) fail(ErrorKind::Usage, "sinkhorn epsilon must be positive");
  if (config.max_iters < 1 || !(config.tol > 0.0)) fail(ErrorKind::Usage, "bad sinkhorn iteration settings");
  check_marginal(mu, "row");
  check_marginal(nu, "column");

  std::optional<SinkhornResult> res;
  if (config.epsilon > kLogDomainEpsilon) res = sinkhorn_plain(cost, mu, nu, config);
  if (!res || !res->converged) {
    auto stable = sinkhorn_log(cost, mu, nu, config);
    if (!res || stable.converged || stable.violation < res->violation) res = std::move(stable);
  }
  if (!res->converged) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "sinkhorn did not converge in %d iterations (violation %.3e)",
                  res->iterations, res->violation);
    res->warning = buf;
  }
  return std::move(*res);
}

double gw_term(const Matrix& query_geometry, const Matrix& candidate_geometry, const Matrix& coupling) {
  const Matrix& A = query_geometry;
  const Matrix& B = candidate_geometry;
  const Matrix& T = coupling;
  if (A.rows() != T.rows() || A.cols() != T.rows() || B.rows() != T.cols() || B.cols() != T.cols()) {
    fail(ErrorKind::Usage, "gw_term dimension mismatch");
  }
  const Vector p = T.rowwise().sum();
  const Vector q = T.colwise().sum().transpose();
  const Matrix A2 = A.cwiseProduct(A);
  const Matrix B2 = B.cwiseProduct(B);
  const double value = p.dot(A2 * p) + q.dot(B2 * q) - 2.0 * frobenius(A * T * B.transpose(), T);
  return std::max(value, 0.0);
}

double fgw_objective(const CostBundle& bundle, const Matrix& coupling, double beta) {
  double value = 0.0;
  if (beta != 1.0) value += (1.0 - beta) * frobenius(bundle.feature, coupling);
  if (beta != 0.0) value += beta * gw_term(bundle.query_geometry, bundle.candidate_geometry, coupling);
  return value;
}

namespace {

// Squared 2-Wasserstein distance between two weighted samples on the line,
// integrated over the merged quantile grid.
double w2_line(std::vector<std::pair<double, double>> a, std::vector<std::pair<double, double>> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::size_t i = 0, k = 0;
  double left_a = a[0].second, left_b = b[0].second, total = 0.0;
  while (i < a.size() && k < b.size()) {
    const double w = std::min(left_a, left_b);
    const double d = a[i].first - b[k].first;
    total += w * d * d;
    left_a -= w;
    left_b -= w;
    if (left_a <= 1e-15 && ++i < a.size()) left_a = a[i].second;
    if (left_b <= 1e-15 && ++k < b.size()) left_b = b[k].second;
  }
  return total;
}

// Lower-bound cost between points of the two spaces: how far apart their
// distance profiles are. Cheap, isometry invariant, and not separable, so it
// breaks the symmetry of the product coupling.
Matrix distance_profile_cost(const Matrix& A, const Matrix& B, const Vector& mu, const Vector& nu) {
  Matrix C(A.rows(), B.rows());
  std::vector<std::pair<double, double>> pa(static_cast<std::size_t>(A.rows()));
  std::vector<std::pair<double, double>> pb(static_cast<std::size_t>(B.rows()));
  for (Eigen::Index j = 0; j < A.rows(); ++j) {
    for (Eigen::Index x = 0; x < A.rows(); ++x) pa[static_cast<std::size_t>(x)] = {A(j, x), mu[x]};
    for (Eigen::Index l = 0; l < B.rows(); ++l) {
      for (Eigen::Index y = 0; y < B.rows(); ++y) pb[static_cast<std::size_t>(y)] = {B(l, y), nu[y]};
      C(j, l) = w2_line(pa, pb);
    }
  }
  return C;
}

// Exact optimal plan for uniform marginals: Hungarian on the cost replicated
// up to lcm(M, N) rows and columns. Returns nullopt when that gets too large.
std::optional<Matrix> exact_uniform_plan(const Matrix& cost) {
  const auto M = cost.rows();
  const auto N = cost.cols();
  const auto L = std::lcm(M, N);
  if (L > kMaxExactSeedSize) return std::nullopt;
  const auto rr = L / M;
  const auto rc = L / N;
  Matrix big(L, L);
  for (Eigen::Index i = 0; i < L; ++i)
    for (Eigen::Index k = 0; k < L; ++k) big(i, k) = cost(i / rr, k / rc);
  Matrix T = Matrix::Zero(M, N);
  for (const auto& [i, k] : hungarian(big).pairs) T(i / rr, k / rc) += 1.0 / static_cast<double>(L);
  return T;
}

FgwResult frank_wolfe(const CostBundle& bundle, const Vector& mu, const Vector& nu, const FwConfig& config,
                      Matrix T) {
  const double beta = config.beta;
  const Matrix& D = bundle.feature;
  const Matrix& A = bundle.query_geometry;
  const Matrix& B = bundle.candidate_geometry;
  const Matrix A2 = A.cwiseProduct(A);
  const Matrix B2 = B.cwiseProduct(B);
  const Matrix A2s = A2 + A2.transpose();
  const Matrix B2s = B2 + B2.transpose();
  const Eigen::RowVectorXd ones_n = Eigen::RowVectorXd::Ones(D.cols());
  const Vector ones_m = Vector::Ones(D.rows());

  FgwResult res;
  double F = fgw_objective(bundle, T, beta);
  res.objective_trace.push_back(F);

  for (int it = 1; it <= config.max_iters; ++it) {
    const Vector p = T.rowwise().sum();
    const Vector q = T.colwise().sum().transpose();
    const Matrix ATB = A * T * B.transpose();

    Matrix grad = (1.0 - beta) * D;
    if (beta != 0.0) {
      const Matrix gw_grad = (A2s * p) * ones_n + ones_m * (B2s * q).transpose() -
                             2.0 * (ATB + A.transpose() * T * B);
      grad += beta * gw_grad;
    }

    auto lmo = sinkhorn(grad, mu, nu, config.sinkhorn);
    if (lmo.warning) res.warnings.push_back(*lmo.warning);
    const Matrix& S = lmo.plan.coupling;
    const Matrix delta = S - T;

    // The objective along T + g * delta is a1 * g + a2 * g^2 (+ F).
    double a1 = (1.0 - beta) * frobenius(D, delta);
    double a2 = 0.0;
    if (beta != 0.0) {
      const Vector dp = delta.rowwise().sum();
      const Vector dq = delta.colwise().sum().transpose();
      const Matrix ADB = A * delta * B.transpose();
      a2 = beta * (dp.dot(A2 * dp) + dq.dot(B2 * dq) - 2.0 * frobenius(ADB, delta));
      a1 += beta * (dp.dot(A2s * p) + dq.dot(B2s * q) - 2.0 * frobenius(ADB, T) - 2.0 * frobenius(ATB, delta));
    }
    double step = 0.0;
    if (a2 > 0.0) {
      step = std::clamp(-a1 / (2.0 * a2), 0.0, 1.0);
    } else if (a1 + a2 < 0.0) {
      step = 1.0;
    }
    if (step == 0.0) break;

    Matrix next = step == 1.0 ? S : Matrix(T + step * delta);
    const double F_next = fgw_objective(bundle, next, beta);
    if (!std::isfinite(F_next) || F_next > F) break;

    const double change = F - F_next;
    T = std::move(next);
    res.iterations = it;
    res.objective_trace.push_back(F_next);
    const double scale = std::abs(F);
    F = F_next;
    if (change <= config.rel_tol * scale || F == 0.0) break;
  }

  res.cost = F;
  res.plan = TransportPlan{std::move(T), mu, nu};
  return res;
}

}  // namespace

FgwResult fgw_solve(const CostBundle& bundle, const Vector& mu, const Vector& nu, const FwConfig& config) {
  const double beta = config.beta;
  if (!(beta >= 0.0 && beta <= 1.0)) fail(ErrorKind::Usage, "beta must lie in [0, 1]");
  if (config.max_iters < 1 || !(config.rel_tol > 0.0)) fail(ErrorKind::Usage, "bad Frank-Wolfe settings");
  const Matrix& D = bundle.feature;
  const Matrix& A = bundle.query_geometry;
  const Matrix& B = bundle.candidate_geometry;
  if (D.rows() != mu.size() || D.cols() != nu.size() || A.rows() != D.rows() || B.rows() != D.cols()) {
    fail(ErrorKind::Usage, "cost bundle and marginals disagree in shape");
  }
  check_marginal(mu, "row");
  check_marginal(nu, "column");

  auto res = frank_wolfe(bundle, mu, nu, config, mu * nu.transpose());
  // With a structural term the product coupling is a stationary point or
  // close to one (the GW gradient there is separable), so FW stalls in a
  // blurred plan. Run a second pass from a vertex plan seeded by the distance
  // profiles and keep the better result. The seed must be a hard plan:
  // profiles can tie exactly, and any smoothing would land back on the
  // product coupling.
  const bool uniform = (mu.array() == mu[0]).all() && (nu.array() == nu[0]).all();
  if (beta != 0.0 && res.cost > 0.0 && uniform) {
    const Matrix seed_cost = (1.0 - beta) * D + beta * distance_profile_cost(A, B, mu, nu);
    if (auto seed = exact_uniform_plan(seed_cost)) {
      auto alt = frank_wolfe(bundle, mu, nu, config, std::move(*seed));
      if (alt.cost < res.cost) res = std::move(alt);
    }
  }
  return res;
}

double gw_distance(const std::vector<Vector>& cloud_a, const std::vector<Vector>& cloud_b, const FwConfig& config) {
  if (cloud_a.empty() || cloud_b.empty()) fail(ErrorKind::Usage, "gw_distance needs nonempty clouds");
  CostBundle b;
  b.query_geometry = cosine_distance_matrix(cloud_a);
  b.candidate_geometry = cosine_distance_matrix(cloud_b);
  b.feature = Matrix::Zero(b.query_geometry.rows(), b.candidate_geometry.rows());
  FwConfig cfg = config;
  cfg.beta = 1.0;
  return fgw_solve(b, uniform_marginal(b.feature.rows()), uniform_marginal(b.feature.cols()), cfg).cost;
}

std::string format_plan(const TransportPlan& plan) {
  std::string out;
  char buf[32];
  for (Eigen::Index j = 0; j < plan.coupling.rows(); ++j) {
    for (Eigen::Index l = 0; l < plan.coupling.cols(); ++l) {
      std::snprintf(buf, sizeof buf, "%.17g", plan.coupling(j, l));
      if (l) out += ' ';
      out += buf;
    }
    out += '\n';
  }
  return out;
}

}  // namespace nbra::ot
