#include <doctest.h>

#include <algorithm>

#include "nbra/error.hpp"
#include "nbra/mappers.hpp"
#include "nbra/ot_core.hpp"
#include "oracles.hpp"

using namespace nbra;

namespace {

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an nbra::Error");
  return ErrorKind::Usage;
}

Eigen::MatrixXd gaussian(std::mt19937_64& g, int rows, int cols) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = n(g);
  return m;
}

Eigen::MatrixXd unit_rows(Eigen::MatrixXd m) {
  m.rowwise().normalize();
  return m;
}

double residual(const RidgeMapper& m, const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) {
  return (apply_mapper_rows(m, X) - Y).norm();
}

Eigen::VectorXd basis(int dim, int i) { return Eigen::VectorXd::Unit(dim, i); }

}  // namespace

TEST_CASE("identity recovery") {
  auto g = oracle::rng(1);
  const Eigen::MatrixXd X = gaussian(g, 40, 6);
  const auto m = fit_ridge(X, X, 1e-8);
  CHECK((apply_mapper_rows(m, X) - X).cwiseAbs().maxCoeff() <= 1e-5);
  const Eigen::VectorXd v = gaussian(g, 6, 1);
  CHECK((apply_mapper(m, v) - v).cwiseAbs().maxCoeff() <= 1e-5);
}

TEST_CASE("affine relation matches the Gaussian-elimination oracle") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto g = oracle::rng(seed);
    const Eigen::MatrixXd X = gaussian(g, 50, 5);
    const Eigen::MatrixXd A = gaussian(g, 5, 4);
    const Eigen::RowVectorXd b = gaussian(g, 1, 4);
    Eigen::MatrixXd Y = X * A;
    Y.rowwise() += b;
    const auto m = fit_ridge(X, Y, 1e-8);
    CHECK((m.weights.topRows(5) - A).cwiseAbs().maxCoeff() <= 1e-4);
    CHECK((m.weights.row(5) - b).cwiseAbs().maxCoeff() <= 1e-4);
    CHECK((m.weights - oracle::ridge_weights(X, Y, 1e-8)).cwiseAbs().maxCoeff() <= 1e-8);
  }
}

TEST_CASE("lambda = 0 equals least squares on noisy tall data") {
  auto g = oracle::rng(9);
  const Eigen::MatrixXd X = gaussian(g, 60, 7);
  const Eigen::MatrixXd Y = gaussian(g, 60, 3);
  const auto m = fit_ridge(X, Y, 0.0);
  CHECK((m.weights - oracle::ridge_weights(X, Y, 0.0)).cwiseAbs().maxCoeff() <= 1e-8);
  // Penalized fits agree with the oracle too.
  for (double lambda : {0.1, 3.0, 100.0})
    CHECK((fit_ridge(X, Y, lambda).weights - oracle::ridge_weights(X, Y, lambda)).cwiseAbs().maxCoeff() <= 1e-8);
}

TEST_CASE("rank deficiency and bad inputs") {
  Eigen::MatrixXd X(1, 2);
  X << 1, 2;
  Eigen::MatrixXd Y(1, 1);
  Y << 3;
  CHECK(kind_of([&] { fit_ridge(X, Y, 0.0); }) == ErrorKind::Degenerate);
  CHECK_NOTHROW(fit_ridge(X, Y, 0.5));

  // Tall but with a duplicated column.
  auto g = oracle::rng(2);
  Eigen::MatrixXd Xd = gaussian(g, 20, 3);
  Xd.col(2) = Xd.col(1);
  CHECK(kind_of([&] { fit_ridge(Xd, gaussian(g, 20, 2), 0.0); }) == ErrorKind::Degenerate);

  CHECK(kind_of([&] { fit_ridge(gaussian(g, 4, 2), gaussian(g, 5, 2), 1.0); }) == ErrorKind::Usage);
  CHECK(kind_of([&] { fit_ridge(gaussian(g, 4, 2), gaussian(g, 4, 2), -1.0); }) == ErrorKind::Usage);
  const auto m = fit_ridge(gaussian(g, 10, 2), gaussian(g, 10, 2), 1.0);
  CHECK(kind_of([&] { apply_mapper(m, Eigen::VectorXd::Zero(3)); }) == ErrorKind::Usage);
}

TEST_CASE("residual is nondecreasing in lambda") {
  auto g = oracle::rng(4);
  const Eigen::MatrixXd X = gaussian(g, 30, 8);
  const Eigen::MatrixXd Y = gaussian(g, 30, 5);
  double prev = 0.0;
  for (double lambda : {0.0, 1e-4, 1e-2, 0.1, 1.0, 10.0, 100.0, 1e4}) {
    const double r = residual(fit_ridge(X, Y, lambda), X, Y);
    CHECK(r >= prev - 1e-10);
    prev = r;
  }
}

TEST_CASE("bias isolation and batch apply") {
  auto g = oracle::rng(5);
  const Eigen::MatrixXd X = gaussian(g, 30, 4);
  const Eigen::MatrixXd Y = gaussian(g, 30, 3);
  const auto m = fit_ridge(X, Y, 0.3);
  CHECK((apply_mapper(m, Eigen::VectorXd::Zero(4)) - m.weights.row(4).transpose()).norm() == 0.0);
  const auto batch = apply_mapper_rows(m, X);
  for (int i = 0; i < X.rows(); ++i)
    CHECK((batch.row(i).transpose() - apply_mapper(m, X.row(i).transpose())).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("distance reduction") {
  auto g = oracle::rng(6);
  const Eigen::MatrixXd X = unit_rows(gaussian(g, 80, 6));

  // Constant shift, bias-only mapper.
  Eigen::RowVectorXd c = gaussian(g, 1, 6);
  Eigen::MatrixXd shifted = X;
  shifted.rowwise() += c;
  RidgeMapper bias_only{Eigen::MatrixXd::Zero(7, 6), 0.0};
  bias_only.weights.topRows(6).setIdentity();
  bias_only.weights.row(6) = c;
  CHECK(distance_reduction(X, shifted, bias_only) == doctest::Approx(100.0).epsilon(1e-12));

  // Noise-free linear relation.
  const Eigen::MatrixXd A = gaussian(g, 6, 6);
  const Eigen::MatrixXd Y = X * A;
  CHECK(distance_reduction(X, Y, fit_ridge(X, Y, 1e-8)) >= 99.0);

  // Untrained mapper on unit-norm data: direct evaluation oracle.
  const Eigen::MatrixXd Yu = unit_rows(gaussian(g, 80, 6));
  const RidgeMapper zero{Eigen::MatrixXd::Zero(7, 6), 0.0};
  double before = 0, after = 0;
  for (int i = 0; i < 80; ++i) {
    before += (X.row(i) - Yu.row(i)).norm();
    after += Yu.row(i).norm();
  }
  const double expected = 100.0 * (1.0 - after / before);
  CHECK(distance_reduction(X, Yu, zero) == doctest::Approx(expected).epsilon(1e-12));
  // Random unit pairs sit about sqrt(2) apart and the zero map leaves distance 1,
  // so the oracle lands near 1 - 1/sqrt(2), not at or below zero.
  CHECK(expected == doctest::Approx(100.0 * (1.0 - 1.0 / std::sqrt(2.0))).epsilon(0.15));

  CHECK(kind_of([&] { distance_reduction(X, X, fit_ridge(X, X, 1e-8)); }) == ErrorKind::Degenerate);
}

TEST_CASE("rotation: near-total reduction and gw invariance") {
  auto g = oracle::rng(8);
  const int d = 8;
  const Eigen::MatrixXd X = unit_rows(gaussian(g, 40, d));
  const Eigen::MatrixXd Q = oracle::orthogonal(g, d);
  const Eigen::MatrixXd Y = X * Q;
  CHECK(distance_reduction(X, Y, fit_ridge(X, Y, 1e-8)) >= 99.0);

  std::vector<Eigen::VectorXd> xs, ys;
  for (int i = 0; i < 12; ++i) {
    xs.push_back(X.row(i).transpose());
    ys.push_back(Y.row(i).transpose());
  }
  const Eigen::MatrixXd DX = oracle::distance_matrix(xs);
  const Eigen::MatrixXd DY = oracle::distance_matrix(ys);
  CHECK((DX - DY).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("mapper serialization") {
  oracle::TempDir dir("mapper");
  auto g = oracle::rng(10);
  const auto m = fit_ridge(gaussian(g, 20, 3), gaussian(g, 20, 2), 0.7);
  save_mapper(m, dir / "w.nbra", dir / "w.json");
  const auto back = load_mapper(dir / "w.nbra", dir / "w.json");
  CHECK(back.weights == m.weights);
  CHECK(back.lambda == m.lambda);
}

TEST_CASE("steering vector construction") {
  const auto e1 = basis(4, 0), e2 = basis(4, 1);
  const auto v = steering_vector(e1, e2, "a", "b", "cube");
  CHECK((v.direction - (e2 - e1) / std::sqrt(2.0)).norm() <= 1e-15);
  CHECK(v.noun_scope == std::optional<std::string>("cube"));
  CHECK((steering_vector(e2, e1).direction + v.direction).norm() == 0.0);
  CHECK(kind_of([&] { steering_vector(e1, e1); }) == ErrorKind::Degenerate);
}

TEST_CASE("apply steering") {
  auto g = oracle::rng(11);
  const auto q = oracle::unit_vector(g, 16);
  const auto v = steering_vector(oracle::unit_vector(g, 16), oracle::unit_vector(g, 16));
  CHECK((apply_steering(q, v, 0.0) - q).cwiseAbs().maxCoeff() <= 1e-7);
  CHECK(std::abs(apply_steering(q, v, 0.7).norm() - 1.0) <= 1e-12);

  // q orthogonal to the direction: cos = alpha / sqrt(1 + alpha^2).
  const SteeringVector d{basis(3, 2), "", "", std::nullopt};
  const Eigen::VectorXd qo = basis(3, 0);
  double prev = -1.0;
  for (double alpha : {0.0, 0.1, 0.5, 1.0, 2.0, 10.0, 100.0}) {
    const double cosv = apply_steering(qo, d, alpha).dot(d.direction);
    CHECK(cosv == doctest::Approx(alpha / std::sqrt(1 + alpha * alpha)).epsilon(1e-12));
    CHECK(cosv >= prev);
    prev = cosv;
  }

  const SteeringVector back{-basis(3, 0), "", "", std::nullopt};
  CHECK(kind_of([&] { apply_steering(qo, back, 1.0); }) == ErrorKind::Degenerate);
}

TEST_CASE("steered ranking ignores renormalization") {
  auto g = oracle::rng(12);
  const auto items = oracle::unit_vectors(g, 30, 8);
  const auto q = oracle::unit_vector(g, 8);
  const auto v = steering_vector(oracle::unit_vector(g, 8), oracle::unit_vector(g, 8));
  const Eigen::VectorXd raw = q + 0.8 * v.direction;
  const Eigen::VectorXd unit = apply_steering(q, v, 0.8);
  auto order = [&](const Eigen::VectorXd& x) {
    std::vector<int> idx(30);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
      return items[a].dot(x) / x.norm() > items[b].dot(x) / x.norm();
    });
    return idx;
  };
  CHECK(order(raw) == order(unit));
}

TEST_CASE("global steering and merge average are permutation invariant") {
  auto g = oracle::rng(13);
  std::vector<SteeringVector> local;
  for (int i = 0; i < 5; ++i) local.push_back(steering_vector(oracle::unit_vector(g, 6), oracle::unit_vector(g, 6)));
  const auto fwd = global_steering_vector(local, "s", "t");
  std::reverse(local.begin(), local.end());
  const auto rev = global_steering_vector(local, "s", "t");
  CHECK((fwd.direction - rev.direction).cwiseAbs().maxCoeff() <= 1e-15);
  CHECK(std::abs(fwd.direction.norm() - 1.0) <= 1e-12);

  auto vs = oracle::unit_vectors(g, 6, 5);
  const auto a = merge_average(vs);
  std::reverse(vs.begin(), vs.end());
  CHECK((a - merge_average(vs)).cwiseAbs().maxCoeff() <= 1e-15);
}

TEST_CASE("merge average examples") {
  const auto e1 = basis(3, 0), e2 = basis(3, 1);
  std::vector<Eigen::VectorXd> one{e1}, twin{e1, e1}, pair{e1, e2}, opposite{e1, -e1};
  CHECK((merge_average(one) - e1).norm() == 0.0);
  CHECK((merge_average(twin) - e1).norm() == 0.0);
  CHECK((merge_average(pair) - (e1 + e2) / std::sqrt(2.0)).norm() <= 1e-15);
  CHECK(kind_of([&] { merge_average(opposite); }) == ErrorKind::Degenerate);
  CHECK(kind_of([&] { merge_average(std::vector<Eigen::VectorXd>{}); }) == ErrorKind::Usage);
}

TEST_CASE("aggregate scores") {
  const std::vector<double> s{0.2, 0.8};
  CHECK(aggregate_scores(s, {MergeStrategy::Kind::Min, 1.0}) == 0.2);
  CHECK(aggregate_scores(s, {MergeStrategy::Kind::Softmin, 1e-4}) == doctest::Approx(0.2).epsilon(1e-9));
  const std::vector<double> same{0.37, 0.37};
  CHECK(aggregate_scores(same, {MergeStrategy::Kind::Softmin, 1.0}) == doctest::Approx(0.37).epsilon(1e-15));

  // Closed form at tau = 1.
  const double w0 = std::exp(-0.2), w1 = std::exp(-0.8);
  CHECK(aggregate_scores(s, {MergeStrategy::Kind::Softmin, 1.0}) ==
        doctest::Approx((0.2 * w0 + 0.8 * w1) / (w0 + w1)).epsilon(1e-14));

  CHECK(kind_of([&] { aggregate_scores(std::vector<double>{}, {}); }) == ErrorKind::Usage);
  CHECK(kind_of([&] { aggregate_scores(s, {MergeStrategy::Kind::Softmin, 0.0}); }) == ErrorKind::Usage);
  CHECK(kind_of([&] { aggregate_scores(s, {MergeStrategy::Kind::Average, 1.0}); }) == ErrorKind::Usage);
}

TEST_CASE("softmin stays within the score range") {
  auto g = oracle::rng(14);
  std::uniform_real_distribution<double> u(-5, 5);
  std::uniform_real_distribution<double> lt(-6, 3);
  for (int t = 0; t < 500; ++t) {
    std::vector<double> s(1 + t % 7);
    for (auto& x : s) x = u(g);
    const double tau = std::pow(10.0, lt(g));
    const double r = aggregate_scores(s, {MergeStrategy::Kind::Softmin, tau});
    CHECK(r >= *std::min_element(s.begin(), s.end()));
    CHECK(r <= *std::max_element(s.begin(), s.end()));
  }
}

TEST_CASE("steering serialization") {
  oracle::TempDir dir("steer");
  auto g = oracle::rng(15);
  const auto v = steering_vector(oracle::unit_vector(g, 8), oracle::unit_vector(g, 8), "cube", "red cube", "cube");
  save_steering(v, dir / "s.jsonl", dir / "s.nbra");
  const auto back = load_steering(dir / "s.jsonl", dir / "s.nbra");
  CHECK((back.direction - v.direction).cwiseAbs().maxCoeff() <= 1e-6);
  CHECK(std::abs(back.direction.norm() - 1.0) <= 1e-12);
  CHECK(back.source_label == "cube");
  CHECK(back.target_label == "red cube");
  CHECK(back.noun_scope == v.noun_scope);
}
