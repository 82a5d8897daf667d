#include "nbra/mappers.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "nbra/embedding_store.hpp"
#include "nbra/error.hpp"
#include "nbra/io.hpp"

namespace nbra {

using json = nlohmann::json;

RidgeMapper fit_ridge(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, double lambda) {
  const Eigen::Index n = X.rows();
  const Eigen::Index d_in = X.cols();
  if (n < 1) fail(ErrorKind::Usage, "ridge fit needs at least one sample");
  if (Y.rows() != n) fail(ErrorKind::Usage, "X and Y row counts differ");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) fail(ErrorKind::Usage, "lambda must be finite and >= 0");
  if (lambda == 0.0 && n < d_in + 1) {
    fail(ErrorKind::Degenerate, "rank-deficient ridge system (n = " + std::to_string(n) +
                                    " < d_in + 1); use lambda > 0");
  }

  Eigen::MatrixXd Xa(n, d_in + 1);
  Xa.leftCols(d_in) = X;
  Xa.col(d_in).setOnes();

  Eigen::MatrixXd gram = Xa.transpose() * Xa;
  gram.diagonal().head(d_in).array() += lambda;
  const Eigen::MatrixXd rhs = Xa.transpose() * Y;

  Eigen::LLT<Eigen::MatrixXd> llt(gram);
  const auto& L = llt.matrixL();
  bool ok = llt.info() == Eigen::Success;
  if (ok) {
    // A numerically singular Gram matrix can still factor with tiny pivots.
    const Eigen::VectorXd diag = Eigen::MatrixXd(L).diagonal();
    ok = diag.minCoeff() > 1e-7 * diag.maxCoeff();
  }
  if (!ok) fail(ErrorKind::Degenerate, "rank-deficient ridge system; use lambda > 0");

  return RidgeMapper{llt.solve(rhs), lambda};
}

Eigen::VectorXd apply_mapper(const RidgeMapper& mapper, const Eigen::VectorXd& v) {
  if (v.size() != mapper.d_in()) {
    fail(ErrorKind::Usage, "mapper expects dim " + std::to_string(mapper.d_in()) + ", got " +
                               std::to_string(v.size()));
  }
  return mapper.weights.topRows(mapper.d_in()).transpose() * v + mapper.weights.row(mapper.d_in()).transpose();
}

Eigen::MatrixXd apply_mapper_rows(const RidgeMapper& mapper, const Eigen::MatrixXd& X) {
  if (X.cols() != mapper.d_in()) fail(ErrorKind::Usage, "mapper input dim mismatch");
  Eigen::MatrixXd out = X * mapper.weights.topRows(mapper.d_in());
  out.rowwise() += mapper.weights.row(mapper.d_in());
  return out;
}

double distance_reduction(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, const RidgeMapper& mapper) {
  if (X.rows() != Y.rows() || X.rows() == 0) fail(ErrorKind::Usage, "distance reduction needs paired rows");
  if (X.cols() != Y.cols()) fail(ErrorKind::Usage, "baseline distance needs X and Y in the same space");
  const Eigen::MatrixXd mapped = apply_mapper_rows(mapper, X);
  const double baseline = (X - Y).rowwise().norm().mean();
  if (baseline == 0.0) fail(ErrorKind::Degenerate, "baseline distance is zero; reduction undefined");
  const double after = (mapped - Y).rowwise().norm().mean();
  return 100.0 * (1.0 - after / baseline);
}

void save_mapper(const RidgeMapper& mapper, const std::filesystem::path& weights_path,
                 const std::filesystem::path& meta_path) {
  write_matrix64(mapper.weights, weights_path);
  json meta{{"lambda", mapper.lambda}, {"d_in", mapper.d_in()}, {"d_out", mapper.d_out()}};
  io::write_text_atomic(meta_path, meta.dump(2) + "\n");
}

RidgeMapper load_mapper(const std::filesystem::path& weights_path, const std::filesystem::path& meta_path) {
  RidgeMapper m;
  m.weights = read_matrix64(weights_path);
  const auto meta = json::parse(io::read_text(meta_path));
  m.lambda = meta.at("lambda").get<double>();
  if (meta.at("d_in").get<Eigen::Index>() != m.d_in() || meta.at("d_out").get<Eigen::Index>() != m.d_out()) {
    fail(ErrorKind::Validation, "mapper metadata does not match weight shape");
  }
  return m;
}

SteeringVector steering_vector(const Eigen::VectorXd& source, const Eigen::VectorXd& target,
                               std::string source_label, std::string target_label,
                               std::optional<std::string> noun_scope) {
  if (source.size() != target.size()) fail(ErrorKind::Usage, "steering endpoints differ in dim");
  const Eigen::VectorXd diff = target - source;
  const double n = diff.norm();
  if (n == 0.0) fail(ErrorKind::Degenerate, "steering endpoints coincide; zero direction");
  return SteeringVector{diff / n, std::move(source_label), std::move(target_label), std::move(noun_scope)};
}

SteeringVector global_steering_vector(std::span<const SteeringVector> local, std::string source_label,
                                      std::string target_label) {
  if (local.empty()) fail(ErrorKind::Usage, "global steering needs at least one local direction");
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(local.front().direction.size());
  for (const auto& v : local) {
    if (v.direction.size() != sum.size()) fail(ErrorKind::Usage, "local directions differ in dim");
    sum += v.direction;
  }
  const double n = sum.norm();
  if (n == 0.0) fail(ErrorKind::Degenerate, "local steering directions cancel out");
  return SteeringVector{sum / n, std::move(source_label), std::move(target_label), std::nullopt};
}

Eigen::VectorXd apply_steering(const Eigen::VectorXd& q, const SteeringVector& v, double alpha) {
  if (q.size() != v.direction.size()) fail(ErrorKind::Usage, "steering dim mismatch");
  if (alpha == 0.0) return q;
  const Eigen::VectorXd s = q + alpha * v.direction;
  const double n = s.norm();
  if (n == 0.0) fail(ErrorKind::Degenerate, "steered query is the zero vector");
  return s / n;
}

void save_steering(const SteeringVector& v, const std::filesystem::path& meta_path,
                   const std::filesystem::path& vector_path) {
  json j{{"source_label", v.source_label}, {"target_label", v.target_label}};
  j["noun_scope"] = v.noun_scope ? json(*v.noun_scope) : json(nullptr);
  io::write_text_atomic(meta_path, j.dump() + "\n");
  write_embeddings(EmbeddingMatrix::from_rows({v.direction}, true), vector_path);
}

SteeringVector load_steering(const std::filesystem::path& meta_path, const std::filesystem::path& vector_path) {
  const auto lines = io::split_lines(io::read_text(meta_path));
  if (lines.size() != 1) fail(ErrorKind::Validation, "steering metadata must be a single record");
  const auto j = json::parse(lines.front());
  const auto m = read_embeddings(vector_path);
  if (m.count() != 1) fail(ErrorKind::Validation, "steering vector file must hold exactly one row");
  Eigen::VectorXd dir = m.row_vector(0);
  if (dir.norm() == 0.0) fail(ErrorKind::Degenerate, "stored steering direction is zero");
  SteeringVector v{dir / dir.norm(), j.at("source_label").get<std::string>(),
                   j.at("target_label").get<std::string>(), std::nullopt};
  if (j.contains("noun_scope") && j["noun_scope"].is_string()) v.noun_scope = j["noun_scope"].get<std::string>();
  return v;
}

Eigen::VectorXd merge_average(std::span<const Eigen::VectorXd> vectors) {
  if (vectors.empty()) fail(ErrorKind::Usage, "merge of an empty list");
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(vectors.front().size());
  for (const auto& v : vectors) {
    if (v.size() != sum.size()) fail(ErrorKind::Usage, "merged vectors differ in dim");
    sum += v;
  }
  sum /= static_cast<double>(vectors.size());
  const double n = sum.norm();
  if (n == 0.0) fail(ErrorKind::Degenerate, "merged mean is the zero vector");
  return sum / n;
}

double aggregate_scores(std::span<const double> scores, const MergeStrategy& strategy) {
  if (scores.empty()) fail(ErrorKind::Usage, "aggregate of an empty score list");
  const double lo = *std::min_element(scores.begin(), scores.end());
  switch (strategy.kind) {
    case MergeStrategy::Kind::Min:
      return lo;
    case MergeStrategy::Kind::Softmin: {
      if (!(strategy.tau > 0.0)) fail(ErrorKind::Usage, "softmin temperature must be positive");
      // Shifting by the minimum keeps every exponent <= 0.
      double wsum = 0.0;
      double acc = 0.0;
      for (double s : scores) {
        const double w = std::exp(-(s - lo) / strategy.tau);
        wsum += w;
        acc += w * s;
      }
      const double hi = *std::max_element(scores.begin(), scores.end());
      return std::clamp(acc / wsum, lo, hi);
    }
    case MergeStrategy::Kind::Average:
      break;
  }
  fail(ErrorKind::Usage, "average merging is vector-level; use merge_average");
}

}  // namespace nbra
