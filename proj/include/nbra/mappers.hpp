#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace nbra {

/// Affine map fitted by ridge regression. `weights` is (d_in + 1) x d_out with
/// the bias in the last row.
struct RidgeMapper {
  Eigen::MatrixXd weights;
  double lambda = 0.0;

  Eigen::Index d_in() const { return weights.rows() - 1; }
  Eigen::Index d_out() const { return weights.cols(); }
};

/// Closed-form minimizer of ||[X 1] W - Y||^2 + lambda ||W_{0..d_in-1}||^2.
/// The bias row is not penalized.
RidgeMapper fit_ridge(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, double lambda);

Eigen::VectorXd apply_mapper(const RidgeMapper& mapper, const Eigen::VectorXd& v);
Eigen::MatrixXd apply_mapper_rows(const RidgeMapper& mapper, const Eigen::MatrixXd& X);

/// 100 * (1 - mean ||map(x_i) - y_i|| / mean ||x_i - y_i||).
double distance_reduction(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, const RidgeMapper& mapper);

void save_mapper(const RidgeMapper& mapper, const std::filesystem::path& weights_path,
                 const std::filesystem::path& meta_path);
RidgeMapper load_mapper(const std::filesystem::path& weights_path, const std::filesystem::path& meta_path);

struct SteeringVector {
  Eigen::VectorXd direction;  // unit norm
  std::string source_label;
  std::string target_label;
  std::optional<std::string> noun_scope;
};

/// (target - source) / ||target - source||.
SteeringVector steering_vector(const Eigen::VectorXd& source, const Eigen::VectorXd& target,
                               std::string source_label = {}, std::string target_label = {},
                               std::optional<std::string> noun_scope = std::nullopt);

/// Mean of per-noun directions, renormalized.
SteeringVector global_steering_vector(std::span<const SteeringVector> local, std::string source_label,
                                      std::string target_label);

/// normalize(q + alpha * direction). alpha == 0 returns q untouched.
Eigen::VectorXd apply_steering(const Eigen::VectorXd& q, const SteeringVector& v, double alpha);

void save_steering(const SteeringVector& v, const std::filesystem::path& meta_path,
                   const std::filesystem::path& vector_path);
SteeringVector load_steering(const std::filesystem::path& meta_path, const std::filesystem::path& vector_path);

Eigen::VectorXd merge_average(std::span<const Eigen::VectorXd> vectors);

struct MergeStrategy {
  enum class Kind { Average, Min, Softmin };
  Kind kind = Kind::Min;
  double tau = 1.0;
};

/// Score-level aggregation; `Average` is vector-level and rejected here.
double aggregate_scores(std::span<const double> scores, const MergeStrategy& strategy);

}  // namespace nbra
