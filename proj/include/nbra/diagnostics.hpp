#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nbra/embedding_store.hpp"
#include "nbra/mappers.hpp"
#include "nbra/metrics.hpp"
#include "nbra/ot_core.hpp"
#include "nbra/ranking.hpp"
#include "nbra/retrieval.hpp"

namespace nbra::diag {

/// Pearson r between the upper-triangular cosine distances of two clouds
/// (rows are points, paired row-for-row). With `subset`, only pairs inside
/// the subset contribute.
double distance_correlation(const Eigen::MatrixXd& cloud_a, const Eigen::MatrixXd& cloud_b,
                            const std::optional<std::vector<std::size_t>>& subset = std::nullopt);

/// Rows whose annotation has an object with the given noun.
std::vector<std::size_t> subset_with_noun(const std::vector<ItemRecord>& items, const std::string& noun);

struct MapperStructureReport {
  /// nullopt when X and Y already coincide (zero baseline distance).
  std::optional<double> distance_reduction;
  double gw_before = 0.0;
  double gw_after = 0.0;
};

MapperStructureReport mapper_structure_report(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                                              const RidgeMapper& mapper, const ot::FwConfig& config);

std::string format_mapper_report(const MapperStructureReport& r);

enum class SweepAxis { K, Alpha };

struct RankTrajectory {
  std::string query_id;
  /// One entry per grid point; nullopt when the truth item fell outside the list.
  std::vector<std::optional<std::size_t>> ranks;
};

struct SweepResult {
  SweepAxis axis = SweepAxis::K;
  std::vector<double> grid;
  std::vector<RankTrajectory> trajectories;    // k sweeps
  std::vector<metrics::MetricsReport> reports;  // alpha sweeps
};

/// Runs the pipeline once per k and records the rank of each query's truth item.
SweepResult k_sweep(const Corpus& queries, const Corpus& corpus, const PipelineConfig& base,
                    const std::vector<std::size_t>& k_grid, const std::map<std::string, std::string>& truth,
                    const RidgeMapper* mapper, const PerObjectSources* sources);

using Evaluator = std::function<metrics::MetricsReport(const std::vector<RankedList>&)>;

/// Runs ridge_plus_steer at each alpha and evaluates it. The grid must contain
/// 0, where steering is the identity and the point equals the unsteered run.
SweepResult alpha_sweep(const Corpus& queries, const Corpus& corpus, const PipelineConfig& base,
                        const SteeringVector& steering, const std::vector<double>& alpha_grid,
                        const RidgeMapper& mapper, const PerObjectSources* sources, const Evaluator& evaluate);

/// Header row plus one row per (grid point, query) or (grid point, metric).
std::string format_sweep_tsv(const SweepResult& sweep);

struct SlotCounts {
  std::size_t improved = 0;
  std::size_t degraded = 0;
  std::size_t unchanged = 0;

  std::size_t total() const { return improved + degraded + unchanged; }
  bool operator==(const SlotCounts&) const = default;
};

struct InterferenceReport {
  std::size_t n_queries = 0;
  /// Per attribute kind, plus "noun"; a slot is one (object, kind) pair.
  std::map<std::string, SlotCounts> per_kind;
  std::size_t queries_with_degradation = 0;
  std::size_t queries_with_improvement = 0;
  /// Mean count of degraded slots among queries with any improvement.
  double mean_degraded_given_improvement = 0.0;
  /// co_degradation[a][b]: among queries where a kind-a slot improved, the
  /// fraction in which some kind-b slot degraded.
  std::map<std::string, std::map<std::string, double>> co_degradation;
};

/// Compares slot correctness of the top-1 item between a baseline and a
/// treated run. A slot is correct when the top-1 item has an object with the
/// same noun carrying the same value for that kind.
InterferenceReport interference_report(const std::vector<ItemRecord>& queries,
                                       const std::vector<RankedList>& baseline,
                                       const std::vector<RankedList>& treated, const Corpus& corpus);

std::string format_interference_tsv(const InterferenceReport& r);

}  // namespace nbra::diag
