#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "nbra/embedding_store.hpp"
#include "nbra/mappers.hpp"
#include "nbra/ot_core.hpp"
#include "nbra/ranking.hpp"

namespace nbra {

/// Top-k prefix of a cosine ranking; the only items stage 2 may reorder.
struct Shortlist {
  std::string query_id;
  std::size_t k = 0;
  std::vector<RankedEntry> entries;
};

/// Per-object decomposition of a query or candidate: one unit vector per
/// annotated object, in annotation order.
struct PerObjectSet {
  std::string owner_id;
  std::vector<Eigen::VectorXd> vectors;
  std::vector<ObjectAnnotation> labels;
};

/// Phrase -> unit vector lookup built from precomputed phrase embeddings.
class PhraseTable {
 public:
  PhraseTable() = default;

  void insert(const std::string& phrase, const Eigen::VectorXd& v);
  const Eigen::VectorXd* find(const std::string& phrase) const;
  std::size_t size() const noexcept { return table_.size(); }
  bool empty() const noexcept { return table_.empty(); }

  /// Keys are item captions (falling back to ids) of the manifest rows.
  static PhraseTable from_corpus(const Corpus& corpus);

 private:
  std::unordered_map<std::string, Eigen::VectorXd> table_;
};

enum class Stage1 { Raw, RidgeMapped, RidgePlusSteer };
enum class Stage2 { None, Hungarian, Fgw };

Stage1 parse_stage1(const std::string& s);
Stage2 parse_stage2(const std::string& s);
std::string to_string(Stage1 s);
std::string to_string(Stage2 s);

struct Steering {
  SteeringVector vector;
  double alpha = 0.0;
};

struct PipelineConfig {
  Stage1 stage1 = Stage1::Raw;
  std::optional<Steering> steering;
  Stage2 stage2 = Stage2::None;
  std::size_t k = 50;
  ot::FwConfig fw;
  /// Hungarian scores tie heavily; when false, lists carry meaningful_depth = 1.
  bool hungarian_cosine_tiebreak = false;
  /// Worker threads for per-query work. Output order never depends on it.
  std::size_t jobs = 1;
};

/// Scores every corpus row by cosine with q and keeps the best K, ties broken
/// by ascending item id.
RankedList cosine_retrieve(const Eigen::VectorXd& q, const Corpus& corpus, std::size_t K,
                           const std::string& query_id = {});

Shortlist make_shortlist(const RankedList& ranked, std::size_t k);

PerObjectSet build_per_object_set(const ItemRecord& item, const PhraseTable& phrases);

using CandidateSets = std::unordered_map<std::string, PerObjectSet>;

RankedList rerank_hungarian(const Shortlist& shortlist, const PerObjectSet& query_set,
                            const CandidateSets& candidate_sets, bool cosine_tiebreak = false);

RankedList rerank_fgw(const Shortlist& shortlist, const PerObjectSet& query_set,
                      const CandidateSets& candidate_sets, const ot::FwConfig& config);

/// Per-object phrase embeddings for the two sides of a rerank.
struct PerObjectSources {
  PhraseTable query;
  PhraseTable candidate;
};

/// Stage 1 query transform: raw, mapped, or mapped then steered. Never
/// touches the corpus.
Eigen::VectorXd transform_query(const Eigen::VectorXd& q, const PipelineConfig& config,
                                const RidgeMapper* mapper);

/// Checks stage/mapper/steering consistency; throws Usage before any work.
void validate_pipeline(const PipelineConfig& config, const RidgeMapper* mapper, const PerObjectSources* sources);

std::vector<RankedList> run_pipeline(const Corpus& queries, const Corpus& corpus, const PipelineConfig& config,
                                     const RidgeMapper* mapper, const PerObjectSources* sources);

/// Composition baseline: each query's per-object vectors (optionally steered
/// per object, restricted by noun scope) are averaged into one vector and
/// scored by cosine against the whole corpus.
std::vector<RankedList> run_merged_queries(const Corpus& queries, const Corpus& corpus,
                                           const PhraseTable& query_phrases, std::size_t K,
                                           std::span<const Steering> per_object_steering = {},
                                           std::size_t jobs = 1);

/// Builds candidate sets for every corpus item that has object annotations.
CandidateSets build_candidate_sets(const Corpus& corpus, const PhraseTable& phrases);

}  // namespace nbra
