#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "nbra/embedding_store.hpp"
#include "nbra/ranking.hpp"
#include "nbra/synthshapes.hpp"

namespace nbra::metrics {

enum class GradeKind { Graded04, Continuous01 };

std::string to_string(GradeKind k);
GradeKind parse_grade_kind(const std::string& s);

/// Sparse (query_id, item_id) -> relevance. Absent pairs count as 0.
class RelevanceTable {
 public:
  explicit RelevanceTable(GradeKind kind = GradeKind::Graded04) : kind_(kind) {}

  GradeKind kind() const noexcept { return kind_; }
  /// Validates the value against the table kind.
  void set(const std::string& query_id, const std::string& item_id, double value);
  std::optional<double> get(const std::string& query_id, const std::string& item_id) const;
  std::size_t size() const noexcept { return entries_.size(); }
  const std::map<std::pair<std::string, std::string>, double>& entries() const noexcept { return entries_; }

 private:
  GradeKind kind_;
  std::map<std::pair<std::string, std::string>, double> entries_;
};

/// Relevance file: one JSON record per line with query_id, item_id, and
/// either value + kind, relevance_score (graded), or confidence (continuous).
RelevanceTable read_relevance(const std::filesystem::path& path);
void write_relevance(const RelevanceTable& table, const std::filesystem::path& path);

/// Which items count as positives for each query. Every kind is resolved
/// against the corpus up front into explicit id sets.
class PositivesPredicate {
 public:
  enum class Kind { ExactCaption, SymbolicMatch, SynonymSet, ListedIds };

  struct SynonymQuery {
    std::string noun;
    std::set<std::string> synonyms;  // acceptable attribute values
  };

  static PositivesPredicate exact_caption(const std::vector<ItemRecord>& queries,
                                          const std::vector<ItemRecord>& corpus);
  /// Positive iff the item's object multiset equals the query's, comparing
  /// (sorted attributes, noun) tuples.
  static PositivesPredicate symbolic_match(const std::vector<ItemRecord>& queries,
                                           const std::vector<ItemRecord>& corpus);
  /// Positive iff the item has an object with the query noun carrying any
  /// attribute from the synonym list.
  static PositivesPredicate synonym_set(const std::map<std::string, SynonymQuery>& queries,
                                        const std::vector<ItemRecord>& corpus);
  static PositivesPredicate listed_ids(std::map<std::string, std::set<std::string>> positives);

  Kind kind() const noexcept { return kind_; }
  bool has_positives(const std::string& query_id) const;
  bool is_positive(const std::string& query_id, const std::string& item_id) const;

 private:
  PositivesPredicate(Kind kind, std::map<std::string, std::set<std::string>> positives)
      : kind_(kind), positives_(std::move(positives)) {}

  Kind kind_;
  std::map<std::string, std::set<std::string>> positives_;
};

/// Coverage bookkeeping reported next to each metric.
struct Tally {
  std::size_t queries = 0;        // queries that contributed
  std::size_t excluded = 0;       // queries with no defined positives
  std::size_t missing_pairs = 0;  // relevance lookups that defaulted to 0
};

double recall_at_k(const std::vector<RankedList>& results, const PositivesPredicate& positives, std::size_t K,
                   Tally* tally = nullptr);

/// Mean over queries of the mean similarity across the top-k window.
double cas(const std::vector<RankedList>& results, const RelevanceTable& relevance, std::size_t k,
           Tally* tally = nullptr);

/// An object as a comparable tuple: sorted attributes followed by the noun.
using ObjectTuple = std::vector<std::string>;
ObjectTuple tuple_of(const ObjectAnnotation& o);

using QueryObjects = std::unordered_map<std::string, std::vector<ObjectTuple>>;
using ItemTuples = std::unordered_map<std::string, std::set<ObjectTuple>>;

QueryObjects query_objects_of(const std::vector<ItemRecord>& items);
ItemTuples item_tuples_of(const std::vector<ItemRecord>& items);

/// Fraction of query object tuples found verbatim in each retrieved item,
/// averaged over the top-K, then over queries.
double cas_noun(const std::vector<RankedList>& results, const QueryObjects& query_objects,
                const ItemTuples& item_tuples, std::size_t K);

/// Attribute-level counterpart of cas_noun: per query object, the fraction of
/// its elements (attributes and noun) present anywhere in the item.
double cas_attribute(const std::vector<RankedList>& results, const QueryObjects& query_objects,
                     const ItemTuples& item_tuples, std::size_t K);

/// Mean nDCG@K with IDCG over the same retrieved grades; IDCG = 0 gives 0.
double ndcg_at_k(const std::vector<RankedList>& results, const RelevanceTable& relevance, std::size_t K,
                 Tally* tally = nullptr);

using CompositionMap = std::unordered_map<std::string, shapes::Composition>;

/// Graded table materialized only for the (query, retrieved item) pairs.
RelevanceTable build_heuristic_relevance(const std::vector<RankedList>& results, const CompositionMap& queries,
                                         const CompositionMap& items);
/// Continuous overlap fraction for the same pairs, used as the symbolic CAS similarity.
RelevanceTable build_heuristic_similarity(const std::vector<RankedList>& results, const CompositionMap& queries,
                                          const CompositionMap& items);

struct MetricsReport {
  std::size_t n_queries = 0;
  /// nullopt marks a depth the ranking does not support ("---").
  std::map<std::size_t, std::optional<double>> recall;
  std::map<std::size_t, std::optional<double>> ndcg;
  std::optional<double> cas;
  std::optional<double> cas_noun;
  std::size_t cas_k = 0;
  std::size_t recall_excluded = 0;
  std::size_t relevance_missing = 0;

  bool operator==(const MetricsReport&) const = default;
};

struct EvalInputs {
  const PositivesPredicate* positives = nullptr;
  const RelevanceTable* graded = nullptr;      // for nDCG
  const RelevanceTable* similarity = nullptr;  // for CAS
  const QueryObjects* query_objects = nullptr;
  const ItemTuples* item_tuples = nullptr;
  std::vector<std::size_t> ks = {1, 5, 10};
  std::size_t cas_k = 10;
};

/// Runs every metric whose inputs are present. Depths beyond a list's
/// meaningful_depth are reported as nullopt.
MetricsReport evaluate(const std::vector<RankedList>& results, const EvalInputs& inputs);

/// Structured report text (JSON) including the IDCG = 0 convention and tallies.
std::string format_report(const MetricsReport& report);

/// Neumaier-compensated running sum.
class CompensatedSum {
 public:
  void add(double x);
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

}  // namespace nbra::metrics
