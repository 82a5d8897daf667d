#include "nbra/metrics.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "nbra/error.hpp"
#include "nbra/io.hpp"

namespace nbra::metrics {

using json = nlohmann::json;

void CompensatedSum::add(double x) {
  const double t = sum_ + x;
  if (std::abs(sum_) >= std::abs(x)) {
    comp_ += (sum_ - t) + x;
  } else {
    comp_ += (x - t) + sum_;
  }
  sum_ = t;
}

std::string to_string(GradeKind k) {
  return k == GradeKind::Graded04 ? "graded_0_4" : "continuous_0_1";
}

GradeKind parse_grade_kind(const std::string& s) {
  if (s == "graded_0_4") return GradeKind::Graded04;
  if (s == "continuous_0_1") return GradeKind::Continuous01;
  fail(ErrorKind::Validation, "unknown grade kind '" + s + "'");
}

void RelevanceTable::set(const std::string& query_id, const std::string& item_id, double value) {
  if (!std::isfinite(value)) fail(ErrorKind::Validation, "non-finite relevance for " + query_id + "/" + item_id);
  if (kind_ == GradeKind::Graded04) {
    if (value != std::floor(value) || value < 0 || value > 4) {
      fail(ErrorKind::Validation, "graded relevance must be an integer in 0..4, got " + std::to_string(value) +
                                      " for " + query_id + "/" + item_id);
    }
  } else if (value < 0 || value > 1) {
    fail(ErrorKind::Validation, "continuous relevance must lie in [0,1], got " + std::to_string(value) + " for " +
                                    query_id + "/" + item_id);
  }
  entries_[{query_id, item_id}] = value;
}

std::optional<double> RelevanceTable::get(const std::string& query_id, const std::string& item_id) const {
  const auto it = entries_.find({query_id, item_id});
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

RelevanceTable read_relevance(const std::filesystem::path& path) {
  const auto lines = io::split_lines(io::read_text(path));
  std::optional<RelevanceTable> table;
  for (std::size_t n = 0; n < lines.size(); ++n) {
    const auto where = path.string() + ":" + std::to_string(n + 1) + ": ";
    if (lines[n].empty()) continue;
    json j;
    try {
      j = json::parse(lines[n]);
    } catch (const json::parse_error&) {
      fail(ErrorKind::Validation, where + "malformed record");
    }
    if (!j.is_object() || !j.contains("query_id") || !j.contains("item_id")) {
      fail(ErrorKind::Validation, where + "needs query_id and item_id");
    }
    GradeKind kind;
    double value;
    try {
      if (j.contains("value")) {
        kind = j.contains("kind") ? parse_grade_kind(j["kind"].get<std::string>())
                                  : (table ? table->kind() : GradeKind::Graded04);
        value = j["value"].get<double>();
      } else if (j.contains("relevance_score")) {
        kind = GradeKind::Graded04;
        value = j["relevance_score"].get<double>();
      } else if (j.contains("confidence")) {
        kind = GradeKind::Continuous01;
        value = j["confidence"].get<double>();
      } else {
        fail(ErrorKind::Validation, where + "needs value, relevance_score or confidence");
      }
    } catch (const json::exception&) {
      fail(ErrorKind::Validation, where + "wrong field type");
    }
    if (!table) table.emplace(kind);
    if (table->kind() != kind) fail(ErrorKind::Validation, where + "mixed grade kinds in one file");
    try {
      table->set(j["query_id"].get<std::string>(), j["item_id"].get<std::string>(), value);
    } catch (const json::exception&) {
      fail(ErrorKind::Validation, where + "ids must be strings");
    } catch (const Error& e) {
      fail(ErrorKind::Validation, where + e.what());
    }
  }
  return table ? *table : RelevanceTable{};
}

void write_relevance(const RelevanceTable& table, const std::filesystem::path& path) {
  std::string out;
  const auto kind = to_string(table.kind());
  for (const auto& [key, value] : table.entries()) {
    json j;
    j["query_id"] = key.first;
    j["item_id"] = key.second;
    if (table.kind() == GradeKind::Graded04) {
      j["value"] = static_cast<int>(value);
    } else {
      j["value"] = value;
    }
    j["kind"] = kind;
    out += j.dump();
    out += '\n';
  }
  io::write_text_atomic(path, out);
}

ObjectTuple tuple_of(const ObjectAnnotation& o) {
  ObjectTuple t = o.attributes;
  std::sort(t.begin(), t.end());
  t.push_back(o.noun);
  return t;
}

namespace {

std::multiset<ObjectTuple> object_multiset(const ItemRecord& r) {
  std::multiset<ObjectTuple> s;
  for (const auto& o : r.objects) s.insert(tuple_of(o));
  return s;
}

std::size_t window(const RankedList& list, std::size_t K) { return std::min(K, list.entries.size()); }

void require_positive_k(std::size_t K, const char* what) {
  if (K == 0) fail(ErrorKind::Usage, std::string(what) + ": K must be positive");
}

void require_results(const std::vector<RankedList>& results, const char* what) {
  if (results.empty()) fail(ErrorKind::Usage, std::string(what) + ": no results");
}

}  // namespace

PositivesPredicate PositivesPredicate::exact_caption(const std::vector<ItemRecord>& queries,
                                                     const std::vector<ItemRecord>& corpus) {
  std::unordered_map<std::string, std::set<std::string>> by_caption;
  for (const auto& item : corpus) by_caption[item.caption].insert(item.id);
  std::map<std::string, std::set<std::string>> pos;
  for (const auto& q : queries) {
    const auto it = by_caption.find(q.caption);
    pos[q.id] = it == by_caption.end() ? std::set<std::string>{} : it->second;
  }
  return PositivesPredicate(Kind::ExactCaption, std::move(pos));
}

PositivesPredicate PositivesPredicate::symbolic_match(const std::vector<ItemRecord>& queries,
                                                      const std::vector<ItemRecord>& corpus) {
  std::map<std::multiset<ObjectTuple>, std::set<std::string>> by_objects;
  for (const auto& item : corpus) by_objects[object_multiset(item)].insert(item.id);
  std::map<std::string, std::set<std::string>> pos;
  for (const auto& q : queries) {
    auto& s = pos[q.id];
    if (q.objects.empty()) continue;
    const auto it = by_objects.find(object_multiset(q));
    if (it != by_objects.end()) s = it->second;
  }
  return PositivesPredicate(Kind::SymbolicMatch, std::move(pos));
}

PositivesPredicate PositivesPredicate::synonym_set(const std::map<std::string, SynonymQuery>& queries,
                                                   const std::vector<ItemRecord>& corpus) {
  std::map<std::string, std::set<std::string>> pos;
  for (const auto& [qid, sq] : queries) {
    auto& s = pos[qid];
    for (const auto& item : corpus) {
      const bool hit = std::any_of(item.objects.begin(), item.objects.end(), [&](const ObjectAnnotation& o) {
        return o.noun == sq.noun && std::any_of(o.attributes.begin(), o.attributes.end(),
                                                [&](const std::string& a) { return sq.synonyms.count(a) > 0; });
      });
      if (hit) s.insert(item.id);
    }
  }
  return PositivesPredicate(Kind::SynonymSet, std::move(pos));
}

PositivesPredicate PositivesPredicate::listed_ids(std::map<std::string, std::set<std::string>> positives) {
  return PositivesPredicate(Kind::ListedIds, std::move(positives));
}

bool PositivesPredicate::has_positives(const std::string& query_id) const {
  const auto it = positives_.find(query_id);
  return it != positives_.end() && !it->second.empty();
}

bool PositivesPredicate::is_positive(const std::string& query_id, const std::string& item_id) const {
  const auto it = positives_.find(query_id);
  return it != positives_.end() && it->second.count(item_id) > 0;
}

double recall_at_k(const std::vector<RankedList>& results, const PositivesPredicate& positives, std::size_t K,
                   Tally* tally) {
  require_results(results, "recall_at_k");
  require_positive_k(K, "recall_at_k");
  Tally t;
  CompensatedSum hits;
  for (const auto& list : results) {
    if (!positives.has_positives(list.query_id)) {
      ++t.excluded;
      continue;
    }
    ++t.queries;
    const auto n = window(list, K);
    for (std::size_t i = 0; i < n; ++i) {
      if (positives.is_positive(list.query_id, list.entries[i].item_id)) {
        hits.add(1.0);
        break;
      }
    }
  }
  if (tally) *tally = t;
  if (t.queries == 0) fail(ErrorKind::Degenerate, "recall_at_k: no query has defined positives");
  return hits.value() / static_cast<double>(t.queries);
}

double cas(const std::vector<RankedList>& results, const RelevanceTable& relevance, std::size_t k, Tally* tally) {
  require_results(results, "cas");
  require_positive_k(k, "cas");
  Tally t;
  CompensatedSum total;
  for (const auto& list : results) {
    ++t.queries;
    const auto n = window(list, k);
    if (n == 0) continue;
    CompensatedSum s;
    for (std::size_t i = 0; i < n; ++i) {
      const auto v = relevance.get(list.query_id, list.entries[i].item_id);
      if (!v) ++t.missing_pairs;
      s.add(v.value_or(0.0));
    }
    total.add(s.value() / static_cast<double>(n));
  }
  if (tally) *tally = t;
  return total.value() / static_cast<double>(t.queries);
}

QueryObjects query_objects_of(const std::vector<ItemRecord>& items) {
  QueryObjects out;
  for (const auto& r : items) {
    auto& v = out[r.id];
    for (const auto& o : r.objects) v.push_back(tuple_of(o));
  }
  return out;
}

ItemTuples item_tuples_of(const std::vector<ItemRecord>& items) {
  ItemTuples out;
  for (const auto& r : items) {
    auto& s = out[r.id];
    for (const auto& o : r.objects) s.insert(tuple_of(o));
  }
  return out;
}

namespace {

template <typename PerImage>
double tuple_metric(const std::vector<RankedList>& results, const QueryObjects& query_objects,
                    const ItemTuples& item_tuples, std::size_t K, const char* what, PerImage per_image) {
  require_results(results, what);
  require_positive_k(K, what);
  CompensatedSum total;
  for (const auto& list : results) {
    const auto q = query_objects.find(list.query_id);
    if (q == query_objects.end()) fail(ErrorKind::Validation, std::string(what) + ": no objects for query " + list.query_id);
    if (q->second.empty()) fail(ErrorKind::Validation, std::string(what) + ": query " + list.query_id + " has no objects");
    const auto n = window(list, K);
    if (n == 0) continue;
    CompensatedSum s;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& id = list.entries[i].item_id;
      const auto it = item_tuples.find(id);
      if (it == item_tuples.end()) fail(ErrorKind::Validation, std::string(what) + ": no objects for item " + id);
      s.add(per_image(q->second, it->second));
    }
    total.add(s.value() / static_cast<double>(n));
  }
  return total.value() / static_cast<double>(results.size());
}

}  // namespace

double cas_noun(const std::vector<RankedList>& results, const QueryObjects& query_objects,
                const ItemTuples& item_tuples, std::size_t K) {
  return tuple_metric(results, query_objects, item_tuples, K, "cas_noun",
                      [](const std::vector<ObjectTuple>& q, const std::set<ObjectTuple>& item) {
                        std::size_t found = 0;
                        for (const auto& t : q) found += item.count(t) > 0 ? 1 : 0;
                        return static_cast<double>(found) / static_cast<double>(q.size());
                      });
}

double cas_attribute(const std::vector<RankedList>& results, const QueryObjects& query_objects,
                     const ItemTuples& item_tuples, std::size_t K) {
  return tuple_metric(results, query_objects, item_tuples, K, "cas_attribute",
                      [](const std::vector<ObjectTuple>& q, const std::set<ObjectTuple>& item) {
                        std::set<std::string> present;
                        for (const auto& t : item) present.insert(t.begin(), t.end());
                        CompensatedSum s;
                        for (const auto& t : q) {
                          std::size_t found = 0;
                          for (const auto& e : t) found += present.count(e) > 0 ? 1 : 0;
                          s.add(static_cast<double>(found) / static_cast<double>(t.size()));
                        }
                        return s.value() / static_cast<double>(q.size());
                      });
}

double ndcg_at_k(const std::vector<RankedList>& results, const RelevanceTable& relevance, std::size_t K,
                 Tally* tally) {
  require_results(results, "ndcg_at_k");
  require_positive_k(K, "ndcg_at_k");
  Tally t;
  CompensatedSum total;
  std::vector<double> grades;
  for (const auto& list : results) {
    ++t.queries;
    const auto n = window(list, K);
    grades.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto v = relevance.get(list.query_id, list.entries[i].item_id);
      if (!v) ++t.missing_pairs;
      grades[i] = v.value_or(0.0);
    }
    CompensatedSum dcg;
    for (std::size_t i = 0; i < n; ++i) dcg.add(grades[i] / std::log2(static_cast<double>(i) + 2.0));
    std::sort(grades.begin(), grades.end(), std::greater<>());
    CompensatedSum idcg;
    for (std::size_t i = 0; i < n; ++i) idcg.add(grades[i] / std::log2(static_cast<double>(i) + 2.0));
    if (idcg.value() > 0) total.add(dcg.value() / idcg.value());
  }
  if (tally) *tally = t;
  return total.value() / static_cast<double>(t.queries);
}

namespace {

template <typename Fn>
RelevanceTable build_table(GradeKind kind, const std::vector<RankedList>& results, const CompositionMap& queries,
                           const CompositionMap& items, Fn grade) {
  RelevanceTable table(kind);
  for (const auto& list : results) {
    const auto q = queries.find(list.query_id);
    if (q == queries.end()) fail(ErrorKind::Validation, "no composition for query " + list.query_id);
    for (const auto& e : list.entries) {
      const auto it = items.find(e.item_id);
      if (it == items.end()) fail(ErrorKind::Validation, "no composition for item " + e.item_id);
      table.set(list.query_id, e.item_id, grade(q->second, it->second));
    }
  }
  return table;
}

}  // namespace

RelevanceTable build_heuristic_relevance(const std::vector<RankedList>& results, const CompositionMap& queries,
                                         const CompositionMap& items) {
  return build_table(GradeKind::Graded04, results, queries, items,
                     [](const shapes::Composition& q, const shapes::Composition& c) {
                       return static_cast<double>(shapes::heuristic_relevance(q, c));
                     });
}

RelevanceTable build_heuristic_similarity(const std::vector<RankedList>& results, const CompositionMap& queries,
                                          const CompositionMap& items) {
  return build_table(GradeKind::Continuous01, results, queries, items, shapes::heuristic_similarity);
}

MetricsReport evaluate(const std::vector<RankedList>& results, const EvalInputs& inputs) {
  require_results(results, "evaluate");
  MetricsReport r;
  r.n_queries = results.size();
  std::size_t depth = SIZE_MAX;
  for (const auto& list : results)
    if (list.meaningful_depth) depth = std::min(depth, *list.meaningful_depth);

  for (const auto K : inputs.ks) {
    if (inputs.positives) {
      if (K > depth) {
        r.recall[K] = std::nullopt;
      } else {
        Tally t;
        r.recall[K] = recall_at_k(results, *inputs.positives, K, &t);
        r.recall_excluded = t.excluded;
      }
    }
    if (inputs.graded) {
      if (K > depth) {
        r.ndcg[K] = std::nullopt;
      } else {
        Tally t;
        r.ndcg[K] = ndcg_at_k(results, *inputs.graded, K, &t);
        r.relevance_missing = std::max(r.relevance_missing, t.missing_pairs);
      }
    }
  }
  r.cas_k = inputs.cas_k;
  if (inputs.similarity) {
    Tally t;
    r.cas = cas(results, *inputs.similarity, inputs.cas_k, &t);
    r.relevance_missing = std::max(r.relevance_missing, t.missing_pairs);
  }
  if (inputs.query_objects && inputs.item_tuples) {
    r.cas_noun = cas_noun(results, *inputs.query_objects, *inputs.item_tuples, inputs.cas_k);
  }
  return r;
}

std::string format_report(const MetricsReport& report) {
  auto per_k = [](const std::map<std::size_t, std::optional<double>>& m) {
    json j = json::object();
    for (const auto& [k, v] : m) j[std::to_string(k)] = v ? json(*v) : json(nullptr);
    return j;
  };
  json j;
  j["n_queries"] = report.n_queries;
  j["recall"] = per_k(report.recall);
  j["ndcg"] = per_k(report.ndcg);
  j["cas"] = report.cas ? json(*report.cas) : json(nullptr);
  j["cas_noun"] = report.cas_noun ? json(*report.cas_noun) : json(nullptr);
  j["cas_k"] = report.cas_k;
  j["tallies"] = {{"recall_excluded_queries", report.recall_excluded},
                  {"relevance_missing_pairs", report.relevance_missing}};
  j["conventions"] = {{"ndcg_idcg_zero", "scored as 0"},
                      {"ndcg_gain", "linear, r_i / log2(i + 1)"},
                      {"missing_relevance", "scored as 0 and counted"},
                      {"null_depth", "ranking carries no order beyond its meaningful depth"}};
  return j.dump(2);
}

}  // namespace nbra::metrics
