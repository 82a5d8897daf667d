#include "nbra/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "nbra/error.hpp"
#include "nbra/parallel.hpp"

namespace nbra {

void PhraseTable::insert(const std::string& phrase, const Eigen::VectorXd& v) {
  const double n = v.norm();
  if (n == 0.0) fail(ErrorKind::Degenerate, "zero embedding for phrase \"" + phrase + "\"");
  table_.insert_or_assign(phrase, v / n);
}

const Eigen::VectorXd* PhraseTable::find(const std::string& phrase) const {
  auto it = table_.find(phrase);
  return it == table_.end() ? nullptr : &it->second;
}

PhraseTable PhraseTable::from_corpus(const Corpus& corpus) {
  PhraseTable t;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& item = corpus.items[i];
    t.insert(item.caption.empty() ? item.id : item.caption, corpus.embeddings.row_vector(i));
  }
  return t;
}

Stage1 parse_stage1(const std::string& s) {
  if (s == "raw") return Stage1::Raw;
  if (s == "ridge_mapped") return Stage1::RidgeMapped;
  if (s == "ridge_plus_steer") return Stage1::RidgePlusSteer;
  fail(ErrorKind::Usage, "unknown stage1 '" + s + "' (raw, ridge_mapped, ridge_plus_steer)");
}

Stage2 parse_stage2(const std::string& s) {
  if (s == "none") return Stage2::None;
  if (s == "hungarian") return Stage2::Hungarian;
  if (s == "fgw") return Stage2::Fgw;
  fail(ErrorKind::Usage, "unknown stage2 '" + s + "' (none, hungarian, fgw)");
}

std::string to_string(Stage1 s) {
  switch (s) {
    case Stage1::Raw: return "raw";
    case Stage1::RidgeMapped: return "ridge_mapped";
    case Stage1::RidgePlusSteer: return "ridge_plus_steer";
  }
  return "?";
}

std::string to_string(Stage2 s) {
  switch (s) {
    case Stage2::None: return "none";
    case Stage2::Hungarian: return "hungarian";
    case Stage2::Fgw: return "fgw";
  }
  return "?";
}

RankedList cosine_retrieve(const Eigen::VectorXd& q, const Corpus& corpus, std::size_t K,
                           const std::string& query_id) {
  if (corpus.size() == 0) fail(ErrorKind::Usage, "cosine retrieval over an empty corpus");
  if (K == 0) fail(ErrorKind::Usage, "K must be positive");
  if (static_cast<std::size_t>(q.size()) != corpus.embeddings.dim()) {
    fail(ErrorKind::Usage, "query dim " + std::to_string(q.size()) + " does not match corpus dim " +
                               std::to_string(corpus.embeddings.dim()));
  }
  const double qn = q.norm();
  if (qn == 0.0) fail(ErrorKind::Degenerate, "zero query vector" + (query_id.empty() ? "" : " for " + query_id));
  const Eigen::VectorXd qu = q / qn;

  const std::size_t n = corpus.size();
  std::vector<double> scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = corpus.embeddings.row(i);
    double dot = 0.0;
    double sq = 0.0;
    for (std::size_t k = 0; k < row.size(); ++k) {
      dot += qu[static_cast<Eigen::Index>(k)] * row[k];
      sq += static_cast<double>(row[k]) * row[k];
    }
    if (sq == 0.0) fail(ErrorKind::Degenerate, "zero embedding for item " + corpus.items[i].id);
    scores[i] = dot / std::sqrt(sq);
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t keep = std::min(K, n);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return corpus.items[a].id < corpus.items[b].id;
                    });
  RankedList out{query_id, {}, std::nullopt};
  out.entries.reserve(keep);
  for (std::size_t r = 0; r < keep; ++r) {
    out.entries.push_back(RankedEntry{corpus.items[order[r]].id, scores[order[r]], std::nullopt, {}});
  }
  return out;
}

Shortlist make_shortlist(const RankedList& ranked, std::size_t k) {
  if (k == 0) fail(ErrorKind::Usage, "shortlist size must be positive");
  Shortlist s{ranked.query_id, k, {}};
  const auto n = std::min(k, ranked.entries.size());
  s.entries.assign(ranked.entries.begin(), ranked.entries.begin() + static_cast<std::ptrdiff_t>(n));
  return s;
}

PerObjectSet build_per_object_set(const ItemRecord& item, const PhraseTable& phrases) {
  if (item.objects.empty()) fail(ErrorKind::Validation, "item " + item.id + " has no object annotations");
  PerObjectSet set{item.id, {}, item.objects};
  set.vectors.reserve(item.objects.size());
  for (const auto& obj : item.objects) {
    const auto phrase = obj.phrase();
    const auto* v = phrases.find(phrase);
    if (!v) fail(ErrorKind::Validation, "no embedding for phrase \"" + phrase + "\" (item " + item.id + ")");
    set.vectors.push_back(*v);
  }
  return set;
}

namespace {

const PerObjectSet& candidate_for(const CandidateSets& sets, const std::string& id) {
  auto it = sets.find(id);
  if (it == sets.end()) fail(ErrorKind::Validation, "missing candidate object set for " + id);
  return it->second;
}

RankedList sort_reranked(const Shortlist& shortlist, std::vector<RankedEntry> entries) {
  // stable_sort keeps shortlist (cosine) order among equal scores.
  std::stable_sort(entries.begin(), entries.end(),
                   [](const RankedEntry& a, const RankedEntry& b) { return a.score > b.score; });
  return RankedList{shortlist.query_id, std::move(entries), std::nullopt};
}

}  // namespace

RankedList rerank_hungarian(const Shortlist& shortlist, const PerObjectSet& query_set,
                            const CandidateSets& candidate_sets, bool cosine_tiebreak) {
  std::vector<RankedEntry> entries;
  entries.reserve(shortlist.entries.size());
  for (const auto& e : shortlist.entries) {
    const auto& cand = candidate_for(candidate_sets, e.item_id);
    const auto bundle = ot::cost_bundle(query_set.vectors, cand.vectors);
    const auto assignment = ot::hungarian(bundle.feature);
    entries.push_back(RankedEntry{e.item_id, -assignment.total_cost, assignment.total_cost, {}});
  }
  auto list = sort_reranked(shortlist, std::move(entries));
  if (!cosine_tiebreak) list.meaningful_depth = 1;
  return list;
}

RankedList rerank_fgw(const Shortlist& shortlist, const PerObjectSet& query_set,
                      const CandidateSets& candidate_sets, const ot::FwConfig& config) {
  const auto mu = ot::uniform_marginal(static_cast<Eigen::Index>(query_set.vectors.size()));
  std::vector<RankedEntry> entries;
  entries.reserve(shortlist.entries.size());
  for (const auto& e : shortlist.entries) {
    const auto& cand = candidate_for(candidate_sets, e.item_id);
    const auto bundle = ot::cost_bundle(query_set.vectors, cand.vectors);
    const auto nu = ot::uniform_marginal(static_cast<Eigen::Index>(cand.vectors.size()));
    auto result = ot::fgw_solve(bundle, mu, nu, config);
    // Per-candidate warnings travel with the entry; they never abort the batch.
    std::vector<std::string> warnings;
    if (!result.warnings.empty()) {
      warnings.push_back(result.warnings.back() + " [" + std::to_string(result.warnings.size()) + " step(s)]");
    }
    entries.push_back(RankedEntry{e.item_id, -result.cost, result.cost, std::move(warnings)});
  }
  return sort_reranked(shortlist, std::move(entries));
}

Eigen::VectorXd transform_query(const Eigen::VectorXd& q, const PipelineConfig& config, const RidgeMapper* mapper) {
  switch (config.stage1) {
    case Stage1::Raw:
      return q;
    case Stage1::RidgeMapped:
    case Stage1::RidgePlusSteer: {
      Eigen::VectorXd mapped = apply_mapper(*mapper, q);
      const double n = mapped.norm();
      if (n == 0.0) fail(ErrorKind::Degenerate, "mapped query is the zero vector");
      mapped /= n;
      if (config.stage1 == Stage1::RidgeMapped) return mapped;
      return apply_steering(mapped, config.steering->vector, config.steering->alpha);
    }
  }
  return q;
}

void validate_pipeline(const PipelineConfig& config, const RidgeMapper* mapper, const PerObjectSources* sources) {
  const bool uses_mapper = config.stage1 != Stage1::Raw;
  if (uses_mapper && !mapper) fail(ErrorKind::Usage, "stage1 " + to_string(config.stage1) + " needs a mapper");
  if (!uses_mapper && mapper) fail(ErrorKind::Usage, "stage1 raw does not take a mapper");
  const bool steers = config.stage1 == Stage1::RidgePlusSteer;
  if (steers != config.steering.has_value()) {
    fail(ErrorKind::Usage, "steering (vector and alpha) is required exactly when stage1 is ridge_plus_steer");
  }
  if (config.steering && mapper && config.steering->vector.direction.size() != mapper->d_out()) {
    fail(ErrorKind::Usage, "steering vector dim does not match mapper output dim");
  }
  if (config.k == 0) fail(ErrorKind::Usage, "k must be positive");
  if (config.stage2 != Stage2::None && !sources) {
    fail(ErrorKind::Usage, "stage2 " + to_string(config.stage2) + " needs per-object phrase embeddings");
  }
  if (config.stage2 == Stage2::Fgw && !(config.fw.beta >= 0.0 && config.fw.beta <= 1.0)) {
    fail(ErrorKind::Usage, "beta must lie in [0, 1]");
  }
}

CandidateSets build_candidate_sets(const Corpus& corpus, const PhraseTable& phrases) {
  CandidateSets sets;
  for (const auto& item : corpus.items) {
    if (!item.objects.empty()) sets.emplace(item.id, build_per_object_set(item, phrases));
  }
  return sets;
}

std::vector<RankedList> run_pipeline(const Corpus& queries, const Corpus& corpus, const PipelineConfig& config,
                                     const RidgeMapper* mapper, const PerObjectSources* sources) {
  validate_pipeline(config, mapper, sources);
  const std::size_t nq = queries.size();

  std::vector<RankedList> stage1(nq);
  parallel_for(nq, config.jobs, [&](std::size_t i) {
    const auto q = transform_query(queries.embeddings.row_vector(i), config, mapper);
    stage1[i] = cosine_retrieve(q, corpus, config.k, queries.items[i].id);
  });
  if (config.stage2 == Stage2::None) return stage1;

  // Object sets only for items that made some shortlist.
  std::set<std::string> needed;
  for (const auto& list : stage1)
    for (const auto& e : list.entries) needed.insert(e.item_id);
  CandidateSets candidates;
  for (const auto& id : needed) {
    const auto row = corpus.find(id);
    candidates.emplace(id, build_per_object_set(corpus.items[*row], sources->candidate));
  }

  std::vector<RankedList> out(nq);
  parallel_for(nq, config.jobs, [&](std::size_t i) {
    const auto shortlist = make_shortlist(stage1[i], config.k);
    const auto query_set = build_per_object_set(queries.items[i], sources->query);
    out[i] = config.stage2 == Stage2::Hungarian
                 ? rerank_hungarian(shortlist, query_set, candidates, config.hungarian_cosine_tiebreak)
                 : rerank_fgw(shortlist, query_set, candidates, config.fw);
  });
  return out;
}

std::vector<RankedList> run_merged_queries(const Corpus& queries, const Corpus& corpus,
                                           const PhraseTable& query_phrases, std::size_t K,
                                           std::span<const Steering> per_object_steering, std::size_t jobs) {
  std::vector<RankedList> out(queries.size());
  parallel_for(queries.size(), jobs, [&](std::size_t i) {
    auto set = build_per_object_set(queries.items[i], query_phrases);
    for (std::size_t o = 0; o < set.vectors.size(); ++o) {
      for (const auto& s : per_object_steering) {
        if (s.vector.noun_scope && *s.vector.noun_scope != set.labels[o].noun) continue;
        set.vectors[o] = apply_steering(set.vectors[o], s.vector, s.alpha);
      }
    }
    out[i] = cosine_retrieve(merge_average(set.vectors), corpus, K, queries.items[i].id);
  });
  return out;
}

}  // namespace nbra
