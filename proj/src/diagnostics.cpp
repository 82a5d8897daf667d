#include "nbra/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include <json.hpp>

#include "nbra/error.hpp"

namespace nbra::diag {

namespace {

std::vector<ot::Vector> rows_of(const Eigen::MatrixXd& m) {
  std::vector<ot::Vector> out;
  out.reserve(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) out.emplace_back(m.row(i).transpose());
  return out;
}

template <typename T>
void require_increasing(const std::vector<T>& grid, const char* what) {
  if (grid.empty()) fail(ErrorKind::Usage, std::string(what) + " grid is empty");
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (!(grid[i - 1] < grid[i])) fail(ErrorKind::Usage, std::string(what) + " grid must be strictly increasing");
}

}  // namespace

double distance_correlation(const Eigen::MatrixXd& cloud_a, const Eigen::MatrixXd& cloud_b,
                            const std::optional<std::vector<std::size_t>>& subset) {
  if (cloud_a.rows() != cloud_b.rows()) fail(ErrorKind::Usage, "clouds must have the same number of points");
  std::vector<std::size_t> idx;
  if (subset) {
    idx = *subset;
    std::sort(idx.begin(), idx.end());
    if (std::adjacent_find(idx.begin(), idx.end()) != idx.end()) fail(ErrorKind::Usage, "subset repeats an index");
    if (!idx.empty() && idx.back() >= static_cast<std::size_t>(cloud_a.rows())) {
      fail(ErrorKind::Usage, "subset index out of range");
    }
  } else {
    idx.resize(static_cast<std::size_t>(cloud_a.rows()));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  }
  if (idx.size() < 3) fail(ErrorKind::Degenerate, "distance correlation needs at least 3 points");

  const auto da = ot::cosine_distance_matrix(rows_of(cloud_a));
  const auto db = ot::cosine_distance_matrix(rows_of(cloud_b));
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    for (std::size_t k = i + 1; k < idx.size(); ++k) {
      const auto a = static_cast<Eigen::Index>(idx[i]);
      const auto b = static_cast<Eigen::Index>(idx[k]);
      xs.push_back(da(a, b));
      ys.push_back(db(a, b));
    }
  }
  const double n = static_cast<double>(xs.size());
  metrics::CompensatedSum sx, sy;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sx.add(xs[i]);
    sy.add(ys[i]);
  }
  const double mx = sx.value() / n;
  const double my = sy.value() / n;
  metrics::CompensatedSum cxy, cxx, cyy;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx;
    const double dy = ys[i] - my;
    cxy.add(dx * dy);
    cxx.add(dx * dx);
    cyy.add(dy * dy);
  }
  // Variance below this is rounding noise on distances bounded by 2.
  constexpr double kMinVar = 1e-24;
  if (cxx.value() / n <= kMinVar || cyy.value() / n <= kMinVar) {
    fail(ErrorKind::Degenerate, "pairwise distances have zero variance; correlation undefined");
  }
  return std::clamp(cxy.value() / std::sqrt(cxx.value() * cyy.value()), -1.0, 1.0);
}

std::vector<std::size_t> subset_with_noun(const std::vector<ItemRecord>& items, const std::string& noun) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& objs = items[i].objects;
    if (std::any_of(objs.begin(), objs.end(), [&](const ObjectAnnotation& o) { return o.noun == noun; })) {
      out.push_back(i);
    }
  }
  return out;
}

MapperStructureReport mapper_structure_report(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                                              const RidgeMapper& mapper, const ot::FwConfig& config) {
  MapperStructureReport r;
  try {
    r.distance_reduction = distance_reduction(X, Y, mapper);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::Degenerate) throw;
  }
  const auto ys = rows_of(Y);
  r.gw_before = ot::gw_distance(rows_of(X), ys, config);
  r.gw_after = ot::gw_distance(rows_of(apply_mapper_rows(mapper, X)), ys, config);
  return r;
}

std::string format_mapper_report(const MapperStructureReport& r) {
  nlohmann::json j;
  j["distance_reduction_pct"] = r.distance_reduction ? nlohmann::json(*r.distance_reduction) : nlohmann::json(nullptr);
  j["gw_before"] = r.gw_before;
  j["gw_after"] = r.gw_after;
  return j.dump();
}

SweepResult k_sweep(const Corpus& queries, const Corpus& corpus, const PipelineConfig& base,
                    const std::vector<std::size_t>& k_grid, const std::map<std::string, std::string>& truth,
                    const RidgeMapper* mapper, const PerObjectSources* sources) {
  require_increasing(k_grid, "k");
  for (const auto& item : queries.items)
    if (!truth.count(item.id)) fail(ErrorKind::Validation, "no ground truth for query " + item.id);

  SweepResult out;
  out.axis = SweepAxis::K;
  for (const auto& item : queries.items) out.trajectories.push_back(RankTrajectory{item.id, {}});
  for (const auto k : k_grid) {
    auto config = base;
    config.k = k;
    const auto lists = run_pipeline(queries, corpus, config, mapper, sources);
    for (std::size_t i = 0; i < lists.size(); ++i) {
      out.trajectories[i].ranks.push_back(lists[i].rank_of(truth.at(lists[i].query_id)));
    }
    out.grid.push_back(static_cast<double>(k));
  }
  return out;
}

SweepResult alpha_sweep(const Corpus& queries, const Corpus& corpus, const PipelineConfig& base,
                        const SteeringVector& steering, const std::vector<double>& alpha_grid,
                        const RidgeMapper& mapper, const PerObjectSources* sources, const Evaluator& evaluate) {
  require_increasing(alpha_grid, "alpha");
  if (std::find(alpha_grid.begin(), alpha_grid.end(), 0.0) == alpha_grid.end()) {
    fail(ErrorKind::Usage, "alpha grid must include 0");
  }
  SweepResult out;
  out.axis = SweepAxis::Alpha;
  out.grid = alpha_grid;
  for (const double alpha : alpha_grid) {
    auto config = base;
    config.stage1 = Stage1::RidgePlusSteer;
    config.steering = Steering{steering, alpha};
    out.reports.push_back(evaluate(run_pipeline(queries, corpus, config, &mapper, sources)));
  }
  return out;
}

namespace {

std::string fmt_value(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string fmt_opt(const std::optional<double>& v) { return v ? fmt_value(*v) : "---"; }

}  // namespace

std::string format_sweep_tsv(const SweepResult& sweep) {
  std::string out;
  if (sweep.axis == SweepAxis::K) {
    out += "k\tquery_id\trank\n";
    for (std::size_t g = 0; g < sweep.grid.size(); ++g) {
      for (const auto& t : sweep.trajectories) {
        out += std::to_string(static_cast<std::size_t>(sweep.grid[g])) + "\t" + t.query_id + "\t";
        out += t.ranks[g] ? std::to_string(*t.ranks[g]) : "absent";
        out += "\n";
      }
    }
    return out;
  }
  out += "alpha\tmetric\tk\tvalue\n";
  for (std::size_t g = 0; g < sweep.grid.size(); ++g) {
    const auto a = fmt_value(sweep.grid[g]);
    const auto& r = sweep.reports[g];
    for (const auto& [k, v] : r.recall) out += a + "\trecall\t" + std::to_string(k) + "\t" + fmt_opt(v) + "\n";
    for (const auto& [k, v] : r.ndcg) out += a + "\tndcg\t" + std::to_string(k) + "\t" + fmt_opt(v) + "\n";
    if (r.cas) out += a + "\tcas\t" + std::to_string(r.cas_k) + "\t" + fmt_value(*r.cas) + "\n";
    if (r.cas_noun) out += a + "\tcas_noun\t" + std::to_string(r.cas_k) + "\t" + fmt_value(*r.cas_noun) + "\n";
  }
  return out;
}

namespace {

struct Slot {
  std::string kind;
  std::string noun;
  std::string value;  // empty for the noun slot
};

std::vector<Slot> slots_of(const ItemRecord& q) {
  std::vector<Slot> out;
  for (const auto& o : q.objects) {
    out.push_back(Slot{"noun", o.noun, {}});
    for (std::size_t a = 0; a < o.attributes.size(); ++a) {
      const auto kind = a < o.attribute_kinds.size() ? o.attribute_kinds[a] : "attribute";
      out.push_back(Slot{kind, o.noun, o.attributes[a]});
    }
  }
  return out;
}

bool slot_correct(const Slot& s, const ItemRecord* top) {
  if (!top) return false;
  return std::any_of(top->objects.begin(), top->objects.end(), [&](const ObjectAnnotation& o) {
    if (o.noun != s.noun) return false;
    if (s.value.empty()) return true;
    return std::find(o.attributes.begin(), o.attributes.end(), s.value) != o.attributes.end();
  });
}

const ItemRecord* top_item(const RankedList* list, const Corpus& corpus) {
  if (!list || list->entries.empty()) return nullptr;
  const auto row = corpus.find(list->entries.front().item_id);
  if (!row) fail(ErrorKind::Validation, "retrieved item " + list->entries.front().item_id + " is not in the corpus");
  return &corpus.items[*row];
}

std::map<std::string, const RankedList*> by_query(const std::vector<RankedList>& lists) {
  std::map<std::string, const RankedList*> m;
  for (const auto& l : lists) m[l.query_id] = &l;
  return m;
}

}  // namespace

InterferenceReport interference_report(const std::vector<ItemRecord>& queries,
                                       const std::vector<RankedList>& baseline,
                                       const std::vector<RankedList>& treated, const Corpus& corpus) {
  const auto base_by = by_query(baseline);
  const auto treat_by = by_query(treated);
  InterferenceReport r;
  std::map<std::string, std::size_t> improved_queries;                          // kind -> count
  std::map<std::string, std::map<std::string, std::size_t>> co_counts;  // a -> b -> count
  std::size_t degraded_given_improvement = 0;

  for (const auto& q : queries) {
    const auto b = base_by.find(q.id);
    const auto t = treat_by.find(q.id);
    const auto* top_b = top_item(b == base_by.end() ? nullptr : b->second, corpus);
    const auto* top_t = top_item(t == treat_by.end() ? nullptr : t->second, corpus);
    ++r.n_queries;

    std::set<std::string> improved_kinds, degraded_kinds;
    std::size_t degraded_slots = 0;
    for (const auto& s : slots_of(q)) {
      const bool before = slot_correct(s, top_b);
      const bool after = slot_correct(s, top_t);
      auto& c = r.per_kind[s.kind];
      if (!before && after) {
        ++c.improved;
        improved_kinds.insert(s.kind);
      } else if (before && !after) {
        ++c.degraded;
        ++degraded_slots;
        degraded_kinds.insert(s.kind);
      } else {
        ++c.unchanged;
      }
    }
    if (!degraded_kinds.empty()) ++r.queries_with_degradation;
    if (!improved_kinds.empty()) {
      ++r.queries_with_improvement;
      degraded_given_improvement += degraded_slots;
    }
    for (const auto& a : improved_kinds) {
      ++improved_queries[a];
      for (const auto& d : degraded_kinds)
        if (d != a) ++co_counts[a][d];
    }
  }
  if (r.queries_with_improvement > 0) {
    r.mean_degraded_given_improvement =
        static_cast<double>(degraded_given_improvement) / static_cast<double>(r.queries_with_improvement);
  }
  for (const auto& [a, n] : improved_queries) {
    for (const auto& [d, _] : r.per_kind) {
      if (d == a) continue;
      const auto it = co_counts[a].find(d);
      const auto hits = it == co_counts[a].end() ? 0 : it->second;
      r.co_degradation[a][d] = static_cast<double>(hits) / static_cast<double>(n);
    }
  }
  return r;
}

std::string format_interference_tsv(const InterferenceReport& r) {
  std::string out = "section\tkind\tother_kind\timproved\tdegraded\tunchanged\ttotal\tvalue\n";
  for (const auto& [kind, c] : r.per_kind) {
    out += "slots\t" + kind + "\t-\t" + std::to_string(c.improved) + "\t" + std::to_string(c.degraded) + "\t" +
           std::to_string(c.unchanged) + "\t" + std::to_string(c.total()) + "\t-\n";
  }
  for (const auto& [a, row] : r.co_degradation)
    for (const auto& [b, v] : row) out += "co_degradation\t" + a + "\t" + b + "\t-\t-\t-\t-\t" + fmt_value(v) + "\n";
  out += "queries\tall\t-\t-\t-\t-\t" + std::to_string(r.n_queries) + "\t-\n";
  out += "queries\twith_degradation\t-\t-\t-\t-\t" + std::to_string(r.queries_with_degradation) + "\t-\n";
  out += "queries\twith_improvement\t-\t-\t-\t-\t" + std::to_string(r.queries_with_improvement) + "\t-\n";
  out += "queries\tmean_degraded_given_improvement\t-\t-\t-\t-\t-\t" + fmt_value(r.mean_degraded_given_improvement) +
         "\n";
  return out;
}

}  // namespace nbra::diag
