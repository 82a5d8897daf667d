#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>

#include "nbra/error.hpp"
#include "nbra/retrieval.hpp"
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

ItemRecord record(const std::string& id, std::vector<ObjectAnnotation> objects = {}) {
  return ItemRecord{id, id, std::move(objects), std::nullopt};
}

Corpus corpus_from(const std::vector<std::string>& ids, const std::vector<Eigen::VectorXd>& rows) {
  std::vector<ItemRecord> items;
  for (const auto& id : ids) items.push_back(record(id));
  return make_corpus(Modality::Image, items, EmbeddingMatrix::from_rows(rows));
}

// A small world of objects: phrase vectors, items made of 1..3 objects, and
// item embeddings that are noisy means of their object vectors.
struct World {
  PhraseTable phrases;
  Corpus corpus;
  Corpus queries;
};

World make_world(std::uint64_t seed, int n_items, int n_queries, int dim = 24) {
  auto g = oracle::rng(seed);
  const std::vector<std::string> nouns = {"cube", "sphere", "cylinder", "cone"};
  const std::vector<std::string> colors = {"red", "blue", "green"};
  World w;
  std::map<std::string, Eigen::VectorXd> vec;
  for (const auto& n : nouns)
    for (const auto& c : colors) {
      const auto v = oracle::unit_vector(g, dim);
      vec[c + " " + n] = v;
      w.phrases.insert(c + " " + n, v);
    }
  std::uniform_int_distribution<int> pick_n(0, 3), pick_c(0, 2), count(1, 3);
  std::normal_distribution<double> noise(0.0, 0.05);
  auto make = [&](const std::string& prefix, int n) {
    std::vector<ItemRecord> items;
    std::vector<Eigen::VectorXd> rows;
    for (int i = 0; i < n; ++i) {
      ItemRecord r = record(prefix + std::to_string(1000 + i));
      Eigen::VectorXd sum = Eigen::VectorXd::Zero(dim);
      for (int o = count(g); o > 0; --o) {
        ObjectAnnotation a{nouns[pick_n(g)], {colors[pick_c(g)]}, {"color"}};
        sum += vec[a.phrase()];
        r.objects.push_back(a);
      }
      for (int k = 0; k < dim; ++k) sum[k] += noise(g);
      items.push_back(r);
      rows.push_back(sum.normalized());
    }
    return make_corpus(Modality::Image, items, EmbeddingMatrix::from_rows(rows, true));
  };
  w.corpus = make("c", n_items);
  w.queries = make("q", n_queries);
  return w;
}

std::vector<std::string> ids_of(const RankedList& l) {
  std::vector<std::string> out;
  for (const auto& e : l.entries) out.push_back(e.item_id);
  return out;
}

// Minimal cost of matching every row of a square cost matrix; brute force.
double brute_assignment_cost(const std::vector<Eigen::VectorXd>& q, const std::vector<Eigen::VectorXd>& c) {
  Eigen::MatrixXd cost(static_cast<int>(q.size()), static_cast<int>(c.size()));
  for (std::size_t i = 0; i < q.size(); ++i)
    for (std::size_t j = 0; j < c.size(); ++j)
      cost(static_cast<int>(i), static_cast<int>(j)) = oracle::cosine_distance(q[i], c[j]);
  return oracle::brute_force_assignment(cost);
}

}  // namespace

TEST_CASE("cosine retrieve puts an exact copy first") {
  auto g = oracle::rng(1);
  auto rows = oracle::unit_vectors(g, 20, 8);
  const Eigen::VectorXd q = rows[7];
  std::vector<std::string> ids;
  for (int i = 0; i < 20; ++i) ids.push_back("i" + std::to_string(100 + i));
  const auto list = cosine_retrieve(q, corpus_from(ids, rows), 5, "q");
  REQUIRE(list.entries.size() == 5);
  CHECK(list.entries[0].item_id == "i107");
  CHECK(list.entries[0].score == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("cosine retrieve ties break by ascending id") {
  auto g = oracle::rng(2);
  const auto v = oracle::unit_vector(g, 4);
  const auto other = oracle::unit_vector(g, 4);
  const auto c = corpus_from({"zeta", "alpha", "mid"}, {v, v, other});
  const auto list = cosine_retrieve(v, c, 3);
  CHECK(list.entries[0].item_id == "alpha");
  CHECK(list.entries[1].item_id == "zeta");
}

TEST_CASE("cosine retrieve matches a full-sort oracle") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto g = oracle::rng(seed);
    auto rows = oracle::unit_vectors(g, 50, 16);
    std::vector<std::string> ids;
    for (int i = 0; i < 50; ++i) ids.push_back("x" + std::to_string(i));
    const auto corpus = corpus_from(ids, rows);
    const auto q = oracle::unit_vector(g, 16);

    // The stored rows are float32; score what is stored.
    std::vector<std::pair<double, std::string>> scored;
    for (std::size_t i = 0; i < 50; ++i) {
      const Eigen::VectorXd r = corpus.embeddings.row_vector(i);
      scored.emplace_back(-(1.0 - oracle::cosine_distance(q, r)), ids[i]);
    }
    std::sort(scored.begin(), scored.end());
    const auto list = cosine_retrieve(q, corpus, 50);
    REQUIRE(list.entries.size() == 50);
    for (std::size_t i = 0; i < 50; ++i) {
      CHECK(list.entries[i].item_id == scored[i].second);
      CHECK(list.entries[i].score == doctest::Approx(-scored[i].first).epsilon(1e-12));
    }
    const auto top = cosine_retrieve(q, corpus, 10);
    CHECK(top.entries.size() == 10);
    CHECK(std::equal(top.entries.begin(), top.entries.end(), list.entries.begin()));
  }
}

TEST_CASE("cosine retrieve errors") {
  auto g = oracle::rng(3);
  const auto c = corpus_from({"a"}, {oracle::unit_vector(g, 4)});
  CHECK(kind_of([&] { cosine_retrieve(Eigen::VectorXd::Zero(4), c, 1); }) == ErrorKind::Degenerate);
  CHECK(kind_of([&] { cosine_retrieve(Eigen::VectorXd::Ones(3), c, 1); }) == ErrorKind::Usage);
  CHECK(kind_of([&] { cosine_retrieve(Eigen::VectorXd::Ones(4), c, 0); }) == ErrorKind::Usage);
  CHECK(cosine_retrieve(Eigen::VectorXd::Ones(4), c, 10).entries.size() == 1);
}

TEST_CASE("shortlist is the top-k prefix") {
  const RankedList l{"q", {{"a", 0.9, {}, {}}, {"b", 0.8, {}, {}}, {"c", 0.1, {}, {}}}, {}};
  CHECK(make_shortlist(l, 2).entries.size() == 2);
  CHECK(make_shortlist(l, 10).entries.size() == 3);
  CHECK_THROWS_AS(make_shortlist(l, 0), Error);
}

TEST_CASE("per-object sets") {
  PhraseTable t;
  auto g = oracle::rng(4);
  const auto v1 = oracle::unit_vector(g, 5), v2 = oracle::unit_vector(g, 5);
  t.insert("large red rubber sphere", 3.0 * v1);
  t.insert("cube", v2);

  ObjectAnnotation sphere{"sphere", {"large", "red", "rubber"}, {}};
  ObjectAnnotation cube{"cube", {}, {}};
  const auto s = build_per_object_set(record("x", {sphere, cube, cube}), t);
  REQUIRE(s.vectors.size() == 3);
  CHECK((s.vectors[0] - v1).norm() <= 1e-12);
  CHECK(s.vectors[1] == s.vectors[2]);
  CHECK(s.labels[0].phrase() == "large red rubber sphere");

  try {
    build_per_object_set(record("y", {ObjectAnnotation{"cone", {"blue"}, {}}}), t);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("\"blue cone\"") != std::string::npos);
  }
  CHECK_THROWS_AS(build_per_object_set(record("z"), t), Error);
}

TEST_CASE("hungarian rerank") {
  auto g = oracle::rng(5);
  const auto q = oracle::unit_vectors(g, 3, 10);
  CandidateSets sets;
  Shortlist sl{"q", 6, {}};
  for (int i = 0; i < 5; ++i) {
    const auto id = "c" + std::to_string(i);
    sets[id] = PerObjectSet{id, oracle::unit_vectors(g, 3, 10), {}};
    sl.entries.push_back({id, 1.0 - 0.1 * i, {}, {}});
  }
  sets["exact"] = PerObjectSet{"exact", {q[2], q[0], q[1]}, {}};
  sl.entries.push_back({"exact", 0.0, {}, {}});
  const PerObjectSet qs{"q", q, {}};

  const auto out = rerank_hungarian(sl, qs, sets);
  CHECK(out.entries[0].item_id == "exact");
  CHECK(std::abs(*out.entries[0].stage2_cost) <= 1e-12);
  CHECK(out.meaningful_depth == std::optional<std::size_t>(1));
  CHECK_FALSE(rerank_hungarian(sl, qs, sets, true).meaningful_depth.has_value());

  // Brute force over the random candidates only.
  sl.entries.pop_back();
  std::string best;
  double best_cost = INFINITY;
  for (const auto& e : sl.entries) {
    const double c = brute_assignment_cost(q, sets[e.item_id].vectors);
    if (c < best_cost - 1e-12) {
      best_cost = c;
      best = e.item_id;
    }
  }
  const auto out2 = rerank_hungarian(sl, qs, sets);
  CHECK(out2.entries[0].item_id == best);
  CHECK(*out2.entries[0].stage2_cost == doctest::Approx(best_cost).epsilon(1e-10));

  sl.entries.push_back({"ghost", 0.0, {}, {}});
  CHECK(kind_of([&] { rerank_hungarian(sl, qs, sets); }) == ErrorKind::Validation);
}

TEST_CASE("single-object sets: both rerankers reproduce per-object cosine order") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto g = oracle::rng(100 + seed);
    const auto q = oracle::unit_vector(g, 12);
    CandidateSets sets;
    Shortlist sl{"q", 15, {}};
    std::vector<std::pair<double, std::string>> oracle_order;
    for (int i = 0; i < 15; ++i) {
      const auto id = "c" + std::to_string(10 + i);
      const auto v = oracle::unit_vector(g, 12);
      sets[id] = PerObjectSet{id, {v}, {}};
      sl.entries.push_back({id, 0.0, {}, {}});
      oracle_order.emplace_back(oracle::cosine_distance(q, v), id);
    }
    std::sort(oracle_order.begin(), oracle_order.end());
    std::vector<std::string> expected;
    for (const auto& [d, id] : oracle_order) expected.push_back(id);

    const PerObjectSet qs{"q", {q}, {}};
    CHECK(ids_of(rerank_hungarian(sl, qs, sets)) == expected);
    for (double beta : {0.0, 0.5, 0.9}) {
      ot::FwConfig cfg;
      cfg.beta = beta;
      CHECK(ids_of(rerank_fgw(sl, qs, sets, cfg)) == expected);
    }
  }
}

TEST_CASE("fgw rerank basics") {
  auto g = oracle::rng(6);
  const auto q = oracle::unit_vectors(g, 3, 10);
  CandidateSets sets;
  Shortlist sl{"q", 6, {}};
  for (int i = 0; i < 5; ++i) {
    const auto id = "c" + std::to_string(i);
    sets[id] = PerObjectSet{id, oracle::unit_vectors(g, 1 + i % 3, 10), {}};
    sl.entries.push_back({id, 1.0, {}, {}});
  }
  sets["exact"] = PerObjectSet{"exact", q, {}};
  sl.entries.push_back({"exact", 0.0, {}, {}});
  const PerObjectSet qs{"q", q, {}};
  const auto out = rerank_fgw(sl, qs, sets, {});
  CHECK(out.entries[0].item_id == "exact");
  CHECK(*out.entries[0].stage2_cost <= 1e-2);
  CHECK_FALSE(out.meaningful_depth.has_value());
  // A permutation of the shortlist.
  auto a = ids_of(out);
  std::vector<std::string> b;
  for (const auto& e : sl.entries) b.push_back(e.item_id);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  CHECK(a == b);
  CHECK(rerank_fgw(sl, qs, sets, {}) == out);
  for (std::size_t i = 1; i < out.entries.size(); ++i) CHECK(out.entries[i - 1].score >= out.entries[i].score);
}

TEST_CASE("fgw at beta = 0 orders like entropic transport") {
  auto g = oracle::rng(7);
  const auto q = oracle::unit_vectors(g, 3, 10);
  CandidateSets sets;
  Shortlist sl{"q", 8, {}};
  std::vector<std::pair<double, std::string>> ref;
  ot::FwConfig cfg;
  cfg.beta = 0.0;
  for (int i = 0; i < 8; ++i) {
    const auto id = "c" + std::to_string(i);
    const auto vs = oracle::unit_vectors(g, 2 + i % 3, 10);
    sets[id] = PerObjectSet{id, vs, {}};
    sl.entries.push_back({id, 0.0, {}, {}});
    const auto bundle = ot::cost_bundle(q, vs);
    const auto s = ot::sinkhorn(bundle.feature, ot::uniform_marginal(3),
                                ot::uniform_marginal(static_cast<Eigen::Index>(vs.size())), cfg.sinkhorn);
    ref.emplace_back((s.plan.coupling.array() * bundle.feature.array()).sum(), id);
  }
  std::stable_sort(ref.begin(), ref.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<std::string> expected;
  for (const auto& [c, id] : ref) expected.push_back(id);
  CHECK(ids_of(rerank_fgw(sl, PerObjectSet{"q", q, {}}, sets, cfg)) == expected);
}

TEST_CASE("fgw prefers matching relational geometry at equal feature cost") {
  // Query objects e_0, e_1, e_2. Both candidates carry one vector per query
  // object at the same cosine c, so every feature cost is 1 - c for both.
  // "spread" pushes the residual onto distinct orthogonal directions and keeps
  // the objects mutually distant like the query; "collapsed" shares one
  // residual direction and crowds the objects together.
  const int dim = 8;
  const double c = 0.6, s = std::sqrt(1 - c * c);
  auto e = [&](int i) { return Eigen::VectorXd::Unit(dim, i); };
  std::vector<Eigen::VectorXd> q{e(0), e(1), e(2)}, spread, collapsed;
  for (int l = 0; l < 3; ++l) {
    spread.push_back(c * e(l) + s * e(3 + l));
    collapsed.push_back(c * e(l) + s * e(7));
  }
  CandidateSets sets{{"collapsed", {"collapsed", collapsed, {}}}, {"spread", {"spread", spread, {}}}};
  // Collapsed first in the shortlist, so a tie would keep it on top.
  const Shortlist sl{"q", 2, {{"collapsed", 0.0, {}, {}}, {"spread", 0.0, {}, {}}}};
  const PerObjectSet qs{"q", q, {}};

  // Direct objective at the diagonal plan, from the oracle four-index sum.
  const Eigen::MatrixXd T = Eigen::MatrixXd::Identity(3, 3) / 3.0;
  auto direct = [&](const std::vector<Eigen::VectorXd>& cand) {
    Eigen::MatrixXd D(3, 3);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) D(i, j) = oracle::cosine_distance(q[i], cand[j]);
    return 0.5 * (D.array() * T.array()).sum() +
           0.5 * oracle::gw_four_index(oracle::distance_matrix(q), oracle::distance_matrix(cand), T);
  };
  CHECK(direct(spread) < direct(collapsed));

  const auto fgw = rerank_fgw(sl, qs, sets, {});
  CHECK(fgw.entries[0].item_id == "spread");
  CHECK(*fgw.entries[0].stage2_cost < *fgw.entries[1].stage2_cost);

  // Hard assignment sees only the equal feature costs and keeps cosine order.
  const auto h = rerank_hungarian(sl, qs, sets, true);
  CHECK(*h.entries[0].stage2_cost == doctest::Approx(*h.entries[1].stage2_cost).epsilon(1e-12));
  CHECK(h.entries[0].item_id == "collapsed");
}

TEST_CASE("pipeline stage 1 only equals cosine retrieve") {
  const auto w = make_world(8, 60, 10);
  PipelineConfig cfg;
  cfg.k = 7;
  const auto out = run_pipeline(w.queries, w.corpus, cfg, nullptr, nullptr);
  REQUIRE(out.size() == 10);
  for (std::size_t i = 0; i < 10; ++i)
    CHECK(out[i] == cosine_retrieve(w.queries.embeddings.row_vector(i), w.corpus, 7, w.queries.items[i].id));
}

TEST_CASE("pipeline reranks stay inside the shortlist") {
  const auto w = make_world(9, 80, 12);
  const PerObjectSources src{w.phrases, w.phrases};
  for (auto stage2 : {Stage2::Hungarian, Stage2::Fgw}) {
    PipelineConfig cfg;
    cfg.k = 8;
    cfg.stage2 = stage2;
    const auto out = run_pipeline(w.queries, w.corpus, cfg, nullptr, &src);
    PipelineConfig base;
    base.k = 8;
    const auto s1 = run_pipeline(w.queries, w.corpus, base, nullptr, nullptr);
    for (std::size_t i = 0; i < out.size(); ++i) {
      auto a = ids_of(out[i]);
      auto b = ids_of(s1[i]);
      CHECK(a.size() == b.size());
      std::sort(a.begin(), a.end());
      std::sort(b.begin(), b.end());
      CHECK(a == b);
    }
  }
}

TEST_CASE("pipeline with k = 1 is a no-op for fgw") {
  const auto w = make_world(10, 40, 8);
  const PerObjectSources src{w.phrases, w.phrases};
  PipelineConfig cfg;
  cfg.k = 1;
  const auto s1 = run_pipeline(w.queries, w.corpus, cfg, nullptr, nullptr);
  cfg.stage2 = Stage2::Fgw;
  const auto s2 = run_pipeline(w.queries, w.corpus, cfg, nullptr, &src);
  for (std::size_t i = 0; i < s1.size(); ++i) CHECK(ids_of(s1[i]) == ids_of(s2[i]));
}

TEST_CASE("pipeline output does not depend on the job count") {
  const auto w = make_world(11, 80, 16);
  const PerObjectSources src{w.phrases, w.phrases};
  PipelineConfig cfg;
  cfg.k = 10;
  cfg.stage2 = Stage2::Fgw;
  const auto one = format_results(run_pipeline(w.queries, w.corpus, cfg, nullptr, &src));
  cfg.jobs = 4;
  CHECK(format_results(run_pipeline(w.queries, w.corpus, cfg, nullptr, &src)) == one);
  CHECK(format_results(run_pipeline(w.queries, w.corpus, cfg, nullptr, &src)) == one);
}

TEST_CASE("mapped and steered stage 1") {
  const auto w = make_world(12, 50, 6, 16);
  auto g = oracle::rng(12);
  const RidgeMapper m{oracle::uniform_matrix(g, 17, 16, -1, 1), 0.0};
  PipelineConfig mapped;
  mapped.stage1 = Stage1::RidgeMapped;
  mapped.k = 10;
  const auto a = run_pipeline(w.queries, w.corpus, mapped, &m, nullptr);

  PipelineConfig steered = mapped;
  steered.stage1 = Stage1::RidgePlusSteer;
  steered.steering = Steering{steering_vector(oracle::unit_vector(g, 16), oracle::unit_vector(g, 16)), 0.0};
  CHECK(run_pipeline(w.queries, w.corpus, steered, &m, nullptr) == a);

  steered.steering->alpha = 2.0;
  CHECK_FALSE(run_pipeline(w.queries, w.corpus, steered, &m, nullptr) == a);

  // The stored corpus is untouched.
  const auto before = w.corpus.embeddings;
  run_pipeline(w.queries, w.corpus, steered, &m, nullptr);
  CHECK(w.corpus.embeddings == before);
}

TEST_CASE("pipeline configuration errors come before any work") {
  const auto w = make_world(13, 10, 2, 8);
  const RidgeMapper m{Eigen::MatrixXd::Zero(9, 8), 0.0};
  PipelineConfig cfg;
  cfg.stage1 = Stage1::RidgeMapped;
  CHECK(kind_of([&] { run_pipeline(w.queries, w.corpus, cfg, nullptr, nullptr); }) == ErrorKind::Usage);
  cfg.stage1 = Stage1::Raw;
  CHECK(kind_of([&] { run_pipeline(w.queries, w.corpus, cfg, &m, nullptr); }) == ErrorKind::Usage);
  cfg.stage1 = Stage1::RidgePlusSteer;
  CHECK(kind_of([&] { run_pipeline(w.queries, w.corpus, cfg, &m, nullptr); }) == ErrorKind::Usage);
  cfg.stage1 = Stage1::Raw;
  cfg.stage2 = Stage2::Fgw;
  CHECK(kind_of([&] { run_pipeline(w.queries, w.corpus, cfg, nullptr, nullptr); }) == ErrorKind::Usage);
  cfg.stage2 = Stage2::None;
  cfg.k = 0;
  CHECK(kind_of([&] { run_pipeline(w.queries, w.corpus, cfg, nullptr, nullptr); }) == ErrorKind::Usage);
  CHECK(parse_stage2("fgw") == Stage2::Fgw);
  CHECK(to_string(parse_stage1("ridge_plus_steer")) == "ridge_plus_steer");
  CHECK_THROWS_AS(parse_stage1("cosine"), Error);
}

TEST_CASE("merged queries average the per-object vectors") {
  const auto w = make_world(14, 40, 5);
  const auto merged = run_merged_queries(w.queries, w.corpus, w.phrases, 5);
  for (std::size_t i = 0; i < 5; ++i) {
    const auto set = build_per_object_set(w.queries.items[i], w.phrases);
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(set.vectors.front().size());
    for (const auto& v : set.vectors) mean += v;
    const auto ref = cosine_retrieve(mean, w.corpus, 5, w.queries.items[i].id);
    CHECK(ids_of(merged[i]) == ids_of(ref));
    for (std::size_t r = 0; r < ref.entries.size(); ++r)
      CHECK(merged[i].entries[r].score == doctest::Approx(ref.entries[r].score).epsilon(1e-12));
  }
}

TEST_CASE("results file round trip") {
  oracle::TempDir dir("results");
  std::vector<RankedList> lists{
      {"q1", {{"a", 0.5, 0.25, {"warn"}}, {"b", 0.1 + 0.2, std::nullopt, {}}}, 1},
      {"q2", {{"c", -1e-300, std::nullopt, {}}}, std::nullopt}};
  write_results(lists, dir / "r.jsonl");
  CHECK(read_results(dir / "r.jsonl") == lists);
  CHECK(lists[0].rank_of("b") == std::optional<std::size_t>(2));
  CHECK_FALSE(lists[0].rank_of("z").has_value());
  CHECK_THROWS_AS(parse_results("{\"query_id\":\"q\",\"rank\":2,\"item_id\":\"a\",\"score\":1}\n"), Error);
  CHECK_THROWS_AS(parse_results("nope\n"), Error);
}
