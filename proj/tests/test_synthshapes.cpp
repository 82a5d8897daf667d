#include <doctest.h>

#include <algorithm>
#include <map>
#include <regex>
#include <set>

#include "nbra/error.hpp"
#include "nbra/synthshapes.hpp"
#include "oracles.hpp"

using namespace nbra;
using namespace nbra::shapes;

namespace {

const std::vector<std::string> kColorNames = {"red", "green", "blue", "yellow", "purple", "orange", "cyan"};
const std::vector<std::string> kShapeNames = {"circle", "square", "triangle", "pentagon", "hexagon", "star"};

// Every multiset of size k over the 42 labels, as canonical caption strings.
std::set<std::string> brute_force_captions(std::size_t k) {
  std::vector<std::string> labels;
  for (const auto& c : kColorNames)
    for (const auto& s : kShapeNames) labels.push_back(c + " " + s);
  std::set<std::string> out;
  std::vector<std::size_t> idx(k, 0);
  while (true) {
    std::vector<std::string> picked;
    for (auto i : idx) picked.push_back(labels[i]);
    std::sort(picked.begin(), picked.end());
    std::string cap;
    for (std::size_t i = 0; i < picked.size(); ++i) cap += (i ? ", " : "") + picked[i];
    out.insert(cap);
    std::size_t pos = k;
    while (pos > 0 && idx[pos - 1] == labels.size() - 1) --pos;
    if (pos == 0) break;
    ++idx[pos - 1];
    for (auto j = pos; j < k; ++j) idx[j] = idx[pos - 1];
  }
  return out;
}

std::size_t binomial(std::size_t n, std::size_t k) {
  std::size_t r = 1;
  for (std::size_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

Composition comp(const std::string& caption) { return parse_caption(caption); }

double cosine_rows(const EmbeddingMatrix& m, std::size_t a, std::size_t b) {
  return m.row_vector(a).dot(m.row_vector(b));
}

std::size_t count_of(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = hay.find(needle); p != std::string::npos; p = hay.find(needle, p + 1)) ++n;
  return n;
}

}  // namespace

TEST_CASE("primitive inventory") {
  CHECK(all_primitives().size() == 42);
  std::set<std::string> labels;
  for (const auto& p : all_primitives()) labels.insert(p.label());
  CHECK(labels.size() == 42);
  CHECK(std::is_sorted(all_primitives().begin(), all_primitives().end(),
                       [](const Primitive& a, const Primitive& b) { return a.label() < b.label(); }));
}

TEST_CASE("composition counts") {
  CHECK(enumerate_compositions(3).size() == 13244);
  CHECK(enumerate_compositions(1).size() == 42);
  CHECK(enumerate_compositions(2).size() == 903);
  CHECK_THROWS_AS(enumerate_compositions(0), Error);
}

TEST_CASE("enumeration matches a brute-force enumerator for arity 1..4") {
  for (std::size_t k = 1; k <= 4; ++k) {
    const auto comps = enumerate_compositions(k);
    CHECK(comps.size() == binomial(41 + k, k));
    if (k > 3) continue;  // the set comparison is slow beyond this
    const auto oracle_set = brute_force_captions(k);
    CHECK(oracle_set.size() == comps.size());
    std::set<std::string> ours;
    for (const auto& c : comps) ours.insert(c.caption());
    CHECK(ours == oracle_set);
  }
}

TEST_CASE("enumeration order is canonical") {
  const auto comps = enumerate_compositions(2);
  CHECK(std::is_sorted(comps.begin(), comps.end(),
                       [](const Composition& a, const Composition& b) { return a.caption() < b.caption(); }));
  CHECK(comps.front().caption() == "blue circle, blue circle");
}

TEST_CASE("captions") {
  const Composition c({{Shape::Pentagon, Color::Red}, {Shape::Circle, Color::Blue}, {Shape::Star, Color::Green}});
  CHECK(c.caption() == "blue circle, green star, red pentagon");
  CHECK(caption_of({{Shape::Circle, Color::Red}}) == "red circle");
  CHECK(caption_of({{Shape::Circle, Color::Blue}, {Shape::Square, Color::Red}, {Shape::Circle, Color::Blue}}) ==
        "blue circle, blue circle, red square");
  CHECK_THROWS_AS(caption_of({}), Error);
}

TEST_CASE("caption is invariant to input order") {
  std::vector<Primitive> ps = {{Shape::Star, Color::Cyan}, {Shape::Circle, Color::Cyan}, {Shape::Hexagon, Color::Red}};
  const auto ref = caption_of(ps);
  std::sort(ps.begin(), ps.end());
  do {
    CHECK(caption_of(ps) == ref);
  } while (std::next_permutation(ps.begin(), ps.end()));
}

TEST_CASE("caption parse round trip and items") {
  for (const auto& c : enumerate_compositions(2)) CHECK(parse_caption(c.caption()) == c);
  CHECK_THROWS_AS(parse_caption("red blob"), Error);
  CHECK_THROWS_AS(parse_caption(""), Error);

  const auto c = comp("blue circle, green star, red pentagon");
  const auto item = to_item("s00001", c);
  CHECK(item.caption == c.caption());
  REQUIRE(item.objects.size() == 3);
  CHECK(item.objects[1].noun == "star");
  CHECK(item.objects[1].attributes == std::vector<std::string>{"green"});
  CHECK(item.objects[1].attribute_kinds == std::vector<std::string>{"color"});
  CHECK(from_item(item) == c);
}

TEST_CASE("svg has three drawable elements at the anchors") {
  const std::regex drawable("<(circle|rect|polygon|path|ellipse|line|polyline)\\b");
  for (const auto& c : {comp("blue circle, green star, red pentagon"), comp("cyan square, red triangle, red hexagon")}) {
    const auto svg = emit_svg(c);
    CHECK(std::distance(std::sregex_iterator(svg.begin(), svg.end(), drawable), std::sregex_iterator()) == 3);
    CHECK(svg.find("width=\"224\"") != std::string::npos);
    CHECK(svg.find("height=\"224\"") != std::string::npos);
    CHECK(svg.find("white") != std::string::npos);
    CHECK(svg.rfind("</svg>") != std::string::npos);
  }
  const auto reds = emit_svg(comp("red circle, red circle, red circle"));
  CHECK(count_of(reds, "<circle") == 3);
  CHECK(count_of(reds, "fill=\"red\"") == 3);
  CHECK(reds.find("cx=\"40.00\"") != std::string::npos);
  CHECK(reds.find("cx=\"112.00\"") != std::string::npos);
  CHECK(reds.find("cx=\"184.00\"") != std::string::npos);

  const auto sq = emit_svg(comp("blue square, green hexagon, yellow star"));
  CHECK(count_of(sq, "<rect") == 1);
  CHECK(count_of(sq, "<polygon") == 2);
  CHECK(emit_svg(comp("blue square, green hexagon, yellow star")) == sq);
}

TEST_CASE("synthetic embeddings without noise or rotation agree across modalities") {
  const auto comps = enumerate_compositions(1);
  SynthEmbedConfig cfg;
  cfg.seed = 5;
  const auto e = synth_embed(comps, cfg);
  REQUIRE(e.text.count() == 42);
  for (std::size_t i = 0; i < e.text.values().size(); ++i) CHECK(std::abs(e.text.values()[i] - e.image.values()[i]) <= 1e-6);
}

TEST_CASE("synthetic embeddings are deterministic and unit norm") {
  auto all = enumerate_compositions(3);
  std::vector<Composition> sample(all.begin(), all.begin() + 200);
  SynthEmbedConfig cfg{17, 32, 0.3, true};
  const auto a = synth_embed(sample, cfg);
  const auto b = synth_embed(sample, cfg);
  CHECK(a.text == b.text);
  CHECK(a.image == b.image);
  CHECK(a.text.unit_normalized());
  for (std::size_t i = 0; i < a.image.count(); ++i) {
    CHECK(std::abs(a.image.row_vector(i).norm() - 1.0) <= 1e-6);
    CHECK(std::abs(a.text.row_vector(i).norm() - 1.0) <= 1e-6);
  }
  cfg.seed = 18;
  CHECK_FALSE(synth_embed(sample, cfg).image == a.image);
}

TEST_CASE("synthetic rows depend on the caption, not the list position") {
  auto all = enumerate_compositions(3);
  std::vector<Composition> fwd(all.begin(), all.begin() + 5);
  std::vector<Composition> rev(fwd.rbegin(), fwd.rend());
  SynthEmbedConfig cfg{3, 16, 0.2, true};
  const auto a = synth_embed(fwd, cfg);
  const auto b = synth_embed(rev, cfg);
  for (std::size_t i = 0; i < 5; ++i) CHECK(a.image.row_vector(i) == b.image.row_vector(4 - i));
}

TEST_CASE("shared primitives raise image-image cosine") {
  const auto base = comp("blue circle, green star, red pentagon");
  const auto share2 = comp("blue circle, green star, yellow hexagon");
  const auto share0 = comp("cyan square, orange triangle, purple hexagon");
  double sum2 = 0, sum0 = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto e = synth_embed({base, share2, share0}, SynthEmbedConfig{seed, 64, 0.0, false});
    sum2 += cosine_rows(e.image, 0, 1);
    sum0 += cosine_rows(e.image, 0, 2);
  }
  CHECK(sum2 / 100 > sum0 / 100);
}

TEST_CASE("synthetic config validation") {
  CHECK_THROWS_AS(synth_embed(enumerate_compositions(1), SynthEmbedConfig{0, 1, 0.0, false}), Error);
  CHECK_THROWS_AS(synth_embed(enumerate_compositions(1), SynthEmbedConfig{0, 8, -1.0, false}), Error);
}

TEST_CASE("heuristic relevance grades") {
  const auto q = comp("blue circle, green star, red pentagon");
  CHECK(heuristic_relevance(q, q) == 4);
  CHECK(heuristic_relevance(q, comp("cyan square, orange triangle, purple hexagon")) == 0);
  CHECK(heuristic_relevance(q, comp("blue circle, green star, yellow hexagon")) == 3);  // round(8/3)
  CHECK(heuristic_relevance(q, comp("blue circle, cyan star, yellow hexagon")) == 1);   // round(4/3)
  // 2 of 4 -> exactly 2.0; 1 of 8 would be 0.5 -> 0 under half-to-even.
  CHECK(heuristic_relevance(comp("red circle, red square"), comp("red circle, blue star")) == 2);
  CHECK(heuristic_similarity(q, comp("blue circle, green star, yellow hexagon")) == doctest::Approx(2.0 / 3.0));
  CHECK(overlap(comp("red circle, red circle, blue star"), comp("red circle, blue star, blue star")) == 2);
}

TEST_CASE("heuristic relevance is symmetric at equal arity and maximal on self") {
  const auto comps = enumerate_compositions(3);
  auto g = oracle::rng(77);
  std::uniform_int_distribution<std::size_t> pick(0, comps.size() - 1);
  for (int t = 0; t < 500; ++t) {
    const auto& a = comps[pick(g)];
    const auto& b = comps[pick(g)];
    CHECK(heuristic_relevance(a, b) == heuristic_relevance(b, a));
    CHECK(heuristic_relevance(a, a) == 4);
  }
}

namespace {

Corpus corpus_of(const std::vector<std::pair<std::string, std::string>>& rows) {
  std::vector<ItemRecord> items;
  for (const auto& [id, cap] : rows) items.push_back(to_item(id, comp(cap)));
  return make_corpus(Modality::Image, items, EmbeddingMatrix::zeros(items.size(), 2));
}

RankedList top1(const std::string& q, const std::string& id) { return RankedList{q, {{id, 1.0, {}, {}}}, {}}; }

// Independent scan: match exact pairs greedily, then for every unmatched query
// primitive look at every distinct unmatched retrieved shape of the same color.
std::size_t scan_substitutions(const Composition& q, const Composition& r) {
  std::vector<Primitive> ql = q.primitives(), rl = r.primitives();
  for (auto it = ql.begin(); it != ql.end();) {
    auto m = std::find(rl.begin(), rl.end(), *it);
    if (m != rl.end()) {
      rl.erase(m);
      it = ql.erase(it);
    } else {
      ++it;
    }
  }
  std::size_t n = 0;
  for (const auto& p : ql) {
    std::set<Shape> seen;
    for (const auto& x : rl)
      if (x.color == p.color && x.shape != p.shape) seen.insert(x.shape);
    n += seen.size();
  }
  return n;
}

}  // namespace

TEST_CASE("substitution matrix") {
  const auto corpus = corpus_of({{"a", "blue circle, green star, red pentagon"},
                                 {"b", "blue circle, green star, red hexagon"},
                                 {"c", "cyan square, orange triangle, purple hexagon"}});
  const auto q = comp("blue circle, green star, red pentagon");

  const auto perfect = substitution_matrix({top1("q", "a")}, corpus, {q});
  for (const auto& row : perfect)
    for (auto v : row) CHECK(v == 0);

  const auto swapped = substitution_matrix({top1("q", "b")}, corpus, {q});
  CHECK(swapped[static_cast<std::size_t>(Shape::Pentagon)][static_cast<std::size_t>(Shape::Hexagon)] == 1);
  std::size_t total = 0;
  for (const auto& row : swapped)
    for (auto v : row) total += v;
  CHECK(total == 1);

  CHECK_THROWS_AS(substitution_matrix({top1("q", "zzz")}, corpus, {q}), Error);
}

TEST_CASE("substitution totals match a brute-force scan") {
  const auto all = enumerate_compositions(3);
  auto g = oracle::rng(12);
  std::uniform_int_distribution<std::size_t> pick(0, all.size() - 1);
  std::vector<std::pair<std::string, std::string>> rows;
  for (int i = 0; i < 40; ++i) rows.emplace_back("i" + std::to_string(i), all[pick(g)].caption());
  const auto corpus = corpus_of(rows);

  std::vector<RankedList> results;
  std::vector<Composition> queries;
  std::size_t expected = 0;
  for (int t = 0; t < 200; ++t) {
    const auto q = all[pick(g)];
    const auto& r = rows[static_cast<std::size_t>(t % 40)];
    results.push_back(top1("q" + std::to_string(t), r.first));
    queries.push_back(q);
    expected += scan_substitutions(q, comp(r.second));
  }
  const auto m = substitution_matrix(results, corpus, queries);
  std::size_t total = 0;
  for (std::size_t i = 0; i < kNumShapes; ++i) {
    CHECK(m[i][i] == 0);
    for (auto v : m[i]) total += v;
  }
  CHECK(total == expected);
}
