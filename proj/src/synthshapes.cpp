#include "nbra/synthshapes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <random>
#include <unordered_map>

#include "nbra/error.hpp"

namespace nbra::shapes {

namespace {

constexpr std::array<const char*, kNumShapes> kShapeNames = {"circle",   "square",  "triangle",
                                                             "pentagon", "hexagon", "star"};
constexpr std::array<const char*, kNumColors> kColorNames = {"red",    "green",  "blue", "yellow",
                                                             "purple", "orange", "cyan"};

enum class Stream : std::uint32_t { Concepts = 1, Rotation = 2, ImageNoise = 3, TextNoise = 4 };

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::mt19937_64 make_rng(std::uint64_t seed, Stream stream, std::uint64_t key = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(key),
                    static_cast<std::uint32_t>(key >> 32)};
  return std::mt19937_64(seq);
}

Eigen::VectorXd gaussian(std::mt19937_64& rng, std::uint32_t dim) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Eigen::VectorXd v(dim);
  for (std::uint32_t k = 0; k < dim; ++k) v[k] = n01(rng);
  return v;
}

std::size_t primitive_index(const Primitive& p) {
  const auto& all = all_primitives();
  auto it = std::lower_bound(all.begin(), all.end(), p,
                             [](const Primitive& a, const Primitive& b) { return a.label() < b.label(); });
  return static_cast<std::size_t>(it - all.begin());
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string polygon_points(double cx, double cy, int vertices, double r, double inner_ratio) {
  // Star alternates outer and inner radius; plain polygons use a single radius.
  const bool star = inner_ratio > 0.0;
  const int n = star ? 2 * vertices : vertices;
  std::string pts;
  for (int i = 0; i < n; ++i) {
    const double radius = (star && i % 2 == 1) ? r * inner_ratio : r;
    const double angle = -std::numbers::pi / 2 + 2 * std::numbers::pi * i / n;
    if (i) pts += ' ';
    pts += fmt(cx + radius * std::cos(angle)) + "," + fmt(cy + radius * std::sin(angle));
  }
  return pts;
}

std::map<Primitive, std::size_t> counts(const Composition& c) {
  std::map<Primitive, std::size_t> m;
  for (const auto& p : c.primitives()) ++m[p];
  return m;
}

}  // namespace

std::string to_string(Shape s) { return kShapeNames[static_cast<std::size_t>(s)]; }
std::string to_string(Color c) { return kColorNames[static_cast<std::size_t>(c)]; }

Shape parse_shape(const std::string& s) {
  for (std::size_t i = 0; i < kNumShapes; ++i)
    if (s == kShapeNames[i]) return kAllShapes[i];
  fail(ErrorKind::Validation, "unknown shape '" + s + "'");
}

Color parse_color(const std::string& s) {
  for (std::size_t i = 0; i < kNumColors; ++i)
    if (s == kColorNames[i]) return kAllColors[i];
  fail(ErrorKind::Validation, "unknown color '" + s + "'");
}

std::string Primitive::label() const { return to_string(color) + " " + to_string(shape); }

const std::vector<Primitive>& all_primitives() {
  static const std::vector<Primitive> prims = [] {
    std::vector<Primitive> v;
    for (auto c : kAllColors)
      for (auto s : kAllShapes) v.push_back(Primitive{s, c});
    std::sort(v.begin(), v.end(), [](const Primitive& a, const Primitive& b) { return a.label() < b.label(); });
    return v;
  }();
  return prims;
}

std::string caption_of(const std::vector<Primitive>& primitives) {
  if (primitives.empty()) fail(ErrorKind::Validation, "caption of an empty composition");
  std::vector<std::string> labels;
  labels.reserve(primitives.size());
  for (const auto& p : primitives) labels.push_back(p.label());
  std::sort(labels.begin(), labels.end());
  std::string out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (i) out += ", ";
    out += labels[i];
  }
  return out;
}

Composition::Composition(std::vector<Primitive> primitives)
    : primitives_(std::move(primitives)), caption_(caption_of(primitives_)) {
  std::sort(primitives_.begin(), primitives_.end(),
            [](const Primitive& a, const Primitive& b) { return a.label() < b.label(); });
}

std::vector<Composition> enumerate_compositions(std::size_t arity) {
  if (arity == 0) fail(ErrorKind::Usage, "arity must be at least 1");
  const auto& prims = all_primitives();
  std::vector<Composition> out;
  // Non-decreasing index tuples over the label-sorted primitives.
  std::vector<std::size_t> idx(arity, 0);
  while (true) {
    std::vector<Primitive> ps;
    ps.reserve(arity);
    for (auto i : idx) ps.push_back(prims[i]);
    out.emplace_back(std::move(ps));
    std::size_t pos = arity;
    while (pos > 0 && idx[pos - 1] == prims.size() - 1) --pos;
    if (pos == 0) break;
    ++idx[pos - 1];
    for (std::size_t k = pos; k < arity; ++k) idx[k] = idx[pos - 1];
  }
  std::sort(out.begin(), out.end(),
            [](const Composition& a, const Composition& b) { return a.caption() < b.caption(); });
  return out;
}

Composition parse_caption(const std::string& caption) {
  std::vector<Primitive> ps;
  std::size_t start = 0;
  while (start <= caption.size()) {
    auto end = caption.find(", ", start);
    if (end == std::string::npos) end = caption.size();
    const auto token = caption.substr(start, end - start);
    const auto space = token.find(' ');
    if (space == std::string::npos) fail(ErrorKind::Validation, "bad caption token '" + token + "'");
    ps.push_back(Primitive{parse_shape(token.substr(space + 1)), parse_color(token.substr(0, space))});
    start = end + 2;
  }
  return Composition(std::move(ps));
}

ItemRecord to_item(const std::string& id, const Composition& c) {
  ItemRecord r;
  r.id = id;
  r.caption = c.caption();
  for (const auto& p : c.primitives()) {
    r.objects.push_back(ObjectAnnotation{to_string(p.shape), {to_string(p.color)}, {"color"}});
  }
  return r;
}

Composition from_item(const ItemRecord& item) {
  if (item.objects.empty()) fail(ErrorKind::Validation, "item " + item.id + " has no objects");
  std::vector<Primitive> ps;
  for (const auto& o : item.objects) {
    if (o.attributes.size() != 1) {
      fail(ErrorKind::Validation, "item " + item.id + ": shape objects carry exactly one color attribute");
    }
    ps.push_back(Primitive{parse_shape(o.noun), parse_color(o.attributes.front())});
  }
  return Composition(std::move(ps));
}

std::string emit_svg(const Composition& c) {
  if (c.arity() > kAnchors.size()) fail(ErrorKind::Usage, "SVG layout holds at most three primitives");
  const std::string size = std::to_string(kCanvasSize);
  std::string svg = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + size + "\" height=\"" + size +
         "\" viewBox=\"0 0 " + size + " " + size + "\" style=\"background-color:white\">\n";
  const double r = kPrimitiveRadius;
  for (std::size_t i = 0; i < c.arity(); ++i) {
    const auto& p = c.primitives()[i];
    const auto [cx, cy] = kAnchors[i];
    const std::string fill = " fill=\"" + to_string(p.color) + "\"";
    switch (p.shape) {
      case Shape::Circle:
        svg += "  <circle cx=\"" + fmt(cx) + "\" cy=\"" + fmt(cy) + "\" r=\"" + fmt(r) + "\"" + fill + "/>\n";
        break;
      case Shape::Square: {
        const double side = r * std::numbers::sqrt2;
        svg += "  <rect x=\"" + fmt(cx - side / 2) + "\" y=\"" + fmt(cy - side / 2) + "\" width=\"" + fmt(side) +
               "\" height=\"" + fmt(side) + "\"" + fill + "/>\n";
        break;
      }
      case Shape::Triangle:
        svg += "  <polygon points=\"" + polygon_points(cx, cy, 3, r, 0.0) + "\"" + fill + "/>\n";
        break;
      case Shape::Pentagon:
        svg += "  <polygon points=\"" + polygon_points(cx, cy, 5, r, 0.0) + "\"" + fill + "/>\n";
        break;
      case Shape::Hexagon:
        svg += "  <polygon points=\"" + polygon_points(cx, cy, 6, r, 0.0) + "\"" + fill + "/>\n";
        break;
      case Shape::Star:
        svg += "  <polygon points=\"" + polygon_points(cx, cy, 5, r, 0.4) + "\"" + fill + "/>\n";
        break;
    }
  }
  svg += "</svg>\n";
  return svg;
}

SynthEmbeddings synth_embed(const std::vector<Composition>& compositions, const SynthEmbedConfig& config) {
  if (config.dim < 2) fail(ErrorKind::Usage, "synthetic embedding dim must be at least 2");
  if (!(config.noise_sigma >= 0.0)) fail(ErrorKind::Usage, "noise_sigma must be nonnegative");
  const std::uint32_t d = config.dim;

  std::vector<Eigen::VectorXd> concepts;
  {
    auto rng = make_rng(config.seed, Stream::Concepts);
    for (std::size_t p = 0; p < kNumPrimitives; ++p) {
      Eigen::VectorXd v = gaussian(rng, d);
      concepts.push_back(v / v.norm());
    }
  }

  Eigen::MatrixXd rotation = Eigen::MatrixXd::Identity(d, d);
  if (config.modality_rotation) {
    auto rng = make_rng(config.seed, Stream::Rotation);
    Eigen::MatrixXd g(d, d);
    for (std::uint32_t j = 0; j < d; ++j) g.col(j) = gaussian(rng, d);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(d, d);
    const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (std::uint32_t j = 0; j < d; ++j)
      if (r(j, j) < 0) q.col(j) = -q.col(j);
    rotation = q;
  }

  std::vector<Eigen::VectorXd> text_rows;
  std::vector<Eigen::VectorXd> image_rows;
  text_rows.reserve(compositions.size());
  image_rows.reserve(compositions.size());
  for (const auto& c : compositions) {
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(d);
    for (const auto& p : c.primitives()) sum += concepts[primitive_index(p)];
    const auto key = fnv1a(c.caption());

    auto img_rng = make_rng(config.seed, Stream::ImageNoise, key);
    Eigen::VectorXd img = sum;
    if (config.noise_sigma > 0) img += config.noise_sigma * gaussian(img_rng, d);

    auto txt_rng = make_rng(config.seed, Stream::TextNoise, key);
    Eigen::VectorXd txt = config.modality_rotation ? Eigen::VectorXd(rotation * sum) : sum;
    if (config.noise_sigma > 0) txt += config.noise_sigma * gaussian(txt_rng, d);

    if (img.norm() == 0.0 || txt.norm() == 0.0) {
      fail(ErrorKind::Degenerate, "synthetic embedding collapsed to zero for " + c.caption());
    }
    image_rows.push_back(img / img.norm());
    text_rows.push_back(txt / txt.norm());
  }
  if (compositions.empty()) return {EmbeddingMatrix(0, d, {}, true), EmbeddingMatrix(0, d, {}, true)};
  // Rounding to float32 can push norms off by ~1e-7; renormalize in float space.
  return {normalize_rows(EmbeddingMatrix::from_rows(text_rows)),
          normalize_rows(EmbeddingMatrix::from_rows(image_rows))};
}

std::size_t overlap(const Composition& a, const Composition& b) {
  const auto ca = counts(a);
  const auto cb = counts(b);
  std::size_t n = 0;
  for (const auto& [p, k] : ca) {
    auto it = cb.find(p);
    if (it != cb.end()) n += std::min(k, it->second);
  }
  return n;
}

int heuristic_relevance(const Composition& query, const Composition& item) {
  const double scaled = static_cast<double>(overlap(query, item)) / static_cast<double>(query.arity()) * 4.0;
  // nearbyint under the default rounding mode rounds half to even.
  return static_cast<int>(std::nearbyint(scaled));
}

double heuristic_similarity(const Composition& query, const Composition& item) {
  return static_cast<double>(overlap(query, item)) / static_cast<double>(query.arity());
}

SubstitutionMatrix substitution_matrix(const std::vector<RankedList>& results, const Corpus& corpus,
                                       const std::vector<Composition>& queries) {
  if (results.size() != queries.size()) {
    fail(ErrorKind::Validation, "substitution matrix needs one query composition per result list");
  }
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < corpus.items.size(); ++i) index.emplace(corpus.items[i].id, i);

  SubstitutionMatrix m{};
  for (std::size_t q = 0; q < results.size(); ++q) {
    if (results[q].entries.empty()) continue;
    const auto& top = results[q].entries.front().item_id;
    auto it = index.find(top);
    if (it == index.end()) fail(ErrorKind::Validation, "result id '" + top + "' not in corpus");
    const auto retrieved = from_item(corpus.items[it->second]);

    // Remove exact matches from both sides; what is left of the query was substituted.
    auto query_left = counts(queries[q]);
    auto retrieved_left = counts(retrieved);
    for (auto& [p, k] : query_left) {
      auto r = retrieved_left.find(p);
      if (r == retrieved_left.end()) continue;
      const auto shared = std::min(k, r->second);
      k -= shared;
      r->second -= shared;
    }
    for (const auto& [p, k] : query_left) {
      if (k == 0) continue;
      for (auto s : kAllShapes) {
        if (s == p.shape) continue;
        auto r = retrieved_left.find(Primitive{s, p.color});
        if (r != retrieved_left.end() && r->second > 0) {
          m[static_cast<std::size_t>(p.shape)][static_cast<std::size_t>(s)] += k;
        }
      }
    }
  }
  return m;
}

}  // namespace nbra::shapes
