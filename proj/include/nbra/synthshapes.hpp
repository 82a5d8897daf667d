#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nbra/embedding_store.hpp"
#include "nbra/ranking.hpp"

namespace nbra::shapes {

enum class Shape : std::uint8_t { Circle, Square, Triangle, Pentagon, Hexagon, Star };
enum class Color : std::uint8_t { Red, Green, Blue, Yellow, Purple, Orange, Cyan };

inline constexpr std::size_t kNumShapes = 6;
inline constexpr std::size_t kNumColors = 7;
inline constexpr std::size_t kNumPrimitives = kNumShapes * kNumColors;

inline constexpr std::array<Shape, kNumShapes> kAllShapes = {
    Shape::Circle, Shape::Square, Shape::Triangle, Shape::Pentagon, Shape::Hexagon, Shape::Star};
inline constexpr std::array<Color, kNumColors> kAllColors = {
    Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Purple, Color::Orange, Color::Cyan};

std::string to_string(Shape s);
std::string to_string(Color c);
Shape parse_shape(const std::string& s);
Color parse_color(const std::string& s);

struct Primitive {
  Shape shape = Shape::Circle;
  Color color = Color::Red;

  /// "<color> <shape>", the caption token and the per-object phrase.
  std::string label() const;

  auto operator<=>(const Primitive&) const = default;
};

/// All 42 primitives, sorted by label.
const std::vector<Primitive>& all_primitives();

/// Canonical caption: labels sorted byte-wise, joined by ", ".
std::string caption_of(const std::vector<Primitive>& primitives);

/// A multiset of primitives, stored sorted by label.
class Composition {
 public:
  explicit Composition(std::vector<Primitive> primitives);

  const std::vector<Primitive>& primitives() const noexcept { return primitives_; }
  const std::string& caption() const noexcept { return caption_; }
  std::size_t arity() const noexcept { return primitives_.size(); }

  bool operator==(const Composition& o) const { return caption_ == o.caption_; }

 private:
  std::vector<Primitive> primitives_;
  std::string caption_;
};

/// Every multiset of `arity` primitives, ordered by caption.
std::vector<Composition> enumerate_compositions(std::size_t arity = 3);

/// Parses "blue circle, green star, red pentagon".
Composition parse_caption(const std::string& caption);

/// Manifest record: caption plus one object per primitive (noun = shape,
/// attributes = [color], attribute_kinds = ["color"]).
ItemRecord to_item(const std::string& id, const Composition& c);
/// Recovers the composition from an item's object annotations.
Composition from_item(const ItemRecord& item);

// Layout constants for the SVG renderer.
inline constexpr int kCanvasSize = 224;
inline constexpr std::array<std::pair<double, double>, 3> kAnchors = {
    std::pair{40.0, 112.0}, std::pair{112.0, 112.0}, std::pair{184.0, 112.0}};
inline constexpr double kPrimitiveRadius = 30.0;

/// 224x224 white canvas with one element per primitive at the fixed anchors.
/// Only compositions of arity 1..3 can be drawn.
std::string emit_svg(const Composition& c);

struct SynthEmbedConfig {
  std::uint64_t seed = 0;
  std::uint32_t dim = 64;
  double noise_sigma = 0.0;
  bool modality_rotation = false;
};

struct SynthEmbeddings {
  EmbeddingMatrix text;
  EmbeddingMatrix image;
};

/// Seeded stand-in for a dual encoder. One random unit concept vector per
/// primitive; image row = normalize(sum + sigma*noise), text row =
/// normalize(R*sum + sigma*noise) with R a seeded rotation or identity.
/// A composition's rows depend only on (seed, caption), not on list position.
SynthEmbeddings synth_embed(const std::vector<Composition>& compositions, const SynthEmbedConfig& config);

/// Size of the multiset intersection of two compositions.
std::size_t overlap(const Composition& a, const Composition& b);

/// round(overlap / |query| * 4), ties to even.
int heuristic_relevance(const Composition& query, const Composition& item);

/// Continuous counterpart, overlap / |query|, used as the symbolic CAS similarity.
double heuristic_similarity(const Composition& query, const Composition& item);

using SubstitutionMatrix = std::array<std::array<std::size_t, kNumShapes>, kNumShapes>;

/// Counts color-preserving shape substitutions at rank 1. Row = query shape,
/// column = retrieved shape. `queries[i]` is the composition behind `results[i]`.
SubstitutionMatrix substitution_matrix(const std::vector<RankedList>& results, const Corpus& corpus,
                                       const std::vector<Composition>& queries);

}  // namespace nbra::shapes
