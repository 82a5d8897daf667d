#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace nbra {

/// Row-major float32 matrix of embeddings, one row per item.
///
/// Every value is finite. When `unit_normalized()` is set, every row has
/// Euclidean norm within 1e-4 of one; the constructor checks both.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;
  EmbeddingMatrix(std::size_t count, std::uint32_t dim, std::vector<float> values,
                  bool unit_normalized = false);

  static EmbeddingMatrix zeros(std::size_t count, std::uint32_t dim);

  std::size_t count() const noexcept { return count_; }
  std::uint32_t dim() const noexcept { return dim_; }
  bool unit_normalized() const noexcept { return unit_normalized_; }
  bool empty() const noexcept { return count_ == 0; }

  std::span<const float> row(std::size_t i) const;
  std::span<const float> values() const noexcept { return values_; }

  /// Row as a 64-bit vector, for solver arithmetic.
  Eigen::VectorXd row_vector(std::size_t i) const;

  /// Builds a matrix from 64-bit rows (rounded to float32).
  static EmbeddingMatrix from_rows(const std::vector<Eigen::VectorXd>& rows,
                                   bool unit_normalized = false);
  static EmbeddingMatrix from_eigen(const Eigen::MatrixXd& m, bool unit_normalized = false);
  Eigen::MatrixXd to_eigen() const;

  bool operator==(const EmbeddingMatrix& other) const = default;

 private:
  std::size_t count_ = 0;
  std::uint32_t dim_ = 1;
  std::vector<float> values_;
  bool unit_normalized_ = false;
};

struct ObjectAnnotation {
  std::string noun;
  std::vector<std::string> attributes;
  std::vector<std::string> attribute_kinds;  // optional; empty when absent

  /// "a_1 a_2 ... a_L noun".
  std::string phrase() const;

  bool operator==(const ObjectAnnotation&) const = default;
};

struct ItemRecord {
  std::string id;
  std::string caption;
  std::vector<ObjectAnnotation> objects;
  std::optional<std::string> split;

  bool operator==(const ItemRecord&) const = default;
};

enum class Modality { Text, Image };

Modality parse_modality(const std::string& s);
std::string to_string(Modality m);

/// Items bound row-for-row to an embedding matrix. Immutable after load.
struct Corpus {
  Modality modality = Modality::Image;
  std::vector<ItemRecord> items;
  EmbeddingMatrix embeddings;

  std::size_t size() const noexcept { return items.size(); }
  /// Row index of `id`, or nullopt.
  std::optional<std::size_t> find(const std::string& id) const;
};

Corpus make_corpus(Modality modality, std::vector<ItemRecord> items, EmbeddingMatrix embeddings);

// Binary container: "NBRA", u32 version, u64 count, u32 dim, u8 dtype, u8 flags,
// then count*dim little-endian values, row-major.
inline constexpr char kMagic[4] = {'N', 'B', 'R', 'A'};
inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::uint8_t kDtypeFloat32 = 0;
inline constexpr std::uint8_t kDtypeFloat64 = 1;
inline constexpr std::uint8_t kFlagUnitNormalized = 0x01;
inline constexpr std::size_t kHeaderSize = 4 + 4 + 8 + 4 + 1 + 1;

std::vector<std::uint8_t> encode_embeddings(const EmbeddingMatrix& m);
EmbeddingMatrix decode_embeddings(std::span<const std::uint8_t> bytes);

EmbeddingMatrix read_embeddings(const std::filesystem::path& path);
void write_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path);

/// float64 variant of the container (dtype 1), used for mapper weights.
void write_matrix64(const Eigen::MatrixXd& m, const std::filesystem::path& path);
Eigen::MatrixXd read_matrix64(const std::filesystem::path& path);

/// Scales every row to unit norm. Throws Degenerate naming the first zero row.
EmbeddingMatrix normalize_rows(const EmbeddingMatrix& m);

ItemRecord parse_item_record(const std::string& line);
std::string format_item_record(const ItemRecord& r);

std::vector<ItemRecord> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::vector<ItemRecord>& items, const std::filesystem::path& path);

Corpus load_corpus(const std::filesystem::path& manifest, const std::filesystem::path& embeddings,
                   Modality modality);

}  // namespace nbra
