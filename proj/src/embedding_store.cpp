#include "nbra/embedding_store.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include <json.hpp>

#include "nbra/error.hpp"
#include "nbra/io.hpp"

namespace nbra {

namespace {

using json = nlohmann::json;

constexpr double kUnitNormTolerance = 1e-4;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_le(std::span<const std::uint8_t> b, std::size_t offset, int width) {
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(b[offset + i]) << (8 * i);
  return v;
}

struct Header {
  std::uint64_t count = 0;
  std::uint32_t dim = 0;
  std::uint8_t dtype = 0;
  std::uint8_t flags = 0;
};

std::vector<std::uint8_t> encode_header(const Header& h) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_u32(out, kFormatVersion);
  put_u64(out, h.count);
  put_u32(out, h.dim);
  out.push_back(h.dtype);
  out.push_back(h.flags);
  return out;
}

Header decode_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    fail(ErrorKind::Format, "bad magic, expected NBRA");
  }
  if (bytes.size() < kHeaderSize) {
    fail(ErrorKind::Length, "file shorter than the " + std::to_string(kHeaderSize) + "-byte header");
  }
  const auto version = static_cast<std::uint32_t>(get_le(bytes, 4, 4));
  if (version != kFormatVersion) {
    fail(ErrorKind::Format, "unsupported format version " + std::to_string(version));
  }
  Header h;
  h.count = get_le(bytes, 8, 8);
  h.dim = static_cast<std::uint32_t>(get_le(bytes, 16, 4));
  h.dtype = bytes[20];
  h.flags = bytes[21];
  if (h.dim == 0) fail(ErrorKind::Format, "dim must be positive");
  return h;
}

void check_payload_length(const Header& h, std::size_t payload_bytes, std::size_t width) {
  const std::uint64_t expected = h.count * h.dim * width;
  if (payload_bytes < expected) {
    fail(ErrorKind::Length, "payload truncated: declared " + std::to_string(h.count) + "x" +
                                std::to_string(h.dim) + " needs " + std::to_string(expected) +
                                " bytes, found " + std::to_string(payload_bytes));
  }
  if (payload_bytes > expected) {
    fail(ErrorKind::Length, "payload has " + std::to_string(payload_bytes - expected) +
                                " trailing bytes beyond the declared shape");
  }
}

std::vector<std::string> string_list(const json& j, const char* field, std::size_t line_no) {
  std::vector<std::string> out;
  if (!j.is_array()) {
    fail(ErrorKind::Validation,
         "manifest line " + std::to_string(line_no) + ": '" + field + "' must be a list");
  }
  for (const auto& v : j) {
    if (!v.is_string()) {
      fail(ErrorKind::Validation,
           "manifest line " + std::to_string(line_no) + ": '" + field + "' entries must be strings");
    }
    out.push_back(v.get<std::string>());
  }
  return out;
}

ItemRecord parse_record_json(const json& j, std::size_t line_no) {
  const auto where = "manifest line " + std::to_string(line_no) + ": ";
  if (!j.is_object()) fail(ErrorKind::Validation, where + "record must be an object");
  if (!j.contains("id") || !j["id"].is_string()) fail(ErrorKind::Validation, where + "missing string 'id'");
  ItemRecord r;
  r.id = j["id"].get<std::string>();
  if (r.id.empty()) fail(ErrorKind::Validation, where + "empty id");
  if (j.contains("caption")) {
    if (!j["caption"].is_string()) fail(ErrorKind::Validation, where + "'caption' must be a string");
    r.caption = j["caption"].get<std::string>();
  }
  if (j.contains("objects")) {
    if (!j["objects"].is_array()) fail(ErrorKind::Validation, where + "'objects' must be a list");
    for (const auto& o : j["objects"]) {
      if (!o.is_object() || !o.contains("noun") || !o["noun"].is_string()) {
        fail(ErrorKind::Validation, where + "object without a string 'noun'");
      }
      ObjectAnnotation a;
      a.noun = o["noun"].get<std::string>();
      if (a.noun.empty()) fail(ErrorKind::Validation, where + "object with empty noun");
      if (o.contains("attributes")) a.attributes = string_list(o["attributes"], "attributes", line_no);
      if (o.contains("attribute_kinds")) {
        a.attribute_kinds = string_list(o["attribute_kinds"], "attribute_kinds", line_no);
      }
      r.objects.push_back(std::move(a));
    }
  }
  if (j.contains("split") && !j["split"].is_null()) {
    if (!j["split"].is_string()) fail(ErrorKind::Validation, where + "'split' must be a string");
    r.split = j["split"].get<std::string>();
  }
  return r;
}

}  // namespace

EmbeddingMatrix::EmbeddingMatrix(std::size_t count, std::uint32_t dim, std::vector<float> values,
                                 bool unit_normalized)
    : count_(count), dim_(dim), values_(std::move(values)), unit_normalized_(unit_normalized) {
  if (dim_ == 0) fail(ErrorKind::Validation, "embedding dim must be positive");
  if (values_.size() != count_ * dim_) {
    fail(ErrorKind::Length, "embedding values size " + std::to_string(values_.size()) +
                                " does not match " + std::to_string(count_) + "x" + std::to_string(dim_));
  }
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (!std::isfinite(values_[i])) {
      fail(ErrorKind::Validation, "non-finite value at row " + std::to_string(i / dim_) + ", column " +
                                      std::to_string(i % dim_));
    }
  }
  if (unit_normalized_) {
    for (std::size_t r = 0; r < count_; ++r) {
      double sq = 0.0;
      for (float v : row(r)) sq += static_cast<double>(v) * v;
      if (std::abs(std::sqrt(sq) - 1.0) > kUnitNormTolerance) {
        fail(ErrorKind::Validation,
             "row " + std::to_string(r) + " flagged unit-normalized but has norm " + std::to_string(std::sqrt(sq)));
      }
    }
  }
}

EmbeddingMatrix EmbeddingMatrix::zeros(std::size_t count, std::uint32_t dim) {
  return EmbeddingMatrix(count, dim, std::vector<float>(count * dim, 0.0f));
}

std::span<const float> EmbeddingMatrix::row(std::size_t i) const {
  if (i >= count_) fail(ErrorKind::Validation, "row index " + std::to_string(i) + " out of range");
  return std::span<const float>(values_).subspan(i * dim_, dim_);
}

Eigen::VectorXd EmbeddingMatrix::row_vector(std::size_t i) const {
  auto r = row(i);
  Eigen::VectorXd v(dim_);
  for (std::uint32_t k = 0; k < dim_; ++k) v[k] = r[k];
  return v;
}

EmbeddingMatrix EmbeddingMatrix::from_rows(const std::vector<Eigen::VectorXd>& rows,
                                           bool unit_normalized) {
  if (rows.empty()) fail(ErrorKind::Validation, "from_rows needs at least one row to infer dim");
  const auto dim = static_cast<std::uint32_t>(rows.front().size());
  std::vector<float> values;
  values.reserve(rows.size() * dim);
  for (const auto& r : rows) {
    if (r.size() != dim) fail(ErrorKind::Validation, "ragged rows");
    for (Eigen::Index k = 0; k < r.size(); ++k) values.push_back(static_cast<float>(r[k]));
  }
  return EmbeddingMatrix(rows.size(), dim, std::move(values), unit_normalized);
}

EmbeddingMatrix EmbeddingMatrix::from_eigen(const Eigen::MatrixXd& m, bool unit_normalized) {
  std::vector<float> values;
  values.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index k = 0; k < m.cols(); ++k) values.push_back(static_cast<float>(m(i, k)));
  return EmbeddingMatrix(static_cast<std::size_t>(m.rows()), static_cast<std::uint32_t>(m.cols()),
                         std::move(values), unit_normalized);
}

Eigen::MatrixXd EmbeddingMatrix::to_eigen() const {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(count_), dim_);
  for (std::size_t i = 0; i < count_; ++i)
    for (std::uint32_t k = 0; k < dim_; ++k) m(static_cast<Eigen::Index>(i), k) = values_[i * dim_ + k];
  return m;
}

std::string ObjectAnnotation::phrase() const {
  std::string out;
  for (const auto& a : attributes) {
    out += a;
    out += ' ';
  }
  out += noun;
  return out;
}

Modality parse_modality(const std::string& s) {
  if (s == "text") return Modality::Text;
  if (s == "image") return Modality::Image;
  fail(ErrorKind::Usage, "unknown modality '" + s + "' (expected text or image)");
}

std::string to_string(Modality m) { return m == Modality::Text ? "text" : "image"; }

std::optional<std::size_t> Corpus::find(const std::string& id) const {
  for (std::size_t i = 0; i < items.size(); ++i)
    if (items[i].id == id) return i;
  return std::nullopt;
}

Corpus make_corpus(Modality modality, std::vector<ItemRecord> items, EmbeddingMatrix embeddings) {
  if (items.size() != embeddings.count()) {
    fail(ErrorKind::Length, "manifest has " + std::to_string(items.size()) + " records but embeddings have " +
                                std::to_string(embeddings.count()) + " rows");
  }
  std::unordered_set<std::string> seen;
  for (const auto& it : items) {
    if (!seen.insert(it.id).second) fail(ErrorKind::Validation, "duplicate id \"" + it.id + "\"");
  }
  return Corpus{modality, std::move(items), std::move(embeddings)};
}

std::vector<std::uint8_t> encode_embeddings(const EmbeddingMatrix& m) {
  Header h{m.count(), m.dim(), kDtypeFloat32,
           static_cast<std::uint8_t>(m.unit_normalized() ? kFlagUnitNormalized : 0)};
  auto out = encode_header(h);
  out.reserve(kHeaderSize + m.values().size() * 4);
  for (float v : m.values()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

EmbeddingMatrix decode_embeddings(std::span<const std::uint8_t> bytes) {
  const Header h = decode_header(bytes);
  if (h.dtype != kDtypeFloat32) {
    fail(ErrorKind::Format, "unsupported dtype " + std::to_string(h.dtype) + " for embeddings");
  }
  check_payload_length(h, bytes.size() - kHeaderSize, 4);
  std::vector<float> values(h.count * h.dim);
  for (std::size_t i = 0; i < values.size(); ++i) {
    values[i] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(bytes, kHeaderSize + 4 * i, 4)));
  }
  return EmbeddingMatrix(h.count, h.dim, std::move(values), (h.flags & kFlagUnitNormalized) != 0);
}

EmbeddingMatrix read_embeddings(const std::filesystem::path& path) {
  return decode_embeddings(io::read_file(path));
}

void write_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_embeddings(m));
}

void write_matrix64(const Eigen::MatrixXd& m, const std::filesystem::path& path) {
  Header h{static_cast<std::uint64_t>(m.rows()), static_cast<std::uint32_t>(m.cols()), kDtypeFloat64, 0};
  auto out = encode_header(h);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index k = 0; k < m.cols(); ++k) {
      if (!std::isfinite(m(i, k))) fail(ErrorKind::Validation, "non-finite matrix entry");
      put_u64(out, std::bit_cast<std::uint64_t>(m(i, k)));
    }
  }
  io::write_file_atomic(path, out);
}

Eigen::MatrixXd read_matrix64(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  const Header h = decode_header(bytes);
  if (h.dtype != kDtypeFloat64) {
    fail(ErrorKind::Format, "expected float64 dtype, found " + std::to_string(h.dtype));
  }
  check_payload_length(h, bytes.size() - kHeaderSize, 8);
  Eigen::MatrixXd m(static_cast<Eigen::Index>(h.count), h.dim);
  std::size_t off = kHeaderSize;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index k = 0; k < m.cols(); ++k, off += 8) {
      m(i, k) = std::bit_cast<double>(get_le(bytes, off, 8));
      if (!std::isfinite(m(i, k))) fail(ErrorKind::Validation, "non-finite matrix entry");
    }
  }
  return m;
}

EmbeddingMatrix normalize_rows(const EmbeddingMatrix& m) {
  std::vector<float> out(m.values().begin(), m.values().end());
  const std::uint32_t d = m.dim();
  for (std::size_t r = 0; r < m.count(); ++r) {
    double sq = 0.0;
    for (std::uint32_t k = 0; k < d; ++k) sq += static_cast<double>(out[r * d + k]) * out[r * d + k];
    if (sq == 0.0) fail(ErrorKind::Degenerate, "cannot normalize zero row " + std::to_string(r));
    const double inv = 1.0 / std::sqrt(sq);
    for (std::uint32_t k = 0; k < d; ++k) {
      out[r * d + k] = static_cast<float>(static_cast<double>(out[r * d + k]) * inv);
    }
  }
  return EmbeddingMatrix(m.count(), d, std::move(out), true);
}

ItemRecord parse_item_record(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::Validation, std::string("malformed manifest record: ") + e.what());
  }
  return parse_record_json(j, 0);
}

std::string format_item_record(const ItemRecord& r) {
  json j;
  j["id"] = r.id;
  j["caption"] = r.caption;
  json objects = json::array();
  for (const auto& o : r.objects) {
    json jo;
    jo["noun"] = o.noun;
    jo["attributes"] = o.attributes;
    if (!o.attribute_kinds.empty()) jo["attribute_kinds"] = o.attribute_kinds;
    objects.push_back(std::move(jo));
  }
  j["objects"] = std::move(objects);
  if (r.split) j["split"] = *r.split;
  return j.dump();
}

std::vector<ItemRecord> read_manifest(const std::filesystem::path& path) {
  const auto lines = io::split_lines(io::read_text(path));
  std::vector<ItemRecord> items;
  items.reserve(lines.size());
  for (std::size_t i = 0; i < lines.size(); ++i) {
    json j;
    try {
      j = json::parse(lines[i]);
    } catch (const json::parse_error&) {
      fail(ErrorKind::Validation, "manifest line " + std::to_string(i + 1) + ": malformed record");
    }
    items.push_back(parse_record_json(j, i + 1));
  }
  return items;
}

void write_manifest(const std::vector<ItemRecord>& items, const std::filesystem::path& path) {
  std::string text;
  for (const auto& it : items) {
    text += format_item_record(it);
    text += '\n';
  }
  io::write_text_atomic(path, text);
}

Corpus load_corpus(const std::filesystem::path& manifest, const std::filesystem::path& embeddings,
                   Modality modality) {
  auto items = read_manifest(manifest);
  auto emb = read_embeddings(embeddings);
  return make_corpus(modality, std::move(items), std::move(emb));
}

}  // namespace nbra
