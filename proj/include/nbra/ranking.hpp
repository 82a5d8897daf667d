#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace nbra {

struct RankedEntry {
  std::string item_id;
  double score = 0.0;
  std::optional<double> stage2_cost;
  std::vector<std::string> warnings;

  bool operator==(const RankedEntry&) const = default;
};

/// Ordered retrieval output for one query. Scores are nonincreasing.
struct RankedList {
  std::string query_id;
  std::vector<RankedEntry> entries;
  /// Depth up to which the order carries signal. Hard-assignment rerankers
  /// leave ties beyond rank 1, so they set this to 1 unless a tie-break is
  /// requested. nullopt means the whole list is meaningful.
  std::optional<std::size_t> meaningful_depth;

  /// 1-based rank of `item_id`, or nullopt when absent.
  std::optional<std::size_t> rank_of(const std::string& item_id) const;

  bool operator==(const RankedList&) const = default;
};

/// Results file: one JSON record per line with query_id, rank, item_id,
/// score and optional stage2_cost / warnings / meaningful_depth.
std::string format_results(const std::vector<RankedList>& lists);
std::vector<RankedList> parse_results(const std::string& text);

void write_results(const std::vector<RankedList>& lists, const std::filesystem::path& path);
std::vector<RankedList> read_results(const std::filesystem::path& path);

}  // namespace nbra
