#include "nbra/ranking.hpp"

#include <json.hpp>

#include "nbra/error.hpp"
#include "nbra/io.hpp"

namespace nbra {

using json = nlohmann::json;

std::optional<std::size_t> RankedList::rank_of(const std::string& item_id) const {
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].item_id == item_id) return i + 1;
  return std::nullopt;
}

std::string format_results(const std::vector<RankedList>& lists) {
  std::string out;
  for (const auto& list : lists) {
    for (std::size_t i = 0; i < list.entries.size(); ++i) {
      const auto& e = list.entries[i];
      json j;
      j["query_id"] = list.query_id;
      j["rank"] = i + 1;
      j["item_id"] = e.item_id;
      j["score"] = e.score;
      if (e.stage2_cost) j["stage2_cost"] = *e.stage2_cost;
      if (!e.warnings.empty()) j["warnings"] = e.warnings;
      if (list.meaningful_depth) j["meaningful_depth"] = *list.meaningful_depth;
      out += j.dump();
      out += '\n';
    }
  }
  return out;
}

std::vector<RankedList> parse_results(const std::string& text) {
  std::vector<RankedList> lists;
  const auto lines = io::split_lines(text);
  for (std::size_t n = 0; n < lines.size(); ++n) {
    const auto where = "results line " + std::to_string(n + 1) + ": ";
    json j;
    try {
      j = json::parse(lines[n]);
    } catch (const json::parse_error&) {
      fail(ErrorKind::Validation, where + "malformed record");
    }
    if (!j.contains("query_id") || !j.contains("rank") || !j.contains("item_id") || !j.contains("score")) {
      fail(ErrorKind::Validation, where + "needs query_id, rank, item_id, score");
    }
    const auto qid = j["query_id"].get<std::string>();
    const auto rank = j["rank"].get<std::size_t>();
    if (lists.empty() || lists.back().query_id != qid) {
      lists.push_back(RankedList{qid, {}, std::nullopt});
    }
    auto& list = lists.back();
    if (rank != list.entries.size() + 1) {
      fail(ErrorKind::Validation, where + "ranks for query " + qid + " must be contiguous from 1");
    }
    RankedEntry e;
    e.item_id = j["item_id"].get<std::string>();
    e.score = j["score"].get<double>();
    if (j.contains("stage2_cost")) e.stage2_cost = j["stage2_cost"].get<double>();
    if (j.contains("warnings")) e.warnings = j["warnings"].get<std::vector<std::string>>();
    if (j.contains("meaningful_depth")) list.meaningful_depth = j["meaningful_depth"].get<std::size_t>();
    list.entries.push_back(std::move(e));
  }
  return lists;
}

void write_results(const std::vector<RankedList>& lists, const std::filesystem::path& path) {
  io::write_text_atomic(path, format_results(lists));
}

std::vector<RankedList> read_results(const std::filesystem::path& path) {
  return parse_results(io::read_text(path));
}

}  // namespace nbra
