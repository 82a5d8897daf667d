// nbra: command-line front end over the retrieval/reranking library.
//
// Every subcommand writes its artifacts into --out-dir, echoes the resolved
// options plus input hashes to resolved_config.json, and prints one JSON
// summary line on stdout. Exit codes: 0 ok, 2 usage, 3 data, 4 convergence
// (only under --strict).

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "nbra/diagnostics.hpp"
#include "nbra/embedding_store.hpp"
#include "nbra/error.hpp"
#include "nbra/io.hpp"
#include "nbra/mappers.hpp"
#include "nbra/metrics.hpp"
#include "nbra/parallel.hpp"
#include "nbra/ranking.hpp"
#include "nbra/retrieval.hpp"
#include "nbra/synthshapes.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using nbra::ErrorKind;
using nbra::fail;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitConvergence = 4;

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::Usage: return kExitUsage;
    case ErrorKind::Convergence: return kExitConvergence;
    default: return kExitData;
  }
}

std::shared_ptr<spdlog::logger> g_log;

// NBRA_LOG_LEVEL: trace|debug|info|warn|error|off (default warn).
// NBRA_COLOR: auto|always|never (default auto).
void setup_logging() {
  auto mode = spdlog::color_mode::automatic;
  if (const char* c = std::getenv("NBRA_COLOR")) {
    const std::string s = c;
    if (s == "always") mode = spdlog::color_mode::always;
    else if (s == "never") mode = spdlog::color_mode::never;
  }
  g_log = spdlog::stderr_color_st("nbra", mode);
  g_log->set_pattern("%^nbra: %l:%$ %v");
  g_log->set_level(spdlog::level::warn);
  if (const char* l = std::getenv("NBRA_LOG_LEVEL")) g_log->set_level(spdlog::level::from_str(l));
}

std::string sha256_hex(const fs::path& path) {
  const auto bytes = nbra::io::read_file(path);
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    fail(ErrorKind::Io, "sha256 failed for " + path.string());
  }
  std::string out;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    out += buf;
  }
  return out;
}

// State shared by every subcommand of one invocation.
struct Run {
  fs::path out_dir;
  std::size_t jobs = 1;
  bool strict = false;
  std::vector<fs::path> inputs;
  json summary = json::object();
  std::size_t warnings = 0;

  const fs::path& input(const fs::path& p) {
    inputs.push_back(p);
    return p;
  }
  fs::path out(const std::string& name) const { return out_dir / name; }
};

Run g_run;

void add_common(CLI::App* sub) {
  sub->add_option("--out-dir", g_run.out_dir, "Directory for all artifacts")->required();
  sub->add_option("--jobs", g_run.jobs, "Worker threads for per-query work")->check(CLI::PositiveNumber);
  sub->add_flag("--strict", g_run.strict, "Treat solver warnings as fatal (exit 4)");
}

void write_echo(const CLI::App* sub) {
  json options = json::object();
  for (const CLI::Option* opt : sub->get_options()) {
    if (opt->get_lnames().empty()) continue;
    const auto& name = opt->get_lnames().front();
    if (name == "help") continue;
    if (opt->count() > 0) {
      const auto& r = opt->results();
      options[name] = r.size() == 1 ? json(r.front()) : json(r);
    } else {
      options[name] = opt->get_default_str();
    }
  }
  json inputs = json::object();
  for (const auto& p : g_run.inputs) inputs[p.string()] = "sha256:" + sha256_hex(p);
  const json echo = {{"command", sub->get_name()}, {"options", options}, {"inputs", inputs}};
  nbra::io::write_text_atomic(g_run.out("resolved_config.json"), echo.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Shared option groups

struct SideOpts {
  std::string manifest;
  std::string embeddings;
  std::string modality;
};

void add_side(CLI::App* sub, SideOpts& o, const std::string& side, const std::string& modality, bool required = true) {
  o.modality = modality;
  auto* m = sub->add_option("--" + side + "-manifest", o.manifest, side + " manifest (JSONL)");
  auto* e = sub->add_option("--" + side + "-embeddings", o.embeddings, side + " embedding file");
  sub->add_option("--" + side + "-modality", o.modality, side + " modality (text|image)")->capture_default_str();
  if (required) {
    m->required();
    e->required();
  }
}

nbra::Corpus load_side(const SideOpts& o) {
  return nbra::load_corpus(g_run.input(o.manifest), g_run.input(o.embeddings), nbra::parse_modality(o.modality));
}

std::vector<nbra::ItemRecord> load_manifest(const std::string& path) {
  return nbra::read_manifest(g_run.input(path));
}

struct FwOpts {
  nbra::ot::FwConfig cfg;
};

void add_fw(CLI::App* sub, FwOpts& o, bool with_beta = true) {
  if (with_beta) sub->add_option("--beta", o.cfg.beta, "FGW structure weight in [0, 1]")->capture_default_str();
  sub->add_option("--epsilon", o.cfg.sinkhorn.epsilon, "Sinkhorn entropic regularization")->capture_default_str();
  sub->add_option("--sinkhorn-iters", o.cfg.sinkhorn.max_iters, "Sinkhorn iteration cap")->capture_default_str();
  sub->add_option("--sinkhorn-tol", o.cfg.sinkhorn.tol, "Sinkhorn marginal tolerance")->capture_default_str();
  sub->add_option("--fw-iters", o.cfg.max_iters, "Frank-Wolfe iteration cap")->capture_default_str();
  sub->add_option("--fw-tol", o.cfg.rel_tol, "Frank-Wolfe relative tolerance")->capture_default_str();
}

void check_fw(const nbra::ot::FwConfig& c) {
  if (!(c.beta >= 0.0 && c.beta <= 1.0)) fail(ErrorKind::Usage, "--beta must lie in [0, 1]");
  if (!(c.sinkhorn.epsilon > 0.0)) fail(ErrorKind::Usage, "--epsilon must be positive");
  if (c.sinkhorn.max_iters < 1 || c.max_iters < 1) fail(ErrorKind::Usage, "iteration caps must be positive");
  if (!(c.sinkhorn.tol > 0.0) || !(c.rel_tol > 0.0)) fail(ErrorKind::Usage, "tolerances must be positive");
}

// Mapper weights live in <stem>.nbra with metadata in <stem>.json.
nbra::RidgeMapper load_mapper_file(const std::string& path) {
  fs::path w = path;
  fs::path meta = w;
  meta.replace_extension(".json");
  return nbra::load_mapper(g_run.input(w), g_run.input(meta));
}

// Steering metadata in <stem>.jsonl, direction in <stem>.nbra.
nbra::SteeringVector load_steer_file(const std::string& path) {
  fs::path meta = path;
  fs::path vec = meta;
  vec.replace_extension(".nbra");
  return nbra::load_steering(g_run.input(meta), g_run.input(vec));
}

nbra::PhraseTable load_phrases(const SideOpts& o) {
  return nbra::PhraseTable::from_corpus(load_side(o));
}

std::vector<nbra::RankedList> load_results(const std::string& path) {
  return nbra::read_results(g_run.input(path));
}

std::size_t count_warnings(const std::vector<nbra::RankedList>& lists) {
  std::size_t n = 0;
  for (const auto& l : lists)
    for (const auto& e : l.entries) n += e.warnings.empty() ? 0 : 1;
  return n;
}

void note_warnings(const std::vector<nbra::RankedList>& lists) {
  const auto n = count_warnings(lists);
  g_run.warnings += n;
  if (n > 0) g_log->warn("{} candidate(s) carry solver warnings", n);
  if (n > 0 && g_run.strict) {
    fail(ErrorKind::Convergence, std::to_string(n) + " candidate(s) did not converge (--strict)");
  }
}

std::string padded_id(char prefix, std::size_t i, std::size_t total) {
  const auto width = std::max<std::size_t>(5, std::to_string(total == 0 ? 0 : total - 1).size());
  std::string digits = std::to_string(i);
  return std::string(1, prefix) + std::string(width - std::min(width, digits.size()), '0') + digits;
}

std::string svg_name(std::size_t i, std::size_t total) { return padded_id('s', i, total).substr(1) + ".svg"; }

// ---------------------------------------------------------------------------
// gen-shapes

struct GenShapes {
  std::size_t arity = 3;
  bool svg = false;
  std::size_t sample_corpus = 0;
  std::size_t sample_queries = 0;
  std::uint64_t seed = 0;
};

void run_gen_shapes(const GenShapes& o) {
  const auto all = nbra::shapes::enumerate_compositions(o.arity);
  if (o.svg && o.arity > nbra::shapes::kAnchors.size()) {
    fail(ErrorKind::Usage, "--svg supports arity 1 to 3");
  }
  if (o.sample_queries > o.sample_corpus) fail(ErrorKind::Usage, "--sample-queries exceeds --sample-corpus");
  if (o.sample_corpus > all.size()) fail(ErrorKind::Usage, "--sample-corpus exceeds the composition count");

  std::vector<nbra::ItemRecord> manifest;
  manifest.reserve(all.size());
  for (std::size_t i = 0; i < all.size(); ++i) manifest.push_back(nbra::shapes::to_item(padded_id('s', i, all.size()), all[i]));
  nbra::write_manifest(manifest, g_run.out("manifest.jsonl"));

  if (o.svg) {
    fs::create_directories(g_run.out("svg"));
    for (std::size_t i = 0; i < all.size(); ++i) {
      nbra::io::write_text_atomic(g_run.out("svg") / svg_name(i, all.size()), nbra::shapes::emit_svg(all[i]));
    }
  }
  g_run.summary["compositions"] = all.size();

  if (o.sample_corpus == 0) return;
  std::vector<std::size_t> idx(all.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::mt19937_64 rng(o.seed);
  std::shuffle(idx.begin(), idx.end(), rng);

  std::vector<nbra::ItemRecord> corpus;
  for (std::size_t i = 0; i < o.sample_corpus; ++i) corpus.push_back(manifest[idx[i]]);
  std::vector<nbra::ItemRecord> queries;
  const std::size_t stride = o.sample_queries ? o.sample_corpus / o.sample_queries : 0;
  for (std::size_t i = 0; i < o.sample_queries; ++i) {
    auto q = corpus[i * stride];
    q.id = padded_id('q', i, o.sample_queries);
    queries.push_back(std::move(q));
  }
  nbra::write_manifest(corpus, g_run.out("corpus.jsonl"));
  nbra::write_manifest(queries, g_run.out("queries.jsonl"));

  nbra::metrics::RelevanceTable rel(nbra::metrics::GradeKind::Graded04);
  for (const auto& q : queries) {
    const auto qc = nbra::shapes::from_item(q);
    for (const auto& c : corpus) {
      const int g = nbra::shapes::heuristic_relevance(qc, nbra::shapes::from_item(c));
      if (g > 0) rel.set(q.id, c.id, g);
    }
  }
  nbra::metrics::write_relevance(rel, g_run.out("relevance.jsonl"));
  g_run.summary["corpus"] = corpus.size();
  g_run.summary["queries"] = queries.size();
  g_run.summary["relevance_pairs"] = rel.size();
}

// ---------------------------------------------------------------------------
// synth-embed

struct SynthEmbed {
  std::vector<std::string> manifests;
  nbra::shapes::SynthEmbedConfig cfg;
};

void run_synth_embed(const SynthEmbed& o) {
  std::set<std::string> stems;
  json counts = json::object();
  for (const auto& m : o.manifests) {
    const auto stem = fs::path(m).stem().string();
    if (stem == "primitives") fail(ErrorKind::Usage, "manifest stem 'primitives' is reserved");
    if (!stems.insert(stem).second) fail(ErrorKind::Usage, "two manifests share the stem '" + stem + "'");
    const auto items = load_manifest(m);
    std::vector<nbra::shapes::Composition> comps;
    comps.reserve(items.size());
    for (const auto& it : items) comps.push_back(nbra::shapes::from_item(it));
    const auto e = nbra::shapes::synth_embed(comps, o.cfg);
    nbra::write_embeddings(e.text, g_run.out(stem + ".text.nbra"));
    nbra::write_embeddings(e.image, g_run.out(stem + ".image.nbra"));
    counts[stem] = items.size();
  }
  // Single-primitive references: the per-object phrase tables for reranking.
  const auto prims = nbra::shapes::enumerate_compositions(1);
  std::vector<nbra::ItemRecord> items;
  for (std::size_t i = 0; i < prims.size(); ++i) {
    items.push_back(nbra::shapes::to_item(padded_id('p', i, prims.size()), prims[i]));
  }
  const auto e = nbra::shapes::synth_embed(prims, o.cfg);
  nbra::write_manifest(items, g_run.out("primitives.jsonl"));
  nbra::write_embeddings(e.text, g_run.out("primitives.text.nbra"));
  nbra::write_embeddings(e.image, g_run.out("primitives.image.nbra"));
  g_run.summary["counts"] = counts;
  g_run.summary["dim"] = o.cfg.dim;
}

// ---------------------------------------------------------------------------
// import

struct Import {
  SideOpts side;
  bool normalize = false;
  std::string stem;
};

void run_import(const Import& o) {
  auto corpus = load_side(o.side);
  auto emb = o.normalize ? nbra::normalize_rows(corpus.embeddings) : corpus.embeddings;
  const auto stem = o.stem.empty() ? fs::path(o.side.manifest).stem().string() : o.stem;
  nbra::write_manifest(corpus.items, g_run.out(stem + ".jsonl"));
  nbra::write_embeddings(emb, g_run.out(stem + ".nbra"));
  g_run.summary["count"] = emb.count();
  g_run.summary["dim"] = emb.dim();
  g_run.summary["unit_normalized"] = emb.unit_normalized();
}

// ---------------------------------------------------------------------------
// fit-mapper / pairing

std::pair<Eigen::MatrixXd, Eigen::MatrixXd> pair_by_id(const nbra::Corpus& src, const nbra::Corpus& tgt) {
  std::vector<std::size_t> si, ti;
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (auto j = tgt.find(src.items[i].id)) {
      si.push_back(i);
      ti.push_back(*j);
    }
  }
  if (si.empty()) fail(ErrorKind::Validation, "source and target share no item ids");
  Eigen::MatrixXd X(si.size(), src.embeddings.dim());
  Eigen::MatrixXd Y(ti.size(), tgt.embeddings.dim());
  for (std::size_t r = 0; r < si.size(); ++r) {
    X.row(r) = src.embeddings.row_vector(si[r]).transpose();
    Y.row(r) = tgt.embeddings.row_vector(ti[r]).transpose();
  }
  return {X, Y};
}

struct FitMapper {
  SideOpts source, target;
  double lambda = 1e-3;
};

void run_fit_mapper(const FitMapper& o) {
  if (!(o.lambda >= 0.0)) fail(ErrorKind::Usage, "--lambda must be nonnegative");
  const auto [X, Y] = pair_by_id(load_side(o.source), load_side(o.target));
  const auto mapper = nbra::fit_ridge(X, Y, o.lambda);
  nbra::save_mapper(mapper, g_run.out("mapper.nbra"), g_run.out("mapper.json"));
  g_run.summary["pairs"] = X.rows();
  g_run.summary["d_in"] = mapper.d_in();
  g_run.summary["d_out"] = mapper.d_out();
  g_run.summary["distance_reduction"] = nbra::distance_reduction(X, Y, mapper);
}

// ---------------------------------------------------------------------------
// steer

struct Steer {
  SideOpts phrases;
  std::vector<std::string> sources, targets;
  std::string noun_scope;
  std::string mapper;
  std::string source_label, target_label;
};

void run_steer(const Steer& o) {
  if (o.sources.empty() || o.sources.size() != o.targets.size()) {
    fail(ErrorKind::Usage, "--source and --target must be given the same nonzero number of times");
  }
  if (!o.noun_scope.empty() && o.sources.size() > 1) {
    fail(ErrorKind::Usage, "--noun-scope applies to a single source/target pair");
  }
  const auto table = load_phrases(o.phrases);
  std::optional<nbra::RidgeMapper> mapper;
  if (!o.mapper.empty()) mapper = load_mapper_file(o.mapper);
  auto lookup = [&](const std::string& phrase) {
    const auto* v = table.find(phrase);
    if (!v) fail(ErrorKind::Validation, "phrase \"" + phrase + "\" not in the phrase table");
    return mapper ? nbra::apply_mapper(*mapper, *v) : Eigen::VectorXd(*v);
  };
  std::vector<nbra::SteeringVector> local;
  for (std::size_t i = 0; i < o.sources.size(); ++i) {
    std::optional<std::string> scope;
    if (!o.noun_scope.empty()) scope = o.noun_scope;
    local.push_back(nbra::steering_vector(lookup(o.sources[i]), lookup(o.targets[i]), o.sources[i], o.targets[i], scope));
  }
  auto v = local.size() == 1 ? local.front()
                             : nbra::global_steering_vector(local, o.source_label.empty() ? "source" : o.source_label,
                                                            o.target_label.empty() ? "target" : o.target_label);
  nbra::save_steering(v, g_run.out("steer.jsonl"), g_run.out("steer.nbra"));
  g_run.summary["pairs"] = o.sources.size();
  g_run.summary["dim"] = v.direction.size();
}

// ---------------------------------------------------------------------------
// retrieve / rerank / sweep share the stage-1 and stage-2 wiring

struct Stage1Opts {
  std::string stage1 = "raw";
  std::string mapper;
  std::string steer;
  double alpha = 0.0;
};

void add_stage1(CLI::App* sub, Stage1Opts& o) {
  sub->add_option("--stage1", o.stage1, "raw|ridge_mapped|ridge_plus_steer")->capture_default_str();
  sub->add_option("--mapper", o.mapper, "Mapper weights (mapper.nbra; metadata beside it)");
  sub->add_option("--steer", o.steer, "Steering metadata (steer.jsonl; vector beside it)");
  sub->add_option("--alpha", o.alpha, "Steering strength")->capture_default_str();
}

struct Stage1State {
  nbra::PipelineConfig cfg;
  std::optional<nbra::RidgeMapper> mapper;
  std::optional<nbra::SteeringVector> steer;
};

Stage1State resolve_stage1(const Stage1Opts& o) {
  Stage1State s;
  s.cfg.stage1 = nbra::parse_stage1(o.stage1);
  if (!o.mapper.empty()) s.mapper = load_mapper_file(o.mapper);
  if (!o.steer.empty()) s.steer = load_steer_file(o.steer);
  if (s.cfg.stage1 == nbra::Stage1::RidgePlusSteer) {
    if (!s.steer) fail(ErrorKind::Usage, "--stage1 ridge_plus_steer needs --steer");
    s.cfg.steering = nbra::Steering{*s.steer, o.alpha};
  }
  s.cfg.jobs = g_run.jobs;
  return s;
}

struct PhraseOpts {
  SideOpts query, candidate;
};

void add_phrases(CLI::App* sub, PhraseOpts& o, bool required) {
  add_side(sub, o.query, "query-phrases", "text", required);
  add_side(sub, o.candidate, "candidate-phrases", "image", required);
}

bool phrases_given(const PhraseOpts& o) { return !o.query.manifest.empty() || !o.candidate.manifest.empty(); }

nbra::PerObjectSources load_sources(const PhraseOpts& o) {
  if (o.query.manifest.empty() || o.query.embeddings.empty() || o.candidate.manifest.empty() ||
      o.candidate.embeddings.empty()) {
    fail(ErrorKind::Usage, "stage 2 needs query and candidate phrase manifests and embeddings");
  }
  return nbra::PerObjectSources{load_phrases(o.query), load_phrases(o.candidate)};
}

struct Retrieve {
  SideOpts queries, corpus;
  Stage1Opts s1;
  std::size_t k = 50;
  std::string merge = "none";
  SideOpts query_phrases;
};

void run_retrieve(const Retrieve& o) {
  if (o.k == 0) fail(ErrorKind::Usage, "-k must be positive");
  const auto queries = load_side(o.queries);
  const auto corpus = load_side(o.corpus);
  std::vector<nbra::RankedList> lists;
  if (o.merge == "average") {
    if (o.query_phrases.manifest.empty()) fail(ErrorKind::Usage, "--merge average needs --query-phrases-manifest");
    if (o.s1.stage1 != "raw") fail(ErrorKind::Usage, "--merge average runs on raw per-object phrases");
    lists = nbra::run_merged_queries(queries, corpus, load_phrases(o.query_phrases), o.k, {}, g_run.jobs);
  } else if (o.merge == "none") {
    auto s = resolve_stage1(o.s1);
    s.cfg.k = o.k;
    lists = nbra::run_pipeline(queries, corpus, s.cfg, s.mapper ? &*s.mapper : nullptr, nullptr);
  } else {
    fail(ErrorKind::Usage, "--merge must be none or average, got '" + o.merge + "'");
  }
  nbra::write_results(lists, g_run.out("results.jsonl"));
  g_run.summary["queries"] = lists.size();
  g_run.summary["k"] = o.k;
}

struct Rerank {
  std::string results;
  std::string queries_manifest, corpus_manifest;
  PhraseOpts phrases;
  std::string stage2 = "fgw";
  std::size_t k = 0;
  FwOpts fw;
  std::string tiebreak = "none";
};

void run_rerank(const Rerank& o) {
  const auto stage2 = nbra::parse_stage2(o.stage2);
  if (stage2 == nbra::Stage2::None) fail(ErrorKind::Usage, "rerank needs --stage2 hungarian or fgw");
  if (o.tiebreak != "none" && o.tiebreak != "cosine") fail(ErrorKind::Usage, "--hungarian-tiebreak must be none or cosine");
  check_fw(o.fw.cfg);
  const auto lists = load_results(o.results);
  const auto queries = load_manifest(o.queries_manifest);
  const auto corpus_items = load_manifest(o.corpus_manifest);
  const auto sources = load_sources(o.phrases);

  std::map<std::string, const nbra::ItemRecord*> by_id;
  for (const auto& q : queries) by_id[q.id] = &q;
  // Candidate sets only need annotations; embeddings are unused here.
  const auto corpus = nbra::make_corpus(nbra::Modality::Image, corpus_items,
                                        nbra::EmbeddingMatrix::zeros(corpus_items.size(), 1));
  const auto candidates = nbra::build_candidate_sets(corpus, sources.candidate);

  std::vector<nbra::RankedList> out(lists.size());
  nbra::parallel_for(lists.size(), g_run.jobs, [&](std::size_t i) {
    const auto& list = lists[i];
    auto it = by_id.find(list.query_id);
    if (it == by_id.end()) fail(ErrorKind::Validation, "query " + list.query_id + " missing from the query manifest");
    const auto shortlist = nbra::make_shortlist(list, o.k == 0 ? list.entries.size() : o.k);
    const auto qset = nbra::build_per_object_set(*it->second, sources.query);
    out[i] = stage2 == nbra::Stage2::Hungarian
                 ? nbra::rerank_hungarian(shortlist, qset, candidates, o.tiebreak == "cosine")
                 : nbra::rerank_fgw(shortlist, qset, candidates, o.fw.cfg);
  });
  note_warnings(out);
  nbra::write_results(out, g_run.out("results.jsonl"));
  g_run.summary["queries"] = out.size();
  g_run.summary["stage2"] = o.stage2;
}

// ---------------------------------------------------------------------------
// eval

struct Eval {
  std::string results;
  std::string queries_manifest, corpus_manifest;
  std::string positives = "exact_caption";
  std::string positives_file;
  std::string relevance, similarity;
  bool heuristic = false;
  std::vector<std::size_t> ks = {1, 5, 10};
  std::size_t cas_k = 10;
};

// Listed positives: {"query_id", "item_ids": [...]}. Synonym queries:
// {"query_id", "noun", "synonyms": [...]}.
std::vector<json> read_jsonl(const std::string& path) {
  std::vector<json> out;
  std::size_t line_no = 0;
  for (const auto& line : nbra::io::split_lines(nbra::io::read_text(g_run.input(path)))) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception& e) {
      fail(ErrorKind::Validation, path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

nbra::metrics::PositivesPredicate make_positives(const Eval& o, const std::vector<nbra::ItemRecord>& queries,
                                                 const std::vector<nbra::ItemRecord>& corpus) {
  using P = nbra::metrics::PositivesPredicate;
  if (o.positives == "exact_caption") return P::exact_caption(queries, corpus);
  if (o.positives == "symbolic") return P::symbolic_match(queries, corpus);
  if (o.positives_file.empty()) fail(ErrorKind::Usage, "--positives " + o.positives + " needs --positives-file");
  const auto records = read_jsonl(o.positives_file);
  try {
    if (o.positives == "listed") {
      std::map<std::string, std::set<std::string>> pos;
      for (const auto& r : records) {
        auto& s = pos[r.at("query_id").get<std::string>()];
        for (const auto& id : r.at("item_ids")) s.insert(id.get<std::string>());
      }
      return P::listed_ids(std::move(pos));
    }
    if (o.positives == "synonym") {
      std::map<std::string, P::SynonymQuery> q;
      for (const auto& r : records) {
        P::SynonymQuery sq;
        sq.noun = r.at("noun").get<std::string>();
        for (const auto& s : r.at("synonyms")) sq.synonyms.insert(s.get<std::string>());
        q[r.at("query_id").get<std::string>()] = std::move(sq);
      }
      return P::synonym_set(q, corpus);
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::Validation, o.positives_file + ": " + e.what());
  }
  fail(ErrorKind::Usage, "--positives must be exact_caption, symbolic, listed, or synonym");
}

nbra::metrics::CompositionMap compositions_of(const std::vector<nbra::ItemRecord>& items) {
  nbra::metrics::CompositionMap m;
  for (const auto& it : items) m.emplace(it.id, nbra::shapes::from_item(it));
  return m;
}

nbra::metrics::MetricsReport evaluate_lists(const std::vector<nbra::RankedList>& lists, const Eval& o,
                                            const std::vector<nbra::ItemRecord>& queries,
                                            const std::vector<nbra::ItemRecord>& corpus) {
  if (!o.relevance.empty() && o.heuristic) fail(ErrorKind::Usage, "--relevance and --heuristic are exclusive");
  const auto positives = make_positives(o, queries, corpus);
  std::optional<nbra::metrics::RelevanceTable> graded, similarity;
  if (o.heuristic) {
    const auto qm = compositions_of(queries);
    const auto cm = compositions_of(corpus);
    graded = nbra::metrics::build_heuristic_relevance(lists, qm, cm);
    similarity = nbra::metrics::build_heuristic_similarity(lists, qm, cm);
  }
  if (!o.relevance.empty()) {
    auto t = nbra::metrics::read_relevance(g_run.input(o.relevance));
    if (t.kind() == nbra::metrics::GradeKind::Graded04) graded = std::move(t);
    else similarity = std::move(t);
  }
  if (!o.similarity.empty()) similarity = nbra::metrics::read_relevance(g_run.input(o.similarity));
  const auto qobj = nbra::metrics::query_objects_of(queries);
  const auto itup = nbra::metrics::item_tuples_of(corpus);

  nbra::metrics::EvalInputs in;
  in.positives = &positives;
  in.graded = graded ? &*graded : nullptr;
  in.similarity = similarity ? &*similarity : nullptr;
  in.query_objects = &qobj;
  in.item_tuples = &itup;
  in.ks = o.ks;
  in.cas_k = o.cas_k;
  return nbra::metrics::evaluate(lists, in);
}

void add_eval_opts(CLI::App* sub, Eval& o) {
  sub->add_option("--positives", o.positives, "exact_caption|symbolic|listed|synonym")->capture_default_str();
  sub->add_option("--positives-file", o.positives_file, "JSONL for listed or synonym positives");
  sub->add_option("--relevance", o.relevance, "Relevance file (graded for nDCG, continuous for CAS)");
  sub->add_option("--similarity", o.similarity, "Continuous relevance file for CAS");
  sub->add_flag("--heuristic", o.heuristic, "Synthetic-shapes overlap relevance");
  sub->add_option("--ks", o.ks, "Recall/nDCG depths")->delimiter(',')->capture_default_str();
  sub->add_option("--cas-k", o.cas_k, "CAS window")->capture_default_str();
}

void run_eval(const Eval& o) {
  const auto lists = load_results(o.results);
  const auto queries = load_manifest(o.queries_manifest);
  const auto corpus = load_manifest(o.corpus_manifest);
  const auto report = evaluate_lists(lists, o, queries, corpus);
  const auto text = nbra::metrics::format_report(report);
  nbra::io::write_text_atomic(g_run.out("report.json"), text);
  json recall = json::object();
  for (const auto& [k, v] : report.recall) recall[std::to_string(k)] = v ? json(*v) : json(nullptr);
  g_run.summary["queries"] = report.n_queries;
  g_run.summary["recall"] = recall;
}

// ---------------------------------------------------------------------------
// diagnose

struct Diagnose {
  std::string kind;
  std::string cloud_a, cloud_b, manifest, noun;
  SideOpts source, target;
  std::string mapper;
  FwOpts fw;
  std::string results, baseline, treated;
  std::string queries_manifest, corpus_manifest;
};

std::string need(const std::string& v, const std::string& flag, const std::string& kind) {
  if (v.empty()) fail(ErrorKind::Usage, "diagnose " + kind + " needs " + flag);
  return v;
}

void run_diagnose(const Diagnose& o) {
  if (o.kind == "correlation") {
    const auto a = nbra::read_embeddings(g_run.input(need(o.cloud_a, "--cloud-a", o.kind))).to_eigen();
    const auto b = nbra::read_embeddings(g_run.input(need(o.cloud_b, "--cloud-b", o.kind))).to_eigen();
    std::optional<std::vector<std::size_t>> subset;
    if (!o.noun.empty()) subset = nbra::diag::subset_with_noun(load_manifest(need(o.manifest, "--manifest", o.kind)), o.noun);
    const double r = nbra::diag::distance_correlation(a, b, subset);
    const json j = {{"r", r}, {"points", subset ? subset->size() : static_cast<std::size_t>(a.rows())}};
    nbra::io::write_text_atomic(g_run.out("correlation.json"), j.dump(2) + "\n");
    g_run.summary["r"] = r;
  } else if (o.kind == "mapper") {
    need(o.source.manifest, "--source-manifest", o.kind);
    need(o.target.manifest, "--target-manifest", o.kind);
    check_fw(o.fw.cfg);
    const auto [X, Y] = pair_by_id(load_side(o.source), load_side(o.target));
    const auto mapper = load_mapper_file(need(o.mapper, "--mapper", o.kind));
    const auto r = nbra::diag::mapper_structure_report(X, Y, mapper, o.fw.cfg);
    nbra::io::write_text_atomic(g_run.out("mapper_report.json"), nbra::diag::format_mapper_report(r));
    g_run.summary["distance_reduction"] = r.distance_reduction ? json(*r.distance_reduction) : json(nullptr);
    g_run.summary["gw_before"] = r.gw_before;
    g_run.summary["gw_after"] = r.gw_after;
  } else if (o.kind == "substitution") {
    const auto lists = load_results(need(o.results, "--results", o.kind));
    const auto queries = load_manifest(need(o.queries_manifest, "--queries-manifest", o.kind));
    const auto items = load_manifest(need(o.corpus_manifest, "--corpus-manifest", o.kind));
    std::map<std::string, nbra::shapes::Composition> qc;
    for (const auto& q : queries) qc.emplace(q.id, nbra::shapes::from_item(q));
    std::vector<nbra::shapes::Composition> ordered;
    for (const auto& l : lists) {
      auto it = qc.find(l.query_id);
      if (it == qc.end()) fail(ErrorKind::Validation, "query " + l.query_id + " missing from the query manifest");
      ordered.push_back(it->second);
    }
    const auto corpus = nbra::make_corpus(nbra::Modality::Image, items, nbra::EmbeddingMatrix::zeros(items.size(), 1));
    const auto m = nbra::shapes::substitution_matrix(lists, corpus, ordered);
    std::string tsv = "query_shape";
    for (auto s : nbra::shapes::kAllShapes) tsv += "\t" + nbra::shapes::to_string(s);
    tsv += "\n";
    std::size_t total = 0;
    for (std::size_t i = 0; i < nbra::shapes::kNumShapes; ++i) {
      tsv += nbra::shapes::to_string(nbra::shapes::kAllShapes[i]);
      for (std::size_t j = 0; j < nbra::shapes::kNumShapes; ++j) {
        tsv += "\t" + std::to_string(m[i][j]);
        total += m[i][j];
      }
      tsv += "\n";
    }
    nbra::io::write_text_atomic(g_run.out("substitution.tsv"), tsv);
    g_run.summary["substitutions"] = total;
  } else if (o.kind == "interference") {
    const auto queries = load_manifest(need(o.queries_manifest, "--queries-manifest", o.kind));
    const auto items = load_manifest(need(o.corpus_manifest, "--corpus-manifest", o.kind));
    const auto base = load_results(need(o.baseline, "--baseline", o.kind));
    const auto treated = load_results(need(o.treated, "--treated", o.kind));
    const auto corpus = nbra::make_corpus(nbra::Modality::Image, items, nbra::EmbeddingMatrix::zeros(items.size(), 1));
    const auto r = nbra::diag::interference_report(queries, base, treated, corpus);
    nbra::io::write_text_atomic(g_run.out("interference.tsv"), nbra::diag::format_interference_tsv(r));
    g_run.summary["queries_with_degradation"] = r.queries_with_degradation;
    g_run.summary["queries_with_improvement"] = r.queries_with_improvement;
  } else {
    fail(ErrorKind::Usage, "--kind must be correlation, mapper, substitution, or interference");
  }
  g_run.summary["kind"] = o.kind;
}

// ---------------------------------------------------------------------------
// sweep

struct Sweep {
  std::string axis;
  std::vector<double> grid;
  SideOpts queries, corpus;
  Stage1Opts s1;
  PhraseOpts phrases;
  std::string stage2 = "none";
  std::size_t k = 50;
  FwOpts fw;
  std::string tiebreak = "none";
  Eval eval;
};

nbra::RidgeMapper identity_mapper(Eigen::Index d) {
  nbra::RidgeMapper m;
  m.weights = Eigen::MatrixXd::Zero(d + 1, d);
  m.weights.topRows(d).setIdentity();
  return m;
}

void run_sweep(const Sweep& o) {
  if (o.grid.empty()) fail(ErrorKind::Usage, "--grid is empty");
  check_fw(o.fw.cfg);
  const auto queries = load_side(o.queries);
  const auto corpus = load_side(o.corpus);
  auto s = resolve_stage1(o.s1);
  s.cfg.stage2 = nbra::parse_stage2(o.stage2);
  s.cfg.k = o.k;
  s.cfg.fw = o.fw.cfg;
  s.cfg.hungarian_cosine_tiebreak = o.tiebreak == "cosine";
  std::optional<nbra::PerObjectSources> sources;
  if (s.cfg.stage2 != nbra::Stage2::None || phrases_given(o.phrases)) sources = load_sources(o.phrases);
  const auto* src = sources ? &*sources : nullptr;

  nbra::diag::SweepResult result;
  if (o.axis == "k") {
    std::vector<std::size_t> ks;
    for (double g : o.grid) {
      if (!(g >= 1.0) || g != static_cast<double>(static_cast<std::size_t>(g))) {
        fail(ErrorKind::Usage, "k grid values must be positive integers");
      }
      ks.push_back(static_cast<std::size_t>(g));
    }
    // Truth item: first corpus row whose caption equals the query's.
    std::map<std::string, std::string> truth;
    for (const auto& q : queries.items) {
      for (const auto& c : corpus.items) {
        if (c.caption == q.caption) {
          truth[q.id] = c.id;
          break;
        }
      }
    }
    result = nbra::diag::k_sweep(queries, corpus, s.cfg, ks, truth, s.mapper ? &*s.mapper : nullptr, src);
  } else if (o.axis == "alpha") {
    if (!s.steer) fail(ErrorKind::Usage, "alpha sweep needs --steer");
    // Without a mapper the sweep steers raw queries.
    const auto mapper = s.mapper ? *s.mapper : identity_mapper(queries.embeddings.dim());
    s.cfg.stage1 = nbra::Stage1::RidgeMapped;
    s.cfg.steering.reset();
    auto evaluator = [&](const std::vector<nbra::RankedList>& lists) {
      return evaluate_lists(lists, o.eval, queries.items, corpus.items);
    };
    result = nbra::diag::alpha_sweep(queries, corpus, s.cfg, *s.steer, o.grid, mapper, src, evaluator);
  } else {
    fail(ErrorKind::Usage, "--axis must be k or alpha");
  }
  nbra::io::write_text_atomic(g_run.out("sweep.tsv"), nbra::diag::format_sweep_tsv(result));
  g_run.summary["axis"] = o.axis;
  g_run.summary["points"] = result.grid.size();
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Cosine shortlist retrieval with Hungarian / FGW reranking over per-object embeddings"};
  app.set_config("--config", "", "TOML config; [subcommand] sections, flags override");
  app.require_subcommand(1);

  std::vector<std::pair<CLI::App*, std::function<void()>>> commands;

  GenShapes gen;
  auto* c_gen = app.add_subcommand("gen-shapes", "Enumerate compositions, optional SVGs and a sampled split");
  add_common(c_gen);
  c_gen->add_option("--arity", gen.arity, "Primitives per composition")->capture_default_str();
  c_gen->add_flag("--svg", gen.svg, "Write svg/<index>.svg per composition");
  c_gen->add_option("--sample-corpus", gen.sample_corpus, "Sample this many compositions as a corpus");
  c_gen->add_option("--sample-queries", gen.sample_queries, "Queries drawn at a fixed stride from the sample");
  c_gen->add_option("--seed", gen.seed, "Sampling seed")->capture_default_str();
  commands.emplace_back(c_gen, [&] { run_gen_shapes(gen); });

  SynthEmbed se;
  auto* c_se = app.add_subcommand("synth-embed", "Seeded synthetic text/image embeddings for shape manifests");
  add_common(c_se);
  c_se->add_option("--manifest", se.manifests, "Shape manifest (repeatable)")->required();
  c_se->add_option("--seed", se.cfg.seed, "Embedding seed")->capture_default_str();
  c_se->add_option("--dim", se.cfg.dim, "Embedding width")->capture_default_str();
  c_se->add_option("--noise", se.cfg.noise_sigma, "Gaussian noise scale")->capture_default_str();
  c_se->add_flag("--rotation", se.cfg.modality_rotation, "Rotate the text modality by a seeded orthogonal map");
  commands.emplace_back(c_se, [&] { run_synth_embed(se); });

  Import imp;
  auto* c_imp = app.add_subcommand("import", "Validate a manifest + embedding pair and copy it into the run");
  add_common(c_imp);
  c_imp->add_option("--manifest", imp.side.manifest, "Manifest (JSONL)")->required();
  c_imp->add_option("--embeddings", imp.side.embeddings, "Embedding file")->required();
  imp.side.modality = "image";
  c_imp->add_option("--modality", imp.side.modality, "text|image")->capture_default_str();
  c_imp->add_flag("--normalize", imp.normalize, "Scale rows to unit norm");
  c_imp->add_option("--stem", imp.stem, "Output file stem (default: manifest stem)");
  commands.emplace_back(c_imp, [&] { run_import(imp); });

  FitMapper fm;
  auto* c_fm = app.add_subcommand("fit-mapper", "Fit a ridge mapper from source to target rows paired by id");
  add_common(c_fm);
  add_side(c_fm, fm.source, "source", "text");
  add_side(c_fm, fm.target, "target", "image");
  c_fm->add_option("--lambda", fm.lambda, "Ridge penalty")->capture_default_str();
  commands.emplace_back(c_fm, [&] { run_fit_mapper(fm); });

  Steer st;
  auto* c_st = app.add_subcommand("steer", "Build a steering vector from phrase embeddings");
  add_common(c_st);
  add_side(c_st, st.phrases, "phrases", "text");
  c_st->add_option("--source", st.sources, "Source phrase (repeatable; several pairs average)");
  c_st->add_option("--target", st.targets, "Target phrase (repeatable)");
  c_st->add_option("--noun-scope", st.noun_scope, "Restrict the vector to objects with this noun");
  c_st->add_option("--mapper", st.mapper, "Map phrase embeddings before differencing");
  c_st->add_option("--source-label", st.source_label, "Label for an averaged vector");
  c_st->add_option("--target-label", st.target_label, "Label for an averaged vector");
  commands.emplace_back(c_st, [&] { run_steer(st); });

  Retrieve rt;
  auto* c_rt = app.add_subcommand("retrieve", "Stage-1 cosine retrieval (raw, mapped, steered, or merged)");
  add_common(c_rt);
  add_side(c_rt, rt.queries, "queries", "text");
  add_side(c_rt, rt.corpus, "corpus", "image");
  add_stage1(c_rt, rt.s1);
  c_rt->add_option("-k,--k", rt.k, "List depth")->capture_default_str();
  c_rt->add_option("--merge", rt.merge, "none|average (average per-object phrases into one query)")
      ->capture_default_str();
  add_side(c_rt, rt.query_phrases, "query-phrases", "text", false);
  commands.emplace_back(c_rt, [&] { run_retrieve(rt); });

  Rerank rr;
  auto* c_rr = app.add_subcommand("rerank", "Stage-2 reranking of a shortlist results file");
  add_common(c_rr);
  c_rr->add_option("--results", rr.results, "Shortlist results (JSONL)")->required();
  c_rr->add_option("--queries-manifest", rr.queries_manifest, "Query manifest")->required();
  c_rr->add_option("--corpus-manifest", rr.corpus_manifest, "Corpus manifest")->required();
  add_phrases(c_rr, rr.phrases, true);
  c_rr->add_option("--stage2", rr.stage2, "hungarian|fgw")->capture_default_str();
  c_rr->add_option("-k,--k", rr.k, "Shortlist depth to rerank (0 = whole list)")->capture_default_str();
  add_fw(c_rr, rr.fw);
  c_rr->add_option("--hungarian-tiebreak", rr.tiebreak, "none|cosine")->capture_default_str();
  commands.emplace_back(c_rr, [&] { run_rerank(rr); });

  Eval ev;
  auto* c_ev = app.add_subcommand("eval", "Recall, nDCG, CAS and CAS-noun for a results file");
  add_common(c_ev);
  c_ev->add_option("--results", ev.results, "Results (JSONL)")->required();
  c_ev->add_option("--queries-manifest", ev.queries_manifest, "Query manifest")->required();
  c_ev->add_option("--corpus-manifest", ev.corpus_manifest, "Corpus manifest")->required();
  add_eval_opts(c_ev, ev);
  commands.emplace_back(c_ev, [&] { run_eval(ev); });

  Diagnose dg;
  auto* c_dg = app.add_subcommand("diagnose", "Correlation, mapper, substitution, or interference diagnostics");
  add_common(c_dg);
  c_dg->add_option("--kind", dg.kind, "correlation|mapper|substitution|interference")->required();
  c_dg->add_option("--cloud-a", dg.cloud_a, "correlation: first embedding file");
  c_dg->add_option("--cloud-b", dg.cloud_b, "correlation: second embedding file, paired by row");
  c_dg->add_option("--manifest", dg.manifest, "correlation: manifest for --noun");
  c_dg->add_option("--noun", dg.noun, "correlation: restrict to items with this noun");
  add_side(c_dg, dg.source, "source", "text", false);
  add_side(c_dg, dg.target, "target", "image", false);
  c_dg->add_option("--mapper", dg.mapper, "mapper: mapper weights");
  add_fw(c_dg, dg.fw, false);
  c_dg->add_option("--results", dg.results, "substitution: results");
  c_dg->add_option("--baseline", dg.baseline, "interference: baseline results");
  c_dg->add_option("--treated", dg.treated, "interference: treated results");
  c_dg->add_option("--queries-manifest", dg.queries_manifest, "Query manifest");
  c_dg->add_option("--corpus-manifest", dg.corpus_manifest, "Corpus manifest");
  commands.emplace_back(c_dg, [&] { run_diagnose(dg); });

  Sweep sw;
  auto* c_sw = app.add_subcommand("sweep", "Pipeline sweep over shortlist size k or steering strength alpha");
  add_common(c_sw);
  c_sw->add_option("--axis", sw.axis, "k|alpha")->required();
  c_sw->add_option("--grid", sw.grid, "Increasing grid values")->delimiter(',')->required();
  add_side(c_sw, sw.queries, "queries", "text");
  add_side(c_sw, sw.corpus, "corpus", "image");
  add_stage1(c_sw, sw.s1);
  add_phrases(c_sw, sw.phrases, false);
  c_sw->add_option("--stage2", sw.stage2, "none|hungarian|fgw")->capture_default_str();
  c_sw->add_option("-k,--k", sw.k, "Shortlist depth for the alpha axis")->capture_default_str();
  add_fw(c_sw, sw.fw);
  c_sw->add_option("--hungarian-tiebreak", sw.tiebreak, "none|cosine")->capture_default_str();
  add_eval_opts(c_sw, sw.eval);
  commands.emplace_back(c_sw, [&] { run_sweep(sw); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitUsage;
  }

  if (const auto* cfg = app.get_config_ptr(); cfg && cfg->count() > 0) g_run.input(cfg->as<std::string>());

  for (auto& [sub, handler] : commands) {
    if (!sub->parsed()) continue;
    try {
      fs::create_directories(g_run.out_dir);
      handler();
      write_echo(sub);
      g_run.summary["command"] = sub->get_name();
      g_run.summary["status"] = "ok";
      g_run.summary["warnings"] = g_run.warnings;
      std::cout << g_run.summary.dump() << std::endl;
      return 0;
    } catch (const nbra::Error& e) {
      g_log->error("{}", e.what());
      const json s = {{"command", sub->get_name()}, {"status", "error"}, {"error", e.what()}};
      std::cout << s.dump() << std::endl;
      return exit_code(e.kind());
    } catch (const std::exception& e) {
      g_log->error("{}", e.what());
      const json s = {{"command", sub->get_name()}, {"status", "error"}, {"error", e.what()}};
      std::cout << s.dump() << std::endl;
      return kExitData;
    }
  }
  return kExitUsage;
}
