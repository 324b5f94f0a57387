#pragma once
// Synthetic layout-document corpora: key-value extraction pages and
// needle-in-a-haystack documents, with disk round-trip and generation-time
// validation. The vocabulary is pure integer ids: [0..3] reserved (PAD,
// EOS, query marker, one spare), then equal thirds for keys, values, and
// filler. Every pair occupies two horizontally adjacent cells of an 8x8
// page grid, so a value token always directly follows its key in reading
// order and a text oracle can answer by first key match. Duplicate-key
// examples are disambiguated only by the grid's marker channel, and the
// earlier duplicate holds the answer for exactly floor(n/2) of them, which
// pins the text oracle at or below 50% on those examples.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "json.hpp"

#include "docfuse/common.hpp"
#include "docfuse/layout.hpp"
#include "docfuse/training.hpp"

namespace docfuse {

constexpr int kPageCells = 8;                            // grid is 8x8 per page
constexpr int kTilesPerPage = kPageCells * kPageCells / 2;  // horizontal dominoes
constexpr int32_t kReservedIds = 4;

struct CorpusSpec {
  int64_t num_docs = 100;
  int pages_lo = 1, pages_hi = 3;
  int keys_lo = 4, keys_hi = 8;
  int32_t vocab_size = 256;
  double visual_marker_fraction = 0.25;  // fraction of pairs given a grid-only twin
  bool needle_mode = false;
  std::string needle_position = "uniform";
  uint64_t seed = 1234;
  int d_vis = 2;  // channel 0 marks the answer pair's cells, channel 1 occupancy
  double train_fraction = 0.9;

  // Equal thirds of the non-reserved id space.
  int32_t range_size() const { return (vocab_size - kReservedIds) / 3; }
  int32_t first_key() const { return kReservedIds; }
  int32_t first_value() const { return kReservedIds + range_size(); }
  int32_t first_filler() const { return kReservedIds + 2 * range_size(); }

  void validate() const {
    if (num_docs < 0) throw ConfigError("num_docs must be >= 0");
    if (pages_lo < 1 || pages_hi < pages_lo)
      throw ConfigError("pages_per_doc range is empty");
    if (keys_lo < 1 || keys_hi < keys_lo)
      throw ConfigError("keys_per_page range is empty");
    const int capacity = needle_mode ? kTilesPerPage - 1 : kTilesPerPage;
    if (keys_hi > capacity)
      throw ConfigError("keys per page exceed the page grid capacity");
    if (visual_marker_fraction < 0.0 || visual_marker_fraction > 1.0)
      throw ConfigError("visual_marker_fraction must be in [0, 1]");
    if (train_fraction < 0.0 || train_fraction > 1.0)
      throw ConfigError("train_fraction must be in [0, 1]");
    if (range_size() < 2) throw ConfigError("vocabulary too small for keys and values");
    if (static_cast<int64_t>(range_size()) <
        static_cast<int64_t>(pages_hi) * keys_hi)
      throw ConfigError("vocabulary too small for distinct keys per document");
    if (d_vis < 2) throw ConfigError("d_vis must be >= 2 for the marker channel");
    if (needle_position != "uniform")
      throw ConfigError("only the uniform needle distribution is implemented");
  }
};

// One question-answer annotation over a corpus document.
struct QARecord {
  int64_t doc_index = 0;
  std::string doc_file;  // relative path within the corpus directory
  std::vector<int32_t> question, answer;
  int evidence_page = 0;
  bool visual_marker = false;  // answer site distinguishable only via the grid
};

struct Corpus {
  CorpusSpec spec;
  std::vector<std::string> doc_files;
  std::vector<LayoutDocument> docs;
  std::vector<QARecord> qa;
  std::vector<int64_t> train_docs, eval_docs;

  bool is_train_doc(int64_t doc_index) const {
    return std::find(train_docs.begin(), train_docs.end(), doc_index) !=
           train_docs.end();
  }
};

// First-match accuracy of a grid-blind reader: scan for the question key,
// answer with the next token.
struct OracleReport {
  int64_t marker_total = 0, marker_correct = 0;
  int64_t plain_total = 0, plain_correct = 0;

  double marker_accuracy() const {
    return marker_total ? static_cast<double>(marker_correct) / marker_total : 0.0;
  }
  double plain_accuracy() const {
    return plain_total ? static_cast<double>(plain_correct) / plain_total : 0.0;
  }
};

inline OracleReport text_oracle_report(const Corpus& corpus) {
  OracleReport rep;
  for (const auto& qa : corpus.qa) {
    const auto& toks = corpus.docs[qa.doc_index].tokens;
    const int32_t key = qa.question.back();
    bool correct = false;
    for (size_t i = 0; i + 1 < toks.size(); ++i) {
      if (toks[i].id != key) continue;
      correct = toks[i + 1].id == qa.answer.front();
      break;
    }
    (qa.visual_marker ? rep.marker_total : rep.plain_total) += 1;
    if (correct) (qa.visual_marker ? rep.marker_correct : rep.plain_correct) += 1;
  }
  return rep;
}

inline void validate_corpus(const Corpus& corpus) {
  for (const auto& doc : corpus.docs) {
    doc.validate();
    for (size_t a = 0; a < doc.tokens.size(); ++a)
      for (size_t b = a + 1; b < doc.tokens.size(); ++b) {
        const auto& p = doc.tokens[a].box;
        const auto& q = doc.tokens[b].box;
        if (p.page != q.page) continue;
        const bool apart =
            p.x1 <= q.x0 || q.x1 <= p.x0 || p.y1 <= q.y0 || q.y1 <= p.y0;
        if (!apart) throw ValidationError("overlapping boxes on one page");
      }
  }
  for (const auto& qa : corpus.qa) {
    if (qa.doc_index < 0 || qa.doc_index >= static_cast<int64_t>(corpus.docs.size()))
      throw ValidationError("qa record references a missing document");
    if (qa.question.empty() || qa.answer.empty())
      throw ValidationError("qa record with empty question or answer");
    const auto& toks = corpus.docs[qa.doc_index].tokens;
    const int32_t key = qa.question.back();
    bool found = false;
    for (size_t i = 0; i + 1 < toks.size() && !found; ++i)
      found = toks[i].id == key && toks[i].box.page == qa.evidence_page &&
              toks[i + 1].id == qa.answer.front() &&
              toks[i + 1].box.page == qa.evidence_page;
    if (!found)
      throw ValidationError("qa answer not recoverable at its evidence page");
  }
  const OracleReport rep = text_oracle_report(corpus);
  if (rep.marker_total > 0 && rep.marker_accuracy() > 0.55)
    throw ValidationError("text oracle exceeds 55% on marker examples");
  if (rep.plain_total > 0 && rep.plain_accuracy() < 0.99)
    throw ValidationError("text oracle below 99% on plain examples");
}

namespace detail {

struct CellSite {
  int page = 0, i = 0, j = 0;  // key cell; the value sits at (i, j + 1)

  bool operator<(const CellSite& o) const {
    return std::tie(page, i, j) < std::tie(o.page, o.i, o.j);
  }
};

struct PlannedPair {
  int32_t key = 0, value = 0;  // value is the answer when asked
  CellSite canon;
  bool qa = true;  // filler pairs in needle documents are never asked
  bool marker = false;
  CellSite decoy;
  int32_t decoy_value = 0;
};

inline CellSite tile_site(int page, int tile) {
  return CellSite{page, tile / (kPageCells / 2), 2 * (tile % (kPageCells / 2))};
}

inline BoundingBox cell_box(int page, int i, int j) {
  const double s = 1.0 / kPageCells;
  BoundingBox b;
  b.x0 = j * s;
  b.y0 = i * s;
  b.x1 = (j + 1) * s;
  b.y1 = (i + 1) * s;
  b.page = page;
  return b;
}

inline std::string token_text(const CorpusSpec& spec, int32_t id) {
  if (id >= spec.first_filler()) return "w" + std::to_string(id - spec.first_filler());
  if (id >= spec.first_value()) return "v" + std::to_string(id - spec.first_value());
  if (id >= spec.first_key()) return "k" + std::to_string(id - spec.first_key());
  return "#" + std::to_string(id);
}

}  // namespace detail

inline Corpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  Corpus corpus;
  corpus.spec = spec;
  const Rng root(spec.seed);
  Rng marker_rng = root.derive(0xa11);
  Rng split_rng = root.derive(0x5e1);
  const int32_t K = spec.range_size();

  struct DocPlan {
    int pages = 1;
    std::vector<std::vector<int>> free_tiles;  // per page, consumed from the back
    std::vector<detail::PlannedPair> pairs;
    int needle_page = -1;
  };
  std::vector<DocPlan> plans(spec.num_docs);

  for (int64_t d = 0; d < spec.num_docs; ++d) {
    Rng drng = root.derive(0xd0c000 + static_cast<uint64_t>(d));
    DocPlan& plan = plans[d];
    plan.pages = spec.pages_lo +
                 static_cast<int>(drng.uniform_int(spec.pages_hi - spec.pages_lo + 1));
    plan.free_tiles.assign(plan.pages, {});
    for (auto& tiles : plan.free_tiles) {
      tiles.resize(kTilesPerPage);
      for (int t = 0; t < kTilesPerPage; ++t) tiles[t] = t;
      drng.shuffle(tiles);
    }
    std::vector<int> per_page(plan.pages);
    for (auto& n : per_page)
      n = spec.keys_lo +
          static_cast<int>(drng.uniform_int(spec.keys_hi - spec.keys_lo + 1));

    if (spec.needle_mode) {
      plan.needle_page = static_cast<int>(drng.uniform_int(plan.pages));
      for (int p = 0; p < plan.pages; ++p)
        for (int n = 0; n < per_page[p]; ++n) {
          detail::PlannedPair pr;
          pr.key = spec.first_filler() + static_cast<int32_t>(drng.uniform_int(K));
          pr.value = spec.first_filler() + static_cast<int32_t>(drng.uniform_int(K));
          pr.qa = false;
          pr.canon = detail::tile_site(p, plan.free_tiles[p].back());
          plan.free_tiles[p].pop_back();
          plan.pairs.push_back(pr);
        }
      detail::PlannedPair needle;
      needle.key = spec.first_key() + static_cast<int32_t>(drng.uniform_int(K));
      needle.value = spec.first_value() + static_cast<int32_t>(drng.uniform_int(K));
      needle.canon =
          detail::tile_site(plan.needle_page, plan.free_tiles[plan.needle_page].back());
      plan.free_tiles[plan.needle_page].pop_back();
      plan.pairs.push_back(needle);
      continue;
    }

    int total_pairs = 0;
    for (int n : per_page) total_pairs += n;
    const auto key_picks =
        drng.sample_without_replacement(static_cast<uint64_t>(K), total_pairs);
    size_t next_key = 0;
    for (int p = 0; p < plan.pages; ++p)
      for (int n = 0; n < per_page[p]; ++n) {
        detail::PlannedPair pr;
        pr.key =
            spec.first_key() + static_cast<int32_t>(key_picks[next_key++]);
        pr.value = spec.first_value() + static_cast<int32_t>(drng.uniform_int(K));
        pr.canon = detail::tile_site(p, plan.free_tiles[p].back());
        plan.free_tiles[p].pop_back();
        plan.pairs.push_back(pr);
      }
  }

  // Duplicate-key conversion. The counter alternates which twin holds the
  // answer, starting with the later one, so first-match readers score
  // floor(n/2) / n at best.
  int64_t marker_counter = 0;
  if (!spec.needle_mode && spec.visual_marker_fraction > 0.0) {
    for (auto& plan : plans)
      for (auto& pr : plan.pairs) {
        if (marker_rng.uniform() >= spec.visual_marker_fraction) continue;
        std::vector<int> open_pages;
        for (int p = 0; p < plan.pages; ++p)
          if (!plan.free_tiles[p].empty()) open_pages.push_back(p);
        if (open_pages.empty()) continue;  // page grid full, stays plain
        const int dp = open_pages[marker_rng.uniform_int(open_pages.size())];
        const detail::CellSite twin = detail::tile_site(dp, plan.free_tiles[dp].back());
        plan.free_tiles[dp].pop_back();
        const bool canonical_earlier = (marker_counter++ % 2) == 1;
        const detail::CellSite site = pr.canon;
        const detail::CellSite earlier = std::min(site, twin);
        const detail::CellSite later = site < twin ? twin : site;
        pr.marker = true;
        pr.canon = canonical_earlier ? earlier : later;
        pr.decoy = canonical_earlier ? later : earlier;
        do {
          pr.decoy_value =
              spec.first_value() + static_cast<int32_t>(marker_rng.uniform_int(K));
        } while (pr.decoy_value == pr.value);
      }
  }

  for (int64_t d = 0; d < spec.num_docs; ++d) {
    const DocPlan& plan = plans[d];
    LayoutDocument doc;
    doc.num_pages = plan.pages;
    doc.evidence_page = plan.needle_page;  // -1 outside needle mode

    std::vector<std::pair<detail::CellSite, int32_t>> cells;
    for (const auto& pr : plan.pairs) {
      cells.emplace_back(pr.canon, pr.key);
      cells.emplace_back(detail::CellSite{pr.canon.page, pr.canon.i, pr.canon.j + 1},
                         pr.value);
      if (pr.marker) {
        cells.emplace_back(pr.decoy, pr.key);
        cells.emplace_back(detail::CellSite{pr.decoy.page, pr.decoy.i, pr.decoy.j + 1},
                           pr.decoy_value);
      }
    }
    std::sort(cells.begin(), cells.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    for (const auto& [site, id] : cells) {
      LayoutToken tok;
      tok.id = id;
      tok.text = detail::token_text(spec, id);
      tok.box = detail::cell_box(site.page, site.i, site.j);
      doc.tokens.push_back(tok);
    }

    doc.has_grid = true;
    doc.grid.pages = plan.pages;
    doc.grid.h = kPageCells;
    doc.grid.w = kPageCells;
    doc.grid.d_vis = spec.d_vis;
    doc.grid.data.assign(
        static_cast<size_t>(plan.pages) * kPageCells * kPageCells * spec.d_vis, 0.0);
    auto cell_at = [&](const detail::CellSite& s, int ch) -> double& {
      return doc.grid.data[((static_cast<size_t>(s.page) * kPageCells + s.i) *
                                kPageCells +
                            s.j) *
                               spec.d_vis +
                           ch];
    };
    for (const auto& [site, id] : cells) cell_at(site, 1) = 1.0;
    for (const auto& pr : plan.pairs)
      if (pr.marker || (spec.needle_mode && pr.qa)) {
        cell_at(pr.canon, 0) = 1.0;
        cell_at(detail::CellSite{pr.canon.page, pr.canon.i, pr.canon.j + 1}, 0) = 1.0;
      }

    char name[48];
    std::snprintf(name, sizeof name, "docs/doc_%05lld.json",
                  static_cast<long long>(d));
    corpus.doc_files.push_back(name);
    corpus.docs.push_back(std::move(doc));

    for (const auto& pr : plan.pairs) {
      if (!pr.qa) continue;
      QARecord qa;
      qa.doc_index = d;
      qa.doc_file = corpus.doc_files.back();
      qa.question = {kQueryMarkId, pr.key};
      qa.answer = {pr.value};
      qa.evidence_page = pr.canon.page;
      qa.visual_marker = pr.marker;
      corpus.qa.push_back(std::move(qa));
    }
  }

  std::vector<int64_t> order(spec.num_docs);
  for (int64_t d = 0; d < spec.num_docs; ++d) order[d] = d;
  split_rng.shuffle(order);
  const int64_t n_train = std::llround(spec.train_fraction * spec.num_docs);
  corpus.train_docs.assign(order.begin(), order.begin() + n_train);
  corpus.eval_docs.assign(order.begin() + n_train, order.end());
  std::sort(corpus.train_docs.begin(), corpus.train_docs.end());
  std::sort(corpus.eval_docs.begin(), corpus.eval_docs.end());

  validate_corpus(corpus);
  return corpus;
}

// ---- serialization ----

inline nlohmann::json document_to_json(const LayoutDocument& doc) {
  nlohmann::json toks = nlohmann::json::array();
  for (const auto& t : doc.tokens)
    toks.push_back({{"id", t.id},
                    {"text", t.text},
                    {"box", {t.box.x0, t.box.y0, t.box.x1, t.box.y1}},
                    {"page", t.box.page}});
  nlohmann::json j{{"tokens", std::move(toks)},
                   {"meta",
                    {{"evidence_page", doc.evidence_page},
                     {"num_pages", doc.num_pages}}}};
  if (doc.has_grid)
    j["feature_grid"] = {{"pages", doc.grid.pages},
                         {"H", doc.grid.h},
                         {"W", doc.grid.w},
                         {"d_vis", doc.grid.d_vis},
                         {"data", doc.grid.data}};
  return j;
}

inline LayoutDocument document_from_json(const nlohmann::json& j) {
  LayoutDocument doc;
  try {
    for (const auto& t : j.at("tokens")) {
      LayoutToken tok;
      tok.id = t.at("id").get<int32_t>();
      tok.text = t.value("text", std::string{});
      const auto& b = t.at("box");
      tok.box.x0 = b.at(0).get<double>();
      tok.box.y0 = b.at(1).get<double>();
      tok.box.x1 = b.at(2).get<double>();
      tok.box.y1 = b.at(3).get<double>();
      tok.box.page = t.at("page").get<int>();
      doc.tokens.push_back(std::move(tok));
    }
    if (j.contains("meta")) {
      doc.evidence_page = j.at("meta").value("evidence_page", -1);
      doc.num_pages = j.at("meta").value("num_pages", 1);
    }
    if (j.contains("feature_grid")) {
      const auto& g = j.at("feature_grid");
      doc.has_grid = true;
      doc.grid.pages = g.value("pages", 1);
      doc.grid.h = g.at("H").get<int>();
      doc.grid.w = g.at("W").get<int>();
      doc.grid.d_vis = g.at("d_vis").get<int>();
      doc.grid.data = g.at("data").get<std::vector<double>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed document record: ") + e.what());
  }
  doc.validate();
  return doc;
}

inline std::string document_line(const LayoutDocument& doc) {
  return document_to_json(doc).dump();
}

inline LayoutDocument parse_document_line(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed document record: ") + e.what());
  }
  return document_from_json(j);
}

inline nlohmann::json qa_to_json(const QARecord& qa) {
  return nlohmann::json{{"doc", qa.doc_file},
                        {"question", qa.question},
                        {"answer", qa.answer},
                        {"evidence_page", qa.evidence_page},
                        {"visual_marker", qa.visual_marker}};
}

inline QARecord qa_from_json(const nlohmann::json& j) {
  QARecord qa;
  try {
    qa.doc_file = j.at("doc").get<std::string>();
    qa.question = j.at("question").get<std::vector<int32_t>>();
    qa.answer = j.at("answer").get<std::vector<int32_t>>();
    qa.evidence_page = j.value("evidence_page", -1);
    qa.visual_marker = j.value("visual_marker", false);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed qa record: ") + e.what());
  }
  return qa;
}

inline nlohmann::json corpus_spec_to_json(const CorpusSpec& spec) {
  return nlohmann::json{{"num_docs", spec.num_docs},
                        {"pages_lo", spec.pages_lo},
                        {"pages_hi", spec.pages_hi},
                        {"keys_lo", spec.keys_lo},
                        {"keys_hi", spec.keys_hi},
                        {"vocab_size", spec.vocab_size},
                        {"visual_marker_fraction", spec.visual_marker_fraction},
                        {"needle_mode", spec.needle_mode},
                        {"needle_position", spec.needle_position},
                        {"seed", spec.seed},
                        {"d_vis", spec.d_vis},
                        {"train_fraction", spec.train_fraction}};
}

inline CorpusSpec corpus_spec_from_json(const nlohmann::json& j) {
  CorpusSpec spec;
  try {
    spec.num_docs = j.value("num_docs", spec.num_docs);
    spec.pages_lo = j.value("pages_lo", spec.pages_lo);
    spec.pages_hi = j.value("pages_hi", spec.pages_hi);
    spec.keys_lo = j.value("keys_lo", spec.keys_lo);
    spec.keys_hi = j.value("keys_hi", spec.keys_hi);
    spec.vocab_size = j.value("vocab_size", spec.vocab_size);
    spec.visual_marker_fraction =
        j.value("visual_marker_fraction", spec.visual_marker_fraction);
    spec.needle_mode = j.value("needle_mode", spec.needle_mode);
    spec.needle_position = j.value("needle_position", spec.needle_position);
    spec.seed = j.value("seed", spec.seed);
    spec.d_vis = j.value("d_vis", spec.d_vis);
    spec.train_fraction = j.value("train_fraction", spec.train_fraction);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed corpus spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

namespace detail {

inline void write_text_file(const std::filesystem::path& path, const std::string& body) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << body;
  if (!f.good()) throw IoError("short write to " + path.string());
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::string body((std::istreambuf_iterator<char>(f)),
                   std::istreambuf_iterator<char>());
  return body;
}

}  // namespace detail

inline void write_corpus(const Corpus& corpus, const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  std::error_code ec;
  fs::create_directories(root / "docs", ec);
  if (ec) throw IoError("cannot create corpus directory " + dir);

  for (size_t d = 0; d < corpus.docs.size(); ++d)
    detail::write_text_file(root / corpus.doc_files[d],
                            document_line(corpus.docs[d]) + "\n");

  std::string qa_body;
  for (const auto& qa : corpus.qa) qa_body += qa_to_json(qa).dump() + "\n";
  detail::write_text_file(root / "qa.jsonl", qa_body);

  const OracleReport rep = text_oracle_report(corpus);
  nlohmann::json split{{"train", nlohmann::json::array()},
                       {"eval", nlohmann::json::array()}};
  for (int64_t d : corpus.train_docs) split["train"].push_back(corpus.doc_files[d]);
  for (int64_t d : corpus.eval_docs) split["eval"].push_back(corpus.doc_files[d]);
  nlohmann::json manifest{{"spec", corpus_spec_to_json(corpus.spec)},
                          {"seed", corpus.spec.seed},
                          {"num_docs", corpus.docs.size()},
                          {"num_examples", corpus.qa.size()},
                          {"num_marker_examples", rep.marker_total},
                          {"docs", corpus.doc_files},
                          {"split", std::move(split)},
                          {"oracle",
                           {{"marker_accuracy", rep.marker_accuracy()},
                            {"plain_accuracy", rep.plain_accuracy()}}}};
  detail::write_text_file(root / "manifest.json", manifest.dump(2) + "\n");
}

inline Corpus load_corpus(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(detail::read_text_file(root / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed manifest: ") + e.what());
  }

  Corpus corpus;
  std::map<std::string, int64_t> index_of;
  try {
    corpus.spec = corpus_spec_from_json(manifest.at("spec"));
    for (const auto& name : manifest.at("docs")) {
      const std::string file = name.get<std::string>();
      index_of[file] = static_cast<int64_t>(corpus.doc_files.size());
      corpus.doc_files.push_back(file);
      std::string line = detail::read_text_file(root / file);
      while (!line.empty() && (line.back() == '\n' || line.back() == '\r'))
        line.pop_back();
      corpus.docs.push_back(parse_document_line(line));
    }
    for (const auto& name : manifest.at("split").at("train"))
      corpus.train_docs.push_back(index_of.at(name.get<std::string>()));
    for (const auto& name : manifest.at("split").at("eval"))
      corpus.eval_docs.push_back(index_of.at(name.get<std::string>()));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed manifest: ") + e.what());
  } catch (const std::out_of_range&) {
    throw ValidationError("manifest split references an unlisted document");
  }

  std::string qa_body = detail::read_text_file(root / "qa.jsonl");
  size_t pos = 0;
  while (pos < qa_body.size()) {
    size_t end = qa_body.find('\n', pos);
    if (end == std::string::npos) end = qa_body.size();
    const std::string line = qa_body.substr(pos, end - pos);
    pos = end + 1;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("malformed qa record: ") + e.what());
    }
    QARecord qa = qa_from_json(j);
    const auto it = index_of.find(qa.doc_file);
    if (it == index_of.end())
      throw ValidationError("qa record references an unlisted document");
    qa.doc_index = it->second;
    corpus.qa.push_back(std::move(qa));
  }
  return corpus;
}

// Materializes QA records of one split as training examples; ids are the QA
// record indices so failure messages point back at the corpus.
inline std::vector<TrainExample> corpus_train_examples(const Corpus& corpus,
                                                       bool train_split) {
  std::vector<char> in_train(corpus.docs.size(), 0);
  for (int64_t d : corpus.train_docs) in_train[d] = 1;
  std::vector<TrainExample> out;
  for (size_t i = 0; i < corpus.qa.size(); ++i) {
    const auto& qa = corpus.qa[i];
    if ((in_train[qa.doc_index] != 0) != train_split) continue;
    TrainExample ex;
    ex.id = static_cast<int64_t>(i);
    ex.doc = corpus.docs[qa.doc_index];
    ex.question = qa.question;
    ex.answer = qa.answer;
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace docfuse
