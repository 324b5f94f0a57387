#pragma once
// Command line front end. cli_dispatch routes one subcommand invocation to
// the library, writing to the streams it is given so tests can drive every
// pipeline in-process. Exit codes are stable: 0 success, 1 failed gradient
// check, 2 usage, 3 missing or unreadable file, 4 invalid config or data,
// 5 internal error.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "docfuse/calibration.hpp"
#include "docfuse/checkpoint.hpp"
#include "docfuse/chunker.hpp"
#include "docfuse/common.hpp"
#include "docfuse/data.hpp"
#include "docfuse/grad_check.hpp"
#include "docfuse/memory_model.hpp"
#include "docfuse/model.hpp"
#include "docfuse/training.hpp"

namespace docfuse {

inline const char* cli_usage() {
  return
      "usage: docfuse <subcommand> [flags]\n"
      "  gen-data    --spec <file> --out <dir> [--seed N]\n"
      "  train       --config <file> --data <dir> --out <dir> [--seed N]\n"
      "  infer       --checkpoint <file> --doc <file> --question \"<tokens>\"\n"
      "              [--max-out N] [--recompute-cross-kv] [--gold \"<tokens>\"]\n"
      "              [--evidence-page N] [--append <file>]\n"
      "  eval        --pred <file> [--ece-bins N] [--bucket-pages N] [--out <dir>]\n"
      "  chunk-plan  --input-len N --core N [--overlap N] [--prefix N]\n"
      "  budget      --config <file> [--mode inference|training]\n"
      "              [--toggle <name>]... [--context N] [--sweep]\n"
      "  grad-check  [--seed N]\n"
      "exit codes: 0 ok, 1 failed check, 2 usage, 3 missing file,\n"
      "            4 invalid config or data, 5 internal error\n";
}

namespace detail {

// --------------------------------------------------------------------------
// Flag parsing; malformed invocations throw UsageError.

struct ArgSpec {
  std::set<std::string> valued;
  std::set<std::string> boolean;
  std::set<std::string> repeated;
};

struct ParsedArgs {
  std::map<std::string, std::string> values;
  std::set<std::string> flags;
  std::map<std::string, std::vector<std::string>> repeats;

  bool has(const std::string& k) const {
    return values.count(k) != 0 || flags.count(k) != 0;
  }
  const std::string& at(const std::string& k) const { return values.at(k); }
};

inline ParsedArgs parse_args(const std::vector<std::string>& args, const ArgSpec& spec) {
  ParsedArgs out;
  for (size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (spec.boolean.count(a) != 0) {
      out.flags.insert(a);
      continue;
    }
    if (spec.valued.count(a) != 0 || spec.repeated.count(a) != 0) {
      if (i + 1 >= args.size()) throw UsageError(a + " needs a value");
      const std::string& v = args[++i];
      if (spec.repeated.count(a) != 0)
        out.repeats[a].push_back(v);
      else if (!out.values.emplace(a, v).second)
        throw UsageError("duplicate flag " + a);
      continue;
    }
    throw UsageError("unknown flag '" + a + "'");
  }
  return out;
}

inline void require_flags(const ParsedArgs& args, const std::vector<std::string>& names) {
  for (const auto& n : names)
    if (!args.has(n)) throw UsageError("missing required flag " + n);
}

template <typename E>
int64_t to_i64(const std::string& s) {
  int64_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw E("not an integer: '" + s + "'");
  return v;
}

template <typename E>
uint64_t to_u64(const std::string& s) {
  uint64_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw E("not a non-negative integer: '" + s + "'");
  return v;
}

template <typename E>
double to_f64(const std::string& s) {
  size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw E("not a number: '" + s + "'");
  }
  if (pos != s.size()) throw E("not a number: '" + s + "'");
  return v;
}

template <typename E>
bool to_bool(const std::string& s) {
  if (s == "1" || s == "true") return true;
  if (s == "0" || s == "false") return false;
  throw E("not a boolean (use 0/1/true/false): '" + s + "'");
}

// --------------------------------------------------------------------------
// Flat key-value config files: 'key = value' lines, '#' comments.

inline std::string trim(const std::string& s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b])) != 0) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1])) != 0) --e;
  return s.substr(b, e - b);
}

inline std::map<std::string, std::string> read_kv_file(const std::string& path) {
  const std::string body = read_text_file(path);
  std::map<std::string, std::string> out;
  std::istringstream ss(body);
  std::string line;
  int64_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError(path + ":" + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key.empty())
      throw ValidationError(path + ":" + std::to_string(lineno) + ": empty key");
    if (!out.emplace(key, val).second)
      throw ValidationError(path + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
  }
  return out;
}

// Consumes recognized keys; leftovers are reported as unknown.
class KvReader {
 public:
  explicit KvReader(std::map<std::string, std::string> kv) : kv_(std::move(kv)) {}

  void i64(const std::string& key, int64_t& field) {
    if (auto v = take(key)) field = to_i64<ValidationError>(*v);
  }
  void i32(const std::string& key, int32_t& field) {
    if (auto v = take(key)) field = static_cast<int32_t>(to_i64<ValidationError>(*v));
  }
  void int_(const std::string& key, int& field) {
    if (auto v = take(key)) field = static_cast<int>(to_i64<ValidationError>(*v));
  }
  void u64(const std::string& key, uint64_t& field) {
    if (auto v = take(key)) field = to_u64<ValidationError>(*v);
  }
  void f64(const std::string& key, double& field) {
    if (auto v = take(key)) field = to_f64<ValidationError>(*v);
  }
  void b(const std::string& key, bool& field) {
    if (auto v = take(key)) field = to_bool<ValidationError>(*v);
  }
  void str(const std::string& key, std::string& field) {
    if (auto v = take(key)) field = *v;
  }
  void finish(const char* what) const {
    if (!kv_.empty())
      throw ValidationError(std::string(what) + " config has unknown key '" +
                            kv_.begin()->first + "'");
  }

 private:
  std::optional<std::string> take(const std::string& key) {
    auto it = kv_.find(key);
    if (it == kv_.end()) return std::nullopt;
    std::string v = it->second;
    kv_.erase(it);
    return v;
  }
  std::map<std::string, std::string> kv_;
};

inline CorpusSpec corpus_spec_from_kv(std::map<std::string, std::string> kv) {
  CorpusSpec spec;
  KvReader r(std::move(kv));
  r.i64("num_docs", spec.num_docs);
  r.int_("pages_lo", spec.pages_lo);
  r.int_("pages_hi", spec.pages_hi);
  r.int_("keys_lo", spec.keys_lo);
  r.int_("keys_hi", spec.keys_hi);
  r.i32("vocab_size", spec.vocab_size);
  r.f64("visual_marker_fraction", spec.visual_marker_fraction);
  r.b("needle_mode", spec.needle_mode);
  r.str("needle_position", spec.needle_position);
  r.u64("seed", spec.seed);
  r.int_("d_vis", spec.d_vis);
  r.f64("train_fraction", spec.train_fraction);
  r.finish("corpus");
  return spec;
}

struct TrainFileConfig {
  TrainConfig train;
  ModelConfig model;
  uint64_t init_seed = 1;
};

inline TrainFileConfig train_configs_from_kv(std::map<std::string, std::string> kv) {
  TrainFileConfig out;
  KvReader r(std::move(kv));
  r.i64("total_steps", out.train.total_steps);
  r.i64("batch_size", out.train.batch_size);
  r.f64("peak_lr", out.train.peak_lr);
  r.f64("mid_lr", out.train.mid_lr);
  r.f64("final_lr", out.train.final_lr);
  r.f64("warmup_frac", out.train.warmup_frac);
  r.f64("linear_frac", out.train.linear_frac);
  r.f64("weight_decay", out.train.weight_decay);
  r.i64("max_chunks", out.train.max_chunks);
  r.u64("seed", out.train.seed);
  r.b("scaled_updates", out.train.scaled_updates);
  r.f64("beta1", out.train.beta1);
  r.f64("beta2", out.train.beta2);
  r.f64("adam_eps", out.train.adam_eps);
  r.u64("init_seed", out.init_seed);
  r.i64("d", out.model.d);
  r.i64("num_layers_enc", out.model.num_layers_enc);
  r.i64("num_layers_dec", out.model.num_layers_dec);
  r.i64("num_heads", out.model.num_heads);
  r.i64("d_ff", out.model.d_ff);
  r.i64("vocab_size", out.model.vocab_size);
  r.i64("c", out.model.c);
  r.i64("o", out.model.o);
  r.i64("l", out.model.l);
  r.i64("d_vis", out.model.d_vis);
  r.f64("dropout", out.model.dropout);
  r.b("fusion_every_layer", out.model.fusion_every_layer);
  r.b("fusion_after_ffn", out.model.fusion_after_ffn);
  r.b("recompute_cross_kv", out.model.recompute_cross_kv);
  r.b("chunk_local_positions", out.model.chunk_local_positions);
  r.b("use_visual", out.model.use_visual);
  r.int_("num_buckets_1d", out.model.bias.num_buckets_1d);
  r.i64("max_distance_1d", out.model.bias.max_distance_1d);
  r.int_("num_buckets_2d", out.model.bias.num_buckets_2d);
  r.i64("max_distance_2d", out.model.bias.max_distance_2d);
  r.finish("train");
  out.model.bias.num_heads = static_cast<int>(out.model.num_heads);
  return out;
}

inline MemConfig mem_config_from_kv(std::map<std::string, std::string> kv) {
  MemConfig cfg;
  KvReader r(std::move(kv));
  r.i64("d", cfg.d);
  r.i64("num_layers_enc", cfg.num_layers_enc);
  r.i64("num_layers_dec", cfg.num_layers_dec);
  r.i64("num_heads", cfg.num_heads);
  r.i64("d_ff", cfg.d_ff);
  r.i64("vocab_size", cfg.vocab_size);
  r.i64("c", cfg.c);
  r.i64("o", cfg.o);
  r.i64("l", cfg.l);
  r.i64("out_len", cfg.out_len);
  r.i64("max_chunks", cfg.max_chunks);
  r.i64("budget_bytes", cfg.budget_bytes);
  r.b("sparsity", cfg.sparsity);
  r.b("mixed_precision", cfg.mixed_precision);
  r.b("mem_efficient_attention", cfg.mem_efficient_attention);
  r.b("no_cross_kv_cache", cfg.no_cross_kv_cache);
  r.b("nested_checkpointing", cfg.nested_checkpointing);
  r.b("cpu_offload", cfg.cpu_offload);
  r.b("random_chunks", cfg.random_chunks);
  r.finish("budget");
  return cfg;
}

inline bool* toggle_field(MemConfig& cfg, const std::string& name) {
  if (name == "sparsity") return &cfg.sparsity;
  if (name == "mixed_precision") return &cfg.mixed_precision;
  if (name == "mem_efficient_attention") return &cfg.mem_efficient_attention;
  if (name == "no_cross_kv_cache") return &cfg.no_cross_kv_cache;
  if (name == "nested_checkpointing") return &cfg.nested_checkpointing;
  if (name == "cpu_offload") return &cfg.cpu_offload;
  if (name == "random_chunks") return &cfg.random_chunks;
  return nullptr;
}

inline void clear_toggles(MemConfig& cfg) {
  cfg.sparsity = cfg.mixed_precision = cfg.mem_efficient_attention = false;
  cfg.no_cross_kv_cache = cfg.nested_checkpointing = false;
  cfg.cpu_offload = cfg.random_chunks = false;
}

inline void make_dirs(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

// Whitespace tokenizer over the integer vocabulary: decimal ids pass through,
// '?' is the query marker, anything else must match a document token's text.
inline std::vector<int32_t> parse_token_list(const std::string& text,
                                             const LayoutDocument& doc, int64_t vocab) {
  std::vector<int32_t> ids;
  std::istringstream ss(text);
  std::string w;
  while (ss >> w) {
    int32_t id = -1;
    if (w == "?") {
      id = kQueryMarkId;
    } else if (std::all_of(w.begin(), w.end(), [](unsigned char ch) {
                 return std::isdigit(ch) != 0;
               })) {
      id = static_cast<int32_t>(to_i64<ValidationError>(w));
    } else {
      for (const auto& t : doc.tokens)
        if (t.text == w) {
          id = t.id;
          break;
        }
      if (id < 0) throw ValidationError("token '" + w + "' not found in document");
    }
    if (id < 0 || id >= vocab)
      throw ValidationError("token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(vocab));
    ids.push_back(id);
  }
  if (ids.empty()) throw ValidationError("empty token list");
  return ids;
}

inline std::string first_content_line(const std::string& body, const std::string& path) {
  std::istringstream ss(body);
  std::string line;
  while (std::getline(ss, line))
    if (!trim(line).empty()) return line;
  throw ValidationError(path + " holds no document record");
}

inline std::string fmt(const char* pattern, ...) {
  va_list ap;
  va_start(ap, pattern);
  char buf[256];
  std::vsnprintf(buf, sizeof buf, pattern, ap);
  va_end(ap);
  return buf;
}

}  // namespace detail

// --------------------------------------------------------------------------
// Subcommands. Each returns the process exit status; errors are thrown and
// mapped to the code taxonomy by cli_dispatch.

inline int cmd_gen_data(const std::vector<std::string>& args, std::ostream& out) {
  detail::ArgSpec spec;
  spec.valued = {"--spec", "--out", "--seed"};
  const auto a = detail::parse_args(args, spec);
  detail::require_flags(a, {"--spec", "--out"});
  CorpusSpec cs = detail::corpus_spec_from_kv(detail::read_kv_file(a.at("--spec")));
  if (a.has("--seed")) cs.seed = detail::to_u64<UsageError>(a.at("--seed"));
  const Corpus corpus = generate_corpus(cs);
  write_corpus(corpus, a.at("--out"));
  out << "gen-data: " << corpus.docs.size() << " documents, " << corpus.qa.size()
      << " qa records -> " << a.at("--out") << "\n";
  return 0;
}

inline int cmd_train(const std::vector<std::string>& args, std::ostream& out) {
  detail::ArgSpec spec;
  spec.valued = {"--config", "--data", "--out", "--seed"};
  const auto a = detail::parse_args(args, spec);
  detail::require_flags(a, {"--config", "--data", "--out"});
  detail::TrainFileConfig cfg =
      detail::train_configs_from_kv(detail::read_kv_file(a.at("--config")));
  if (a.has("--seed")) cfg.train.seed = detail::to_u64<UsageError>(a.at("--seed"));

  const Corpus corpus = load_corpus(a.at("--data"));
  if (cfg.model.vocab_size < corpus.spec.vocab_size)
    throw ValidationError("model vocab_size " + std::to_string(cfg.model.vocab_size) +
                          " is smaller than the corpus vocabulary " +
                          std::to_string(corpus.spec.vocab_size));
  if (cfg.model.use_visual && cfg.model.d_vis != corpus.spec.d_vis)
    throw ValidationError("model d_vis " + std::to_string(cfg.model.d_vis) +
                          " does not match the corpus feature grid depth " +
                          std::to_string(corpus.spec.d_vis));
  const auto examples = corpus_train_examples(corpus, true);

  Rng init(cfg.init_seed);
  auto params = ModelParams<double>::init(cfg.model, init);
  auto st = OptState<double>::init(params);
  const auto metrics = fit(params, st, examples, cfg.train);

  const std::filesystem::path dir(a.at("--out"));
  detail::make_dirs(dir);
  save_checkpoint((dir / "checkpoint.bin").string(), params, cfg.train.total_steps);
  std::string log;
  for (const auto& row : metrics)
    log += nlohmann::json{{"step", row.step}, {"loss", row.loss}, {"lr", row.lr}}.dump() +
           "\n";
  detail::write_text_file(dir / "metrics.jsonl", log);
  out << "train: " << cfg.train.total_steps << " steps on " << examples.size()
      << " examples, final loss "
      << detail::fmt("%.6f", metrics.empty() ? 0.0 : metrics.back().loss) << " -> "
      << a.at("--out") << "\n";
  return 0;
}

inline int cmd_infer(const std::vector<std::string>& args, std::ostream& out) {
  detail::ArgSpec spec;
  spec.valued = {"--checkpoint", "--doc",           "--question", "--max-out",
                 "--gold",       "--evidence-page", "--append"};
  spec.boolean = {"--recompute-cross-kv"};
  const auto a = detail::parse_args(args, spec);
  detail::require_flags(a, {"--checkpoint", "--doc", "--question"});
  const int64_t max_out =
      a.has("--max-out") ? detail::to_i64<UsageError>(a.at("--max-out")) : 8;
  if (max_out < 1) throw UsageError("--max-out must be >= 1");

  auto loaded = load_checkpoint<double>(a.at("--checkpoint"));
  if (a.has("--recompute-cross-kv")) loaded.params.cfg.recompute_cross_kv = true;
  const std::string body = detail::read_text_file(a.at("--doc"));
  const LayoutDocument doc =
      parse_document_line(detail::first_content_line(body, a.at("--doc")));
  doc.validate();
  const int64_t vocab = loaded.params.cfg.vocab_size;
  const auto question = detail::parse_token_list(a.at("--question"), doc, vocab);

  Tape<double> tape;
  const auto enc = encode(tape, doc, question, loaded.params);
  const auto gen = generate(enc, loaded.params, max_out);

  std::map<int32_t, std::string> texts;
  for (const auto& t : doc.tokens) texts.emplace(t.id, t.text);
  std::string answer_text;
  for (size_t i = 0; i < gen.tokens.size(); ++i) {
    if (i > 0) answer_text += ' ';
    const auto it = texts.find(gen.tokens[i]);
    answer_text += it != texts.end() ? it->second : "#" + std::to_string(gen.tokens[i]);
  }

  nlohmann::json rec{{"answer", gen.tokens},
                     {"answer_text", answer_text},
                     {"scores", gen.scores},
                     {"confidence", answer_confidence(gen.scores)},
                     {"doc_pages", doc.num_pages}};
  if (a.has("--gold")) {
    const auto gold = detail::parse_token_list(a.at("--gold"), doc, vocab);
    rec["gold"] = gold;
    rec["correct"] = gen.tokens == gold;
  }
  if (a.has("--evidence-page"))
    rec["evidence_page"] = detail::to_i64<UsageError>(a.at("--evidence-page"));

  const std::string line = rec.dump();
  out << line << "\n";
  if (a.has("--append")) {
    std::ofstream f(a.at("--append"), std::ios::binary | std::ios::app);
    if (!f) throw IoError("cannot open " + a.at("--append") + " for append");
    f << line << "\n";
  }
  return 0;
}

inline int cmd_eval(const std::vector<std::string>& args, std::ostream& out) {
  detail::ArgSpec spec;
  spec.valued = {"--pred", "--ece-bins", "--bucket-pages", "--out"};
  const auto a = detail::parse_args(args, spec);
  detail::require_flags(a, {"--pred"});
  const int64_t bins =
      a.has("--ece-bins") ? detail::to_i64<UsageError>(a.at("--ece-bins")) : 10;
  const int64_t bucket_pages =
      a.has("--bucket-pages") ? detail::to_i64<UsageError>(a.at("--bucket-pages")) : 5;
  if (bins < 1) throw UsageError("--ece-bins must be >= 1");
  if (bucket_pages < 1) throw UsageError("--bucket-pages must be >= 1");
  const std::filesystem::path dir(a.has("--out") ? a.at("--out") : ".");

  const std::string body = detail::read_text_file(a.at("--pred"));
  std::vector<PredictionRecord> records;
  std::istringstream ss(body);
  std::string line;
  int64_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(a.at("--pred") + ":" + std::to_string(lineno) +
                            ": bad prediction record: " + e.what());
    }
    try {
      PredictionRecord r;
      if (j.contains("answer")) r.answer_tokens = j.at("answer").get<std::vector<int32_t>>();
      if (j.contains("scores")) r.token_scores = j.at("scores").get<std::vector<double>>();
      if (j.contains("confidence"))
        r.confidence = j.at("confidence").get<double>();
      else if (!r.token_scores.empty())
        r.confidence = answer_confidence(r.token_scores);
      else
        throw ValidationError("record lacks confidence and scores");
      if (j.contains("correct"))
        r.correct = j.at("correct").get<bool>();
      else if (j.contains("gold") && j.contains("answer"))
        r.correct = j.at("gold").get<std::vector<int32_t>>() == r.answer_tokens;
      else
        throw ValidationError("record lacks correct and gold");
      r.evidence_page = j.value("evidence_page", int64_t{-1});
      r.doc_pages = j.value("doc_pages", int64_t{-1});
      records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(a.at("--pred") + ":" + std::to_string(lineno) +
                            ": bad prediction record: " + e.what());
    }
  }
  if (records.empty()) throw ValidationError(a.at("--pred") + " holds no records");

  int64_t hits = 0;
  for (const auto& r : records) hits += r.correct ? 1 : 0;
  const double em = static_cast<double>(hits) / static_cast<double>(records.size());
  const double e = ece(records, bins);
  const auto rc = risk_coverage(records);
  out << "n " << records.size() << "\n";
  out << "exact_match " << detail::fmt("%.6f", em) << "\n";
  out << "ece " << detail::fmt("%.6f", e) << "\n";
  out << "aurc " << detail::fmt("%.6f", rc.aurc) << "\n";

  detail::make_dirs(dir);
  std::string cal = "bin\tlo\thi\tmean_confidence\taccuracy\tcount\n";
  for (const auto& b : calibration_plot_data(records, bins))
    cal += detail::fmt("%lld\t%.6f\t%.6f\t%.6f\t%.6f\t%lld\n",
                       static_cast<long long>(b.bin), b.lo, b.hi, b.mean_confidence,
                       b.accuracy, static_cast<long long>(b.count));
  detail::write_text_file(dir / "calibration.tsv", cal);
  std::string rcv = "coverage\trisk\n";
  for (const auto& p : rc.curve) rcv += detail::fmt("%.6f\t%.6f\n", p.coverage, p.risk);
  detail::write_text_file(dir / "risk_coverage.tsv", rcv);

  const bool any_page = std::any_of(records.begin(), records.end(),
                                    [](const PredictionRecord& r) { return r.evidence_page >= 0; });
  if (any_page) {
    std::string ev = "bucket\taccuracy\tcount\n";
    for (const auto& b : evidence_position_report(records, bucket_pages)) {
      ev += detail::fmt("%lld\t%.6f\t%lld\n", static_cast<long long>(b.bucket), b.accuracy,
                        static_cast<long long>(b.count));
      out << "bucket " << b.bucket << " accuracy " << detail::fmt("%.6f", b.accuracy)
          << " count " << b.count << "\n";
    }
    detail::write_text_file(dir / "evidence_buckets.tsv", ev);
  }
  return 0;
}

inline int cmd_chunk_plan(const std::vector<std::string>& args, std::ostream& out) {
  detail::ArgSpec spec;
  spec.valued = {"--input-len", "--core", "--overlap", "--prefix"};
  const auto a = detail::parse_args(args, spec);
  detail::require_flags(a, {"--input-len", "--core"});
  const int64_t n = detail::to_i64<UsageError>(a.at("--input-len"));
  const int64_t c = detail::to_i64<UsageError>(a.at("--core"));
  const int64_t o = a.has("--overlap") ? detail::to_i64<UsageError>(a.at("--overlap")) : 0;
  const int64_t l = a.has("--prefix") ? detail::to_i64<UsageError>(a.at("--prefix")) : 0;
  const ChunkPlan plan = plan_chunks(n, c, o, l);
  for (const auto& span : plan.chunks) out << span.start << " " << span.end << "\n";
  return 0;
}

inline int cmd_budget(const std::vector<std::string>& args, std::ostream& out) {
  detail::ArgSpec spec;
  spec.valued = {"--config", "--mode", "--context"};
  spec.boolean = {"--sweep"};
  spec.repeated = {"--toggle"};
  const auto a = detail::parse_args(args, spec);
  detail::require_flags(a, {"--config"});
  MemConfig cfg = detail::mem_config_from_kv(detail::read_kv_file(a.at("--config")));
  if (a.has("--mode")) {
    const std::string& m = a.at("--mode");
    if (m == "inference")
      cfg.mode = MemMode::inference;
    else if (m == "training")
      cfg.mode = MemMode::training;
    else
      throw UsageError("--mode must be inference or training");
  }
  if (const auto it = a.repeats.find("--toggle"); it != a.repeats.end())
    for (const auto& name : it->second) {
      bool* field = detail::toggle_field(cfg, name);
      if (field == nullptr) throw UsageError("unknown toggle '" + name + "'");
      *field = true;
    }

  if (a.has("--sweep")) {
    const std::vector<std::string> inference_ladder{
        "sparsity", "mixed_precision", "mem_efficient_attention", "no_cross_kv_cache"};
    const std::vector<std::string> training_ladder{
        "sparsity",      "nested_checkpointing", "mixed_precision",
        "mem_efficient_attention", "cpu_offload", "random_chunks"};
    out << "mode toggle max_context\n";
    for (const auto mode : {MemMode::inference, MemMode::training}) {
      MemConfig step = cfg;
      detail::clear_toggles(step);
      step.mode = mode;
      const char* mode_name = mode == MemMode::inference ? "inference" : "training";
      out << mode_name << " (none) " << max_context(step) << "\n";
      const auto& ladder =
          mode == MemMode::inference ? inference_ladder : training_ladder;
      for (const auto& name : ladder) {
        *detail::toggle_field(step, name) = true;
        out << mode_name << " +" << name << " " << max_context(step) << "\n";
      }
    }
    return 0;
  }

  cfg.validate();
  const int64_t mx = max_context(cfg);
  const int64_t C =
      a.has("--context") ? detail::to_i64<UsageError>(a.at("--context")) : mx;
  if (C < 1) throw UsageError("--context must be >= 1");
  const MemoryBreakdown est = estimate_memory(C, cfg);
  out << "context " << C << "\n";
  out << "weights " << est.weights << "\n";
  out << "activations " << est.activations << "\n";
  out << "attention " << est.attention << "\n";
  out << "kv_cache " << est.kv_cache << "\n";
  out << "gradients " << est.gradients << "\n";
  out << "optimizer " << est.optimizer << "\n";
  out << "total " << est.total() << "\n";
  out << "max_context " << mx << "\n";
  return 0;
}

namespace detail {

inline ModelConfig grad_check_config(int64_t d, int64_t layers) {
  ModelConfig cfg;
  cfg.d = d;
  cfg.num_heads = 2;
  cfg.num_layers_enc = layers;
  cfg.num_layers_dec = layers;
  cfg.vocab_size = 12;
  cfg.d_ff = 16;
  cfg.d_vis = 2;
  cfg.dropout = 0.0;
  cfg.c = 16;
  cfg.bias.num_heads = 2;
  cfg.bias.num_buckets_1d = 8;
  cfg.bias.num_buckets_2d = 8;
  return cfg;
}

inline LayoutDocument grad_check_doc(uint64_t seed) {
  LayoutDocument doc;
  const std::vector<int32_t> ids{4, 5, 6, 7, 8, 9};
  for (size_t t = 0; t < ids.size(); ++t) {
    LayoutToken tok;
    tok.id = ids[t];
    const double x = static_cast<double>(t % 4) / 4.0, y = static_cast<double>(t / 4) / 4.0;
    tok.box = BoundingBox{x + 0.01, y + 0.01, x + 0.2, y + 0.15, 0};
    doc.tokens.push_back(tok);
  }
  doc.has_grid = true;
  doc.grid.pages = 1;
  doc.grid.h = 4;
  doc.grid.w = 4;
  doc.grid.d_vis = 2;
  doc.grid.data.resize(4 * 4 * 2);
  Rng rng(seed);
  for (auto& v : doc.grid.data) v = rng.normal();
  return doc;
}

}  // namespace detail

inline int cmd_grad_check(const std::vector<std::string>& args, std::ostream& out) {
  detail::ArgSpec spec;
  spec.valued = {"--seed"};
  const auto a = detail::parse_args(args, spec);
  const uint64_t seed = a.has("--seed") ? detail::to_u64<UsageError>(a.at("--seed")) : 5;
  const double tol = 1e-4;
  const double h = 1e-5;
  bool all_pass = true;
  auto report = [&](const char* name, const GradCheckResult<double>& res) {
    const bool pass = res.max_rel_err < tol;
    all_pass = all_pass && pass;
    out << detail::fmt("%-16s max_rel_err %.3e over %lld coordinates %s\n", name,
                       res.max_rel_err, static_cast<long long>(res.checked),
                       pass ? "PASS" : "FAIL");
  };

  {
    Rng rng(seed);
    auto p = FusionParams<double>::init(4, rng, 0.0);
    auto t = randn_tensor<double>({1, 3, 4}, rng);
    auto i = randn_tensor<double>({1, 3, 4}, rng);
    auto fn = [&](Tape<double>& tape) {
      auto y = fuse(tape, t, i, p, false, nullptr);
      return mean_all(tape, mul(tape, y, y));
    };
    report("fusion", grad_check<double>(fn, {p.V, p.R, p.O, p.w}, h));
  }
  {
    Rng rng(seed + 1);
    auto x = randn_tensor<double>({3, 6}, rng, 1.0, true);
    auto w = randn_tensor<double>({6}, rng, 1.0, true);
    auto probe = randn_tensor<double>({3, 6}, rng, 1.0, false);
    auto fn = [&](Tape<double>& t) {
      auto y = rms_norm(t, x, w, 1e-6);
      return mean_all(t, mul(t, y, probe));
    };
    report("rms_norm", grad_check<double>(fn, {x, w}, h));
  }
  {
    Rng rng(seed + 2);
    ModelConfig cfg = detail::grad_check_config(8, 1);
    auto params = ModelParams<double>::init(cfg, rng);
    const LayoutDocument doc = detail::grad_check_doc(seed + 100);
    const std::vector<int32_t> prefix{2, 3};
    auto fn = [&](Tape<double>& t) {
      auto enc = encode(t, doc, prefix, params);
      return mean_all(t, mul(t, enc.states, enc.states));
    };
    std::vector<TensorPtr<double>> attn;
    for (const auto& [name, tns] : params.named())
      if (name.rfind("enc.bias", 0) == 0 || name.find("attn.w") != std::string::npos)
        attn.push_back(tns);
    report("attention_bias", grad_check<double>(fn, attn, h));
  }
  {
    Rng rng(seed + 3);
    ModelConfig cfg = detail::grad_check_config(16, 2);
    auto params = ModelParams<double>::init(cfg, rng);
    const LayoutDocument doc = detail::grad_check_doc(seed + 200);
    const std::vector<int32_t> prefix{2, 3};
    const std::vector<int32_t> dec_in{kPadId, 4, 5};
    const std::vector<int32_t> targets{4, 5, kEosId};
    auto fn = [&](Tape<double>& t) {
      auto enc = encode(t, doc, prefix, params);
      auto logits = decoder_forward(t, enc.states, dec_in, params, false, nullptr);
      return cross_entropy(t, logits, targets, true);
    };
    std::vector<TensorPtr<double>> all;
    for (const auto& [name, tns] : params.named()) all.push_back(tns);
    report("full_model", grad_check<double>(fn, all, h));
  }
  return all_pass ? 0 : 1;
}

inline int cli_dispatch(const std::vector<std::string>& argv, std::ostream& out,
                        std::ostream& err) {
  if (argv.empty()) {
    err << cli_usage();
    return 2;
  }
  const std::string& sub = argv[0];
  const std::vector<std::string> rest(argv.begin() + 1, argv.end());
  try {
    if (sub == "gen-data") return cmd_gen_data(rest, out);
    if (sub == "train") return cmd_train(rest, out);
    if (sub == "infer") return cmd_infer(rest, out);
    if (sub == "eval") return cmd_eval(rest, out);
    if (sub == "chunk-plan") return cmd_chunk_plan(rest, out);
    if (sub == "budget") return cmd_budget(rest, out);
    if (sub == "grad-check") return cmd_grad_check(rest, out);
    err << "unknown subcommand '" << sub << "'\n" << cli_usage();
    return 2;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n" << cli_usage();
    return 2;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return 5;
  }
}

inline int cli_main(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return cli_dispatch(args, std::cout, std::cerr);
}

}  // namespace docfuse
