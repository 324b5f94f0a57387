#include "docfuse/cli.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

using namespace docfuse;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = 0;
  std::string out, err;
};

CliResult run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  CliResult res;
  res.code = cli_dispatch(args, out, err);
  res.out = out.str();
  res.err = err.str();
  return res;
}

std::string fresh_dir(const std::string& stem) {
  const std::string dir = "/tmp/docfuse_cli_" + stem;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_file(const std::string& path, const std::string& body) {
  detail::write_text_file(path, body);
}

std::map<std::string, std::string> dir_snapshot(const std::string& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file())
      out[fs::relative(e.path(), dir).string()] = detail::read_text_file(e.path());
  return out;
}

const char* kTinySpec =
    "num_docs = 12\n"
    "pages_lo = 1\npages_hi = 1\n"
    "keys_lo = 1\nkeys_hi = 1\n"
    "vocab_size = 32\n"
    "visual_marker_fraction = 0.25\n"
    "seed = 9\n";

const char* kTinyTrain =
    "total_steps = 20\nbatch_size = 2\n"
    "peak_lr = 3e-3\nmid_lr = 3e-3\nfinal_lr = 3e-3\n"
    "warmup_frac = 0.05\nlinear_frac = 0.0\n"
    "seed = 11\ninit_seed = 3\n"
    "d = 16\nnum_heads = 2\nnum_layers_enc = 1\nnum_layers_dec = 1\n"
    "d_ff = 32\nvocab_size = 32\nc = 32\nd_vis = 2\ndropout = 0.0\n";

// Generates a corpus and trains a throwaway checkpoint once; tests share it.
const std::string& shared_run_dir() {
  static const std::string dir = [] {
    const std::string root = fresh_dir("shared");
    write_file(root + "/spec.cfg", kTinySpec);
    write_file(root + "/train.cfg", kTinyTrain);
    auto gen = run_cli({"gen-data", "--spec", root + "/spec.cfg", "--out", root + "/corpus"});
    EXPECT_EQ(gen.code, 0) << gen.err;
    auto tr = run_cli({"train", "--config", root + "/train.cfg", "--data", root + "/corpus",
                       "--out", root + "/run"});
    EXPECT_EQ(tr.code, 0) << tr.err;
    return root;
  }();
  return dir;
}

TEST(Usage, NoArgsPrintsUsage) {
  const auto res = run_cli({});
  EXPECT_EQ(res.code, 2);
  EXPECT_NE(res.err.find("usage:"), std::string::npos);
}

TEST(Usage, UnknownSubcommandAndFlag) {
  EXPECT_EQ(run_cli({"frobnicate"}).code, 2);
  EXPECT_EQ(run_cli({"chunk-plan", "--bogus", "1"}).code, 2);
  EXPECT_EQ(run_cli({"chunk-plan", "--input-len"}).code, 2);
}

TEST(Usage, MissingRequiredFlag) {
  const auto res = run_cli({"gen-data", "--spec", "/nonexistent"});
  EXPECT_EQ(res.code, 2);
  EXPECT_NE(res.err.find("--out"), std::string::npos);
}

TEST(ChunkPlan, EmitsLineDelimitedSpans) {
  const auto res = run_cli({"chunk-plan", "--input-len", "20", "--core", "8", "--overlap",
                            "1", "--prefix", "2"});
  EXPECT_EQ(res.code, 0) << res.err;
  EXPECT_EQ(res.out, "0 6\n5 11\n10 16\n15 20\n");
}

TEST(ChunkPlan, RejectsInvalidGeometry) {
  const auto res = run_cli({"chunk-plan", "--input-len", "20", "--core", "4", "--prefix", "4"});
  EXPECT_EQ(res.code, 4);
}

TEST(GenData, WritesCorpusDeterministically) {
  const std::string root = fresh_dir("gendata");
  write_file(root + "/spec.cfg", kTinySpec);
  const auto r1 =
      run_cli({"gen-data", "--spec", root + "/spec.cfg", "--out", root + "/a"});
  EXPECT_EQ(r1.code, 0) << r1.err;
  EXPECT_NE(r1.out.find("12 documents"), std::string::npos);
  EXPECT_TRUE(fs::exists(root + "/a/manifest.json"));
  EXPECT_TRUE(fs::exists(root + "/a/qa.jsonl"));
  const auto r2 =
      run_cli({"gen-data", "--spec", root + "/spec.cfg", "--out", root + "/b"});
  EXPECT_EQ(r2.code, 0) << r2.err;
  EXPECT_EQ(dir_snapshot(root + "/a"), dir_snapshot(root + "/b"));
}

TEST(GenData, UnknownSpecKeyRejected) {
  const std::string root = fresh_dir("genbad");
  write_file(root + "/spec.cfg", "num_docs = 3\nnum_pages = 2\n");
  const auto res = run_cli({"gen-data", "--spec", root + "/spec.cfg", "--out", root + "/c"});
  EXPECT_EQ(res.code, 4);
  EXPECT_NE(res.err.find("num_pages"), std::string::npos);
}

TEST(GenData, MissingSpecFileIsIoError) {
  EXPECT_EQ(run_cli({"gen-data", "--spec", "/no/such/spec.cfg", "--out", "/tmp/x"}).code, 3);
}

TEST(Train, ProducesCheckpointAndMetrics) {
  const std::string& root = shared_run_dir();
  EXPECT_TRUE(fs::exists(root + "/run/checkpoint.bin"));
  const std::string log = detail::read_text_file(root + "/run/metrics.jsonl");
  std::istringstream ss(log);
  std::string line;
  int64_t lines = 0;
  while (std::getline(ss, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("step").get<int64_t>(), lines);
    EXPECT_TRUE(j.contains("loss"));
    EXPECT_TRUE(j.contains("lr"));
    ++lines;
  }
  EXPECT_EQ(lines, 20);
  const auto ck = load_checkpoint<double>(root + "/run/checkpoint.bin");
  EXPECT_EQ(ck.steps_done, 20);
  EXPECT_EQ(ck.params.cfg.d, 16);
}

TEST(Train, MismatchedGridDepthRejected) {
  const std::string& shared = shared_run_dir();
  const std::string root = fresh_dir("trainbad");
  write_file(root + "/train.cfg", std::string(kTinyTrain) + "d_vis = 3\n");
  const auto res = run_cli({"train", "--config", root + "/train.cfg", "--data",
                            shared + "/corpus", "--out", root + "/run"});
  EXPECT_EQ(res.code, 4);
  EXPECT_NE(res.err.find("d_vis"), std::string::npos);
}

TEST(Infer, MissingCheckpointIsFileNotFound) {
  const auto res = run_cli({"infer", "--checkpoint", "/no/such/ck.bin", "--doc", "/tmp/d",
                            "--question", "2 4"});
  EXPECT_EQ(res.code, 3);
}

TEST(Infer, EmitsRecordWithMinAggregatedConfidence) {
  const std::string& root = shared_run_dir();
  const Corpus corpus = load_corpus(root + "/corpus");
  const auto& qa = corpus.qa.front();
  const std::string doc_path = root + "/corpus/" + corpus.doc_files[qa.doc_index];
  std::string question;
  for (size_t i = 0; i < qa.question.size(); ++i)
    question += (i ? " " : "") + std::to_string(qa.question[i]);
  std::string gold;
  for (size_t i = 0; i < qa.answer.size(); ++i)
    gold += (i ? " " : "") + std::to_string(qa.answer[i]);

  const std::string pred_path = root + "/preds.jsonl";
  const auto res = run_cli({"infer", "--checkpoint", root + "/run/checkpoint.bin", "--doc",
                            doc_path, "--question", question, "--gold", gold,
                            "--evidence-page", "0", "--append", pred_path});
  ASSERT_EQ(res.code, 0) << res.err;
  const auto j = nlohmann::json::parse(res.out);
  const auto scores = j.at("scores").get<std::vector<double>>();
  ASSERT_FALSE(scores.empty());
  EXPECT_DOUBLE_EQ(j.at("confidence").get<double>(),
                   *std::min_element(scores.begin(), scores.end()));
  EXPECT_TRUE(j.contains("correct"));
  EXPECT_EQ(j.at("evidence_page").get<int64_t>(), 0);
  EXPECT_EQ(detail::read_text_file(pred_path), res.out);
}

TEST(Infer, QuestionAcceptsTokenTexts) {
  const std::string& root = shared_run_dir();
  const Corpus corpus = load_corpus(root + "/corpus");
  const auto& qa = corpus.qa.front();
  const auto& doc = corpus.docs[qa.doc_index];
  std::string key_text;
  for (const auto& t : doc.tokens)
    if (t.id == qa.question.back()) key_text = t.text;
  ASSERT_FALSE(key_text.empty());
  const std::string doc_path = root + "/corpus/" + corpus.doc_files[qa.doc_index];
  const auto res = run_cli({"infer", "--checkpoint", root + "/run/checkpoint.bin", "--doc",
                            doc_path, "--question", "? " + key_text});
  EXPECT_EQ(res.code, 0) << res.err;
  const auto by_ids = run_cli({"infer", "--checkpoint", root + "/run/checkpoint.bin",
                               "--doc", doc_path, "--question",
                               "2 " + std::to_string(qa.question.back())});
  EXPECT_EQ(res.out, by_ids.out);
}

TEST(Infer, UnknownQuestionTokenRejected) {
  const std::string& root = shared_run_dir();
  const Corpus corpus = load_corpus(root + "/corpus");
  const std::string doc_path = root + "/corpus/" + corpus.doc_files[0];
  const auto res = run_cli({"infer", "--checkpoint", root + "/run/checkpoint.bin", "--doc",
                            doc_path, "--question", "zebra"});
  EXPECT_EQ(res.code, 4);
}

TEST(Eval, MetricsMatchLibraryValues) {
  const std::string root = fresh_dir("eval");
  std::vector<PredictionRecord> records;
  std::string lines;
  const double confs[] = {0.95, 0.8, 0.55, 0.4, 0.91, 0.15};
  const bool correct[] = {true, true, false, true, false, false};
  for (int i = 0; i < 6; ++i) {
    PredictionRecord r;
    r.confidence = confs[i];
    r.correct = correct[i];
    r.evidence_page = i % 3;
    records.push_back(r);
    lines += nlohmann::json{{"confidence", confs[i]},
                            {"correct", correct[i]},
                            {"evidence_page", i % 3}}
                 .dump() +
             "\n";
  }
  write_file(root + "/preds.jsonl", lines);
  const auto res = run_cli({"eval", "--pred", root + "/preds.jsonl", "--out", root});
  ASSERT_EQ(res.code, 0) << res.err;

  auto printed = [&](const std::string& key) {
    const auto at = res.out.find(key + " ");
    EXPECT_NE(at, std::string::npos) << key;
    return std::stod(res.out.substr(at + key.size() + 1));
  };
  EXPECT_NEAR(printed("exact_match"), 0.5, 1e-6);
  EXPECT_NEAR(printed("ece"), ece(records, 10), 1e-6);
  EXPECT_NEAR(printed("aurc"), risk_coverage(records).aurc, 1e-6);

  const std::string cal = detail::read_text_file(root + "/calibration.tsv");
  EXPECT_EQ(cal.substr(0, 4), "bin\t");
  const std::string rc = detail::read_text_file(root + "/risk_coverage.tsv");
  EXPECT_EQ(rc.substr(0, 9), "coverage\t");
  EXPECT_TRUE(fs::exists(root + "/evidence_buckets.tsv"));
  EXPECT_NE(res.out.find("bucket 0 "), std::string::npos);
}

TEST(Eval, RecordsWithoutCorrectnessRejected) {
  const std::string root = fresh_dir("evalbad");
  write_file(root + "/preds.jsonl", "{\"confidence\":0.5}\n");
  EXPECT_EQ(run_cli({"eval", "--pred", root + "/preds.jsonl", "--out", root}).code, 4);
}

const char* kMemCfg =
    "d = 64\nnum_layers_enc = 2\nnum_layers_dec = 2\nnum_heads = 4\n"
    "d_ff = 256\nvocab_size = 64\nc = 128\nl = 2\nout_len = 4\n"
    "budget_bytes = 268435456\n";

TEST(Budget, PrintsBreakdownAndMaxContext) {
  const std::string root = fresh_dir("budget");
  write_file(root + "/mem.cfg", kMemCfg);
  const auto res = run_cli({"budget", "--config", root + "/mem.cfg"});
  ASSERT_EQ(res.code, 0) << res.err;
  for (const char* key : {"weights ", "activations ", "attention ", "kv_cache ",
                          "gradients ", "optimizer ", "total ", "max_context "})
    EXPECT_NE(res.out.find(key), std::string::npos) << key;
  const auto at = res.out.find("max_context ");
  const int64_t base = std::stoll(res.out.substr(at + 12));
  EXPECT_GT(base, 0);

  const auto sparse =
      run_cli({"budget", "--config", root + "/mem.cfg", "--toggle", "sparsity"});
  ASSERT_EQ(sparse.code, 0) << sparse.err;
  const auto at2 = sparse.out.find("max_context ");
  EXPECT_GE(std::stoll(sparse.out.substr(at2 + 12)), base);
}

TEST(Budget, SweepEmitsBothLadders) {
  const std::string root = fresh_dir("sweep");
  write_file(root + "/mem.cfg", kMemCfg);
  const auto res = run_cli({"budget", "--config", root + "/mem.cfg", "--sweep"});
  ASSERT_EQ(res.code, 0) << res.err;
  EXPECT_NE(res.out.find("inference (none) "), std::string::npos);
  EXPECT_NE(res.out.find("inference +no_cross_kv_cache "), std::string::npos);
  EXPECT_NE(res.out.find("training +random_chunks "), std::string::npos);
  int64_t lines = 0;
  for (char ch : res.out) lines += ch == '\n' ? 1 : 0;
  EXPECT_EQ(lines, 1 + 5 + 7);
}

TEST(Budget, BadToggleAndModeAreUsageErrors) {
  const std::string root = fresh_dir("budgetbad");
  write_file(root + "/mem.cfg", kMemCfg);
  EXPECT_EQ(run_cli({"budget", "--config", root + "/mem.cfg", "--toggle", "warp"}).code, 2);
  EXPECT_EQ(run_cli({"budget", "--config", root + "/mem.cfg", "--mode", "dream"}).code, 2);
}

TEST(GradCheckCmd, AllComponentsPass) {
  const auto res = run_cli({"grad-check"});
  EXPECT_EQ(res.code, 0) << res.out;
  for (const char* name : {"fusion", "rms_norm", "attention_bias", "full_model"})
    EXPECT_NE(res.out.find(name), std::string::npos) << name;
  EXPECT_EQ(res.out.find("FAIL"), std::string::npos) << res.out;
}

TEST(Determinism, PipelineRerunsAreByteIdentical) {
  auto run_pipeline = [&](const std::string& root) {
    write_file(root + "/spec.cfg", kTinySpec);
    write_file(root + "/train.cfg", kTinyTrain);
    auto gen =
        run_cli({"gen-data", "--spec", root + "/spec.cfg", "--out", root + "/corpus"});
    ASSERT_EQ(gen.code, 0) << gen.err;
    auto tr = run_cli({"train", "--config", root + "/train.cfg", "--data",
                       root + "/corpus", "--out", root + "/run"});
    ASSERT_EQ(tr.code, 0) << tr.err;
    const Corpus corpus = load_corpus(root + "/corpus");
    for (int k = 0; k < 4; ++k) {
      const auto& qa = corpus.qa[k];
      std::string question, gold;
      for (size_t i = 0; i < qa.question.size(); ++i)
        question += (i ? " " : "") + std::to_string(qa.question[i]);
      for (size_t i = 0; i < qa.answer.size(); ++i)
        gold += (i ? " " : "") + std::to_string(qa.answer[i]);
      auto inf = run_cli({"infer", "--checkpoint", root + "/run/checkpoint.bin", "--doc",
                          root + "/corpus/" + corpus.doc_files[qa.doc_index], "--question",
                          question, "--gold", gold, "--evidence-page",
                          std::to_string(qa.evidence_page), "--append",
                          root + "/preds.jsonl"});
      ASSERT_EQ(inf.code, 0) << inf.err;
    }
    auto ev = run_cli({"eval", "--pred", root + "/preds.jsonl", "--out", root + "/eval"});
    ASSERT_EQ(ev.code, 0) << ev.err;
  };
  const std::string a = fresh_dir("pipe_a");
  const std::string b = fresh_dir("pipe_b");
  run_pipeline(a);
  run_pipeline(b);
  EXPECT_EQ(dir_snapshot(a + "/corpus"), dir_snapshot(b + "/corpus"));
  EXPECT_EQ(detail::read_text_file(a + "/run/checkpoint.bin"),
            detail::read_text_file(b + "/run/checkpoint.bin"));
  EXPECT_EQ(detail::read_text_file(a + "/run/metrics.jsonl"),
            detail::read_text_file(b + "/run/metrics.jsonl"));
  EXPECT_EQ(detail::read_text_file(a + "/preds.jsonl"),
            detail::read_text_file(b + "/preds.jsonl"));
  EXPECT_EQ(dir_snapshot(a + "/eval"), dir_snapshot(b + "/eval"));
}

}  // namespace
