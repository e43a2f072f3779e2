#include <gtest/gtest.h>

#include <sstream>

#include "hsd/annotation.hpp"
#include "hsd/csv.hpp"
#include "hsd/weights.hpp"
#include "support.hpp"

using namespace hsd;
using testing_support::cli;
using testing_support::read_file;
using testing_support::run;
using testing_support::source_path;
using testing_support::TempDir;
using testing_support::write_file;

namespace {

std::string q(const std::filesystem::path& p) { return "'" + p.string() + "'"; }

void write_csv_rows(const std::filesystem::path& p, const std::vector<std::vector<std::string>>& rows) {
  std::ostringstream os;
  for (const auto& r : rows) csv::write_row(os, r);
  write_file(p, os.str());
}

nlohmann::json read_json(const std::filesystem::path& p) { return nlohmann::json::parse(read_file(p)); }

// A toy run config living in `dir`, pointing at the bundled toy data.
std::filesystem::path toy_config(const TempDir& dir, const std::string& name, nlohmann::json extra = nlohmann::json::object()) {
  nlohmann::json j{{"name", name},
                   {"dataset", {{"path", source_path("data/toy/toy_corpus.csv")}, {"name", "toy"}}},
                   {"language", "english"},
                   {"vocab", source_path("data/toy/vocab.txt")},
                   {"embedder", "transformer-tiny"},
                   {"classifier", {{"head", "cnn"}, {"epochs", 1}, {"batch_size", 4}, {"max_len", 100}}}};
  j.merge_patch(extra);
  const auto path = dir / (name + ".json");
  write_file(path, j.dump(2));
  return path;
}

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run(cli() + " 2>/dev/null").code, 1);
  EXPECT_EQ(run(cli() + " frobnicate 2>/dev/null").code, 1);
  EXPECT_EQ(run(cli() + " preprocess --input x.csv 2>/dev/null").code, 1);
  EXPECT_EQ(run(cli() + " train 2>/dev/null").code, 1);
  EXPECT_EQ(run(cli() + " --help").code, 0);
}

TEST(Cli, PreprocessGoldenRows) {
  TempDir tmp;
  const std::string english =
      "@amitshah You can't change the minds of such small minded people who are stuck in the past, they just "
      "don't understand logics.#IndiaAgainstCAA \U0001F92C";
  const std::string hinglish =
      "@narendramodi मेरा देश BHAI hate ni pyar phailata ha or jo pyar se nhi manta wo use ache se samjhate hain!! "
      "\U0001F914 https://twitter.com/4948747235330";
  write_csv_rows(tmp / "en.csv", {{"id", "text", "label"}, {"1", english, "hate"}});
  write_csv_rows(tmp / "hi.csv", {{"id", "text", "label"}, {"1", hinglish, "not_hate"}});

  auto r = run(cli() + " preprocess --input " + q(tmp / "en.csv") + " --language english --output " +
               q(tmp / "en.out.csv"));
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("rows: 1\n"), std::string::npos);
  auto table = csv::read((tmp / "en.out.csv").string());
  ASSERT_EQ(table.rows.size(), 1u);
  EXPECT_EQ(table.rows[0].fields[static_cast<std::size_t>(table.column("processed_text"))],
            "you cannot change mind small minded people stuck past understand logic facewithsymbolsonmouth");
  EXPECT_EQ(table.rows[0].fields[static_cast<std::size_t>(table.column("text"))], english);

  r = run(cli() + " preprocess --input " + q(tmp / "hi.csv") + " --language hinglish --output " +
          q(tmp / "hi.out.csv"));
  ASSERT_EQ(r.code, 0);
  table = csv::read((tmp / "hi.out.csv").string());
  EXPECT_EQ(table.rows[0].fields[static_cast<std::size_t>(table.column("processed_text"))],
            "meraa desh hate ni pyar phailata pyar nhi manta ache samjhate hain");
}

TEST(Cli, PreprocessEdgeCases) {
  TempDir tmp;
  write_file(tmp / "empty.csv", "id,text\n");
  auto r = run(cli() + " preprocess --input " + q(tmp / "empty.csv") + " --language english --output " +
               q(tmp / "o.csv"));
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("rows: 0\n"), std::string::npos);
  EXPECT_EQ(run(cli() + " preprocess --input " + q(tmp / "empty.csv") + " --language hindi --output " +
                q(tmp / "o.csv") + " 2>/dev/null")
                .code,
            1);
  write_file(tmp / "notext.csv", "id,body\n1,x\n");
  EXPECT_EQ(run(cli() + " preprocess --input " + q(tmp / "notext.csv") + " --language english --output " +
                q(tmp / "o.csv") + " 2>/dev/null")
                .code,
            1);
}

TEST(Cli, HotLearningRatePresetRecorded) {
  TempDir tmp;
  const auto cfg = toy_config(tmp, "hot-run", {{"lr_preset", "hot"}});
  const auto r = run(cli() + " --out-dir " + q(tmp / "runs") + " --config " + q(cfg) + " train");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto m = read_json(tmp / "runs" / "hot-run" / "manifest.json");
  EXPECT_EQ(m["config"]["lr_preset"], "hot");
  EXPECT_DOUBLE_EQ(m["config"]["classifier"]["learning_rate"].get<double>(), 1e-4);
  EXPECT_EQ(m["command"], "train");
  EXPECT_TRUE(std::filesystem::exists(tmp / "runs" / "hot-run" / "model" / "model.json"));
}

TEST(Cli, RepeatedRunsProduceIdenticalManifests) {
  TempDir tmp;
  const auto cfg = toy_config(tmp, "repeat", {{"classifier", {{"epochs", 2}}}});
  const std::string cmd = cli() + " --seed 7 --out-dir " + q(tmp / "runs") + " --config " + q(cfg) + " train";
  ASSERT_EQ(run(cmd).code, 0);
  auto first = read_json(tmp / "runs" / "repeat" / "manifest.json");
  ASSERT_EQ(run(cmd).code, 0);
  auto second = read_json(tmp / "runs" / "repeat" / "manifest.json");
  for (auto* m : {&first, &second}) {
    EXPECT_FALSE((*m)["started_at"].get<std::string>().empty());
    EXPECT_FALSE((*m)["finished_at"].get<std::string>().empty());
    m->erase("started_at");
    m->erase("finished_at");
  }
  EXPECT_EQ(first, second);
  EXPECT_EQ(first["config"]["seed"], 7);
  EXPECT_FALSE(first["outputs"]["model_files"].empty());
}

TEST(Cli, EvaluatePredictionsFile) {
  TempDir tmp;
  std::string body = "gold,pred\n";
  for (const char* row : {"hate,hate", "hate,hate", "hate,hate", "hate,not_hate", "not_hate,hate"}) body += row + std::string("\n");
  for (int i = 0; i < 5; ++i) body += "not_hate,not_hate\n";
  write_file(tmp / "preds.csv", body);
  const auto r = run(cli() + " --out-dir " + q(tmp / "out") + " evaluate --predictions " + q(tmp / "preds.csv"));
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("| 0.80     | 0.80   | 0.80 |"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("accuracy: 0.80"), std::string::npos);
  const auto report = read_json(tmp / "out" / "evaluate" / "report.json");
  EXPECT_DOUBLE_EQ(report["accuracy"].get<double>(), 0.8);
  EXPECT_TRUE(std::filesystem::exists(tmp / "out" / "evaluate" / "manifest.json"));

  write_file(tmp / "none.csv", "gold,pred\n");
  EXPECT_EQ(run(cli() + " --out-dir " + q(tmp / "out") + " evaluate --predictions " + q(tmp / "none.csv") +
                " 2>/dev/null")
                .code,
            2);
  EXPECT_EQ(run(cli() + " evaluate 2>/dev/null").code, 1);
}

TEST(Cli, EvaluateModelOnTestSets) {
  TempDir tmp;
  const auto cfg = toy_config(tmp, "eval-run");
  ASSERT_EQ(run(cli() + " --out-dir " + q(tmp / "runs") + " --config " + q(cfg) + " train").code, 0);
  const auto model = tmp / "runs" / "eval-run" / "model";
  const std::string base = cli() + " --out-dir " + q(tmp / "out") + " evaluate --model " + q(model) + " --test ";

  auto r = run(base + q(tmp / "runs" / "eval-run" / "test.csv"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("transformer-tiny + cnn"), std::string::npos);

  write_file(tmp / "empty.csv", "id,text,label\n");
  r = run(base + q(tmp / "empty.csv") + " 2>&1");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("empty"), std::string::npos);

  write_file(tmp / "unlabeled.csv", "id,text,label\nu1,scum beach,\nu2,quiet garden,hate\nu3,coffee,\n");
  r = run(base + q(tmp / "unlabeled.csv") + " 2>&1");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("u1"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("u3"), std::string::npos);
  EXPECT_EQ(r.out.find("u2"), std::string::npos);
}

TEST(Cli, MissingPretrainedWeightsExitTwo) {
  TempDir tmp;
  std::filesystem::create_directories(tmp / "weights");
  const auto cfg = toy_config(tmp, "bert", {{"embedder", "bert-bu"}});
  const auto r = run("HSD_WEIGHTS_DIR=" + q(tmp / "weights") + " " + cli() + " --out-dir " + q(tmp / "runs") +
                     " --config " + q(cfg) + " train 2>&1");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find(weights::kLayoutHelp), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("bert-base-uncased"), std::string::npos);
}

TEST(Cli, BadConfigsExitOne) {
  TempDir tmp;
  write_file(tmp / "bad.json", "{not json");
  EXPECT_EQ(run(cli() + " --config " + q(tmp / "bad.json") + " train 2>/dev/null").code, 1);
  const auto cfg = toy_config(tmp, "neg", {{"classifier", {{"learning_rate", -1}}}});
  EXPECT_EQ(run(cli() + " --config " + q(cfg) + " train 2>/dev/null").code, 1);
  const auto unknown = toy_config(tmp, "preset", {{"preset", "nope"}});
  EXPECT_EQ(run(cli() + " --config " + q(unknown) + " train 2>/dev/null").code, 1);
}

TEST(Cli, CompareTableWithFailedRow) {
  TempDir tmp;
  write_file(tmp / "broken.json", R"({"name": "broken", "dataset": {"path": "nowhere.csv"}})");
  const auto r = run(cli() + " --out-dir " + q(tmp / "runs") + " compare " + q(source_path("configs/toy-cnn.json")) +
                     " " + q(tmp / "broken.json") + " 2>/dev/null");
  EXPECT_EQ(r.code, 3);
  EXPECT_EQ(r.out, read_file(source_path("tests/fixtures/compare.md")));
}

TEST(Cli, ExportFlair) {
  TempDir tmp;
  const auto r = run(cli() + " export-flair --input " + q(source_path("data/toy/toy_corpus.csv")) +
                     " --language english --output " + q(tmp / "all.txt"));
  ASSERT_EQ(r.code, 0);
  const auto text = read_file(tmp / "all.txt");
  EXPECT_EQ(text.rfind("__label__", 0), 0u);
  const auto lines = static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
  EXPECT_NE(r.out.find("lines: " + std::to_string(lines)), std::string::npos);

  ASSERT_EQ(run(cli() + " --out-dir " + q(tmp / "split") + " export-flair --split --input " +
                q(source_path("data/toy/toy_corpus.csv")))
                .code,
            0);
  for (const char* f : {"train.txt", "dev.txt", "test.txt"}) EXPECT_TRUE(std::filesystem::exists(tmp / "split" / f));
}

TEST(Cli, ServeRejectsBadAddresses) {
  TempDir tmp;
  write_file(tmp / "c.csv", "id,text\n1,hello\n");
  const std::string base = cli() + " serve --project " + q(tmp / "p.jsonl") + " --init " + q(tmp / "c.csv");
  EXPECT_EQ(run(base + " --listen nonsense 2>/dev/null").code, 1);
  EXPECT_EQ(run(base + " --listen 127.0.0.1:99999 2>/dev/null").code, 1);
  EXPECT_EQ(run(cli() + " serve --project " + q(tmp / "absent.jsonl") + " 2>/dev/null").code, 2);

  // occupy a port, then ask the CLI for it
  annotation::Store::create(tmp / "held.jsonl", Dataset("d", {}));
  annotation::Store store(tmp / "held.jsonl");
  annotation::Server holder(store);
  const int port = holder.bind("127.0.0.1", 0);
  const auto r = run(base + " --listen 127.0.0.1:" + std::to_string(port) + " 2>&1");
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.out.find("cannot listen"), std::string::npos) << r.out;
}
