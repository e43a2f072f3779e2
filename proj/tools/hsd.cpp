// hsd: preprocess, train, evaluate, compare, export-flair, serve.
//
// Exit codes: 0 ok, 1 usage/config, 2 data, 3 runtime.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "hsd/annotation.hpp"
#include "hsd/corpus.hpp"
#include "hsd/csv.hpp"
#include "hsd/metrics.hpp"
#include "hsd/models.hpp"
#include "hsd/preprocess.hpp"
#include "hsd/workflow.hpp"

namespace fs = std::filesystem;
using namespace hsd;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kRuntime = 3 };

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out_dir = "runs";
};

Language language_flag(const std::string& s) {
  const auto l = parse_language(s);
  if (!l || (*l != Language::english && *l != Language::hinglish))
    throw CLI::ValidationError("--language", "expected english or hinglish, got '" + s + "'");
  return *l;
}

int cmd_preprocess(const std::string& input, const std::string& language, const std::string& output) {
  const auto lang = language_flag(language);
  const auto loaded = load_csv(input);
  preprocess::DatasetSummary summary;
  const auto data = preprocess::apply(preprocess::Pipeline::for_language(lang), loaded.dataset, &summary);
  std::ofstream out(output, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + output);
  csv::write_row(out, {"id", "platform", "text", "language", "label", "processed_text"});
  for (const auto& c : data)
    csv::write_row(out, {c.id, std::string(to_string(c.platform)), c.raw_text, std::string(to_string(c.language)),
                         c.gold_label ? std::string(to_string(*c.gold_label)) : std::string(),
                         c.processed_text.value_or("")});
  std::cout << "rows: " << summary.rows << "\nemptied: " << summary.emptied
            << "\nskipped_empty: " << loaded.skipped_empty << "\nrow_errors: " << loaded.errors.size() << '\n';
  for (const auto& e : loaded.errors) std::cerr << input << ":" << e.line << ": " << e.message << '\n';
  if (summary.diagnostics.unknown_emoji || summary.diagnostics.unmapped_devanagari)
    std::cout << "unknown_emoji: " << summary.diagnostics.unknown_emoji
              << "\nunmapped_devanagari: " << summary.diagnostics.unmapped_devanagari << '\n';
  return kOk;
}

void print_report_row(const std::string& dataset, const std::string& model, const metrics::EvalReport& r) {
  std::cout << metrics::render_table({{dataset, model, r}}) << '\n' << metrics::render_confusion(r.matrix);
}

int cmd_train(const Globals& g) {
  if (g.config.empty()) throw CLI::ValidationError("--config", "train needs --config <file>");
  const auto cfg = workflow::load_run_config(g.config, g.seed);
  const fs::path out = fs::path(g.out_dir) / cfg.name;
  const auto result = workflow::run_train(cfg, out, "train", [](std::size_t e, const EpochStats& s) {
    std::cout << "epoch " << e + 1 << ": train_loss " << s.train_loss << " dev_accuracy "
              << metrics::fixed2(s.dev_accuracy) << std::endl;
  });
  std::cout << result.load_summary << '\n';
  std::cout << "model: " << result.model_dir.string() << "\nmanifest: " << result.manifest_path.string()
            << "\n\ndev report\n";
  print_report_row(cfg.dataset_name, cfg.name, result.dev_report);
  return kOk;
}

int cmd_evaluate(const Globals& g, const std::string& model_dir, const std::string& test_csv,
                 const std::string& predictions) {
  metrics::EvalReport report;
  std::string dataset, model_name;
  workflow::RunManifest manifest;
  manifest.command = "evaluate";
  manifest.started_at = workflow::now_iso8601();
  if (!predictions.empty()) {
    report = workflow::evaluate_predictions_file(predictions);
    dataset = fs::path(predictions).stem().string();
    model_name = "predictions";
    manifest.inputs["predictions"] = {{"path", predictions}, {"hash", workflow::hash_file(predictions)}};
  } else {
    if (model_dir.empty() || test_csv.empty())
      throw CLI::ValidationError("evaluate", "needs --model and --test, or --predictions");
    const auto model = load_model(model_dir);
    const auto data = workflow::load_eval_set(model, test_csv);
    report = workflow::evaluate_model(model, data);
    dataset = fs::path(test_csv).stem().string();
    model_name = model.embedder_spec.display_name() + " + " + to_string(model.config.head);
    manifest.config = {{"model", model_dir}, {"classifier", model.config.to_json()},
                       {"embedder", model.embedder_spec.to_json()},
                       {"language", std::string(to_string(model.language))}};
    manifest.inputs["model_files"] = workflow::hash_tree(model_dir);
    manifest.inputs["test"] = {{"path", test_csv}, {"hash", workflow::hash_file(test_csv)}};
  }
  print_report_row(dataset, model_name, report);
  std::cout << '\n' << metrics::render_text(report);
  const fs::path out = fs::path(g.out_dir) / "evaluate";
  fs::create_directories(out);
  std::ofstream(out / "report.json", std::ios::trunc) << metrics::to_json(report).dump(2) << '\n';
  manifest.outputs = {{"report", (out / "report.json").string()}};
  manifest.results = metrics::to_json(report);
  manifest.finished_at = workflow::now_iso8601();
  manifest.write(out / "manifest.json");
  return kOk;
}

int cmd_compare(const Globals& g, const std::vector<std::string>& configs) {
  std::vector<metrics::TableRow> rows;
  int status = kOk;
  for (const auto& path : configs) {
    metrics::TableRow row{fs::path(path).stem().string(), fs::path(path).stem().string(), std::nullopt};
    try {
      const auto cfg = workflow::load_run_config(path, g.seed);
      row.dataset = cfg.dataset_name;
      row.model = cfg.name;
      const auto result = workflow::run_train(cfg, fs::path(g.out_dir) / cfg.name, "compare");
      row.report = result.splits.test.empty() ? result.dev_report
                                              : workflow::evaluate_model(result.model, result.splits.test);
    } catch (const std::exception& e) {
      std::cerr << path << ": FAILED: " << e.what() << '\n';
      status = kRuntime;
    }
    rows.push_back(std::move(row));
  }
  std::cout << metrics::render_table(rows);
  return status;
}

int cmd_export_flair(const Globals& g, const std::string& input, const std::string& language,
                     const std::string& output, bool do_split) {
  Dataset data = load_csv(input).dataset;
  if (!language.empty()) data = preprocess::apply(preprocess::Pipeline::for_language(language_flag(language)), data);
  auto text_of = [](const Dataset& d) {
    std::vector<Comment> rows;
    for (auto c : d) {
      if (!c.processed_text) c.processed_text = c.raw_text;
      rows.push_back(std::move(c));
    }
    return Dataset(d.name(), std::move(rows));
  };
  if (do_split) {
    SplitSpec spec;
    spec.seed = g.seed.value_or(0);
    const auto s = split(data, spec);
    const fs::path dir = g.out_dir;
    fs::create_directories(dir);
    std::size_t n = 0;
    n += export_flair(text_of(s.train), (dir / "train.txt").string());
    n += export_flair(text_of(s.dev), (dir / "dev.txt").string());
    n += export_flair(text_of(s.test), (dir / "test.txt").string());
    std::cout << "lines: " << n << " (" << dir.string() << "/{train,dev,test}.txt)\n";
  } else {
    if (output.empty()) throw CLI::ValidationError("--output", "export-flair needs --output or --split");
    std::cout << "lines: " << export_flair(text_of(data), output) << '\n';
  }
  return kOk;
}

annotation::Server* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

int cmd_serve(const std::string& project, const std::string& init_csv, const std::string& annotators_csv,
              const std::string& listen, const std::string& static_dir, int lease_seconds) {
  const auto colon = listen.rfind(':');
  int port = -1;
  if (colon != std::string::npos && colon > 0) {
    try {
      std::size_t used = 0;
      port = std::stoi(listen.substr(colon + 1), &used);
      if (used != listen.size() - colon - 1) port = -1;
    } catch (const std::exception&) {
      port = -1;
    }
  }
  if (port < 0 || port > 65535)
    throw CLI::ValidationError("--listen", "expected host:port, got '" + listen + "'");
  const std::string host = listen.substr(0, colon);

  std::vector<std::string> annotators;
  std::stringstream ss(annotators_csv);
  for (std::string a; std::getline(ss, a, ',');)
    if (!text::trim(a).empty()) annotators.push_back(text::trim(a));
  if (!init_csv.empty()) {
    const auto loaded = load_csv(init_csv);
    annotation::Store::create(project, loaded.dataset, annotators);
    std::cout << "created " << project << " with " << loaded.dataset.size() << " pending tasks" << std::endl;
  } else if (!fs::exists(project)) {
    throw DataError("project file not found: " + project + " (use --init <comments.csv> to create one)");
  }
  annotation::Store store(project, std::chrono::system_clock::now, std::chrono::seconds(lease_seconds));
  for (const auto& a : annotators) store.register_annotator(a);
  if (store.torn_lines()) std::cerr << "dropped a torn trailing record from " << project << '\n';
  annotation::Server server(store, static_dir);
  const int bound = server.bind(host, port);
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cout << "listening on http://" << host << ":" << bound << std::endl;
  server.run();
  g_server = nullptr;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hate speech detection toolkit for English and Hinglish text"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value, "Run seed (overrides the config)");
  app.add_option("--config", g.config, "Run config file (JSON)");
  app.add_option("--out-dir", g.out_dir, "Output directory")->capture_default_str();

  std::string input, output, language;
  auto* pre = app.add_subcommand("preprocess", "Apply a preprocessing pipeline to a CSV");
  pre->add_option("--input", input, "Input CSV")->required();
  pre->add_option("--language", language, "english or hinglish")->required();
  pre->add_option("--output", output, "Output CSV")->required();

  auto* tr = app.add_subcommand("train", "Train a classifier from a run config");

  std::string model_dir, test_csv, predictions;
  auto* ev = app.add_subcommand("evaluate", "Evaluate a model on a labeled CSV");
  ev->add_option("--model", model_dir, "Model directory");
  ev->add_option("--test", test_csv, "Labeled test CSV");
  ev->add_option("--predictions", predictions, "Offline mode: CSV with gold,pred columns");

  std::vector<std::string> configs;
  auto* cmp = app.add_subcommand("compare", "Train and evaluate several configs into one table");
  cmp->add_option("configs", configs, "Run config files")->required();

  bool do_split = false;
  std::string flair_input, flair_output, flair_language;
  auto* fl = app.add_subcommand("export-flair", "Write __label__ lines for FLAIR");
  fl->add_option("--input", flair_input, "Input CSV")->required();
  fl->add_option("--output", flair_output, "Output text file");
  fl->add_option("--language", flair_language, "Preprocess first with this pipeline");
  fl->add_flag("--split", do_split, "Write train/dev/test files into --out-dir");

  std::string project, init_csv, annotators, listen = "127.0.0.1:8080", static_dir = "web";
  int lease = 300;
  auto* sv = app.add_subcommand("serve", "Run the annotation service");
  sv->add_option("--project", project, "Project file")->required();
  sv->add_option("--init", init_csv, "Create the project from this CSV");
  sv->add_option("--annotators", annotators, "Comma-separated annotator ids to register");
  sv->add_option("--listen", listen, "host:port (port 0 picks a free port)")->capture_default_str();
  sv->add_option("--static", static_dir, "Directory served at /")->capture_default_str();
  sv->add_option("--lease", lease, "Seconds a served task stays reserved")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  if (seed_opt->count()) g.seed = seed_value;

  try {
    if (*pre) return cmd_preprocess(input, language, output);
    if (*tr) return cmd_train(g);
    if (*ev) return cmd_evaluate(g, model_dir, test_csv, predictions);
    if (*cmp) return cmd_compare(g, configs);
    if (*fl) return cmd_export_flair(g, flair_input, flair_language, flair_output, do_split);
    if (*sv) return cmd_serve(project, init_csv, annotators, listen, static_dir, lease);
  } catch (const CLI::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  } catch (const NotFoundError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}
