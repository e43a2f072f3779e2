#pragma once

// Run configuration, named recipes, and the train/evaluate workflows shared
// by the command-line tool and the tests.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hsd/corpus.hpp"
#include "hsd/embeddings.hpp"
#include "hsd/error.hpp"
#include "hsd/metrics.hpp"
#include "hsd/models.hpp"
#include "hsd/preprocess.hpp"
#include "hsd/text.hpp"
#include "hsd/tokenizer.hpp"

namespace hsd::workflow {

namespace fs = std::filesystem;

inline constexpr double kLrHot = 1e-4;
inline constexpr double kLrCombined = 1e-3;

inline double lr_preset(const std::string& name) {
  if (name == "hot") return kLrHot;
  if (name == "combined") return kLrCombined;
  throw ConfigError("unknown lr_preset '" + name + "' (expected hot or combined)");
}

struct RunConfig {
  std::string name;
  std::string preset;
  std::string dataset_path;
  std::string dataset_name;
  ColumnMap columns;
  SplitSpec split;
  bool dedupe = false;
  Language language = Language::english;
  std::string vocab_path;
  EmbedderSpec embedder = EmbedderSpec::tiny_transformer();
  ClassifierConfig classifier;
  std::string lr_preset;
  std::uint64_t seed = 0;

  // Propagates the run seed to the split, the head and random embedders.
  void apply_seed(std::uint64_t s) {
    seed = s;
    split.seed = s;
    classifier.seed = s;
    std::function<void(EmbedderSpec&, std::uint64_t)> seed_spec = [&](EmbedderSpec& e, std::uint64_t v) {
      e.seed = v;
      for (std::size_t i = 0; i < e.components.size(); ++i) seed_spec(e.components[i], v + i + 1);
    };
    seed_spec(embedder, s);
  }

  nlohmann::json to_json() const {
    nlohmann::json label_map = nlohmann::json::object();
    for (const auto& [k, v] : columns.label_map) label_map[k] = std::string(hsd::to_string(v));
    return {{"name", name},
            {"preset", preset},
            {"dataset",
             {{"path", dataset_path},
              {"name", dataset_name},
              {"columns",
               {{"id", columns.id},
                {"platform", columns.platform},
                {"text", columns.text},
                {"language", columns.language},
                {"label", columns.label}}},
              {"label_map", label_map},
              {"split", {split.train_frac, split.dev_frac, split.test_frac}},
              {"dedupe", dedupe}}},
            {"language", std::string(hsd::to_string(language))},
            {"vocab", vocab_path},
            {"embedder", embedder.to_json()},
            {"classifier", classifier.to_json()},
            {"lr_preset", lr_preset},
            {"seed", seed}};
  }
};

// -- recipes ----------------------------------------------------------------

inline EmbedderSpec named_embedder(const std::string& name) {
  if (name == "transformer-tiny") return EmbedderSpec::tiny_transformer();
  if (name == "char-bilstm-tiny") return EmbedderSpec::tiny_char_bilstm();
  if (name == "stack-tiny") return EmbedderSpec::tiny_stack();
  if (name == "bert-bu") return EmbedderSpec::bert_base("bert-base-uncased", "BERT_BU");
  if (name == "bert-mu") return EmbedderSpec::bert_base("bert-base-multilingual-uncased", "BERT_MU");
  if (name == "elmo") return EmbedderSpec::elmo();
  if (name == "flair-hi-stack") return EmbedderSpec::flair_hi_stack();
  throw ConfigError("unknown embedder name '" + name +
                    "' (expected transformer-tiny, char-bilstm-tiny, stack-tiny, bert-bu, bert-mu, elmo, "
                    "flair-hi-stack)");
}

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"english-bertbu-cnn", "hinglish-bertmu-cnn", "hinglish-elmo-mlp",
                                              "flair-stacked-bilstm", "flair-bert-bilstm"};
  return names;
}

inline RunConfig preset(const std::string& name) {
  RunConfig c;
  c.name = name;
  c.preset = name;
  if (name == "english-bertbu-cnn") {
    c.language = Language::english;
    c.embedder = named_embedder("bert-bu");
    c.classifier.head = HeadKind::cnn;
    c.classifier.max_len = 100;
    c.classifier.learning_rate = 1e-3;
  } else if (name == "hinglish-bertmu-cnn") {
    c.language = Language::hinglish;
    c.embedder = named_embedder("bert-mu");
    c.classifier.head = HeadKind::cnn;
    c.classifier.max_len = 75;
    c.classifier.learning_rate = kLrHot;
    c.lr_preset = "hot";
  } else if (name == "hinglish-elmo-mlp") {
    c.language = Language::hinglish;
    c.embedder = named_embedder("elmo");
    c.classifier.head = HeadKind::mlp;
    c.classifier.max_len = 75;
    c.classifier.learning_rate = 1e-5;
  } else if (name == "flair-stacked-bilstm") {
    c.language = Language::hinglish;
    c.embedder = named_embedder("flair-hi-stack");
    c.classifier.head = HeadKind::bilstm;
    c.classifier.max_len = 75;
    c.classifier.learning_rate = 1e-5;
  } else if (name == "flair-bert-bilstm") {
    c.language = Language::hinglish;
    c.embedder = named_embedder("bert-bu");
    c.embedder.word_pooling = true;
    c.classifier.head = HeadKind::bilstm;
    c.classifier.max_len = 75;
    c.classifier.learning_rate = 1e-5;
  } else {
    std::string list;
    for (const auto& n : preset_names()) list += (list.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset '" + name + "' (expected one of: " + list + ")");
  }
  return c;
}

inline bool needs_vocab(const EmbedderSpec& s) {
  if (s.kind == EmbedderKind::transformer) return true;
  for (const auto& c : s.components)
    if (needs_vocab(c)) return true;
  return false;
}

namespace detail {

inline std::string resolve_path(const fs::path& base, const std::string& p) {
  if (p.empty()) return p;
  const fs::path path(p);
  return path.is_absolute() ? path.string() : (base / path).lexically_normal().string();
}

inline const EmbedderSpec* first_transformer(const EmbedderSpec& s) {
  if (s.kind == EmbedderKind::transformer) return &s;
  for (const auto& c : s.components)
    if (const auto* t = first_transformer(c)) return t;
  return nullptr;
}

}  // namespace detail

// Reads a run config. Relative paths resolve against the config's directory;
// `seed_override` (the global --seed flag) wins over the file's seed.
inline RunConfig parse_run_config(const nlohmann::json& j, const fs::path& base_dir,
                                  std::optional<std::uint64_t> seed_override = std::nullopt) {
  try {
    RunConfig c = j.contains("preset") && !j["preset"].get<std::string>().empty()
                      ? preset(j["preset"].get<std::string>())
                      : RunConfig{};
    c.name = j.value("name", c.name);
    if (c.name.empty()) c.name = "run";
    if (j.contains("dataset")) {
      const auto& d = j["dataset"];
      c.dataset_path = detail::resolve_path(base_dir, d.value("path", ""));
      c.dataset_name = d.value("name", fs::path(c.dataset_path).stem().string());
      if (d.contains("columns")) {
        const auto& col = d["columns"];
        c.columns.id = col.value("id", c.columns.id);
        c.columns.platform = col.value("platform", c.columns.platform);
        c.columns.text = col.value("text", c.columns.text);
        c.columns.language = col.value("language", c.columns.language);
        c.columns.label = col.value("label", c.columns.label);
      }
      if (d.contains("label_map"))
        for (const auto& [k, v] : d["label_map"].items()) {
          const auto l = parse_label(v.get<std::string>());
          if (!l) throw ValidationError("label_map", "label_map value '" + v.get<std::string>() + "' is not a label");
          c.columns.label_map[k] = *l;
        }
      if (d.contains("split")) {
        const auto f = d["split"].get<std::vector<double>>();
        if (f.size() != 3) throw ValidationError("split", "split needs three fractions (train, dev, test)");
        c.split.train_frac = f[0];
        c.split.dev_frac = f[1];
        c.split.test_frac = f[2];
      }
      c.dedupe = d.value("dedupe", c.dedupe);
    }
    if (c.dataset_path.empty()) throw ValidationError("dataset", "config must name dataset.path");
    if (j.contains("language")) {
      const auto lang = parse_language(j["language"].get<std::string>());
      if (!lang || (*lang != Language::english && *lang != Language::hinglish))
        throw ValidationError("language", "language must be english or hinglish");
      c.language = *lang;
    }
    if (j.contains("embedder"))
      c.embedder = j["embedder"].is_string() ? named_embedder(j["embedder"].get<std::string>())
                                             : EmbedderSpec::from_json(j["embedder"]);
    if (j.contains("classifier")) {
      nlohmann::json merged = c.classifier.to_json();
      merged.merge_patch(j["classifier"]);
      c.classifier = ClassifierConfig::from_json(merged);
    }
    if (j.contains("lr_preset")) {
      c.lr_preset = j["lr_preset"].get<std::string>();
      if (!c.lr_preset.empty()) c.classifier.learning_rate = lr_preset(c.lr_preset);
    }
    c.vocab_path = detail::resolve_path(base_dir, j.value("vocab", ""));
    if (c.vocab_path.empty() && needs_vocab(c.embedder)) {
      const auto* t = detail::first_transformer(c.embedder);
      if (t->weight_source == WeightSource::pretrained_file) c.vocab_path = (resolve_weights_dir(*t) / "vocab.txt").string();
    }
    if (needs_vocab(c.embedder) && c.vocab_path.empty())
      throw ValidationError("vocab", "transformer embedders need a vocab path");
    c.apply_seed(seed_override.value_or(j.value("seed", std::uint64_t{0})));
    c.classifier.validate();
    c.embedder.validate();
    c.split.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad run config: ") + e.what());
  }
}

inline RunConfig load_run_config(const fs::path& path, std::optional<std::uint64_t> seed_override = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j, fs::absolute(path).parent_path(), seed_override);
}

// -- manifests ----------------------------------------------------------------

inline std::string hash_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return "";
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return text::hex64(text::fnv1a(bytes));
}

// Hashes every regular file under `dir`, keyed by relative path.
inline nlohmann::json hash_tree(const fs::path& dir) {
  std::map<std::string, std::string> files;
  if (fs::is_directory(dir))
    for (const auto& e : fs::recursive_directory_iterator(dir))
      if (e.is_regular_file()) files[fs::relative(e.path(), dir).generic_string()] = hash_file(e.path());
  return files;
}

inline std::string now_iso8601() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct RunManifest {
  std::string command;
  nlohmann::json config;
  nlohmann::json inputs = nlohmann::json::object();
  nlohmann::json outputs = nlohmann::json::object();
  nlohmann::json results = nlohmann::json::object();
  std::string started_at;
  std::string finished_at;

  nlohmann::json to_json() const {
    return {{"command", command}, {"config", config},          {"inputs", inputs},          {"outputs", outputs},
            {"results", results}, {"started_at", started_at}, {"finished_at", finished_at}};
  }

  void write(const fs::path& path) const {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    out << to_json().dump(2) << '\n';
    if (!out) throw Error("cannot write manifest " + path.string());
  }
};

// -- workflows ------------------------------------------------------------------

inline LoadResult load_dataset(const RunConfig& c) {
  if (!fs::exists(c.dataset_path)) throw DataError("dataset not found: " + c.dataset_path);
  return load_csv(c.dataset_path, c.columns, c.dataset_name.empty() ? c.dataset_path : c.dataset_name);
}

inline void require_labels(const Dataset& d) {
  std::vector<std::string> missing;
  for (const auto& c : d)
    if (!c.gold_label) missing.push_back(c.id);
  if (missing.empty()) return;
  std::string list;
  for (std::size_t i = 0; i < missing.size() && i < 20; ++i) list += (i ? ", " : "") + missing[i];
  if (missing.size() > 20) list += ", ...";
  throw DataError(std::to_string(missing.size()) + " unlabeled rows: " + list);
}

inline metrics::EvalReport evaluate_model(const TrainedModel& m, const Dataset& processed) {
  if (processed.empty()) throw DataError("evaluation set is empty");
  require_labels(processed);
  std::vector<Label> golds;
  for (const auto& c : processed) golds.push_back(*c.gold_label);
  const auto preds = predict_dataset(m, processed);
  return metrics::evaluate(golds, preds);
}

struct TrainOutcome {
  TrainedModel model;
  metrics::EvalReport dev_report;
  Splits splits;
  fs::path model_dir;
  fs::path manifest_path;
  std::string load_summary;
};

inline nlohmann::json history_json(const TrainedModel& m) {
  nlohmann::json h = nlohmann::json::array();
  for (const auto& e : m.history) h.push_back({{"train_loss", e.train_loss}, {"dev_accuracy", e.dev_accuracy}});
  return h;
}

// split -> preprocess -> train; writes <out>/model, <out>/test.csv,
// <out>/dev_report.json and <out>/manifest.json.
inline TrainOutcome run_train(const RunConfig& c, const fs::path& out_dir, const std::string& command = "train",
                              std::function<void(std::size_t, const EpochStats&)> on_epoch = {}) {
  RunManifest manifest;
  manifest.command = command;
  manifest.started_at = now_iso8601();
  manifest.config = c.to_json();

  require_pretrained_weights(c.embedder);
  const auto loaded = load_dataset(c);
  Dataset data = preprocess::apply(preprocess::Pipeline::for_language(c.language), loaded.dataset);
  if (c.dedupe) preprocess::dedupe_exact(data);
  require_labels(data);

  std::shared_ptr<const Vocabulary> vocab;
  if (needs_vocab(c.embedder)) {
    if (!fs::exists(c.vocab_path)) throw DataError("vocabulary not found: " + c.vocab_path);
    vocab = std::make_shared<Vocabulary>(Vocabulary::load(c.vocab_path));
    manifest.inputs["vocab"] = {{"path", c.vocab_path}, {"fingerprint", vocab->fingerprint()}};
  }
  manifest.inputs["dataset"] = {{"path", c.dataset_path}, {"hash", hash_file(c.dataset_path)},
                                {"rows", loaded.dataset.size()}, {"row_errors", loaded.errors.size()}};

  TrainOutcome out;
  out.load_summary = loaded.summary();
  out.splits = split(data, c.split);
  TrainOptions opts;
  opts.vocab = vocab;
  opts.language = c.language;
  opts.on_epoch = std::move(on_epoch);
  out.model = train(c.embedder, out.splits.train, out.splits.dev, c.classifier, opts);
  const Dataset& report_set = out.splits.dev.empty() ? out.splits.train : out.splits.dev;
  out.dev_report = evaluate_model(out.model, report_set);

  fs::create_directories(out_dir);
  out.model_dir = out_dir / "model";
  save_model(out.model, out.model_dir);
  {
    std::ofstream test(out_dir / "test.csv", std::ios::trunc);
    write_csv(out.splits.test, test);
  }
  {
    std::ofstream rep(out_dir / "dev_report.json", std::ios::trunc);
    rep << metrics::to_json(out.dev_report).dump(2) << '\n';
  }
  manifest.outputs = {{"model", out.model_dir.string()},
                      {"model_files", hash_tree(out.model_dir)},
                      {"test_split", (out_dir / "test.csv").string()},
                      {"dev_report", (out_dir / "dev_report.json").string()}};
  manifest.results = {{"splits",
                       {{"train", out.splits.train.size()}, {"dev", out.splits.dev.size()},
                        {"test", out.splits.test.size()}}},
                      {"history", history_json(out.model)},
                      {"best_epoch", out.model.best_epoch},
                      {"dev_report", metrics::to_json(out.dev_report)}};
  manifest.finished_at = now_iso8601();
  out.manifest_path = out_dir / "manifest.json";
  manifest.write(out.manifest_path);
  return out;
}

// Loads a raw labeled CSV and preprocesses it with the model's pipeline.
inline Dataset load_eval_set(const TrainedModel& m, const fs::path& csv_path, const ColumnMap& columns = {}) {
  if (!fs::exists(csv_path)) throw DataError("test set not found: " + csv_path.string());
  const auto loaded = load_csv(csv_path.string(), columns);
  return preprocess::apply(preprocess::Pipeline::for_language(m.language), loaded.dataset);
}

// Reads offline predictions: a CSV with `gold` and `pred` columns.
inline metrics::EvalReport evaluate_predictions_file(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("predictions file not found: " + path.string());
  const auto table = csv::read(path.string());
  const int g = table.column("gold"), p = table.column("pred");
  if (g < 0 || p < 0) throw ConfigError("predictions file needs 'gold' and 'pred' columns");
  std::vector<Label> golds, preds;
  for (const auto& row : table.rows) {
    const auto gl = parse_label(row.fields[static_cast<std::size_t>(g)]);
    const auto pl = parse_label(row.fields[static_cast<std::size_t>(p)]);
    if (!gl || !pl) throw DataError(path.string() + ":" + std::to_string(row.line) + ": unrecognized label");
    golds.push_back(*gl);
    preds.push_back(*pl);
  }
  if (golds.empty()) throw DataError("predictions file has no rows");
  return metrics::evaluate(golds, preds);
}

}  // namespace hsd::workflow
