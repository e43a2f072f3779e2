#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "hsd/csv.hpp"
#include "hsd/error.hpp"
#include "hsd/text.hpp"

namespace hsd {

enum class Label { hate, not_hate };
enum class Platform { youtube, instagram, twitter, other };
enum class Language { english, hindi, hinglish, unknown };

inline std::string_view to_string(Label l) { return l == Label::hate ? "hate" : "not_hate"; }

inline std::string_view to_string(Platform p) {
  switch (p) {
    case Platform::youtube: return "youtube";
    case Platform::instagram: return "instagram";
    case Platform::twitter: return "twitter";
    case Platform::other: break;
  }
  return "other";
}

inline std::string_view to_string(Language l) {
  switch (l) {
    case Language::english: return "english";
    case Language::hindi: return "hindi";
    case Language::hinglish: return "hinglish";
    case Language::unknown: break;
  }
  return "unknown";
}

// Accepts "hate", "not_hate", "not-hate", "not hate", "nothate" in any case.
inline std::optional<Label> parse_label(std::string_view s) {
  std::string key;
  for (char c : text::ascii_lower(text::trim(s)))
    if (c != '-' && c != '_' && c != ' ') key.push_back(c);
  if (key == "hate") return Label::hate;
  if (key == "nothate") return Label::not_hate;
  return std::nullopt;
}

inline std::optional<Language> parse_language(std::string_view s) {
  const std::string key = text::ascii_lower(text::trim(s));
  if (key == "english" || key == "en") return Language::english;
  if (key == "hindi" || key == "hi") return Language::hindi;
  if (key == "hinglish") return Language::hinglish;
  if (key == "unknown" || key.empty()) return Language::unknown;
  return std::nullopt;
}

inline Platform parse_platform(std::string_view s) {
  const std::string key = text::ascii_lower(text::trim(s));
  if (key == "youtube") return Platform::youtube;
  if (key == "instagram") return Platform::instagram;
  if (key == "twitter") return Platform::twitter;
  return Platform::other;
}

struct Comment {
  std::string id;
  Platform platform = Platform::other;
  std::string raw_text;
  Language language = Language::unknown;
  std::optional<Label> gold_label;
  std::map<std::string, Label> annotator_labels;
  // Set once a preprocessing pipeline has run over raw_text.
  std::optional<std::string> processed_text;
};

class Dataset {
 public:
  Dataset() = default;
  Dataset(std::string name, std::vector<Comment> comments)
      : name_(std::move(name)), comments_(std::move(comments)) {
    std::unordered_set<std::string> seen;
    for (const auto& c : comments_)
      if (!seen.insert(c.id).second) throw DataError("duplicate comment id: " + c.id);
  }

  const std::string& name() const noexcept { return name_; }
  const std::vector<Comment>& comments() const noexcept { return comments_; }
  std::size_t size() const noexcept { return comments_.size(); }
  bool empty() const noexcept { return comments_.empty(); }
  const Comment& operator[](std::size_t i) const { return comments_[i]; }
  auto begin() const { return comments_.begin(); }
  auto end() const { return comments_.end(); }

 private:
  std::string name_;
  std::vector<Comment> comments_;
};

// Logical field -> CSV column name. An empty id column means ids are
// synthesized from the row's line number.
struct ColumnMap {
  std::string id = "id";
  std::string platform = "platform";
  std::string text = "text";
  std::string language = "language";
  std::string label = "label";
  // Raw label value -> label, consulted before the usual spellings
  // (e.g. {"0": hate, "1": hate, "2": not_hate} for numeric class columns).
  std::map<std::string, Label> label_map;
};

struct LoadResult {
  Dataset dataset;
  std::size_t skipped_empty = 0;
  std::vector<csv::RowError> errors;

  std::string summary() const {
    std::ostringstream os;
    os << dataset.size() << " comments loaded, " << skipped_empty << " empty rows skipped, "
       << errors.size() << " row errors";
    for (const auto& e : errors) os << "\n  line " << e.line << ": " << e.message;
    return os.str();
  }
};

inline LoadResult load_csv_table(const csv::Table& table, const ColumnMap& columns,
                                 std::string name) {
  LoadResult result;
  result.errors = table.errors;
  if (table.header.empty()) {
    result.dataset = Dataset(std::move(name), {});
    return result;
  }
  auto required = [&](const std::string& col) {
    const int idx = table.column(col);
    if (idx < 0) throw ConfigError("missing required column: " + col);
    return idx;
  };
  auto optional_col = [&](const std::string& col) { return col.empty() ? -1 : table.column(col); };

  const int text_col = required(columns.text);
  const int id_col = columns.id.empty() ? -1 : required(columns.id);
  const int platform_col = optional_col(columns.platform);
  const int language_col = optional_col(columns.language);
  const int label_col = optional_col(columns.label);

  std::vector<Comment> comments;
  std::unordered_set<std::string> ids;
  for (const auto& row : table.rows) {
    const auto field = [&](int idx) -> const std::string& { return row.fields[static_cast<std::size_t>(idx)]; };
    Comment c;
    c.id = id_col >= 0 ? text::trim(field(id_col)) : "row-" + std::to_string(row.line);
    c.raw_text = field(text_col);
    if (text::trim(c.raw_text).empty()) {
      ++result.skipped_empty;
      continue;
    }
    if (c.id.empty()) {
      result.errors.push_back({row.line, "empty id"});
      continue;
    }
    if (platform_col >= 0) c.platform = parse_platform(field(platform_col));
    if (language_col >= 0) {
      const auto lang = parse_language(field(language_col));
      if (!lang) {
        result.errors.push_back({row.line, "unrecognized language: " + field(language_col)});
        continue;
      }
      c.language = *lang;
    }
    if (label_col >= 0 && !text::trim(field(label_col)).empty()) {
      const std::string raw = text::trim(field(label_col));
      const auto mapped = columns.label_map.find(raw);
      c.gold_label = mapped != columns.label_map.end() ? std::optional<Label>(mapped->second) : parse_label(raw);
      if (!c.gold_label) {
        result.errors.push_back({row.line, "unrecognized label: " + field(label_col)});
        continue;
      }
    }
    if (!ids.insert(c.id).second) {
      result.errors.push_back({row.line, "duplicate id: " + c.id});
      continue;
    }
    comments.push_back(std::move(c));
  }
  result.dataset = Dataset(std::move(name), std::move(comments));
  return result;
}

// Reads a UTF-8 CSV with a header row. Malformed rows are reported in the
// result and skipped; a missing required column throws ConfigError.
inline LoadResult load_csv(const std::string& path, const ColumnMap& columns = {},
                           std::string name = {}) {
  if (name.empty()) name = path;
  return load_csv_table(csv::read(path), columns, std::move(name));
}

inline void write_csv(const Dataset& dataset, std::ostream& os) {
  csv::write_row(os, {"id", "platform", "text", "language", "label"});
  for (const auto& c : dataset) {
    csv::write_row(os, {c.id, std::string(to_string(c.platform)), c.raw_text,
                        std::string(to_string(c.language)),
                        c.gold_label ? std::string(to_string(*c.gold_label)) : std::string()});
  }
}

struct SplitSpec {
  double train_frac = 0.8;
  double dev_frac = 0.1;
  double test_frac = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    for (double f : {train_frac, dev_frac, test_frac})
      if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("split fractions must lie in [0, 1]");
    if (std::abs(train_frac + dev_frac + test_frac - 1.0) > 1e-9)
      throw ConfigError("split fractions must sum to 1");
  }
};

struct Splits {
  Dataset train, dev, test;
};

// Fisher-Yates driven by mt19937_64, whose output sequence is fixed by the
// standard; std::shuffle is not portable across standard libraries.
inline void seeded_shuffle(std::vector<std::size_t>& v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

// Shuffles by seed, floors each fraction, and gives the remainder to test.
inline Splits split(const Dataset& dataset, const SplitSpec& spec) {
  spec.validate();
  if (dataset.size() < 3)
    throw DataError("dataset has " + std::to_string(dataset.size()) +
                    " comments; at least 3 are needed to populate train/dev/test");
  const std::size_t n = dataset.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  seeded_shuffle(order, spec.seed);

  const auto count = [n](double frac) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(n) * frac + 1e-9));
  };
  const std::size_t n_train = count(spec.train_frac);
  const std::size_t n_dev = std::min(count(spec.dev_frac), n - n_train);

  std::vector<Comment> train, dev, test;
  for (std::size_t k = 0; k < n; ++k) {
    const Comment& c = dataset[order[k]];
    if (k < n_train)
      train.push_back(c);
    else if (k < n_train + n_dev)
      dev.push_back(c);
    else
      test.push_back(c);
  }
  const std::string& base = dataset.name();
  return {Dataset(base + ":train", std::move(train)), Dataset(base + ":dev", std::move(dev)),
          Dataset(base + ":test", std::move(test))};
}

inline std::string flair_line(Label label, std::string_view text_in) {
  std::string text;
  text.reserve(text_in.size());
  for (std::size_t i = 0; i < text_in.size(); ++i) {
    const char c = text_in[i];
    if (c == '\r') {
      if (i + 1 < text_in.size() && text_in[i + 1] == '\n') ++i;
      text.push_back(' ');
    } else if (c == '\n') {
      text.push_back(' ');
    } else {
      text.push_back(c);
    }
  }
  std::string line = "__label__";
  line += to_string(label);
  line += ' ';
  line += text;
  return line;
}

inline std::pair<Label, std::string> parse_flair_line(std::string_view line) {
  constexpr std::string_view prefix = "__label__";
  if (line.substr(0, prefix.size()) != prefix) throw DataError("missing __label__ prefix");
  const auto space = line.find(' ', prefix.size());
  if (space == std::string_view::npos) throw DataError("missing text separator");
  const auto label = parse_label(line.substr(prefix.size(), space - prefix.size()));
  if (!label) throw DataError("unknown label in line");
  return {*label, std::string(line.substr(space + 1))};
}

// Writes `__label__<class> <processed text>` per comment. Validation happens
// before the file is opened, so a failing export writes nothing.
inline std::size_t export_flair(const Dataset& dataset, const std::string& path) {
  std::vector<std::string> missing;
  for (const auto& c : dataset)
    if (!c.gold_label || !c.processed_text) missing.push_back(c.id);
  if (!missing.empty())
    throw DataError("comments without gold label or processed text: " + text::join(missing, ", "));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& c : dataset) out << flair_line(*c.gold_label, *c.processed_text) << '\n';
  if (!out) throw DataError("write failed: " + path);
  return dataset.size();
}

}  // namespace hsd
