#pragma once

#include <cstdlib>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hsd/corpus.hpp"
#include "hsd/error.hpp"
#include "hsd/text.hpp"
#include "hsd/utf8.hpp"

#ifndef HSD_DEFAULT_DATA_DIR
#define HSD_DEFAULT_DATA_DIR "data"
#endif

namespace hsd::preprocess {

// ---------------------------------------------------------------------------
// Character classes

inline bool is_emoji_component(char32_t cp) {
  return cp == 0x200D || cp == 0xFE0E || cp == 0xFE0F || cp == 0x20E3 ||
         (cp >= 0x1F3FB && cp <= 0x1F3FF) || (cp >= 0xE0020 && cp <= 0xE007F);
}

inline bool is_emoji_codepoint(char32_t cp) {
  return (cp >= 0x1F000 && cp <= 0x1FAFF) || (cp >= 0x2600 && cp <= 0x27BF) ||
         (cp >= 0x2300 && cp <= 0x23FF) || (cp >= 0x2B00 && cp <= 0x2BFF) ||
         (cp >= 0x2190 && cp <= 0x21FF) || (cp >= 0x25A0 && cp <= 0x25FF) ||
         cp == 0x00A9 || cp == 0x00AE || cp == 0x2122 || cp == 0x2139 || cp == 0x3030 ||
         cp == 0x303D || cp == 0x3297 || cp == 0x3299 || is_emoji_component(cp);
}

inline bool is_devanagari(char32_t cp) { return cp >= 0x0900 && cp <= 0x097F; }

inline bool is_punctuation(char32_t cp) {
  if (cp < 0x80) return (cp >= 0x21 && cp <= 0x2F) || (cp >= 0x3A && cp <= 0x40) ||
                        (cp >= 0x5B && cp <= 0x60) || (cp >= 0x7B && cp <= 0x7E);
  switch (cp) {
    case 0x00A1: case 0x00A7: case 0x00AB: case 0x00B6: case 0x00B7: case 0x00BB: case 0x00BF:
    case 0x0964: case 0x0965: case 0x0970:
    case 0x3001: case 0x3002: case 0x3003:
      return true;
    default:
      break;
  }
  return (cp >= 0x2010 && cp <= 0x2027) || (cp >= 0x2030 && cp <= 0x205E) ||
         (cp >= 0xFF01 && cp <= 0xFF0F) || (cp >= 0xFF1A && cp <= 0xFF20);
}

// Characters that may continue a @mention or #hashtag.
inline bool is_word_char(char32_t cp) {
  if (cp < 0x80) return (cp >= '0' && cp <= '9') || (cp >= 'a' && cp <= 'z') ||
                        (cp >= 'A' && cp <= 'Z') || cp == '_';
  return !text::is_space(cp) && !is_emoji_codepoint(cp) && !is_punctuation(cp) &&
         !text::is_invisible(cp);
}

// ---------------------------------------------------------------------------
// Tables

namespace detail {

// Yields the non-comment, non-blank lines of a UTF-8 data file.
inline std::vector<std::pair<std::size_t, std::string>> data_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open data file: " + path);
  std::vector<std::pair<std::size_t, std::string>> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    out.emplace_back(n, line);
  }
  return out;
}

inline std::pair<std::string, std::string> split_tab(const std::string& path, std::size_t n,
                                                     const std::string& line) {
  const auto tab = line.find('\t');
  if (tab == std::string::npos)
    throw ConfigError(path + ":" + std::to_string(n) + ": expected two tab-separated columns");
  return {line.substr(0, tab), line.substr(tab + 1)};
}

}  // namespace detail

class ContractionTable {
 public:
  ContractionTable() = default;
  explicit ContractionTable(std::unordered_map<std::string, std::string> entries)
      : entries_(std::move(entries)) {}

  static ContractionTable load(const std::string& path) {
    std::unordered_map<std::string, std::string> entries;
    for (const auto& [n, line] : detail::data_lines(path)) {
      auto [key, value] = detail::split_tab(path, n, line);
      entries[text::ascii_lower(key)] = text::ascii_lower(value);
    }
    return ContractionTable(std::move(entries));
  }

  const std::string* find(const std::string& lowered_key) const {
    const auto it = entries_.find(lowered_key);
    return it == entries_.end() ? nullptr : &it->second;
  }
  const std::unordered_map<std::string, std::string>& entries() const { return entries_; }

 private:
  std::unordered_map<std::string, std::string> entries_;
};

class StopwordList {
 public:
  StopwordList() = default;
  StopwordList(std::unordered_set<std::string> words, Language language)
      : words_(std::move(words)), language_(language) {
    for (const auto& w : words_) {
      if (w.empty() || w != text::ascii_lower(w) || text::split_whitespace(w).size() != 1)
        throw ConfigError("stopword entries must be lowercase single tokens: '" + w + "'");
    }
  }

  static StopwordList load(const std::string& path, Language language) {
    std::unordered_set<std::string> words;
    for (const auto& [n, line] : detail::data_lines(path)) words.insert(text::trim(line));
    return StopwordList(std::move(words), language);
  }

  // Union of two lists; the language of the first is kept.
  static StopwordList merged(const StopwordList& a, const StopwordList& b) {
    auto words = a.words_;
    words.insert(b.words_.begin(), b.words_.end());
    return StopwordList(std::move(words), a.language_);
  }

  bool contains(std::string_view w) const { return words_.count(std::string(w)) != 0; }
  const std::unordered_set<std::string>& words() const { return words_; }
  Language language() const { return language_; }

 private:
  std::unordered_set<std::string> words_;
  Language language_ = Language::unknown;
};

class TransliterationTable {
 public:
  TransliterationTable() = default;
  explicit TransliterationTable(std::unordered_map<char32_t, std::string> map)
      : map_(std::move(map)) {}

  static TransliterationTable load(const std::string& path) {
    std::unordered_map<char32_t, std::string> map;
    for (const auto& [n, line] : detail::data_lines(path)) {
      const auto tab = line.find('\t');
      const std::string hex = line.substr(0, tab);
      const std::string value = tab == std::string::npos ? "" : line.substr(tab + 1);
      char* end = nullptr;
      const auto cp = static_cast<char32_t>(std::strtoul(hex.c_str(), &end, 16));
      if (end == hex.c_str() || *end != '\0')
        throw ConfigError(path + ":" + std::to_string(n) + ": bad codepoint '" + hex + "'");
      for (unsigned char c : value)
        if (c >= 0x80) throw ConfigError(path + ":" + std::to_string(n) + ": replacement is not ASCII");
      map[cp] = value;
    }
    return TransliterationTable(std::move(map));
  }

  const std::string* find(char32_t cp) const {
    const auto it = map_.find(cp);
    return it == map_.end() ? nullptr : &it->second;
  }
  std::size_t size() const { return map_.size(); }

 private:
  std::unordered_map<char32_t, std::string> map_;
};

class EmojiTable {
 public:
  EmojiTable() = default;

  static EmojiTable load(const std::string& path) {
    EmojiTable t;
    for (const auto& [n, line] : detail::data_lines(path)) {
      auto [seq, name] = detail::split_tab(path, n, line);
      t.add(utf8::decode(seq), name);
    }
    return t;
  }

  void add(std::u32string seq, std::string name) {
    max_len_ = std::max(max_len_, seq.size());
    names_[std::move(seq)] = std::move(name);
  }

  // Longest table key starting at cps[pos]: returns its length, 0 if none.
  std::size_t match(std::u32string_view cps, std::size_t pos, const std::string** name) const {
    const std::size_t limit = std::min(max_len_, cps.size() - pos);
    for (std::size_t len = limit; len > 0; --len) {
      const auto it = names_.find(std::u32string(cps.substr(pos, len)));
      if (it != names_.end()) {
        *name = &it->second;
        return len;
      }
    }
    return 0;
  }

  const std::unordered_map<std::u32string, std::string>& names() const { return names_; }

 private:
  std::unordered_map<std::u32string, std::string> names_;
  std::size_t max_len_ = 0;
};

// Maps a lowercase token to its root form; unknown tokens pass through.
class Lemmatizer {
 public:
  virtual ~Lemmatizer() = default;
  virtual std::string lemma(std::string_view token) const = 0;
};

class TableLemmatizer final : public Lemmatizer {
 public:
  explicit TableLemmatizer(std::unordered_map<std::string, std::string> table)
      : table_(std::move(table)) {
    // Resolve chains so every lemma is a fixed point.
    for (auto& [form, lemma] : table_) {
      std::string cur = lemma;
      for (int hops = 0; hops < 16; ++hops) {
        const auto it = table_.find(cur);
        if (it == table_.end() || it->second == cur) break;
        cur = it->second;
      }
      lemma = cur;
    }
  }

  static std::shared_ptr<TableLemmatizer> load(const std::string& path) {
    std::unordered_map<std::string, std::string> table;
    for (const auto& [n, line] : detail::data_lines(path)) {
      auto [form, lemma] = detail::split_tab(path, n, line);
      table[form] = lemma;
    }
    return std::make_shared<TableLemmatizer>(std::move(table));
  }

  std::string lemma(std::string_view token) const override {
    const auto it = table_.find(std::string(token));
    return it == table_.end() ? std::string(token) : it->second;
  }

  const std::unordered_map<std::string, std::string>& table() const { return table_; }

 private:
  std::unordered_map<std::string, std::string> table_;
};

inline std::string default_data_dir() {
  if (const char* env = std::getenv("HSD_DATA_DIR"); env && *env) return env;
  return HSD_DEFAULT_DATA_DIR;
}

// Every table the two pipelines need. Immutable once loaded.
struct Resources {
  std::shared_ptr<const ContractionTable> contractions;
  std::shared_ptr<const StopwordList> english_stopwords;
  std::shared_ptr<const StopwordList> hinglish_stopwords;  // Hinglish words only
  std::shared_ptr<const TransliterationTable> devanagari;
  std::shared_ptr<const EmojiTable> emoji;
  std::shared_ptr<const Lemmatizer> lemmatizer;

  static Resources load(const std::string& dir) {
    Resources r;
    r.contractions = std::make_shared<ContractionTable>(ContractionTable::load(dir + "/contractions.tsv"));
    r.english_stopwords = std::make_shared<StopwordList>(
        StopwordList::load(dir + "/stopwords_english.txt", Language::english));
    r.hinglish_stopwords = std::make_shared<StopwordList>(
        StopwordList::load(dir + "/stopwords_hinglish.txt", Language::hinglish));
    r.devanagari = std::make_shared<TransliterationTable>(TransliterationTable::load(dir + "/devanagari.tsv"));
    r.emoji = std::make_shared<EmojiTable>(EmojiTable::load(dir + "/emoji.tsv"));
    auto lemmatizer = TableLemmatizer::load(dir + "/lemmas.tsv");
    r.validate_lemmas(*lemmatizer);
    r.lemmatizer = std::move(lemmatizer);
    r.validate_contractions();
    return r;
  }

  static const Resources& defaults() {
    static const Resources r = load(default_data_dir());
    return r;
  }

 private:
  // A lemma that is a stopword or a contraction key would be rewritten by a
  // second pipeline pass.
  void validate_lemmas(const TableLemmatizer& lem) const {
    for (const auto& [form, lemma] : lem.table()) {
      if (english_stopwords->contains(lemma) || contractions->find(lemma))
        throw ConfigError("lemma '" + lemma + "' of '" + form + "' is a stopword or contraction key");
    }
  }

  void validate_contractions() const {
    for (const auto& [key, expansion] : contractions->entries())
      for (const auto& word : text::split_whitespace(expansion))
        if (contractions->find(word))
          throw ConfigError("expansion of '" + key + "' contains another key '" + word + "'");
  }
};

// ---------------------------------------------------------------------------
// Stages

struct Diagnostics {
  std::size_t unknown_emoji = 0;
  std::size_t unmapped_devanagari = 0;
};

// ASCII and Latin-1 letters are folded; other scripts pass through.
inline std::string lowercase(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t pos = 0; pos < s.size();) {
    char32_t cp = utf8::next(s, pos);
    if ((cp >= 'A' && cp <= 'Z') || (cp >= 0xC0 && cp <= 0xDE && cp != 0xD7)) cp += 0x20;
    utf8::append(out, cp);
  }
  return out;
}

inline std::string expand_contractions(std::string_view s, const ContractionTable& table) {
  const auto cps = utf8::decode(s);
  auto in_word = [](char32_t cp) {
    return (cp >= '0' && cp <= '9') || (cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z') ||
           cp == '\'' || cp == 0x2019;
  };
  std::string out;
  std::size_t i = 0;
  while (i < cps.size()) {
    if (!in_word(cps[i])) {
      utf8::append(out, cps[i++]);
      continue;
    }
    std::size_t j = i;
    while (j < cps.size() && in_word(cps[j])) ++j;
    // leading/trailing apostrophes act as quotes, not part of the word
    std::size_t b = i, e = j;
    auto apostrophe = [](char32_t cp) { return cp == '\'' || cp == 0x2019; };
    while (b < e && apostrophe(cps[b])) ++b;
    while (e > b && apostrophe(cps[e - 1])) --e;
    std::string key;
    for (std::size_t k = b; k < e; ++k) {
      char32_t cp = cps[k] == 0x2019 ? U'\'' : cps[k];
      if (cp >= 'A' && cp <= 'Z') cp += 0x20;
      key.push_back(static_cast<char>(cp));
    }
    const std::string* expansion = key.empty() ? nullptr : table.find(key);
    for (std::size_t k = i; k < b; ++k) utf8::append(out, cps[k]);
    if (expansion) {
      out += *expansion;
    } else {
      for (std::size_t k = b; k < e; ++k) utf8::append(out, cps[k]);
    }
    for (std::size_t k = e; k < j; ++k) utf8::append(out, cps[k]);
    i = j;
  }
  return out;
}

// Removes URLs, @mentions, #hashtags and punctuation, then squeezes spaces.
inline std::string strip_social(std::string_view s) {
  const auto cps = utf8::decode(s);
  const std::string ascii = [&] {
    std::string a;
    a.reserve(cps.size());
    for (char32_t cp : cps) a.push_back(cp < 0x80 ? static_cast<char>(cp) : '\x01');
    return a;
  }();
  auto alnum = [](char32_t cp) {
    return (cp >= '0' && cp <= '9') || (cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z');
  };

  std::u32string out;
  std::size_t i = 0;
  while (i < cps.size()) {
    const std::string_view rest = std::string_view(ascii).substr(i);
    const bool url = text::starts_with_ci(rest, "http://") || text::starts_with_ci(rest, "https://") ||
                     (text::starts_with_ci(rest, "www.") && (i == 0 || !alnum(cps[i - 1])));
    if (url) {
      while (i < cps.size() && !text::is_space(cps[i])) ++i;
      out.push_back(' ');
      continue;
    }
    if ((cps[i] == '@' || cps[i] == '#') && i + 1 < cps.size() && is_word_char(cps[i + 1])) {
      ++i;
      while (i < cps.size() && is_word_char(cps[i])) ++i;
      out.push_back(' ');
      continue;
    }
    if (!is_punctuation(cps[i])) out.push_back(cps[i]);
    ++i;
  }
  return text::squeeze(utf8::encode(out));
}

enum class DemojizeMode { replace_with_name, remove };

inline std::string demojize(std::string_view s, const EmojiTable& table, DemojizeMode mode,
                            Diagnostics* diag = nullptr) {
  const auto cps = utf8::decode(s);
  std::u32string out;
  bool touched = false;
  for (std::size_t i = 0; i < cps.size();) {
    const std::string* name = nullptr;
    if (const std::size_t len = table.match(cps, i, &name); len > 0) {
      out.push_back(' ');
      if (mode == DemojizeMode::replace_with_name) out += utf8::decode(*name);
      out.push_back(' ');
      touched = true;
      i += len;
      continue;
    }
    if (is_emoji_codepoint(cps[i])) {
      if (!is_emoji_component(cps[i]) && diag) ++diag->unknown_emoji;
      out.push_back(' ');
      touched = true;
      ++i;
      continue;
    }
    out.push_back(cps[i++]);
  }
  std::string result = utf8::encode(out);
  return touched ? text::squeeze(result) : result;
}

inline std::string remove_stopwords(std::string_view s, const StopwordList& list) {
  std::vector<std::string> kept;
  for (auto& tok : text::split_whitespace(s))
    if (!list.contains(tok)) kept.push_back(std::move(tok));
  return text::join(kept);
}

inline std::string lemmatize(std::string_view s, const Lemmatizer& lemmatizer) {
  auto tokens = text::split_whitespace(s);
  for (auto& tok : tokens) tok = lemmatizer.lemma(tok);
  return text::join(tokens);
}

// Devanagari codepoints go through the table; codepoints missing from it are
// dropped and counted. Everything else is copied.
inline std::string transliterate_devanagari(std::string_view s, const TransliterationTable& table,
                                            Diagnostics* diag = nullptr) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t pos = 0; pos < s.size();) {
    const std::size_t start = pos;
    const char32_t cp = utf8::next(s, pos);
    if (!is_devanagari(cp)) {
      out.append(s.substr(start, pos - start));
      continue;
    }
    if (const std::string* rep = table.find(cp)) {
      out += *rep;
    } else if (diag) {
      ++diag->unmapped_devanagari;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pipelines

struct PipelineStage {
  std::string name;
  std::function<std::string(std::string_view, Diagnostics&)> transform;
};

class Pipeline {
 public:
  Pipeline(Language language, std::vector<PipelineStage> stages)
      : language_(language), stages_(std::move(stages)) {}

  // lowercase -> contractions -> social -> emoji names -> stopwords -> lemmas
  static Pipeline english(const Resources& r = Resources::defaults()) {
    std::vector<PipelineStage> stages;
    stages.push_back({"lowercase", [](std::string_view s, Diagnostics&) { return lowercase(s); }});
    stages.push_back({"expand_contractions", [t = r.contractions](std::string_view s, Diagnostics&) {
                        return expand_contractions(s, *t);
                      }});
    stages.push_back({"strip_social", [](std::string_view s, Diagnostics&) { return strip_social(s); }});
    stages.push_back({"demojize", [t = r.emoji](std::string_view s, Diagnostics& d) {
                        return demojize(s, *t, DemojizeMode::replace_with_name, &d);
                      }});
    stages.push_back({"remove_stopwords", [t = r.english_stopwords](std::string_view s, Diagnostics&) {
                        return remove_stopwords(s, *t);
                      }});
    stages.push_back({"lemmatize", [t = r.lemmatizer](std::string_view s, Diagnostics&) {
                        return lemmatize(s, *t);
                      }});
    return Pipeline(Language::english, std::move(stages));
  }

  // lowercase -> transliterate -> social -> drop emoji -> stopwords (hinglish + english)
  static Pipeline hinglish(const Resources& r = Resources::defaults()) {
    auto stopwords = std::make_shared<const StopwordList>(
        StopwordList::merged(*r.hinglish_stopwords, *r.english_stopwords));
    std::vector<PipelineStage> stages;
    stages.push_back({"lowercase", [](std::string_view s, Diagnostics&) { return lowercase(s); }});
    stages.push_back({"transliterate_devanagari", [t = r.devanagari](std::string_view s, Diagnostics& d) {
                        return transliterate_devanagari(s, *t, &d);
                      }});
    stages.push_back({"strip_social", [](std::string_view s, Diagnostics&) { return strip_social(s); }});
    stages.push_back({"demojize", [t = r.emoji](std::string_view s, Diagnostics& d) {
                        return demojize(s, *t, DemojizeMode::remove, &d);
                      }});
    stages.push_back({"remove_stopwords", [stopwords](std::string_view s, Diagnostics&) {
                        return remove_stopwords(s, *stopwords);
                      }});
    return Pipeline(Language::hinglish, std::move(stages));
  }

  static Pipeline for_language(Language language, const Resources& r = Resources::defaults()) {
    if (language == Language::english) return english(r);
    if (language == Language::hinglish) return hinglish(r);
    throw ConfigError("no pipeline for language '" + std::string(to_string(language)) +
                      "' (expected english or hinglish)");
  }

  std::string run(std::string_view text, Diagnostics* diag = nullptr) const {
    Diagnostics local;
    Diagnostics& d = diag ? *diag : local;
    std::string cur(text);
    for (const auto& stage : stages_) cur = stage.transform(cur, d);
    return cur;
  }

  std::vector<std::string> stage_names() const {
    std::vector<std::string> names;
    for (const auto& s : stages_) names.push_back(s.name);
    return names;
  }

  Language language() const { return language_; }

 private:
  Language language_;
  std::vector<PipelineStage> stages_;
};

inline std::string run_pipeline_english(std::string_view text,
                                        const Resources& r = Resources::defaults()) {
  return Pipeline::english(r).run(text);
}

inline std::string run_pipeline_hinglish(std::string_view text,
                                         const Resources& r = Resources::defaults()) {
  return Pipeline::hinglish(r).run(text);
}

struct DatasetSummary {
  std::size_t rows = 0;
  std::size_t emptied = 0;
  Diagnostics diagnostics;
};

// Copies the dataset with processed_text filled in by the pipeline.
inline Dataset apply(const Pipeline& pipeline, const Dataset& dataset, DatasetSummary* summary = nullptr) {
  DatasetSummary local;
  DatasetSummary& s = summary ? *summary : local;
  std::vector<Comment> out;
  out.reserve(dataset.size());
  for (const auto& c : dataset) {
    Comment copy = c;
    copy.processed_text = pipeline.run(c.raw_text, &s.diagnostics);
    if (copy.processed_text->empty()) ++s.emptied;
    ++s.rows;
    out.push_back(std::move(copy));
  }
  return Dataset(dataset.name(), std::move(out));
}

// Drops comments whose processed (or, if absent, raw) text repeats an
// earlier comment exactly. Returns the number removed.
inline std::size_t dedupe_exact(Dataset& dataset) {
  std::unordered_set<std::string> seen;
  std::vector<Comment> kept;
  std::size_t removed = 0;
  for (const auto& c : dataset) {
    const std::string& key = c.processed_text ? *c.processed_text : c.raw_text;
    if (seen.insert(key).second)
      kept.push_back(c);
    else
      ++removed;
  }
  dataset = Dataset(dataset.name(), std::move(kept));
  return removed;
}

}  // namespace hsd::preprocess
