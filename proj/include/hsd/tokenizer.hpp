#pragma once

#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "hsd/error.hpp"
#include "hsd/text.hpp"
#include "hsd/utf8.hpp"

namespace hsd {

struct SpecialTokens {
  std::string cls = "[CLS]";
  std::string sep = "[SEP]";
  std::string pad = "[PAD]";
  std::string unk = "[UNK]";
};

class Vocabulary {
 public:
  // ids are the positions in `tokens`.
  explicit Vocabulary(std::vector<std::string> tokens, SpecialTokens specials = {},
                      std::string continuation_prefix = "##")
      : tokens_(std::move(tokens)), specials_(std::move(specials)),
        prefix_(std::move(continuation_prefix)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      const auto [it, inserted] = ids_.emplace(tokens_[i], static_cast<int>(i));
      if (!inserted)
        throw DataError("duplicate vocabulary token '" + tokens_[i] + "' on lines " +
                        std::to_string(it->second + 1) + " and " + std::to_string(i + 1));
    }
    cls_ = special_id(specials_.cls);
    sep_ = special_id(specials_.sep);
    pad_ = special_id(specials_.pad);
    unk_ = special_id(specials_.unk);
  }

  // One token per line; the line index (0-based) is the id.
  static Vocabulary load(const std::string& path, SpecialTokens specials = {}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open vocabulary: " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      tokens.push_back(line);
    }
    return Vocabulary(std::move(tokens), std::move(specials));
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  const std::string& prefix() const noexcept { return prefix_; }
  const SpecialTokens& specials() const noexcept { return specials_; }

  int id(std::string_view token) const {
    const auto it = ids_.find(std::string(token));
    return it == ids_.end() ? -1 : it->second;
  }
  bool contains(std::string_view token) const { return ids_.count(std::string(token)) != 0; }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  int cls_id() const noexcept { return cls_; }
  int sep_id() const noexcept { return sep_; }
  int pad_id() const noexcept { return pad_; }
  int unk_id() const noexcept { return unk_; }

  // FNV-1a over the token list, recorded in run manifests.
  std::string fingerprint() const {
    std::uint64_t h = text::fnv1a(prefix_);
    for (const auto& t : tokens_) h = text::fnv1a(t + "\n", h);
    return text::hex64(h);
  }

 private:
  int special_id(const std::string& tok) const {
    const int i = id(tok);
    if (i < 0) throw DataError("vocabulary is missing special token " + tok);
    return i;
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  SpecialTokens specials_;
  std::string prefix_;
  int cls_ = -1, sep_ = -1, pad_ = -1, unk_ = -1;
};

// Greedy longest-match-first segmentation of a single word. If any position
// has no matching piece the whole word becomes the unknown token.
inline std::vector<std::string> wordpiece_tokenize(std::string_view word, const Vocabulary& vocab,
                                                   std::size_t max_chars_per_word = 100) {
  const auto cps = utf8::decode(word);
  if (cps.empty()) return {};
  if (cps.size() > max_chars_per_word) return {vocab.specials().unk};

  std::vector<std::string> pieces;
  std::size_t start = 0;
  while (start < cps.size()) {
    std::size_t end = cps.size();
    std::string match;
    while (end > start) {
      std::string candidate = utf8::encode(std::u32string_view(cps).substr(start, end - start));
      if (start > 0) candidate = vocab.prefix() + candidate;
      if (vocab.contains(candidate)) {
        match = std::move(candidate);
        break;
      }
      --end;
    }
    if (end == start) return {vocab.specials().unk};
    pieces.push_back(std::move(match));
    start = end;
  }
  return pieces;
}

struct TokenSequence {
  std::vector<int> ids;             // exactly max_len
  std::vector<std::string> tokens;  // surface tokens before padding
  std::vector<int> mask;            // 1 on non-pad positions
  std::size_t max_len = 0;

  std::size_t length() const noexcept { return tokens.size(); }
};

// [CLS] + pieces + [SEP], keeping the head when truncating, then padding to
// max_len. Pre-tokenization is whitespace splitting only.
inline TokenSequence encode(std::string_view text_in, const Vocabulary& vocab, std::size_t max_len) {
  if (max_len < 3) throw ConfigError("max_len must be at least 3, got " + std::to_string(max_len));
  TokenSequence seq;
  seq.max_len = max_len;
  const auto& sp = vocab.specials();
  seq.tokens.push_back(sp.cls);
  const std::size_t budget = max_len - 2;
  for (const auto& word : text::split_whitespace(text_in)) {
    for (auto& piece : wordpiece_tokenize(word, vocab)) {
      if (seq.tokens.size() - 1 >= budget) break;
      seq.tokens.push_back(std::move(piece));
    }
    if (seq.tokens.size() - 1 >= budget) break;
  }
  seq.tokens.push_back(sp.sep);

  seq.ids.assign(max_len, vocab.pad_id());
  seq.mask.assign(max_len, 0);
  for (std::size_t i = 0; i < seq.tokens.size(); ++i) {
    const int id = vocab.id(seq.tokens[i]);
    seq.ids[i] = id < 0 ? vocab.unk_id() : id;
    seq.mask[i] = 1;
  }
  return seq;
}

// Strips specials and fuses continuation pieces back into words.
inline std::vector<std::string> decode_words(const TokenSequence& seq, const Vocabulary& vocab) {
  std::vector<std::string> words;
  const auto& sp = vocab.specials();
  for (const auto& tok : seq.tokens) {
    if (tok == sp.cls || tok == sp.sep || tok == sp.pad) continue;
    if (!words.empty() && tok.rfind(vocab.prefix(), 0) == 0 && !vocab.prefix().empty()) {
      words.back() += tok.substr(vocab.prefix().size());
    } else {
      words.push_back(tok);
    }
  }
  return words;
}

}  // namespace hsd
