#include <gtest/gtest.h>

#include <set>

#include "hsd/tokenizer.hpp"
#include "support.hpp"

using namespace hsd;
using testing_support::TempDir;
using testing_support::write_file;

namespace {

const std::vector<std::string> kSpecials{"[PAD]", "[UNK]", "[CLS]", "[SEP]"};

Vocabulary vocab_of(std::vector<std::string> extra) {
  std::vector<std::string> t = kSpecials;
  t.insert(t.end(), extra.begin(), extra.end());
  return Vocabulary(t);
}

// Tries every prefix, longest first, against a plain set. Returns nullopt
// when some position has no match.
std::optional<std::vector<std::string>> brute_force(const std::string& word, const std::set<std::string>& vocab) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start < word.size()) {
    bool found = false;
    for (std::size_t len = word.size() - start; len >= 1; --len) {
      const std::string piece = (start == 0 ? "" : "##") + word.substr(start, len);
      if (vocab.count(piece)) {
        out.push_back(piece);
        start += len;
        found = true;
        break;
      }
    }
    if (!found) return std::nullopt;
  }
  return out;
}

}  // namespace

TEST(Vocabulary, ToyVocabSize) {
  TempDir tmp;
  write_file(tmp / "v.txt", "[PAD]\n[UNK]\n[CLS]\n[SEP]\nhi\nthere\na\n##b\n##c\nd\n");
  const auto v = Vocabulary::load((tmp / "v.txt").string());
  EXPECT_EQ(v.size(), 10u);
  EXPECT_EQ(v.id("hi"), 4);
  EXPECT_NE(v.unk_id(), v.pad_id());
}

TEST(Vocabulary, LargeFileSize) {
  TempDir tmp;
  std::string body = "[PAD]\n[UNK]\n[CLS]\n[SEP]\n";
  for (int i = 4; i < 30523; ++i) body += "tok" + std::to_string(i) + "\n";
  write_file(tmp / "v.txt", body);
  EXPECT_EQ(Vocabulary::load((tmp / "v.txt").string()).size(), 30523u);
}

TEST(Vocabulary, DuplicateTokenCitesBothLines) {
  TempDir tmp;
  write_file(tmp / "v.txt", "[PAD]\n[UNK]\n[CLS]\n[SEP]\nfoo\nx\ny\nz\nfoo\n");
  try {
    Vocabulary::load((tmp / "v.txt").string());
    FAIL() << "expected an error";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("lines 5 and 9"), std::string::npos) << msg;
  }
}

TEST(Vocabulary, MissingSpecialNamed) {
  try {
    Vocabulary({"[PAD]", "[UNK]", "[CLS]", "x"});
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("[SEP]"), std::string::npos);
  }
}

TEST(WordPiece, Examples) {
  const auto multi = vocab_of({"kaam", "karna", "he"});
  const auto mono = vocab_of({"ka", "##am", "##rna", "he"});
  EXPECT_EQ(wordpiece_tokenize("kaam", multi), (std::vector<std::string>{"kaam"}));
  EXPECT_EQ(wordpiece_tokenize("kaam", mono), (std::vector<std::string>{"ka", "##am"}));
  EXPECT_EQ(wordpiece_tokenize("zzzz", vocab_of({"a", "##b"})), (std::vector<std::string>{"[UNK]"}));
}

TEST(WordPiece, CodeMixedSentenceBothVocabularies) {
  const auto multi = vocab_of({"kaam", "karna", "he"});
  const auto mono = vocab_of({"ka", "##am", "##rna", "he"});
  const auto m = encode("kaam karna he", multi, 75);
  EXPECT_EQ(m.tokens, (std::vector<std::string>{"[CLS]", "kaam", "karna", "he", "[SEP]"}));
  EXPECT_EQ(m.ids.size(), 75u);
  EXPECT_EQ(std::count(m.ids.begin(), m.ids.end(), multi.pad_id()), 70);
  const auto b = encode("kaam karna he", mono, 75);
  EXPECT_EQ(b.tokens, (std::vector<std::string>{"[CLS]", "ka", "##am", "ka", "##rna", "he", "[SEP]"}));
}

TEST(WordPiece, MatchesBruteForceOracle) {
  std::mt19937_64 rng(99);
  const std::string alphabet = "abcde";
  std::set<std::string> pieces;
  auto random_string = [&](std::size_t max_len) {
    std::string s;
    const std::size_t n = 1 + rng() % max_len;
    for (std::size_t i = 0; i < n; ++i) s += alphabet[rng() % alphabet.size()];
    return s;
  };
  while (pieces.size() < 40) {
    const auto s = random_string(3);
    pieces.insert(rng() % 2 ? s : "##" + s);
  }
  // single letters in continuation form keep most words segmentable
  for (char c : std::string("abcd")) pieces.insert(std::string("##") + c);
  std::vector<std::string> tokens = kSpecials;
  tokens.insert(tokens.end(), pieces.begin(), pieces.end());
  const Vocabulary vocab(tokens);
  std::size_t unk = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto word = random_string(10);
    const auto expected = brute_force(word, pieces);
    const auto got = wordpiece_tokenize(word, vocab);
    if (expected) {
      EXPECT_EQ(got, *expected) << word;
    } else {
      EXPECT_EQ(got, (std::vector<std::string>{"[UNK]"})) << word;
      ++unk;
    }
  }
  EXPECT_GT(unk, 0u);
  EXPECT_LT(unk, 1000u);
}

TEST(Encode, ShortSequencePadded) {
  const auto v = vocab_of({"hi"});
  const auto s = encode("hi", v, 5);
  EXPECT_EQ(s.ids, (std::vector<int>{v.cls_id(), v.id("hi"), v.sep_id(), v.pad_id(), v.pad_id()}));
  EXPECT_EQ(s.mask, (std::vector<int>{1, 1, 1, 0, 0}));
}

TEST(Encode, TruncatesKeepingSeparatorLast) {
  const auto v = vocab_of({"ab", "##cd"});
  std::string text;
  for (int i = 0; i < 100; ++i) text += "abcd ";  // 200 pieces
  const auto s = encode(text, v, 100);
  ASSERT_EQ(s.ids.size(), 100u);
  EXPECT_EQ(s.tokens.size(), 100u);
  EXPECT_EQ(s.ids.back(), v.sep_id());
  EXPECT_EQ(s.ids.front(), v.cls_id());
  EXPECT_EQ(s.tokens[97], "ab");
  EXPECT_EQ(s.tokens[98], "##cd");
}

TEST(Encode, MaxLenBelowThreeRejected) { EXPECT_THROW(encode("a", vocab_of({"a"}), 2), ConfigError); }

TEST(Encode, LengthLawForBothPresets) {
  const auto v = vocab_of({"a", "b", "##a", "##b", "ab"});
  std::mt19937_64 rng(3);
  for (std::size_t max_len : {100u, 75u}) {
    for (int i = 0; i < 200; ++i) {
      std::string text;
      const int words = static_cast<int>(rng() % 150);
      for (int w = 0; w < words; ++w) text += std::string(1 + rng() % 4, "abz"[rng() % 3]) + " ";
      const auto s = encode(text, v, max_len);
      ASSERT_EQ(s.ids.size(), max_len);
      ASSERT_EQ(s.mask.size(), max_len);
      EXPECT_EQ(s.ids[0], v.cls_id());
      const auto n = static_cast<std::size_t>(std::count(s.mask.begin(), s.mask.end(), 1));
      EXPECT_EQ(n, s.tokens.size());
      EXPECT_EQ(s.ids[n - 1], v.sep_id());
      for (std::size_t k = 0; k < max_len; ++k) {
        EXPECT_LT(s.ids[k], static_cast<int>(v.size()));
        EXPECT_EQ(s.mask[k] == 1, k < n);
        if (k >= n) EXPECT_EQ(s.ids[k], v.pad_id());
      }
    }
  }
}

TEST(Encode, InVocabTokensEncodeToThemselves) {
  const auto v = vocab_of({"kaam", "karna", "he", "pyar"});
  for (std::size_t id = 4; id < v.size(); ++id) {
    const auto s = encode(v.token(static_cast<int>(id)), v, 8);
    EXPECT_EQ(s.tokens.size(), 3u);
    EXPECT_EQ(s.ids[1], static_cast<int>(id));
  }
}

TEST(Encode, DetokenizationRoundTrip) {
  const auto v = vocab_of({"ka", "##am", "##rna", "he", "pyar", "##ar"});
  for (const std::string text : {"kaam karna he", "pyar", "he kaam", "kaam kaam pyar karna"}) {
    const auto s = encode(text, v, 32);
    EXPECT_EQ(decode_words(s, v), text::split_whitespace(text)) << text;
  }
}
