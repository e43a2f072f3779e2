#pragma once

// Contextual embedding backends behind one interface:
//   transformer  - BERT-style encoder over WordPiece ids
//   char_bilstm  - ELMo-style character CNN + two biLSTM layers, mixed by
//                  softmax-normalized scalar weights
//   static_word  - lookup table (hashed buckets when randomly initialized)
//   char_lm      - Flair-style character LSTM read in one direction
//   stacked      - column concatenation of component outputs per word
//
// random_tiny weights are seeded random initializations; pretrained_file
// weights are read from the layout documented in weights.hpp.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <unordered_map>
#include <string>
#include <vector>

#include "json.hpp"

#include "hsd/autodiff.hpp"
#include "hsd/error.hpp"
#include "hsd/lstm.hpp"
#include "hsd/text.hpp"
#include "hsd/tokenizer.hpp"
#include "hsd/weights.hpp"

namespace hsd {

enum class EmbedderKind { transformer, char_bilstm, stacked, static_word, char_lm };
enum class WeightSource { pretrained_file, random_tiny };
enum class Direction { forward, backward };

inline std::string to_string(EmbedderKind k) {
  switch (k) {
    case EmbedderKind::transformer: return "transformer";
    case EmbedderKind::char_bilstm: return "char_bilstm";
    case EmbedderKind::stacked: return "stacked";
    case EmbedderKind::static_word: return "static_word";
    case EmbedderKind::char_lm: return "char_lm";
  }
  return "?";
}

inline EmbedderKind parse_embedder_kind(const std::string& s) {
  for (auto k : {EmbedderKind::transformer, EmbedderKind::char_bilstm, EmbedderKind::stacked,
                 EmbedderKind::static_word, EmbedderKind::char_lm})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown embedder kind: " + s);
}

struct EmbedderSpec {
  EmbedderKind kind = EmbedderKind::transformer;
  std::size_t dim = 32;
  WeightSource weight_source = WeightSource::random_tiny;
  std::string weights;  // directory, or a name under $HSD_WEIGHTS_DIR
  std::vector<EmbedderSpec> components;
  bool trainable = false;
  std::uint64_t seed = 0;
  std::string name;

  // transformer
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ffn = 64;
  std::size_t max_positions = 128;
  // Emit one vector per word (its first WordPiece) instead of per token.
  bool word_pooling = false;
  // character models; char_bilstm dim = 2 * hidden, char_lm dim = hidden
  std::size_t hidden = 16;
  std::size_t char_dim = 8;
  std::vector<std::pair<std::size_t, std::size_t>> char_filters{{1, 8}, {2, 8}, {3, 16}};
  Direction direction = Direction::forward;
  // static_word, random init
  std::size_t buckets = 1024;

  std::string display_name() const { return name.empty() ? to_string(kind) : name; }

  void validate() const {
    if (dim == 0) throw ConfigError("embedder dim must be positive");
    if ((kind == EmbedderKind::stacked) != !components.empty())
      throw ConfigError("components must be non-empty exactly when kind is stacked");
    switch (kind) {
      case EmbedderKind::transformer:
        if (heads == 0 || dim % heads != 0)
          throw ConfigError("transformer dim " + std::to_string(dim) + " is not divisible by heads " +
                            std::to_string(heads));
        break;
      case EmbedderKind::char_bilstm:
        if (dim != 2 * hidden)
          throw ConfigError("char_bilstm dim must equal 2 * hidden (" + std::to_string(2 * hidden) + ")");
        if (char_filters.empty()) throw ConfigError("char_bilstm needs character filters");
        break;
      case EmbedderKind::char_lm:
        if (dim != hidden) throw ConfigError("char_lm dim must equal hidden");
        break;
      case EmbedderKind::static_word:
        if (buckets == 0) throw ConfigError("static_word needs at least one bucket");
        break;
      case EmbedderKind::stacked: {
        std::size_t total = 0;
        for (const auto& c : components) {
          c.validate();
          total += c.dim;
        }
        if (total != dim)
          throw ConfigError("stacked dim " + std::to_string(dim) + " differs from the sum of component dims " +
                            std::to_string(total));
        break;
      }
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"kind", to_string(kind)},
                     {"dim", dim},
                     {"weight_source", weight_source == WeightSource::random_tiny ? "random_tiny" : "pretrained_file"},
                     {"trainable", trainable},
                     {"seed", seed}};
    if (!weights.empty()) j["weights"] = weights;
    if (!name.empty()) j["name"] = name;
    switch (kind) {
      case EmbedderKind::transformer:
        j.update({{"layers", layers}, {"heads", heads}, {"ffn", ffn}, {"max_positions", max_positions},
                  {"word_pooling", word_pooling}});
        break;
      case EmbedderKind::char_bilstm:
        j.update({{"hidden", hidden}, {"char_dim", char_dim}, {"char_filters", char_filters}});
        break;
      case EmbedderKind::char_lm:
        j.update({{"hidden", hidden}, {"char_dim", char_dim},
                  {"direction", direction == Direction::forward ? "forward" : "backward"}});
        break;
      case EmbedderKind::static_word:
        j["buckets"] = buckets;
        break;
      case EmbedderKind::stacked:
        j["components"] = nlohmann::json::array();
        for (const auto& c : components) j["components"].push_back(c.to_json());
        break;
    }
    return j;
  }

  static EmbedderSpec from_json(const nlohmann::json& j) {
    EmbedderSpec s;
    s.kind = parse_embedder_kind(j.at("kind").get<std::string>());
    const std::string src = j.value("weight_source", "random_tiny");
    if (src == "random_tiny")
      s.weight_source = WeightSource::random_tiny;
    else if (src == "pretrained_file")
      s.weight_source = WeightSource::pretrained_file;
    else
      throw ConfigError("unknown weight_source: " + src);
    s.weights = j.value("weights", "");
    s.trainable = j.value("trainable", false);
    s.seed = j.value("seed", std::uint64_t{0});
    s.name = j.value("name", "");
    s.layers = j.value("layers", s.layers);
    s.heads = j.value("heads", s.heads);
    s.ffn = j.value("ffn", s.ffn);
    s.max_positions = j.value("max_positions", s.max_positions);
    s.word_pooling = j.value("word_pooling", s.word_pooling);
    s.hidden = j.value("hidden", s.hidden);
    s.char_dim = j.value("char_dim", s.char_dim);
    if (j.contains("char_filters")) s.char_filters = j.at("char_filters").get<decltype(s.char_filters)>();
    s.direction = j.value("direction", "forward") == "backward" ? Direction::backward : Direction::forward;
    s.buckets = j.value("buckets", s.buckets);
    if (j.contains("components"))
      for (const auto& c : j.at("components")) s.components.push_back(from_json(c));
    if (j.contains("dim")) {
      s.dim = j.at("dim").get<std::size_t>();
    } else if (s.kind == EmbedderKind::char_bilstm) {
      s.dim = 2 * s.hidden;
    } else if (s.kind == EmbedderKind::char_lm) {
      s.dim = s.hidden;
    } else if (s.kind == EmbedderKind::stacked) {
      s.dim = 0;
      for (const auto& c : s.components) s.dim += c.dim;
    }
    s.validate();
    return s;
  }

  // -- named configurations ------------------------------------------------

  static EmbedderSpec tiny_transformer(std::uint64_t seed = 0) {
    EmbedderSpec s;
    s.kind = EmbedderKind::transformer;
    s.dim = 32;
    s.layers = 2;
    s.heads = 2;
    s.ffn = 64;
    s.max_positions = 128;
    s.seed = seed;
    s.name = "transformer-tiny";
    return s;
  }

  static EmbedderSpec bert_base(std::string weights, std::string name) {
    EmbedderSpec s;
    s.kind = EmbedderKind::transformer;
    s.dim = 768;
    s.layers = 12;
    s.heads = 12;
    s.ffn = 3072;
    s.max_positions = 512;
    s.weight_source = WeightSource::pretrained_file;
    s.weights = std::move(weights);
    s.name = std::move(name);
    return s;
  }

  static EmbedderSpec tiny_char_bilstm(std::uint64_t seed = 0) {
    EmbedderSpec s;
    s.kind = EmbedderKind::char_bilstm;
    s.hidden = 16;
    s.dim = 32;
    s.char_dim = 8;
    s.char_filters = {{1, 8}, {2, 8}, {3, 16}};
    s.seed = seed;
    s.name = "char-bilstm-tiny";
    return s;
  }

  // ELMo-sized: two biLSTM layers of 512 per direction, 1024-wide output.
  static EmbedderSpec elmo(WeightSource source = WeightSource::pretrained_file, std::string weights = "elmo") {
    EmbedderSpec s;
    s.kind = EmbedderKind::char_bilstm;
    s.hidden = 512;
    s.dim = 1024;
    s.char_dim = 16;
    s.char_filters = {{1, 32}, {2, 32}, {3, 64}, {4, 128}, {5, 256}, {6, 512}, {7, 1024}};
    s.weight_source = source;
    s.weights = std::move(weights);
    s.name = "elmo";
    return s;
  }

  static EmbedderSpec static_word(std::size_t dim, std::uint64_t seed = 0) {
    EmbedderSpec s;
    s.kind = EmbedderKind::static_word;
    s.dim = dim;
    s.seed = seed;
    s.name = "word";
    return s;
  }

  static EmbedderSpec char_lm(std::size_t hidden, Direction dir, std::uint64_t seed = 0) {
    EmbedderSpec s;
    s.kind = EmbedderKind::char_lm;
    s.hidden = hidden;
    s.dim = hidden;
    s.char_dim = 8;
    s.direction = dir;
    s.seed = seed;
    s.name = dir == Direction::forward ? "char-lm-forward" : "char-lm-backward";
    return s;
  }

  static EmbedderSpec stacked(std::vector<EmbedderSpec> parts, std::string name = "stacked") {
    EmbedderSpec s;
    s.kind = EmbedderKind::stacked;
    s.dim = 0;
    for (const auto& p : parts) s.dim += p.dim;
    s.components = std::move(parts);
    s.name = std::move(name);
    return s;
  }

  // Hindi word embeddings + forward/backward character LMs.
  static EmbedderSpec flair_hi_stack(WeightSource source = WeightSource::pretrained_file) {
    auto word = static_word(300);
    word.weight_source = source;
    word.weights = "flair-hi-word";
    auto fwd = char_lm(2048, Direction::forward);
    fwd.char_dim = 100;
    fwd.weight_source = source;
    fwd.weights = "flair-hi-forward";
    auto bwd = char_lm(2048, Direction::backward);
    bwd.char_dim = 100;
    bwd.weight_source = source;
    bwd.weights = "flair-hi-backward";
    return stacked({word, fwd, bwd}, "flair-hi-stack");
  }

  static EmbedderSpec tiny_stack(std::uint64_t seed = 0) {
    return stacked({static_word(16, seed), char_lm(8, Direction::forward, seed + 1),
                    char_lm(8, Direction::backward, seed + 2)},
                   "stack-tiny");
  }
};

// Per-position vectors produced by an embedder.
struct EmbeddingMatrix {
  ad::Matrix vectors;
  std::size_t dim = 0;
  std::string backend_name;

  Eigen::Index rows() const { return vectors.rows(); }
};

inline EmbeddingMatrix to_embedding_matrix(const ad::Var& v, const EmbedderSpec& spec) {
  if (!v.value().allFinite()) throw Error(spec.display_name() + " produced non-finite values");
  if (static_cast<std::size_t>(v.cols()) != spec.dim)
    throw Error(spec.display_name() + " produced width " + std::to_string(v.cols()) + ", declared " +
                std::to_string(spec.dim));
  return {v.value(), spec.dim, spec.display_name()};
}

inline std::filesystem::path resolve_weights_dir(const EmbedderSpec& spec) {
  if (spec.weights.empty())
    throw ConfigError(spec.display_name() + ": pretrained_file source needs a weights path; " + weights::kLayoutHelp);
  std::filesystem::path p(spec.weights);
  if (p.is_absolute() || std::filesystem::exists(p)) return p;
  if (const char* root = std::getenv("HSD_WEIGHTS_DIR"); root && *root) return std::filesystem::path(root) / p;
  return p;
}

class Embedder {
 public:
  explicit Embedder(EmbedderSpec spec) : spec_(std::move(spec)) {}
  virtual ~Embedder() = default;
  Embedder(const Embedder&) = delete;
  Embedder& operator=(const Embedder&) = delete;

  const EmbedderSpec& spec() const { return spec_; }

  // True when the output is one row per WordPiece position rather than per word.
  virtual bool token_level() const { return false; }

  virtual ad::Var forward_tokens(const TokenSequence&) const {
    throw ConfigError(spec_.display_name() + " does not consume token sequences");
  }
  virtual ad::Var forward_words(std::span<const std::string> words) const = 0;
  virtual ad::Params params() const = 0;

  // Extra non-tensor state (e.g. a word list) stored next to the tensors.
  virtual void save_aux(const std::filesystem::path&, const std::string&) const {}
  virtual void load_aux(const std::filesystem::path&, const std::string&) {}

 protected:
  EmbedderSpec spec_;
};

namespace detail {

constexpr int kCharBow = 256;
constexpr int kCharEow = 257;
constexpr int kCharPad = 258;
constexpr int kCharVocab = 259;
constexpr std::size_t kMaxWordBytes = 50;

inline std::vector<int> word_chars(std::string_view word, std::size_t min_len) {
  std::vector<int> ids{kCharBow};
  for (std::size_t i = 0; i < word.size() && i < kMaxWordBytes; ++i)
    ids.push_back(static_cast<unsigned char>(word[i]));
  ids.push_back(kCharEow);
  while (ids.size() < min_len) ids.push_back(kCharPad);
  return ids;
}

}  // namespace detail

// ---------------------------------------------------------------------------

class TransformerEmbedder final : public Embedder {
 public:
  TransformerEmbedder(EmbedderSpec spec, std::shared_ptr<const Vocabulary> vocab)
      : Embedder(std::move(spec)), vocab_(std::move(vocab)) {
    if (!vocab_) throw ConfigError("transformer embedder needs a vocabulary");
    std::mt19937_64 rng(spec_.seed);
    const auto d = static_cast<Eigen::Index>(spec_.dim);
    const auto f = static_cast<Eigen::Index>(spec_.ffn);
    auto normal = [&](Eigen::Index r, Eigen::Index c) { return ad::parameter(nn::random_matrix(r, c, 0.02, rng)); };
    auto zeros = [](Eigen::Index r, Eigen::Index c) { return ad::parameter(ad::Matrix::Zero(r, c)); };
    auto ones = [](Eigen::Index c) { return ad::parameter(ad::Matrix::Ones(1, c)); };
    token_emb_ = ad::parameter(nn::random_matrix(static_cast<Eigen::Index>(vocab_->size()), d, 1.0, rng));
    pos_emb_ = normal(static_cast<Eigen::Index>(spec_.max_positions), d);
    ln_g_ = ones(d);
    ln_b_ = zeros(1, d);
    for (std::size_t l = 0; l < spec_.layers; ++l) {
      Layer layer;
      layer.wq = normal(d, d);
      layer.wk = normal(d, d);
      layer.wv = normal(d, d);
      layer.wo = normal(d, d);
      layer.bq = zeros(1, d);
      layer.bk = zeros(1, d);
      layer.bv = zeros(1, d);
      layer.bo = zeros(1, d);
      layer.ln1_g = ones(d);
      layer.ln1_b = zeros(1, d);
      layer.w1 = normal(d, f);
      layer.b1 = zeros(1, f);
      layer.w2 = normal(f, d);
      layer.b2 = zeros(1, d);
      layer.ln2_g = ones(d);
      layer.ln2_b = zeros(1, d);
      layers_.push_back(std::move(layer));
    }
  }

  bool token_level() const override { return !spec_.word_pooling; }

  ad::Var forward_tokens(const TokenSequence& seq) const override {
    return encode_ids(seq.ids, seq.mask);
  }

  // Word-level vectors taken at each word's first WordPiece.
  ad::Var forward_words(std::span<const std::string> words) const override {
    std::vector<int> ids{vocab_->cls_id()};
    std::vector<int> starts;
    for (const auto& w : words) {
      starts.push_back(static_cast<int>(ids.size()));
      for (const auto& piece : wordpiece_tokenize(w, *vocab_)) ids.push_back(vocab_->id(piece));
    }
    ids.push_back(vocab_->sep_id());
    const std::vector<int> mask(ids.size(), 1);
    return ad::gather_rows(encode_ids(ids, mask), starts);
  }

  ad::Params params() const override {
    ad::Params p{{"tok_emb", token_emb_}, {"pos_emb", pos_emb_}, {"emb_ln.g", ln_g_}, {"emb_ln.b", ln_b_}};
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& L = layers_[l];
      const std::string pre = "layer" + std::to_string(l) + ".";
      for (const auto& [n, v] : std::initializer_list<std::pair<const char*, ad::Var>>{
               {"q.W", L.wq}, {"q.b", L.bq}, {"k.W", L.wk}, {"k.b", L.bk}, {"v.W", L.wv}, {"v.b", L.bv},
               {"o.W", L.wo}, {"o.b", L.bo}, {"ln1.g", L.ln1_g}, {"ln1.b", L.ln1_b}, {"ffn1.W", L.w1},
               {"ffn1.b", L.b1}, {"ffn2.W", L.w2}, {"ffn2.b", L.b2}, {"ln2.g", L.ln2_g}, {"ln2.b", L.ln2_b}})
        p.push_back({pre + n, v});
    }
    return p;
  }

  const Vocabulary& vocabulary() const { return *vocab_; }

 private:
  struct Layer {
    ad::Var wq, wk, wv, wo, bq, bk, bv, bo, ln1_g, ln1_b, w1, b1, w2, b2, ln2_g, ln2_b;
  };

  ad::Var encode_ids(const std::vector<int>& ids, const std::vector<int>& mask) const {
    const auto t = static_cast<Eigen::Index>(ids.size());
    if (ids.size() > spec_.max_positions)
      throw DataError("sequence length " + std::to_string(ids.size()) + " exceeds positional capacity " +
                      std::to_string(spec_.max_positions) + " of " + spec_.display_name());
    std::vector<int> positions(ids.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
    for (int id : ids)
      if (id < 0 || id >= token_emb_.rows())
        throw DataError("token id " + std::to_string(id) + " outside embedding table of " + spec_.display_name());

    ad::Var x = ad::add(ad::gather_rows(token_emb_, ids), ad::gather_rows(pos_emb_, positions));
    x = ad::layer_norm(x, ln_g_, ln_b_);

    // additive key mask: pad keys get a large negative score
    ad::Matrix key_bias = ad::Matrix::Zero(t, t);
    for (Eigen::Index j = 0; j < t; ++j)
      if (!mask[static_cast<std::size_t>(j)]) key_bias.col(j).setConstant(-1e9);

    const auto d = static_cast<Eigen::Index>(spec_.dim);
    const auto heads = static_cast<Eigen::Index>(spec_.heads);
    const Eigen::Index dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (const auto& L : layers_) {
      const ad::Var q = ad::add_row(ad::matmul(x, L.wq), L.bq);
      const ad::Var k = ad::add_row(ad::matmul(x, L.wk), L.bk);
      const ad::Var v = ad::add_row(ad::matmul(x, L.wv), L.bv);
      std::vector<ad::Var> head_out;
      for (Eigen::Index h = 0; h < heads; ++h) {
        const ad::Var qh = ad::slice_cols(q, h * dh, dh);
        const ad::Var kh = ad::slice_cols(k, h * dh, dh);
        const ad::Var vh = ad::slice_cols(v, h * dh, dh);
        ad::Var scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt);
        scores = ad::add_constant(scores, key_bias);
        head_out.push_back(ad::matmul(ad::softmax_rows(scores), vh));
      }
      const ad::Var attn = ad::add_row(ad::matmul(ad::concat_cols(head_out), L.wo), L.bo);
      x = ad::layer_norm(ad::add(x, attn), L.ln1_g, L.ln1_b);
      const ad::Var ff = ad::add_row(ad::matmul(ad::gelu(ad::add_row(ad::matmul(x, L.w1), L.b1)), L.w2), L.b2);
      x = ad::layer_norm(ad::add(x, ff), L.ln2_g, L.ln2_b);
    }
    return x;
  }

  std::shared_ptr<const Vocabulary> vocab_;
  ad::Var token_emb_, pos_emb_, ln_g_, ln_b_;
  std::vector<Layer> layers_;
};

// ---------------------------------------------------------------------------

class CharBiLstmEmbedder final : public Embedder {
 public:
  explicit CharBiLstmEmbedder(EmbedderSpec spec) : Embedder(std::move(spec)) {
    std::mt19937_64 rng(spec_.seed);
    const auto cd = static_cast<Eigen::Index>(spec_.char_dim);
    const auto d = static_cast<Eigen::Index>(spec_.dim);
    const auto h = static_cast<Eigen::Index>(spec_.hidden);
    char_emb_ = ad::parameter(nn::random_matrix(detail::kCharVocab, cd, 1.0, rng));
    Eigen::Index total = 0;
    for (auto [width, count] : spec_.char_filters) {
      const auto w = static_cast<Eigen::Index>(width), c = static_cast<Eigen::Index>(count);
      filters_.push_back({w, ad::parameter(nn::random_matrix(w * cd, c, 1.0 / std::sqrt(double(w * cd)), rng)),
                          ad::parameter(ad::Matrix::Zero(1, c))});
      total += c;
      max_width_ = std::max(max_width_, static_cast<std::size_t>(width));
    }
    proj_w_ = ad::parameter(nn::random_matrix(total, d, 1.0 / std::sqrt(double(total)), rng));
    proj_b_ = ad::parameter(ad::Matrix::Zero(1, d));
    for (int layer = 0; layer < 2; ++layer) {
      forward_[layer] = nn::make_lstm(d, h, rng);
      backward_[layer] = nn::make_lstm(d, h, rng);
    }
    mix_ = ad::parameter(ad::Matrix::Zero(1, 3));
  }

  ad::Var forward_words(std::span<const std::string> words) const override {
    if (words.empty()) throw DataError(spec_.display_name() + ": empty word list");
    const auto reps = representations(words);
    const ad::Var w = ad::softmax_rows(mix_);
    ad::Var out = ad::scale_by(reps[0], ad::slice_cols(w, 0, 1));
    for (Eigen::Index j = 1; j < 3; ++j)
      out = ad::add(out, ad::scale_by(reps[static_cast<std::size_t>(j)], ad::slice_cols(w, j, 1)));
    return out;
  }

  // [character input projection, biLSTM layer 1, biLSTM layer 2], each n x dim.
  std::vector<ad::Var> representations(std::span<const std::string> words) const {
    std::vector<ad::Var> rows;
    for (const auto& w : words) rows.push_back(word_vector(w));
    const ad::Var x = ad::concat_rows(rows);
    const ad::Var l1 = bilstm(x, 0);
    const ad::Var l2 = bilstm(l1, 1);
    return {x, l1, l2};
  }

  // Normalized layer-combination weights (sum to 1).
  ad::Matrix layer_weights() const { return ad::softmax_rows_value(mix_.value()); }

  ad::Params params() const override {
    ad::Params p{{"char_emb", char_emb_}};
    for (std::size_t i = 0; i < filters_.size(); ++i) {
      p.push_back({"conv" + std::to_string(i) + ".W", filters_[i].weight});
      p.push_back({"conv" + std::to_string(i) + ".b", filters_[i].bias});
    }
    p.push_back({"proj.W", proj_w_});
    p.push_back({"proj.b", proj_b_});
    for (int layer = 0; layer < 2; ++layer) {
      forward_[layer].append_to(p, "lstm" + std::to_string(layer) + ".fwd");
      backward_[layer].append_to(p, "lstm" + std::to_string(layer) + ".bwd");
    }
    p.push_back({"mix", mix_});
    return p;
  }

 private:
  struct Filter {
    Eigen::Index width;
    ad::Var weight, bias;
  };

  ad::Var word_vector(const std::string& word) const {
    const auto ids = detail::word_chars(word, max_width_);
    const ad::Var chars = ad::gather_rows(char_emb_, ids);
    std::vector<ad::Var> pooled;
    for (const auto& f : filters_) {
      const ad::Var conv = ad::relu(ad::add_row(ad::matmul(ad::unfold_rows(chars, f.width), f.weight), f.bias));
      pooled.push_back(ad::max_rows(conv, std::vector<bool>(static_cast<std::size_t>(conv.rows()), true)));
    }
    return ad::add_row(ad::matmul(ad::concat_cols(pooled), proj_w_), proj_b_);
  }

  ad::Var bilstm(const ad::Var& x, int layer) const {
    const auto fwd = nn::run_lstm(x, forward_[layer], false);
    const auto bwd = nn::run_lstm(x, backward_[layer], true);
    std::vector<ad::Var> rows;
    for (std::size_t t = 0; t < fwd.size(); ++t) rows.push_back(ad::concat_cols({fwd[t], bwd[t]}));
    return ad::concat_rows(rows);
  }

  ad::Var char_emb_, proj_w_, proj_b_, mix_;
  std::vector<Filter> filters_;
  std::size_t max_width_ = 1;
  nn::LstmWeights forward_[2], backward_[2];
};

// ---------------------------------------------------------------------------

class StaticWordEmbedder final : public Embedder {
 public:
  explicit StaticWordEmbedder(EmbedderSpec spec) : Embedder(std::move(spec)) {
    std::mt19937_64 rng(spec_.seed);
    table_ = ad::parameter(nn::random_matrix(static_cast<Eigen::Index>(spec_.buckets),
                                             static_cast<Eigen::Index>(spec_.dim), 0.1, rng));
  }

  ad::Var forward_words(std::span<const std::string> words) const override {
    std::vector<int> rows;
    for (const auto& w : words) rows.push_back(row_of(w));
    return ad::gather_rows(table_, rows);
  }

  ad::Params params() const override { return {{"table", table_}}; }

  // With a word list, row i embeds words[i] and the last row is the
  // unknown-word vector; without one, words hash into buckets.
  void set_words(std::vector<std::string> words, Eigen::Index rows) {
    words_.clear();
    for (std::size_t i = 0; i < words.size(); ++i) words_.emplace(words[i], static_cast<int>(i));
    word_list_ = std::move(words);
    table_.mutable_value() = ad::Matrix::Zero(rows, static_cast<Eigen::Index>(spec_.dim));
  }

  void save_aux(const std::filesystem::path& dir, const std::string& prefix) const override {
    if (word_list_.empty()) return;
    std::ofstream out(dir / (prefix + "words.txt"));
    for (const auto& w : word_list_) out << w << '\n';
  }

  void load_aux(const std::filesystem::path& dir, const std::string& prefix) override {
    const auto path = dir / (prefix + "words.txt");
    if (!std::filesystem::exists(path)) return;
    std::ifstream in(path);
    std::vector<std::string> words;
    for (std::string line; std::getline(in, line);) words.push_back(line);
    const auto rows = static_cast<Eigen::Index>(words.size()) + 1;
    set_words(std::move(words), rows);
  }

 private:
  int row_of(const std::string& w) const {
    if (!word_list_.empty()) {
      const auto it = words_.find(w);
      return it == words_.end() ? static_cast<int>(table_.rows() - 1) : it->second;
    }
    return static_cast<int>(text::fnv1a(w) % static_cast<std::uint64_t>(table_.rows()));
  }

  ad::Var table_;
  std::vector<std::string> word_list_;
  std::unordered_map<std::string, int> words_;
};

// ---------------------------------------------------------------------------

class CharLmEmbedder final : public Embedder {
 public:
  explicit CharLmEmbedder(EmbedderSpec spec) : Embedder(std::move(spec)) {
    std::mt19937_64 rng(spec_.seed);
    char_emb_ = ad::parameter(nn::random_matrix(detail::kCharVocab, static_cast<Eigen::Index>(spec_.char_dim), 1.0, rng));
    lstm_ = nn::make_lstm(static_cast<Eigen::Index>(spec_.char_dim), static_cast<Eigen::Index>(spec_.hidden), rng);
  }

  // The sentence is read as "\n" + words joined by spaces + " ". A word's
  // vector is the state after the space that follows it (forward) or
  // precedes it (backward), so each vector has seen the whole word.
  ad::Var forward_words(std::span<const std::string> words) const override {
    if (words.empty()) throw DataError(spec_.display_name() + ": empty word list");
    std::vector<int> ids{'\n'};
    std::vector<std::pair<std::size_t, std::size_t>> spans;  // [begin, end) byte indices
    for (std::size_t i = 0; i < words.size(); ++i) {
      if (i) ids.push_back(' ');
      const std::size_t begin = ids.size();
      for (unsigned char c : words[i]) ids.push_back(c);
      spans.emplace_back(begin, ids.size());
    }
    ids.push_back(' ');
    const ad::Var x = ad::gather_rows(char_emb_, ids);
    const bool reverse = spec_.direction == Direction::backward;
    const auto states = nn::run_lstm(x, lstm_, reverse);
    std::vector<ad::Var> rows;
    for (const auto& [begin, end] : spans) rows.push_back(states[reverse ? begin - 1 : end]);
    return ad::concat_rows(rows);
  }

  ad::Params params() const override {
    ad::Params p{{"char_emb", char_emb_}};
    lstm_.append_to(p, "lstm");
    return p;
  }

 private:
  ad::Var char_emb_;
  nn::LstmWeights lstm_;
};

// ---------------------------------------------------------------------------

class StackedEmbedder final : public Embedder {
 public:
  StackedEmbedder(EmbedderSpec spec, std::vector<std::unique_ptr<Embedder>> parts)
      : Embedder(std::move(spec)), parts_(std::move(parts)) {}

  ad::Var forward_words(std::span<const std::string> words) const override {
    std::vector<ad::Var> blocks;
    for (const auto& p : parts_) blocks.push_back(p->forward_words(words));
    return ad::concat_cols(blocks);
  }

  ad::Params params() const override {
    ad::Params out;
    for (std::size_t i = 0; i < parts_.size(); ++i)
      for (auto& p : parts_[i]->params()) out.push_back({"c" + std::to_string(i) + "." + p.name, p.var});
    return out;
  }

  void save_aux(const std::filesystem::path& dir, const std::string& prefix) const override {
    for (std::size_t i = 0; i < parts_.size(); ++i) parts_[i]->save_aux(dir, prefix + "c" + std::to_string(i) + ".");
  }
  void load_aux(const std::filesystem::path& dir, const std::string& prefix) override {
    for (std::size_t i = 0; i < parts_.size(); ++i) parts_[i]->load_aux(dir, prefix + "c" + std::to_string(i) + ".");
  }

  const Embedder& component(std::size_t i) const { return *parts_.at(i); }
  std::size_t component_count() const { return parts_.size(); }

 private:
  std::vector<std::unique_ptr<Embedder>> parts_;
};

// ---------------------------------------------------------------------------

// Writes the embedder's tensors (and any word list) to `dir`.
inline void save_embedder(const Embedder& e, const std::filesystem::path& dir) {
  weights::save(dir, e.spec().to_json(), e.params());
  e.save_aux(dir, "");
}

// Replaces the embedder's tensors with those stored in `dir`.
inline void load_embedder_state(Embedder& e, const std::filesystem::path& dir) {
  e.load_aux(dir, "");
  const auto bundle = weights::load(dir);
  auto params = e.params();
  weights::assign(params, bundle, dir.string());
}

// Throws DataError with the expected layout when any pretrained component's
// weights are missing. Returns the directory for a non-stacked spec.
inline std::filesystem::path require_pretrained_weights(const EmbedderSpec& spec) {
  for (const auto& c : spec.components) require_pretrained_weights(c);
  if (spec.kind == EmbedderKind::stacked || spec.weight_source != WeightSource::pretrained_file) return {};
  const auto dir = resolve_weights_dir(spec);
  if (!std::filesystem::exists(dir / "manifest.json"))
    throw DataError(spec.display_name() + ": pretrained weights not found at '" + dir.string() + "'; " +
                    weights::kLayoutHelp + " (set HSD_WEIGHTS_DIR or an absolute weights path)");
  return dir;
}

inline std::unique_ptr<Embedder> make_embedder(const EmbedderSpec& spec,
                                               std::shared_ptr<const Vocabulary> vocab = nullptr) {
  spec.validate();
  std::optional<std::filesystem::path> pretrained;
  if (spec.kind != EmbedderKind::stacked && spec.weight_source == WeightSource::pretrained_file)
    pretrained = require_pretrained_weights(spec);
  std::unique_ptr<Embedder> e;
  switch (spec.kind) {
    case EmbedderKind::transformer:
      e = std::make_unique<TransformerEmbedder>(spec, vocab);
      break;
    case EmbedderKind::char_bilstm:
      e = std::make_unique<CharBiLstmEmbedder>(spec);
      break;
    case EmbedderKind::static_word:
      e = std::make_unique<StaticWordEmbedder>(spec);
      break;
    case EmbedderKind::char_lm:
      e = std::make_unique<CharLmEmbedder>(spec);
      break;
    case EmbedderKind::stacked: {
      std::vector<std::unique_ptr<Embedder>> parts;
      for (const auto& c : spec.components) parts.push_back(make_embedder(c, vocab));
      return std::make_unique<StackedEmbedder>(spec, std::move(parts));
    }
  }
  if (pretrained) load_embedder_state(*e, *pretrained);
  return e;
}

// ---------------------------------------------------------------------------
// Spec-level entry points

inline EmbeddingMatrix embed_transformer(const TokenSequence& seq, const Embedder& e) {
  if (e.spec().kind != EmbedderKind::transformer) throw ConfigError("embed_transformer needs a transformer embedder");
  return to_embedding_matrix(e.forward_tokens(seq), e.spec());
}

inline EmbeddingMatrix embed_char_bilstm(std::span<const std::string> words, const Embedder& e) {
  if (e.spec().kind != EmbedderKind::char_bilstm) throw ConfigError("embed_char_bilstm needs a char_bilstm embedder");
  if (words.empty()) throw DataError("embed_char_bilstm: empty word list");
  return to_embedding_matrix(e.forward_words(words), e.spec());
}

inline EmbeddingMatrix embed_stacked(std::span<const std::string> words, const Embedder& e) {
  if (e.spec().kind != EmbedderKind::stacked) throw ConfigError("embed_stacked needs a stacked embedder");
  return to_embedding_matrix(e.forward_words(words), e.spec());
}

// What a classifier head sees for one text.
struct EmbedInput {
  TokenSequence tokens;  // filled for token-level embedders
  std::vector<std::string> words;
};

inline EmbedInput prepare_input(std::string_view processed_text, const Embedder& e, const Vocabulary* vocab,
                                std::size_t max_len) {
  EmbedInput in;
  if (e.token_level()) {
    if (!vocab) throw ConfigError("token-level embedder needs a vocabulary");
    in.tokens = encode(processed_text, *vocab, max_len);
  }
  in.words = text::split_whitespace(processed_text);
  if (in.words.size() > max_len) in.words.resize(max_len);
  return in;
}

struct PaddedEmbedding {
  ad::Var matrix;            // max_len x dim
  std::vector<double> mask;  // 1 on real positions
};

// Text emptied by preprocessing is embedded as this single placeholder word.
inline constexpr const char* kEmptyWord = "<empty>";

inline PaddedEmbedding embed_padded(const Embedder& e, const EmbedInput& in, std::size_t max_len) {
  PaddedEmbedding out;
  if (e.token_level()) {
    out.matrix = e.forward_tokens(in.tokens);
    out.mask.assign(in.tokens.mask.begin(), in.tokens.mask.end());
    return out;
  }
  static const std::vector<std::string> placeholder{kEmptyWord};
  const auto& words = in.words.empty() ? placeholder : in.words;
  ad::Var m = e.forward_words(words);
  const auto n = m.rows();
  const auto pad = static_cast<Eigen::Index>(max_len) - n;
  if (pad > 0) m = ad::concat_rows({m, ad::constant(ad::Matrix::Zero(pad, m.cols()))});
  out.matrix = m;
  out.mask.assign(max_len, 0.0);
  for (Eigen::Index i = 0; i < n && i < static_cast<Eigen::Index>(max_len); ++i) out.mask[static_cast<std::size_t>(i)] = 1.0;
  return out;
}

}  // namespace hsd
