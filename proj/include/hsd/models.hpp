#pragma once

// Classifier heads over padded embedding matrices and the training loop.
//
// All heads take an (max_len x dim) matrix plus a 0/1 mask. Rows whose mask
// is 0 never enter the computation: heads first gather the valid rows, so
// pad contents cannot change any output bit.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "hsd/autodiff.hpp"
#include "hsd/corpus.hpp"
#include "hsd/embeddings.hpp"
#include "hsd/error.hpp"
#include "hsd/lstm.hpp"
#include "hsd/preprocess.hpp"
#include "hsd/tokenizer.hpp"
#include "hsd/weights.hpp"

namespace hsd {

enum class HeadKind { cnn, mlp, bilstm };

inline std::string to_string(HeadKind k) {
  switch (k) {
    case HeadKind::cnn: return "cnn";
    case HeadKind::mlp: return "mlp";
    case HeadKind::bilstm: return "bilstm";
  }
  return "?";
}

inline HeadKind parse_head_kind(const std::string& s) {
  if (s == "cnn") return HeadKind::cnn;
  if (s == "mlp") return HeadKind::mlp;
  if (s == "bilstm") return HeadKind::bilstm;
  throw ConfigError("unknown head: " + s + " (expected cnn, mlp or bilstm)");
}

struct ClassifierConfig {
  HeadKind head = HeadKind::cnn;
  std::size_t num_classes = 2;
  double learning_rate = 1e-3;
  std::string optimizer = "adam";
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  std::size_t max_len = 100;
  std::size_t batch_size = 32;
  std::vector<std::pair<std::size_t, std::size_t>> cnn_filters{{2, 2}, {3, 2}, {4, 2}};
  std::vector<std::size_t> mlp_hidden{64};
  std::size_t bilstm_hidden = 32;
  bool train_embedder = false;

  std::size_t total_filters() const {
    std::size_t n = 0;
    for (const auto& f : cnn_filters) n += f.second;
    return n;
  }

  std::size_t largest_filter() const {
    std::size_t w = 0;
    for (const auto& f : cnn_filters) w = std::max(w, f.first);
    return w;
  }

  bool standard_learning_rate() const {
    for (double lr : {1e-3, 1e-4, 1e-5})
      if (std::abs(learning_rate - lr) <= 1e-12) return true;
    return false;
  }

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
      throw ValidationError("learning_rate", "learning_rate must be a positive number");
    if (optimizer != "adam") throw ValidationError("optimizer", "unsupported optimizer: " + optimizer);
    if (num_classes < 2) throw ValidationError("num_classes", "num_classes must be at least 2");
    if (max_len == 0) throw ValidationError("max_len", "max_len must be positive");
    if (batch_size == 0) throw ValidationError("batch_size", "batch_size must be positive");
    if (head == HeadKind::cnn) {
      if (cnn_filters.empty()) throw ValidationError("cnn_filters", "cnn head needs at least one filter group");
      for (const auto& [w, c] : cnn_filters)
        if (w == 0 || c == 0) throw ValidationError("cnn_filters", "filter widths and counts must be positive");
      if (max_len < largest_filter())
        throw ValidationError("max_len", "max_len " + std::to_string(max_len) + " is smaller than filter width " +
                                             std::to_string(largest_filter()));
    }
    if (head == HeadKind::mlp)
      for (auto h : mlp_hidden)
        if (h == 0) throw ValidationError("mlp_hidden", "hidden sizes must be positive");
    if (head == HeadKind::bilstm && bilstm_hidden == 0)
      throw ValidationError("bilstm_hidden", "bilstm_hidden must be positive");
  }

  nlohmann::json to_json() const {
    return {{"head", to_string(head)},           {"num_classes", num_classes}, {"learning_rate", learning_rate},
            {"optimizer", optimizer},            {"epochs", epochs},           {"seed", seed},
            {"max_len", max_len},                {"batch_size", batch_size},   {"cnn_filters", cnn_filters},
            {"mlp_hidden", mlp_hidden},          {"bilstm_hidden", bilstm_hidden},
            {"train_embedder", train_embedder}};
  }

  static ClassifierConfig from_json(const nlohmann::json& j) {
    ClassifierConfig c;
    try {
      c.head = parse_head_kind(j.value("head", "cnn"));
      c.num_classes = j.value("num_classes", c.num_classes);
      c.learning_rate = j.value("learning_rate", c.learning_rate);
      c.optimizer = j.value("optimizer", c.optimizer);
      c.epochs = j.value("epochs", c.epochs);
      c.seed = j.value("seed", c.seed);
      c.max_len = j.value("max_len", c.max_len);
      c.batch_size = j.value("batch_size", c.batch_size);
      if (j.contains("cnn_filters")) c.cnn_filters = j.at("cnn_filters").get<decltype(c.cnn_filters)>();
      if (j.contains("mlp_hidden")) c.mlp_hidden = j.at("mlp_hidden").get<decltype(c.mlp_hidden)>();
      c.bilstm_hidden = j.value("bilstm_hidden", c.bilstm_hidden);
      c.train_embedder = j.value("train_embedder", c.train_embedder);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("bad classifier config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Head parameters

struct CnnParams {
  struct Group {
    Eigen::Index width;
    ad::Var weight;  // (width * dim) x count
    ad::Var bias;    // 1 x count
  };
  std::vector<Group> groups;
  ad::Var out_w;  // total_filters x classes
  ad::Var out_b;
};

struct MlpParams {
  std::vector<std::pair<ad::Var, ad::Var>> hidden;
  ad::Var out_w;
  ad::Var out_b;
};

struct BilstmParams {
  nn::LstmWeights forward;
  nn::LstmWeights backward;
  ad::Var out_w;  // 2H x classes
  ad::Var out_b;
};

using HeadParams = std::variant<CnnParams, MlpParams, BilstmParams>;

inline HeadParams make_head(const ClassifierConfig& cfg, std::size_t dim, std::mt19937_64& rng) {
  const auto d = static_cast<Eigen::Index>(dim);
  const auto k = static_cast<Eigen::Index>(cfg.num_classes);
  auto glorot = [&](Eigen::Index in, Eigen::Index out) {
    return ad::parameter(nn::random_matrix(in, out, std::sqrt(2.0 / static_cast<double>(in + out)), rng));
  };
  auto zeros = [](Eigen::Index c) { return ad::parameter(ad::Matrix::Zero(1, c)); };
  // output layers start near zero so the initial prediction is close to uniform
  auto small = [&](Eigen::Index in, Eigen::Index out) { return ad::parameter(nn::random_matrix(in, out, 0.01, rng)); };
  switch (cfg.head) {
    case HeadKind::cnn: {
      CnnParams p;
      for (const auto& [w, c] : cfg.cnn_filters) {
        const auto wi = static_cast<Eigen::Index>(w), ci = static_cast<Eigen::Index>(c);
        p.groups.push_back({wi, glorot(wi * d, ci), zeros(ci)});
      }
      p.out_w = small(static_cast<Eigen::Index>(cfg.total_filters()), k);
      p.out_b = zeros(k);
      return p;
    }
    case HeadKind::mlp: {
      MlpParams p;
      Eigen::Index in = d;
      for (auto h : cfg.mlp_hidden) {
        const auto hi = static_cast<Eigen::Index>(h);
        p.hidden.emplace_back(glorot(in, hi), zeros(hi));
        in = hi;
      }
      p.out_w = small(in, k);
      p.out_b = zeros(k);
      return p;
    }
    case HeadKind::bilstm: {
      BilstmParams p;
      const auto h = static_cast<Eigen::Index>(cfg.bilstm_hidden);
      p.forward = nn::make_lstm(d, h, rng);
      p.backward = nn::make_lstm(d, h, rng);
      p.out_w = small(2 * h, k);
      p.out_b = zeros(k);
      return p;
    }
  }
  throw ConfigError("unknown head");
}

inline ad::Params head_params(const HeadParams& head) {
  ad::Params out;
  if (const auto* c = std::get_if<CnnParams>(&head)) {
    for (std::size_t i = 0; i < c->groups.size(); ++i) {
      out.push_back({"conv" + std::to_string(i) + ".W", c->groups[i].weight});
      out.push_back({"conv" + std::to_string(i) + ".b", c->groups[i].bias});
    }
    out.push_back({"out.W", c->out_w});
    out.push_back({"out.b", c->out_b});
  } else if (const auto* m = std::get_if<MlpParams>(&head)) {
    for (std::size_t i = 0; i < m->hidden.size(); ++i) {
      out.push_back({"hidden" + std::to_string(i) + ".W", m->hidden[i].first});
      out.push_back({"hidden" + std::to_string(i) + ".b", m->hidden[i].second});
    }
    out.push_back({"out.W", m->out_w});
    out.push_back({"out.b", m->out_b});
  } else {
    const auto& b = std::get<BilstmParams>(head);
    b.forward.append_to(out, "lstm.fwd");
    b.backward.append_to(out, "lstm.bwd");
    out.push_back({"out.W", b.out_w});
    out.push_back({"out.b", b.out_b});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward passes; *_logits return 1 x classes scores, forward_* softmax them.

namespace detail {

inline std::vector<int> valid_rows(const ad::Var& emb, std::span<const double> mask) {
  if (mask.size() != static_cast<std::size_t>(emb.rows()))
    throw Error("mask length " + std::to_string(mask.size()) + " does not match " + std::to_string(emb.rows()) +
                " embedding rows");
  std::vector<int> rows;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i] != 0.0) rows.push_back(static_cast<int>(i));
  if (rows.empty()) throw DataError("sequence has no unmasked positions");
  return rows;
}

}  // namespace detail

inline ad::Var cnn_logits(const ad::Var& emb, std::span<const double> mask, const CnnParams& p) {
  const auto rows = detail::valid_rows(emb, mask);
  const Eigen::Index t = emb.rows();
  const auto n_valid = static_cast<Eigen::Index>(rows.size());
  // valid rows first, pad rows as exact zeros
  ad::Var x = ad::gather_rows(emb, rows);
  if (n_valid < t) x = ad::concat_rows({x, ad::constant(ad::Matrix::Zero(t - n_valid, emb.cols()))});
  std::vector<ad::Var> pooled;
  for (const auto& g : p.groups) {
    if (g.width > t)
      throw ValidationError("max_len", "sequence length " + std::to_string(t) + " is smaller than filter width " +
                                           std::to_string(g.width));
    const ad::Var conv = ad::relu(ad::add_row(ad::matmul(ad::unfold_rows(x, g.width), g.weight), g.bias));
    std::vector<bool> starts(static_cast<std::size_t>(conv.rows()), false);
    for (Eigen::Index i = 0; i < conv.rows() && i < n_valid; ++i) starts[static_cast<std::size_t>(i)] = true;
    pooled.push_back(ad::max_rows(conv, starts));
  }
  return ad::add_row(ad::matmul(ad::concat_cols(pooled), p.out_w), p.out_b);
}

inline ad::Var mlp_logits(const ad::Var& emb, std::span<const double> mask, const MlpParams& p) {
  const auto rows = detail::valid_rows(emb, mask);
  const ad::Var x = ad::gather_rows(emb, rows);
  const ad::Var mean = ad::matmul(
      ad::constant(ad::Matrix::Constant(1, x.rows(), 1.0 / static_cast<double>(x.rows()))), x);
  ad::Var h = mean;
  for (const auto& [w, b] : p.hidden) h = ad::relu(ad::add_row(ad::matmul(h, w), b));
  return ad::add_row(ad::matmul(h, p.out_w), p.out_b);
}

inline ad::Var bilstm_logits(const ad::Var& emb, std::span<const double> mask, const BilstmParams& p) {
  const auto rows = detail::valid_rows(emb, mask);
  const ad::Var x = ad::gather_rows(emb, rows);
  const auto fwd = nn::run_lstm(x, p.forward, false);
  const auto bwd = nn::run_lstm(x, p.backward, true);
  const ad::Var state = ad::concat_cols({fwd.back(), bwd.front()});
  return ad::add_row(ad::matmul(state, p.out_w), p.out_b);
}

inline ad::Var head_logits(const ad::Var& emb, std::span<const double> mask, const HeadParams& head) {
  return std::visit(
      [&](const auto& p) -> ad::Var {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, CnnParams>)
          return cnn_logits(emb, mask, p);
        else if constexpr (std::is_same_v<T, MlpParams>)
          return mlp_logits(emb, mask, p);
        else
          return bilstm_logits(emb, mask, p);
      },
      head);
}

inline ad::Var forward_cnn(const ad::Var& emb, std::span<const double> mask, const CnnParams& p) {
  return ad::softmax_rows(cnn_logits(emb, mask, p));
}
inline ad::Var forward_mlp(const ad::Var& emb, std::span<const double> mask, const MlpParams& p) {
  return ad::softmax_rows(mlp_logits(emb, mask, p));
}
inline ad::Var forward_bilstm(const ad::Var& emb, std::span<const double> mask, const BilstmParams& p) {
  return ad::softmax_rows(bilstm_logits(emb, mask, p));
}

// ---------------------------------------------------------------------------
// Trained model

struct EpochStats {
  double train_loss = 0.0;
  double dev_accuracy = 0.0;
};

struct TrainedModel {
  EmbedderSpec embedder_spec;
  std::shared_ptr<Embedder> embedder;
  std::shared_ptr<const Vocabulary> vocab;  // null for word-level embedders
  HeadParams head;
  ClassifierConfig config;
  Language language = Language::english;
  std::vector<EpochStats> history;
  int best_epoch = -1;  // 0-based; -1 when no epoch ran

  ad::Params trainable_params() const {
    ad::Params p = head_params(head);
    if (config.train_embedder)
      for (auto& e : embedder->params()) p.push_back({"embedder." + e.name, e.var});
    return p;
  }
};

// Index of a label in probability vectors and confusion matrices.
inline int class_index(Label l) { return l == Label::hate ? 0 : 1; }
inline Label class_label(int i) { return i == 0 ? Label::hate : Label::not_hate; }

struct Prediction {
  Label label = Label::not_hate;
  std::vector<double> probabilities;
};

namespace detail {

inline const std::string& processed_text_of(const Comment& c) {
  if (!c.processed_text) throw DataError("comment " + c.id + " has not been preprocessed");
  return *c.processed_text;
}

inline PaddedEmbedding embed_text(const TrainedModel& m, std::string_view processed) {
  const auto in = prepare_input(processed, *m.embedder, m.vocab.get(), m.config.max_len);
  return embed_padded(*m.embedder, in, m.config.max_len);
}

inline Prediction predict_processed(const TrainedModel& m, std::string_view processed) {
  const auto e = embed_text(m, processed);
  const ad::Matrix probs = ad::softmax_rows_value(head_logits(e.matrix, e.mask, m.head).value());
  Prediction p;
  p.probabilities.assign(probs.data(), probs.data() + probs.size());
  Eigen::Index best = 0;
  probs.row(0).maxCoeff(&best);
  p.label = class_label(static_cast<int>(best));
  return p;
}

}  // namespace detail

// Labels for already-preprocessed comments.
inline std::vector<Label> predict_dataset(const TrainedModel& m, const Dataset& data) {
  std::vector<Label> out;
  out.reserve(data.size());
  for (const auto& c : data) out.push_back(detail::predict_processed(m, detail::processed_text_of(c)).label);
  return out;
}

// Runs the model's preprocessing pipeline on raw text, then classifies it.
inline Prediction predict(const TrainedModel& m, std::string_view text,
                          const preprocess::Resources& resources = preprocess::Resources::defaults()) {
  return detail::predict_processed(m, preprocess::Pipeline::for_language(m.language, resources).run(text));
}

inline Prediction predict(const TrainedModel& m, std::string_view text, Language text_language,
                          const preprocess::Resources& resources = preprocess::Resources::defaults()) {
  if (text_language != m.language)
    throw ConfigError("model was trained on " + std::string(to_string(m.language)) + " text but received " +
                      std::string(to_string(text_language)) + " text");
  return predict(m, text, resources);
}

inline double accuracy(const TrainedModel& m, const Dataset& data) {
  if (data.size() == 0) return 0.0;
  std::size_t correct = 0;
  const auto preds = predict_dataset(m, data);
  std::size_t i = 0;
  for (const auto& c : data) {
    if (c.gold_label && *c.gold_label == preds[i]) ++correct;
    ++i;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  std::shared_ptr<const Vocabulary> vocab;
  Language language = Language::english;
  // Called after every epoch with (epoch index, stats).
  std::function<void(std::size_t, const EpochStats&)> on_epoch;
};

inline TrainedModel init_model(const EmbedderSpec& spec, const ClassifierConfig& config, const TrainOptions& opts) {
  config.validate();
  if (opts.language != Language::english && opts.language != Language::hinglish)
    throw ConfigError("model language must be english or hinglish");
  TrainedModel m;
  m.embedder_spec = spec;
  m.embedder_spec.trainable = config.train_embedder;
  m.vocab = opts.vocab;
  m.embedder = make_embedder(m.embedder_spec, opts.vocab);
  if (m.embedder->token_level() && !m.vocab) throw ConfigError("token-level embedder needs a vocabulary");
  m.config = config;
  m.language = opts.language;
  std::mt19937_64 init_rng(config.seed);
  m.head = make_head(config, spec.dim, init_rng);
  return m;
}

inline TrainedModel train(const EmbedderSpec& spec, const Dataset& train_set, const Dataset& dev_set,
                          const ClassifierConfig& config, const TrainOptions& opts = {}) {
  TrainedModel m = init_model(spec, config, opts);

  struct Example {
    PaddedEmbedding cached;  // frozen embedder only
    EmbedInput input;
    int target;
  };
  std::vector<Example> examples;
  for (const auto& c : train_set) {
    if (!c.gold_label) throw DataError("training comment " + c.id + " has no gold label");
    Example ex;
    ex.input = prepare_input(detail::processed_text_of(c), *m.embedder, m.vocab.get(), config.max_len);
    ex.target = class_index(*c.gold_label);
    if (!config.train_embedder) {
      ex.cached = embed_padded(*m.embedder, ex.input, config.max_len);
      ex.cached.matrix = ad::constant(ex.cached.matrix.value());
    }
    examples.push_back(std::move(ex));
  }
  for (const auto& c : dev_set) detail::processed_text_of(c);

  ad::Params params = m.trainable_params();
  ad::Adam adam(config.learning_rate);
  std::mt19937_64 order_rng(config.seed + 1);
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  const Dataset& selection = dev_set.size() ? dev_set : train_set;
  double best_acc = -1.0;
  std::vector<ad::Matrix> best;
  std::size_t batch_index = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng() % i]);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      ad::zero_grads(params);
      double batch_loss = 0.0;
      for (std::size_t k = start; k < end; ++k) {
        const Example& ex = examples[order[k]];
        const PaddedEmbedding e =
            config.train_embedder ? embed_padded(*m.embedder, ex.input, config.max_len) : ex.cached;
        const ad::Var loss = ad::cross_entropy(head_logits(e.matrix, e.mask, m.head), ex.target);
        ad::backward(loss);
        batch_loss += loss.scalar();
      }
      if (!std::isfinite(batch_loss))
        throw Error("non-finite loss at batch " + std::to_string(batch_index) + " (epoch " + std::to_string(epoch) +
                    ")");
      adam.step(params, 1.0 / static_cast<double>(end - start));
      if (!ad::all_finite(params))
        throw Error("non-finite parameters after batch " + std::to_string(batch_index) + " (epoch " +
                    std::to_string(epoch) + ")");
      loss_sum += batch_loss;
    }
    EpochStats stats;
    stats.train_loss = examples.empty() ? 0.0 : loss_sum / static_cast<double>(examples.size());
    stats.dev_accuracy = accuracy(m, selection);
    m.history.push_back(stats);
    if (stats.dev_accuracy >= best_acc) {
      best_acc = stats.dev_accuracy;
      m.best_epoch = static_cast<int>(epoch);
      best.clear();
      for (const auto& p : params) best.push_back(p.var.value());
    }
    if (opts.on_epoch) opts.on_epoch(epoch, stats);
  }
  if (!best.empty())
    for (std::size_t i = 0; i < params.size(); ++i) params[i].var.mutable_value() = best[i];
  ad::zero_grads(params);
  return m;
}

// ---------------------------------------------------------------------------
// Model artifact: <dir>/model.json, <dir>/head/, <dir>/embedder/ (when the
// embedder was trained), <dir>/vocab.txt (token-level embedders).

inline constexpr const char* kModelFormat = "hsd-model";

inline void save_model(const TrainedModel& m, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json j{{"format", kModelFormat},
                   {"version", 1},
                   {"language", to_string(m.language)},
                   {"embedder", m.embedder_spec.to_json()},
                   {"classifier", m.config.to_json()},
                   {"best_epoch", m.best_epoch},
                   {"history", nlohmann::json::array()}};
  for (const auto& h : m.history) j["history"].push_back({{"train_loss", h.train_loss}, {"dev_accuracy", h.dev_accuracy}});
  if (m.vocab) {
    j["vocab"] = {{"fingerprint", m.vocab->fingerprint()}, {"size", m.vocab->size()}};
    std::ofstream v(dir / "vocab.txt", std::ios::binary | std::ios::trunc);
    for (const auto& t : m.vocab->tokens()) v << t << '\n';
  }
  weights::save(dir / "head", m.config.to_json(), head_params(m.head));
  if (m.config.train_embedder) save_embedder(*m.embedder, dir / "embedder");
  std::ofstream out(dir / "model.json", std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw Error("cannot write " + (dir / "model.json").string());
}

inline TrainedModel load_model(const std::filesystem::path& dir) {
  const auto path = dir / "model.json";
  std::ifstream in(path);
  if (!in) throw DataError("no model at '" + dir.string() + "' (expected model.json)");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad model manifest " + path.string() + ": " + e.what());
  }
  if (j.value("format", "") != kModelFormat) throw DataError(path.string() + " is not a model manifest");

  TrainOptions opts;
  const auto language = parse_language(j.at("language").get<std::string>());
  if (!language) throw DataError(path.string() + ": unknown language");
  opts.language = *language;
  if (j.contains("vocab")) {
    auto vocab = std::make_shared<Vocabulary>(Vocabulary::load((dir / "vocab.txt").string()));
    if (vocab->fingerprint() != j["vocab"].value("fingerprint", ""))
      throw DataError("vocabulary in " + dir.string() + " does not match its manifest fingerprint");
    opts.vocab = vocab;
  }
  const auto spec = EmbedderSpec::from_json(j.at("embedder"));
  const auto config = ClassifierConfig::from_json(j.at("classifier"));
  TrainedModel m = init_model(spec, config, opts);
  auto hp = head_params(m.head);
  weights::assign(hp, weights::load(dir / "head"), (dir / "head").string());
  if (config.train_embedder) load_embedder_state(*m.embedder, dir / "embedder");
  m.best_epoch = j.value("best_epoch", -1);
  for (const auto& h : j.value("history", nlohmann::json::array()))
    m.history.push_back({h.at("train_loss").get<double>(), h.at("dev_accuracy").get<double>()});
  return m;
}

}  // namespace hsd
