#include <gtest/gtest.h>

#include "hsd/models.hpp"
#include "support.hpp"

using namespace hsd;
using testing_support::max_grad_error;
using testing_support::TempDir;

namespace {

ad::Var mat(std::initializer_list<std::initializer_list<double>> rows) { return ad::constant(ad::Matrix(rows)); }

ad::Var random_emb(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ad::constant(nn::random_matrix(rows, cols, 1.0, rng));
}

std::vector<double> prefix_mask(std::size_t n, std::size_t valid) {
  std::vector<double> m(n, 0.0);
  std::fill(m.begin(), m.begin() + static_cast<std::ptrdiff_t>(valid), 1.0);
  return m;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Scalar LSTM with one hidden unit; w, u, b hold the i, f, g, o entries.
double scalar_lstm(const std::vector<double>& xs, const double (&w)[4], const double (&u)[4], const double (&b)[4]) {
  double h = 0, c = 0;
  for (double x : xs) {
    double z[4];
    for (int k = 0; k < 4; ++k) z[k] = x * w[k] + h * u[k] + b[k];
    c = sigmoid(z[1]) * c + sigmoid(z[0]) * std::tanh(z[2]);
    h = sigmoid(z[3]) * std::tanh(c);
  }
  return h;
}

ClassifierConfig config_for(HeadKind head) {
  ClassifierConfig c;
  c.head = head;
  c.max_len = 8;
  c.cnn_filters = {{1, 2}, {2, 2}};
  c.mlp_hidden = {4};
  c.bilstm_hidden = 3;
  return c;
}

struct ToyData {
  Splits splits;
};

const ToyData& toy() {
  static const ToyData data = [] {
    const auto loaded = load_csv(testing_support::source_path("data/toy/toy_corpus.csv"), {}, "toy");
    const auto processed = preprocess::apply(preprocess::Pipeline::english(), loaded.dataset);
    return ToyData{split(processed, SplitSpec{})};
  }();
  return data;
}

std::shared_ptr<const Vocabulary> toy_vocab() {
  static const auto v =
      std::make_shared<const Vocabulary>(Vocabulary::load(testing_support::source_path("data/toy/vocab.txt")));
  return v;
}

ClassifierConfig toy_config(HeadKind head = HeadKind::cnn) {
  ClassifierConfig c;
  c.head = head;
  c.learning_rate = 1e-3;
  c.epochs = 10;
  c.batch_size = 2;
  c.max_len = 100;
  return c;
}

TrainOptions toy_options() {
  TrainOptions o;
  o.vocab = toy_vocab();
  o.language = Language::english;
  return o;
}

Comment processed(std::string id, std::string text, Label label) {
  Comment c;
  c.id = std::move(id);
  c.raw_text = text;
  c.processed_text = std::move(text);
  c.gold_label = label;
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// forward shapes and hand-computed values

TEST(Heads, CnnOverBaseSizedInput) {
  ClassifierConfig cfg;
  ASSERT_EQ(cfg.total_filters(), 6u);
  std::mt19937_64 rng(0);
  const auto p = std::get<CnnParams>(make_head(cfg, 768, rng));
  EXPECT_EQ(p.out_w.rows(), 6);
  const auto mask = prefix_mask(100, 100);
  const auto probs = forward_cnn(ad::constant(ad::Matrix::Zero(100, 768)), mask, p);
  EXPECT_DOUBLE_EQ(probs.value()(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(probs.value()(0, 1), 0.5);
  const auto r = forward_cnn(random_emb(100, 768, 1), mask, p).value();
  EXPECT_EQ(r.rows(), 1);
  EXPECT_EQ(r.cols(), 2);
}

TEST(Heads, MlpOverElmoSizedInput) {
  auto cfg = config_for(HeadKind::mlp);
  cfg.max_len = 75;
  std::mt19937_64 rng(0);
  const auto p = std::get<MlpParams>(make_head(cfg, 1024, rng));
  const auto r = forward_mlp(random_emb(75, 1024, 2), prefix_mask(75, 40), p).value();
  EXPECT_EQ(r.cols(), 2);
  EXPECT_NEAR(r.sum(), 1.0, 1e-12);
}

TEST(Heads, CnnHandComputed) {
  CnnParams p;
  // window(t) = x[t][0] + x[t+1][1] - 0.5
  p.groups.push_back({2, mat({{1}, {0}, {0}, {0}, {1}, {0}}), mat({{-0.5}})});
  p.out_w = mat({{1, -1}});
  p.out_b = mat({{0, 0.5}});
  const auto emb = mat({{1, 0, 2}, {0, 1, 1}, {2, 1, 0}, {7, 7, 7}});
  // windows: 1+1, 0+1, 2+0 (the masked row reads as zeros) -> relu 1.5, 0.5, 1.5
  const auto logits = cnn_logits(emb, prefix_mask(4, 3), p).value();
  EXPECT_DOUBLE_EQ(logits(0, 0), 1.5);
  EXPECT_DOUBLE_EQ(logits(0, 1), -1.0);
}

TEST(Heads, MlpHandComputed) {
  MlpParams p;
  p.hidden.emplace_back(mat({{1, 0}, {0, -1}}), mat({{0, 0}}));
  p.out_w = mat({{1, 0}, {0, 1}});
  p.out_b = mat({{0, 0}});
  // mean (2, 3) -> hidden relu(2, -3) = (2, 0)
  const auto probs = forward_mlp(mat({{1, 2}, {3, 4}}), prefix_mask(2, 2), p).value();
  EXPECT_NEAR(probs(0, 0), 1.0 / (1.0 + std::exp(-2.0)), 1e-12);
}

TEST(Heads, MlpSingleTokenMeanIsTheToken) {
  MlpParams p;
  p.out_w = mat({{0.5, -1}, {2, 0.25}, {-1, 1}});
  p.out_b = mat({{0.1, -0.2}});
  const auto emb = mat({{0.3, -0.7, 1.1}, {9, 9, 9}, {-4, 4, 0}});
  const auto logits = mlp_logits(emb, prefix_mask(3, 1), p).value();
  const ad::Matrix expected = emb.value().row(0) * p.out_w.value() + p.out_b.value();
  EXPECT_LT((logits - expected).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Heads, BilstmHandComputed) {
  const double w[4] = {1.0, 2.0, 0.5, -1.0}, u[4] = {0.3, -0.2, 0.1, 0.4}, b[4] = {0.1, 0.0, -0.1, 0.2};
  const double w2[4] = {-0.5, 0.7, 1.5, 0.3}, u2[4] = {0.2, 0.2, -0.3, 0.1}, b2[4] = {0.0, 0.3, 0.1, -0.2};
  auto lstm = [](const double (&wi)[4], const double (&ui)[4], const double (&bi)[4]) {
    return nn::LstmWeights{ad::parameter(ad::Matrix{{wi[0], wi[1], wi[2], wi[3]}}),
                           ad::parameter(ad::Matrix{{ui[0], ui[1], ui[2], ui[3]}}),
                           ad::parameter(ad::Matrix{{bi[0], bi[1], bi[2], bi[3]}}), 1};
  };
  BilstmParams p{lstm(w, u, b), lstm(w2, u2, b2), mat({{1, 0}, {0, 1}}), mat({{0, 0}})};
  const auto logits = bilstm_logits(mat({{1.0}, {2.0}, {5.0}}), prefix_mask(3, 2), p).value();
  EXPECT_NEAR(logits(0, 0), scalar_lstm({1.0, 2.0}, w, u, b), 1e-12);
  EXPECT_NEAR(logits(0, 1), scalar_lstm({2.0, 1.0}, w2, u2, b2), 1e-12);
}

// ---------------------------------------------------------------------------
// properties

TEST(Heads, GradientChecks) {
  for (auto head : {HeadKind::cnn, HeadKind::mlp, HeadKind::bilstm}) {
    std::mt19937_64 rng(11);
    const auto cfg = config_for(head);
    const auto hp = make_head(cfg, 3, rng);
    auto emb = ad::parameter(nn::random_matrix(5, 3, 1.0, rng));
    auto params = head_params(hp);
    for (auto& p : params) p.var.mutable_value() = nn::random_matrix(p.var.rows(), p.var.cols(), 0.7, rng);
    params.push_back({"emb", emb});
    const auto mask = prefix_mask(5, 4);
    EXPECT_LT(max_grad_error(params, [&] { return ad::cross_entropy(head_logits(emb, mask, hp), 1); }), 1e-5)
        << to_string(head);
  }
}

TEST(Heads, MaskedRowsNeverAffectOutput) {
  std::mt19937_64 rng(5);
  for (auto head : {HeadKind::cnn, HeadKind::mlp, HeadKind::bilstm}) {
    const auto cfg = config_for(head);
    const auto hp = make_head(cfg, 4, rng);
    const auto base = nn::random_matrix(8, 4, 1.0, rng);
    const std::vector<double> mask{1, 0, 1, 1, 0, 1, 0, 0};
    const ad::Matrix ref = head_logits(ad::constant(base), mask, hp).value();
    for (int trial = 0; trial < 20; ++trial) {
      ad::Matrix other = nn::random_matrix(8, 4, 100.0, rng);
      for (Eigen::Index r = 0; r < 8; ++r)
        if (mask[static_cast<std::size_t>(r)] != 0.0) other.row(r) = base.row(r);
      const ad::Matrix got = head_logits(ad::constant(other), mask, hp).value();
      ASSERT_EQ(std::memcmp(got.data(), ref.data(), sizeof(double) * 2), 0) << to_string(head);
    }
  }
}

TEST(Heads, WidthOneCnnIgnoresOrder) {
  std::mt19937_64 rng(6);
  ClassifierConfig cfg = config_for(HeadKind::cnn);
  cfg.cnn_filters = {{1, 5}};
  const auto hp = make_head(cfg, 4, rng);
  const ad::Matrix base = nn::random_matrix(6, 4, 1.0, rng);
  const auto mask = prefix_mask(6, 6);
  const ad::Matrix ref = head_logits(ad::constant(base), mask, hp).value();
  std::vector<int> perm{0, 1, 2, 3, 4, 5};
  for (int trial = 0; trial < 20; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng);
    ad::Matrix shuffled(6, 4);
    for (int r = 0; r < 6; ++r) shuffled.row(r) = base.row(perm[static_cast<std::size_t>(r)]);
    EXPECT_LT((head_logits(ad::constant(shuffled), mask, hp).value() - ref).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Heads, ProbabilitiesSumToOne) {
  std::mt19937_64 rng(7);
  for (auto head : {HeadKind::cnn, HeadKind::mlp, HeadKind::bilstm}) {
    const auto hp = make_head(config_for(head), 3, rng);
    for (int trial = 0; trial < 50; ++trial) {
      const auto valid = 1 + rng() % 8;
      const auto probs = ad::softmax_rows_value(
          head_logits(ad::constant(nn::random_matrix(8, 3, 10.0, rng)), prefix_mask(8, valid), hp).value());
      ASSERT_NEAR(probs.sum(), 1.0, 1e-12);
      ASSERT_TRUE((probs.array() >= 0).all());
    }
  }
}

TEST(Heads, ShapeErrors) {
  std::mt19937_64 rng(0);
  auto cfg = config_for(HeadKind::cnn);
  cfg.cnn_filters = {{4, 1}};
  const auto hp = make_head(cfg, 2, rng);
  try {
    head_logits(random_emb(3, 2, 1), prefix_mask(3, 3), hp);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.field(), "max_len");
  }
  EXPECT_THROW(head_logits(random_emb(5, 2, 1), prefix_mask(4, 4), hp), Error);
  EXPECT_THROW(head_logits(random_emb(5, 2, 1), prefix_mask(5, 0), hp), DataError);
}

TEST(Config, Validation) {
  auto field_of = [](const ClassifierConfig& c) -> std::string {
    try {
      c.validate();
    } catch (const ValidationError& e) {
      return e.field();
    }
    return "";
  };
  ClassifierConfig c;
  EXPECT_EQ(field_of(c), "");
  c.learning_rate = 0;
  EXPECT_EQ(field_of(c), "learning_rate");
  c = {};
  c.learning_rate = std::nan("");
  EXPECT_EQ(field_of(c), "learning_rate");
  c = {};
  c.optimizer = "sgd";
  EXPECT_EQ(field_of(c), "optimizer");
  c = {};
  c.max_len = 3;
  EXPECT_EQ(field_of(c), "max_len");
  c = {};
  c.cnn_filters = {};
  EXPECT_EQ(field_of(c), "cnn_filters");
  c = {};
  c.head = HeadKind::bilstm;
  c.bilstm_hidden = 0;
  EXPECT_EQ(field_of(c), "bilstm_hidden");

  c = {};
  EXPECT_TRUE(c.standard_learning_rate());
  c.learning_rate = 3e-4;
  EXPECT_FALSE(c.standard_learning_rate());
  EXPECT_THROW(parse_head_kind("rnn"), ConfigError);
  EXPECT_THROW(ClassifierConfig::from_json({{"epochs", "many"}}), ConfigError);
  EXPECT_EQ(ClassifierConfig::from_json(toy_config(HeadKind::mlp).to_json()).to_json(),
            toy_config(HeadKind::mlp).to_json());
}

// ---------------------------------------------------------------------------
// training

TEST(Training, ZeroEpochsLeavesInitialModel) {
  auto cfg = toy_config();
  cfg.epochs = 0;
  const auto m = train(EmbedderSpec::tiny_transformer(), toy().splits.train, toy().splits.dev, cfg, toy_options());
  EXPECT_TRUE(m.history.empty());
  EXPECT_EQ(m.best_epoch, -1);
  const auto init = init_model(EmbedderSpec::tiny_transformer(), cfg, toy_options());
  const auto a = head_params(m.head), b = head_params(init.head);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].var.value(), b[i].var.value());
}

TEST(Training, DeterministicForSeed) {
  auto cfg = toy_config();
  cfg.epochs = 2;
  const auto a = train(EmbedderSpec::tiny_transformer(), toy().splits.train, toy().splits.dev, cfg, toy_options());
  const auto b = train(EmbedderSpec::tiny_transformer(), toy().splits.train, toy().splits.dev, cfg, toy_options());
  const auto pa = head_params(a.head), pb = head_params(b.head);
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].var.value(), pb[i].var.value()) << pa[i].name;
  ASSERT_EQ(a.history.size(), 2u);
  EXPECT_EQ(a.history[1].train_loss, b.history[1].train_loss);
}

TEST(Training, LearnsToyMarker) {
  std::vector<std::size_t> epochs_seen;
  auto opts = toy_options();
  opts.on_epoch = [&](std::size_t e, const EpochStats&) { epochs_seen.push_back(e); };
  const auto m = train(EmbedderSpec::tiny_transformer(), toy().splits.train, toy().splits.dev, toy_config(), opts);
  EXPECT_EQ(epochs_seen.size(), 10u);
  EXPECT_GE(accuracy(m, toy().splits.test), 0.95);
  EXPECT_GE(m.best_epoch, 0);
  EXPECT_LT(m.history.back().train_loss, m.history.front().train_loss);
}

TEST(Training, OtherHeadsTrainOnWordEmbedders) {
  for (auto head : {HeadKind::mlp, HeadKind::bilstm}) {
    auto cfg = toy_config(head);
    cfg.epochs = 1;
    cfg.max_len = 20;
    const auto m = train(EmbedderSpec::tiny_stack(), toy().splits.train, toy().splits.dev, cfg, {});
    EXPECT_EQ(m.history.size(), 1u);
    EXPECT_TRUE(std::isfinite(m.history[0].train_loss));
  }
}

TEST(Training, EmbedderUpdatesOnlyWhenTrainable) {
  std::vector<Comment> rows{processed("a", "scum park", Label::hate), processed("b", "quiet park", Label::not_hate)};
  const Dataset d("d", rows);
  auto cfg = toy_config(HeadKind::mlp);
  cfg.epochs = 1;
  cfg.max_len = 4;
  const auto frozen = train(EmbedderSpec::tiny_char_bilstm(), d, d, cfg);
  const auto fresh = make_embedder(EmbedderSpec::tiny_char_bilstm());
  EXPECT_EQ(frozen.embedder->params()[0].var.value(), fresh->params()[0].var.value());
  cfg.train_embedder = true;
  const auto tuned = train(EmbedderSpec::tiny_char_bilstm(), d, d, cfg);
  EXPECT_NE(tuned.embedder->params()[0].var.value(), fresh->params()[0].var.value());
}

TEST(Training, NonFiniteLossNamesBatch) {
  auto cfg = toy_config();
  cfg.learning_rate = 1e308;
  cfg.epochs = 1;
  try {
    train(EmbedderSpec::tiny_transformer(), toy().splits.train, toy().splits.dev, cfg, toy_options());
    FAIL() << "expected divergence";
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("non-finite"), std::string::npos) << msg;
    EXPECT_NE(msg.find("batch 1"), std::string::npos) << msg;
  }
}

TEST(Training, RejectsBadInput) {
  std::vector<Comment> rows{processed("a", "x", Label::hate)};
  rows[0].gold_label.reset();
  auto cfg = toy_config(HeadKind::mlp);
  cfg.max_len = 4;
  EXPECT_THROW(train(EmbedderSpec::tiny_stack(), Dataset("d", rows), Dataset(), cfg), DataError);
  Comment raw;
  raw.id = "r";
  raw.raw_text = "not processed";
  raw.gold_label = Label::hate;
  EXPECT_THROW(train(EmbedderSpec::tiny_stack(), Dataset("d", {raw}), Dataset(), cfg), DataError);
  EXPECT_THROW(train(EmbedderSpec::tiny_transformer(), Dataset(), Dataset(), cfg), ConfigError);
  TrainOptions hindi;
  hindi.language = Language::hindi;
  EXPECT_THROW(init_model(EmbedderSpec::tiny_stack(), cfg, hindi), ConfigError);
}

// ---------------------------------------------------------------------------
// prediction and persistence

class TrainedToy : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    model_ = new TrainedModel(
        train(EmbedderSpec::tiny_transformer(), toy().splits.train, toy().splits.dev, toy_config(), toy_options()));
  }
  static void TearDownTestSuite() {
    delete model_;
    model_ = nullptr;
  }
  static TrainedModel* model_;
};
TrainedModel* TrainedToy::model_ = nullptr;

TEST_F(TrainedToy, PredictsMarkerFromRawText) {
  const auto hate = predict(*model_, "The SCUM at the beach, again!! @someone");
  EXPECT_EQ(hate.label, Label::hate);
  ASSERT_EQ(hate.probabilities.size(), 2u);
  EXPECT_NEAR(hate.probabilities[0] + hate.probabilities[1], 1.0, 1e-12);
  EXPECT_EQ(predict(*model_, "a quiet sunny morning in the garden").label, Label::not_hate);
  EXPECT_EQ(predict(*model_, "").probabilities.size(), 2u);
}

TEST_F(TrainedToy, LanguageMismatchRejected) {
  EXPECT_NO_THROW(predict(*model_, "scum", Language::english));
  EXPECT_THROW(predict(*model_, "scum", Language::hinglish), ConfigError);
}

TEST_F(TrainedToy, SaveLoadIsBitIdentical) {
  TempDir tmp;
  save_model(*model_, tmp / "model");
  const auto loaded = load_model(tmp / "model");
  EXPECT_EQ(loaded.best_epoch, model_->best_epoch);
  EXPECT_EQ(loaded.history.size(), model_->history.size());
  for (const auto& c : toy().splits.test) {
    const auto a = detail::predict_processed(*model_, *c.processed_text).probabilities;
    const auto b = detail::predict_processed(loaded, *c.processed_text).probabilities;
    ASSERT_EQ(a, b) << c.id;
  }
  EXPECT_EQ(predict_dataset(loaded, toy().splits.test), predict_dataset(*model_, toy().splits.test));
}

TEST_F(TrainedToy, LoadRejectsTamperedArtifacts) {
  TempDir tmp;
  EXPECT_THROW(load_model(tmp / "missing"), DataError);
  save_model(*model_, tmp / "model");
  testing_support::write_file(tmp / "model" / "vocab.txt",
                              testing_support::read_file(tmp / "model" / "vocab.txt") + "extra\n");
  EXPECT_THROW(load_model(tmp / "model"), DataError);
}
