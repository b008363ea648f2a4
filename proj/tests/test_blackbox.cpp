#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "rest/blackbox.hpp"

using namespace rest;

namespace {

// Two classes on an 8x8 grid: a bright 3x3 blob near the top-left or near the
// bottom-right, with pixel noise and a one-pixel positional jitter.
LabeledSet blobs(int count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> noise(0.0, 0.2);
  std::uniform_int_distribution<int> jitter(0, 1);
  LabeledSet set;
  for (int i = 0; i < count; ++i) {
    const int label = i % 2;
    ImageTensor img(8, 8, 1);
    for (double& v : img.data) v = noise(rng);
    const int oy = (label == 0 ? 1 : 4) + jitter(rng);
    const int ox = (label == 0 ? 1 : 4) + jitter(rng);
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x) img.at(0, oy + y, ox + x) = 1.0;
    set.push_back(img, label);
  }
  return set;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("rest_test_" + name)).string();
}

}  // namespace

TEST(MutualInformationTest, IdenticalSamplesGiveExactZero) {
  const std::vector<std::vector<double>> s(30, {0.2, 0.5, 0.3});
  const MutualInformation m = mutual_information(s);
  EXPECT_EQ(m.mi, 0.0);
  EXPECT_NEAR(m.predictive_entropy, oracle::entropy({0.2, 0.5, 0.3}), 1e-15);
}

TEST(MutualInformationTest, TwoPointExampleIsLn2) {
  const MutualInformation m = mutual_information({{1.0, 0.0}, {0.0, 1.0}});
  EXPECT_NEAR(m.mi, std::log(2.0), 1e-12);
  EXPECT_NEAR(m.predictive_entropy, std::log(2.0), 1e-12);
  EXPECT_EQ(m.aleatoric, 0.0);
}

TEST(MutualInformationTest, MatchesDefinitionOnRandomSets) {
  std::mt19937_64 rng(4);
  std::gamma_distribution<double> g(0.5, 1.0);
  std::uniform_int_distribution<int> kdist(2, 10), tdist(1, 30);
  for (int n = 0; n < 1000; ++n) {
    const int k = kdist(rng);
    std::vector<std::vector<double>> samples(static_cast<std::size_t>(tdist(rng)));
    for (auto& s : samples) {
      s.resize(static_cast<std::size_t>(k));
      double z = 0;
      for (double& v : s) z += (v = g(rng) + 1e-12);
      for (double& v : s) v /= z;
    }
    const MutualInformation m = mutual_information(samples);
    EXPECT_GE(m.mi, 0.0);
    EXPECT_LE(m.mi, m.predictive_entropy + 1e-15);
    EXPECT_LE(m.predictive_entropy, std::log(double(k)) + 1e-15);
    std::vector<double> mean(static_cast<std::size_t>(k), 0.0);
    double al = 0;
    for (const auto& s : samples) {
      for (int i = 0; i < k; ++i) mean[i] += s[i] / samples.size();
      al += oracle::entropy(s) / samples.size();
    }
    EXPECT_NEAR(m.mi, oracle::entropy(mean) - al, 1e-12);
  }
}

TEST(MutualInformationTest, RejectsEmptyAndRagged) {
  EXPECT_THROW(mutual_information({}), std::invalid_argument);
  EXPECT_THROW(mutual_information({{0.5, 0.5}, {1.0}}), std::invalid_argument);
}

TEST(Classifier, ZeroFinalLayerGivesUniformProbabilities) {
  ClassifierOptions o = ClassifierOptions::for_input({1, 28, 28});
  o.final_init_scale = 0.0;
  const ClassifierModel m({1, 28, 28}, 10, 1, o);
  const Prediction p = m.predict(ImageTensor(28, 28, 1, 0.3));
  for (double v : p.probs) EXPECT_NEAR(v, 0.1, 1e-12);
  EXPECT_EQ(p.label, 0);  // ties resolve to the lowest index
}

TEST(Classifier, ShapeMismatchThrows) {
  const ClassifierModel m({1, 28, 28}, 10, 1);
  EXPECT_THROW(m.predict(ImageTensor(27, 28, 1)), std::invalid_argument);
  EXPECT_THROW(m.predict(ImageTensor()), std::invalid_argument);
}

TEST(Classifier, ConfidenceHelpers) {
  const ClassifierModel m({1, 28, 28}, 10, 3);
  const ImageTensor img(28, 28, 1, 0.5);
  const Prediction p = m.predict(img);
  EXPECT_EQ(confidence_max(m, img), p.probs[p.label]);
  EXPECT_EQ(confidence_target(m, img, 4), p.probs[4]);
  EXPECT_THROW(confidence_target(m, img, 10), std::invalid_argument);
}

TEST(Classifier, McDropoutWithRateZeroReproducesPredict) {
  ClassifierOptions o = ClassifierOptions::for_input({1, 28, 28});
  o.dropout = 0.0;
  const ClassifierModel m({1, 28, 28}, 10, 2, o);
  ImageTensor img(28, 28, 1);
  for (std::size_t i = 0; i < img.size(); ++i) img.data[i] = (i % 17) / 17.0;
  const auto samples = m.mc_dropout_predict(img, 5, 9);
  const Prediction p = m.predict(img);
  for (const auto& s : samples) EXPECT_EQ(s, p.probs);
  EXPECT_EQ(mutual_information(samples).mi, 0.0);
}

TEST(Classifier, McDropoutIsSeededAndVaries) {
  const ClassifierModel m({1, 28, 28}, 10, 2);
  const ImageTensor img(28, 28, 1, 0.4);
  const auto a = m.mc_dropout_predict(img, 4, 7);
  EXPECT_EQ(a, m.mc_dropout_predict(img, 4, 7));
  EXPECT_NE(a[0], a[1]);
  EXPECT_THROW(m.mc_dropout_predict(img, 0, 7), std::invalid_argument);
}

TEST(Classifier, GradientCheckInDouble) {
  const ClassifierModel m({1, 16, 16}, 4, 5);
  nn::Network<double> net = m.network().cast<double>();
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  nn::Mat<double> x(256, 3);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = u(rng);
  const std::vector<int> labels{0, 3, 2};
  auto loss = [&](nn::Network<double>::Tape* tape, nn::Mat<double>* grad) {
    Rng drop(42);
    return nn::softmax_cross_entropy(net.forward(x, {true, &drop}, tape), labels, grad);
  };
  nn::Network<double>::Tape tape;
  nn::Mat<double> grad;
  net.zero_grad();
  loss(&tape, &grad);
  net.backward(grad, tape);
  EXPECT_LT(oracle::gradient_check(net, [&] { return loss(nullptr, nullptr); }), 1e-3);
}

TEST(Training, SeparatesTwoBlobClasses) {
  ClassifierTrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 32;
  cfg.learning_rate = 1e-3;
  cfg.seed = 3;
  ClassifierReport report;
  const ClassifierModel m = train_classifier(blobs(400, 1), cfg, &report);
  EXPECT_GE(accuracy(m, blobs(200, 2)), 0.95);
  EXPECT_EQ(report.epoch_loss.size(), 30u);
  EXPECT_LT(report.epoch_loss.back(), report.epoch_loss.front());
  EXPECT_EQ(report.holdout_size, 40u);
  EXPECT_GE(report.seconds, 0.0);
}

TEST(Training, SingleClassDatasetPredictsThatClass) {
  LabeledSet set = blobs(60, 4);
  for (int& y : set.labels) y = 0;
  ClassifierTrainConfig cfg;
  cfg.epochs = 3;
  cfg.learning_rate = 1e-3;
  const ClassifierModel m = train_classifier(set, cfg);
  EXPECT_EQ(m.class_count(), 1);
  EXPECT_EQ(m.predict(set.images[0]).label, 0);
  EXPECT_DOUBLE_EQ(m.predict(set.images[0]).confidence, 1.0);
}

TEST(Training, DeterministicForSeed) {
  ClassifierTrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 8;
  const LabeledSet set = blobs(100, 5);
  const ClassifierModel a = train_classifier(set, cfg);
  const ClassifierModel b = train_classifier(set, cfg);
  EXPECT_EQ(a.predict(set.images[3]).probs, b.predict(set.images[3]).probs);
}

TEST(Training, RejectsBadInput) {
  ClassifierTrainConfig cfg;
  EXPECT_THROW(train_classifier(LabeledSet{}, cfg), std::invalid_argument);
  LabeledSet set = blobs(10, 1);
  set.labels[2] = -1;
  EXPECT_THROW(train_classifier(set, cfg), std::invalid_argument);
  LabeledSet mixed = blobs(10, 1);
  mixed.images[1] = ImageTensor(7, 8, 1);
  EXPECT_THROW(train_classifier(mixed, cfg), std::invalid_argument);
}

TEST(ModelFile, RoundTripPreservesPredictions) {
  const ClassifierModel m({1, 28, 28}, 10, 12);
  const std::string path = temp_path("bb.model");
  save_model(m, path);
  const ClassifierModel back = load_model(path);
  const ImageTensor img(28, 28, 1, 0.7);
  EXPECT_EQ(back.predict(img).probs, m.predict(img).probs);
  EXPECT_EQ(back.network().specs(), m.network().specs());
  std::filesystem::remove(path);
}

TEST(ModelFile, RejectsCorruptFiles) {
  const std::string path = temp_path("bad.model");
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOTAMODELFILE";
  }
  EXPECT_THROW(load_model(path), io::FormatError);
  const ClassifierModel m({1, 8, 8}, 2, 1);
  save_model(m, path);
  const auto full = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, full / 2);
  EXPECT_THROW(load_model(path), io::FormatError);
  EXPECT_THROW(load_model(temp_path("missing.model")), std::runtime_error);
  std::filesystem::remove(path);
}
