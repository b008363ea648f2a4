#pragma once

// Frozen image classifiers seen only through predictions and confidence
// scores, plus the small CNN used as the default black box.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rest/image.hpp"
#include "rest/nn.hpp"
#include "rest/random.hpp"
#include "rest/serialize.hpp"

namespace rest {

using ModelScalar = float;
using ModelNetwork = nn::Network<ModelScalar>;

/// Class-probability vector with its argmax label (lowest index on ties) and a
/// confidence score (the maximum probability unless stated otherwise).
struct Prediction {
  std::vector<double> probs;
  int label = 0;
  double confidence = 0.0;
};

inline Prediction make_prediction(std::vector<double> probs) {
  if (probs.empty()) throw std::invalid_argument("make_prediction: empty probability vector");
  Prediction p;
  p.label = static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
  p.confidence = probs[static_cast<std::size_t>(p.label)];
  p.probs = std::move(probs);
  return p;
}

/// The black-box contract: predictions for an input, nothing else. MC-dropout
/// sampling is optional and only available when the model has dropout.
class BlackBox {
 public:
  virtual ~BlackBox() = default;
  virtual nn::Shape input_shape() const = 0;
  virtual int class_count() const = 0;
  virtual Prediction predict(const ImageTensor& image) const = 0;
  virtual std::vector<std::vector<double>> mc_dropout_predict(const ImageTensor& image, int samples,
                                                              std::uint64_t seed) const = 0;
};

/// Layer sizes of the default classifier. kernel 5 with pooling is the MNIST
/// setting; inputs too small for it (e.g. 8x8) use kernel 3 without pooling.
struct ClassifierOptions {
  int conv1_channels = 16;
  int conv2_channels = 32;
  int kernel = 5;
  bool pooling = true;
  int hidden = 128;
  double dropout = 0.5;
  double final_init_scale = 1.0;

  static ClassifierOptions for_input(nn::Shape input) {
    ClassifierOptions o;
    // Two 5x5 convolutions with 2x2 pooling need at least 16 pixels per side.
    if (std::min(input.height, input.width) < 16) {
      o.kernel = 3;
      o.pooling = false;
    }
    return o;
  }
};

/// conv -> ReLU -> pool -> conv -> ReLU -> pool -> fc -> ReLU -> dropout -> fc.
inline std::vector<nn::LayerSpec> classifier_architecture(int classes, const ClassifierOptions& o) {
  using nn::LayerSpec;
  std::vector<LayerSpec> specs{LayerSpec::conv(o.conv1_channels, o.kernel), LayerSpec::relu()};
  if (o.pooling) specs.push_back(LayerSpec::pool());
  specs.push_back(LayerSpec::conv(o.conv2_channels, o.kernel));
  specs.push_back(LayerSpec::relu());
  if (o.pooling) specs.push_back(LayerSpec::pool());
  specs.push_back(LayerSpec::dense(o.hidden));
  specs.push_back(LayerSpec::relu());
  specs.push_back(LayerSpec::dropout(o.dropout));
  specs.push_back(LayerSpec::dense(classes, o.final_init_scale));
  return specs;
}

inline nn::Shape shape_of(const ImageTensor& image) {
  return {image.channels, image.height, image.width};
}

/// Packs images into a feature-by-sample matrix.
template <class S = ModelScalar>
nn::Mat<S> to_batch(std::span<const ImageTensor> images) {
  if (images.empty()) throw std::invalid_argument("to_batch: no images");
  const auto features = static_cast<Eigen::Index>(images.front().size());
  nn::Mat<S> x(features, static_cast<Eigen::Index>(images.size()));
  for (std::size_t j = 0; j < images.size(); ++j) {
    if (static_cast<Eigen::Index>(images[j].size()) != features) {
      throw std::invalid_argument("to_batch: inconsistent image shapes");
    }
    for (Eigen::Index i = 0; i < features; ++i) {
      x(i, static_cast<Eigen::Index>(j)) = static_cast<S>(images[j].data[static_cast<std::size_t>(i)]);
    }
  }
  return x;
}

template <class S = ModelScalar>
nn::Mat<S> to_batch(const ImageTensor& image) {
  return to_batch<S>(std::span<const ImageTensor>(&image, 1));
}

/// Trainable CNN classifier; frozen (read-only) once handed out as a BlackBox.
class ClassifierModel : public BlackBox {
 public:
  ClassifierModel(nn::Shape input, int classes, std::uint64_t seed,
                  const ClassifierOptions& options)
      : network_(input, classifier_architecture(classes, options), seed), classes_(classes) {
    if (classes < 1) throw std::invalid_argument("ClassifierModel: need at least one class");
  }

  ClassifierModel(nn::Shape input, int classes, std::uint64_t seed)
      : ClassifierModel(input, classes, seed, ClassifierOptions::for_input(input)) {}

  explicit ClassifierModel(ModelNetwork network)
      : network_(std::move(network)), classes_(network_.output_shape().size()) {}

  nn::Shape input_shape() const override { return network_.input_shape(); }
  int class_count() const override { return classes_; }

  const ModelNetwork& network() const { return network_; }
  ModelNetwork& mutable_network() { return network_; }

  Prediction predict(const ImageTensor& image) const override {
    check_shape(image);
    const Eigen::MatrixXd p = nn::softmax(network_.forward(to_batch(image)));
    return make_prediction(std::vector<double>(p.data(), p.data() + p.rows()));
  }

  std::vector<Prediction> predict_batch(std::span<const ImageTensor> images) const {
    std::vector<Prediction> out;
    out.reserve(images.size());
    constexpr std::size_t kChunk = 256;
    for (std::size_t start = 0; start < images.size(); start += kChunk) {
      const auto chunk = images.subspan(start, std::min(kChunk, images.size() - start));
      for (const ImageTensor& img : chunk) check_shape(img);
      const Eigen::MatrixXd p = nn::softmax(network_.forward(to_batch(chunk)));
      for (Eigen::Index j = 0; j < p.cols(); ++j) {
        out.push_back(make_prediction(std::vector<double>(p.col(j).data(), p.col(j).data() + p.rows())));
      }
    }
    return out;
  }

  /// `samples` stochastic passes with dropout active, reproducible for a seed.
  std::vector<std::vector<double>> mc_dropout_predict(const ImageTensor& image, int samples,
                                                      std::uint64_t seed) const override {
    check_shape(image);
    if (samples < 1) throw std::invalid_argument("mc_dropout_predict: need at least one sample");
    if (!network_.has_dropout()) throw std::invalid_argument("mc_dropout_predict: model has no dropout layer");
    Rng rng(mix_seed(seed));
    const nn::Mat<ModelScalar> x = to_batch(image);
    std::vector<std::vector<double>> out;
    out.reserve(static_cast<std::size_t>(samples));
    for (int t = 0; t < samples; ++t) {
      const Eigen::MatrixXd p = nn::softmax(network_.forward(x, {true, &rng}));
      out.emplace_back(p.data(), p.data() + p.rows());
    }
    return out;
  }

 private:
  void check_shape(const ImageTensor& image) const {
    validate_image(image, "ClassifierModel");
    if (shape_of(image) != network_.input_shape()) {
      throw std::invalid_argument("ClassifierModel: image shape does not match model input");
    }
  }

  ModelNetwork network_;
  int classes_;
};

inline Prediction predict(const BlackBox& model, const ImageTensor& image) {
  return model.predict(image);
}

/// Probability assigned to `target_label` (training-mode confidence).
inline double confidence_target(const BlackBox& model, const ImageTensor& image, int target_label) {
  const Prediction p = model.predict(image);
  if (target_label < 0 || target_label >= static_cast<int>(p.probs.size())) {
    throw std::invalid_argument("confidence_target: label out of range");
  }
  return p.probs[static_cast<std::size_t>(target_label)];
}

/// Largest class probability (inference-mode confidence).
inline double confidence_max(const BlackBox& model, const ImageTensor& image) {
  return model.predict(image).confidence;
}

inline std::vector<std::vector<double>> mc_dropout_predict(const BlackBox& model,
                                                           const ImageTensor& image, int samples,
                                                           std::uint64_t seed) {
  return model.mc_dropout_predict(image, samples, seed);
}

/// Natural-log Shannon entropy with 0 log 0 = 0.
inline double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return std::max(h, 0.0);
}

struct MutualInformation {
  double mi = 0.0;
  double predictive_entropy = 0.0;
  double aleatoric = 0.0;
};

/// Epistemic uncertainty of a set of MC samples: entropy of the mean vector
/// minus the mean per-sample entropy.
inline MutualInformation mutual_information(const std::vector<std::vector<double>>& samples) {
  if (samples.empty()) throw std::invalid_argument("mutual_information: no samples");
  const std::size_t k = samples.front().size();
  if (k == 0) throw std::invalid_argument("mutual_information: empty probability vector");
  for (const auto& s : samples) {
    if (s.size() != k) throw std::invalid_argument("mutual_information: inconsistent class counts");
  }
  const double max_entropy = std::log(static_cast<double>(k));

  MutualInformation out;
  const bool all_equal = std::all_of(samples.begin(), samples.end(),
                                     [&](const auto& s) { return s == samples.front(); });
  if (all_equal) {
    out.predictive_entropy = std::min(entropy(samples.front()), max_entropy);
    out.aleatoric = out.predictive_entropy;
    out.mi = 0.0;
    return out;
  }

  std::vector<double> mean(k, 0.0);
  double aleatoric = 0.0;
  for (const auto& s : samples) {
    for (std::size_t i = 0; i < k; ++i) mean[i] += s[i];
    aleatoric += entropy(s);
  }
  const double t = static_cast<double>(samples.size());
  for (double& v : mean) v /= t;
  out.predictive_entropy = std::min(entropy(mean), max_entropy);
  out.aleatoric = std::min(aleatoric / t, out.predictive_entropy);
  out.mi = out.predictive_entropy - out.aleatoric;
  return out;
}

struct ClassifierTrainConfig {
  int epochs = 20;
  int batch_size = 128;
  double learning_rate = 1e-4;
  double holdout_fraction = 0.1;
  std::uint64_t seed = 1;
  int classes = 0;  // 0: one more than the largest label
  std::function<void(int epoch, double loss, double holdout_accuracy)> on_epoch;
};

struct ClassifierReport {
  std::vector<double> epoch_loss;
  double holdout_accuracy = 0.0;
  std::size_t holdout_size = 0;
  double seconds = 0.0;
};

/// Fraction of items whose predicted label matches.
inline double accuracy(const ClassifierModel& model, const LabeledSet& set) {
  if (set.empty()) return 0.0;
  const auto preds = model.predict_batch(set.images);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i].label == set.labels[i];
  return static_cast<double>(hits) / static_cast<double>(set.size());
}

/// Cross-entropy training with Adam. A seeded random `holdout_fraction` of the
/// data is kept out of training and scored for the report.
inline ClassifierModel train_classifier(const LabeledSet& data, const ClassifierTrainConfig& cfg,
                                        ClassifierReport* report = nullptr) {
  if (data.empty()) throw std::invalid_argument("train_classifier: empty dataset");
  if (data.images.size() != data.labels.size()) throw std::invalid_argument("train_classifier: label count mismatch");
  const nn::Shape input = shape_of(data.images.front());
  for (const ImageTensor& img : data.images) {
    validate_image(img, "train_classifier");
    if (shape_of(img) != input) throw std::invalid_argument("train_classifier: inconsistent image shapes");
  }
  const int max_label = *std::max_element(data.labels.begin(), data.labels.end());
  const int classes = cfg.classes > 0 ? cfg.classes : max_label + 1;
  for (int y : data.labels) {
    if (y < 0 || y >= classes) throw std::invalid_argument("train_classifier: label out of range");
  }
  if (cfg.batch_size < 1 || cfg.epochs < 0) throw std::invalid_argument("train_classifier: bad config");

  const auto start = std::chrono::steady_clock::now();
  Rng rng = make_rng(cfg.seed, 0x7a11);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  const auto holdout_count = static_cast<std::size_t>(
      std::floor(std::clamp(cfg.holdout_fraction, 0.0, 0.9) * static_cast<double>(data.size())));
  std::vector<std::size_t> holdout(order.begin(), order.begin() + holdout_count);
  std::vector<std::size_t> train(order.begin() + holdout_count, order.end());
  if (train.empty()) throw std::invalid_argument("train_classifier: holdout leaves no training data");

  ClassifierModel model(input, classes, derive_seed(cfg.seed, 1));
  ModelNetwork& net = model.mutable_network();
  nn::Adam<ModelScalar> adam(cfg.learning_rate);
  ModelNetwork::Tape tape;
  Rng dropout_rng = make_rng(cfg.seed, 0xd50);

  LabeledSet holdout_set;
  for (std::size_t i : holdout) holdout_set.push_back(data.images[i], data.labels[i]);

  ClassifierReport local;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(train.begin(), train.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < train.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(train.size(), b + static_cast<std::size_t>(cfg.batch_size));
      std::vector<ImageTensor> images;
      std::vector<int> labels;
      for (std::size_t i = b; i < end; ++i) {
        images.push_back(data.images[train[i]]);
        labels.push_back(data.labels[train[i]]);
      }
      net.zero_grad();
      const nn::Mat<ModelScalar> logits = net.forward(to_batch(std::span<const ImageTensor>(images)),
                                                      {true, &dropout_rng}, &tape);
      nn::Mat<ModelScalar> grad;
      loss_sum += nn::softmax_cross_entropy(logits, labels, &grad);
      net.backward(grad, tape, false);
      adam.step(net.params());
      ++batches;
    }
    local.epoch_loss.push_back(loss_sum / static_cast<double>(std::max<std::size_t>(batches, 1)));
    local.holdout_accuracy = accuracy(model, holdout_set);
    if (cfg.on_epoch) cfg.on_epoch(epoch, local.epoch_loss.back(), local.holdout_accuracy);
  }
  if (cfg.epochs == 0) local.holdout_accuracy = accuracy(model, holdout_set);
  local.holdout_size = holdout_set.size();
  local.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (report) *report = std::move(local);
  return model;
}

inline void save_model(const ClassifierModel& model, const std::string& path) {
  auto os = io::open_for_write(path);
  io::write_header(os, io::ModelKind::kClassifier, {static_cast<double>(model.class_count())});
  io::write_network(os, model.network());
  if (!os) throw std::runtime_error("save_model: write failed for " + path);
}

inline ClassifierModel load_model(const std::string& path) {
  auto is = io::open_for_read(path);
  const std::vector<double> meta = io::read_header(is, io::ModelKind::kClassifier);
  ClassifierModel model(io::read_network<ModelScalar>(is));
  if (meta.empty() || static_cast<int>(meta[0]) != model.class_count()) {
    throw io::FormatError("load_model: class count does not match architecture");
  }
  return model;
}

}  // namespace rest
