#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <random>
#include <sstream>

#include "rest/harness.hpp"

using namespace rest;
using namespace rest::harness;
namespace fs = std::filesystem;

namespace {

// Ten classes of 28x28 images: a bright bar whose row depends on the label.
LabeledSet bars(int count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> noise(0.0, 0.1);
  LabeledSet set;
  for (int i = 0; i < count; ++i) {
    const int label = i % 10;
    ImageTensor img(28, 28, 1);
    for (double& v : img.data) v = noise(rng);
    for (int y = 4 + 2 * label; y < 6 + 2 * label; ++y)
      for (int x = 6; x < 22; ++x) img.at(0, y, x) = 1.0;
    set.push_back(img, label);
  }
  return set;
}

class TinyData : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() / ("rest_harness_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
    fs::create_directories(root_ / "data");
    const DataPaths p = DataPaths::in((root_ / "data").string());
    io::write_idx(bars(120, 1), p.train_images, p.train_labels);
    io::write_idx(bars(30, 2), p.test_images, p.test_labels);
  }
  void TearDown() override { fs::remove_all(root_); }

  ExperimentConfig config(Experiment e) const {
    ExperimentConfig c;
    c.experiment = e;
    c.data_dir = (root_ / "data").string();
    c.out_dir = (root_ / "out").string();
    c.scale = 0.002;  // 110 train, 20 test
    c.families = {Family::kR};
    c.blackbox_epochs = 2;
    c.blackbox_learning_rate = 1e-3;
    c.rest_epochs = 1;
    c.rollout_steps = 128;
    c.ppo.minibatch_size = 64;
    c.ppo.epochs = 1;
    return c;
  }

  fs::path root_;
};

}  // namespace

TEST(Config, ExperimentNamesRoundTrip) {
  for (const char* n : {"recovery", "generalization", "sample_efficiency", "reward_ablation", "mi_confidence"}) {
    EXPECT_EQ(to_string(parse_experiment(n)), n);
  }
  EXPECT_THROW(parse_experiment("nope"), std::invalid_argument);
}

TEST(Config, KeyValuesOverrideFields) {
  ExperimentConfig c;
  apply_key_values(c, {{"experiment.families", "R, RSST"},
                       {"experiment.reward", "eq1"},
                       {"experiment.seed", "17"},
                       {"rest.lambda", "0.9"},
                       {"rest.std", "0.5"},
                       {"generalization.train_counts", "4,8"}});
  EXPECT_EQ(c.families, (std::vector<Family>{Family::kR, Family::kRSST}));
  EXPECT_EQ(c.reward, RewardVariant::kLogRatio);
  EXPECT_EQ(c.seed, 17u);
  EXPECT_DOUBLE_EQ(c.ppo.lambda, 0.9);
  EXPECT_DOUBLE_EQ(c.ppo.std, 0.5);
  EXPECT_EQ(c.train_counts, (std::vector<int>{4, 8}));
}

TEST(Config, RejectsUnknownKeysAndBadNumbers) {
  ExperimentConfig c;
  EXPECT_THROW(apply_key_values(c, {{"rest.epochz", "3"}}), std::invalid_argument);
  EXPECT_THROW(apply_key_values(c, {{"rest.epochs", "three"}}), std::invalid_argument);
  EXPECT_THROW(apply_key_values(c, {{"rest.epochs", "2.5"}}), std::invalid_argument);
  EXPECT_THROW(apply_key_values(c, {{"experiment.seed", "-1"}}), std::invalid_argument);
}

TEST(Config, ToKeyValuesRoundTrips) {
  ExperimentConfig a;
  a.experiment = Experiment::kGeneralization;
  a.seed = 9;
  a.threshold = 0.85;
  a.ppo.learning_rate = 3e-4;
  ExperimentConfig b;
  apply_key_values(b, a.to_key_values());
  EXPECT_EQ(b.to_key_values(), a.to_key_values());
}

TEST(Config, DefaultsResolvePerExperiment) {
  ExperimentConfig c;
  EXPECT_EQ(c.resolved_families().size(), 5u);
  EXPECT_EQ(c.resolved_repeats(), 1);
  c.experiment = Experiment::kRewardAblation;
  EXPECT_EQ(c.resolved_repeats(), 5);
  c.experiment = Experiment::kGeneralization;
  EXPECT_EQ(c.resolved_families(), std::vector<Family>{Family::kRST});
  c.use_full_scale();
  EXPECT_EQ(c.scale, 1.0);
  EXPECT_EQ(c.ppo.std, 1.0);
}

TEST(Config, DataDirFromEnvironment) {
  ::setenv("REST_DATA_DIR", "/some/where", 1);
  EXPECT_EQ(default_data_dir(), "/some/where");
  EXPECT_EQ(ExperimentConfig{}.data_dir, "/some/where");
  ::unsetenv("REST_DATA_DIR");
  EXPECT_EQ(default_data_dir(), "data/mnist");
}

TEST(Config, ValidateChecksRangesAndPaths) {
  ExperimentConfig c;
  c.data_dir = "/definitely/missing";
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.scale = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.scale = 1.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Data, ScaledCount) {
  EXPECT_EQ(scaled_count(kFullTrainCount, 0.1, 9000, "t"), 5500u);
  EXPECT_EQ(scaled_count(kFullTestCount, 0.1, 1000, "t"), 1000u);
  EXPECT_THROW(scaled_count(kFullTrainCount, 1.0, 9000, "t"), std::invalid_argument);
  EXPECT_THROW(scaled_count(kFullTrainCount, 1e-9, 9000, "t"), std::invalid_argument);
}

TEST(Csv, HeaderOrderAndQuoting) {
  const std::vector<MetricsRow> rows{{"recovery", "R", "a,b", "BB", 3, 50.0, 0.0, 1.5, 0.25}};
  std::ostringstream with, without;
  write_csv(with, rows);
  write_csv(without, rows, false);
  EXPECT_EQ(with.str(),
            "experiment,family,setting,method,seed,accuracy,mean_length,train_seconds,test_seconds\n"
            "recovery,R,\"a,b\",BB,3,50.0000,0.0000,1.500,0.250\n");
  EXPECT_EQ(without.str(), "experiment,family,setting,method,seed,accuracy,mean_length\n"
                           "recovery,R,\"a,b\",BB,3,50.0000,0.0000\n");
}

TEST(Csv, SummaryMeansAndSampleDeviation) {
  std::vector<MetricsRow> rows;
  const double accs[] = {60.0, 70.0, 80.0};
  for (int s = 0; s < 3; ++s) {
    rows.push_back({"x", "R", "eq2", "REST+BB", static_cast<std::uint64_t>(s), accs[s], 2.0 + s, 10, 1});
    rows.push_back({"x", "R", "eq2", "BB", static_cast<std::uint64_t>(s), 50.0, 0.0, 5, 1});
  }
  const auto sum = summarize(rows);
  ASSERT_EQ(sum.size(), 2u);
  EXPECT_EQ(sum[0].method, "REST+BB");
  EXPECT_EQ(sum[0].runs, 3);
  EXPECT_DOUBLE_EQ(sum[0].accuracy, 70.0);
  EXPECT_DOUBLE_EQ(sum[0].accuracy_sd, 10.0);
  EXPECT_DOUBLE_EQ(sum[0].mean_length, 3.0);
  EXPECT_DOUBLE_EQ(sum[1].accuracy_sd, 0.0);
  const std::string table = format_summary("x", sum);
  EXPECT_NE(table.find("REST+BB eq2"), std::string::npos);
  EXPECT_NE(table.find("70.00"), std::string::npos);
}

TEST_F(TinyData, RecoveryIsReproducibleAndWritesArtifacts) {
  const ExperimentConfig c = config(Experiment::kRecovery);
  const ExperimentOutput a = run_experiment(c);
  ASSERT_EQ(a.rows.size(), 2u);
  for (const MetricsRow& r : a.rows) {
    EXPECT_GE(r.accuracy, 0.0);
    EXPECT_LE(r.accuracy, 100.0);
    EXPECT_GE(r.train_seconds, 0.0);
    EXPECT_GE(r.test_seconds, 0.0);
    if (r.method == kMethodRest) {
      EXPECT_GE(r.mean_length, 1.0);
      EXPECT_LE(r.mean_length, 10.0);
    }
  }
  for (const char* f : {"metrics.csv", "summary.csv", "summary.txt", "manifest.txt"}) {
    EXPECT_TRUE(fs::exists(fs::path(a.directory) / f)) << f;
  }
  const auto manifest = io::read_key_values((fs::path(a.directory) / "manifest.txt").string());
  EXPECT_EQ(manifest.at("data.train_count"), "110");
  EXPECT_EQ(manifest.at("data.test_count"), "20");
  EXPECT_EQ(manifest.at("blackbox.from_cache"), "false");

  // Second run reuses the cached black box and must agree on every non-timing column.
  const ExperimentOutput b = run_experiment(c);
  std::ostringstream ca, cb;
  write_csv(ca, a.rows, false);
  write_csv(cb, b.rows, false);
  EXPECT_EQ(ca.str(), cb.str());
  EXPECT_EQ(io::read_key_values((fs::path(b.directory) / "manifest.txt").string()).at("blackbox.from_cache"), "true");
}

TEST_F(TinyData, BlackBoxCacheInvalidatesOnSettingsChange) {
  ExperimentConfig c = config(Experiment::kRecovery);
  const Datasets data = load_datasets(c);
  const BlackBoxArtifact first = obtain_blackbox(c, data);
  EXPECT_FALSE(first.from_cache);
  const BlackBoxArtifact again = obtain_blackbox(c, data);
  EXPECT_TRUE(again.from_cache);
  EXPECT_EQ(again.model.predict(data.test.images[0]).probs, first.model.predict(data.test.images[0]).probs);
  c.blackbox_epochs = 3;
  EXPECT_FALSE(obtain_blackbox(c, data).from_cache);
}

TEST_F(TinyData, GeneralizationReportsEachTrainCount) {
  ExperimentConfig c = config(Experiment::kGeneralization);
  c.families.clear();
  c.train_counts = {12, 4};
  const ExperimentOutput out = run_experiment(c);
  ASSERT_EQ(out.rows.size(), 4u);
  EXPECT_EQ(out.rows[0].setting, "train_combos=12");
  EXPECT_EQ(out.rows[2].setting, "train_combos=4");
  EXPECT_EQ(out.rows[0].family, "RST");
}

TEST_F(TinyData, DegenerateSampleEfficiencyRunCompletes) {
  ExperimentConfig c = config(Experiment::kSampleEfficiency);
  c.efficiency_train = 10;
  const ExperimentOutput out = run_experiment(c);
  EXPECT_EQ(out.rows.size(), 2u);
  c.efficiency_train = 5000;
  EXPECT_THROW(run_experiment(c), std::invalid_argument);
}

TEST_F(TinyData, RewardAblationSharesDataAcrossVariants) {
  ExperimentConfig c = config(Experiment::kRewardAblation);
  c.repeats = 1;
  const ExperimentOutput out = run_experiment(c);
  ASSERT_EQ(out.rows.size(), 4u);
  EXPECT_EQ(out.rows[0].setting, "eq1");
  EXPECT_EQ(out.rows[2].setting, "eq2");
  // Same distorted test set, so the black-box arm is identical.
  EXPECT_EQ(out.rows[0].accuracy, out.rows[2].accuracy);
}

TEST_F(TinyData, MiConfidenceRuns) {
  ExperimentConfig c = config(Experiment::kMiConfidence);
  c.mc_samples = 4;
  const ExperimentOutput out = run_experiment(c);
  ASSERT_EQ(out.rows.size(), 4u);
  EXPECT_EQ(out.rows[1].setting, "mi");
  EXPECT_EQ(out.rows[3].setting, "mi-tuned");
}

TEST_F(TinyData, ScaleBeyondDataFails) {
  ExperimentConfig c = config(Experiment::kRecovery);
  c.scale = 0.5;
  EXPECT_THROW(run_experiment(c), std::invalid_argument);
}

TEST(Config, ShippedDeskConfigMatchesDefaults) {
  ExperimentConfig from_file;
  apply_key_values(from_file, io::read_key_values(std::string(REST_SOURCE_DIR) + "/configs/desk.conf"));
  io::KeyValues a = from_file.to_key_values(), b = ExperimentConfig{}.to_key_values();
  EXPECT_EQ(a, b);
}
