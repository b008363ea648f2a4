#pragma once

// Experiment orchestration: configuration, dataset loading at a scale factor,
// the black-box cache, the five experiment runners and CSV/summary output.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rest/agent.hpp"
#include "rest/blackbox.hpp"
#include "rest/distort.hpp"
#include "rest/idx.hpp"
#include "rest/keyvalue.hpp"

namespace rest::harness {

namespace fs = std::filesystem;

enum class Experiment { kRecovery, kGeneralization, kSampleEfficiency, kRewardAblation, kMiConfidence };

inline std::string to_string(Experiment e) {
  switch (e) {
    case Experiment::kRecovery: return "recovery";
    case Experiment::kGeneralization: return "generalization";
    case Experiment::kSampleEfficiency: return "sample_efficiency";
    case Experiment::kRewardAblation: return "reward_ablation";
    case Experiment::kMiConfidence: return "mi_confidence";
  }
  return "?";
}

inline Experiment parse_experiment(const std::string& name) {
  for (Experiment e : {Experiment::kRecovery, Experiment::kGeneralization, Experiment::kSampleEfficiency,
                       Experiment::kRewardAblation, Experiment::kMiConfidence}) {
    if (name == to_string(e)) return e;
  }
  throw std::invalid_argument("unknown experiment '" + name + "'");
}

// Full-scale set sizes; a scale factor takes a prefix of each split.
inline constexpr std::size_t kFullTrainCount = 55000;
inline constexpr std::size_t kFullTestCount = 10000;

inline std::string default_data_dir() {
  if (const char* env = std::getenv("REST_DATA_DIR"); env && *env) return env;
  return "data/mnist";
}

struct DataPaths {
  std::string train_images, train_labels, test_images, test_labels;

  static DataPaths in(const std::string& dir) {
    const fs::path d(dir);
    return {(d / "train-images-idx3-ubyte").string(), (d / "train-labels-idx1-ubyte").string(),
            (d / "t10k-images-idx3-ubyte").string(), (d / "t10k-labels-idx1-ubyte").string()};
  }
};

struct ExperimentConfig {
  Experiment experiment = Experiment::kRecovery;
  std::string data_dir = default_data_dir();
  std::string out_dir = "results";
  std::vector<Family> families;  // empty: the experiment's default list
  RewardVariant reward = RewardVariant::kShaped;
  double threshold = 0.9;
  double scale = 0.1;
  std::uint64_t seed = 1;
  int repeats = 0;  // 0: the experiment's default

  // Black box.
  int blackbox_epochs = 120;
  double blackbox_learning_rate = 1e-4;
  int blackbox_batch = 128;
  std::string blackbox_model;  // existing model file; empty trains (or reuses the cache)

  // Transform learner.
  int rest_epochs = 3;
  PpoConfig ppo = [] {
    PpoConfig p;
    p.std = 0.3;
    return p;
  }();
  std::size_t rollout_steps = 2048;
  double infer_std = 0.1;
  int max_steps = 10;
  double mi_threshold = 0.01;
  int mc_samples = 30;

  std::vector<int> train_counts{12, 8, 4};
  std::size_t efficiency_train = 1000;
  std::size_t efficiency_test = 10000;  // multiplied by the scale factor

  /// Whole dataset, training noise std 1, longer training.
  void use_full_scale() {
    scale = 1.0;
    ppo.std = 1.0;
    rest_epochs = 10;
    blackbox_epochs = 20;  // 55,000 images per epoch
  }

  std::vector<Family> resolved_families() const {
    if (!families.empty()) return families;
    if (experiment == Experiment::kGeneralization) return {Family::kRST};
    return {Family::kR, Family::kRSc, Family::kRSh, Family::kRSS, Family::kRSST};
  }

  int resolved_repeats() const {
    if (repeats > 0) return repeats;
    return experiment == Experiment::kRewardAblation ? 5 : 1;
  }

  RewardConfig reward_config(RewardVariant variant) const {
    RewardConfig r;
    r.variant = variant;
    r.threshold = threshold;
    r.max_steps = max_steps;
    r.mi_threshold = mi_threshold;
    r.mc_samples = mc_samples;
    return r;
  }

  TrainRestConfig train_config(RewardVariant variant, std::uint64_t run_seed) const {
    TrainRestConfig t;
    t.reward = reward_config(variant);
    t.ppo = ppo;
    t.epochs = rest_epochs;
    t.rollout_steps = rollout_steps;
    t.seed = run_seed;
    return t;
  }

  InferConfig infer_config(RewardVariant variant, std::uint64_t run_seed) const {
    InferConfig c;
    c.reward = reward_config(variant);
    c.std = infer_std;
    c.seed = run_seed;
    return c;
  }

  void validate() const {
    if (!(scale > 0.0 && scale <= 1.0)) throw std::invalid_argument("scale must be in (0, 1]");
    if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("threshold must be in (0, 1)");
    if (max_steps < 1) throw std::invalid_argument("max_steps must be at least 1");
    if (rest_epochs < 0 || blackbox_epochs < 1) throw std::invalid_argument("epoch counts must be positive");
    if (!(ppo.std > 0.0)) throw std::invalid_argument("training std must be positive");
    if (infer_std < 0.0) throw std::invalid_argument("inference std must be non-negative");
    if (mc_samples < 1) throw std::invalid_argument("mc_samples must be at least 1");
    for (int k : train_counts) {
      if (k <= 0 || k >= 16) throw std::invalid_argument("train_counts entries must be in [1, 15]");
    }
    const DataPaths p = DataPaths::in(data_dir);
    for (const std::string& f : {p.train_images, p.train_labels, p.test_images, p.test_labels}) {
      if (!fs::exists(f)) throw std::invalid_argument("missing data file " + f + " (set REST_DATA_DIR)");
    }
    if (!blackbox_model.empty() && !fs::exists(blackbox_model)) {
      throw std::invalid_argument("missing black-box model " + blackbox_model);
    }
  }

  io::KeyValues to_key_values() const {
    auto num = [](double v) {
      std::ostringstream s;
      s.precision(17);
      s << v;
      return s.str();
    };
    std::string fams;
    for (Family f : resolved_families()) fams += (fams.empty() ? "" : ",") + rest::to_string(f);
    std::string counts;
    for (int k : train_counts) counts += (counts.empty() ? "" : ",") + std::to_string(k);
    return {
        {"experiment.name", to_string(experiment)},
        {"experiment.families", fams},
        {"experiment.reward", rest::to_string(reward)},
        {"experiment.threshold", num(threshold)},
        {"experiment.scale", num(scale)},
        {"experiment.seed", std::to_string(seed)},
        {"experiment.repeats", std::to_string(resolved_repeats())},
        {"experiment.out", out_dir},
        {"data.dir", data_dir},
        {"blackbox.epochs", std::to_string(blackbox_epochs)},
        {"blackbox.learning_rate", num(blackbox_learning_rate)},
        {"blackbox.batch_size", std::to_string(blackbox_batch)},
        {"blackbox.model", blackbox_model},
        {"rest.epochs", std::to_string(rest_epochs)},
        {"rest.std", num(ppo.std)},
        {"rest.infer_std", num(infer_std)},
        {"rest.learning_rate", num(ppo.learning_rate)},
        {"rest.minibatch_size", std::to_string(ppo.minibatch_size)},
        {"rest.ppo_epochs", std::to_string(ppo.epochs)},
        {"rest.clip", num(ppo.clip)},
        {"rest.gamma", num(ppo.gamma)},
        {"rest.lambda", num(ppo.lambda)},
        {"rest.value_coef", num(ppo.value_coef)},
        {"rest.entropy_coef", num(ppo.entropy_coef)},
        {"rest.max_grad_norm", num(ppo.max_grad_norm)},
        {"rest.rollout_steps", std::to_string(rollout_steps)},
        {"rest.max_steps", std::to_string(max_steps)},
        {"rest.mi_threshold", num(mi_threshold)},
        {"rest.mc_samples", std::to_string(mc_samples)},
        {"generalization.train_counts", counts},
        {"sample_efficiency.train_samples", std::to_string(efficiency_train)},
        {"sample_efficiency.test_samples", std::to_string(efficiency_test)},
    };
  }
};

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = io::trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw std::invalid_argument(key + ": expected a number, got '" + v + "'");
  return d;
}

inline long long to_int(const std::string& key, const std::string& v) {
  const double d = to_double(key, v);
  if (d != std::floor(d)) throw std::invalid_argument(key + ": expected an integer, got '" + v + "'");
  return static_cast<long long>(d);
}

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  std::uint64_t x = 0;
  try {
    x = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty() || v[0] == '-') throw std::invalid_argument(key + ": expected an unsigned integer");
  return x;
}

}  // namespace detail

/// Overrides fields from "section.key" entries. Unknown keys are an error so
/// typos do not silently fall back to defaults.
inline void apply_key_values(ExperimentConfig& c, const io::KeyValues& kv) {
  using namespace detail;
  const std::map<std::string, std::function<void(const std::string&, const std::string&)>> setters{
      {"experiment.name", [&](auto&, auto& v) { c.experiment = parse_experiment(v); }},
      {"experiment.families",
       [&](auto&, auto& v) {
         c.families.clear();
         for (const std::string& f : split_list(v)) c.families.push_back(parse_family(f));
       }},
      {"experiment.reward", [&](auto&, auto& v) { c.reward = parse_reward(v); }},
      {"experiment.threshold", [&](auto& k, auto& v) { c.threshold = to_double(k, v); }},
      {"experiment.scale", [&](auto& k, auto& v) { c.scale = to_double(k, v); }},
      {"experiment.seed", [&](auto& k, auto& v) { c.seed = to_u64(k, v); }},
      {"experiment.repeats", [&](auto& k, auto& v) { c.repeats = static_cast<int>(to_int(k, v)); }},
      {"experiment.out", [&](auto&, auto& v) { c.out_dir = v; }},
      {"data.dir", [&](auto&, auto& v) { c.data_dir = v; }},
      {"blackbox.epochs", [&](auto& k, auto& v) { c.blackbox_epochs = static_cast<int>(to_int(k, v)); }},
      {"blackbox.learning_rate", [&](auto& k, auto& v) { c.blackbox_learning_rate = to_double(k, v); }},
      {"blackbox.batch_size", [&](auto& k, auto& v) { c.blackbox_batch = static_cast<int>(to_int(k, v)); }},
      {"blackbox.model", [&](auto&, auto& v) { c.blackbox_model = v; }},
      {"rest.epochs", [&](auto& k, auto& v) { c.rest_epochs = static_cast<int>(to_int(k, v)); }},
      {"rest.std", [&](auto& k, auto& v) { c.ppo.std = to_double(k, v); }},
      {"rest.infer_std", [&](auto& k, auto& v) { c.infer_std = to_double(k, v); }},
      {"rest.learning_rate", [&](auto& k, auto& v) { c.ppo.learning_rate = to_double(k, v); }},
      {"rest.minibatch_size", [&](auto& k, auto& v) { c.ppo.minibatch_size = static_cast<int>(to_int(k, v)); }},
      {"rest.ppo_epochs", [&](auto& k, auto& v) { c.ppo.epochs = static_cast<int>(to_int(k, v)); }},
      {"rest.clip", [&](auto& k, auto& v) { c.ppo.clip = to_double(k, v); }},
      {"rest.gamma", [&](auto& k, auto& v) { c.ppo.gamma = to_double(k, v); }},
      {"rest.lambda", [&](auto& k, auto& v) { c.ppo.lambda = to_double(k, v); }},
      {"rest.value_coef", [&](auto& k, auto& v) { c.ppo.value_coef = to_double(k, v); }},
      {"rest.entropy_coef", [&](auto& k, auto& v) { c.ppo.entropy_coef = to_double(k, v); }},
      {"rest.max_grad_norm", [&](auto& k, auto& v) { c.ppo.max_grad_norm = to_double(k, v); }},
      {"rest.rollout_steps", [&](auto& k, auto& v) { c.rollout_steps = static_cast<std::size_t>(to_int(k, v)); }},
      {"rest.max_steps", [&](auto& k, auto& v) { c.max_steps = static_cast<int>(to_int(k, v)); }},
      {"rest.mi_threshold", [&](auto& k, auto& v) { c.mi_threshold = to_double(k, v); }},
      {"rest.mc_samples", [&](auto& k, auto& v) { c.mc_samples = static_cast<int>(to_int(k, v)); }},
      {"generalization.train_counts",
       [&](auto& k, auto& v) {
         c.train_counts.clear();
         for (const std::string& s : split_list(v)) c.train_counts.push_back(static_cast<int>(to_int(k, s)));
       }},
      {"sample_efficiency.train_samples",
       [&](auto& k, auto& v) { c.efficiency_train = static_cast<std::size_t>(to_int(k, v)); }},
      {"sample_efficiency.test_samples",
       [&](auto& k, auto& v) { c.efficiency_test = static_cast<std::size_t>(to_int(k, v)); }},
  };
  for (const auto& [key, value] : kv) {
    const auto it = setters.find(key);
    if (it == setters.end()) throw std::invalid_argument("unknown config key '" + key + "'");
    it->second(key, value);
  }
}

// ---------------------------------------------------------------------------
// Data

struct Datasets {
  LabeledSet train;  // canonical training images (black box and REST sources)
  LabeledSet test;   // canonical test images; never used for training
};

/// round(full * scale), which must be available in the files.
inline std::size_t scaled_count(std::size_t full, double scale, std::size_t available, const std::string& what) {
  const auto n = static_cast<std::size_t>(std::llround(static_cast<double>(full) * scale));
  if (n == 0) throw std::invalid_argument(what + ": scale too small, no items selected");
  if (n > available) {
    throw std::invalid_argument(what + ": scale needs " + std::to_string(n) + " items but the data has " +
                                std::to_string(available));
  }
  return n;
}

inline Datasets load_datasets(const ExperimentConfig& cfg) {
  const DataPaths p = DataPaths::in(cfg.data_dir);
  const LabeledSet train = io::ingest_idx(p.train_images, p.train_labels);
  const LabeledSet test = io::ingest_idx(p.test_images, p.test_labels);
  return {train.head(scaled_count(kFullTrainCount, cfg.scale, train.size(), "train split")),
          test.head(scaled_count(kFullTestCount, cfg.scale, test.size(), "test split"))};
}

// ---------------------------------------------------------------------------
// Metrics

struct MetricsRow {
  std::string experiment;
  std::string family;
  std::string setting;  // reward variant or split size
  std::string method;   // "BB" or "REST+BB"
  std::uint64_t seed = 0;
  double accuracy = 0.0;     // percent
  double mean_length = 0.0;  // 0 for BB rows
  double train_seconds = 0.0;
  double test_seconds = 0.0;
};

inline constexpr const char* kMethodBlackBox = "BB";
inline constexpr const char* kMethodRest = "REST+BB";

namespace detail {

inline std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char ch : s) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return q + "\"";
}

}  // namespace detail

/// With `timing` false the wall-time columns are omitted; the remaining
/// columns are a pure function of (config, seed).
inline void write_csv(std::ostream& os, const std::vector<MetricsRow>& rows, bool timing = true) {
  using detail::csv_field;
  using detail::fixed;
  os << "experiment,family,setting,method,seed,accuracy,mean_length";
  if (timing) os << ",train_seconds,test_seconds";
  os << '\n';
  for (const MetricsRow& r : rows) {
    os << csv_field(r.experiment) << ',' << csv_field(r.family) << ',' << csv_field(r.setting) << ','
       << csv_field(r.method) << ',' << r.seed << ',' << fixed(r.accuracy, 4) << ',' << fixed(r.mean_length, 4);
    if (timing) os << ',' << fixed(r.train_seconds, 3) << ',' << fixed(r.test_seconds, 3);
    os << '\n';
  }
}

inline void write_csv(const std::string& path, const std::vector<MetricsRow>& rows, bool timing = true) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_csv(os, rows, timing);
}

struct SummaryRow {
  std::string family, setting, method;
  int runs = 0;
  double accuracy = 0, accuracy_sd = 0, mean_length = 0, train_seconds = 0, test_seconds = 0;
};

/// Means over seeds per (family, setting, method), in first-seen order.
inline std::vector<SummaryRow> summarize(const std::vector<MetricsRow>& rows) {
  std::vector<SummaryRow> out;
  std::vector<std::vector<double>> accs;
  for (const MetricsRow& r : rows) {
    auto it = std::find_if(out.begin(), out.end(), [&](const SummaryRow& s) {
      return s.family == r.family && s.setting == r.setting && s.method == r.method;
    });
    if (it == out.end()) {
      out.push_back({r.family, r.setting, r.method});
      accs.emplace_back();
      it = out.end() - 1;
    }
    const auto k = static_cast<std::size_t>(it - out.begin());
    ++it->runs;
    it->accuracy += r.accuracy;
    it->mean_length += r.mean_length;
    it->train_seconds += r.train_seconds;
    it->test_seconds += r.test_seconds;
    accs[k].push_back(r.accuracy);
  }
  for (std::size_t k = 0; k < out.size(); ++k) {
    SummaryRow& s = out[k];
    const double n = s.runs;
    s.accuracy /= n;
    s.mean_length /= n;
    s.train_seconds /= n;
    s.test_seconds /= n;
    double ss = 0;
    for (double a : accs[k]) ss += (a - s.accuracy) * (a - s.accuracy);
    s.accuracy_sd = s.runs > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
  }
  return out;
}

inline void write_summary_csv(const std::string& path, const std::vector<SummaryRow>& rows) {
  using detail::csv_field;
  using detail::fixed;
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os << "family,setting,method,runs,accuracy,accuracy_sd,mean_length,train_seconds,test_seconds\n";
  for (const SummaryRow& s : rows) {
    os << csv_field(s.family) << ',' << csv_field(s.setting) << ',' << csv_field(s.method) << ',' << s.runs << ','
       << fixed(s.accuracy, 4) << ',' << fixed(s.accuracy_sd, 4) << ',' << fixed(s.mean_length, 4) << ','
       << fixed(s.train_seconds, 3) << ',' << fixed(s.test_seconds, 3) << '\n';
  }
}

/// Plain-text table: one line per method and setting, one column per family.
inline std::string format_summary(const std::string& title, const std::vector<SummaryRow>& rows) {
  std::vector<std::string> families;
  std::vector<std::pair<std::string, std::string>> lines;
  for (const SummaryRow& s : rows) {
    if (std::find(families.begin(), families.end(), s.family) == families.end()) families.push_back(s.family);
    const std::pair<std::string, std::string> key{s.method, s.setting};
    if (std::find(lines.begin(), lines.end(), key) == lines.end()) lines.push_back(key);
  }
  std::ostringstream os;
  os << title << '\n';
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-26s", "method / setting");
  os << buf;
  for (const std::string& f : families) {
    std::snprintf(buf, sizeof buf, " %16s", f.c_str());
    os << buf;
  }
  os << '\n';
  for (const auto& [method, setting] : lines) {
    const std::string label = setting.empty() ? method : method + " " + setting;
    std::snprintf(buf, sizeof buf, "%-26s", label.c_str());
    os << buf;
    for (const std::string& f : families) {
      const auto it = std::find_if(rows.begin(), rows.end(), [&](const SummaryRow& s) {
        return s.family == f && s.method == method && s.setting == setting;
      });
      if (it == rows.end()) {
        std::snprintf(buf, sizeof buf, " %16s", "-");
      } else if (it->mean_length > 0) {
        std::snprintf(buf, sizeof buf, " %9.2f (%4.2f)", it->accuracy, it->mean_length);
      } else {
        std::snprintf(buf, sizeof buf, " %16.2f", it->accuracy);
      }
      os << buf;
    }
    os << '\n';
  }
  os << "accuracy in percent; REST+BB cells show (mean episode length)\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Black box

struct BlackBoxArtifact {
  ClassifierModel model;
  double clean_test_accuracy = 0.0;  // fraction
  double train_seconds = 0.0;
  bool from_cache = false;
};

inline io::KeyValues blackbox_manifest(const ExperimentConfig& cfg, const Datasets& data) {
  return {{"data.dir", fs::absolute(cfg.data_dir).lexically_normal().string()},
          {"train_count", std::to_string(data.train.size())},
          {"epochs", std::to_string(cfg.blackbox_epochs)},
          {"learning_rate", detail::fixed(cfg.blackbox_learning_rate, 10)},
          {"batch_size", std::to_string(cfg.blackbox_batch)},
          {"seed", std::to_string(cfg.seed)}};
}

/// Loads `blackbox_model` if given; otherwise reuses out_dir/blackbox.model
/// when its manifest matches the current settings, or trains and caches one.
inline BlackBoxArtifact obtain_blackbox(const ExperimentConfig& cfg, const Datasets& data,
                                        std::ostream* log = nullptr) {
  BlackBoxArtifact art{ClassifierModel(shape_of(data.train.images.front()), 10, 1)};
  const fs::path model_path = fs::path(cfg.out_dir) / "blackbox.model";
  const fs::path manifest_path = fs::path(cfg.out_dir) / "blackbox.manifest";
  const io::KeyValues manifest = blackbox_manifest(cfg, data);
  if (!cfg.blackbox_model.empty()) {
    art.model = load_model(cfg.blackbox_model);
    art.from_cache = true;
  } else if (fs::exists(model_path) && fs::exists(manifest_path)) {
    io::KeyValues stored = io::read_key_values(manifest_path.string());
    const double seconds = stored.count("train_seconds") ? std::stod(stored["train_seconds"]) : 0.0;
    stored.erase("train_seconds");
    stored.erase("clean_test_accuracy");
    if (stored == manifest) {
      art.model = load_model(model_path.string());
      art.from_cache = true;
      art.train_seconds = seconds;
    }
  }
  if (!art.from_cache) {
    ClassifierTrainConfig t;
    t.epochs = cfg.blackbox_epochs;
    t.learning_rate = cfg.blackbox_learning_rate;
    t.batch_size = cfg.blackbox_batch;
    t.seed = cfg.seed;
    if (log) {
      t.on_epoch = [log](int e, double loss, double acc) {
        *log << "  black box epoch " << e + 1 << " loss " << detail::fixed(loss, 4) << " holdout "
             << detail::fixed(acc, 4) << std::endl;
      };
    }
    ClassifierReport report;
    art.model = train_classifier(data.train, t, &report);
    art.train_seconds = report.seconds;
  }
  art.clean_test_accuracy = accuracy(art.model, data.test);
  if (!art.from_cache || cfg.blackbox_model.empty()) {
    fs::create_directories(cfg.out_dir);
    io::KeyValues out = manifest;
    out["train_seconds"] = detail::fixed(art.train_seconds, 3);
    out["clean_test_accuracy"] = detail::fixed(art.clean_test_accuracy, 6);
    if (!art.from_cache) save_model(art.model, model_path.string());
    io::write_key_values(manifest_path.string(), out);
  }
  if (log) {
    *log << "black box " << (art.from_cache ? "loaded" : "trained") << ", clean test accuracy "
         << detail::fixed(100 * art.clean_test_accuracy, 2) << "%" << std::endl;
  }
  return art;
}

// ---------------------------------------------------------------------------
// Runs

/// Seeds for one (experiment run, family) pair. Train and test distortions
/// come from different streams and from disjoint source splits.
struct RunSeeds {
  std::uint64_t train_distortion, test_distortion, agent;

  static RunSeeds make(std::uint64_t base, std::uint64_t repeat, std::uint64_t slot) {
    const std::uint64_t s = derive_seed(derive_seed(base, repeat), slot);
    return {derive_seed(s, 1), derive_seed(s, 2), derive_seed(s, 3)};
  }
};

struct ArmOutcome {
  EvalResult blackbox;
  EvalResult rest;
  RestTrainReport training;
  ActorCritic agent;
};

/// Trains a fresh transform learner on `train` and scores both arms on `test`.
inline ArmOutcome run_arm(const ExperimentConfig& cfg, const BlackBox& bb, const LabeledSet& train,
                          const LabeledSet& test, RewardVariant variant, std::uint64_t agent_seed,
                          std::ostream* log = nullptr, const std::string& tag = "") {
  ArmOutcome out{{}, {}, {}, ActorCritic(shape_of(train.images.front()), agent_seed)};
  out.blackbox = evaluate_blackbox(bb, test);
  TrainRestConfig t = cfg.train_config(variant, agent_seed);
  if (log) {
    t.on_epoch = [log, &tag](int e, const RestEpochMetrics& m) {
      *log << "  " << tag << " epoch " << e + 1 << ": train acc " << detail::fixed(m.accuracy, 2) << " reward "
           << detail::fixed(m.mean_reward, 3) << " len " << detail::fixed(m.mean_length, 2) << " ("
           << detail::fixed(m.seconds, 1) << "s)" << std::endl;
    };
  }
  out.training = train_rest(out.agent, bb, train, t);
  out.rest = evaluate_rest(out.agent, bb, test, cfg.infer_config(variant, agent_seed));
  if (log) {
    *log << "  " << tag << ": BB " << detail::fixed(out.blackbox.accuracy, 2) << " REST+BB "
         << detail::fixed(out.rest.accuracy, 2) << " len " << detail::fixed(out.rest.mean_length, 2) << std::endl;
  }
  return out;
}

inline void add_rows(std::vector<MetricsRow>& rows, const ExperimentConfig& cfg, const std::string& family,
                     const std::string& setting, std::uint64_t seed, const ArmOutcome& arm,
                     double blackbox_train_seconds) {
  const std::string name = to_string(cfg.experiment);
  rows.push_back({name, family, setting, kMethodBlackBox, seed, arm.blackbox.accuracy, 0.0, blackbox_train_seconds,
                  arm.blackbox.seconds});
  rows.push_back({name, family, setting, kMethodRest, seed, arm.rest.accuracy, arm.rest.mean_length,
                  arm.training.seconds, arm.rest.seconds});
}

struct Context {
  Datasets data;
  BlackBoxArtifact blackbox;
  std::ostream* log = nullptr;
};

namespace detail {

inline std::uint64_t family_slot(Family f) { return static_cast<std::uint64_t>(f) + 1; }

inline std::vector<MetricsRow> run_families(const ExperimentConfig& cfg, const Context& ctx,
                                            const std::vector<RewardVariant>& variants,
                                            std::size_t train_limit = 0, std::size_t test_limit = 0) {
  std::vector<MetricsRow> rows;
  const LabeledSet train = train_limit ? ctx.data.train.head(train_limit) : ctx.data.train;
  const LabeledSet test = test_limit ? ctx.data.test.head(test_limit) : ctx.data.test;
  for (int rep = 0; rep < cfg.resolved_repeats(); ++rep) {
    for (Family f : cfg.resolved_families()) {
      // Shared across reward variants so ablation arms see identical data and initial weights.
      const RunSeeds seeds = RunSeeds::make(cfg.seed, static_cast<std::uint64_t>(rep), family_slot(f));
      const LabeledSet dtrain = make_distorted_dataset(train, make_spec(f, seeds.train_distortion));
      const LabeledSet dtest = make_distorted_dataset(test, make_spec(f, seeds.test_distortion));
      for (RewardVariant v : variants) {
        const std::string tag = rest::to_string(f) + "/" + rest::to_string(v) + "/rep" + std::to_string(rep);
        const ArmOutcome arm = run_arm(cfg, ctx.blackbox.model, dtrain, dtest, v, seeds.agent, ctx.log, tag);
        add_rows(rows, cfg, rest::to_string(f), rest::to_string(v), cfg.seed + static_cast<std::uint64_t>(rep), arm,
                 ctx.blackbox.train_seconds);
      }
    }
  }
  return rows;
}

}  // namespace detail

/// BB vs REST+BB per distortion family.
inline std::vector<MetricsRow> run_recovery(const ExperimentConfig& cfg, const Context& ctx) {
  return detail::run_families(cfg, ctx, {cfg.reward});
}

/// Accuracy versus the number of combos seen in training. Test combos are
/// the complement, checked to be disjoint before any training.
inline std::vector<MetricsRow> run_generalization(const ExperimentConfig& cfg, const Context& ctx) {
  std::vector<MetricsRow> rows;
  const auto combos = enumerate_rst_combos();
  for (int rep = 0; rep < cfg.resolved_repeats(); ++rep) {
    for (int k : cfg.train_counts) {
      const RunSeeds seeds = RunSeeds::make(cfg.seed, static_cast<std::uint64_t>(rep), 100 + static_cast<std::uint64_t>(k));
      const ComboSplit split = split_disjoint(combos, k, seeds.agent);
      std::set<std::string> train_names;
      for (const RstCombo& c : split.train) train_names.insert(to_string(c));
      for (const RstCombo& c : split.test) {
        if (train_names.count(to_string(c))) throw std::logic_error("generalization: train and test combos overlap");
      }
      const LabeledSet dtrain = make_combo_dataset(ctx.data.train, split.train, seeds.train_distortion);
      const LabeledSet dtest = make_combo_dataset(ctx.data.test, split.test, seeds.test_distortion);
      const std::string setting = "train_combos=" + std::to_string(k);
      const ArmOutcome arm = run_arm(cfg, ctx.blackbox.model, dtrain, dtest, cfg.reward, seeds.agent, ctx.log,
                                     "RST/" + setting + "/rep" + std::to_string(rep));
      add_rows(rows, cfg, "RST", setting, cfg.seed + static_cast<std::uint64_t>(rep), arm, ctx.blackbox.train_seconds);
    }
  }
  return rows;
}

/// REST trained on a small, fixed number of distorted samples.
inline std::vector<MetricsRow> run_sample_efficiency(const ExperimentConfig& cfg, const Context& ctx) {
  const std::size_t test_n = std::min(
      ctx.data.test.size(),
      std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(cfg.efficiency_test) * cfg.scale))));
  if (cfg.efficiency_train == 0) throw std::invalid_argument("sample_efficiency: train_samples must be positive");
  if (cfg.efficiency_train > ctx.data.train.size()) {
    throw std::invalid_argument("sample_efficiency: train_samples exceeds the training split");
  }
  return detail::run_families(cfg, ctx, {cfg.reward}, cfg.efficiency_train, test_n);
}

/// Eq. (1)-style log-ratio reward against the shaped reward, shared seeds.
inline std::vector<MetricsRow> run_reward_ablation(const ExperimentConfig& cfg, const Context& ctx) {
  return detail::run_families(cfg, ctx, {RewardVariant::kLogRatio, RewardVariant::kShaped});
}

/// Mutual-information rewards using MC dropout.
inline std::vector<MetricsRow> run_mi_confidence(const ExperimentConfig& cfg, const Context& ctx) {
  return detail::run_families(cfg, ctx, {RewardVariant::kMi, RewardVariant::kMiTuned});
}

struct ExperimentOutput {
  std::vector<MetricsRow> rows;
  std::vector<SummaryRow> summary;
  std::string directory;
  double seconds = 0.0;
};

/// Validates, loads data, obtains the black box, runs the experiment and
/// writes metrics.csv, summary.csv, summary.txt and manifest.txt under
/// out_dir/<experiment>/.
inline ExperimentOutput run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  Datasets data = load_datasets(cfg);
  if (log) {
    *log << to_string(cfg.experiment) << ": " << data.train.size() << " train / " << data.test.size()
         << " test images from " << cfg.data_dir << std::endl;
  }
  BlackBoxArtifact bb = obtain_blackbox(cfg, data, log);
  const Context ctx{std::move(data), std::move(bb), log};

  ExperimentOutput out;
  switch (cfg.experiment) {
    case Experiment::kRecovery: out.rows = run_recovery(cfg, ctx); break;
    case Experiment::kGeneralization: out.rows = run_generalization(cfg, ctx); break;
    case Experiment::kSampleEfficiency: out.rows = run_sample_efficiency(cfg, ctx); break;
    case Experiment::kRewardAblation: out.rows = run_reward_ablation(cfg, ctx); break;
    case Experiment::kMiConfidence: out.rows = run_mi_confidence(cfg, ctx); break;
  }
  out.summary = summarize(out.rows);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  const fs::path dir = fs::path(cfg.out_dir) / to_string(cfg.experiment);
  fs::create_directories(dir);
  out.directory = dir.string();
  write_csv((dir / "metrics.csv").string(), out.rows);
  write_summary_csv((dir / "summary.csv").string(), out.summary);
  const std::string table = format_summary(to_string(cfg.experiment), out.summary);
  std::ofstream((dir / "summary.txt").string()) << table;
  io::KeyValues manifest = cfg.to_key_values();
  manifest["data.train_count"] = std::to_string(ctx.data.train.size());
  manifest["data.test_count"] = std::to_string(ctx.data.test.size());
  manifest["blackbox.clean_test_accuracy"] = detail::fixed(ctx.blackbox.clean_test_accuracy, 6);
  manifest["blackbox.train_seconds"] = detail::fixed(ctx.blackbox.train_seconds, 3);
  manifest["blackbox.from_cache"] = ctx.blackbox.from_cache ? "true" : "false";
  manifest["run.seconds"] = detail::fixed(out.seconds, 3);
  manifest["run.rows"] = std::to_string(out.rows.size());
  io::write_key_values((dir / "manifest.txt").string(), manifest);
  if (log) *log << '\n' << table;
  return out;
}

}  // namespace rest::harness
