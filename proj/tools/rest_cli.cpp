// Command-line front end for the transform learner and its experiments.

#include <malloc.h>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "rest/harness.hpp"

using namespace rest;
using namespace rest::harness;
namespace fs = std::filesystem;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> scale;
  std::optional<std::string> family;
  std::optional<std::string> reward;
  std::optional<double> threshold;
  std::optional<std::string> out;
  bool full_scale = false;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--config", f.config, "key=value config file")->check(CLI::ExistingFile);
  app->add_option("--seed", f.seed, "master seed");
  app->add_option("--scale", f.scale, "fraction of the full dataset, in (0, 1]");
  app->add_option("--family", f.family, "R | RSc | RSh | RSS | RSST | RST");
  app->add_option("--reward", f.reward, "eq1 | eq2 | mi | mi-tuned");
  app->add_option("--threshold", f.threshold, "confidence termination threshold");
  app->add_option("--out", f.out, "output directory");
  app->add_flag("--full-scale", f.full_scale, "whole dataset, training std 1 and longer training");
  app->add_option("--set", f.overrides, "override any config key, e.g. --set rest.epochs=5");
}

// Defaults, then --full-scale, then the config file, then explicit flags.
ExperimentConfig resolve(const CommonFlags& f) {
  ExperimentConfig cfg;
  if (f.full_scale) cfg.use_full_scale();
  if (!f.config.empty()) apply_key_values(cfg, io::read_key_values(f.config));
  io::KeyValues kv;
  for (const std::string& s : f.overrides) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + s + "'");
    kv[io::trim(s.substr(0, eq))] = io::trim(s.substr(eq + 1));
  }
  apply_key_values(cfg, kv);
  if (f.seed) cfg.seed = *f.seed;
  if (f.scale) cfg.scale = *f.scale;
  if (f.family) cfg.families = {parse_family(*f.family)};
  if (f.reward) cfg.reward = parse_reward(*f.reward);
  if (f.threshold) cfg.threshold = *f.threshold;
  if (f.out) cfg.out_dir = *f.out;
  return cfg;
}

Family single_family(const ExperimentConfig& cfg) {
  return cfg.families.empty() ? Family::kR : cfg.families.front();
}

std::string agent_path(const ExperimentConfig& cfg) { return (fs::path(cfg.out_dir) / "agent.model").string(); }

BlackBoxArtifact blackbox_for(const ExperimentConfig& cfg, const Datasets& data) {
  return obtain_blackbox(cfg, data, &std::cerr);
}

int cmd_train_blackbox(ExperimentConfig cfg, bool force) {
  cfg.validate();
  const Datasets data = load_datasets(cfg);
  if (force) {
    fs::remove(fs::path(cfg.out_dir) / "blackbox.model");
    fs::remove(fs::path(cfg.out_dir) / "blackbox.manifest");
  }
  const BlackBoxArtifact bb = blackbox_for(cfg, data);
  std::cout << "model=" << (fs::path(cfg.out_dir) / "blackbox.model").string() << '\n'
            << "clean_test_accuracy=" << bb.clean_test_accuracy << '\n'
            << "train_seconds=" << bb.train_seconds << '\n';
  return 0;
}

int cmd_distort(ExperimentConfig cfg) {
  cfg.validate();
  const Datasets data = load_datasets(cfg);
  const Family f = single_family(cfg);
  const RunSeeds seeds = RunSeeds::make(cfg.seed, 0, static_cast<std::uint64_t>(f) + 1);
  fs::create_directories(cfg.out_dir);
  const std::string stem = (fs::path(cfg.out_dir) / ("distorted-" + to_string(f))).string();
  struct Part {
    const char* name;
    const LabeledSet* source;
    std::uint64_t seed;
  };
  for (const Part& p : {Part{"train", &data.train, seeds.train_distortion}, Part{"test", &data.test, seeds.test_distortion}}) {
    const DistortionSpec spec = make_spec(f, p.seed);
    const LabeledSet set = make_distorted_dataset(*p.source, spec);
    const std::string base = stem + "-" + p.name;
    io::write_idx(set, base + "-images-idx3-ubyte", base + "-labels-idx1-ubyte");
    io::write_key_values(base + ".manifest", distortion_manifest(spec, set.size()));
    std::cout << base << " (" << set.size() << " images)\n";
  }
  return 0;
}

int cmd_train_rest(ExperimentConfig cfg) {
  cfg.validate();
  const Datasets data = load_datasets(cfg);
  const BlackBoxArtifact bb = blackbox_for(cfg, data);
  const Family f = single_family(cfg);
  const RunSeeds seeds = RunSeeds::make(cfg.seed, 0, static_cast<std::uint64_t>(f) + 1);
  const LabeledSet dtrain = make_distorted_dataset(data.train, make_spec(f, seeds.train_distortion));
  ActorCritic ac(shape_of(dtrain.images.front()), seeds.agent);
  TrainRestConfig t = cfg.train_config(cfg.reward, seeds.agent);
  const fs::path curve = fs::path(cfg.out_dir) / "train_rest.csv";
  std::ofstream csv(curve);
  csv << "epoch,accuracy,mean_reward,mean_length,seconds,episodes,updates\n";
  t.on_epoch = [&](int e, const RestEpochMetrics& m) {
    csv << e + 1 << ',' << m.accuracy << ',' << m.mean_reward << ',' << m.mean_length << ',' << m.seconds << ','
        << m.episodes << ',' << m.updates << '\n';
    std::cerr << "epoch " << e + 1 << ": train acc " << m.accuracy << " reward " << m.mean_reward << " len "
              << m.mean_length << " (" << m.seconds << "s)" << std::endl;
  };
  const RestTrainReport report = train_rest(ac, bb.model, dtrain, t);
  save_agent(ac, agent_path(cfg));
  io::KeyValues manifest = cfg.to_key_values();
  manifest["family"] = to_string(f);
  manifest["train_count"] = std::to_string(dtrain.size());
  manifest["train_seconds"] = std::to_string(report.seconds);
  io::write_key_values((fs::path(cfg.out_dir) / "agent.manifest").string(), manifest);
  std::cout << "agent=" << agent_path(cfg) << '\n' << "train_seconds=" << report.seconds << '\n';
  return 0;
}

int cmd_eval(ExperimentConfig cfg, const std::string& agent_file) {
  cfg.validate();
  const Datasets data = load_datasets(cfg);
  const BlackBoxArtifact bb = blackbox_for(cfg, data);
  const Family f = single_family(cfg);
  const RunSeeds seeds = RunSeeds::make(cfg.seed, 0, static_cast<std::uint64_t>(f) + 1);
  const LabeledSet dtest = make_distorted_dataset(data.test, make_spec(f, seeds.test_distortion));
  const ActorCritic ac = load_agent(agent_file.empty() ? agent_path(cfg) : agent_file);
  const EvalResult b = evaluate_blackbox(bb.model, dtest);
  const EvalResult r = evaluate_rest(ac, bb.model, dtest, cfg.infer_config(cfg.reward, seeds.agent));
  std::vector<MetricsRow> rows{
      {"eval", to_string(f), to_string(cfg.reward), kMethodBlackBox, cfg.seed, b.accuracy, 0.0, bb.train_seconds, b.seconds},
      {"eval", to_string(f), to_string(cfg.reward), kMethodRest, cfg.seed, r.accuracy, r.mean_length, 0.0, r.seconds}};
  write_csv(std::cout, rows);
  write_csv((fs::path(cfg.out_dir) / "eval.csv").string(), rows);
  return 0;
}

int cmd_experiment(ExperimentConfig cfg, const std::string& name) {
  cfg.experiment = parse_experiment(name);
  const ExperimentOutput out = run_experiment(cfg, &std::cerr);
  std::cout << "results=" << out.directory << '\n' << "seconds=" << out.seconds << '\n';
  return 0;
}

int cmd_inspect(ExperimentConfig cfg, const std::string& agent_file, std::size_t index,
                std::optional<double> rotation, double std_override) {
  cfg.validate();
  const Datasets data = load_datasets(cfg);
  if (index >= data.test.size()) throw std::invalid_argument("--index beyond the test split");
  const BlackBoxArtifact bb = blackbox_for(cfg, data);
  const ActorCritic ac = load_agent(agent_file.empty() ? agent_path(cfg) : agent_file);
  AffineParams p = AffineParams::identity();
  if (rotation) {
    p.rotation = *rotation;
  } else {
    const Family f = single_family(cfg);
    Rng rng(derive_seed(RunSeeds::make(cfg.seed, 0, static_cast<std::uint64_t>(f) + 1).test_distortion, index));
    p = sample_params(make_spec(f, 0), rng);
  }
  const ImageTensor image = warp_image(data.test.images[index], p);
  InferConfig ic = cfg.infer_config(cfg.reward, cfg.seed);
  if (std_override >= 0) ic.std = std_override;
  const InferenceResult res = infer_transform(ac, bb.model, image, ic);
  std::cerr << "label " << data.test.labels[index] << ", black box alone predicts " << bb.model.predict(image).label
            << ", after " << res.trajectory.length() << " steps predicts " << res.prediction.label << " ("
            << res.prediction.confidence << ")\n";
  write_trajectory_log(std::cout, res.trajectory);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  CLI::App app{"Reinforcement-learned spatial transforms in front of a frozen classifier"};
  app.require_subcommand(1);

  CommonFlags tb_flags, d_flags, tr_flags, ev_flags, ex_flags, in_flags;
  bool force = false;
  auto* tb = app.add_subcommand("train-blackbox", "train the frozen classifier on canonical images");
  add_common(tb, tb_flags);
  tb->add_flag("--force", force, "retrain even if a matching cached model exists");

  auto* ds = app.add_subcommand("distort", "write distorted train/test IDX files and manifests");
  add_common(ds, d_flags);

  auto* tr = app.add_subcommand("train-rest", "train the transform learner for one family");
  add_common(tr, tr_flags);

  std::string agent_file;
  auto* ev = app.add_subcommand("eval", "score BB and REST+BB on a distorted test set");
  add_common(ev, ev_flags);
  ev->add_option("--agent", agent_file, "agent model (default <out>/agent.model)");

  std::string experiment_name;
  auto* ex = app.add_subcommand("experiment", "run one experiment and write CSV tables");
  add_common(ex, ex_flags);
  ex->add_option("name", experiment_name, "recovery | generalization | sample_efficiency | reward_ablation | mi_confidence")
      ->required();

  std::size_t index = 0;
  std::optional<double> rotation;
  double inspect_std = -1;
  auto* in = app.add_subcommand("inspect-episode", "print the step log for one test image");
  add_common(in, in_flags);
  in->add_option("--agent", agent_file, "agent model (default <out>/agent.model)");
  in->add_option("--index", index, "test image index");
  in->add_option("--rotation", rotation, "apply only this rotation in degrees instead of a family draw");
  in->add_option("--std", inspect_std, "inference noise std (default from config)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (tb->parsed()) return cmd_train_blackbox(resolve(tb_flags), force);
    if (ds->parsed()) return cmd_distort(resolve(d_flags));
    if (tr->parsed()) return cmd_train_rest(resolve(tr_flags));
    if (ev->parsed()) return cmd_eval(resolve(ev_flags), agent_file);
    if (ex->parsed()) return cmd_experiment(resolve(ex_flags), experiment_name);
    if (in->parsed()) return cmd_inspect(resolve(in_flags), agent_file, index, rotation, inspect_std);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
