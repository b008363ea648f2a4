#pragma once

// The reinforcement-learning half of the transform learner: a tanh-bounded
// Gaussian actor and a value critic trained with PPO. An episode repeatedly
// warps an image with sampled affine actions until the black box is confident
// enough or the step limit is reached.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rest/blackbox.hpp"
#include "rest/image.hpp"
#include "rest/nn.hpp"
#include "rest/random.hpp"
#include "rest/serialize.hpp"
#include "rest/warp.hpp"

namespace rest {

inline constexpr int kActionDim = AffineParams::kSize;
using UnitAction = std::array<double, kActionDim>;

// ---------------------------------------------------------------------------
// Networks

/// Backbone: conv3x3(16) -> ReLU -> pool -> conv3x3(32) -> ReLU -> pool ->
/// fc(128) -> ReLU, followed by a 7-unit tanh head (actor) or a scalar head
/// (critic). The actor head starts small so initial means sit near identity.
struct AgentArchitecture {
  int conv1_channels = 16;
  int conv2_channels = 32;
  int kernel = 3;
  int hidden = 128;
  double actor_head_scale = 0.01;
  double critic_head_scale = 1.0;
};

inline std::vector<nn::LayerSpec> agent_backbone(const AgentArchitecture& a) {
  using nn::LayerSpec;
  return {LayerSpec::conv(a.conv1_channels, a.kernel), LayerSpec::relu(), LayerSpec::pool(),
          LayerSpec::conv(a.conv2_channels, a.kernel), LayerSpec::relu(), LayerSpec::pool(),
          LayerSpec::dense(a.hidden),                  LayerSpec::relu()};
}

inline std::vector<nn::LayerSpec> actor_architecture(const AgentArchitecture& a) {
  auto specs = agent_backbone(a);
  specs.push_back(nn::LayerSpec::dense(kActionDim, a.actor_head_scale));
  specs.push_back(nn::LayerSpec::tanh());
  return specs;
}

inline std::vector<nn::LayerSpec> critic_architecture(const AgentArchitecture& a) {
  auto specs = agent_backbone(a);
  specs.push_back(nn::LayerSpec::dense(1, a.critic_head_scale));
  return specs;
}

struct ActorCritic {
  ModelNetwork actor;
  ModelNetwork critic;

  ActorCritic() = default;
  ActorCritic(nn::Shape input, std::uint64_t seed, const AgentArchitecture& arch = {})
      : actor(input, actor_architecture(arch), derive_seed(seed, 0xac)),
        critic(input, critic_architecture(arch), derive_seed(seed, 0xc1)) {}
  ActorCritic(ModelNetwork a, ModelNetwork c) : actor(std::move(a)), critic(std::move(c)) {
    if (actor.output_shape().size() != kActionDim || critic.output_shape().size() != 1 ||
        actor.input_shape() != critic.input_shape()) {
      throw std::invalid_argument("ActorCritic: incompatible networks");
    }
  }

  nn::Shape input_shape() const { return actor.input_shape(); }
};

inline UnitAction actor_mean(const ActorCritic& ac, const ImageTensor& state) {
  const nn::Mat<ModelScalar> m = ac.actor.forward(to_batch(state));
  UnitAction out{};
  for (int i = 0; i < kActionDim; ++i) out[i] = static_cast<double>(m(i, 0));
  return out;
}

inline double critic_value(const ActorCritic& ac, const ImageTensor& state) {
  return static_cast<double>(ac.critic.forward(to_batch(state))(0, 0));
}

// ---------------------------------------------------------------------------
// Actions

/// Margin keeping clamped actions strictly inside (-1, 1).
inline constexpr double kActionClampMargin = 1e-6;

/// Diagonal Normal log density with a shared standard deviation.
inline double gaussian_log_density(std::span<const double> x, std::span<const double> mean, double std) {
  if (!(std > 0.0)) throw std::invalid_argument("gaussian_log_density: std must be positive");
  double q = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double z = (x[i] - mean[i]) / std;
    q += z * z;
  }
  const double n = static_cast<double>(x.size());
  return -0.5 * q - n * std::log(std) - 0.5 * n * std::log(2.0 * std::numbers::pi);
}

struct SampledAction {
  UnitAction sample{};   // Normal draw around the tanh mean, before clamping
  UnitAction applied{};  // sample clamped into (-1, 1); what the warp receives
  double log_density = 0.0;
};

/// Adds N(0, std^2) noise to `mean`. With std == 0 the mean is returned as is
/// and log_density is reported as 0 (the density is degenerate).
inline SampledAction sample_around(const UnitAction& mean, double std, Rng& rng) {
  if (!(std >= 0.0) || !std::isfinite(std)) throw std::invalid_argument("sample_action: std must be >= 0");
  SampledAction a;
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int i = 0; i < kActionDim; ++i) {
    a.sample[i] = std == 0.0 ? mean[i] : mean[i] + std * normal(rng);
    a.applied[i] = std::clamp(a.sample[i], -1.0 + kActionClampMargin, 1.0 - kActionClampMargin);
  }
  if (std > 0.0) a.log_density = gaussian_log_density(a.sample, mean, std);
  return a;
}

inline SampledAction sample_action(const ActorCritic& ac, const ImageTensor& state, double std, Rng& rng) {
  return sample_around(actor_mean(ac, state), std, rng);
}

// ---------------------------------------------------------------------------
// Rewards

/// Floor applied to probabilities and uncertainties before taking logs.
inline constexpr double kLogFloor = 1e-8;

/// log(c_next) - log(c_curr).
inline double reward_log_ratio(double c_next, double c_curr) {
  return std::log(std::max(c_next, kLogFloor)) - std::log(std::max(c_curr, kLogFloor));
}

/// -log(1 - c_next) + log(1 - c_curr) - 1: sharper near c = 1, one unit of
/// penalty per step.
inline double reward_shaped(double c_next, double c_curr) {
  return -std::log(std::max(1.0 - c_next, kLogFloor)) + std::log(std::max(1.0 - c_curr, kLogFloor)) - 1.0;
}

/// -log(mi_next) + log(mi_curr) - 1: rewards reduced uncertainty.
inline double reward_mi(double mi_next, double mi_curr) {
  return -std::log(std::max(mi_next, kLogFloor)) + std::log(std::max(mi_curr, kLogFloor)) - 1.0;
}

/// Label-aware variant of reward_mi. The log-change magnitude
/// m = |log mi_next - log mi_curr| is signed by whether the step helped:
///
///   label_curr   label_next   sign of m
///   target       target       + if uncertainty fell, - if it rose
///   other        other        + if uncertainty rose, - if it fell
///   other        target       +
///   target       other        -
///
/// and the per-step penalty of 1 is subtracted.
inline double reward_mi_tuned(double mi_next, double mi_curr, int label_next, int label_curr, int target) {
  const double delta = std::log(std::max(mi_curr, kLogFloor)) - std::log(std::max(mi_next, kLogFloor));
  const double magnitude = std::abs(delta);
  const bool next_ok = label_next == target;
  const bool curr_ok = label_curr == target;
  double signed_change = 0.0;
  if (next_ok && curr_ok) {
    signed_change = delta;
  } else if (!next_ok && !curr_ok) {
    signed_change = -delta;
  } else {
    signed_change = next_ok ? magnitude : -magnitude;
  }
  return signed_change - 1.0;
}

enum class RewardVariant { kLogRatio, kShaped, kMi, kMiTuned };

inline std::string to_string(RewardVariant v) {
  switch (v) {
    case RewardVariant::kLogRatio: return "eq1";
    case RewardVariant::kShaped: return "eq2";
    case RewardVariant::kMi: return "mi";
    case RewardVariant::kMiTuned: return "mi-tuned";
  }
  return "?";
}

inline RewardVariant parse_reward(const std::string& s) {
  if (s == "eq1" || s == "log_ratio") return RewardVariant::kLogRatio;
  if (s == "eq2" || s == "shaped") return RewardVariant::kShaped;
  if (s == "mi") return RewardVariant::kMi;
  if (s == "mi-tuned" || s == "mi_tuned") return RewardVariant::kMiTuned;
  throw std::invalid_argument("unknown reward variant '" + s + "'");
}

inline bool uses_mutual_information(RewardVariant v) {
  return v == RewardVariant::kMi || v == RewardVariant::kMiTuned;
}

/// Probability variants stop once the confidence exceeds `threshold`; the MI
/// variants stop once the mutual information drops below `mi_threshold`.
struct RewardConfig {
  RewardVariant variant = RewardVariant::kShaped;
  double threshold = 0.9;
  int max_steps = 10;
  double mi_threshold = 0.01;
  int mc_samples = 30;
};

// ---------------------------------------------------------------------------
// Episodes

enum class EpisodeMode { kTraining, kInference };

struct Step {
  ImageTensor state;  // S_t
  UnitAction action{};   // unclamped draw (used for log densities)
  UnitAction applied{};  // clamped action handed to the warp
  AffineParams params;
  double log_density = 0.0;
  double value = 0.0;       // critic estimate V(S_t)
  double reward = 0.0;
  double confidence = 0.0;  // confidence of S_{t+1}
  int label = 0;            // black-box label of S_{t+1}
  bool done = false;
};

struct Trajectory {
  std::vector<Step> steps;
  int target_label = -1;  // -1 in inference mode
  double initial_confidence = 0.0;
  double terminal_confidence = 0.0;
  bool reached_threshold = false;
  double bootstrap_value = 0.0;  // value after the last step; 0 since episodes end at done
  ImageTensor final_state;
  Prediction final_prediction;

  std::size_t length() const { return steps.size(); }
  double total_reward() const {
    double r = 0.0;
    for (const Step& s : steps) r += s.reward;
    return r;
  }
};

namespace detail {

struct Observation {
  Prediction prediction;
  double confidence = 0.0;  // probability or mutual information, per variant
};

inline Observation observe(const BlackBox& bb, const ImageTensor& state, EpisodeMode mode, int target,
                           const RewardConfig& cfg, Rng& rng) {
  Observation o;
  o.prediction = bb.predict(state);
  if (uses_mutual_information(cfg.variant)) {
    const std::uint64_t seed = rng();
    o.confidence = mutual_information(bb.mc_dropout_predict(state, cfg.mc_samples, seed)).mi;
  } else if (mode == EpisodeMode::kTraining) {
    if (target < 0 || target >= static_cast<int>(o.prediction.probs.size())) {
      throw std::invalid_argument("run_episode: target label out of range");
    }
    o.confidence = o.prediction.probs[static_cast<std::size_t>(target)];
  } else {
    o.confidence = o.prediction.confidence;
  }
  return o;
}

inline bool terminal(const RewardConfig& cfg, double confidence) {
  return uses_mutual_information(cfg.variant) ? confidence < cfg.mi_threshold : confidence > cfg.threshold;
}

inline double step_reward(const RewardConfig& cfg, const Observation& next, const Observation& curr, int target) {
  switch (cfg.variant) {
    case RewardVariant::kLogRatio: return reward_log_ratio(next.confidence, curr.confidence);
    case RewardVariant::kShaped: return reward_shaped(next.confidence, curr.confidence);
    case RewardVariant::kMi: return reward_mi(next.confidence, curr.confidence);
    case RewardVariant::kMiTuned:
      return reward_mi_tuned(next.confidence, curr.confidence, next.prediction.label, curr.prediction.label,
                             target);
  }
  return 0.0;
}

}  // namespace detail

/// One episode from `image`. Training mode scores the target label's
/// probability; inference mode scores the most likely class (and uses the
/// initially predicted label as target for the label-aware MI reward).
/// Termination is tested on the state produced by each action, so at least
/// one action is always taken.
inline Trajectory run_episode(const ActorCritic& ac, const BlackBox& bb, const ImageTensor& image,
                              std::optional<int> target_label, const RewardConfig& cfg, EpisodeMode mode,
                              double std, Rng& rng) {
  if (cfg.max_steps < 1) throw std::invalid_argument("run_episode: max_steps must be >= 1");
  if (mode == EpisodeMode::kTraining && !target_label) {
    throw std::invalid_argument("run_episode: training mode needs a target label");
  }
  validate_image(image, "run_episode");
  if (shape_of(image) != ac.input_shape()) throw std::invalid_argument("run_episode: image shape mismatch");

  Trajectory traj;
  ImageTensor state = image;
  detail::Observation curr = detail::observe(bb, state, mode, target_label.value_or(-1), cfg, rng);
  const int target = target_label.value_or(curr.prediction.label);
  traj.target_label = mode == EpisodeMode::kTraining ? target : -1;
  traj.initial_confidence = curr.confidence;

  for (int t = 0; t < cfg.max_steps; ++t) {
    Step step;
    step.value = critic_value(ac, state);
    const SampledAction a = sample_action(ac, state, std, rng);
    step.action = a.sample;
    step.applied = a.applied;
    step.log_density = a.log_density;
    step.params = params_from_unit(a.applied);
    ImageTensor next_state = warp_image(state, step.params);
    detail::Observation next = detail::observe(bb, next_state, mode, target, cfg, rng);
    step.reward = detail::step_reward(cfg, next, curr, target);
    step.confidence = next.confidence;
    step.label = next.prediction.label;
    const bool hit = detail::terminal(cfg, next.confidence);
    step.done = hit || t + 1 == cfg.max_steps;
    step.state = std::move(state);
    traj.steps.push_back(std::move(step));
    state = std::move(next_state);
    curr = std::move(next);
    if (hit) traj.reached_threshold = true;
    if (traj.steps.back().done) break;
  }
  traj.terminal_confidence = curr.confidence;
  traj.final_prediction = curr.prediction;
  traj.final_state = std::move(state);
  return traj;
}

/// Line-delimited JSON, one record per step: step index, applied affine
/// parameters, confidence after the step, reward.
inline void write_trajectory_log(std::ostream& os, const Trajectory& traj) {
  for (std::size_t i = 0; i < traj.steps.size(); ++i) {
    const Step& s = traj.steps[i];
    nlohmann::json rec;
    rec["step"] = i + 1;
    rec["action"] = s.params.to_array();
    rec["unit_action"] = s.applied;
    rec["confidence"] = s.confidence;
    rec["label"] = s.label;
    rec["reward"] = s.reward;
    rec["done"] = s.done;
    os << rec.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Advantages

struct Advantages {
  std::vector<double> advantages;
  std::vector<double> returns;
};

/// Generalized advantage estimation over one trajectory.
inline Advantages compute_advantages(const Trajectory& traj, double gamma, double lambda) {
  const std::size_t n = traj.steps.size();
  Advantages out;
  out.advantages.assign(n, 0.0);
  out.returns.assign(n, 0.0);
  double gae = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    const Step& s = traj.steps[i];
    const double next_value = i + 1 < n ? traj.steps[i + 1].value : traj.bootstrap_value;
    const double not_done = s.done ? 0.0 : 1.0;
    const double delta = s.reward + gamma * next_value * not_done - s.value;
    gae = delta + gamma * lambda * not_done * gae;
    out.advantages[i] = gae;
    out.returns[i] = gae + s.value;
  }
  return out;
}

// ---------------------------------------------------------------------------
// PPO

struct PpoConfig {
  double learning_rate = 1e-4;
  int minibatch_size = 256;
  int epochs = 4;
  double clip = 0.2;
  double gamma = 0.99;
  double lambda = 0.95;
  double value_coef = 0.5;
  double entropy_coef = 0.01;
  double max_grad_norm = 0.5;
  double std = 1.0;  // behaviour-policy standard deviation in unit space
};

/// Flattened steps ready for optimization; column j of `states` and
/// `actions` is sample j.
struct RolloutBatch {
  nn::Mat<ModelScalar> states;
  Eigen::MatrixXd actions;
  std::vector<double> old_log_density;
  std::vector<double> advantages;
  std::vector<double> returns;

  std::size_t size() const { return old_log_density.size(); }

  RolloutBatch select(std::span<const std::size_t> idx) const {
    RolloutBatch b;
    b.states.resize(states.rows(), static_cast<Eigen::Index>(idx.size()));
    b.actions.resize(actions.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const auto src = static_cast<Eigen::Index>(idx[j]);
      b.states.col(static_cast<Eigen::Index>(j)) = states.col(src);
      b.actions.col(static_cast<Eigen::Index>(j)) = actions.col(src);
      b.old_log_density.push_back(old_log_density[idx[j]]);
      b.advantages.push_back(advantages[idx[j]]);
      b.returns.push_back(returns[idx[j]]);
    }
    return b;
  }
};

/// Runs GAE per trajectory and stacks the steps. Advantages are normalized to
/// zero mean and unit variance when the batch has more than one step.
inline RolloutBatch build_batch(std::span<const Trajectory> trajectories, const PpoConfig& cfg) {
  std::vector<const Step*> steps;
  RolloutBatch b;
  for (const Trajectory& t : trajectories) {
    const Advantages adv = compute_advantages(t, cfg.gamma, cfg.lambda);
    for (std::size_t i = 0; i < t.steps.size(); ++i) {
      steps.push_back(&t.steps[i]);
      b.advantages.push_back(adv.advantages[i]);
      b.returns.push_back(adv.returns[i]);
      b.old_log_density.push_back(t.steps[i].log_density);
    }
  }
  if (steps.empty()) throw std::invalid_argument("build_batch: no steps");
  const auto features = static_cast<Eigen::Index>(steps.front()->state.size());
  b.states.resize(features, static_cast<Eigen::Index>(steps.size()));
  b.actions.resize(kActionDim, static_cast<Eigen::Index>(steps.size()));
  for (std::size_t j = 0; j < steps.size(); ++j) {
    const auto col = static_cast<Eigen::Index>(j);
    for (Eigen::Index i = 0; i < features; ++i) {
      b.states(i, col) = static_cast<ModelScalar>(steps[j]->state.data[static_cast<std::size_t>(i)]);
    }
    for (int k = 0; k < kActionDim; ++k) b.actions(k, col) = steps[j]->action[k];
  }
  if (b.size() > 1) {
    const double n = static_cast<double>(b.size());
    const double mean = std::accumulate(b.advantages.begin(), b.advantages.end(), 0.0) / n;
    double var = 0.0;
    for (double a : b.advantages) var += (a - mean) * (a - mean);
    const double sd = std::sqrt(var / n);
    for (double& a : b.advantages) a = (a - mean) / (sd + 1e-8);
  }
  return b;
}

/// min(r A, clip(r, 1-eps, 1+eps) A).
inline double clipped_surrogate(double ratio, double advantage, double clip) {
  return std::min(ratio * advantage, std::clamp(ratio, 1.0 - clip, 1.0 + clip) * advantage);
}

/// Entropy of the fixed-std diagonal Gaussian policy.
inline double policy_entropy(double std) {
  return kActionDim * (0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e) + std::log(std));
}

struct MinibatchLoss {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  double total() const { return policy_loss + value_loss; }
};

/// PPO loss on one minibatch:
///   -mean(min(r A, clip(r) A)) + value_coef * mean((V - R)^2) - entropy_coef * H
/// Gradients are accumulated into both networks' parameters (call zero_grad
/// first). H is constant for a fixed std and contributes no gradient.
template <class S>
MinibatchLoss ppo_gradients(nn::Network<S>& actor, nn::Network<S>& critic, const RolloutBatch& mb,
                            const PpoConfig& cfg, bool accumulate = true) {
  using M = nn::Mat<S>;
  const auto n = static_cast<Eigen::Index>(mb.size());
  if (n == 0) throw std::invalid_argument("ppo_gradients: empty minibatch");
  const M states = mb.states.template cast<S>();
  const double var = cfg.std * cfg.std;
  MinibatchLoss loss;
  loss.entropy = policy_entropy(cfg.std);

  typename nn::Network<S>::Tape actor_tape;
  const M mean = actor.forward(states, {}, accumulate ? &actor_tape : nullptr);
  M grad_mean(kActionDim, n);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double logp = 0.0;
    for (int k = 0; k < kActionDim; ++k) {
      const double d = mb.actions(k, j) - static_cast<double>(mean(k, j));
      logp -= 0.5 * d * d / var;
    }
    logp -= kActionDim * (std::log(cfg.std) + 0.5 * std::log(2.0 * std::numbers::pi));
    const double log_ratio = logp - mb.old_log_density[static_cast<std::size_t>(j)];
    const double ratio = std::exp(log_ratio);
    const double adv = mb.advantages[static_cast<std::size_t>(j)];
    const double unclipped = ratio * adv;
    const double surrogate = clipped_surrogate(ratio, adv, cfg.clip);
    loss.policy_loss -= surrogate * inv_n;
    loss.approx_kl += ((ratio - 1.0) - log_ratio) * inv_n;
    if (std::abs(ratio - 1.0) > cfg.clip) loss.clip_fraction += inv_n;
    // d(-surrogate)/d logp is -r A when the unclipped branch is the minimum.
    const double dlogp = unclipped <= surrogate ? -unclipped * inv_n : 0.0;
    for (int k = 0; k < kActionDim; ++k) {
      const double d = mb.actions(k, j) - static_cast<double>(mean(k, j));
      grad_mean(k, j) = static_cast<S>(dlogp * d / var);
    }
  }
  loss.policy_loss -= cfg.entropy_coef * loss.entropy;

  typename nn::Network<S>::Tape critic_tape;
  const M values = critic.forward(states, {}, accumulate ? &critic_tape : nullptr);
  M grad_values(1, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double err = static_cast<double>(values(0, j)) - mb.returns[static_cast<std::size_t>(j)];
    loss.value_loss += cfg.value_coef * err * err * inv_n;
    grad_values(0, j) = static_cast<S>(2.0 * cfg.value_coef * err * inv_n);
  }
  if (accumulate) {
    actor.backward(grad_mean, actor_tape, false);
    critic.backward(grad_values, critic_tape, false);
  }
  return loss;
}

struct PpoStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  int minibatches = 0;
  std::size_t samples = 0;
};

/// Owns the optimizer state that persists across PPO updates.
class PpoTrainer {
 public:
  PpoTrainer(ActorCritic& ac, const PpoConfig& cfg, std::uint64_t seed)
      : ac_(ac), cfg_(cfg), actor_opt_(cfg.learning_rate), critic_opt_(cfg.learning_rate),
        rng_(make_rng(seed, 0x990)) {}

  const PpoConfig& config() const { return cfg_; }

  /// Several epochs of shuffled minibatch Adam steps on one batch.
  PpoStats update(std::span<const Trajectory> trajectories) {
    if (trajectories.empty()) throw std::invalid_argument("ppo_update: empty batch");
    const RolloutBatch batch = build_batch(trajectories, cfg_);
    std::vector<std::size_t> order(batch.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    PpoStats stats;
    stats.samples = batch.size();
    const auto mb_size = static_cast<std::size_t>(std::max(1, cfg_.minibatch_size));
    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng_);
      for (std::size_t start = 0; start < order.size(); start += mb_size) {
        const std::size_t end = std::min(order.size(), start + mb_size);
        const RolloutBatch mb = batch.select(std::span<const std::size_t>(order).subspan(start, end - start));
        ac_.actor.zero_grad();
        ac_.critic.zero_grad();
        const MinibatchLoss l = ppo_gradients(ac_.actor, ac_.critic, mb, cfg_);
        nn::clip_grad_norm(ac_.actor.params(), cfg_.max_grad_norm);
        nn::clip_grad_norm(ac_.critic.params(), cfg_.max_grad_norm);
        actor_opt_.step(ac_.actor.params());
        critic_opt_.step(ac_.critic.params());
        stats.policy_loss += l.policy_loss;
        stats.value_loss += l.value_loss;
        stats.entropy += l.entropy;
        stats.approx_kl += l.approx_kl;
        stats.clip_fraction += l.clip_fraction;
        ++stats.minibatches;
      }
    }
    if (stats.minibatches > 0) {
      const double m = stats.minibatches;
      stats.policy_loss /= m;
      stats.value_loss /= m;
      stats.entropy /= m;
      stats.approx_kl /= m;
      stats.clip_fraction /= m;
    }
    return stats;
  }

 private:
  ActorCritic& ac_;
  PpoConfig cfg_;
  nn::Adam<ModelScalar> actor_opt_;
  nn::Adam<ModelScalar> critic_opt_;
  Rng rng_;
};

inline PpoStats ppo_update(PpoTrainer& trainer, std::span<const Trajectory> trajectories) {
  return trainer.update(trajectories);
}

// ---------------------------------------------------------------------------
// Training and inference

struct TrainRestConfig {
  RewardConfig reward;
  PpoConfig ppo;
  int epochs = 1;
  std::size_t rollout_steps = 2048;  // environment steps collected per PPO update
  std::size_t max_episodes = 0;      // per epoch; 0 = whole dataset
  std::uint64_t seed = 1;
  std::function<void(int epoch, const struct RestEpochMetrics&)> on_epoch;
  std::function<void(const PpoStats&)> on_update;
};

struct RestEpochMetrics {
  int epoch = 0;
  double accuracy = 0.0;     // percent of training episodes ending on the target label
  double mean_reward = 0.0;  // mean total episode reward
  double mean_length = 0.0;
  double seconds = 0.0;
  std::size_t episodes = 0;
  std::size_t updates = 0;
};

struct RestTrainReport {
  std::vector<RestEpochMetrics> epochs;
  std::vector<double> episode_rewards;  // in collection order
  double seconds = 0.0;
};

/// Collects training episodes over the distorted set against the frozen black
/// box and applies a PPO update every `rollout_steps` environment steps.
inline RestTrainReport train_rest(ActorCritic& ac, const BlackBox& bb, const LabeledSet& distorted,
                                  const TrainRestConfig& cfg) {
  if (distorted.empty()) throw std::invalid_argument("train_rest: empty training set");
  const auto start = std::chrono::steady_clock::now();
  PpoTrainer trainer(ac, cfg.ppo, cfg.seed);
  Rng order_rng = make_rng(cfg.seed, 0x0dd);
  RestTrainReport report;
  std::vector<Trajectory> buffer;
  std::size_t buffered_steps = 0;
  std::size_t episode_counter = 0;

  auto flush = [&](RestEpochMetrics& m) {
    if (buffer.empty()) return;
    const PpoStats stats = trainer.update(buffer);
    if (cfg.on_update) cfg.on_update(stats);
    ++m.updates;
    buffer.clear();
    buffered_steps = 0;
  };

  std::vector<std::size_t> order(distorted.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), order_rng);
    const std::size_t count = cfg.max_episodes > 0 ? std::min(cfg.max_episodes, order.size()) : order.size();
    RestEpochMetrics m;
    m.epoch = epoch;
    std::size_t hits = 0;
    double reward_sum = 0.0;
    double length_sum = 0.0;
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t i = order[k];
      Rng rng(derive_seed(cfg.seed ^ 0xe915ULL, episode_counter++));
      Trajectory t = run_episode(ac, bb, distorted.images[i], distorted.labels[i], cfg.reward,
                                 EpisodeMode::kTraining, cfg.ppo.std, rng);
      hits += t.final_prediction.label == distorted.labels[i];
      reward_sum += t.total_reward();
      length_sum += static_cast<double>(t.length());
      report.episode_rewards.push_back(t.total_reward());
      buffered_steps += t.length();
      buffer.push_back(std::move(t));
      if (buffered_steps >= cfg.rollout_steps) flush(m);
    }
    flush(m);
    m.episodes = count;
    m.accuracy = 100.0 * static_cast<double>(hits) / static_cast<double>(count);
    m.mean_reward = reward_sum / static_cast<double>(count);
    m.mean_length = length_sum / static_cast<double>(count);
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
    if (cfg.on_epoch) cfg.on_epoch(epoch, m);
    report.epochs.push_back(m);
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

struct InferConfig {
  RewardConfig reward;
  double std = 0.1;  // reduced exploration noise at test time; 0 = deterministic
  std::uint64_t seed = 1;
};

struct InferenceResult {
  ImageTensor final_image;
  Prediction prediction;
  Trajectory trajectory;
};

/// Inference-mode episode; the prediction is the black box's output on the
/// final state.
inline InferenceResult infer_transform(const ActorCritic& ac, const BlackBox& bb, const ImageTensor& image,
                                       const InferConfig& cfg, Rng& rng) {
  InferenceResult r;
  r.trajectory = run_episode(ac, bb, image, std::nullopt, cfg.reward, EpisodeMode::kInference, cfg.std, rng);
  r.final_image = r.trajectory.final_state;
  r.prediction = r.trajectory.final_prediction;
  return r;
}

inline InferenceResult infer_transform(const ActorCritic& ac, const BlackBox& bb, const ImageTensor& image,
                                       const InferConfig& cfg) {
  Rng rng(mix_seed(cfg.seed));
  return infer_transform(ac, bb, image, cfg, rng);
}

struct EvalResult {
  double accuracy = 0.0;  // percent
  double mean_length = 0.0;
  double seconds = 0.0;
  std::size_t count = 0;
};

/// Accuracy of black box alone on a labeled set.
inline EvalResult evaluate_blackbox(const BlackBox& bb, const LabeledSet& set) {
  const auto start = std::chrono::steady_clock::now();
  EvalResult r;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < set.size(); ++i) hits += bb.predict(set.images[i]).label == set.labels[i];
  r.count = set.size();
  r.accuracy = set.empty() ? 0.0 : 100.0 * static_cast<double>(hits) / static_cast<double>(set.size());
  r.mean_length = 0.0;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

/// Accuracy of black box behind the transform learner. Image i uses a
/// generator seeded by (cfg.seed, i).
inline EvalResult evaluate_rest(const ActorCritic& ac, const BlackBox& bb, const LabeledSet& set,
                                const InferConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  EvalResult r;
  std::size_t hits = 0;
  double length_sum = 0.0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    Rng rng(derive_seed(cfg.seed ^ 0x7e57ULL, i));
    const InferenceResult res = infer_transform(ac, bb, set.images[i], cfg, rng);
    hits += res.prediction.label == set.labels[i];
    length_sum += static_cast<double>(res.trajectory.length());
  }
  r.count = set.size();
  if (!set.empty()) {
    r.accuracy = 100.0 * static_cast<double>(hits) / static_cast<double>(set.size());
    r.mean_length = length_sum / static_cast<double>(set.size());
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

inline void save_agent(const ActorCritic& ac, const std::string& path) {
  auto os = io::open_for_write(path);
  io::write_header(os, io::ModelKind::kActorCritic, {static_cast<double>(kActionDim)});
  io::write_network(os, ac.actor);
  io::write_network(os, ac.critic);
  if (!os) throw std::runtime_error("save_agent: write failed for " + path);
}

inline ActorCritic load_agent(const std::string& path) {
  auto is = io::open_for_read(path);
  const std::vector<double> meta = io::read_header(is, io::ModelKind::kActorCritic);
  if (meta.empty() || static_cast<int>(meta[0]) != kActionDim) throw io::FormatError("load_agent: bad action size");
  ModelNetwork actor = io::read_network<ModelScalar>(is);
  ModelNetwork critic = io::read_network<ModelScalar>(is);
  try {
    return ActorCritic(std::move(actor), std::move(critic));
  } catch (const std::invalid_argument& e) {
    throw io::FormatError(std::string("load_agent: ") + e.what());
  }
}

}  // namespace rest
