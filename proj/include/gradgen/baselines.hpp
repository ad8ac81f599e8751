#pragma once

#include <map>
#include <string>
#include <vector>

#include "gradgen/tasks.hpp"
#include "gradgen/trajopt.hpp"
#include "gradgen/vlm.hpp"

namespace gradgen::baselines {

struct PolicyParams {
  // trunk.w1 (obs,64) trunk.b1, trunk.w2 (64,64) trunk.b2,
  // mean.w (64,act) mean.b, value.w (64,1) value.b, log_std (act)
  std::map<std::string, Tensor> t;
  int obs_dim = 0, act_dim = 0;
  static PolicyParams init(int obs_dim, int act_dim, uint64_t seed);
};

constexpr double kLogStdLo = -5.0, kLogStdHi = 2.0;

// Plain-value policy evaluation (no tape): action mean and state value.
void policy_forward(const PolicyParams& p, const std::vector<double>& obs,
                    std::vector<double>& mean, double& value);

enum class RewardKind { CosSim, InfoNCE, Handcrafted };
RewardKind reward_from_string(const std::string& s);

struct RewardSpec {
  RewardKind kind = RewardKind::CosSim;
  bool terminal_only = true;  // VLM kinds issue one reward per episode
  std::vector<std::string> distractors;  // InfoNCE competitors
};

RewardSpec default_reward_spec(RewardKind kind, const tasks::TaskSpec& task);

// Reward for a finished episode (VLM kinds) or a single state (handcrafted).
double trajectory_reward(const tasks::BuiltTask& task, const SimState& state,
                         const RewardSpec& spec, const vlm::EncoderParams* enc);

struct PPOConfig {
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double clip_ratio = 0.2;
  int epochs_per_batch = 4;
  int minibatch = 64;
  int rollout_batch = 2048;
  int64_t total_env_steps = 1000000;
  double lr = 3e-4;
  double value_coef = 0.5;
  double reward_scale = 1.0;
  RewardKind reward = RewardKind::CosSim;
  int64_t eval_every = 10000;
  int eval_seeds = 20;
  uint64_t seed = 0;
};

struct CurvePoint {
  int64_t env_steps;
  double mean_reward;
  double eval_success;
};

struct PPOResult {
  PolicyParams policy;
  std::vector<CurvePoint> curve;
  bool diverged = false;
};

PPOResult ppo_train(tasks::TaskId task, const PPOConfig& cfg,
                    const vlm::EncoderParams* enc);

struct EvalResult {
  double success_rate = 0;
  double mean_deviation = 0;
};

// Deterministic mean-action rollouts over build_task(seed_base + i).
EvalResult evaluate_policy(const PolicyParams& policy, tasks::TaskId task, int n_seeds,
                           uint64_t seed_base = 0,
                           const tasks::VariantFlags& flags = {});

// Jacobian-transpose reach controller on privileged geometry; harness sanity.
EvalResult scripted_oracle_eval(tasks::TaskId task, int n_seeds,
                                uint64_t seed_base = 0);

// GAE over one episode; exposed for tests.
std::vector<double> gae_advantages(const std::vector<double>& rewards,
                                   const std::vector<double>& values, double gamma,
                                   double lambda);

// Same optimizer loop as the fixed-horizon strategy, but the objective is the
// privileged goal distance; no rendering, no encoder.
trajopt::TrajOptResult handcraft_optimize(const tasks::BuiltTask& task,
                                          const trajopt::OptimConfig& cfg,
                                          uint64_t seed);

std::string curve_table(const std::vector<CurvePoint>& curve);

}  // namespace gradgen::baselines
