#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gradgen/tasks.hpp"
#include "gradgen/vlm.hpp"

namespace gradgen::trajopt {

constexpr double kDt = 0.05;

struct OptimConfig {
  double lr = 1e-2;
  int steps = 200;
  int horizon = 50;
  double weight_decay = 1e-4;
  double clip_norm = 1.0;
  // actions always start from zeros
};

struct EpisodicConfig {
  int episode_len = 10;        // E new timesteps per episode
  int steps_per_episode = 30;  // m optimizer steps on each episode
  double lr_multiplier = 3.0;
  int max_episodes = 10;
  double stop_tol = 1e-3;
  double target_frac = 0.95;     // stop at loss <= -target_frac * ceiling
  double default_ceiling = 0.9;  // when the checkpoint has none for the caption
};

struct TrajOptResult {
  Tensor best_actions;  // (T_best, dof), lowest loss seen
  Tensor last_actions;  // (T_last, dof)
  double best_loss = 2.0;
  double last_loss = 2.0;
  std::vector<double> loss_history;         // one entry per optimization step
  std::vector<double> final_timestep_loss;  // loss at every state of the last traj
  double wall_clock_s = 0;
  int total_steps = 0;
};

StepConfig step_config_for(const tasks::BuiltTask& task);

// Eq.-style terminal objective: renders the state, encodes it, and returns
// -cos(z_text, z_image); in [-1, 1], on the tape of `state`.
Tensor loss_terminal(const SimState& state, const Scene& scene,
                     const RobotModel& robot, const Camera2D& cam,
                     const Tensor& z_text, const vlm::ParamViews& pv);

double loss_value(const SimState& state, const Scene& scene, const RobotModel& robot,
                  const Camera2D& cam, const Tensor& z_text,
                  const vlm::EncoderParams& enc);

// End-to-end gradient of the terminal loss with respect to every action entry.
Tensor grad_actions(const Tensor& actions, const SimState& s0, const Scene& scene,
                    const RobotModel& robot, const Camera2D& cam,
                    const Tensor& z_text, const vlm::EncoderParams& enc,
                    const StepConfig& scfg, double* loss_out = nullptr);

TrajOptResult optimize_fixed(const tasks::BuiltTask& task,
                             const vlm::EncoderParams& enc, const OptimConfig& cfg,
                             uint64_t seed);

TrajOptResult optimize_episodic(const tasks::BuiltTask& task,
                                const vlm::EncoderParams& enc, const OptimConfig& base,
                                const EpisodicConfig& epi, uint64_t seed);

// A complete trajectory record; the steps are the best trajectory.
struct Demonstration {
  std::string task, strategy, instruction, robot, checkpoint_hash;
  uint64_t seed = 0;
  tasks::VariantFlags variant;
  bool success = false;          // best trajectory
  double deviation = 0.0;        // best trajectory
  bool last_success = false;
  double last_deviation = 0.0;
  double best_loss = 0.0, final_loss = 0.0;
  int total_opt_steps = 0;
  int horizon = 0;
  std::vector<std::vector<double>> q;   // horizon+1 states
  std::vector<std::vector<double>> u;   // horizon raw commands
  std::vector<std::vector<double>> vel; // horizon effective velocities
  std::vector<std::array<double, 2>> ee;
  std::vector<std::optional<std::array<double, 3>>> held;
  std::vector<double> loss_history;
  std::vector<double> final_timestep_loss;
};

enum class Strategy { Fixed, Episodic };
Strategy strategy_from_string(const std::string& s);
std::string to_string(Strategy s);

Demonstration generate_demonstration(const tasks::BuiltTask& task,
                                     const vlm::EncoderParams& enc,
                                     Strategy strategy,
                                     const std::string& checkpoint_hash);

// Rolls the actions out and returns the visited states (off tape).
std::vector<SimState> replay(const tasks::BuiltTask& task, const Tensor& actions);

}  // namespace gradgen::trajopt
