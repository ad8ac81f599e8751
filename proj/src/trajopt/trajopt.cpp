#include "gradgen/trajopt.hpp"

#include <chrono>
#include <cmath>

namespace gradgen::trajopt {

namespace {

Camera2D default_camera() { return Camera2D::workspace(vlm::kImageSize, vlm::kImageSize); }

Tensor clip_by_norm(const Tensor& g, double max_norm) {
  double norm2 = 0;
  for (int64_t i = 0; i < g.size(); ++i) norm2 += g.at(i) * g.at(i);
  const double norm = std::sqrt(norm2);
  if (norm <= max_norm) return g;
  return scale(g, max_norm / norm);
}

void check_grad_finite(const Tensor& g) {
  const int64_t dof = g.shape.size() == 2 ? g.shape[1] : 1;
  for (int64_t i = 0; i < g.size(); ++i) {
    if (!std::isfinite(g.at(i)))
      throw std::runtime_error("non-finite action gradient at timestep " +
                               std::to_string(i / dof));
  }
}

Tensor clone(const Tensor& t) {
  return Tensor(t.shape, std::make_shared<std::vector<double>>(*t.data));
}

}  // namespace

Strategy strategy_from_string(const std::string& s) {
  if (s == "fixed") return Strategy::Fixed;
  if (s == "episodic") return Strategy::Episodic;
  throw std::invalid_argument("unknown strategy '" + s + "' (fixed|episodic)");
}

std::string to_string(Strategy s) {
  return s == Strategy::Fixed ? "fixed" : "episodic";
}

StepConfig step_config_for(const tasks::BuiltTask& task) {
  StepConfig cfg;
  if (task.spec.held_object) {
    const SceneObject& o = task.scene.objects[size_t(*task.spec.held_object)];
    cfg.held_probe_radius = o.kind == SdfShape::Kind::Disc
                                ? o.radius
                                : std::hypot(o.hx, o.hy);
  }
  return cfg;
}

Tensor loss_terminal(const SimState& state, const Scene& scene,
                     const RobotModel& robot, const Camera2D& cam,
                     const Tensor& z_text, const vlm::ParamViews& pv) {
  Tensor img = render_state(state, scene, robot, cam);
  Tensor z_img = vlm::encode_image(img, pv);
  return neg(sum(mul(z_text, z_img)));
}

double loss_value(const SimState& state, const Scene& scene, const RobotModel& robot,
                  const Camera2D& cam, const Tensor& z_text,
                  const vlm::EncoderParams& enc) {
  return loss_terminal(state, scene, robot, cam, z_text, vlm::constant_views(enc))
      .scalar();
}

Tensor grad_actions(const Tensor& actions, const SimState& s0, const Scene& scene,
                    const RobotModel& robot, const Camera2D& cam,
                    const Tensor& z_text, const vlm::EncoderParams& enc,
                    const StepConfig& scfg, double* loss_out) {
  Tape tape;
  Tensor leaf = tape.leaf_shared(actions.shape, actions.data);
  auto states = rollout(s0, leaf, robot, scene.obstacles, kDt, scfg);
  Tensor loss =
      loss_terminal(states.back(), scene, robot, cam, z_text, vlm::constant_views(enc));
  if (loss_out) *loss_out = loss.scalar();
  Tensor g = tape.backward(loss).at(leaf);
  check_grad_finite(g);
  return g;
}

namespace {

struct OptState {
  vlm::AdamW adam;
  std::map<std::string, Tensor> params;

  OptState(Tensor actions, double lr, double weight_decay) {
    adam.lr = lr;
    adam.weight_decay = weight_decay;
    params["actions"] = std::move(actions);
  }

  Tensor& actions() { return params.at("actions"); }

  void apply(const Tensor& grad) {
    std::map<std::string, Tensor> g{{"actions", grad}};
    adam.step(params, g);
  }
};

std::vector<double> timestep_losses(const std::vector<SimState>& states,
                                    const Scene& scene, const RobotModel& robot,
                                    const Camera2D& cam, const Tensor& z_text,
                                    const vlm::EncoderParams& enc) {
  std::vector<double> out;
  out.reserve(states.size());
  for (const SimState& s : states)
    out.push_back(loss_value(s, scene, robot, cam, z_text, enc));
  return out;
}

}  // namespace

TrajOptResult optimize_fixed(const tasks::BuiltTask& task,
                             const vlm::EncoderParams& enc, const OptimConfig& cfg,
                             uint64_t seed) {
  (void)seed;  // the pipeline is deterministic; zeros init leaves nothing to draw
  const auto t_start = std::chrono::steady_clock::now();
  const Camera2D cam = default_camera();
  const StepConfig scfg = step_config_for(task);
  Tensor z_text = vlm::encode_text(task.spec.instruction, enc);

  TrajOptResult res;
  OptState opt(zeros({cfg.horizon, task.robot.dof()}), cfg.lr, cfg.weight_decay);

  for (int step = 0; step < cfg.steps; ++step) {
    double loss = 0;
    Tensor g = grad_actions(opt.actions(), task.state0, task.scene, task.robot, cam,
                            z_text, enc, scfg, &loss);
    res.loss_history.push_back(loss);
    if (loss < res.best_loss) {
      res.best_loss = loss;
      res.best_actions = clone(opt.actions());
    }
    opt.apply(clip_by_norm(g, cfg.clip_norm));
    ++res.total_steps;
  }

  res.last_actions = clone(opt.actions());
  auto states = rollout(task.state0, res.last_actions, task.robot,
                        task.scene.obstacles, kDt, scfg);
  res.last_loss = loss_value(states.back(), task.scene, task.robot, cam, z_text, enc);
  if (res.last_loss < res.best_loss) {
    res.best_loss = res.last_loss;
    res.best_actions = clone(res.last_actions);
  }
  if (!res.best_actions.defined()) res.best_actions = clone(res.last_actions);
  res.final_timestep_loss =
      timestep_losses(states, task.scene, task.robot, cam, z_text, enc);
  res.wall_clock_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return res;
}

TrajOptResult optimize_episodic(const tasks::BuiltTask& task,
                                const vlm::EncoderParams& enc, const OptimConfig& base,
                                const EpisodicConfig& epi, uint64_t seed) {
  (void)seed;
  if (epi.episode_len < 1 || epi.steps_per_episode < 1)
    throw std::invalid_argument("episodic: episode length and steps must be >= 1");
  const auto t_start = std::chrono::steady_clock::now();
  const Camera2D cam = default_camera();
  const StepConfig scfg = step_config_for(task);
  const int dof = task.robot.dof();
  Tensor z_text = vlm::encode_text(task.spec.instruction, enc);

  double ceiling = epi.default_ceiling;
  if (auto c = vlm::caption_ceiling(enc, task.spec.instruction)) ceiling = *c;
  const double target_loss = -epi.target_frac * ceiling;

  TrajOptResult res;
  std::vector<double> committed;  // flattened (T_committed, dof)
  SimState prefix_end = task.state0;
  double prev_episode_best = 2.0;

  auto committed_tensor = [&]() {
    const int64_t rows = int64_t(committed.size()) / dof;
    return constant({rows, dof}, committed);
  };

  const int max_new_episodes =
      std::min(epi.max_episodes, (base.horizon + epi.episode_len - 1) / epi.episode_len);

  for (int ep = 0; ep < max_new_episodes; ++ep) {
    OptState opt(zeros({epi.episode_len, dof}), base.lr * epi.lr_multiplier,
                 base.weight_decay);
    double episode_best = 2.0;
    Tensor episode_best_actions = clone(opt.actions());

    for (int it = 0; it < epi.steps_per_episode; ++it) {
      double loss = 0;
      Tensor g = grad_actions(opt.actions(), prefix_end, task.scene, task.robot, cam,
                              z_text, enc, scfg, &loss);
      res.loss_history.push_back(loss);
      if (loss < episode_best) {
        episode_best = loss;
        episode_best_actions = clone(opt.actions());
      }
      opt.apply(clip_by_norm(g, base.clip_norm));
      ++res.total_steps;
    }

    // commit this episode's best continuation
    committed.insert(committed.end(), episode_best_actions.data->begin(),
                     episode_best_actions.data->end());
    auto seg = rollout(prefix_end, episode_best_actions, task.robot,
                       task.scene.obstacles, kDt, scfg);
    prefix_end = seg.back();

    if (episode_best < res.best_loss) {
      res.best_loss = episode_best;
      res.best_actions = committed_tensor();
    }

    const double improvement = prev_episode_best - episode_best;
    prev_episode_best = episode_best;
    if (episode_best <= target_loss) break;
    if (ep > 0 && improvement < epi.stop_tol) break;
  }

  res.last_actions = committed_tensor();
  if (committed.empty()) {
    res.last_loss = loss_value(task.state0, task.scene, task.robot, cam, z_text, enc);
    res.best_loss = res.last_loss;
    res.best_actions = res.last_actions;
    res.final_timestep_loss = {res.last_loss};
  } else {
    auto states = rollout(task.state0, res.last_actions, task.robot,
                          task.scene.obstacles, kDt, scfg);
    res.last_loss = loss_value(states.back(), task.scene, task.robot, cam, z_text, enc);
    if (!res.best_actions.defined()) res.best_actions = res.last_actions;
    res.final_timestep_loss =
        timestep_losses(states, task.scene, task.robot, cam, z_text, enc);
  }
  res.wall_clock_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return res;
}

std::vector<SimState> replay(const tasks::BuiltTask& task, const Tensor& actions) {
  if (actions.shape.empty() || actions.shape[0] == 0) return {task.state0};
  return rollout(task.state0, actions, task.robot, task.scene.obstacles, kDt,
                 step_config_for(task));
}

Demonstration generate_demonstration(const tasks::BuiltTask& task,
                                     const vlm::EncoderParams& enc, Strategy strategy,
                                     const std::string& checkpoint_hash) {
  OptimConfig cfg;
  cfg.lr = task.spec.optimizer.lr;
  cfg.steps = task.spec.optimizer.steps;
  cfg.horizon = task.spec.horizon;

  TrajOptResult r;
  if (strategy == Strategy::Fixed) {
    r = optimize_fixed(task, enc, cfg, task.spec.seed);
  } else {
    EpisodicConfig epi;
    // equal budget: episodes * steps_per_episode == cfg.steps
    epi.max_episodes = std::max(1, cfg.horizon / epi.episode_len);
    epi.steps_per_episode = std::max(1, cfg.steps / epi.max_episodes);
    r = optimize_episodic(task, enc, cfg, epi, task.spec.seed);
  }

  Demonstration d;
  d.task = tasks::to_string(task.spec.id);
  d.strategy = to_string(strategy);
  d.instruction = task.spec.instruction;
  d.robot = task.spec.robot_id;
  d.checkpoint_hash = checkpoint_hash;
  d.seed = task.spec.seed;
  d.variant.unseen_color = task.spec.unseen_color;
  d.variant.novel_embodiment = task.spec.novel_embodiment;
  if (task.spec.predicate == tasks::PredicateKind::Region)
    d.variant.side = task.spec.side;
  d.best_loss = r.best_loss;
  d.final_loss = r.last_loss;
  d.total_opt_steps = r.total_steps;
  d.loss_history = r.loss_history;
  d.final_timestep_loss = r.final_timestep_loss;

  auto best_states = replay(task, r.best_actions);
  auto last_states = replay(task, r.last_actions);
  auto best_rep = tasks::evaluate_success(task.spec, task.scene, best_states.back(),
                                          task.robot);
  auto last_rep = tasks::evaluate_success(task.spec, task.scene, last_states.back(),
                                          task.robot);
  d.success = best_rep.success;
  d.deviation = best_rep.deviation;
  d.last_success = last_rep.success;
  d.last_deviation = last_rep.deviation;

  const int T = int(best_states.size()) - 1;
  d.horizon = T;
  for (int t = 0; t <= T; ++t) {
    const SimState& s = best_states[size_t(t)];
    d.q.push_back(*s.q.data);
    d.ee.push_back(fk_ee(*s.q.data, task.robot));
    if (s.held) {
      const auto& o = s.objects[size_t(*s.held)];
      d.held.push_back(std::array<double, 3>{o.pos.at(0), o.pos.at(1), o.rot.at(0)});
    } else {
      d.held.push_back(std::nullopt);
    }
    if (t < T) {
      std::vector<double> ut(size_t(task.robot.dof()), 0.0);
      std::vector<double> vt(size_t(task.robot.dof()), 0.0);
      for (int j = 0; j < task.robot.dof(); ++j) {
        ut[size_t(j)] = r.best_actions.at(t, j);
        vt[size_t(j)] = task.robot.v_max * std::tanh(ut[size_t(j)]);
      }
      d.u.push_back(std::move(ut));
      d.vel.push_back(std::move(vt));
    }
  }
  return d;
}

}  // namespace gradgen::trajopt
