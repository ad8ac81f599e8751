#include <chrono>
#include <cmath>

#include "gradgen/baselines.hpp"

namespace gradgen::baselines {

namespace {

// Privileged distance to the goal point as a differentiable scalar.
Tensor privileged_loss(const SimState& state, const tasks::BuiltTask& task) {
  const auto g = tasks::privileged_goal_point(task.spec, task.scene);
  Tensor goal = constant({2}, {g[0], g[1]});
  Tensor p;
  if (task.spec.predicate == tasks::PredicateKind::GripperToTarget) {
    FkChain fk = fk_chain(state.q, task.robot);
    p = grip_point(fk, task.robot);
  } else {
    p = state.objects[size_t(*task.spec.held_object)].pos;
  }
  Tensor d = sub(p, goal);
  return reshape(sqrt_(add_const(sum(mul(d, d)), 1e-30)), {});
}

Tensor clip_by_norm(const Tensor& g, double max_norm) {
  double norm2 = 0;
  for (int64_t i = 0; i < g.size(); ++i) norm2 += g.at(i) * g.at(i);
  const double norm = std::sqrt(norm2);
  if (norm <= max_norm) return g;
  return scale(g, max_norm / norm);
}

}  // namespace

trajopt::TrajOptResult handcraft_optimize(const tasks::BuiltTask& task,
                                          const trajopt::OptimConfig& cfg,
                                          uint64_t seed) {
  (void)seed;
  const auto t_start = std::chrono::steady_clock::now();
  const StepConfig scfg = trajopt::step_config_for(task);

  trajopt::TrajOptResult res;
  vlm::AdamW opt;
  opt.lr = cfg.lr;
  opt.weight_decay = cfg.weight_decay;
  std::map<std::string, Tensor> params{
      {"actions", zeros({cfg.horizon, task.robot.dof()})}};

  auto eval_loss = [&](const Tensor& actions, Tensor* grad) {
    Tape tape;
    Tensor leaf = tape.leaf_shared(actions.shape, actions.data);
    auto states = rollout(task.state0, leaf, task.robot, task.scene.obstacles,
                          trajopt::kDt, scfg);
    Tensor loss = privileged_loss(states.back(), task);
    if (grad) *grad = tape.backward(loss).at(leaf);
    return loss.scalar();
  };

  for (int it = 0; it < cfg.steps; ++it) {
    Tensor g;
    const double loss = eval_loss(params.at("actions"), &g);
    res.loss_history.push_back(loss);
    if (loss < res.best_loss) {
      res.best_loss = loss;
      res.best_actions = Tensor(params.at("actions").shape,
                                std::make_shared<std::vector<double>>(
                                    *params.at("actions").data));
    }
    std::map<std::string, Tensor> grads{{"actions", clip_by_norm(g, cfg.clip_norm)}};
    opt.step(params, grads);
    ++res.total_steps;
  }

  res.last_actions = Tensor(params.at("actions").shape,
                            std::make_shared<std::vector<double>>(
                                *params.at("actions").data));
  res.last_loss = eval_loss(res.last_actions, nullptr);
  if (res.last_loss < res.best_loss) {
    res.best_loss = res.last_loss;
    res.best_actions = res.last_actions;
  }
  if (!res.best_actions.defined()) res.best_actions = res.last_actions;
  res.wall_clock_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return res;
}

}  // namespace gradgen::baselines
