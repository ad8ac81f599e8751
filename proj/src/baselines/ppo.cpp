#include <cmath>
#include <sstream>

#include "gradgen/baselines.hpp"
#include "gradgen/rng.hpp"

namespace gradgen::baselines {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;

Tensor gaussian_init(Rng& rng, Shape shape, double std_dev) {
  std::vector<double> v(size_t(numel(shape)), 0.0);
  for (double& x : v) x = std_dev * rng.normal();
  return constant(std::move(shape), std::move(v));
}

int observation_dim(const tasks::BuiltTask& task) {
  return task.robot.dof() + 2 + 2 * int(task.scene.objects.size()) + 3;
}

std::vector<double> observe(const tasks::BuiltTask& task, const SimState& s) {
  std::vector<double> obs;
  for (double v : *s.q.data) obs.push_back(v);
  const auto grip = fk_grip(*s.q.data, task.robot);
  obs.push_back(grip[0]);
  obs.push_back(grip[1]);
  for (const auto& o : s.objects) {
    obs.push_back(o.pos.at(0));
    obs.push_back(o.pos.at(1));
  }
  // goal one-hot: target object (cube-select) or commanded side (obstacle)
  double onehot[3] = {0, 0, 0};
  if (task.spec.predicate == tasks::PredicateKind::GripperToTarget) {
    onehot[task.spec.target_object % 3] = 1;
  } else if (task.spec.predicate == tasks::PredicateKind::Region) {
    onehot[int(task.spec.side)] = 1;
  }
  obs.insert(obs.end(), onehot, onehot + 3);
  return obs;
}

double clamp_log_std(double v) { return std::clamp(v, kLogStdLo, kLogStdHi); }

}  // namespace

PolicyParams PolicyParams::init(int obs_dim, int act_dim, uint64_t seed) {
  Rng rng(seed);
  PolicyParams p;
  p.obs_dim = obs_dim;
  p.act_dim = act_dim;
  p.t["trunk.w1"] = gaussian_init(rng, {obs_dim, 64}, 1.0 / std::sqrt(double(obs_dim)));
  p.t["trunk.b1"] = zeros({64});
  p.t["trunk.w2"] = gaussian_init(rng, {64, 64}, 1.0 / 8.0);
  p.t["trunk.b2"] = zeros({64});
  p.t["mean.w"] = gaussian_init(rng, {64, act_dim}, 0.01);
  p.t["mean.b"] = zeros({act_dim});
  p.t["value.w"] = gaussian_init(rng, {64, 1}, 1.0 / 8.0);
  p.t["value.b"] = zeros({1});
  p.t["log_std"] = full({act_dim}, -0.5);
  return p;
}

void policy_forward(const PolicyParams& p, const std::vector<double>& obs,
                    std::vector<double>& mean, double& value) {
  const int od = p.obs_dim, ad = p.act_dim;
  const auto& w1 = *p.t.at("trunk.w1").data;
  const auto& b1 = *p.t.at("trunk.b1").data;
  const auto& w2 = *p.t.at("trunk.w2").data;
  const auto& b2 = *p.t.at("trunk.b2").data;
  double h1[64], h2[64];
  for (int j = 0; j < 64; ++j) {
    double s = b1[size_t(j)];
    for (int i = 0; i < od; ++i) s += obs[size_t(i)] * w1[size_t(i) * 64 + size_t(j)];
    h1[j] = std::tanh(s);
  }
  for (int j = 0; j < 64; ++j) {
    double s = b2[size_t(j)];
    for (int i = 0; i < 64; ++i) s += h1[i] * w2[size_t(i) * 64 + size_t(j)];
    h2[j] = std::tanh(s);
  }
  const auto& mw = *p.t.at("mean.w").data;
  const auto& mb = *p.t.at("mean.b").data;
  mean.assign(size_t(ad), 0.0);
  for (int j = 0; j < ad; ++j) {
    double s = mb[size_t(j)];
    for (int i = 0; i < 64; ++i) s += h2[i] * mw[size_t(i) * size_t(ad) + size_t(j)];
    mean[size_t(j)] = s;
  }
  const auto& vw = *p.t.at("value.w").data;
  const auto& vb = *p.t.at("value.b").data;
  value = vb[0];
  for (int i = 0; i < 64; ++i) value += h2[i] * vw[size_t(i)];
}

RewardKind reward_from_string(const std::string& s) {
  if (s == "cossim") return RewardKind::CosSim;
  if (s == "infonce") return RewardKind::InfoNCE;
  if (s == "handcrafted") return RewardKind::Handcrafted;
  throw std::invalid_argument("unknown reward kind '" + s + "'");
}

RewardSpec default_reward_spec(RewardKind kind, const tasks::TaskSpec& task) {
  RewardSpec spec;
  spec.kind = kind;
  spec.terminal_only = kind != RewardKind::Handcrafted;
  if (kind == RewardKind::InfoNCE) {
    // color / side swaps of the instruction
    const std::vector<std::string> colors{"red", "green", "blue"};
    const std::vector<std::string> sides{"left", "right", "back"};
    for (const auto& set : {colors, sides}) {
      for (const std::string& word : set) {
        if (task.instruction.find(word) != std::string::npos) {
          for (const std::string& other : set) {
            if (other == word) continue;
            std::string alt = task.instruction;
            alt.replace(alt.find(word), word.size(), other);
            spec.distractors.push_back(alt);
          }
        }
      }
    }
    if (spec.distractors.empty())
      spec.distractors.push_back("the cup is far from the dish");
  }
  return spec;
}

double trajectory_reward(const tasks::BuiltTask& task, const SimState& state,
                         const RewardSpec& spec, const vlm::EncoderParams* enc) {
  switch (spec.kind) {
    case RewardKind::Handcrafted:
      return -tasks::privileged_distance(task.spec, task.scene, state, task.robot);
    case RewardKind::CosSim:
    case RewardKind::InfoNCE: {
      if (!enc) throw std::invalid_argument("VLM reward kinds need an encoder");
      const Camera2D cam = Camera2D::workspace(vlm::kImageSize, vlm::kImageSize);
      Tensor img = render_state(state, task.scene, task.robot, cam);
      Tensor zi = vlm::encode_image(img, *enc);
      Tensor zl = vlm::encode_text(task.spec.instruction, *enc);
      const double true_sim = vlm::cosine(zl, zi);
      if (spec.kind == RewardKind::CosSim) return true_sim;
      if (spec.distractors.empty())
        throw std::invalid_argument("InfoNCE reward needs at least one distractor");
      const double s = std::exp(enc->t.at("logit_scale").at(0));
      double denom_max = s * true_sim;
      std::vector<double> logits{s * true_sim};
      for (const std::string& d : spec.distractors) {
        const double sim = vlm::cosine(vlm::encode_text(d, *enc), zi);
        logits.push_back(s * sim);
        denom_max = std::max(denom_max, s * sim);
      }
      double denom = 0;
      for (double l : logits) denom += std::exp(l - denom_max);
      return logits[0] - denom_max - std::log(denom);
    }
  }
  return 0.0;
}

std::vector<double> gae_advantages(const std::vector<double>& rewards,
                                   const std::vector<double>& values, double gamma,
                                   double lambda) {
  const size_t T = rewards.size();
  if (values.size() != T)
    throw std::invalid_argument("gae: rewards/values length mismatch");
  std::vector<double> adv(T, 0.0);
  double acc = 0.0;
  for (size_t i = T; i-- > 0;) {
    const double next_v = i + 1 < T ? values[i + 1] : 0.0;
    const double delta = rewards[i] + gamma * next_v - values[i];
    acc = delta + gamma * lambda * acc;
    adv[i] = acc;
  }
  return adv;
}

namespace {

struct Batch {
  std::vector<std::vector<double>> obs;
  std::vector<std::vector<double>> act;
  std::vector<double> logp, adv, ret;
  double mean_episode_reward = 0;
};

double sample_logp(const std::vector<double>& a, const std::vector<double>& mean,
                   const std::vector<double>& log_std) {
  double lp = 0;
  for (size_t j = 0; j < a.size(); ++j) {
    const double ls = clamp_log_std(log_std[j]);
    const double z = (a[j] - mean[j]) / std::exp(ls);
    lp += -0.5 * z * z - ls - kHalfLog2Pi;
  }
  return lp;
}

}  // namespace

PPOResult ppo_train(tasks::TaskId task_id, const PPOConfig& cfg,
                    const vlm::EncoderParams* enc) {
  Rng rng(cfg.seed);
  tasks::BuiltTask probe = tasks::build_task(task_id, 1000000);
  const int obs_dim = observation_dim(probe);
  const int act_dim = probe.robot.dof();

  PPOResult res;
  res.policy = PolicyParams::init(obs_dim, act_dim, Rng::mix(cfg.seed, 0xabcd));
  PolicyParams last_valid = res.policy;
  const RewardSpec rspec = default_reward_spec(cfg.reward, probe.spec);

  vlm::AdamW opt;
  opt.lr = cfg.lr;

  const StepConfig scfg = trajopt::step_config_for(probe);
  int64_t env_steps = 0;
  int64_t next_eval = 0;
  uint64_t episode_counter = 0;

  while (env_steps < cfg.total_env_steps) {
    // ---- collect ----
    Batch batch;
    double episode_reward_sum = 0;
    int episodes = 0;
    while (int(batch.obs.size()) < cfg.rollout_batch) {
      tasks::BuiltTask task =
          tasks::build_task(task_id, 1000000 + episode_counter++);
      SimState s = task.state0;
      std::vector<double> rewards, values;
      std::vector<size_t> ep_index;
      for (int t = 0; t < task.spec.horizon; ++t) {
        std::vector<double> obs = observe(task, s);
        std::vector<double> mean;
        double value = 0;
        policy_forward(res.policy, obs, mean, value);
        std::vector<double> a(size_t(act_dim), 0.0);
        const auto& log_std = *res.policy.t.at("log_std").data;
        for (int j = 0; j < act_dim; ++j)
          a[size_t(j)] = mean[size_t(j)] +
                         std::exp(clamp_log_std(log_std[size_t(j)])) * rng.normal();
        const double lp = sample_logp(a, mean, log_std);

        ep_index.push_back(batch.obs.size());
        batch.obs.push_back(std::move(obs));
        batch.act.push_back(a);
        batch.logp.push_back(lp);
        values.push_back(value);

        s = step(s, constant({act_dim}, a), task.robot, task.scene.obstacles,
                 trajopt::kDt, scfg);
        double r = 0.0;
        if (rspec.terminal_only) {
          if (t == task.spec.horizon - 1)
            r = cfg.reward_scale * trajectory_reward(task, s, rspec, enc);
        } else {
          r = cfg.reward_scale * trajectory_reward(task, s, rspec, enc);
        }
        rewards.push_back(r);
        ++env_steps;
      }
      for (double r : rewards) episode_reward_sum += r;
      ++episodes;
      auto adv = gae_advantages(rewards, values, cfg.gamma, cfg.gae_lambda);
      for (size_t i = 0; i < adv.size(); ++i) {
        batch.adv.push_back(adv[i]);
        batch.ret.push_back(adv[i] + values[i]);
      }
    }
    batch.mean_episode_reward = episodes ? episode_reward_sum / episodes : 0;

    // ---- normalize advantages (zero mean, unit variance) ----
    double mean_adv = 0;
    for (double a : batch.adv) mean_adv += a;
    mean_adv /= double(batch.adv.size());
    double var = 0;
    for (double a : batch.adv) var += (a - mean_adv) * (a - mean_adv);
    const double stddev = std::sqrt(var / double(batch.adv.size()));
    for (double& a : batch.adv) a = (a - mean_adv) / (stddev + 1e-8);

    // ---- update ----
    const size_t N = batch.obs.size();
    std::vector<size_t> order(N);
    for (size_t i = 0; i < N; ++i) order[i] = i;
    bool aborted = false;
    for (int epoch = 0; epoch < cfg.epochs_per_batch && !aborted; ++epoch) {
      rng.shuffle(order);
      for (size_t lo = 0; lo + 2 <= N && !aborted; lo += size_t(cfg.minibatch)) {
        const size_t hi = std::min(N, lo + size_t(cfg.minibatch));
        const int64_t B = int64_t(hi - lo);

        std::vector<double> obs_flat, act_flat, old_flat, adv_flat, ret_flat;
        for (size_t k = lo; k < hi; ++k) {
          const size_t i = order[k];
          obs_flat.insert(obs_flat.end(), batch.obs[i].begin(), batch.obs[i].end());
          act_flat.insert(act_flat.end(), batch.act[i].begin(), batch.act[i].end());
          old_flat.push_back(batch.logp[i]);
          adv_flat.push_back(batch.adv[i]);
          ret_flat.push_back(batch.ret[i]);
        }

        Tape tape;
        std::map<std::string, Tensor> pv;
        for (auto& [name, t] : res.policy.t) pv[name] = tape.leaf_shared(t.shape, t.data);

        Tensor obs = constant({B, obs_dim}, obs_flat);
        Tensor h = tanh_(add(matmul(obs, pv["trunk.w1"]),
                             broadcast_to(reshape(pv["trunk.b1"], {1, 64}), {B, 64})));
        h = tanh_(add(matmul(h, pv["trunk.w2"]),
                      broadcast_to(reshape(pv["trunk.b2"], {1, 64}), {B, 64})));
        Tensor mu = add(matmul(h, pv["mean.w"]),
                        broadcast_to(reshape(pv["mean.b"], {1, act_dim}), {B, act_dim}));
        Tensor v = add(matmul(h, pv["value.w"]),
                       broadcast_to(reshape(pv["value.b"], {1, 1}), {B, 1}));

        Tensor ls = min_const(max_const(pv["log_std"], kLogStdLo), kLogStdHi);
        Tensor sigma = exp_(ls);
        Tensor act = constant({B, act_dim}, act_flat);
        Tensor z = div(sub(act, mu), broadcast_to(reshape(sigma, {1, act_dim}),
                                                  {B, act_dim}));
        Tensor logp = sub(scale(sum(mul(z, z), 1), -0.5),
                          add_const(broadcast_to(reshape(sum(ls), {1}), {B}),
                                    double(act_dim) * kHalfLog2Pi));
        Tensor ratio = exp_(sub(logp, constant({B}, old_flat)));
        Tensor adv = constant({B}, adv_flat);
        Tensor surr = mul(ratio, adv);
        Tensor clipped_ratio =
            min_const(max_const(ratio, 1.0 - cfg.clip_ratio), 1.0 + cfg.clip_ratio);
        Tensor surr_clip = mul(clipped_ratio, adv);
        // elementwise min via 0.5 (a + b - |a-b|)
        Tensor diff = sub(surr, surr_clip);
        Tensor absd = add(max_const(diff, 0.0), max_const(neg(diff), 0.0));
        Tensor surr_min = scale(sub(add(surr, surr_clip), absd), 0.5);

        const double clipped_mean = mean(surr_min).scalar();
        const double unclipped_mean = mean(surr).scalar();
        if (clipped_mean > unclipped_mean + 1e-9)
          throw std::logic_error("ppo: clipped surrogate exceeded the unclipped one");

        Tensor vloss = mean(pow_(sub(reshape(v, {B}), constant({B}, ret_flat)), 2.0));
        Tensor loss = add(neg(mean(surr_min)), scale(vloss, cfg.value_coef));

        if (!std::isfinite(loss.scalar())) {
          res.policy = last_valid;
          res.diverged = true;
          aborted = true;
          break;
        }
        Gradients g = tape.backward(loss);
        std::map<std::string, Tensor> grads;
        for (auto& [name, leaf] : pv) grads[name] = g.at(leaf);
        opt.step(res.policy.t, grads);
      }
    }
    if (res.diverged) break;
    last_valid = res.policy;
    for (auto& [name, t] : last_valid.t)
      t = Tensor(t.shape, std::make_shared<std::vector<double>>(*t.data));

    if (env_steps >= next_eval) {
      EvalResult ev = evaluate_policy(res.policy, task_id, cfg.eval_seeds, 0);
      res.curve.push_back({env_steps, batch.mean_episode_reward, ev.success_rate});
      next_eval += cfg.eval_every;
    }
  }
  return res;
}

EvalResult evaluate_policy(const PolicyParams& policy, tasks::TaskId task_id,
                           int n_seeds, uint64_t seed_base,
                           const tasks::VariantFlags& flags) {
  if (n_seeds < 1) throw std::invalid_argument("evaluate_policy: n_seeds must be >= 1");
  EvalResult out;
  double dev_sum = 0;
  for (int i = 0; i < n_seeds; ++i) {
    tasks::BuiltTask task = tasks::build_task(task_id, seed_base + uint64_t(i), flags);
    const StepConfig scfg = trajopt::step_config_for(task);
    SimState s = task.state0;
    for (int t = 0; t < task.spec.horizon; ++t) {
      std::vector<double> mean;
      double value = 0;
      policy_forward(policy, observe(task, s), mean, value);
      s = step(s, constant({task.robot.dof()}, mean), task.robot,
               task.scene.obstacles, trajopt::kDt, scfg);
    }
    auto rep = tasks::evaluate_success(task.spec, task.scene, s, task.robot);
    out.success_rate += rep.success;
    dev_sum += rep.deviation;
  }
  out.success_rate /= n_seeds;
  out.mean_deviation = dev_sum / n_seeds;
  return out;
}

EvalResult scripted_oracle_eval(tasks::TaskId task_id, int n_seeds, uint64_t seed_base) {
  if (n_seeds < 1) throw std::invalid_argument("oracle eval: n_seeds must be >= 1");
  EvalResult out;
  double dev_sum = 0;
  for (int i = 0; i < n_seeds; ++i) {
    tasks::BuiltTask task = tasks::build_task(task_id, seed_base + uint64_t(i));
    const StepConfig scfg = trajopt::step_config_for(task);
    auto goal = tasks::privileged_goal_point(task.spec, task.scene);
    // joint-space target: IK on a virtual arm whose last link carries the
    // grasp reference point, elbow branch nearest the start
    const auto q0 = *task.state0.q.data;
    std::optional<std::vector<double>> qstar;
    RobotModel vm = task.robot;
    vm.link_lengths.back() += task.robot.gripper_offset;
    for (int branch : {1, -1}) {
      auto cand = inverse_kinematics(goal, vm, branch, 0.0);
      if (!cand) continue;
      if (!qstar) {
        qstar = cand;
      } else {
        double d_new = 0, d_old = 0;
        for (size_t j = 0; j < q0.size(); ++j) {
          d_new += std::fabs((*cand)[j] - q0[j]);
          d_old += std::fabs((*qstar)[j] - q0[j]);
        }
        if (d_new < d_old) qstar = cand;
      }
    }
    SimState s = task.state0;
    for (int t = 0; t < task.spec.horizon && qstar; ++t) {
      const auto q = *s.q.data;
      std::vector<double> u(q.size(), 0.0);
      for (size_t j = 0; j < q.size(); ++j) u[j] = 6.0 * ((*qstar)[j] - q[j]);
      s = step(s, constant({task.robot.dof()}, u), task.robot, task.scene.obstacles,
               trajopt::kDt, scfg);
    }
    auto rep = tasks::evaluate_success(task.spec, task.scene, s, task.robot);
    out.success_rate += rep.success;
    dev_sum += rep.deviation;
  }
  out.success_rate /= n_seeds;
  out.mean_deviation = dev_sum / n_seeds;
  return out;
}

std::string curve_table(const std::vector<CurvePoint>& curve) {
  std::ostringstream os;
  os << "env_steps,mean_reward,eval_success\n";
  for (const auto& p : curve)
    os << p.env_steps << "," << p.mean_reward << "," << p.eval_success << "\n";
  return os.str();
}

}  // namespace gradgen::baselines
