#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "gradgen/rng.hpp"
#include "gradgen/trajopt.hpp"

using namespace gradgen;
using namespace gradgen::trajopt;

namespace {

tasks::BuiltTask cube_task(uint64_t seed = 3) {
  return tasks::build_task(tasks::TaskId::CubeSelect, seed);
}

vlm::EncoderParams test_encoder() { return vlm::EncoderParams::init(5); }

}  // namespace

TEST_CASE("terminal loss hits -1 on matched embeddings and 0 on orthogonal") {
  auto task = cube_task();
  const Camera2D cam = Camera2D::workspace(64, 64);
  auto enc = test_encoder();
  Tensor img = render_state(task.state0, task.scene, task.robot, cam);
  Tensor z_img = vlm::encode_image(img, enc);

  Tensor l_matched = loss_terminal(task.state0, task.scene, task.robot, cam, z_img,
                                   vlm::constant_views(enc));
  CHECK(l_matched.scalar() == doctest::Approx(-1.0).epsilon(1e-9));

  // explicit orthogonal direction
  std::vector<double> ortho(vlm::kEmbedDim, 0.0);
  // build a vector orthogonal to z_img by swapping a coordinate pair
  ortho[0] = -z_img.at(1);
  ortho[1] = z_img.at(0);
  double n = std::hypot(ortho[0], ortho[1]);
  ortho[0] /= n;
  ortho[1] /= n;
  Tensor l_orm = loss_terminal(task.state0, task.scene, task.robot, cam,
                               constant({vlm::kEmbedDim}, ortho),
                               vlm::constant_views(enc));
  CHECK(std::fabs(l_orm.scalar()) < 1e-9);
}

TEST_CASE("one-step gradient equals the analytic tanh-Jacobian chain") {
  RobotModel m = RobotModel::arm2();
  const double dt = kDt;
  std::vector<double> q0{0.4, -0.2};
  std::vector<double> u0{0.3, -0.7};

  Tape tape;
  Tensor u = tape.leaf({2}, u0);
  SimState s;
  s.q = constant({2}, q0);
  SimState nxt = step(s, u, m, {}, dt);
  FkChain fk = fk_chain(nxt.q, m);
  Tensor root = reshape(gather(fk.ee(), {0}, {1}), {});
  Tensor g = tape.backward(root).at(u);

  auto J = fk_ee_jacobian(*nxt.q.data, m);
  for (int j = 0; j < 2; ++j) {
    const double sech2 = 1.0 - std::tanh(u0[size_t(j)]) * std::tanh(u0[size_t(j)]);
    const double expect = dt * m.v_max * sech2 * J[size_t(j)][0];
    CHECK(g.at(j) == doctest::Approx(expect).epsilon(1e-10));
  }
}

TEST_CASE("end-to-end action gradient matches finite differences") {
  auto task = cube_task(11);
  auto enc = test_encoder();
  const Camera2D cam = Camera2D::workspace(64, 64);
  const StepConfig scfg = step_config_for(task);
  Tensor z_text = vlm::encode_text(task.spec.instruction, enc);

  Rng rng(17);
  std::vector<double> a(20);
  for (double& v : a) v = rng.uniform(-0.5, 0.5);
  Tensor actions = constant({10, 2}, a);

  Tensor ad = grad_actions(actions, task.state0, task.scene, task.robot, cam, z_text,
                           enc, scfg);
  auto f = [&](const Tensor& acts) {
    auto states = rollout(task.state0, reshape(acts, {10, 2}), task.robot,
                          task.scene.obstacles, kDt, scfg);
    return loss_terminal(states.back(), task.scene, task.robot, cam, z_text,
                         vlm::constant_views(enc))
        .scalar();
  };
  Tensor fd = finite_diff(f, constant({20}, a), 1e-5);

  int ok = 0, considered = 0;
  for (int64_t i = 0; i < 20; ++i) {
    const double x = ad.at(i), y = fd.at(i);
    if (std::fabs(x) < 1e-10 && std::fabs(y) < 1e-10) continue;
    ++considered;
    const double rel = std::fabs(x - y) / std::max({1e-10, std::fabs(x), std::fabs(y)});
    ok += rel < 1e-3;
  }
  REQUIRE(considered > 10);
  CHECK(double(ok) / considered >= 0.95);
}

TEST_CASE("saturated commands kill the gradient chain") {
  auto task = cube_task(19);
  auto enc = test_encoder();
  const Camera2D cam = Camera2D::workspace(64, 64);
  Tensor z_text = vlm::encode_text(task.spec.instruction, enc);

  std::vector<double> a(10, 0.1);
  a[4] = 25.0;  // tanh fully saturated
  Tensor ad = grad_actions(constant({5, 2}, a), task.state0, task.scene, task.robot,
                           cam, z_text, enc, step_config_for(task));
  CHECK(std::fabs(ad.at(4)) < 1e-12);
}

TEST_CASE("zero learning rate leaves the trajectory untouched") {
  auto task = cube_task(7);
  auto enc = test_encoder();
  OptimConfig cfg;
  cfg.lr = 0.0;
  cfg.steps = 5;
  cfg.horizon = 8;
  TrajOptResult r = optimize_fixed(task, enc, cfg, 0);
  REQUIRE(r.loss_history.size() == 5);
  for (double l : r.loss_history) CHECK(l == r.loss_history[0]);
  for (int64_t i = 0; i < r.last_actions.size(); ++i) CHECK(r.last_actions.at(i) == 0.0);
  CHECK(r.total_steps == 5);
}

TEST_CASE("loss stays in range and the running best is monotone") {
  auto task = cube_task(23);
  auto enc = test_encoder();
  OptimConfig cfg;
  cfg.steps = 12;
  cfg.horizon = 10;
  TrajOptResult r = optimize_fixed(task, enc, cfg, 0);
  double run_min = 2.0;
  for (double l : r.loss_history) {
    CHECK(l >= -1.0);
    CHECK(l <= 1.0);
    run_min = std::min(run_min, l);
  }
  CHECK(r.best_loss <= r.loss_history[0]);
  CHECK(r.best_loss <= r.last_loss + 1e-12);
  CHECK(r.final_timestep_loss.size() == 11);
}

TEST_CASE("episodic optimization freezes committed episodes bitwise") {
  auto task = tasks::build_task(tasks::TaskId::ObstacleCross, 5,
                                {.side = geom::Side::Back});
  auto enc = test_encoder();
  OptimConfig base;
  base.lr = 1e-2;
  base.horizon = 20;
  EpisodicConfig epi;
  epi.episode_len = 5;
  epi.steps_per_episode = 4;
  epi.stop_tol = -1.0;  // never stop on plateau

  EpisodicConfig one = epi;
  one.max_episodes = 1;
  TrajOptResult r1 = optimize_episodic(task, enc, base, one, 0);

  EpisodicConfig three = epi;
  three.max_episodes = 3;
  TrajOptResult r3 = optimize_episodic(task, enc, base, three, 0);

  REQUIRE(r1.last_actions.shape[0] == 5);
  REQUIRE(r3.last_actions.shape[0] == 15);
  CHECK(std::memcmp(r1.last_actions.data->data(), r3.last_actions.data->data(),
                    size_t(r1.last_actions.size()) * 8) == 0);
  CHECK(r3.total_steps == 12);

  EpisodicConfig none = epi;
  none.max_episodes = 0;
  TrajOptResult r0 = optimize_episodic(task, enc, base, none, 0);
  CHECK(r0.last_actions.shape[0] == 0);
  CHECK(r0.total_steps == 0);
}

TEST_CASE("demonstrations are complete and reproducible") {
  auto task = cube_task(31);
  auto enc = test_encoder();
  task.spec.optimizer.steps = 6;
  task.spec.horizon = 8;
  Demonstration d1 = generate_demonstration(task, enc, Strategy::Fixed, "cafe");
  Demonstration d2 = generate_demonstration(task, enc, Strategy::Fixed, "cafe");

  CHECK(d1.horizon == 8);
  CHECK(d1.q.size() == 9);
  CHECK(d1.u.size() == 8);
  CHECK(d1.vel.size() == 8);
  CHECK(d1.ee.size() == 9);
  CHECK(d1.total_opt_steps == 6);
  REQUIRE(d1.q.size() == d2.q.size());
  for (size_t t = 0; t < d1.q.size(); ++t)
    CHECK(std::memcmp(d1.q[t].data(), d2.q[t].data(), d1.q[t].size() * 8) == 0);
  CHECK(d1.final_loss == d2.final_loss);

  // header success matches re-evaluating the final recorded state
  auto states = replay(task, d1.q.size() > 1
                                 ? [&] {
                                     std::vector<double> flat;
                                     for (const auto& row : d1.u)
                                       flat.insert(flat.end(), row.begin(), row.end());
                                     return constant({int64_t(d1.u.size()), 2}, flat);
                                   }()
                                 : zeros({0, 2}));
  auto rep = tasks::evaluate_success(task.spec, task.scene, states.back(), task.robot);
  CHECK(rep.success == d1.success);
  CHECK(rep.deviation == doctest::Approx(d1.deviation).epsilon(1e-12));
}
