#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "gradgen/physics.hpp"
#include "gradgen/rng.hpp"

using namespace gradgen;

namespace {

const double kPi = 3.14159265358979323846;

Tensor qt(std::vector<double> v) {
  const int64_t n = int64_t(v.size());
  return constant({n}, std::move(v));
}

Obstacle test_wall(double x) {
  Obstacle o;
  o.kind = Obstacle::Kind::WallSegment;
  o.a = {x, -0.5};
  o.b = {x, 0.5};
  o.radius = 0.05;
  return o;
}

double min_probe_clearance(const SimState& s, const RobotModel& m, const Obstacle& o) {
  SdfShape wall;
  wall.kind = SdfShape::Kind::Capsule;
  wall.a = o.a;
  wall.b = o.b;
  wall.radius = o.radius;
  auto q = q_values(s);
  double worst = 1e9;
  // sample densely along every link
  for (int j = 0; j < m.dof(); ++j) {
    for (double f = 0.0; f <= 1.0; f += 0.05) {
      double x = m.base[0], y = m.base[1], a = 0;
      for (int i = 0; i <= j; ++i) {
        a += q[size_t(i)];
        double len = m.link_lengths[size_t(i)] * (i == j ? f : 1.0);
        x += len * std::cos(a);
        y += len * std::sin(a);
      }
      worst = std::min(worst, signed_distance({x, y}, wall) - m.link_radius);
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("forward kinematics straight arm and right angle") {
  RobotModel m = RobotModel::arm2();
  m.link_lengths = {1.0, 1.0};

  FkChain fk = fk_chain(qt({0.0, 0.0}), m);
  CHECK(fk.ee().at(0) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(fk.ee().at(1) == doctest::Approx(0.0).epsilon(1e-12));

  FkChain fk2 = fk_chain(qt({kPi / 2, 0.0}), m);
  CHECK(fk2.ee().at(0) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(fk2.ee().at(1) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("fk autodiff matches the analytic planar Jacobian") {
  RobotModel m = RobotModel::arm2();
  Rng rng(11);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> q{rng.uniform(-2.5, 2.5), rng.uniform(-2.5, 2.5)};
    auto J = fk_ee_jacobian(q, m);
    for (int comp = 0; comp < 2; ++comp) {
      Tape tape;
      Tensor ql = tape.leaf({2}, q);
      FkChain fk = fk_chain(ql, m);
      Tensor root = reshape(gather(fk.ee(), {comp}, {1}), {});
      Gradients g = tape.backward(root);
      Tensor gq = g.at(ql);
      for (int j = 0; j < 2; ++j)
        worst = std::max(worst, std::fabs(gq.at(j) - J[size_t(j)][size_t(comp)]));
    }
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("signed distance examples") {
  SdfShape disc;
  disc.kind = SdfShape::Kind::Disc;
  disc.a = {0, 0};
  disc.radius = 1.0;
  CHECK(signed_distance({3, 0}, disc) == doctest::Approx(2.0).epsilon(1e-12));

  SdfShape box;
  box.kind = SdfShape::Kind::Box;
  box.a = {0.2, -0.1};
  box.half = {0.3, 0.2};
  CHECK(signed_distance({0.2, -0.1}, box) == doctest::Approx(-0.2).epsilon(5e-3));

  SdfShape degenerate;
  degenerate.kind = SdfShape::Kind::Disc;
  degenerate.radius = 0.0;
  CHECK_THROWS_AS(signed_distance({0, 0}, degenerate), std::invalid_argument);

  SdfShape flat;
  flat.kind = SdfShape::Kind::Box;
  flat.half = {0.0, 0.1};
  CHECK_THROWS_AS(signed_distance({0, 0}, flat), std::invalid_argument);
}

TEST_CASE("sdf gradients have unit norm away from corner fans") {
  Rng rng(17);
  const double hx = 0.3, hy = 0.2;
  int checked = 0;
  while (checked < 100) {
    const double x = rng.uniform(-1.0, 1.0), y = rng.uniform(-1.0, 1.0);
    const double qx = std::fabs(x) - hx, qy = std::fabs(y) - hy;
    if (std::max(qx, qy) < 0.02) continue;          // exterior only
    if (std::fabs(qx - qy) < 0.02) continue;        // corner fan of the smooth max
    Tape tape;
    Tensor p = tape.leaf({1, 2}, {x, y});
    Tensor d = sdf_points_box(p, constant({2}, {0, 0}), constant({1}, {0.0}), hx, hy);
    Gradients g = tape.backward(reshape(d, {}));
    Tensor gp = g.at(p);
    const double nrm = std::hypot(gp.at(0), gp.at(1));
    CHECK(std::fabs(nrm - 1.0) < 1e-3);
    ++checked;
  }

  // disc and capsule are eikonal everywhere outside
  for (int i = 0; i < 100; ++i) {
    const double x = rng.uniform(-2.0, 2.0), y = rng.uniform(-2.0, 2.0);
    SdfShape disc;
    disc.kind = SdfShape::Kind::Disc;
    disc.radius = 0.3;
    if (signed_distance({x, y}, disc) < 0.02) continue;
    Tape tape;
    Tensor p = tape.leaf({1, 2}, {x, y});
    Tensor d = sdf_points_disc(p, constant({2}, {0, 0}), 0.3);
    Gradients g = tape.backward(reshape(d, {}));
    const double nrm = std::hypot(g.at(p).at(0), g.at(p).at(1));
    CHECK(std::fabs(nrm - 1.0) < 1e-3);
  }
}

TEST_CASE("zero action with no contact is a bitwise fixed point") {
  RobotModel m = RobotModel::arm2();
  SimState s;
  s.q = qt({0.4, -0.8});
  SimState next = step(s, qt({0.0, 0.0}), m, {}, 0.05);
  CHECK(std::memcmp(next.q.data->data(), s.q.data->data(), 2 * sizeof(double)) == 0);

  Tensor actions = zeros({50, 2});
  auto states = rollout(s, actions, m, {}, 0.05);
  CHECK(states.size() == 51);
  for (const auto& st : states)
    CHECK(std::memcmp(st.q.data->data(), s.q.data->data(), 2 * sizeof(double)) == 0);
}

TEST_CASE("saturated command reaches the velocity limit") {
  RobotModel m;
  m.id = "one";
  m.link_lengths = {0.3};
  m.joint_limits = {{-3.0, 3.0}};
  m.v_max = 1.0;
  SimState s;
  s.q = qt({0.0});
  SimState next = step(s, qt({25.0}), m, {}, 0.05);
  CHECK(next.q.at(0) == doctest::Approx(0.05).epsilon(1e-9));
}

TEST_CASE("step rejects bad inputs") {
  RobotModel m = RobotModel::arm2();
  SimState s;
  s.q = qt({0.0, 0.0});
  CHECK_THROWS_AS(step(s, qt({0, 0}), m, {}, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(step(s, qt({0, 0, 0}), m, {}, 0.05), std::invalid_argument);
  SimState bad;
  bad.q = Tensor({2}, std::make_shared<std::vector<double>>(
                          std::vector<double>{std::numeric_limits<double>::infinity(), 0}));
  CHECK_THROWS_AS(step(bad, qt({0, 0}), m, {}, 0.05), std::invalid_argument);
}

TEST_CASE("contact-free step gradients match finite differences") {
  RobotModel m = RobotModel::arm2();
  Rng rng(23);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> q{rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5)};
    std::vector<double> u{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
    std::vector<double> c{rng.uniform(-1, 1), rng.uniform(-1, 1)};
    auto project = [&](const Tensor& uu) {
      SimState s;
      s.q = qt(q);
      SimState nxt = step(s, uu, m, {}, 0.05);
      return c[0] * nxt.q.at(0) + c[1] * nxt.q.at(1);
    };
    Tensor fd = finite_diff([&](const Tensor& t) { return project(t); }, qt(u), 1e-6);

    Tape tape;
    Tensor ul = tape.leaf({2}, u);
    SimState s;
    s.q = qt(q);
    SimState nxt = step(s, ul, m, {}, 0.05);
    Tensor root = sum(mul(nxt.q, qt(c)));
    Tensor ad = tape.backward(root).at(ul);
    worst = std::max(worst, max_rel_err(ad, fd));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("in-contact step gradients match finite differences") {
  RobotModel m = RobotModel::arm2();
  Obstacle wall = test_wall(0.62);
  // elbow-forward pose whose distal link sits inside the contact band
  std::vector<double> q{0.35, -0.45};
  Rng rng(31);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> u{rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)};
    std::vector<double> c{rng.uniform(-1, 1), rng.uniform(-1, 1)};
    auto project = [&](const Tensor& uu) {
      SimState s;
      s.q = qt(q);
      SimState nxt = step(s, uu, m, {wall}, 0.05);
      return c[0] * nxt.q.at(0) + c[1] * nxt.q.at(1);
    };
    Tensor fd = finite_diff([&](const Tensor& t) { return project(t); }, qt(u), 1e-6);
    Tape tape;
    Tensor ul = tape.leaf({2}, u);
    SimState s;
    s.q = qt(q);
    SimState nxt = step(s, ul, m, {wall}, 0.05);
    Tensor ad = tape.backward(sum(mul(nxt.q, qt(c)))).at(ul);
    worst = std::max(worst, max_rel_err(ad, fd));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("sustained press against a wall keeps penetration within delta") {
  RobotModel m = RobotModel::arm2();
  Obstacle wall = test_wall(0.6);
  SimState s;
  s.q = qt({kPi / 2, 0.0});  // arm points straight up, wall to the right
  Tensor u = qt({-2.0, 0.0});
  bool touched = false;
  for (int t = 0; t < 50; ++t) {
    s = step(s, u, m, {wall}, 0.05);
    const double clearance = min_probe_clearance(s, m, wall);
    if (clearance < 0.02) touched = true;
    CHECK(clearance >= -wall.delta);
  }
  CHECK(touched);
}

TEST_CASE("joint limits hold under saturated commands") {
  RobotModel m = RobotModel::arm2();
  SimState s;
  s.q = qt({2.8, -2.7});
  Tensor u = qt({30.0, -30.0});
  for (int t = 0; t < 40; ++t) {
    s = step(s, u, m, {}, 0.05);
    CHECK(s.q.at(0) <= m.joint_limits[0][1] + 1e-3);
    CHECK(s.q.at(1) >= m.joint_limits[1][0] - 1e-3);
  }
  CHECK(s.q.at(0) == doctest::Approx(m.joint_limits[0][1]).epsilon(1e-2));
}

TEST_CASE("held object follows the gripper exactly") {
  RobotModel m = RobotModel::arm2();
  SimState s;
  s.q = qt({0.3, 0.2});
  s.objects.push_back({constant({2}, {0, 0}), constant({1}, {0.0})});
  s.held = 0;
  Rng rng(3);
  for (int t = 0; t < 10; ++t) {
    Tensor u = qt({rng.uniform(-1, 1), rng.uniform(-1, 1)});
    s = step(s, u, m, {}, 0.05);
    FkChain fk = fk_chain(s.q, m);
    ObjectPose expect = held_pose_from(fk, m);
    CHECK(s.objects[0].pos.at(0) == expect.pos.at(0));
    CHECK(s.objects[0].pos.at(1) == expect.pos.at(1));
    CHECK(s.objects[0].rot.at(0) == expect.rot.at(0));
  }
}

TEST_CASE("rollout end-effector gradient matches finite differences") {
  RobotModel m = RobotModel::arm2();
  SimState s0;
  s0.q = qt({0.2, -0.1});
  Rng rng(41);
  std::vector<double> a(20);
  for (double& v : a) v = rng.uniform(-0.6, 0.6);

  auto ee_x = [&](const Tensor& actions) {
    auto states = rollout(s0, reshape(actions, {10, 2}), m, {}, 0.05);
    FkChain fk = fk_chain(states.back().q, m);
    return fk.ee().at(0);
  };
  Tensor fd = finite_diff([&](const Tensor& t) { return ee_x(t); }, qt(a), 1e-6);

  Tape tape;
  Tensor actions = tape.leaf({10, 2}, a);
  auto states = rollout(s0, actions, m, {}, 0.05);
  FkChain fk = fk_chain(states.back().q, m);
  Tensor root = reshape(gather(fk.ee(), {0}, {1}), {});
  Tensor ad = reshape(tape.backward(root).at(actions), {20});
  CHECK(max_rel_err(ad, fd) < 1e-5);
}

TEST_CASE("rollout is deterministic") {
  RobotModel m = RobotModel::arm2();
  SimState s0;
  s0.q = qt({0.1, 0.4});
  Obstacle wall = test_wall(0.6);
  Rng rng(5);
  std::vector<double> a(40);
  for (double& v : a) v = rng.uniform(-1.5, 1.5);
  auto run = [&] {
    auto states = rollout(s0, constant({20, 2}, a), m, {wall}, 0.05);
    return *states.back().q.data;
  };
  auto r1 = run(), r2 = run();
  CHECK(std::memcmp(r1.data(), r2.data(), r1.size() * sizeof(double)) == 0);
}
