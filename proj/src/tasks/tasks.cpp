#include "gradgen/tasks.hpp"

#include <json.hpp>

#include "gradgen/util.hpp"
#include "gradgen/vlm.hpp"

namespace gradgen::tasks {

TaskId task_from_string(const std::string& s) {
  if (s == "cube-select") return TaskId::CubeSelect;
  if (s == "cup-place") return TaskId::CupPlace;
  if (s == "obstacle-cross") return TaskId::ObstacleCross;
  throw std::invalid_argument("unknown task '" + s + "'");
}

std::string to_string(TaskId t) {
  switch (t) {
    case TaskId::CubeSelect: return "cube-select";
    case TaskId::CupPlace: return "cup-place";
    case TaskId::ObstacleCross: return "obstacle-cross";
  }
  return "";
}

const std::vector<std::string>& task_names() {
  static const std::vector<std::string> names{"cube-select", "cup-place",
                                              "obstacle-cross"};
  return names;
}

namespace {

using geom::Side;

SceneObject scene_cube(const std::string& color, std::array<double, 2> pos) {
  SceneObject o;
  o.id = color + "-cube";
  o.kind = SdfShape::Kind::Box;
  o.hx = o.hy = geom::kCubeHalf;
  o.pos = pos;
  o.color_name = color;
  o.rgb = colors::by_name(color);
  o.z_order = 3;
  return o;
}

std::array<double, 2> place_clear(Rng& rng,
                                  const std::vector<std::array<double, 2>>& taken,
                                  double min_dist) {
  for (int tries = 0; tries < 100; ++tries) {
    auto p = geom::sample_annulus(rng);
    bool ok = true;
    for (const auto& t : taken) ok &= geom::dist(p, t) >= min_dist;
    if (ok) return p;
  }
  throw std::runtime_error("build_task: overlap resolution failed after 100 resamples");
}

// Random end-effector position, solved to joints with one elbow branch.
std::vector<double> sample_pose(Rng& rng, const RobotModel& m) {
  for (int tries = 0; tries < 1000; ++tries) {
    const auto ee = geom::sample_annulus(rng);
    const int elbow = rng.uniform() < 0.5 ? 1 : -1;
    const double q_last = m.dof() == 3 ? rng.uniform(-0.5, 0.5) : 0.0;
    if (auto q = inverse_kinematics(ee, m, elbow, q_last)) {
      auto g = fk_grip(*q, m);
      if (std::fabs(g[0]) <= 1.0 && std::fabs(g[1]) <= 1.0) return *q;
    }
  }
  throw std::runtime_error("build_task: pose sampling failed");
}

std::vector<double> sample_front_pose(Rng& rng, const RobotModel& m,
                                      const std::array<double, 2>& wall) {
  for (int tries = 0; tries < 2000; ++tries) {
    std::array<double, 2> ee{rng.uniform(-0.55, 0.55),
                             rng.uniform(-0.20, wall[1] - geom::kWallRadius - 0.18)};
    if (std::hypot(ee[0], ee[1]) < geom::kReachLo) continue;
    const int elbow = rng.uniform() < 0.5 ? 1 : -1;
    const double q_last = m.dof() == 3 ? rng.uniform(-0.5, 0.5) : 0.0;
    if (auto q = inverse_kinematics(ee, m, elbow, q_last)) {
      auto g = fk_grip(*q, m);
      if (g[1] <= wall[1] - geom::kWallRadius - 0.10 && g[1] >= -0.30 &&
          std::fabs(g[0]) <= 0.60)
        return *q;
    }
  }
  throw std::runtime_error("build_task: front pose sampling failed");
}

const std::vector<std::string> kCubeColors{"red", "green", "blue"};
const std::vector<std::string> kSeenCupColors{"red", "green", "blue", "yellow"};

}  // namespace

BuiltTask build_task(TaskId id, uint64_t seed, const VariantFlags& flags) {
  Rng rng(Rng::mix(seed, uint64_t(id) + 0x7a5ca1ULL));
  BuiltTask out;
  out.robot = flags.novel_embodiment ? RobotModel::arm3() : RobotModel::arm2();
  out.spec.id = id;
  out.spec.seed = seed;
  out.spec.robot_id = out.robot.id;
  out.spec.unseen_color = flags.unseen_color;
  out.spec.novel_embodiment = flags.novel_embodiment;

  switch (id) {
    case TaskId::CubeSelect: {
      std::vector<double> q0 = sample_pose(rng, out.robot);
      std::vector<std::array<double, 2>> taken;
      for (const std::string& c : kCubeColors) {
        auto p = place_clear(rng, taken, 0.15);
        taken.push_back(p);
        out.scene.objects.push_back(scene_cube(c, p));
      }
      const int target = int(rng.randint(3));
      out.spec.instruction = "grasp the " + kCubeColors[size_t(target)] + " cube";
      out.spec.target_object = target;
      out.spec.predicate = PredicateKind::GripperToTarget;
      out.spec.threshold_m = 0.10;
      out.spec.horizon = 50;
      out.spec.optimizer = {1e-2, 200};
      out.state0 = initial_state(out.scene,
                                 constant({int64_t(q0.size())}, q0));
      break;
    }
    case TaskId::CupPlace: {
      std::vector<double> q0 = sample_pose(rng, out.robot);
      const std::string color =
          flags.unseen_color ? "magenta"
                             : kSeenCupColors[size_t(rng.randint(4))];
      auto dish_pos = place_clear(rng, {fk_grip(q0, out.robot)}, 0.15);

      SceneObject dish;
      dish.id = "dish";
      dish.kind = SdfShape::Kind::Disc;
      dish.radius = geom::kDishRadius;
      dish.pos = dish_pos;
      dish.color_name = "dish";
      dish.rgb = colors::kDish;
      dish.z_order = 2;
      out.scene.objects.push_back(dish);

      SceneObject cup;
      cup.id = color + "-cup";
      cup.kind = SdfShape::Kind::Disc;
      cup.radius = geom::kCupRadius;
      cup.pos = fk_grip(q0, out.robot);
      cup.color_name = color;
      cup.rgb = colors::by_name(color);
      cup.z_order = 3;
      out.scene.objects.push_back(cup);

      out.spec.instruction = "put the cup on the dish";
      out.spec.held_object = 1;
      out.spec.target_object = 0;  // dish
      out.spec.predicate = PredicateKind::CupOnDish;
      out.spec.threshold_m = 0.05;
      out.spec.horizon = 70;
      out.spec.optimizer = {1e-3, 200};
      Tensor q = constant({int64_t(q0.size())}, q0);
      out.state0 = initial_state(out.scene, q, 1);
      FkChain fk = fk_chain(q, out.robot);
      out.state0.objects[1] = held_pose_from(fk, out.robot);
      break;
    }
    case TaskId::ObstacleCross: {
      const auto wall = geom::task_wall_center();
      Obstacle w;
      w.kind = Obstacle::Kind::WallSegment;
      w.a = {wall[0] - geom::kWallHalfLen, wall[1]};
      w.b = {wall[0] + geom::kWallHalfLen, wall[1]};
      w.radius = geom::kWallRadius;
      out.scene.obstacles.push_back(w);

      std::vector<double> q0 = sample_front_pose(rng, out.robot, wall);
      const Side side = flags.side ? *flags.side : Side(rng.randint(3));
      const std::string color = kSeenCupColors[size_t(rng.randint(4))];
      out.scene.objects.push_back(scene_cube(color, fk_grip(q0, out.robot)));

      out.spec.instruction = "move to the " + geom::to_string(side) + " side of the wall";
      out.spec.held_object = 0;
      out.spec.target_object = 0;
      out.spec.predicate = PredicateKind::Region;
      out.spec.side = side;
      out.spec.wall_center = wall;
      out.spec.threshold_m = 0.10;  // reported only; success is containment
      out.spec.horizon = 100;
      out.spec.optimizer = {1e-2, 300};
      Tensor q = constant({int64_t(q0.size())}, q0);
      out.state0 = initial_state(out.scene, q, 0);
      FkChain fk = fk_chain(q, out.robot);
      out.state0.objects[0] = held_pose_from(fk, out.robot);
      break;
    }
  }
  if (!vlm::Vocabulary::instance().all_known(out.spec.instruction))
    throw std::logic_error("instruction leaves the grammar: " + out.spec.instruction);
  return out;
}

std::array<double, 2> predicate_point(const TaskSpec& spec, const SimState& state,
                                      const RobotModel& robot) {
  switch (spec.predicate) {
    case PredicateKind::GripperToTarget:
      // the grasp reference point, where held objects attach
      return fk_grip(*state.q.data, robot);
    case PredicateKind::CupOnDish:
    case PredicateKind::Region: {
      const auto& pos = state.objects[size_t(*spec.held_object)].pos;
      return {pos.at(0), pos.at(1)};
    }
  }
  return {0, 0};
}

SuccessReport evaluate_success(const TaskSpec& spec, const Scene& scene,
                               const SimState& final_state, const RobotModel& robot) {
  SuccessReport rep;
  const auto p = predicate_point(spec, final_state, robot);
  switch (spec.predicate) {
    case PredicateKind::GripperToTarget: {
      const auto& t = final_state.objects[size_t(spec.target_object)].pos;
      rep.deviation = std::hypot(p[0] - t.at(0), p[1] - t.at(1));
      rep.success = rep.deviation <= spec.threshold_m;
      break;
    }
    case PredicateKind::CupOnDish: {
      const auto& t = final_state.objects[size_t(spec.target_object)].pos;
      rep.deviation = std::hypot(p[0] - t.at(0), p[1] - t.at(1));
      rep.success = rep.deviation <= spec.threshold_m;
      break;
    }
    case PredicateKind::Region: {
      rep.deviation = geom::region_distance(spec.side, spec.wall_center, p);
      rep.success = geom::in_region(spec.side, spec.wall_center, p);
      break;
    }
  }
  (void)scene;
  return rep;
}

std::array<double, 2> privileged_goal_point(const TaskSpec& spec, const Scene& scene) {
  switch (spec.predicate) {
    case PredicateKind::GripperToTarget:
    case PredicateKind::CupOnDish:
      return scene.objects[size_t(spec.target_object)].pos;
    case PredicateKind::Region: {
      const auto wall = spec.wall_center;
      switch (spec.side) {
        case Side::Left: return {geom::side_boundary(spec.side, wall) - 0.20, wall[1]};
        case Side::Right: return {geom::side_boundary(spec.side, wall) + 0.20, wall[1]};
        case Side::Back: {
          const auto r = geom::back_region(wall);
          return {(r.x_lo + r.x_hi) / 2, (r.y_lo + r.y_hi) / 2};
        }
      }
    }
  }
  return {0, 0};
}

double privileged_distance(const TaskSpec& spec, const Scene& scene,
                           const SimState& state, const RobotModel& robot) {
  const auto p = predicate_point(spec, state, robot);
  const auto g = privileged_goal_point(spec, scene);
  return std::hypot(p[0] - g[0], p[1] - g[1]);
}

std::string task_config_json(const BuiltTask& task) {
  nlohmann::ordered_json j;
  j["task_id"] = to_string(task.spec.id);
  j["seed"] = task.spec.seed;
  j["robot"] = task.spec.robot_id;
  j["instruction"] = task.spec.instruction;
  j["threshold_m"] = task.spec.threshold_m;
  j["horizon"] = task.spec.horizon;
  j["optimizer"] = {{"lr", task.spec.optimizer.lr}, {"steps", task.spec.optimizer.steps}};
  nlohmann::ordered_json objs = nlohmann::ordered_json::array();
  for (const SceneObject& o : task.scene.objects) {
    nlohmann::ordered_json jo;
    jo["id"] = o.id;
    jo["kind"] = o.kind == SdfShape::Kind::Disc ? "disc"
                 : o.kind == SdfShape::Kind::Box ? "box" : "capsule";
    jo["pos"] = {o.pos[0], o.pos[1]};
    jo["color"] = o.color_name;
    objs.push_back(jo);
  }
  j["objects"] = objs;
  if (!task.scene.obstacles.empty()) {
    const Obstacle& w = task.scene.obstacles[0];
    j["wall"] = {{"a", {w.a[0], w.a[1]}}, {"b", {w.b[0], w.b[1]}}, {"radius", w.radius}};
  }
  return j.dump(2) + "\n";
}

void write_task_config(const BuiltTask& task, const std::string& path) {
  spit(path, task_config_json(task));
}

}  // namespace gradgen::tasks
