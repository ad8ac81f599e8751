#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gradgen/geometry.hpp"
#include "gradgen/physics.hpp"
#include "gradgen/render.hpp"

namespace gradgen::tasks {

enum class TaskId { CubeSelect, CupPlace, ObstacleCross };
TaskId task_from_string(const std::string& s);
std::string to_string(TaskId t);
const std::vector<std::string>& task_names();

enum class PredicateKind { GripperToTarget, CupOnDish, Region };

struct OptimDefaults {
  double lr = 1e-2;
  int steps = 200;
};

struct TaskSpec {
  TaskId id = TaskId::CubeSelect;
  std::string instruction;
  std::string robot_id = "arm2";
  std::optional<int> held_object;
  PredicateKind predicate = PredicateKind::GripperToTarget;
  double threshold_m = 0.10;
  int horizon = 50;
  OptimDefaults optimizer;
  int target_object = -1;              // index into scene objects
  geom::Side side = geom::Side::Back;  // Region predicate
  std::array<double, 2> wall_center{0, 0};
  uint64_t seed = 0;
  bool unseen_color = false;
  bool novel_embodiment = false;
};

struct VariantFlags {
  bool unseen_color = false;
  bool novel_embodiment = false;
  // Obstacle-Crossing command override; seed-random when unset.
  std::optional<geom::Side> side;
};

struct BuiltTask {
  TaskSpec spec;
  Scene scene;
  SimState state0;
  RobotModel robot;
};

BuiltTask build_task(TaskId id, uint64_t seed, const VariantFlags& flags = {});

struct SuccessReport {
  bool success = false;
  double deviation = 0.0;  // m
};

SuccessReport evaluate_success(const TaskSpec& spec, const Scene& scene,
                               const SimState& final_state, const RobotModel& robot);

// Privileged goal distance used by the handcrafted baseline; for distance
// predicates this equals the deviation, for regions the distance to the
// region's center point.
double privileged_distance(const TaskSpec& spec, const Scene& scene,
                           const SimState& state, const RobotModel& robot);
std::array<double, 2> privileged_goal_point(const TaskSpec& spec, const Scene& scene);
// Position the predicate measures (gripper, held cup, held cube).
std::array<double, 2> predicate_point(const TaskSpec& spec, const SimState& state,
                                      const RobotModel& robot);

// Scene/task config file (External Interfaces): JSON with task, seed, robot,
// objects, instruction, threshold, horizon and optimizer defaults.
std::string task_config_json(const BuiltTask& task);
void write_task_config(const BuiltTask& task, const std::string& path);

}  // namespace gradgen::tasks
