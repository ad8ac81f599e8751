#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "gradgen/tensor.hpp"

namespace gradgen {

struct RobotModel {
  std::string id;
  std::vector<double> link_lengths;                 // m
  std::vector<std::array<double, 2>> joint_limits;  // rad, [lo,hi] per joint
  std::array<double, 2> base{0.0, 0.0};
  double v_max = 1.5;          // rad/s, commands squash through tanh
  double gripper_offset = 0.08;
  double link_radius = 0.035;

  int dof() const { return int(link_lengths.size()); }
  void validate() const;

  static RobotModel arm2();
  static RobotModel arm3();
  static RobotModel by_id(const std::string& id);
};

struct ObjectPose {
  Tensor pos;  // [2]
  Tensor rot;  // [1]
};

struct SimState {
  Tensor q;  // [n] joint angles
  std::vector<ObjectPose> objects;
  std::optional<int> held;  // object rigidly attached to the gripper
};

struct Obstacle {
  enum class Kind { WallSegment, Disc };
  Kind kind = Kind::WallSegment;
  std::array<double, 2> a{0, 0}, b{0, 0};  // segment endpoints
  std::array<double, 2> center{0, 0};      // disc
  double radius = 0.05;                    // capsule/disc radius
  double stiffness = 200.0;                // k
  double delta = 0.01;                     // smoothing width (m)
};

struct StepConfig {
  int relax_passes = 4;
  double margin = 0.005;          // contact activation distance (m)
  double limit_sharpness = 1000;  // soft joint-limit clamp steepness
  double held_probe_radius = 0.03;
};

// --- signed distance fields -------------------------------------------------

struct SdfShape {
  enum class Kind { Disc, Box, Capsule };
  Kind kind = Kind::Disc;
  std::array<double, 2> a{0, 0};     // disc/box center, capsule endpoint a
  std::array<double, 2> b{0, 0};     // capsule endpoint b
  std::array<double, 2> half{0, 0};  // box half extents
  double rot = 0.0;                  // box rotation
  double radius = 0.0;               // disc/capsule radius
  void validate() const;
};

// Smooth-max temperature for box corners.
constexpr double kBoxTau = 1e-3;

double signed_distance(const std::array<double, 2>& p, const SdfShape& s);

// Differentiable per-point distances; pts is (N,2), poses may be on a tape.
Tensor sdf_points_disc(const Tensor& pts, const Tensor& center, double r);
Tensor sdf_points_capsule(const Tensor& pts, const Tensor& a, const Tensor& b,
                          double r);
Tensor sdf_points_box(const Tensor& pts, const Tensor& center, const Tensor& rot,
                      double hx, double hy, double tau = kBoxTau);

// --- forward kinematics -------------------------------------------------------

struct FkChain {
  std::vector<Tensor> joints;  // n+1 points [2]: base .. end effector
  Tensor angles;               // [n] cumulative link angles
  const Tensor& ee() const { return joints.back(); }
};

FkChain fk_chain(const Tensor& q, const RobotModel& m);
// Attachment point just beyond the end effector, along the last link.
Tensor grip_point(const FkChain& fk, const RobotModel& m);
ObjectPose held_pose_from(const FkChain& fk, const RobotModel& m);

// Plain-value oracles (also used by privileged baselines).
std::array<double, 2> fk_ee(const std::vector<double>& q, const RobotModel& m);
std::array<double, 2> fk_grip(const std::vector<double>& q, const RobotModel& m);
// d(ee)/d(q_j), analytic planar Jacobian; result[j] = {dx/dqj, dy/dqj}.
std::vector<std::array<double, 2>> fk_ee_jacobian(const std::vector<double>& q,
                                                  const RobotModel& m);

std::vector<double> q_values(const SimState& s);

// Closed-form planar IK placing the end effector at `target`. For three-link
// arms the distal joint is fixed at `q_last` and folded into a virtual second
// link. Returns nothing when the target is out of reach or violates limits.
std::optional<std::vector<double>> inverse_kinematics(
    const std::array<double, 2>& target, const RobotModel& m, int elbow_sign,
    double q_last = 0.0);

// --- dynamics ---------------------------------------------------------------

Tensor soft_limit_clamp(const Tensor& q, const RobotModel& m, double sharpness);

// q' = clamp(q + dt * v_max * tanh(u)), then smooth penalty relaxation against
// the obstacles, then the held object pose is recomputed from q'.
SimState step(const SimState& s, const Tensor& u, const RobotModel& m,
              const std::vector<Obstacle>& obstacles, double dt,
              const StepConfig& cfg = {});

// T+1 states, states[0] == s0. actions is (T, dof).
std::vector<SimState> rollout(const SimState& s0, const Tensor& actions,
                              const RobotModel& m,
                              const std::vector<Obstacle>& obstacles, double dt,
                              const StepConfig& cfg = {});

}  // namespace gradgen
