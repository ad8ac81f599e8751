#include "gradgen/physics.hpp"

#include <cmath>

namespace gradgen {

namespace {

Tensor scalar1(double v) { return constant({1}, {v}); }

Tensor vec2(double x, double y) { return constant({2}, {x, y}); }

Tensor elem(const Tensor& v, int64_t i) { return gather(v, {i}, {1}); }

Tensor vec2_of(const Tensor& x, const Tensor& y) { return concat_rows({x, y}); }

// scalar [1] times vector [2]
Tensor smul(const Tensor& s, const Tensor& v) {
  return mul(broadcast_to(s, v.shape), v);
}

Tensor dot2(const Tensor& a, const Tensor& b) {
  return reshape(sum(mul(a, b)), {1});
}

// 90-degree rotation; the derivative of a revolute point wrt its joint angle.
Tensor perp(const Tensor& v) {
  return concat_rows({neg(elem(v, 1)), elem(v, 0)});
}

Tensor norm2(const Tensor& v) { return sqrt_(add_const(dot2(v, v), 1e-30)); }

void check_finite_q(const Tensor& q) {
  for (int64_t i = 0; i < q.size(); ++i)
    if (!std::isfinite(q.at(i)))
      throw std::invalid_argument("step: non-finite joint state at index " +
                                  std::to_string(i));
}

}  // namespace

void RobotModel::validate() const {
  if (link_lengths.empty()) throw std::invalid_argument("robot: no links");
  for (double l : link_lengths)
    if (!(l > 0)) throw std::invalid_argument("robot: link length must be > 0");
  if (joint_limits.size() != link_lengths.size())
    throw std::invalid_argument("robot: joint limit count mismatch");
  for (auto& [lo, hi] : joint_limits)
    if (!(lo < hi)) throw std::invalid_argument("robot: joint limits need lo < hi");
  if (!(v_max > 0)) throw std::invalid_argument("robot: v_max must be > 0");
}

RobotModel RobotModel::arm2() {
  RobotModel m;
  m.id = "arm2";
  m.link_lengths = {0.5, 0.4};
  // every joint range exceeds pi, so any goal configuration has an
  // in-range representative reachable without crossing a limit
  m.joint_limits = {{-3.30, 3.30}, {-3.30, 3.30}};
  return m;
}

RobotModel RobotModel::arm3() {
  RobotModel m;
  m.id = "arm3";
  m.link_lengths = {0.4, 0.3, 0.3};
  m.joint_limits = {{-3.30, 3.30}, {-3.30, 3.30}, {-3.30, 3.30}};
  return m;
}

RobotModel RobotModel::by_id(const std::string& id) {
  if (id == "arm2") return arm2();
  if (id == "arm3") return arm3();
  throw std::invalid_argument("unknown robot model '" + id + "'");
}

// --- sdf ----------------------------------------------------------------------

void SdfShape::validate() const {
  switch (kind) {
    case Kind::Disc:
    case Kind::Capsule:
      if (!(radius > 0)) throw std::invalid_argument("sdf: degenerate radius");
      break;
    case Kind::Box:
      if (!(half[0] > 0) || !(half[1] > 0))
        throw std::invalid_argument("sdf: degenerate box extents");
      break;
  }
}

double signed_distance(const std::array<double, 2>& p, const SdfShape& s) {
  s.validate();
  switch (s.kind) {
    case SdfShape::Kind::Disc: {
      const double dx = p[0] - s.a[0], dy = p[1] - s.a[1];
      return std::sqrt(dx * dx + dy * dy) - s.radius;
    }
    case SdfShape::Kind::Capsule: {
      const double ex = s.b[0] - s.a[0], ey = s.b[1] - s.a[1];
      const double len2 = ex * ex + ey * ey;
      double t = len2 > 0 ? ((p[0] - s.a[0]) * ex + (p[1] - s.a[1]) * ey) / len2 : 0.0;
      t = std::clamp(t, 0.0, 1.0);
      const double dx = p[0] - (s.a[0] + t * ex), dy = p[1] - (s.a[1] + t * ey);
      return std::sqrt(dx * dx + dy * dy) - s.radius;
    }
    case SdfShape::Kind::Box: {
      const double c = std::cos(s.rot), sn = std::sin(s.rot);
      const double dx = p[0] - s.a[0], dy = p[1] - s.a[1];
      const double rx = c * dx + sn * dy, ry = -sn * dx + c * dy;
      const double qx = std::fabs(rx) - s.half[0];
      const double qy = std::fabs(ry) - s.half[1];
      // smooth max with a detached shift; exact gradient, stable values
      const double m = std::max(qx, qy);
      return m + kBoxTau * std::log(std::exp((qx - m) / kBoxTau) +
                                    std::exp((qy - m) / kBoxTau));
    }
  }
  return 0.0;
}

namespace {

struct PtCols {
  Tensor x, y;  // (N)
  int64_t n;
};

PtCols split_points(const Tensor& pts) {
  if (pts.shape.size() != 2 || pts.shape[1] != 2)
    throw std::invalid_argument("sdf: points must be (N,2), got " + shape_str(pts.shape));
  const int64_t n = pts.shape[0];
  std::vector<int64_t> ix(static_cast<size_t>(n), 0), iy(static_cast<size_t>(n), 0);
  for (int64_t i = 0; i < n; ++i) {
    ix[size_t(i)] = 2 * i;
    iy[size_t(i)] = 2 * i + 1;
  }
  return {gather(pts, ix, {n}), gather(pts, iy, {n}), n};
}

Tensor bscalar(const Tensor& s, int64_t n) {
  // [1] or [] -> (N)
  return broadcast_to(reshape(s, {1}), {n});
}

}  // namespace

Tensor sdf_points_disc(const Tensor& pts, const Tensor& center, double r) {
  if (!(r > 0)) throw std::invalid_argument("sdf: degenerate radius");
  PtCols p = split_points(pts);
  Tensor dx = sub(p.x, bscalar(elem(center, 0), p.n));
  Tensor dy = sub(p.y, bscalar(elem(center, 1), p.n));
  return add_const(sqrt_(add_const(add(mul(dx, dx), mul(dy, dy)), 1e-30)), -r);
}

Tensor sdf_points_capsule(const Tensor& pts, const Tensor& a, const Tensor& b,
                          double r) {
  if (!(r > 0)) throw std::invalid_argument("sdf: degenerate radius");
  PtCols p = split_points(pts);
  Tensor ex = sub(elem(b, 0), elem(a, 0));
  Tensor ey = sub(elem(b, 1), elem(a, 1));
  Tensor len2 = add_const(add(mul(ex, ex), mul(ey, ey)), 1e-30);
  Tensor ax = bscalar(elem(a, 0), p.n), ay = bscalar(elem(a, 1), p.n);
  Tensor dx = sub(p.x, ax), dy = sub(p.y, ay);
  Tensor t = div(add(mul(dx, bscalar(ex, p.n)), mul(dy, bscalar(ey, p.n))),
                 bscalar(len2, p.n));
  t = min_const(max_const(t, 0.0), 1.0);
  Tensor cx = add(ax, mul(t, bscalar(ex, p.n)));
  Tensor cy = add(ay, mul(t, bscalar(ey, p.n)));
  Tensor ux = sub(p.x, cx), uy = sub(p.y, cy);
  return add_const(sqrt_(add_const(add(mul(ux, ux), mul(uy, uy)), 1e-30)), -r);
}

Tensor sdf_points_box(const Tensor& pts, const Tensor& center, const Tensor& rot,
                      double hx, double hy, double tau) {
  if (!(hx > 0) || !(hy > 0)) throw std::invalid_argument("sdf: degenerate box extents");
  PtCols p = split_points(pts);
  Tensor c = bscalar(cos_(reshape(rot, {1})), p.n);
  Tensor sn = bscalar(sin_(reshape(rot, {1})), p.n);
  Tensor dx = sub(p.x, bscalar(elem(center, 0), p.n));
  Tensor dy = sub(p.y, bscalar(elem(center, 1), p.n));
  Tensor rx = add(mul(c, dx), mul(sn, dy));
  Tensor ry = sub(mul(c, dy), mul(sn, dx));
  auto absr = [](const Tensor& v) { return add(max_const(v, 0.0), max_const(neg(v), 0.0)); };
  Tensor qx = add_const(absr(rx), -hx);
  Tensor qy = add_const(absr(ry), -hy);
  // log-sum-exp smooth max with a detached, exact shift
  std::vector<double> mv(size_t(p.n));
  for (int64_t i = 0; i < p.n; ++i)
    mv[size_t(i)] = std::max(qx.at(i), qy.at(i));
  Tensor m = constant({p.n}, std::move(mv));
  Tensor e = add(exp_(scale(sub(qx, m), 1.0 / tau)), exp_(scale(sub(qy, m), 1.0 / tau)));
  return add(m, scale(log_(e), tau));
}

// --- kinematics -----------------------------------------------------------------

FkChain fk_chain(const Tensor& q, const RobotModel& m) {
  const int n = m.dof();
  if (q.size() != n)
    throw std::invalid_argument("fk: expected " + std::to_string(n) + " joints, got " +
                                std::to_string(q.size()));
  // cumulative angles via lower-triangular ones
  std::vector<double> tri(size_t(n) * size_t(n), 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) tri[size_t(i * n + j)] = 1.0;
  FkChain fk;
  fk.angles = reshape(matmul(constant({n, n}, tri), reshape(q, {n, 1})), {n});
  Tensor cosA = cos_(fk.angles);
  Tensor sinA = sin_(fk.angles);
  fk.joints.push_back(vec2(m.base[0], m.base[1]));
  for (int j = 0; j < n; ++j) {
    Tensor dir = vec2_of(elem(cosA, j), elem(sinA, j));
    fk.joints.push_back(add(fk.joints.back(), scale(dir, m.link_lengths[size_t(j)])));
  }
  return fk;
}

Tensor grip_point(const FkChain& fk, const RobotModel& m) {
  const int n = int(fk.joints.size()) - 1;
  Tensor dir = vec2_of(cos_(elem(fk.angles, n - 1)), sin_(elem(fk.angles, n - 1)));
  return add(fk.ee(), scale(dir, m.gripper_offset));
}

ObjectPose held_pose_from(const FkChain& fk, const RobotModel& m) {
  const int n = int(fk.joints.size()) - 1;
  return ObjectPose{grip_point(fk, m), elem(fk.angles, n - 1)};
}

std::array<double, 2> fk_ee(const std::vector<double>& q, const RobotModel& m) {
  double x = m.base[0], y = m.base[1], a = 0.0;
  for (size_t j = 0; j < q.size(); ++j) {
    a += q[j];
    x += m.link_lengths[j] * std::cos(a);
    y += m.link_lengths[j] * std::sin(a);
  }
  return {x, y};
}

std::array<double, 2> fk_grip(const std::vector<double>& q, const RobotModel& m) {
  auto ee = fk_ee(q, m);
  double a = 0.0;
  for (double v : q) a += v;
  return {ee[0] + m.gripper_offset * std::cos(a), ee[1] + m.gripper_offset * std::sin(a)};
}

std::vector<std::array<double, 2>> fk_ee_jacobian(const std::vector<double>& q,
                                                  const RobotModel& m) {
  const int n = int(q.size());
  std::vector<std::array<double, 2>> joints(size_t(n) + 1);
  joints[0] = {m.base[0], m.base[1]};
  double a = 0.0;
  for (int j = 0; j < n; ++j) {
    a += q[size_t(j)];
    joints[size_t(j) + 1] = {joints[size_t(j)][0] + m.link_lengths[size_t(j)] * std::cos(a),
                             joints[size_t(j)][1] + m.link_lengths[size_t(j)] * std::sin(a)};
  }
  const auto ee = joints[size_t(n)];
  std::vector<std::array<double, 2>> J(static_cast<size_t>(n));
  for (int j = 0; j < n; ++j) {
    // rotate (ee - joint_j) by 90 degrees
    J[size_t(j)] = {-(ee[1] - joints[size_t(j)][1]), ee[0] - joints[size_t(j)][0]};
  }
  return J;
}

std::vector<double> q_values(const SimState& s) { return *s.q.data; }

std::optional<std::vector<double>> inverse_kinematics(
    const std::array<double, 2>& target, const RobotModel& m, int elbow_sign,
    double q_last) {
  const double px = target[0] - m.base[0], py = target[1] - m.base[1];
  const double l1 = m.link_lengths[0];
  double l2 = m.link_lengths[1];
  double phi = 0.0;
  if (m.dof() == 3) {
    const double l3 = m.link_lengths[2];
    const double ex = m.link_lengths[1] + l3 * std::cos(q_last);
    const double ey = l3 * std::sin(q_last);
    l2 = std::hypot(ex, ey);
    phi = std::atan2(ey, ex);
  } else if (m.dof() != 2) {
    return std::nullopt;
  }
  const double r2 = px * px + py * py;
  const double c2 = (r2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
  if (c2 < -1.0 || c2 > 1.0) return std::nullopt;
  const double q2v = (elbow_sign >= 0 ? 1.0 : -1.0) * std::acos(c2);
  const double q1 = std::atan2(py, px) -
                    std::atan2(l2 * std::sin(q2v), l1 + l2 * std::cos(q2v));
  std::vector<double> q{q1, q2v - phi};
  if (m.dof() == 3) q.push_back(q_last);
  for (int j = 0; j < m.dof(); ++j) {
    if (q[size_t(j)] < m.joint_limits[size_t(j)][0] ||
        q[size_t(j)] > m.joint_limits[size_t(j)][1])
      return std::nullopt;
  }
  return q;
}

// --- dynamics --------------------------------------------------------------------

Tensor soft_limit_clamp(const Tensor& q, const RobotModel& m, double sharpness) {
  const int n = m.dof();
  std::vector<double> lo(static_cast<size_t>(n), 0.0), hi(static_cast<size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    lo[size_t(i)] = m.joint_limits[size_t(i)][0];
    hi[size_t(i)] = m.joint_limits[size_t(i)][1];
  }
  Tensor loT = constant({n}, lo), hiT = constant({n}, hi);
  const double k = sharpness;
  // x + softplus_k(lo-x) saturates the lower bound and is an exact identity
  // away from it (the correction underflows). A small gradient leak keeps
  // saturated commands optimizable; overshoot stays below the 1e-3 slack.
  const double keep = 1.0 - 1e-4;
  Tensor y = add(q, scale(softplus(scale(sub(loT, q), k)), keep / k));
  return sub(y, scale(softplus(scale(sub(y, hiT), k)), keep / k));
}

namespace {

struct Probe {
  int link;        // jacobian reaches joints 0..link
  double frac;     // position along the link, 0=proximal 1=distal
  double radius;
  bool is_held;    // attached point (grip), jacobian reaches all joints
};

std::vector<Probe> make_probes(const RobotModel& m, bool has_held,
                               const StepConfig& cfg) {
  std::vector<Probe> probes;
  for (int j = 0; j < m.dof(); ++j)
    for (double f : {0.34, 0.67, 1.0})
      probes.push_back({j, f, m.link_radius, false});
  if (has_held) probes.push_back({m.dof() - 1, 1.0, cfg.held_probe_radius, true});
  return probes;
}

std::array<double, 2> probe_value(const Probe& pr, const std::vector<double>& q,
                                  const RobotModel& m) {
  double x = m.base[0], y = m.base[1], a = 0.0;
  for (int j = 0; j <= pr.link; ++j) {
    a += q[size_t(j)];
    const double full = m.link_lengths[size_t(j)];
    const double len = j == pr.link && !pr.is_held ? full * pr.frac : full;
    x += len * std::cos(a);
    y += len * std::sin(a);
  }
  if (pr.is_held) {
    x += m.gripper_offset * std::cos(a);
    y += m.gripper_offset * std::sin(a);
  }
  return {x, y};
}

SdfShape obstacle_shape(const Obstacle& o) {
  SdfShape s;
  if (o.kind == Obstacle::Kind::WallSegment) {
    s.kind = SdfShape::Kind::Capsule;
    s.a = o.a;
    s.b = o.b;
  } else {
    s.kind = SdfShape::Kind::Disc;
    s.a = o.center;
  }
  s.radius = o.radius;
  return s;
}

// Distance and its spatial gradient at a probe point, as tape ops.
struct SdfWithGrad {
  Tensor d;   // [1]
  Tensor gx;  // [1]
  Tensor gy;  // [1]
};

SdfWithGrad obstacle_sdf_grad(const Tensor& px, const Tensor& py, const Obstacle& o) {
  Tensor ux, uy;
  if (o.kind == Obstacle::Kind::Disc) {
    ux = add_const(px, -o.center[0]);
    uy = add_const(py, -o.center[1]);
  } else {
    const double ex = o.b[0] - o.a[0], ey = o.b[1] - o.a[1];
    const double len2 = ex * ex + ey * ey;
    Tensor dx = add_const(px, -o.a[0]);
    Tensor dy = add_const(py, -o.a[1]);
    Tensor t = scale(add(scale(dx, ex), scale(dy, ey)), 1.0 / len2);
    t = min_const(max_const(t, 0.0), 1.0);
    ux = sub(dx, scale(t, ex));
    uy = sub(dy, scale(t, ey));
  }
  Tensor len = sqrt_(add_const(add(mul(ux, ux), mul(uy, uy)), 1e-30));
  return {add_const(len, -o.radius), div(ux, len), div(uy, len)};
}

// One smooth penalty relaxation pass: q <- q - beta * dP/dq with
// P = sum_c k*delta^2*softplus((margin - d_c)/delta)^2, assembled analytically
// so the whole expression stays differentiable on the tape.
Tensor relax_pass(const Tensor& q, const RobotModel& m,
                  const std::vector<Obstacle>& obstacles, double beta,
                  const StepConfig& cfg, bool has_held) {
  const int n = m.dof();
  const std::vector<double> qv = *q.data;
  const auto probes = make_probes(m, has_held, cfg);

  // cheap value-level gate: skip the pass when nothing is near a contact
  bool any_active = false;
  std::vector<char> active(probes.size() * obstacles.size(), 0);
  for (size_t pi = 0; pi < probes.size(); ++pi) {
    const auto pv = probe_value(probes[pi], qv, m);
    for (size_t oi = 0; oi < obstacles.size(); ++oi) {
      const double d =
          signed_distance(pv, obstacle_shape(obstacles[oi])) - probes[pi].radius;
      const double z = (cfg.margin - d) / obstacles[oi].delta;
      if (z > -30.0) {
        active[pi * obstacles.size() + oi] = 1;
        any_active = true;
      }
    }
  }
  if (!any_active) return q;

  FkChain fk = fk_chain(q, m);
  std::vector<Tensor> dPdq(static_cast<size_t>(n));  // [1] each, lazily filled
  for (size_t pi = 0; pi < probes.size(); ++pi) {
    bool probe_active = false;
    for (size_t oi = 0; oi < obstacles.size(); ++oi)
      probe_active |= active[pi * obstacles.size() + oi] != 0;
    if (!probe_active) continue;
    const Probe& pr = probes[pi];

    Tensor p;  // [2]
    if (pr.is_held) {
      p = grip_point(fk, m);
    } else {
      const Tensor& a = fk.joints[size_t(pr.link)];
      const Tensor& b = fk.joints[size_t(pr.link) + 1];
      p = add(scale(a, 1.0 - pr.frac), scale(b, pr.frac));
    }
    Tensor px = elem(p, 0), py = elem(p, 1);

    // joints the probe can react through
    const int reach = pr.is_held ? n : pr.link + 1;
    std::vector<Tensor> jac(static_cast<size_t>(reach));  // [2] each: d p / d q_j
    for (int j = 0; j < reach; ++j) jac[size_t(j)] = perp(sub(p, fk.joints[size_t(j)]));

    for (size_t oi = 0; oi < obstacles.size(); ++oi) {
      if (!active[pi * obstacles.size() + oi]) continue;
      const Obstacle& o = obstacles[oi];
      SdfWithGrad sg = obstacle_sdf_grad(px, py, o);
      Tensor d = add_const(sg.d, -pr.radius);
      Tensor z = scale(add_const(neg(d), cfg.margin), 1.0 / o.delta);
      // dP/dd = -2*k*delta*softplus(z)*sigmoid(z)
      Tensor coef = scale(mul(softplus(z), sigmoid(z)), -2.0 * o.stiffness * o.delta);
      Tensor grad2 = vec2_of(sg.gx, sg.gy);
      for (int j = 0; j < reach; ++j) {
        Tensor term = mul(coef, dot2(grad2, jac[size_t(j)]));
        dPdq[size_t(j)] = dPdq[size_t(j)].defined() ? add(dPdq[size_t(j)], term) : term;
      }
    }
  }

  std::vector<Tensor> delta_rows;
  Tensor zero1 = scalar1(0.0);
  for (int j = 0; j < n; ++j)
    delta_rows.push_back(dPdq[size_t(j)].defined() ? dPdq[size_t(j)] : zero1);
  return sub(q, scale(concat_rows(delta_rows), beta));
}

}  // namespace

SimState step(const SimState& s, const Tensor& u, const RobotModel& m,
              const std::vector<Obstacle>& obstacles, double dt,
              const StepConfig& cfg) {
  if (!(dt > 0)) throw std::invalid_argument("step: dt must be > 0");
  if (u.size() != m.dof())
    throw std::invalid_argument("step: action has " + std::to_string(u.size()) +
                                " entries for a " + std::to_string(m.dof()) +
                                "-dof arm");
  check_finite_q(s.q);

  Tensor q = add(s.q, scale(tanh_(u), dt * m.v_max));
  q = soft_limit_clamp(q, m, cfg.limit_sharpness);
  if (!obstacles.empty()) {
    const double beta = dt / cfg.relax_passes;
    for (int p = 0; p < cfg.relax_passes; ++p)
      q = relax_pass(q, m, obstacles, beta, cfg, s.held.has_value());
  }

  SimState out;
  out.q = q;
  out.objects = s.objects;
  out.held = s.held;
  if (s.held) {
    FkChain fk = fk_chain(q, m);
    out.objects[size_t(*s.held)] = held_pose_from(fk, m);
  }
  return out;
}

std::vector<SimState> rollout(const SimState& s0, const Tensor& actions,
                              const RobotModel& m,
                              const std::vector<Obstacle>& obstacles, double dt,
                              const StepConfig& cfg) {
  if (actions.shape.size() != 2 || actions.shape[1] != m.dof())
    throw std::invalid_argument("rollout: actions must be (T," +
                                std::to_string(m.dof()) + "), got " +
                                shape_str(actions.shape));
  const int64_t T = actions.shape[0];
  if (T < 1) throw std::invalid_argument("rollout: horizon must be >= 1");
  std::vector<SimState> states;
  states.reserve(size_t(T) + 1);
  states.push_back(s0);
  for (int64_t t = 0; t < T; ++t) {
    Tensor u = reshape(slice_rows(actions, t, t + 1), {m.dof()});
    states.push_back(step(states.back(), u, m, obstacles, dt, cfg));
  }
  return states;
}

}  // namespace gradgen
