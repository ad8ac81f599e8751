#include "gradgen/render.hpp"

#include <algorithm>
#include <cmath>

namespace gradgen {

Camera2D Camera2D::workspace(int h, int w, double half) {
  Camera2D c;
  c.H = h;
  c.W = w;
  c.half_extent = half;
  c.scale = double(w) / (2.0 * half);
  c.validate();
  return c;
}

void Camera2D::validate() const {
  if (!(scale > 0)) throw std::invalid_argument("camera: scale must be > 0");
  if (H < 16 || W < 16) throw std::invalid_argument("camera: image size must be >= 16");
}

Tensor Camera2D::pixel_grid() const {
  std::vector<double> g(size_t(H) * size_t(W) * 2);
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      const auto p = pixel_center(r, c);
      g[size_t(r * W + c) * 2] = p[0];
      g[size_t(r * W + c) * 2 + 1] = p[1];
    }
  }
  return constant({int64_t(H) * W, 2}, std::move(g));
}

std::array<double, 2> Camera2D::pixel_center(int row, int col) const {
  return {(col + 0.5) / scale - half_extent, half_extent - (row + 0.5) / scale};
}

void Appearance::validate() const {
  for (double v : rgb)
    if (!(v >= 0.0 && v <= 1.0))
      throw std::invalid_argument("appearance: rgb out of [0,1]");
  if (!(sigma > 0)) throw std::invalid_argument("appearance: sigma must be > 0");
}

Tensor coverage(const Tensor& d, double sigma) {
  Tensor core = sigmoid(scale(d, -1.0 / sigma));
  // quintic smoothstep window, 1 for d <= 12 sigma, 0 for d >= 16 sigma
  Tensor s = scale(add_const(neg(d), 16.0 * sigma), 1.0 / (4.0 * sigma));
  s = min_const(max_const(s, 0.0), 1.0);
  Tensor w = mul(pow_(s, 3.0), add_const(mul(s, add_const(scale(s, 6.0), -15.0)), 10.0));
  return mul(core, w);
}

namespace {

Tensor shape_sdf(const DrawShape& s, const Tensor& grid) {
  switch (s.kind) {
    case SdfShape::Kind::Disc:
      return sdf_points_disc(grid, s.p0, s.radius);
    case SdfShape::Kind::Capsule:
      return sdf_points_capsule(grid, s.p0, s.p1, s.radius);
    case SdfShape::Kind::Box:
      return sdf_points_box(grid, s.p0, s.rot, s.hx, s.hy);
  }
  throw std::invalid_argument("render: unknown shape kind");
}

}  // namespace

Tensor render_shapes(const std::vector<DrawShape>& shapes, const Camera2D& cam,
                     std::array<double, 3> background) {
  cam.validate();
  const int64_t n = int64_t(cam.H) * cam.W;
  Tensor grid = cam.pixel_grid();

  std::vector<size_t> order(shapes.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return shapes[a].app.z_order < shapes[b].app.z_order;
  });

  std::vector<double> bg(size_t(n) * 3);
  for (int64_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) bg[size_t(i * 3 + c)] = background[size_t(c)];
  Tensor img = constant({n, 3}, std::move(bg));

  for (size_t idx : order) {
    const DrawShape& s = shapes[idx];
    s.app.validate();
    Tensor alpha = coverage(shape_sdf(s, grid), s.app.sigma);
    Tensor a3 = broadcast_to(reshape(alpha, {n, 1}), {n, 3});
    Tensor rgb = broadcast_to(
        constant({3}, {s.app.rgb[0], s.app.rgb[1], s.app.rgb[2]}), {n, 3});
    img = add(mul(a3, rgb), mul(add_const(neg(a3), 1.0), img));
  }
  return reshape(img, {cam.H, cam.W, 3});
}

// --- scene ------------------------------------------------------------------

namespace colors {

std::array<double, 3> by_name(const std::string& name) {
  // no palette color shares an equal-channel pair with another layer it can
  // blend with, so only the arm and gripper produce gray pixels
  if (name == "red") return {0.85, 0.10, 0.15};
  if (name == "green") return {0.10, 0.70, 0.15};
  if (name == "blue") return {0.15, 0.25, 0.85};
  if (name == "yellow") return {0.90, 0.85, 0.10};
  if (name == "magenta") return {0.85, 0.15, 0.80};
  throw std::invalid_argument("unknown color '" + name + "'");
}

const std::vector<std::string>& palette() {
  static const std::vector<std::string> p{"red", "green", "blue", "yellow", "magenta"};
  return p;
}

}  // namespace colors

SimState initial_state(const Scene& scene, const Tensor& q, std::optional<int> held) {
  SimState s;
  s.q = q;
  for (const SceneObject& o : scene.objects) {
    s.objects.push_back(
        {constant({2}, {o.pos[0], o.pos[1]}), constant({1}, {o.rot})});
  }
  s.held = held;
  return s;
}

std::vector<DrawShape> scene_draw_shapes(const SimState& state, const Scene& scene,
                                         const RobotModel& model, double sigma) {
  if (state.objects.size() != scene.objects.size())
    throw std::invalid_argument("render: state/scene object count mismatch");
  std::vector<DrawShape> out;

  for (const Obstacle& o : scene.obstacles) {
    DrawShape d;
    if (o.kind == Obstacle::Kind::WallSegment) {
      d.kind = SdfShape::Kind::Capsule;
      d.p0 = constant({2}, {o.a[0], o.a[1]});
      d.p1 = constant({2}, {o.b[0], o.b[1]});
    } else {
      d.kind = SdfShape::Kind::Disc;
      d.p0 = constant({2}, {o.center[0], o.center[1]});
    }
    d.radius = o.radius;
    d.app = {colors::kWall, sigma, 1};
    out.push_back(std::move(d));
  }

  for (size_t i = 0; i < scene.objects.size(); ++i) {
    const SceneObject& o = scene.objects[i];
    DrawShape d;
    d.kind = o.kind;
    d.p0 = state.objects[i].pos;
    d.rot = state.objects[i].rot;
    d.radius = o.radius;
    d.hx = o.hx;
    d.hy = o.hy;
    const bool held = state.held && int(i) == *state.held;
    d.app = {o.rgb, sigma, held ? kHeldZ : o.z_order};
    out.push_back(std::move(d));
  }

  if (scene.draw_arm) {
    FkChain fk = fk_chain(state.q, model);
    for (int j = 0; j < model.dof(); ++j) {
      DrawShape d;
      d.kind = SdfShape::Kind::Capsule;
      d.p0 = fk.joints[size_t(j)];
      d.p1 = fk.joints[size_t(j) + 1];
      d.radius = model.link_radius;
      d.app = {colors::kArmGray, sigma, kArmZ};
      out.push_back(std::move(d));
    }
    DrawShape grip;
    grip.kind = SdfShape::Kind::Disc;
    grip.p0 = fk.ee();
    grip.radius = kGripperRadius;
    grip.app = {colors::kGripperGray, sigma, kGripperZ};
    out.push_back(std::move(grip));
  }
  return out;
}

Tensor render_state(const SimState& state, const Scene& scene, const RobotModel& model,
                    const Camera2D& cam, double sigma) {
  return render_shapes(scene_draw_shapes(state, scene, model, sigma), cam,
                       scene.background);
}

}  // namespace gradgen
