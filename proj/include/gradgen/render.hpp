#pragma once

#include <array>
#include <string>
#include <vector>

#include "gradgen/physics.hpp"
#include "gradgen/tensor.hpp"

namespace gradgen {

struct Camera2D {
  double scale;  // px per m
  double half_extent;
  int H = 64, W = 64;

  static Camera2D workspace(int h = 64, int w = 64, double half = 1.2);
  void validate() const;
  // World coordinates of pixel centers, (H*W, 2), row-major with the top row
  // at world y = +half_extent.
  Tensor pixel_grid() const;
  std::array<double, 2> pixel_center(int row, int col) const;
  double pixel_pitch() const { return 1.0 / scale; }
};

struct Appearance {
  std::array<double, 3> rgb{0, 0, 0};
  double sigma = 0.01;  // coverage softness (m)
  int z_order = 0;
  void validate() const;
};

// One rasterizable shape; pose tensors may live on a tape.
struct DrawShape {
  SdfShape::Kind kind = SdfShape::Kind::Disc;
  Tensor p0;   // [2] disc/box center or capsule endpoint a
  Tensor p1;   // [2] capsule endpoint b
  Tensor rot;  // [1] box rotation
  double radius = 0, hx = 0, hy = 0;
  Appearance app;
};

// Coverage profile: sigmoid(-d/sigma) under a C2 window that is exactly 1 for
// d <= 12 sigma and exactly 0 for d >= 16 sigma, so far pixels carry exactly
// zero gradient and lattice translations preserve total coverage.
Tensor coverage(const Tensor& sdf, double sigma);

// Painter's-order alpha compositing over the background, ascending z_order.
// Returns (H, W, 3); on a tape iff any shape pose is.
Tensor render_shapes(const std::vector<DrawShape>& shapes, const Camera2D& cam,
                     std::array<double, 3> background = {1, 1, 1});

// --- scene description --------------------------------------------------------

namespace colors {
inline constexpr std::array<double, 3> kArmGray{0.5, 0.5, 0.5};
inline constexpr std::array<double, 3> kGripperGray{0.35, 0.35, 0.35};
inline constexpr std::array<double, 3> kWall{0.55, 0.45, 0.35};
inline constexpr std::array<double, 3> kDish{0.45, 0.8, 0.8};
inline constexpr std::array<double, 3> kBackground{1, 1, 1};
std::array<double, 3> by_name(const std::string& name);
const std::vector<std::string>& palette();  // grammar color names
}  // namespace colors

struct SceneObject {
  std::string id;
  SdfShape::Kind kind = SdfShape::Kind::Box;
  double radius = 0, hx = 0, hy = 0;
  std::array<double, 2> pos{0, 0};  // initial pose
  double rot = 0;
  std::string color_name;
  std::array<double, 3> rgb{0, 0, 0};
  bool collidable = false;
  int z_order = 0;
};

struct Scene {
  std::vector<SceneObject> objects;  // parallel to SimState.objects
  std::vector<Obstacle> obstacles;
  bool draw_arm = true;
  std::array<double, 3> background = colors::kBackground;
};

constexpr int kArmZ = 10;
constexpr int kGripperZ = 11;
constexpr int kHeldZ = 12;
constexpr double kDefaultSigma = 0.01;
constexpr double kGripperRadius = 0.045;

// Initial SimState whose object poses mirror the scene description.
SimState initial_state(const Scene& scene, const Tensor& q,
                       std::optional<int> held = std::nullopt);

std::vector<DrawShape> scene_draw_shapes(const SimState& state, const Scene& scene,
                                         const RobotModel& model,
                                         double sigma = kDefaultSigma);

Tensor render_state(const SimState& state, const Scene& scene,
                    const RobotModel& model, const Camera2D& cam,
                    double sigma = kDefaultSigma);

// --- image files ----------------------------------------------------------------

std::vector<uint8_t> png_bytes(const Tensor& image);  // (H,W,3) in [0,1]
void export_png(const Tensor& image, const std::string& path);
Tensor import_png(const std::string& path);
std::vector<uint8_t> quantize_image(const Tensor& image);  // round(255 v)
Tensor image_from_bytes(const std::vector<uint8_t>& rgb, int h, int w);
// Animated GIF, default frame delay 50 ms.
void export_gif(const std::vector<Tensor>& frames, const std::string& path,
                int delay_cs = 5);

}  // namespace gradgen
