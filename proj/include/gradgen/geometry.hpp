#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

#include "gradgen/rng.hpp"

// Scene geometry shared by the task builders and the caption corpus, so the
// encoder trains on exactly the shapes and regions the tasks evaluate.
namespace gradgen::geom {

constexpr double kCubeHalf = 0.02;    // 0.04 m cubes
constexpr double kCupRadius = 0.04;
constexpr double kDishRadius = 0.09;
constexpr double kWallHalfLen = 0.20;  // 0.40 m blocking extent
constexpr double kWallRadius = 0.05;   // 0.10 m thickness
constexpr double kReachLo = 0.30, kReachHi = 0.80;
constexpr double kBackGap = 0.025;     // region starts just behind the wall
constexpr double kBackDepth = 0.30;    // 0.40 x 0.30 m back region

inline std::array<double, 2> task_wall_center() { return {0.0, 0.5}; }

enum class Side { Left, Right, Back };

inline Side side_from_string(const std::string& s) {
  if (s == "left") return Side::Left;
  if (s == "right") return Side::Right;
  if (s == "back") return Side::Back;
  throw std::invalid_argument("unknown side '" + s + "'");
}

inline std::string to_string(Side s) {
  switch (s) {
    case Side::Left: return "left";
    case Side::Right: return "right";
    case Side::Back: return "back";
  }
  return "";
}

struct BackRegion {
  double x_lo, x_hi, y_lo, y_hi;
};

inline BackRegion back_region(const std::array<double, 2>& wall) {
  return {wall[0] - kWallHalfLen, wall[0] + kWallHalfLen,
          wall[1] + kWallRadius + kBackGap,
          wall[1] + kWallRadius + kBackGap + kBackDepth};
}

inline double side_boundary(Side s, const std::array<double, 2>& wall) {
  const double end = kWallHalfLen + kWallRadius;
  return s == Side::Left ? wall[0] - end : wall[0] + end;
}

inline bool in_region(Side s, const std::array<double, 2>& wall,
                      const std::array<double, 2>& p) {
  switch (s) {
    case Side::Left: return p[0] <= side_boundary(s, wall);
    case Side::Right: return p[0] >= side_boundary(s, wall);
    case Side::Back: {
      const BackRegion r = back_region(wall);
      return p[0] >= r.x_lo && p[0] <= r.x_hi && p[1] >= r.y_lo && p[1] <= r.y_hi;
    }
  }
  return false;
}

// Euclidean distance to the commanded region; 0 inside.
inline double region_distance(Side s, const std::array<double, 2>& wall,
                              const std::array<double, 2>& p) {
  switch (s) {
    case Side::Left: return std::max(0.0, p[0] - side_boundary(s, wall));
    case Side::Right: return std::max(0.0, side_boundary(s, wall) - p[0]);
    case Side::Back: {
      const BackRegion r = back_region(wall);
      const double dx = std::max({r.x_lo - p[0], 0.0, p[0] - r.x_hi});
      const double dy = std::max({r.y_lo - p[1], 0.0, p[1] - r.y_hi});
      return std::hypot(dx, dy);
    }
  }
  return 0.0;
}

inline std::array<double, 2> sample_annulus(Rng& rng, double lo = kReachLo,
                                            double hi = kReachHi) {
  // uniform over the annulus area
  const double r = std::sqrt(rng.uniform(lo * lo, hi * hi));
  const double a = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
  return {r * std::cos(a), r * std::sin(a)};
}

inline double dist(const std::array<double, 2>& a, const std::array<double, 2>& b) {
  return std::hypot(a[0] - b[0], a[1] - b[1]);
}

}  // namespace gradgen::geom
