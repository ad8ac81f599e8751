#include <json.hpp>

#include "gradgen/geometry.hpp"
#include "gradgen/kernels.hpp"
#include "gradgen/render.hpp"
#include "gradgen/rng.hpp"
#include "gradgen/util.hpp"
#include "gradgen/vlm.hpp"

namespace gradgen::vlm {

Grammar grammar_from_string(const std::string& s) {
  if (s == "generic-scenes") return Grammar::GenericScenes;
  if (s == "robot-scenes") return Grammar::RobotScenes;
  throw std::invalid_argument("unknown grammar '" + s + "'");
}

std::string to_string(Grammar g) {
  return g == Grammar::GenericScenes ? "generic-scenes" : "robot-scenes";
}

namespace {

using geom::Side;

const std::vector<std::string> kAllColors{"red", "green", "blue", "yellow", "magenta"};
const std::vector<std::string> kRobotColors{"red", "green", "blue", "yellow"};
const std::vector<std::string> kCubeTaskColors{"red", "green", "blue"};

SceneObject make_cube(const std::string& color, std::array<double, 2> pos, int z) {
  SceneObject o;
  o.id = color + "-cube";
  o.kind = SdfShape::Kind::Box;
  o.hx = o.hy = geom::kCubeHalf;
  o.pos = pos;
  o.color_name = color;
  o.rgb = colors::by_name(color);
  o.z_order = z;
  return o;
}

SceneObject make_cup(const std::string& color, std::array<double, 2> pos, int z) {
  SceneObject o;
  o.id = color + "-cup";
  o.kind = SdfShape::Kind::Disc;
  o.radius = geom::kCupRadius;
  o.pos = pos;
  o.color_name = color;
  o.rgb = colors::by_name(color);
  o.z_order = z;
  return o;
}

SceneObject make_dish(std::array<double, 2> pos) {
  SceneObject o;
  o.id = "dish";
  o.kind = SdfShape::Kind::Disc;
  o.radius = geom::kDishRadius;
  o.pos = pos;
  o.color_name = "dish";
  o.rgb = colors::kDish;
  o.z_order = 2;
  return o;
}

Obstacle make_wall(std::array<double, 2> center) {
  Obstacle w;
  w.kind = Obstacle::Kind::WallSegment;
  w.a = {center[0] - geom::kWallHalfLen, center[1]};
  w.b = {center[0] + geom::kWallHalfLen, center[1]};
  w.radius = geom::kWallRadius;
  return w;
}

struct Item {
  Scene scene;
  std::vector<double> q{0.0, 0.0};
  std::optional<int> held;
  std::string caption;
  const char* tmpl = "";
};

std::array<double, 2> sample_clear(Rng& rng,
                                   const std::vector<std::array<double, 2>>& taken,
                                   double min_dist, double lo = geom::kReachLo,
                                   double hi = geom::kReachHi) {
  for (int tries = 0; tries < 200; ++tries) {
    auto p = geom::sample_annulus(rng, lo, hi);
    bool ok = true;
    for (const auto& t : taken) ok &= geom::dist(p, t) >= min_dist;
    if (ok) return p;
  }
  throw std::runtime_error("corpus: placement failed after 200 resamples");
}

const std::string& pick(Rng& rng, const std::vector<std::string>& v) {
  return v[size_t(rng.randint(int64_t(v.size())))];
}

std::vector<double> random_pose(Rng& rng, const RobotModel& m) {
  // rejection-sample within limits until the gripper is inside the border band
  for (int tries = 0; tries < 500; ++tries) {
    std::vector<double> q(size_t(m.dof()));
    for (int j = 0; j < m.dof(); ++j)
      q[size_t(j)] = rng.uniform(m.joint_limits[size_t(j)][0] * 0.95,
                                 m.joint_limits[size_t(j)][1] * 0.95);
    auto g = fk_grip(q, m);
    if (std::fabs(g[0]) <= 1.0 && std::fabs(g[1]) <= 1.0 &&
        std::hypot(g[0], g[1]) >= geom::kReachLo)
      return q;
  }
  throw std::runtime_error("corpus: pose sampling failed");
}

std::array<double, 2> offset_from(Rng& rng, const std::array<double, 2>& base,
                                  double lo, double hi) {
  for (int tries = 0; tries < 200; ++tries) {
    const double d = rng.uniform(lo, hi);
    const double a = rng.uniform(0.0, 2 * 3.14159265358979323846);
    std::array<double, 2> p{base[0] + d * std::cos(a), base[1] + d * std::sin(a)};
    if (std::fabs(p[0]) <= 1.0 && std::fabs(p[1]) <= 1.0) return p;
  }
  throw std::runtime_error("corpus: offset placement failed");
}

std::array<double, 2> sample_side_region(Rng& rng, Side side,
                                         const std::array<double, 2>& wall) {
  const auto br = geom::back_region(wall);
  for (int tries = 0; tries < 500; ++tries) {
    std::array<double, 2> p;
    switch (side) {
      case Side::Left:
        p = {rng.uniform(wall[0] - 0.85, geom::side_boundary(side, wall) - 0.02),
             rng.uniform(wall[1] - 0.35, wall[1] + 0.40)};
        break;
      case Side::Right:
        p = {rng.uniform(geom::side_boundary(side, wall) + 0.02, wall[0] + 0.85),
             rng.uniform(wall[1] - 0.35, wall[1] + 0.40)};
        break;
      case Side::Back:
        p = {rng.uniform(br.x_lo + 0.02, br.x_hi - 0.02),
             rng.uniform(br.y_lo + 0.02, br.y_hi - 0.02)};
        break;
    }
    if (std::fabs(p[0]) <= 1.0 && std::fabs(p[1]) <= 1.0) return p;
  }
  throw std::runtime_error("corpus: region placement failed");
}

Item gen_generic(Rng& rng) {
  Item it;
  it.scene.draw_arm = false;
  const double pickv = rng.uniform();
  if (pickv < 0.20) {  // single cube
    it.tmpl = "T_CUBE";
    const std::string c = pick(rng, kAllColors);
    auto p = geom::sample_annulus(rng);
    it.scene.objects.push_back(make_cube(c, p, 3));
    if (rng.uniform() < 0.5) {
      std::string other = pick(rng, kAllColors);
      while (other == c) other = pick(rng, kAllColors);
      it.scene.objects.push_back(make_cube(other, sample_clear(rng, {p}, 0.18), 3));
    }
    it.caption = "the " + c + " cube";
  } else if (pickv < 0.35) {  // single cup
    it.tmpl = "T_CUP";
    const std::string c = pick(rng, kAllColors);
    it.scene.objects.push_back(make_cup(c, geom::sample_annulus(rng), 3));
    it.caption = "the " + c + " cup";
  } else if (pickv < 0.55) {  // cup on dish
    it.tmpl = "T_ON";
    auto dish = geom::sample_annulus(rng);
    it.scene.objects.push_back(make_dish(dish));
    it.scene.objects.push_back(
        make_cup(pick(rng, kAllColors), offset_from(rng, dish, 0.0, 0.015), 3));
    it.caption = rng.uniform() < 0.5 ? "put the cup on the dish" : "the cup is on the dish";
  } else if (pickv < 0.65) {  // cup far from dish (distractor statement)
    it.tmpl = "T_FAR";
    auto dish = geom::sample_annulus(rng);
    it.scene.objects.push_back(make_dish(dish));
    it.scene.objects.push_back(
        make_cup(pick(rng, kAllColors), sample_clear(rng, {dish}, 0.35), 3));
    it.caption = "the cup is far from the dish";
  } else {  // cube relative to the wall
    it.tmpl = "T_SIDE";
    std::array<double, 2> wall{rng.uniform(-0.1, 0.1), rng.uniform(0.40, 0.55)};
    it.scene.obstacles.push_back(make_wall(wall));
    const Side side = Side(rng.randint(3));
    it.scene.objects.push_back(
        make_cube(pick(rng, kAllColors), sample_side_region(rng, side, wall), 3));
    const std::string s = geom::to_string(side);
    it.caption = rng.uniform() < 0.5 ? "the cube is on the " + s + " side of the wall"
                                     : "move to the " + s + " side of the wall";
  }
  return it;
}

Item gen_robot(Rng& rng, const RobotModel& m) {
  Item it;
  it.scene.draw_arm = true;
  const double pickv = rng.uniform();
  if (pickv < 0.30) {  // gripper parked at the named cube
    it.tmpl = "R_GRASP";
    it.q = random_pose(rng, m);
    const auto grip = fk_grip(it.q, m);
    const size_t target = size_t(rng.randint(3));
    std::vector<std::array<double, 2>> taken{grip};
    for (size_t i = 0; i < kCubeTaskColors.size(); ++i) {
      std::array<double, 2> p;
      if (i == target) {
        p = offset_from(rng, grip, 0.0, 0.03);
      } else {
        p = sample_clear(rng, taken, 0.20);
      }
      taken.push_back(p);
      it.scene.objects.push_back(make_cube(kCubeTaskColors[i], p, 3));
    }
    it.caption = "grasp the " + kCubeTaskColors[target] + " cube";
  } else if (pickv < 0.45) {  // proximity ladder
    it.tmpl = "R_NEAR";
    it.q = random_pose(rng, m);
    const auto grip = fk_grip(it.q, m);
    const std::string c = pick(rng, kCubeTaskColors);
    it.scene.objects.push_back(make_cube(c, offset_from(rng, grip, 0.10, 0.30), 3));
    it.caption = "the gripper is near the " + c + " cube";
  } else if (pickv < 0.65) {  // held cup placed on the dish
    it.tmpl = "R_ON";
    it.q = random_pose(rng, m);
    const auto grip = fk_grip(it.q, m);
    it.scene.objects.push_back(make_dish(offset_from(rng, grip, 0.0, 0.015)));
    it.scene.objects.push_back(make_cup(pick(rng, kRobotColors), grip, 3));
    it.held = 1;
    it.caption = rng.uniform() < 0.5 ? "put the cup on the dish" : "the cup is on the dish";
  } else if (pickv < 0.75) {  // held cup short of the dish
    it.tmpl = "R_NEARD";
    it.q = random_pose(rng, m);
    const auto grip = fk_grip(it.q, m);
    it.scene.objects.push_back(make_dish(offset_from(rng, grip, 0.10, 0.35)));
    it.scene.objects.push_back(make_cup(pick(rng, kRobotColors), grip, 3));
    it.held = 1;
    it.caption = "the cup is near the dish";
  } else if (pickv < 0.95) {  // held cube delivered to a wall-relative region
    it.tmpl = "R_SIDE";
    std::array<double, 2> wc{rng.uniform(-0.05, 0.05), rng.uniform(0.45, 0.55)};
    it.scene.obstacles.push_back(make_wall(wc));
    const Side side = Side(rng.randint(3));
    bool placed = false;
    for (int tries = 0; tries < 500 && !placed; ++tries) {
      it.q = random_pose(rng, m);
      placed = geom::in_region(side, wc, fk_grip(it.q, m));
    }
    if (!placed) throw std::runtime_error("corpus: side pose sampling failed");
    it.scene.objects.push_back(make_cube(pick(rng, kRobotColors), {0, 0}, 3));
    it.held = 0;
    const std::string s = geom::to_string(side);
    it.caption = rng.uniform() < 0.5 ? "move to the " + s + " side of the wall"
                                     : "the cube is on the " + s + " side of the wall";
  } else {  // arm-invariant object description
    it.tmpl = "R_SCENE";
    it.q = random_pose(rng, m);
    const std::string c = pick(rng, kRobotColors);
    it.scene.objects.push_back(make_cube(c, geom::sample_annulus(rng), 3));
    it.caption = "the " + c + " cube";
  }
  return it;
}

}  // namespace

std::vector<CorpusPair> generate_corpus(Grammar g, int n, uint64_t seed) {
  if (n < 1) throw std::invalid_argument("generate_corpus: n must be >= 1");
  const RobotModel arm = RobotModel::arm2();
  const Camera2D cam = Camera2D::workspace(kImageSize, kImageSize);
  std::vector<CorpusPair> out(static_cast<size_t>(n));

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 16)
#endif
  for (int i = 0; i < n; ++i) {
    const uint64_t item_seed = Rng::mix(seed, uint64_t(i));
    Rng rng(item_seed);
    Item it = g == Grammar::GenericScenes ? gen_generic(rng) : gen_robot(rng, arm);

    Tensor q = constant({int64_t(it.q.size())}, it.q);
    SimState state = initial_state(it.scene, q, it.held);
    if (it.held) {
      FkChain fk = fk_chain(q, arm);
      state.objects[size_t(*it.held)] = held_pose_from(fk, arm);
    }
    Tensor img = render_state(state, it.scene, arm, cam);
    CorpusPair& cp = out[size_t(i)];
    cp.image = quantize_image(img);
    cp.caption = it.caption;
    cp.template_id = it.tmpl;
    cp.item_seed = item_seed;
  }
  return out;
}

void save_corpus(const std::vector<CorpusPair>& corpus, const std::string& dir) {
  ensure_dir(dir);
  ensure_dir(dir + "/img");
  std::string manifest;
  for (size_t i = 0; i < corpus.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "img/%06zu.png", i);
    Tensor img = image_from_bytes(corpus[i].image, kImageSize, kImageSize);
    export_png(img, dir + "/" + name);
    nlohmann::ordered_json rec;
    rec["image_path"] = name;
    rec["caption"] = corpus[i].caption;
    rec["template_id"] = corpus[i].template_id;
    rec["seed"] = corpus[i].item_seed;
    manifest += rec.dump();
    manifest += "\n";
  }
  spit(dir + "/manifest.jsonl", manifest);
}

std::vector<CorpusPair> load_corpus(const std::string& dir) {
  std::istringstream is(slurp(dir + "/manifest.jsonl"));
  std::vector<CorpusPair> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto rec = nlohmann::json::parse(line);
    CorpusPair cp;
    cp.caption = rec.at("caption").get<std::string>();
    cp.template_id = rec.at("template_id").get<std::string>();
    cp.item_seed = rec.at("seed").get<uint64_t>();
    Tensor img = import_png(dir + "/" + rec.at("image_path").get<std::string>());
    cp.image = quantize_image(img);
    out.push_back(std::move(cp));
  }
  if (out.empty()) throw std::runtime_error("load_corpus: empty corpus at '" + dir + "'");
  return out;
}

Tensor image_batch(const std::vector<CorpusPair>& corpus,
                   const std::vector<size_t>& idx) {
  const int64_t px = int64_t(kImageSize) * kImageSize * 3;
  std::vector<double> v(idx.size() * size_t(px));
  for (size_t b = 0; b < idx.size(); ++b) {
    const auto& img = corpus[idx[b]].image;
    for (int64_t i = 0; i < px; ++i)
      v[b * size_t(px) + size_t(i)] = double(img[size_t(i)]) / 255.0;
  }
  return constant({int64_t(idx.size()), px}, std::move(v));
}

}  // namespace gradgen::vlm
