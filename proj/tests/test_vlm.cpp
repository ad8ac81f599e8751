#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>

#include "gradgen/rng.hpp"
#include "gradgen/util.hpp"
#include "gradgen/render.hpp"
#include "gradgen/vlm.hpp"

using namespace gradgen;
using namespace gradgen::vlm;

namespace {

double fd_coord(const std::function<double(const Tensor&)>& f, const Tensor& x,
                int64_t i, double h) {
  auto plus = std::make_shared<std::vector<double>>(*x.data);
  auto minus = std::make_shared<std::vector<double>>(*x.data);
  (*plus)[size_t(i)] += h;
  (*minus)[size_t(i)] -= h;
  return (f(Tensor(x.shape, plus)) - f(Tensor(x.shape, minus))) / (2 * h);
}

Tensor random_unit(Rng& rng, int64_t d) {
  std::vector<double> v(static_cast<size_t>(d), 0.0);
  for (double& x : v) x = rng.normal();
  double n = 0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return constant({d}, std::move(v));
}

}  // namespace

TEST_CASE("vocabulary covers the grammar and flags unknowns") {
  const Vocabulary& v = Vocabulary::instance();
  CHECK(v.all_known("grasp the red cube"));
  CHECK(v.all_known("Move to the LEFT side of the wall"));
  CHECK(v.all_known("put the cup on the dish"));
  CHECK(!v.all_known("fling the widget"));
  CHECK(v.encode_padded("grasp the red cube").size() == kMaxCaption);
  CHECK_THROWS_AS(v.encode_padded("   "), std::invalid_argument);
}

TEST_CASE("text embeddings are unit norm and deterministic") {
  EncoderParams p = EncoderParams::init(7);
  Tensor z1 = encode_text("grasp the red cube", p);
  Tensor z2 = encode_text("grasp the red cube", p);
  double n = 0;
  for (int64_t i = 0; i < z1.size(); ++i) n += z1.at(i) * z1.at(i);
  CHECK(std::fabs(std::sqrt(n) - 1.0) < 1e-9);
  CHECK(std::memcmp(z1.data->data(), z2.data->data(), size_t(z1.size()) * 8) == 0);

  Tensor zb = encode_text("grasp the blue cube", p);
  CHECK(cosine(z1, zb) < 0.999);
}

TEST_CASE("image embeddings are unit norm; pixel gradients check out") {
  EncoderParams p = EncoderParams::init(9);
  Rng rng(5);
  const int64_t px = int64_t(kImageSize) * kImageSize * 3;
  std::vector<double> img(static_cast<size_t>(px), 0.0);
  for (double& v : img) v = rng.uniform(0, 1);

  Tensor z = encode_image(constant({kImageSize, kImageSize, 3}, img), p);
  double n = 0;
  for (int64_t i = 0; i < z.size(); ++i) n += z.at(i) * z.at(i);
  CHECK(std::fabs(std::sqrt(n) - 1.0) < 1e-9);

  Tensor dir = random_unit(rng, kEmbedDim);
  auto project = [&](const Tensor& flat) {
    Tensor zz = encode_image_batch(flat, constant_views(p));
    double s = 0;
    for (int d = 0; d < kEmbedDim; ++d) s += zz.at(0, d) * dir.at(d);
    return s;
  };

  Tape tape;
  Tensor leaf = tape.leaf({1, px}, img);
  Tensor zt = encode_image_batch(leaf, leaves_on(tape, p));
  Tensor root = sum(mul(reshape(zt, {kEmbedDim}), dir));
  Tensor ad = tape.backward(root).at(leaf);

  for (int k = 0; k < 5; ++k) {
    const int64_t i = rng.randint(px);
    const double fd = fd_coord(project, constant({1, px}, img), i, 1e-5);
    const double got = ad.at(i);
    const double denom = std::max({1.0, std::fabs(fd), std::fabs(got)});
    CHECK(std::fabs(got - fd) / denom < 1e-4);
  }
}

TEST_CASE("far-pixel perturbations barely move the embedding") {
  EncoderParams p = EncoderParams::init(11);
  Rng rng(6);
  const int64_t px = int64_t(kImageSize) * kImageSize * 3;
  std::vector<double> img(size_t(px), 1.0);
  std::vector<double> img2 = img;
  for (int k = 0; k < 500; ++k) {
    const int64_t i = rng.randint(px);
    img2[size_t(i)] = std::min(1.0, img2[size_t(i)] + rng.uniform(0, 9e-7));
  }
  Tensor z1 = encode_image(constant({kImageSize, kImageSize, 3}, img), p);
  Tensor z2 = encode_image(constant({kImageSize, kImageSize, 3}, img2), p);
  CHECK(cosine(z1, z2) > 1.0 - 1e-4);
}

TEST_CASE("info_nce behaves at the separable limit and at chance") {
  // B=2 perfectly matched orthogonal pairs, large scale -> loss ~ 0
  Tensor zi = constant({2, 2}, {1, 0, 0, 1});
  Tensor zt = constant({2, 2}, {1, 0, 0, 1});
  Tensor big_scale = constant({}, {std::log(200.0)});
  CHECK(info_nce_loss(zi, zt, big_scale).scalar() < 1e-6);

  // random unit embeddings, scale 1, B=64 -> about ln 64
  Rng rng(8);
  std::vector<double> a, b;
  for (int i = 0; i < 64; ++i) {
    Tensor u = random_unit(rng, kEmbedDim);
    Tensor v = random_unit(rng, kEmbedDim);
    a.insert(a.end(), u.data->begin(), u.data->end());
    b.insert(b.end(), v.data->begin(), v.data->end());
  }
  Tensor za = constant({64, kEmbedDim}, a);
  Tensor zb = constant({64, kEmbedDim}, b);
  Tensor unit_scale = constant({}, {0.0});
  const double loss = info_nce_loss(za, zb, unit_scale).scalar();
  CHECK(std::fabs(loss - std::log(64.0)) < 0.3);

  // permutation invariance
  std::vector<double> pa, pb;
  std::vector<int> perm(64);
  for (int i = 0; i < 64; ++i) perm[size_t(i)] = (i * 7 + 3) % 64;
  for (int i : perm) {
    pa.insert(pa.end(), a.begin() + i * kEmbedDim, a.begin() + (i + 1) * kEmbedDim);
    pb.insert(pb.end(), b.begin() + i * kEmbedDim, b.begin() + (i + 1) * kEmbedDim);
  }
  const double ploss = info_nce_loss(constant({64, kEmbedDim}, pa),
                                     constant({64, kEmbedDim}, pb), unit_scale)
                           .scalar();
  CHECK(std::fabs(loss - ploss) < 1e-9);

  CHECK_THROWS_AS(info_nce_loss(constant({1, 2}, {1, 0}), constant({1, 2}, {1, 0}),
                                unit_scale),
                  std::invalid_argument);
}

TEST_CASE("corpus generation is deterministic and color-balanced") {
  auto c1 = generate_corpus(Grammar::GenericScenes, 64, 123);
  auto c2 = generate_corpus(Grammar::GenericScenes, 64, 123);
  REQUIRE(c1.size() == c2.size());
  for (size_t i = 0; i < c1.size(); ++i) {
    CHECK(c1[i].caption == c2[i].caption);
    CHECK(c1[i].image == c2[i].image);
  }

  auto big = generate_corpus(Grammar::GenericScenes, 10000, 77);
  std::map<std::string, int> counts;
  int total = 0;
  for (const auto& cp : big) {
    for (const std::string& c : gradgen::colors::palette()) {
      if (cp.caption.find(c) != std::string::npos) {
        counts[c]++;
        total++;
      }
    }
  }
  REQUIRE(total > 3000);
  for (const std::string& c : gradgen::colors::palette()) {
    const double share = double(counts[c]) / total;
    CHECK(share > 0.2 - 0.03);
    CHECK(share < 0.2 + 0.03);
  }
}

namespace {

// The arm and gripper are the only gray scene colors; everything else has
// visibly unequal channels wherever its coverage is non-trivial.
bool is_arm_pixel(uint8_t r, uint8_t g, uint8_t b) {
  return std::abs(int(r) - int(g)) <= 1 && std::abs(int(g) - int(b)) <= 1 && r <= 240;
}

}  // namespace

TEST_CASE("generic corpus renders no arm pixels") {
  auto corpus = generate_corpus(Grammar::GenericScenes, 300, 42);
  for (const auto& cp : corpus) {
    for (size_t i = 0; i < cp.image.size(); i += 3)
      REQUIRE(!is_arm_pixel(cp.image[i], cp.image[i + 1], cp.image[i + 2]));
  }
}

TEST_CASE("robot corpus does render the arm") {
  auto corpus = generate_corpus(Grammar::RobotScenes, 20, 42);
  int with_arm = 0;
  for (const auto& cp : corpus) {
    bool arm = false;
    for (size_t i = 0; i < cp.image.size(); i += 3)
      arm |= is_arm_pixel(cp.image[i], cp.image[i + 1], cp.image[i + 2]);
    with_arm += arm;
  }
  CHECK(with_arm == 20);
}

TEST_CASE("corpus save/load round trip") {
  const std::string dir = "/tmp/gradgen_test_corpus";
  std::filesystem::remove_all(dir);
  auto corpus = generate_corpus(Grammar::GenericScenes, 12, 5);
  save_corpus(corpus, dir);
  auto loaded = load_corpus(dir);
  REQUIRE(loaded.size() == corpus.size());
  for (size_t i = 0; i < corpus.size(); ++i) {
    CHECK(loaded[i].caption == corpus[i].caption);
    CHECK(loaded[i].template_id == corpus[i].template_id);
    CHECK(loaded[i].image == corpus[i].image);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("stratified split puts a tenth of each template aside") {
  auto corpus = generate_corpus(Grammar::GenericScenes, 400, 9);
  std::vector<size_t> tr, va;
  split_corpus(corpus, tr, va);
  CHECK(tr.size() + va.size() == corpus.size());
  CHECK(double(va.size()) / double(corpus.size()) == doctest::Approx(0.1).epsilon(0.05));
}

TEST_CASE("training learns and freeze_text keeps text parameters bitwise") {
  auto corpus = generate_corpus(Grammar::GenericScenes, 320, 31);
  EncoderParams p = EncoderParams::init(3);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.lr = 1e-3;
  cfg.batch = 32;
  TrainResult r = train(p, corpus, cfg);
  REQUIRE(r.train_loss.size() == 3);
  CHECK(r.train_loss.back() < r.train_loss.front());

  // freeze contract, bit for bit
  EncoderParams q = EncoderParams::init(3);
  std::map<std::string, std::vector<double>> before;
  for (const auto& [name, t] : q.t)
    if (name.rfind("text.", 0) == 0) before[name] = *t.data;
  TrainConfig fcfg;
  fcfg.epochs = 1;
  fcfg.lr = 1e-3;
  fcfg.batch = 32;
  fcfg.freeze_text = true;
  fcfg.mark_finetuned = true;
  train(q, corpus, fcfg);
  for (const auto& [name, data] : before) {
    const auto& now = *q.t.at(name).data;
    REQUIRE(now.size() == data.size());
    CHECK(std::memcmp(now.data(), data.data(), data.size() * 8) == 0);
  }
  CHECK(q.finetuned());
  CHECK(!EncoderParams::init(3).finetuned());

  CHECK_THROWS_AS(train(p, {}, cfg), std::invalid_argument);
}

TEST_CASE("checkpoints round-trip bit-exactly and reject corruption") {
  EncoderParams p = EncoderParams::init(7);
  p.meta["finetuned"] = 1.0;
  p.meta["ceiling.abc"] = 0.875;
  const std::string path = "/tmp/gradgen_test_ckpt.dgwt";
  save_checkpoint(p, path);
  EncoderParams q = load_checkpoint(path);
  REQUIRE(q.t.size() == p.t.size());
  for (const auto& [name, t] : p.t) {
    const Tensor& u = q.t.at(name);
    REQUIRE(u.shape == t.shape);
    CHECK(std::memcmp(u.data->data(), t.data->data(), size_t(t.size()) * 8) == 0);
  }
  CHECK(q.meta.at("finetuned") == 1.0);
  CHECK(q.meta.at("ceiling.abc") == 0.875);

  // truncation must fail loudly, with nothing returned
  std::string full = slurp(path);
  spit(path, full.substr(0, full.size() / 2));
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
  spit(path, std::string("XXXX") + full.substr(4));
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
  std::remove(path.c_str());

  // fresh init at a fixed seed is reproducible end to end
  EncoderParams a = EncoderParams::init(7);
  EncoderParams b = EncoderParams::init(7);
  Tensor za = encode_text("put the cup on the dish", a);
  Tensor zb = encode_text("put the cup on the dish", b);
  CHECK(std::memcmp(za.data->data(), zb.data->data(), size_t(za.size()) * 8) == 0);
}

TEST_CASE("caption ceilings are recorded per caption") {
  auto corpus = generate_corpus(Grammar::GenericScenes, 100, 13);
  EncoderParams p = EncoderParams::init(3);
  compute_caption_ceilings(p, corpus);
  const auto ceiling = caption_ceiling(p, corpus[0].caption);
  REQUIRE(ceiling.has_value());
  CHECK(*ceiling <= 1.0);
  CHECK(*ceiling >= -1.0);
  CHECK(!caption_ceiling(p, "no such caption ever").has_value());
}
