#include <cmath>

#include "gradgen/rng.hpp"
#include "gradgen/vlm.hpp"

namespace gradgen::vlm {

namespace {

Tensor gaussian(Rng& rng, Shape shape, double std_dev) {
  std::vector<double> v(size_t(numel(shape)));
  for (double& x : v) x = std_dev * rng.normal();
  return constant(std::move(shape), std::move(v));
}

// flat gather indices mapping (B, 64, 64, 3) images to (B*patches, patch dim)
std::vector<int64_t> patch_indices(int64_t batch) {
  const int side = kImageSize / kPatch;
  std::vector<int64_t> idx;
  idx.reserve(size_t(batch) * kNumPatches * kPatchDim);
  for (int64_t b = 0; b < batch; ++b) {
    const int64_t base = b * kImageSize * kImageSize * 3;
    for (int pr = 0; pr < side; ++pr)
      for (int pc = 0; pc < side; ++pc)
        for (int y = 0; y < kPatch; ++y)
          for (int x = 0; x < kPatch; ++x)
            for (int c = 0; c < 3; ++c)
              idx.push_back(base + ((int64_t(pr * kPatch + y) * kImageSize) +
                                    (pc * kPatch + x)) * 3 + c);
  }
  return idx;
}

Tensor mlp_head(const Tensor& x, const ParamViews& pv, const std::string& prefix) {
  const int64_t rows = x.shape[0];
  Tensor h = matmul(x, pv.at(prefix + ".w1"));
  h = add(h, broadcast_to(reshape(pv.at(prefix + ".b1"), {1, kHidden}), {rows, kHidden}));
  h = tanh_(h);
  Tensor z = matmul(h, pv.at(prefix + ".w2"));
  z = add(z, broadcast_to(reshape(pv.at(prefix + ".b2"), {1, kEmbedDim}), {rows, kEmbedDim}));
  return l2_normalize(z);
}

}  // namespace

const std::vector<std::string>& EncoderParams::tensor_names() {
  static const std::vector<std::string> names{
      "text.embed", "text.w1", "text.b1", "text.w2", "text.b2",
      "img.proj",   "img.bproj", "img.pos", "img.w1", "img.b1",
      "img.w2",     "img.b2",  "logit_scale"};
  return names;
}

EncoderParams EncoderParams::init(uint64_t seed) {
  Rng rng(seed);
  const int V = Vocabulary::instance().size();
  EncoderParams p;
  p.t["text.embed"] = gaussian(rng, {V, kWordDim}, 0.1);
  p.t["text.w1"] = gaussian(rng, {kWordDim, kHidden}, 1.0 / std::sqrt(double(kWordDim)));
  p.t["text.b1"] = zeros({kHidden});
  p.t["text.w2"] = gaussian(rng, {kHidden, kEmbedDim}, 1.0 / std::sqrt(double(kHidden)));
  p.t["text.b2"] = zeros({kEmbedDim});
  p.t["img.proj"] = gaussian(rng, {kPatchDim, kWordDim}, 1.0 / std::sqrt(double(kPatchDim)));
  p.t["img.bproj"] = zeros({kWordDim});
  p.t["img.pos"] = gaussian(rng, {kNumPatches, kWordDim}, 0.02);
  p.t["img.w1"] = gaussian(rng, {kWordDim, kHidden}, 1.0 / std::sqrt(double(kWordDim)));
  p.t["img.b1"] = zeros({kHidden});
  p.t["img.w2"] = gaussian(rng, {kHidden, kEmbedDim}, 1.0 / std::sqrt(double(kHidden)));
  p.t["img.b2"] = zeros({kEmbedDim});
  p.t["logit_scale"] = constant({}, {std::log(14.0)});
  return p;
}

bool EncoderParams::finetuned() const {
  auto it = meta.find("finetuned");
  return it != meta.end() && it->second != 0.0;
}

ParamViews leaves_on(Tape& tape, const EncoderParams& p) {
  ParamViews pv;
  for (const auto& [name, t] : p.t) pv[name] = tape.leaf_shared(t.shape, t.data);
  return pv;
}

ParamViews constant_views(const EncoderParams& p) {
  ParamViews pv;
  for (const auto& [name, t] : p.t) pv[name] = t;
  return pv;
}

Tensor encode_text_batch(const std::vector<std::vector<int64_t>>& captions,
                         const ParamViews& pv) {
  const int64_t B = int64_t(captions.size());
  if (B < 1) throw std::invalid_argument("encode_text: empty batch");
  const Tensor& table = pv.at("text.embed");

  std::vector<int64_t> flat;
  flat.reserve(size_t(B) * kMaxCaption * kWordDim);
  std::vector<double> mask(size_t(B) * kMaxCaption, 0.0);
  std::vector<double> counts(size_t(B), 0.0);
  for (int64_t b = 0; b < B; ++b) {
    const auto& ids = captions[size_t(b)];
    if (int(ids.size()) != kMaxCaption)
      throw std::invalid_argument("encode_text: captions must be padded to " +
                                  std::to_string(kMaxCaption));
    for (int t = 0; t < kMaxCaption; ++t) {
      for (int d = 0; d < kWordDim; ++d) flat.push_back(ids[size_t(t)] * kWordDim + d);
      if (ids[size_t(t)] != Vocabulary::kPad) {
        mask[size_t(b * kMaxCaption + t)] = 1.0;
        counts[size_t(b)] += 1.0;
      }
    }
    if (counts[size_t(b)] == 0.0) throw std::invalid_argument("encode_text: empty caption");
  }

  Tensor emb = gather(table, flat, {B, kMaxCaption, kWordDim});
  Tensor m = broadcast_to(constant({B, kMaxCaption, 1}, std::move(mask)),
                          {B, kMaxCaption, kWordDim});
  Tensor pooled = sum(mul(emb, m), 1);  // (B, kWordDim)
  Tensor inv = constant({B, 1}, [&] {
    std::vector<double> v(static_cast<size_t>(B), 0.0);
    for (int64_t b = 0; b < B; ++b) v[size_t(b)] = 1.0 / counts[size_t(b)];
    return v;
  }());
  pooled = mul(pooled, broadcast_to(inv, {B, kWordDim}));
  return mlp_head(pooled, pv, "text");
}

Tensor encode_image_batch(const Tensor& images, const ParamViews& pv) {
  const int64_t px = int64_t(kImageSize) * kImageSize * 3;
  if (images.shape.size() != 2 || images.shape[1] != px)
    throw std::invalid_argument("encode_image: batch must be (B," + std::to_string(px) +
                                "), got " + shape_str(images.shape));
  const int64_t B = images.shape[0];
  Tensor patches = gather(images, patch_indices(B),
                          {B * kNumPatches, kPatchDim});
  // center on the white background so empty patches carry no signal
  patches = add_const(patches, -1.0);
  Tensor proj = matmul(patches, pv.at("img.proj"));
  proj = add(proj, broadcast_to(reshape(pv.at("img.bproj"), {1, kWordDim}),
                                {B * kNumPatches, kWordDim}));
  proj = reshape(proj, {B, kNumPatches, kWordDim});
  proj = add(proj, broadcast_to(reshape(pv.at("img.pos"), {1, kNumPatches, kWordDim}),
                                {B, kNumPatches, kWordDim}));
  Tensor pooled = mean(proj, 1);  // (B, kWordDim)
  return mlp_head(pooled, pv, "img");
}

Tensor encode_text(const std::string& caption, const EncoderParams& p) {
  auto ids = Vocabulary::instance().encode_padded(caption);
  Tensor z = encode_text_batch({ids}, constant_views(p));
  return reshape(z, {kEmbedDim});
}

Tensor encode_image(const Tensor& image, const ParamViews& pv) {
  if (image.shape.size() != 3 || image.shape[0] != kImageSize ||
      image.shape[1] != kImageSize || image.shape[2] != 3)
    throw std::invalid_argument("encode_image: expected (" +
                                std::to_string(kImageSize) + "," +
                                std::to_string(kImageSize) + ",3), got " +
                                shape_str(image.shape));
  Tensor z = encode_image_batch(reshape(image, {1, image.size()}), pv);
  return reshape(z, {kEmbedDim});
}

Tensor encode_image(const Tensor& image, const EncoderParams& p) {
  return encode_image(image, constant_views(p));
}

double cosine(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine: size mismatch");
  double num = 0, na = 0, nb = 0;
  for (int64_t i = 0; i < a.size(); ++i) {
    num += a.at(i) * b.at(i);
    na += a.at(i) * a.at(i);
    nb += b.at(i) * b.at(i);
  }
  return num / std::sqrt(na * nb + 1e-300);
}

Tensor info_nce_loss(const Tensor& z_img, const Tensor& z_txt,
                     const Tensor& logit_scale) {
  if (z_img.shape.size() != 2 || z_txt.shape != z_img.shape)
    throw std::invalid_argument("info_nce: embeddings must be matching (B,D)");
  const int64_t B = z_img.shape[0];
  if (B < 2) throw std::invalid_argument("info_nce: batch must be >= 2");
  for (int64_t r = 0; r < B; ++r) {
    double s1 = 0, s2 = 0;
    for (int64_t c = 0; c < z_img.shape[1]; ++c) {
      s1 += z_img.at(r, c) * z_img.at(r, c);
      s2 += z_txt.at(r, c) * z_txt.at(r, c);
    }
    if (std::fabs(std::sqrt(s1) - 1.0) > 1e-6 || std::fabs(std::sqrt(s2) - 1.0) > 1e-6)
      throw std::invalid_argument("info_nce: embeddings must be unit norm");
  }

  Tensor logits = mul(matmul(z_img, z_txt, true),
                      broadcast_to(exp_(reshape(logit_scale, {1, 1})), {B, B}));

  std::vector<int64_t> diag_idx(size_t(B), 0);
  for (int64_t i = 0; i < B; ++i) diag_idx[size_t(i)] = i * B + i;
  Tensor diag = gather(logits, diag_idx, {B});

  // stable logsumexp with a detached shift (exact gradients either way)
  auto lse = [&](int axis) {
    std::vector<double> mx(size_t(B), -1e300);
    for (int64_t r = 0; r < B; ++r)
      for (int64_t c = 0; c < B; ++c) {
        const double v = logits.at(r, c);
        const int64_t k = axis == 1 ? r : c;
        mx[size_t(k)] = std::max(mx[size_t(k)], v);
      }
    Tensor m = constant({B}, mx);
    Shape mshape = axis == 1 ? Shape{B, 1} : Shape{1, B};
    Tensor shifted = sub(logits, broadcast_to(reshape(m, mshape), {B, B}));
    return add(log_(sum(exp_(shifted), axis)), m);
  };

  Tensor loss_rows = mean(sub(lse(1), diag));
  Tensor loss_cols = mean(sub(lse(0), diag));
  return scale(add(loss_rows, loss_cols), 0.5);
}

void AdamW::step(std::map<std::string, Tensor>& params,
                 const std::map<std::string, Tensor>& grads,
                 const std::set<std::string>& frozen) {
  ++step_count;
  const double bc1 = 1.0 - std::pow(beta1, double(step_count));
  const double bc2 = 1.0 - std::pow(beta2, double(step_count));
  for (auto& [name, t] : params) {
    if (frozen.count(name)) continue;
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const Tensor& g = git->second;
    auto& mv = m[name];
    auto& vv = v[name];
    mv.resize(size_t(t.size()), 0.0);
    vv.resize(size_t(t.size()), 0.0);
    double* w = t.data->data();
    for (int64_t i = 0; i < t.size(); ++i) {
      const double gi = g.at(i);
      mv[size_t(i)] = beta1 * mv[size_t(i)] + (1 - beta1) * gi;
      vv[size_t(i)] = beta2 * vv[size_t(i)] + (1 - beta2) * gi * gi;
      const double mhat = mv[size_t(i)] / bc1;
      const double vhat = vv[size_t(i)] / bc2;
      w[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * w[i]);
    }
  }
}

}  // namespace gradgen::vlm
