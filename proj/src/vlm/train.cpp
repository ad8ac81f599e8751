#include <algorithm>
#include <cmath>

#include "gradgen/rng.hpp"
#include "gradgen/util.hpp"
#include "gradgen/vlm.hpp"

namespace gradgen::vlm {

namespace {

constexpr double kMaxLogitScale = 4.6051701859880914;  // ln 100

std::set<std::string> text_side_names() {
  std::set<std::string> s;
  for (const std::string& n : EncoderParams::tensor_names())
    if (n.rfind("text.", 0) == 0) s.insert(n);
  return s;
}

std::vector<std::vector<int64_t>> caption_batch(const std::vector<CorpusPair>& corpus,
                                                const std::vector<size_t>& idx) {
  const Vocabulary& vocab = Vocabulary::instance();
  std::vector<std::vector<int64_t>> out;
  out.reserve(idx.size());
  for (size_t i : idx) out.push_back(vocab.encode_padded(corpus[i].caption));
  return out;
}

double batch_loss_eval(const EncoderParams& params,
                       const std::vector<CorpusPair>& corpus,
                       const std::vector<size_t>& idx) {
  ParamViews pv = constant_views(params);
  Tensor zi = encode_image_batch(image_batch(corpus, idx), pv);
  Tensor zt = encode_text_batch(caption_batch(corpus, idx), pv);
  return info_nce_loss(zi, zt, pv.at("logit_scale")).scalar();
}

}  // namespace

void split_corpus(const std::vector<CorpusPair>& corpus, std::vector<size_t>& train,
                  std::vector<size_t>& val) {
  std::map<std::string, std::vector<size_t>> buckets;
  for (size_t i = 0; i < corpus.size(); ++i)
    buckets[corpus[i].template_id].push_back(i);
  train.clear();
  val.clear();
  for (auto& [tmpl, idx] : buckets) {
    for (size_t k = 0; k < idx.size(); ++k)
      (k % 10 == 9 ? val : train).push_back(idx[k]);
  }
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
}

TrainResult train(EncoderParams& params, const std::vector<CorpusPair>& corpus,
                  const TrainConfig& cfg) {
  if (corpus.empty()) throw std::invalid_argument("train: empty corpus");
  if (cfg.batch < 2) throw std::invalid_argument("train: batch must be >= 2");

  std::vector<size_t> train_idx, val_idx;
  split_corpus(corpus, train_idx, val_idx);

  AdamW opt;
  opt.lr = cfg.lr;
  opt.weight_decay = cfg.weight_decay;
  const std::set<std::string> frozen = cfg.freeze_text ? text_side_names()
                                                       : std::set<std::string>{};
  Rng rng(cfg.seed);
  TrainResult res;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<size_t> order = train_idx;
    rng.shuffle(order);

    double loss_sum = 0;
    int batches = 0;
    for (size_t lo = 0; lo + 2 <= order.size(); lo += size_t(cfg.batch)) {
      const size_t hi = std::min(order.size(), lo + size_t(cfg.batch));
      if (hi - lo < 2) break;
      std::vector<size_t> bidx(order.begin() + int64_t(lo), order.begin() + int64_t(hi));

      Tape tape;
      ParamViews pv = leaves_on(tape, params);
      Tensor zi = encode_image_batch(image_batch(corpus, bidx), pv);
      Tensor zt = encode_text_batch(caption_batch(corpus, bidx), pv);
      Tensor loss = info_nce_loss(zi, zt, pv.at("logit_scale"));
      if (!std::isfinite(loss.scalar()))
        throw std::runtime_error("train: non-finite loss at epoch " +
                                 std::to_string(epoch));
      Gradients g = tape.backward(loss);
      std::map<std::string, Tensor> grads;
      for (auto& [name, leaf] : pv)
        if (!frozen.count(name)) grads[name] = g.at(leaf);
      opt.step(params.t, grads, frozen);

      double& ls = (*params.t.at("logit_scale").data)[0];
      ls = std::min(ls, kMaxLogitScale);

      loss_sum += loss.scalar();
      ++batches;
    }
    res.train_loss.push_back(batches ? loss_sum / batches : 0.0);

    double vloss = 0;
    int vbatches = 0;
    for (size_t lo = 0; lo + 2 <= val_idx.size(); lo += size_t(cfg.batch)) {
      const size_t hi = std::min(val_idx.size(), lo + size_t(cfg.batch));
      if (hi - lo < 2) break;
      std::vector<size_t> bidx(val_idx.begin() + int64_t(lo), val_idx.begin() + int64_t(hi));
      vloss += batch_loss_eval(params, corpus, bidx);
      ++vbatches;
    }
    res.val_loss.push_back(vbatches ? vloss / vbatches : 0.0);
  }

  res.val_retrieval_top1 = retrieval_top1(params, corpus, val_idx);
  if (cfg.mark_finetuned) params.meta["finetuned"] = 1.0;
  compute_caption_ceilings(params, corpus);
  return res;
}

double retrieval_top1(const EncoderParams& params, const std::vector<CorpusPair>& pairs,
                      const std::vector<size_t>& idx, int batch, uint64_t seed) {
  if (idx.size() < size_t(batch)) throw std::invalid_argument("retrieval: too few pairs");
  std::vector<size_t> order = idx;
  Rng rng(seed);
  rng.shuffle(order);

  ParamViews pv = constant_views(params);
  int hits = 0, total = 0;
  for (size_t lo = 0; lo + size_t(batch) <= order.size(); lo += size_t(batch)) {
    std::vector<size_t> bidx(order.begin() + int64_t(lo),
                             order.begin() + int64_t(lo + size_t(batch)));
    Tensor zi = encode_image_batch(image_batch(pairs, bidx), pv);
    Tensor zt = encode_text_batch(caption_batch(pairs, bidx), pv);
    for (int i = 0; i < batch; ++i) {
      double best = -2;
      int arg = -1;
      for (int j = 0; j < batch; ++j) {
        double s = 0;
        for (int d = 0; d < kEmbedDim; ++d) s += zi.at(i, d) * zt.at(j, d);
        if (s > best) {
          best = s;
          arg = j;
        }
      }
      hits += pairs[bidx[size_t(arg)]].caption == pairs[bidx[size_t(i)]].caption;
      ++total;
    }
  }
  return total ? double(hits) / total : 0.0;
}

void compute_caption_ceilings(EncoderParams& params,
                              const std::vector<CorpusPair>& corpus) {
  ParamViews pv = constant_views(params);
  std::map<std::string, double> best;
  const size_t chunk = 256;
  std::map<std::string, Tensor> caption_z;
  for (const CorpusPair& cp : corpus)
    if (!caption_z.count(cp.caption)) caption_z[cp.caption] = encode_text(cp.caption, params);

  for (size_t lo = 0; lo < corpus.size(); lo += chunk) {
    std::vector<size_t> idx;
    for (size_t i = lo; i < std::min(corpus.size(), lo + chunk); ++i) idx.push_back(i);
    Tensor zi = encode_image_batch(image_batch(corpus, idx), pv);
    for (size_t b = 0; b < idx.size(); ++b) {
      const std::string& cap = corpus[idx[b]].caption;
      const Tensor& zt = caption_z.at(cap);
      double s = 0;
      for (int d = 0; d < kEmbedDim; ++d) s += zi.at(int64_t(b), d) * zt.at(d);
      auto it = best.find(cap);
      if (it == best.end() || s > it->second) best[cap] = s;
    }
  }
  for (const auto& [cap, ceil] : best)
    params.meta["ceiling." + hex64(fnv1a64(cap))] = ceil;
}

std::optional<double> caption_ceiling(const EncoderParams& params,
                                      const std::string& caption) {
  auto it = params.meta.find("ceiling." + hex64(fnv1a64(caption)));
  if (it == params.meta.end()) return std::nullopt;
  return it->second;
}

}  // namespace gradgen::vlm
