#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "gradgen/tensor.hpp"

namespace gradgen::vlm {

constexpr int kEmbedDim = 64;   // D, shared embedding width
constexpr int kWordDim = 64;
constexpr int kHidden = 128;
constexpr int kPatch = 8;
constexpr int kImageSize = 64;
constexpr int kMaxCaption = 16;
constexpr int kNumPatches = (kImageSize / kPatch) * (kImageSize / kPatch);
constexpr int kPatchDim = kPatch * kPatch * 3;

// Closed caption grammar; lowercase whitespace tokens, built once and frozen.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;

  static const Vocabulary& instance();

  int id(const std::string& token) const;  // kUnk when missing
  std::vector<int64_t> tokenize(const std::string& caption) const;
  // ids padded/truncated to kMaxCaption; throws on empty captions
  std::vector<int64_t> encode_padded(const std::string& caption) const;
  bool all_known(const std::string& caption) const;
  int size() const { return int(words_.size()); }
  const std::string& word(int id) const { return words_[size_t(id)]; }

 private:
  Vocabulary();
  std::map<std::string, int> ids_;
  std::vector<std::string> words_;
};

// --- encoder -----------------------------------------------------------------

struct EncoderParams {
  // name -> constant tensor; buffers are shared with the optimizer
  std::map<std::string, Tensor> t;
  std::map<std::string, double> meta;  // finetuned flag, per-caption ceilings

  static EncoderParams init(uint64_t seed);
  bool finetuned() const;
  static const std::vector<std::string>& tensor_names();
};

// Tensor views of params, as tape leaves when training.
using ParamViews = std::map<std::string, Tensor>;
ParamViews leaves_on(Tape& tape, const EncoderParams& p);
ParamViews constant_views(const EncoderParams& p);

// captions: (B, kMaxCaption) padded ids. Returns (B, D), unit rows.
Tensor encode_text_batch(const std::vector<std::vector<int64_t>>& captions,
                         const ParamViews& pv);
// images: (B, kImageSize*kImageSize*3) in [0,1]. Returns (B, D), unit rows.
Tensor encode_image_batch(const Tensor& images, const ParamViews& pv);

Tensor encode_text(const std::string& caption, const EncoderParams& p);  // (D)
Tensor encode_image(const Tensor& image /*(H,W,3)*/, const ParamViews& pv);  // (D)
Tensor encode_image(const Tensor& image, const EncoderParams& p);

double cosine(const Tensor& a, const Tensor& b);

// Symmetric InfoNCE over the B x B similarity matrix, scaled by
// exp(logit_scale). Rejects batches smaller than 2.
Tensor info_nce_loss(const Tensor& z_img, const Tensor& z_txt,
                     const Tensor& logit_scale);

// --- corpus --------------------------------------------------------------------

enum class Grammar { GenericScenes, RobotScenes };
Grammar grammar_from_string(const std::string& s);
std::string to_string(Grammar g);

struct CorpusPair {
  std::vector<uint8_t> image;  // quantized kImageSize^2 * 3 RGB
  std::string caption;
  std::string template_id;
  uint64_t item_seed = 0;
};

std::vector<CorpusPair> generate_corpus(Grammar g, int n, uint64_t seed);
void save_corpus(const std::vector<CorpusPair>& corpus, const std::string& dir);
std::vector<CorpusPair> load_corpus(const std::string& dir);

// (B, H*W*3) batch rows for the given corpus indices.
Tensor image_batch(const std::vector<CorpusPair>& corpus,
                   const std::vector<size_t>& idx);

// --- training -------------------------------------------------------------------

struct TrainConfig {
  double lr = 1e-4;
  int batch = 64;
  int epochs = 30;
  bool freeze_text = false;
  double weight_decay = 1e-4;
  uint64_t seed = 1;
  bool mark_finetuned = false;  // stamps meta.finetuned and implies freeze protocol
};

struct TrainResult {
  std::vector<double> train_loss;  // per epoch
  std::vector<double> val_loss;
  double val_retrieval_top1 = 0;
};

// Stratified 90/10 split by template id (every 10th item of each bucket).
void split_corpus(const std::vector<CorpusPair>& corpus, std::vector<size_t>& train,
                  std::vector<size_t>& val);

TrainResult train(EncoderParams& params, const std::vector<CorpusPair>& corpus,
                  const TrainConfig& cfg);

// Batch-of-16 image->caption retrieval; a hit is an exact caption-string match.
double retrieval_top1(const EncoderParams& params,
                      const std::vector<CorpusPair>& pairs,
                      const std::vector<size_t>& idx, int batch = 16,
                      uint64_t seed = 0);

// Max cosine between each distinct caption and the corpus images; stored into
// meta as "ceiling.<fnv64 hex of caption>".
void compute_caption_ceilings(EncoderParams& params,
                              const std::vector<CorpusPair>& corpus);
std::optional<double> caption_ceiling(const EncoderParams& params,
                                      const std::string& caption);

// --- checkpoints -----------------------------------------------------------------

// Container: magic "DGWT", u32 version=1, u32 tensor count; per tensor
// u16 name length + name, u8 rank, rank x u32 dims, little-endian f64s.
void save_checkpoint(const EncoderParams& params, const std::string& path);
EncoderParams load_checkpoint(const std::string& path);

// --- optimizer --------------------------------------------------------------------

struct AdamW {
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 0.0;
  int64_t step_count = 0;
  std::map<std::string, std::vector<double>> m, v;

  // In-place decoupled update; names in `frozen` are skipped entirely.
  void step(std::map<std::string, Tensor>& params,
            const std::map<std::string, Tensor>& grads,
            const std::set<std::string>& frozen = {});
};

}  // namespace gradgen::vlm
