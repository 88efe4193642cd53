#pragma once

// Image/IDS dual encoder: contrastive pre-training, canonical-representation
// export and single-character recognition by image-IDS matching.

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "radicalign/glyph.hpp"
#include "radicalign/ids.hpp"
#include "radicalign/nn.hpp"

namespace radicalign::clip {

using nn::Tensor;

struct ClipConfig {
  int embed_dim = 64;  // alignment dimension C'
  std::vector<int> image_widths{16, 32, 64, 64};
  int text_dim = 64;
  int text_layers = 2;  // 12 at full scale
  int text_heads = 4;
  int text_ffn = 128;
  int max_seq_len = 24;
  ids::Level level = ids::Level::Radical;
  /// Fixed multiplier on the dot-product logits; 1 reproduces the plain
  /// dot-product losses.
  float logit_scale = 1.0f;

  std::string to_text() const;
  static ClipConfig from_text(const std::string& text);
};

struct PretrainConfig {
  double lambda = 1.0;
  int batch_size = 64;
  nn::AdamConfig adam{};
  int epochs = 25;
  std::uint64_t seed = 0;
};

/// Conv blocks (3x3 conv, norm, relu, pool on all but the last) then global
/// average pooling and a bias-free projection to C', unit-normalised.
class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(nn::ParamStore& ps, const ClipConfig& cfg, Rng& rng);
  /// images [N, 1, 32, 32] -> [N, C']
  Tensor operator()(const Tensor& images) const;
  const std::vector<nn::ConvBlock>& blocks() const noexcept { return blocks_; }

 private:
  std::vector<nn::ConvBlock> blocks_;
  Tensor proj_;
};

/// Token embedding + learned positions, pre-norm transformer encoder, output
/// read at the END position, bias-free projection to C', unit-normalised.
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(nn::ParamStore& ps, const ClipConfig& cfg, const ids::Alphabet& alphabet, Rng& rng);
  Tensor operator()(const std::vector<ids::TokenSeq>& seqs) const;

 private:
  ClipConfig cfg_;
  ids::Alphabet alphabet_;
  Tensor tokens_, positions_, proj_;
  std::vector<nn::EncoderLayer> layers_;
  nn::LayerNorm final_ln_;
};

class ClipModel {
 public:
  ClipModel(ClipConfig cfg, ids::Alphabet alphabet, std::uint64_t init_seed);

  const ClipConfig& config() const noexcept { return cfg_; }
  const ids::Alphabet& alphabet() const noexcept { return alphabet_; }
  nn::ParamStore& params() noexcept { return params_; }
  const nn::ParamStore& params() const noexcept { return params_; }
  const ImageEncoder& image_encoder() const noexcept { return image_; }

  Tensor encode_images(std::span<const glyph::Raster> images) const;
  Tensor encode_texts(const std::vector<ids::TokenSeq>& seqs) const;

  /// Inference: unit-norm C' vectors.
  std::vector<float> encode_image(const glyph::Raster& img) const;
  std::vector<float> encode_text(const ids::TokenSeq& tokens) const;

  void save(const std::filesystem::path& path, const std::string& extra_metadata = "") const;
  static ClipModel load(const std::filesystem::path& path);

 private:
  ClipConfig cfg_;
  ids::Alphabet alphabet_;
  nn::ParamStore params_;
  ImageEncoder image_;
  TextEncoder text_;
};

/// Symmetric image-to-text / text-to-image InfoNCE over the N x N logit
/// matrix scale * I T^T, summed over the batch.
template <typename T>
tensor::Var<T> loss_lt(const tensor::Var<T>& images, const tensor::Var<T>& texts, T scale = T(1));

/// Same-label image contrast. Positives U_j exclude j itself; the
/// denominator runs over all n including j; empty U_j contributes 0.
template <typename T>
tensor::Var<T> loss_li(const tensor::Var<T>& images, std::span<const int> labels, T scale = T(1));

struct EpochLog {
  int epoch = 0;
  double lt = 0, li = 0, pre = 0;
};

struct TrainingLog {
  std::vector<EpochLog> epochs;
  void save_tsv(const std::filesystem::path& path) const;
};

/// Mini-batch Adam on L_T + lambda * L_I. Each batch holds batch_size/2
/// classes with two samples each.
TrainingLog pretrain(ClipModel& model, const PretrainConfig& cfg, const ids::Lexicon& lex,
                     const glyph::Dataset& train, const std::function<void(const EpochLog&)>& on_epoch = {});

class CandidateMatrix {
 public:
  CandidateMatrix() = default;
  explicit CandidateMatrix(int dim) : dim_(dim) {}

  int size() const noexcept { return static_cast<int>(class_ids_.size()); }
  int dim() const noexcept { return dim_; }
  const std::vector<int>& class_ids() const noexcept { return class_ids_; }
  const std::vector<float>& data() const noexcept { return data_; }
  std::span<const float> row(int k) const {
    return {data_.data() + static_cast<std::size_t>(k) * dim_, static_cast<std::size_t>(dim_)};
  }
  /// Row index of a class, or -1.
  int index_of(int class_id) const;
  /// Append-only; throws DuplicateClass / DimensionMismatch.
  void append(int class_id, std::span<const float> row);

  void save_tsv(const std::filesystem::path& path) const;
  static CandidateMatrix load_tsv(const std::filesystem::path& path);
  bool operator==(const CandidateMatrix&) const = default;

 private:
  int dim_ = 0;
  std::vector<int> class_ids_;
  std::vector<float> data_;
};

/// Row k = text embedding of class_ids[k] at the model's decomposition level.
CandidateMatrix export_candidates(const ClipModel& model, const ids::Lexicon& lex, std::span<const int> class_ids);

/// Index of the best-scoring row (ties: lowest index). Throws EmptyCandidates.
int best_candidate(std::span<const float> embedding, const CandidateMatrix& p);
/// Class id of the best-scoring candidate for an image.
int ccr_recognize(const ClipModel& model, const glyph::Raster& img, const CandidateMatrix& p);
/// Batched variant.
std::vector<int> ccr_recognize_batch(const ClipModel& model, std::span<const glyph::Raster> images,
                                     const CandidateMatrix& p, int batch = 128);

}  // namespace radicalign::clip
