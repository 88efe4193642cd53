#pragma once

// Text-line recognizer: conv encoder, transformer decoder and a matching head
// scored against the frozen candidate matrix P.

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "radicalign/clip.hpp"
#include "radicalign/glyph.hpp"
#include "radicalign/nn.hpp"

namespace radicalign::ctr {

using nn::Tensor;

enum class HeadMode : std::uint8_t { Match, Fc };
std::string_view head_mode_name(HeadMode m);
HeadMode parse_head_mode(std::string_view name);

struct CtrConfig {
  double beta = 0.001;
  HeadMode head_mode = HeadMode::Match;
  int max_decode_len = 10;
  std::vector<int> encoder_widths{16, 32, 64, 64};
  int model_dim = 64;
  int layers = 2;
  int heads = 4;
  int ffn = 128;
  /// Same meaning as ClipConfig::logit_scale, applied to P f. At 1 the
  /// recognizer sits at chance for as long as we could afford to train.
  float logit_scale = 10.0f;
  /// Copy the image encoder weights of the pre-trained model.
  bool init_from_pretrain = true;
  nn::AdamConfig adam{3e-4};
  int epochs = 15;
  int batch_size = 16;
  std::uint64_t seed = 0;

  std::string to_text() const;
  static CtrConfig from_text(const std::string& text);
};

/// Softmax over the dot products of `f` with each row of `rows` [K, dim]
/// times `scale`. The one implementation behind recognition and the loss.
template <typename T>
std::vector<T> match_probabilities(std::span<const T> f, std::span<const T> rows, int k, T scale = T(1));

/// Probability vector over the K rows of P for one unit-norm step feature.
std::vector<double> matching_head(std::span<const float> f, const clip::CandidateMatrix& p, float scale = 1.0f);

/// Mean over non-PAD steps of -log p(y|f) + beta * ||p_y - f||^2.
/// f [S, C'], candidates [K, C'], labels index candidate rows (-1 = PAD).
template <typename T>
tensor::Var<T> ctr_loss(const tensor::Var<T>& f, std::span<const int> labels, const tensor::Var<T>& candidates,
                        T beta, T scale = T(1));

struct DecodeResult {
  std::vector<int> classes;
  bool truncated = false;
  bool operator==(const DecodeResult&) const = default;
};

class CtrModel {
 public:
  /// `fc_classes` is the output vocabulary of the FC head (ignored in match
  /// mode); `embed_dim` must equal the candidate dimension.
  CtrModel(CtrConfig cfg, int embed_dim, std::vector<int> fc_classes, std::uint64_t init_seed);

  const CtrConfig& config() const noexcept { return cfg_; }
  int embed_dim() const noexcept { return embed_dim_; }
  const std::vector<int>& fc_classes() const noexcept { return fc_classes_; }
  nn::ParamStore& params() noexcept { return params_; }
  const nn::ParamStore& params() const noexcept { return params_; }

  /// Copies the matching conv blocks of a pre-trained image encoder.
  int init_from(const clip::ClipModel& clip);

  /// lines [B, 1, 32, 256] -> memory [B, L_mem, model_dim]
  Tensor encode(std::span<const glyph::Raster> lines) const;

  /// Decoder outputs for decoder inputs `inputs` [B, L] given as class ids
  /// with -1 = BOS and -2 = PAD. Match mode: unit-norm [B*L, C'];
  /// FC mode: logits [B*L, |fc_classes| + 1].
  Tensor decode(const Tensor& memory, const std::vector<std::vector<int>>& inputs, const clip::CandidateMatrix& p) const;

  /// Candidate rows for the match head: P followed by the END row.
  Tensor candidates(const clip::CandidateMatrix& p) const;

  /// Teacher-forced loss for a batch of labelled lines.
  Tensor loss(std::span<const glyph::Raster> lines, const std::vector<std::vector<int>>& labels,
              const clip::CandidateMatrix& p) const;

  std::vector<DecodeResult> greedy_decode(std::span<const glyph::Raster> lines, const clip::CandidateMatrix& p) const;
  DecodeResult greedy_decode(const glyph::Raster& line, const clip::CandidateMatrix& p) const;

  void save(const std::filesystem::path& path, const std::string& extra_metadata = "") const;
  static CtrModel load(const std::filesystem::path& path);

 private:
  int input_row(int token, const clip::CandidateMatrix& p) const;
  int fc_index(int class_id) const;

  CtrConfig cfg_;
  int embed_dim_ = 0;
  std::vector<int> fc_classes_;
  nn::ParamStore params_;
  std::vector<nn::ConvBlock> blocks_;
  nn::Dense enc_proj_;  // only when the last conv width differs from model_dim
  Tensor enc_positions_;
  Tensor in_proj_;       // match mode: C' -> model_dim for P rows
  Tensor in_table_;      // match: [BOS, END, PAD]; fc: classes then specials
  Tensor dec_positions_;
  std::vector<nn::DecoderLayer> layers_;
  nn::LayerNorm final_ln_;
  nn::Dense out_;        // match: model_dim -> C' (no bias); fc: -> classes + 1
  Tensor end_row_;
};

struct CtrEpochLog {
  int epoch = 0;
  double loss = 0;
};

/// Teacher-forced Adam training; P is read-only. Throws EmptyDataset and
/// CandidateMissing.
std::vector<CtrEpochLog> train_ctr(CtrModel& model, const clip::CandidateMatrix& p, const glyph::Dataset& lines,
                                   const std::function<void(const CtrEpochLog&)>& on_epoch = {});

void save_ctr_log(const std::filesystem::path& path, const std::vector<CtrEpochLog>& log);

/// Appends the text embedding of `tokens` as a new row; throws DuplicateClass.
void add_candidate(clip::CandidateMatrix& p, int class_id, const ids::TokenSeq& tokens, const clip::ClipModel& model);

/// `sample_id<TAB>class ids<TAB>truncated`
void save_predictions(const std::filesystem::path& path, const std::vector<std::string>& sample_ids,
                      const std::vector<DecodeResult>& results);

}  // namespace radicalign::ctr
