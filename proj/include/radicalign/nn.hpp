#pragma once

// Layers, parameter storage, Adam and checkpoints on top of tensor::Var<float>.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "radicalign/tensor.hpp"

namespace radicalign::nn {

using Tensor = tensor::Var<float>;
using tensor::Shape;

/// Named parameters in creation order. Handles share nodes, so a layer's
/// copy of a Tensor is the same parameter as the store's.
class ParamStore {
 public:
  /// Fan-in scaled uniform U(-sqrt(1/fan_in), +sqrt(1/fan_in)).
  Tensor add(const std::string& name, Shape shape, int fan_in, Rng& rng);
  Tensor add_filled(const std::string& name, Shape shape, float value);

  const std::vector<std::pair<std::string, Tensor>>& params() const noexcept { return params_; }
  Tensor get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t parameter_count() const;
  void zero_grad();

  /// Copies values from `other` for every name present in both with equal
  /// shapes; returns the number copied.
  int copy_matching(const ParamStore& other, const std::string& prefix_from, const std::string& prefix_to);

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Checkpoints: "RADALIGN" magic, u32 version, metadata text, then a table of
// (name, dims, row-major float32 payload). Little-endian.

inline constexpr char kCheckpointMagic[8] = {'R', 'A', 'D', 'A', 'L', 'I', 'G', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Shape dims;
  std::vector<float> values;
};

struct Checkpoint {
  std::string metadata;  // key=value lines
  std::vector<NamedTensor> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint snapshot(const ParamStore& store, std::string metadata);
/// Every parameter of `store` must be present with matching dims.
void restore(ParamStore& store, const Checkpoint& ckpt);

// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
};

struct AdamMoments {
  std::vector<float> m;
  std::vector<float> v;
};

/// One bias-corrected Adam update of `params`; `step` is 1-based.
void adam_step(std::span<float> params, std::span<const float> grads, AdamMoments& moments,
               const AdamConfig& cfg, long step);

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}
  /// Updates every parameter that has a gradient, then clears gradients.
  void step(ParamStore& store);
  long steps() const noexcept { return step_; }
  const AdamConfig& config() const noexcept { return cfg_; }

 private:
  AdamConfig cfg_;
  long step_ = 0;
  std::map<std::string, AdamMoments> moments_;
};

// ---------------------------------------------------------------------------
// Layers

struct Dense {
  Tensor w, b;
  Dense() = default;
  Dense(ParamStore& ps, const std::string& name, int in, int out, Rng& rng, bool bias = true);
  Tensor operator()(const Tensor& x) const { return tensor::dense(x, w, b); }
};

struct LayerNorm {
  Tensor gamma, beta;
  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& name, int dim);
  Tensor operator()(const Tensor& x) const { return tensor::layer_norm(x, gamma, beta); }
};

/// conv3x3 -> layer norm -> relu -> optional 2x2 max pool
struct ConvBlock {
  Tensor w, b, gamma, beta;
  bool pool = true;
  ConvBlock() = default;
  ConvBlock(ParamStore& ps, const std::string& name, int in, int out, bool pool, Rng& rng);
  Tensor operator()(const Tensor& x) const;
};

struct MultiHeadAttention {
  Dense q, k, v, o;
  int heads = 1;
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& ps, const std::string& name, int dim, int heads, Rng& rng);
  Tensor operator()(const Tensor& query, const Tensor& memory, const tensor::AttentionMask& mask) const;
};

struct FeedForward {
  Dense in, out;
  FeedForward() = default;
  FeedForward(ParamStore& ps, const std::string& name, int dim, int hidden, Rng& rng);
  Tensor operator()(const Tensor& x) const { return out(tensor::relu(in(x))); }
};

/// Pre-norm encoder layer: x + MHA(LN x), x + FFN(LN x).
struct EncoderLayer {
  LayerNorm ln1, ln2;
  MultiHeadAttention attn;
  FeedForward ffn;
  EncoderLayer() = default;
  EncoderLayer(ParamStore& ps, const std::string& name, int dim, int heads, int hidden, Rng& rng);
  Tensor operator()(const Tensor& x, const tensor::AttentionMask& mask) const;
};

/// Pre-norm decoder layer: masked self-attention, cross-attention, FFN.
struct DecoderLayer {
  LayerNorm ln1, ln2, ln3;
  MultiHeadAttention self_attn, cross_attn;
  FeedForward ffn;
  DecoderLayer() = default;
  DecoderLayer(ParamStore& ps, const std::string& name, int dim, int heads, int hidden, Rng& rng);
  Tensor operator()(const Tensor& x, const Tensor& memory) const;
};

}  // namespace radicalign::nn
