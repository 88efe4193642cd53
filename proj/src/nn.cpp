#include "radicalign/nn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace radicalign::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

Tensor ParamStore::add(const std::string& name, Shape shape, int fan_in, Rng& rng) {
  if (contains(name)) throw Error(ErrorKind::Checkpoint, "duplicate parameter " + name);
  const double bound = std::sqrt(1.0 / static_cast<double>(std::max(fan_in, 1)));
  std::vector<float> values(tensor::numel(shape));
  for (float& v : values) v = static_cast<float>(rng.uniform(-bound, bound));
  Tensor t = Tensor::parameter(std::move(shape), std::move(values));
  index_[name] = params_.size();
  params_.emplace_back(name, t);
  return t;
}

Tensor ParamStore::add_filled(const std::string& name, Shape shape, float value) {
  if (contains(name)) throw Error(ErrorKind::Checkpoint, "duplicate parameter " + name);
  std::vector<float> values(tensor::numel(shape), value);
  Tensor t = Tensor::parameter(std::move(shape), std::move(values));
  index_[name] = params_.size();
  params_.emplace_back(name, t);
  return t;
}

Tensor ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error(ErrorKind::Checkpoint, "no parameter " + name);
  return params_[it->second].second;
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

int ParamStore::copy_matching(const ParamStore& other, const std::string& prefix_from, const std::string& prefix_to) {
  int copied = 0;
  for (auto& [name, t] : params_) {
    if (name.rfind(prefix_to, 0) != 0) continue;
    const std::string src = prefix_from + name.substr(prefix_to.size());
    if (!other.contains(src)) continue;
    Tensor s = other.get(src);
    if (s.shape() != t.shape()) continue;
    std::copy(s.values().begin(), s.values().end(), t.mutable_values().begin());
    ++copied;
  }
  return copied;
}

// ---------------------------------------------------------------------------

namespace {

void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (!is) throw Error(ErrorKind::Checkpoint, "truncated checkpoint");
  return v;
}

void put_string(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is, std::uint32_t limit) {
  const std::uint32_t n = get_u32(is);
  if (n > limit) throw Error(ErrorKind::Checkpoint, "string length out of range");
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw Error(ErrorKind::Checkpoint, "truncated checkpoint");
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::Io, "cannot write " + path.string());
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  put_u32(os, kCheckpointVersion);
  put_string(os, ckpt.metadata);
  put_u32(os, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    put_string(os, t.name);
    put_u32(os, static_cast<std::uint32_t>(t.dims.size()));
    for (int d : t.dims) put_u32(os, static_cast<std::uint32_t>(d));
    if (tensor::numel(t.dims) != t.values.size()) throw Error(ErrorKind::Checkpoint, "size mismatch for " + t.name);
    os.write(reinterpret_cast<const char*>(t.values.data()), static_cast<std::streamsize>(t.values.size() * sizeof(float)));
  }
  if (!os) throw Error(ErrorKind::Io, "write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::Io, "cannot open " + path.string());
  char magic[sizeof kCheckpointMagic];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw Error(ErrorKind::Checkpoint, "bad magic in " + path.string());
  }
  const std::uint32_t version = get_u32(is);
  if (version != kCheckpointVersion) throw Error(ErrorKind::Checkpoint, "unsupported version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.metadata = get_string(is, 1u << 24);
  const std::uint32_t count = get_u32(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = get_string(is, 4096);
    const std::uint32_t rank = get_u32(is);
    if (rank > 8) throw Error(ErrorKind::Checkpoint, "rank out of range");
    for (std::uint32_t r = 0; r < rank; ++r) t.dims.push_back(static_cast<int>(get_u32(is)));
    t.values.resize(tensor::numel(t.dims));
    is.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(t.values.size() * sizeof(float)));
    if (!is) throw Error(ErrorKind::Checkpoint, "truncated payload for " + t.name);
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

Checkpoint snapshot(const ParamStore& store, std::string metadata) {
  Checkpoint c;
  c.metadata = std::move(metadata);
  for (const auto& [name, t] : store.params()) c.tensors.push_back({name, t.shape(), {t.values().begin(), t.values().end()}});
  return c;
}

void restore(ParamStore& store, const Checkpoint& ckpt) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : ckpt.tensors) by_name[t.name] = &t;
  for (const auto& [name, t] : store.params()) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw Error(ErrorKind::Checkpoint, "missing tensor " + name);
    if (it->second->dims != t.shape()) throw Error(ErrorKind::Checkpoint, "shape mismatch for " + name);
    Tensor handle = t;
    std::copy(it->second->values.begin(), it->second->values.end(), handle.mutable_values().begin());
  }
}

// ---------------------------------------------------------------------------

void adam_step(std::span<float> params, std::span<const float> grads, AdamMoments& mo, const AdamConfig& cfg, long step) {
  if (grads.size() != params.size()) throw Error(ErrorKind::ShapeMismatch, "adam: gradient size");
  if (mo.m.empty()) {
    mo.m.assign(params.size(), 0.0f);
    mo.v.assign(params.size(), 0.0f);
  }
  if (mo.m.size() != params.size()) throw Error(ErrorKind::ShapeMismatch, "adam: moment size");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  const auto b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
  const auto step_size = static_cast<float>(cfg.lr / bc1);
  const auto inv_bc2 = static_cast<float>(1.0 / bc2);
  const auto eps = static_cast<float>(cfg.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const float g = grads[i];
    mo.m[i] = b1 * mo.m[i] + (1.0f - b1) * g;
    mo.v[i] = b2 * mo.v[i] + (1.0f - b2) * g * g;
    params[i] -= step_size * mo.m[i] / (std::sqrt(mo.v[i] * inv_bc2) + eps);
  }
}

void Adam::step(ParamStore& store) {
  ++step_;
  for (const auto& [name, t] : store.params()) {
    Tensor handle = t;
    if (handle.grad().empty()) continue;
    tensor::check_finite(handle.grad(), name.c_str());
    adam_step(handle.mutable_values(), handle.grad(), moments_[name], cfg_, step_);
  }
  store.zero_grad();
}

// ---------------------------------------------------------------------------

Dense::Dense(ParamStore& ps, const std::string& name, int in, int out, Rng& rng, bool bias) {
  w = ps.add(name + ".w", {in, out}, in, rng);
  if (bias) b = ps.add(name + ".b", {out}, in, rng);
}

LayerNorm::LayerNorm(ParamStore& ps, const std::string& name, int dim) {
  gamma = ps.add_filled(name + ".gamma", {dim}, 1.0f);
  beta = ps.add_filled(name + ".beta", {dim}, 0.0f);
}

ConvBlock::ConvBlock(ParamStore& ps, const std::string& name, int in, int out, bool pool_, Rng& rng) : pool(pool_) {
  w = ps.add(name + ".conv.w", {out, in * 9}, in * 9, rng);
  b = ps.add(name + ".conv.b", {out}, in * 9, rng);
  gamma = ps.add_filled(name + ".norm.gamma", {out}, 1.0f);
  beta = ps.add_filled(name + ".norm.beta", {out}, 0.0f);
}

Tensor ConvBlock::operator()(const Tensor& x) const {
  Tensor y = tensor::relu(tensor::layer_norm2d(tensor::conv2d(x, w, b, 1), gamma, beta));
  return pool ? tensor::max_pool2d(y) : y;
}

MultiHeadAttention::MultiHeadAttention(ParamStore& ps, const std::string& name, int dim, int heads_, Rng& rng)
    : q(ps, name + ".q", dim, dim, rng),
      k(ps, name + ".k", dim, dim, rng),
      v(ps, name + ".v", dim, dim, rng),
      o(ps, name + ".o", dim, dim, rng),
      heads(heads_) {}

Tensor MultiHeadAttention::operator()(const Tensor& query, const Tensor& memory, const tensor::AttentionMask& mask) const {
  return o(tensor::attention(q(query), k(memory), v(memory), heads, mask));
}

FeedForward::FeedForward(ParamStore& ps, const std::string& name, int dim, int hidden, Rng& rng)
    : in(ps, name + ".in", dim, hidden, rng), out(ps, name + ".out", hidden, dim, rng) {}

EncoderLayer::EncoderLayer(ParamStore& ps, const std::string& name, int dim, int heads, int hidden, Rng& rng)
    : ln1(ps, name + ".ln1", dim),
      ln2(ps, name + ".ln2", dim),
      attn(ps, name + ".attn", dim, heads, rng),
      ffn(ps, name + ".ffn", dim, hidden, rng) {}

Tensor EncoderLayer::operator()(const Tensor& x, const tensor::AttentionMask& mask) const {
  const Tensor h = ln1(x);
  const Tensor y = tensor::add(x, attn(h, h, mask));
  return tensor::add(y, ffn(ln2(y)));
}

DecoderLayer::DecoderLayer(ParamStore& ps, const std::string& name, int dim, int heads, int hidden, Rng& rng)
    : ln1(ps, name + ".ln1", dim),
      ln2(ps, name + ".ln2", dim),
      ln3(ps, name + ".ln3", dim),
      self_attn(ps, name + ".self", dim, heads, rng),
      cross_attn(ps, name + ".cross", dim, heads, rng),
      ffn(ps, name + ".ffn", dim, hidden, rng) {}

Tensor DecoderLayer::operator()(const Tensor& x, const Tensor& memory) const {
  tensor::AttentionMask causal;
  causal.causal = true;
  const Tensor h = ln1(x);
  Tensor y = tensor::add(x, self_attn(h, h, causal));
  y = tensor::add(y, cross_attn(ln2(y), memory, {}));
  return tensor::add(y, ffn(ln3(y)));
}

}  // namespace radicalign::nn
