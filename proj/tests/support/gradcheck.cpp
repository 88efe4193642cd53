#include "support/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "radicalign/clip.hpp"
#include "radicalign/ctr.hpp"

namespace radicalign::testing {

namespace tz = radicalign::tensor;

DVar random_param(tensor::Shape shape, Rng& rng, double lo, double hi) {
  std::vector<double> v(tensor::numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return DVar::parameter(std::move(shape), std::move(v));
}

DVar weighted_sum(const DVar& out, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(out.numel());
  double value = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = rng.uniform(-1.0, 1.0);
    value += w[i] * out.values()[i];
  }
  return tz::fused_scalar<double>(value, {out}, {w}, "weighted_sum");
}

GradCheck check_gradients(const std::string& name, std::vector<DVar> inputs,
                          const std::function<DVar(const std::vector<DVar>&)>& loss, double h) {
  for (auto& in : inputs) in.zero_grad();
  tz::backward(loss(inputs));
  GradCheck r{name, 0.0, 0};
  for (auto& in : inputs) {
    const std::vector<double> analytic = in.grad().empty() ? std::vector<double>(in.numel(), 0.0)
                                                           : std::vector<double>(in.grad().begin(), in.grad().end());
    for (std::size_t i = 0; i < in.numel(); ++i) {
      const double keep = in.values()[i];
      double plus = 0, minus = 0;
      {
        tz::NoGradGuard guard;
        in.mutable_values()[i] = keep + h;
        plus = loss(inputs).item();
        in.mutable_values()[i] = keep - h;
        minus = loss(inputs).item();
        in.mutable_values()[i] = keep;
      }
      const double numeric = (plus - minus) / (2 * h);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-6});
      r.max_rel_error = std::max(r.max_rel_error, std::abs(numeric - analytic[i]) / denom);
      ++r.checked;
    }
  }
  return r;
}

namespace {

// values bounded away from 0 so relu kinks are never straddled
DVar away_from_zero(tensor::Shape shape, Rng& rng) {
  std::vector<double> v(tensor::numel(shape));
  for (double& x : v) {
    x = rng.uniform(0.1, 1.0);
    if (rng.uniform() < 0.5) x = -x;
  }
  return DVar::parameter(std::move(shape), std::move(v));
}

// distinct values so pooling windows have a unique max
DVar distinct_values(tensor::Shape shape, Rng& rng) {
  const std::size_t n = tensor::numel(shape);
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n);
  rng.shuffle(v);
  return DVar::parameter(std::move(shape), std::move(v));
}

}  // namespace

std::vector<GradCheck> run_all_gradient_checks() {
  Rng rng(20240611);
  std::vector<GradCheck> out;
  auto ws = [](const DVar& v) { return weighted_sum(v, 99); };

  out.push_back(check_gradients("add", {random_param({2, 3}, rng), random_param({2, 3}, rng)},
                                [&](const auto& x) { return ws(tz::add(x[0], x[1])); }));
  out.push_back(check_gradients("scale", {random_param({2, 3}, rng)},
                                [&](const auto& x) { return ws(tz::scale(x[0], 1.7)); }));
  out.push_back(check_gradients("relu", {away_from_zero({3, 4}, rng)},
                                [&](const auto& x) { return ws(tz::relu(x[0])); }));
  out.push_back(check_gradients("reshape", {random_param({2, 6}, rng)},
                                [&](const auto& x) { return ws(tz::reshape(x[0], {3, 4})); }));
  out.push_back(check_gradients("add_positional", {random_param({2, 3, 4}, rng), random_param({5, 4}, rng)},
                                [&](const auto& x) { return ws(tz::add_positional(x[0], x[1])); }));
  out.push_back(check_gradients("gather_rows", {random_param({4, 3}, rng)}, [&](const auto& x) {
    const std::vector<int> rows{2, 0, 2};
    return ws(tz::gather_rows(x[0], std::span<const int>(rows)));
  }));
  out.push_back(check_gradients("concat_rows", {random_param({2, 3}, rng), random_param({1, 3}, rng)},
                                [&](const auto& x) { return ws(tz::concat_rows(x[0], x[1])); }));
  out.push_back(check_gradients("to_sequence", {random_param({2, 3, 2, 2}, rng)},
                                [&](const auto& x) { return ws(tz::to_sequence(x[0])); }));
  out.push_back(check_gradients("dense", {random_param({2, 3, 4}, rng), random_param({4, 5}, rng), random_param({5}, rng)},
                                [&](const auto& x) { return ws(tz::dense(x[0], x[1], x[2])); }));
  out.push_back(check_gradients("dense_no_bias", {random_param({3, 4}, rng), random_param({4, 2}, rng)},
                                [&](const auto& x) { return ws(tz::dense(x[0], x[1], DVar{})); }));
  out.push_back(check_gradients("matmul_nt", {random_param({3, 4}, rng), random_param({2, 4}, rng)},
                                [&](const auto& x) { return ws(tz::matmul_nt(x[0], x[1])); }));
  out.push_back(check_gradients("l2_normalize", {random_param({3, 4}, rng)},
                                [&](const auto& x) { return ws(tz::l2_normalize(x[0])); }));
  out.push_back(check_gradients("conv2d_stride1", {random_param({2, 2, 4, 4}, rng), random_param({3, 18}, rng), random_param({3}, rng)},
                                [&](const auto& x) { return ws(tz::conv2d(x[0], x[1], x[2], 1)); }));
  out.push_back(check_gradients("conv2d_stride2", {random_param({1, 2, 5, 5}, rng), random_param({2, 18}, rng), random_param({2}, rng)},
                                [&](const auto& x) { return ws(tz::conv2d(x[0], x[1], x[2], 2)); }));
  out.push_back(check_gradients("max_pool2d", {distinct_values({1, 2, 4, 4}, rng)},
                                [&](const auto& x) { return ws(tz::max_pool2d(x[0])); }));
  out.push_back(check_gradients("global_avg_pool", {random_param({2, 3, 2, 2}, rng)},
                                [&](const auto& x) { return ws(tz::global_avg_pool(x[0])); }));
  out.push_back(check_gradients("layer_norm", {random_param({2, 3, 5}, rng), random_param({5}, rng), random_param({5}, rng)},
                                [&](const auto& x) { return ws(tz::layer_norm(x[0], x[1], x[2])); }));
  out.push_back(check_gradients("layer_norm2d", {random_param({2, 3, 2, 2}, rng), random_param({3}, rng), random_param({3}, rng)},
                                [&](const auto& x) { return ws(tz::layer_norm2d(x[0], x[1], x[2])); }));
  out.push_back(check_gradients("embedding", {random_param({6, 4}, rng)}, [&](const auto& x) {
    const std::vector<int> ids{1, 5, 1, 0};
    return ws(tz::embedding(x[0], std::span<const int>(ids), {2, 2}));
  }));
  out.push_back(check_gradients("softmax", {random_param({3, 4}, rng)},
                                [&](const auto& x) { return ws(tz::softmax(x[0])); }));
  out.push_back(check_gradients("attention", {random_param({2, 3, 4}, rng), random_param({2, 5, 4}, rng), random_param({2, 5, 4}, rng)},
                                [&](const auto& x) { return ws(tz::attention(x[0], x[1], x[2], 2, {})); }));
  out.push_back(check_gradients("attention_causal", {random_param({2, 3, 4}, rng), random_param({2, 3, 4}, rng), random_param({2, 3, 4}, rng)},
                                [&](const auto& x) {
                                  tz::AttentionMask m;
                                  m.causal = true;
                                  return ws(tz::attention(x[0], x[1], x[2], 2, m));
                                }));
  out.push_back(check_gradients("attention_key_lengths", {random_param({2, 2, 4}, rng), random_param({2, 4, 4}, rng), random_param({2, 4, 4}, rng)},
                                [&](const auto& x) {
                                  tz::AttentionMask m;
                                  m.key_lengths = {2, 4};
                                  return ws(tz::attention(x[0], x[1], x[2], 1, m));
                                }));
  out.push_back(check_gradients("cross_entropy", {random_param({4, 5}, rng)}, [&](const auto& x) {
    const std::vector<int> t{1, -1, 4, 0};
    return tz::cross_entropy(x[0], std::span<const int>(t));
  }));

  const std::vector<int> labels{0, 1, 0, 1};
  out.push_back(check_gradients("loss_lt", {random_param({4, 8}, rng), random_param({4, 8}, rng)}, [&](const auto& x) {
    return clip::loss_lt<double>(tz::l2_normalize(x[0]), tz::l2_normalize(x[1]));
  }));
  out.push_back(check_gradients("loss_li", {random_param({4, 8}, rng)}, [&](const auto& x) {
    return clip::loss_li<double>(tz::l2_normalize(x[0]), labels);
  }));
  out.push_back(check_gradients("loss_pre", {random_param({4, 8}, rng), random_param({4, 8}, rng)}, [&](const auto& x) {
    const DVar i = tz::l2_normalize(x[0]);
    return tz::add(clip::loss_lt<double>(i, tz::l2_normalize(x[1])), tz::scale(clip::loss_li<double>(i, labels), 1.0));
  }));
  out.push_back(check_gradients("ctr_loss", {random_param({3, 5}, rng), random_param({4, 5}, rng)}, [&](const auto& x) {
    const std::vector<int> y{3, -1, 0};
    return ctr::ctr_loss<double>(tz::l2_normalize(x[0]), y, tz::l2_normalize(x[1]), 0.001);
  }));
  return out;
}

}  // namespace radicalign::testing
