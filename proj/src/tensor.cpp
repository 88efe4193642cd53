#include "radicalign/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

namespace radicalign::tensor {

namespace {

thread_local bool g_no_grad = false;

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;
template <typename T>
using StridedMap = Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStridedMap = Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>>;

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
  throw Error(ErrorKind::ShapeMismatch, std::string(op) + ": " + detail);
}

template <typename T>
std::shared_ptr<Node<T>> make_node(Shape shape, std::initializer_list<const Var<T>*> parents) {
  auto n = std::make_shared<Node<T>>();
  n->value.assign(numel(shape), T(0));
  n->shape = std::move(shape);
  for (const Var<T>* p : parents) {
    if (p && p->defined() && p->requires_grad()) n->requires_grad = !g_no_grad;
  }
  if (n->requires_grad) {
    for (const Var<T>* p : parents) {
      if (p && p->defined()) n->parents.push_back(p->ptr());
    }
  }
  return n;
}

template <typename T>
Var<T> finish(std::shared_ptr<Node<T>> n, const char* op) {
  check_finite(std::span<const T>(n->value), op);
  return Var<T>(std::move(n));
}

template <typename T>
T* grad_of(Node<T>* n) {
  return n && n->requires_grad ? n->ensure_grad().data() : nullptr;
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_no_grad) { g_no_grad = true; }
NoGradGuard::~NoGradGuard() { g_no_grad = previous_; }
bool NoGradGuard::active() noexcept { return g_no_grad; }

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d < 0) throw Error(ErrorKind::ShapeMismatch, "negative dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

void check_finite(std::span<const float> v, const char* op) {
  for (float x : v) {
    if (!std::isfinite(x)) throw Error(ErrorKind::NonFiniteValue, op);
  }
}

void check_finite(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw Error(ErrorKind::NonFiniteValue, op);
  }
}

// ---------------------------------------------------------------------------

template <typename T>
Var<T> Var<T>::constant(Shape shape, std::vector<T> values) {
  if (tensor::numel(shape) != values.size()) shape_error("constant", shape_str(shape) + " vs " + std::to_string(values.size()));
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value.assign(values.begin(), values.end());
  check_finite(std::span<const T>(n->value), "constant");
  return Var(std::move(n));
}

template <typename T>
Var<T> Var<T>::parameter(Shape shape, std::vector<T> values) {
  Var v = constant(std::move(shape), std::move(values));
  v.node_->requires_grad = true;
  return v;
}

template <typename T>
Var<T> Var<T>::zeros(Shape shape, bool requires_grad) {
  auto n = std::make_shared<Node<T>>();
  n->value.assign(tensor::numel(shape), T(0));
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return Var(std::move(n));
}

template <typename T>
T Var<T>::item() const {
  if (numel() != 1) shape_error("item", shape_str(shape()));
  return node_->value[0];
}

template <typename T>
Var<T> Var<T>::detach() const {
  auto n = std::make_shared<Node<T>>();
  n->shape = shape();
  n->value = node_->value;
  return Var(std::move(n));
}

template <typename T>
void backward(const Var<T>& loss) {
  if (loss.numel() != 1) shape_error("backward", "loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  // iterative post-order DFS
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node(), 0}};
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<T>* p = n->parents[i++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  loss.node()->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn();
  }
}

// ---------------------------------------------------------------------------
// element-wise and shape

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) shape_error("add", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = make_node<T>(a.shape(), {&a, &b});
  for (std::size_t i = 0; i < out->size(); ++i) out->value[i] = a.values()[i] + b.values()[i];
  if (out->requires_grad) {
    Node<T>*o = out.get(), *pa = a.node(), *pb = b.node();
    out->backward_fn = [o, pa, pb] {
      for (Node<T>* p : {pa, pb}) {
        if (T* g = grad_of(p)) {
          for (std::size_t i = 0; i < o->size(); ++i) g[i] += o->grad[i];
        }
      }
    };
  }
  return finish(out, "add");
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  auto out = make_node<T>(a.shape(), {&a});
  for (std::size_t i = 0; i < out->size(); ++i) out->value[i] = a.values()[i] * s;
  if (out->requires_grad) {
    Node<T>*o = out.get(), *pa = a.node();
    out->backward_fn = [o, pa, s] {
      T* g = grad_of(pa);
      for (std::size_t i = 0; i < o->size(); ++i) g[i] += o->grad[i] * s;
    };
  }
  return finish(out, "scale");
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  auto out = make_node<T>(a.shape(), {&a});
  for (std::size_t i = 0; i < out->size(); ++i) out->value[i] = std::max(a.values()[i], T(0));
  if (out->requires_grad) {
    Node<T>*o = out.get(), *pa = a.node();
    out->backward_fn = [o, pa] {
      T* g = grad_of(pa);
      for (std::size_t i = 0; i < o->size(); ++i) {
        if (pa->value[i] > T(0)) g[i] += o->grad[i];
      }
    };
  }
  return finish(out, "relu");
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) shape_error("reshape", shape_str(a.shape()) + " -> " + shape_str(shape));
  auto out = make_node<T>(std::move(shape), {&a});
  std::copy(a.values().begin(), a.values().end(), out->value.begin());
  if (out->requires_grad) {
    Node<T>*o = out.get(), *pa = a.node();
    out->backward_fn = [o, pa] {
      T* g = grad_of(pa);
      for (std::size_t i = 0; i < o->size(); ++i) g[i] += o->grad[i];
    };
  }
  return finish(out, "reshape");
}

template <typename T>
Var<T> add_positional(const Var<T>& x, const Var<T>& table) {
  if (x.rank() != 3 || table.rank() != 2 || x.dim(2) != table.dim(1) || x.dim(1) > table.dim(0)) {
    shape_error("add_positional", shape_str(x.shape()) + " + " + shape_str(table.shape()));
  }
  const int B = x.dim(0), L = x.dim(1), D = x.dim(2);
  auto out = make_node<T>(x.shape(), {&x, &table});
  const std::size_t per = static_cast<std::size_t>(L) * D;
  for (int b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < per; ++i) out->value[b * per + i] = x.values()[b * per + i] + table.values()[i];
  }
  if (out->requires_grad) {
    Node<T>*o = out.get(), *px = x.node(), *pt = table.node();
    out->backward_fn = [o, px, pt, B, per] {
      if (T* g = grad_of(px)) {
        for (std::size_t i = 0; i < o->size(); ++i) g[i] += o->grad[i];
      }
      if (T* g = grad_of(pt)) {
        for (int b = 0; b < B; ++b) {
          for (std::size_t i = 0; i < per; ++i) g[i] += o->grad[b * per + i];
        }
      }
    };
  }
  return finish(out, "add_positional");
}

template <typename T>
Var<T> gather_rows(const Var<T>& x, std::span<const int> rows) {
  const int d = x.dim(-1);
  const int n = static_cast<int>(x.numel() / static_cast<std::size_t>(d));
  for (int r : rows) {
    if (r < 0 || r >= n) shape_error("gather_rows", "row " + std::to_string(r) + " of " + std::to_string(n));
  }
  auto out = make_node<T>({static_cast<int>(rows.size()), d}, {&x});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(x.values().begin() + static_cast<std::ptrdiff_t>(rows[i]) * d, d, out->value.begin() + static_cast<std::ptrdiff_t>(i) * d);
  }
  if (out->requires_grad) {
    Node<T>*o = out.get(), *px = x.node();
    out->backward_fn = [o, px, idx = std::vector<int>(rows.begin(), rows.end()), d] {
      T* g = grad_of(px);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        for (int k = 0; k < d; ++k) g[static_cast<std::size_t>(idx[i]) * d + k] += o->grad[i * d + k];
      }
    };
  }
  return finish(out, "gather_rows");
}

template <typename T>
Var<T> concat_rows(const Var<T>& a, const Var<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    shape_error("concat_rows", shape_str(a.shape()) + " ++ " + shape_str(b.shape()));
  }
  auto out = make_node<T>({a.dim(0) + b.dim(0), a.dim(1)}, {&a, &b});
  std::copy(a.values().begin(), a.values().end(), out->value.begin());
  std::copy(b.values().begin(), b.values().end(), out->value.begin() + static_cast<std::ptrdiff_t>(a.numel()));
  if (out->requires_grad) {
    Node<T>*o = out.get(), *pa = a.node(), *pb = b.node();
    out->backward_fn = [o, pa, pb] {
      if (T* g = grad_of(pa)) {
        for (std::size_t i = 0; i < pa->size(); ++i) g[i] += o->grad[i];
      }
      if (T* g = grad_of(pb)) {
        for (std::size_t i = 0; i < pb->size(); ++i) g[i] += o->grad[pa->size() + i];
      }
    };
  }
  return finish(out, "concat_rows");
}

template <typename T>
Var<T> to_sequence(const Var<T>& x) {
  if (x.rank() != 4) shape_error("to_sequence", shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  auto out = make_node<T>({N, HW, C}, {&x});
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      for (int p = 0; p < HW; ++p) {
        out->value[(static_cast<std::size_t>(n) * HW + p) * C + c] = x.values()[(static_cast<std::size_t>(n) * C + c) * HW + p];
      }
    }
  }
  if (out->requires_grad) {
    Node<T>*o = out.get(), *px = x.node();
    out->backward_fn = [o, px, N, C, HW] {
      T* g = grad_of(px);
      for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
          for (int p = 0; p < HW; ++p) {
            g[(static_cast<std::size_t>(n) * C + c) * HW + p] += o->grad[(static_cast<std::size_t>(n) * HW + p) * C + c];
          }
        }
      }
    };
  }
  return finish(out, "to_sequence");
}

// ---------------------------------------------------------------------------
// linear algebra

template <typename T>
Var<T> dense(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  if (w.rank() != 2 || x.dim(-1) != w.dim(0) || (b.defined() && (b.rank() != 1 || b.dim(0) != w.dim(1)))) {
    shape_error("dense", shape_str(x.shape()) + " x " + shape_str(w.shape()));
  }
  const int in = w.dim(0), outd = w.dim(1);
  const int rows = static_cast<int>(x.numel() / static_cast<std::size_t>(in));
  Shape os = x.shape();
  os.back() = outd;
  auto out = make_node<T>(os, {&x, &w, b.defined() ? &b : nullptr});
  MapR<T> Y(out->value.data(), rows, outd);
  Y.noalias() = CMapR<T>(x.values().data(), rows, in) * CMapR<T>(w.values().data(), in, outd);
  if (b.defined()) Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.values().data(), outd);
  if (out->requires_grad) {
    Node<T>*o = out.get(), *px = x.node(), *pw = w.node(), *pb = b.defined() ? b.node() : nullptr;
    out->backward_fn = [o, px, pw, pb, rows, in, outd] {
      CMapR<T> dY(o->grad.data(), rows, outd);
      if (T* g = grad_of(px)) MapR<T>(g, rows, in).noalias() += dY * CMapR<T>(pw->value.data(), in, outd).transpose();
      if (T* g = grad_of(pw)) MapR<T>(g, in, outd).noalias() += CMapR<T>(px->value.data(), rows, in).transpose() * dY;
      if (T* g = grad_of(pb)) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(g, outd) += dY.colwise().sum();
      }
    };
  }
  return finish(out, "dense");
}

template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    shape_error("matmul_nt", shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  }
  const int n = a.dim(0), m = b.dim(0), d = a.dim(1);
  auto out = make_node<T>({n, m}, {&a, &b});
  MapR<T>(out->value.data(), n, m).noalias() =
      CMapR<T>(a.values().data(), n, d) * CMapR<T>(b.values().data(), m, d).transpose();
  if (out->requires_grad) {
    Node<T>*o = out.get(), *pa = a.node(), *pb = b.node();
    out->backward_fn = [o, pa, pb, n, m, d] {
      CMapR<T> dC(o->grad.data(), n, m);
      if (T* g = grad_of(pa)) MapR<T>(g, n, d).noalias() += dC * CMapR<T>(pb->value.data(), m, d);
      if (T* g = grad_of(pb)) MapR<T>(g, m, d).noalias() += dC.transpose() * CMapR<T>(pa->value.data(), n, d);
    };
  }
  return finish(out, "matmul_nt");
}

template <typename T>
Var<T> l2_normalize(const Var<T>& x) {
  const int d = x.dim(-1);
  const int rows = static_cast<int>(x.numel() / static_cast<std::size_t>(d));
  auto out = make_node<T>(x.shape(), {&x});
  Buffer<T> norms(static_cast<std::size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    const T* xi = x.values().data() + static_cast<std::size_t>(r) * d;
    T s = 0;
    for (int k = 0; k < d; ++k) s += xi[k] * xi[k];
    const T nrm = std::sqrt(s + T(1e-12));
    norms[static_cast<std::size_t>(r)] = nrm;
    for (int k = 0; k < d; ++k) out->value[static_cast<std::size_t>(r) * d + k] = xi[k] / nrm;
  }
  if (out->requires_grad) {
    Node<T>*o = out.get(), *px = x.node();
    out->backward_fn = [o, px, rows, d, norms = std::move(norms)] {
      T* g = grad_of(px);
      for (int r = 0; r < rows; ++r) {
        const T* y = o->value.data() + static_cast<std::size_t>(r) * d;
        const T* dy = o->grad.data() + static_cast<std::size_t>(r) * d;
        T dot = 0;
        for (int k = 0; k < d; ++k) dot += y[k] * dy[k];
        for (int k = 0; k < d; ++k) g[static_cast<std::size_t>(r) * d + k] += (dy[k] - y[k] * dot) / norms[static_cast<std::size_t>(r)];
      }
    };
  }
  return finish(out, "l2_normalize");
}

// ---------------------------------------------------------------------------
// convolutional

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride) {
  if (x.rank() != 4 || w.rank() != 2 || w.dim(1) != x.dim(1) * 9 || (stride != 1 && stride != 2) ||
      (b.defined() && b.numel() != static_cast<std::size_t>(w.dim(0)))) {
    shape_error("conv2d", shape_str(x.shape()) + " * " + shape_str(w.shape()));
  }
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), Co = w.dim(0);
  const int Ho = (H - 1) / stride + 1, Wo = (W - 1) / stride + 1;
  const int K = C * 9, P = Ho * Wo;
  auto out = make_node<T>({N, Co, Ho, Wo}, {&x, &w, b.defined() ? &b : nullptr});
  Buffer<T> cols(static_cast<std::size_t>(N) * K * P, T(0));
  for (int n = 0; n < N; ++n) {
    T* col = cols.data() + static_cast<std::size_t>(n) * K * P;
    const T* xn = x.values().data() + static_cast<std::size_t>(n) * C * H * W;
    for (int c = 0; c < C; ++c) {
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          T* row = col + static_cast<std::size_t>(c * 9 + ky * 3 + kx) * P;
          for (int oy = 0; oy < Ho; ++oy) {
            const int iy = oy * stride + ky - 1;
            if (iy < 0 || iy >= H) continue;
            for (int ox = 0; ox < Wo; ++ox) {
              const int ix = ox * stride + kx - 1;
              if (ix >= 0 && ix < W) row[oy * Wo + ox] = xn[(static_cast<std::size_t>(c) * H + iy) * W + ix];
            }
          }
        }
      }
    }
    MapR<T> Y(out->value.data() + static_cast<std::size_t>(n) * Co * P, Co, P);
    Y.noalias() = CMapR<T>(w.values().data(), Co, K) * CMapR<T>(col, K, P);
    if (b.defined()) Y.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(b.values().data(), Co);
  }
  if (out->requires_grad) {
    Node<T>*o = out.get(), *px = x.node(), *pw = w.node(), *pb = b.defined() ? b.node() : nullptr;
    out->backward_fn = [o, px, pw, pb, cols = std::move(cols), N, C, H, W, Co, Ho, Wo, K, P, stride] {
      T* gx = grad_of(px);
      T* gw = grad_of(pw);
      T* gb = grad_of(pb);
      MatR<T> dcol;
      for (int n = 0; n < N; ++n) {
        CMapR<T> dY(o->grad.data() + static_cast<std::size_t>(n) * Co * P, Co, P);
        const T* col = cols.data() + static_cast<std::size_t>(n) * K * P;
        if (gw) MapR<T>(gw, Co, K).noalias() += dY * CMapR<T>(col, K, P).transpose();
        if (gb) Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(gb, Co) += dY.rowwise().sum();
        if (gx) {
          dcol.noalias() = CMapR<T>(pw->value.data(), Co, K).transpose() * dY;
          T* gxn = gx + static_cast<std::size_t>(n) * C * H * W;
          for (int c = 0; c < C; ++c) {
            for (int ky = 0; ky < 3; ++ky) {
              for (int kx = 0; kx < 3; ++kx) {
                const T* row = dcol.data() + static_cast<std::size_t>(c * 9 + ky * 3 + kx) * P;
                for (int oy = 0; oy < Ho; ++oy) {
                  const int iy = oy * stride + ky - 1;
                  if (iy < 0 || iy >= H) continue;
                  for (int ox = 0; ox < Wo; ++ox) {
                    const int ix = ox * stride + kx - 1;
                    if (ix >= 0 && ix < W) gxn[(static_cast<std::size_t>(c) * H + iy) * W + ix] += row[oy * Wo + ox];
                  }
                }
              }
            }
          }
        }
      }
    };
  }
  return finish(out, "conv2d");
}

template <typename T>
Var<T> max_pool2d(const Var<T>& x) {
  if (x.rank() != 4 || x.dim(2) < 2 || x.dim(3) < 2) shape_error("max_pool2d", shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), Ho = H / 2, Wo = W / 2;
  auto out = make_node<T>({N, C, Ho, Wo}, {&x});
  std::vector<std::uint32_t> arg(out->size());
  for (int nc = 0; nc < N * C; ++nc) {
    const T* xi = x.values().data() + static_cast<std::size_t>(nc) * H * W;
    for (int oy = 0; oy < Ho; ++oy) {
      for (int ox = 0; ox < Wo; ++ox) {
        std::uint32_t best = static_cast<std::uint32_t>((2 * oy) * W + 2 * ox);
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const auto idx = static_cast<std::uint32_t>((2 * oy + dy) * W + 2 * ox + dx);
            if (xi[idx] > xi[best]) best = idx;
          }
        }
        const std::size_t o = (static_cast<std::size_t>(nc) * Ho + oy) * Wo + ox;
        out->value[o] = xi[best];
        arg[o] = best;
      }
    }
  }
  if (out->requires_grad) {
    Node<T>*o = out.get(), *px = x.node();
    out->backward_fn = [o, px, arg = std::move(arg), HW = H * W, HoWo = Ho * Wo] {
      T* g = grad_of(px);
      for (std::size_t i = 0; i < o->size(); ++i) g[(i / HoWo) * HW + arg[i]] += o->grad[i];
    };
  }
  return finish(out, "max_pool2d");
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  if (x.rank() != 4) shape_error("global_avg_pool", shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  auto out = make_node<T>({N, C}, {&x});
  for (int nc = 0; nc < N * C; ++nc) {
    T s = 0;
    for (int p = 0; p < HW; ++p) s += x.values()[static_cast<std::size_t>(nc) * HW + p];
    out->value[static_cast<std::size_t>(nc)] = s / static_cast<T>(HW);
  }
  if (out->requires_grad) {
    Node<T>*o = out.get(), *px = x.node();
    out->backward_fn = [o, px, HW] {
      T* g = grad_of(px);
      for (std::size_t nc = 0; nc < o->size(); ++nc) {
        const T d = o->grad[nc] / static_cast<T>(HW);
        for (int p = 0; p < HW; ++p) g[nc * HW + p] += d;
      }
    };
  }
  return finish(out, "global_avg_pool");
}

// ---------------------------------------------------------------------------
// normalisation

namespace {

constexpr double kNormEps = 1e-5;

// Shared core: normalise `rows` groups of `n` values; channel of element k in
// a group is k / per_channel.
template <typename T>
Var<T> norm_impl(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int rows, int n, int per_channel,
                 const char* op) {
  auto out = make_node<T>(x.shape(), {&x, &gamma, &beta});
  Buffer<T> xhat(x.numel()), rstd(static_cast<std::size_t>(rows));
  const T* g = gamma.values().data();
  const T* bt = beta.values().data();
  for (int r = 0; r < rows; ++r) {
    const T* xi = x.values().data() + static_cast<std::size_t>(r) * n;
    T mean = 0;
    for (int k = 0; k < n; ++k) mean += xi[k];
    mean /= static_cast<T>(n);
    T var = 0;
    for (int k = 0; k < n; ++k) var += (xi[k] - mean) * (xi[k] - mean);
    var /= static_cast<T>(n);
    const T rs = T(1) / std::sqrt(var + static_cast<T>(kNormEps));
    rstd[static_cast<std::size_t>(r)] = rs;
    for (int k = 0; k < n; ++k) {
      const std::size_t i = static_cast<std::size_t>(r) * n + k;
      xhat[i] = (xi[k] - mean) * rs;
      out->value[i] = xhat[i] * g[k / per_channel] + bt[k / per_channel];
    }
  }
  if (out->requires_grad) {
    Node<T>*o = out.get(), *px = x.node(), *pg = gamma.node(), *pb = beta.node();
    out->backward_fn = [o, px, pg, pb, xhat = std::move(xhat), rstd = std::move(rstd), rows, n, per_channel] {
      T* gx = grad_of(px);
      T* gg = grad_of(pg);
      T* gb = grad_of(pb);
      Buffer<T> dxhat(static_cast<std::size_t>(n));
      for (int r = 0; r < rows; ++r) {
        const std::size_t base = static_cast<std::size_t>(r) * n;
        T m1 = 0, m2 = 0;
        for (int k = 0; k < n; ++k) {
          const T dy = o->grad[base + k];
          const int ch = k / per_channel;
          if (gg) gg[ch] += dy * xhat[base + k];
          if (gb) gb[ch] += dy;
          dxhat[static_cast<std::size_t>(k)] = dy * pg->value[static_cast<std::size_t>(ch)];
          m1 += dxhat[static_cast<std::size_t>(k)];
          m2 += dxhat[static_cast<std::size_t>(k)] * xhat[base + k];
        }
        if (!gx) continue;
        m1 /= static_cast<T>(n);
        m2 /= static_cast<T>(n);
        for (int k = 0; k < n; ++k) {
          gx[base + k] += rstd[static_cast<std::size_t>(r)] * (dxhat[static_cast<std::size_t>(k)] - m1 - xhat[base + k] * m2);
        }
      }
    };
  }
  return finish(out, op);
}

}  // namespace

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta) {
  const int d = x.dim(-1);
  if (gamma.numel() != static_cast<std::size_t>(d) || beta.numel() != static_cast<std::size_t>(d)) {
    shape_error("layer_norm", shape_str(x.shape()) + " with gamma " + shape_str(gamma.shape()));
  }
  return norm_impl(x, gamma, beta, static_cast<int>(x.numel() / static_cast<std::size_t>(d)), d, 1, "layer_norm");
}

template <typename T>
Var<T> layer_norm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta) {
  if (x.rank() != 4 || gamma.numel() != static_cast<std::size_t>(x.dim(1)) || beta.numel() != gamma.numel()) {
    shape_error("layer_norm2d", shape_str(x.shape()) + " with gamma " + shape_str(gamma.shape()));
  }
  const int hw = x.dim(2) * x.dim(3);
  return norm_impl(x, gamma, beta, x.dim(0), x.dim(1) * hw, hw, "layer_norm2d");
}

// ---------------------------------------------------------------------------
// sequence

template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const int> ids, Shape out_prefix) {
  if (table.rank() != 2 || numel(out_prefix) != ids.size()) {
    shape_error("embedding", shape_str(table.shape()) + " for " + std::to_string(ids.size()) + " ids");
  }
  const int V = table.dim(0), D = table.dim(1);
  for (int id : ids) {
    if (id < 0 || id >= V) throw Error(ErrorKind::UnknownToken, "embedding id " + std::to_string(id));
  }
  out_prefix.push_back(D);
  auto out = make_node<T>(std::move(out_prefix), {&table});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(ids[i]) * D, D, out->value.begin() + static_cast<std::ptrdiff_t>(i) * D);
  }
  if (out->requires_grad) {
    Node<T>*o = out.get(), *pt = table.node();
    out->backward_fn = [o, pt, idv = std::vector<int>(ids.begin(), ids.end()), D] {
      T* g = grad_of(pt);
      for (std::size_t i = 0; i < idv.size(); ++i) {
        for (int k = 0; k < D; ++k) g[static_cast<std::size_t>(idv[i]) * D + k] += o->grad[i * D + k];
      }
    };
  }
  return finish(out, "embedding");
}

template <typename T>
Var<T> softmax(const Var<T>& x) {
  const int K = x.dim(-1);
  const int rows = static_cast<int>(x.numel() / static_cast<std::size_t>(K));
  auto out = make_node<T>(x.shape(), {&x});
  for (int r = 0; r < rows; ++r) {
    const T* xi = x.values().data() + static_cast<std::size_t>(r) * K;
    T* yi = out->value.data() + static_cast<std::size_t>(r) * K;
    const T mx = *std::max_element(xi, xi + K);
    T s = 0;
    for (int k = 0; k < K; ++k) s += (yi[k] = std::exp(xi[k] - mx));
    for (int k = 0; k < K; ++k) yi[k] /= s;
  }
  if (out->requires_grad) {
    Node<T>*o = out.get(), *px = x.node();
    out->backward_fn = [o, px, rows, K] {
      T* g = grad_of(px);
      for (int r = 0; r < rows; ++r) {
        const T* y = o->value.data() + static_cast<std::size_t>(r) * K;
        const T* dy = o->grad.data() + static_cast<std::size_t>(r) * K;
        T dot = 0;
        for (int k = 0; k < K; ++k) dot += y[k] * dy[k];
        for (int k = 0; k < K; ++k) g[static_cast<std::size_t>(r) * K + k] += y[k] * (dy[k] - dot);
      }
    };
  }
  return finish(out, "softmax");
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads, const AttentionMask& mask) {
  if (q.rank() != 3 || k.rank() != 3 || v.shape() != k.shape() || q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2) ||
      heads < 1 || q.dim(2) % heads != 0) {
    shape_error("attention", shape_str(q.shape()) + " / " + shape_str(k.shape()) + " / " + shape_str(v.shape()));
  }
  const int B = q.dim(0), Lq = q.dim(1), Lk = k.dim(1), D = q.dim(2), dh = D / heads;
  if (!mask.key_lengths.empty() && static_cast<int>(mask.key_lengths.size()) != B) {
    shape_error("attention", "key_lengths size");
  }
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  auto out = make_node<T>({B, Lq, D}, {&q, &k, &v});
  // attention probabilities [B, heads, Lq, Lk]
  Buffer<T> probs(static_cast<std::size_t>(B) * heads * Lq * Lk);
  MatR<T> scores(Lq, Lk);
  for (int b = 0; b < B; ++b) {
    const int klen = mask.key_lengths.empty() ? Lk : std::clamp(mask.key_lengths[static_cast<std::size_t>(b)], 1, Lk);
    const std::size_t qo = static_cast<std::size_t>(b) * Lq * D, ko = static_cast<std::size_t>(b) * Lk * D;
    for (int h = 0; h < heads; ++h) {
      CStridedMap<T> Q(q.values().data() + qo + h * dh, Lq, dh, Eigen::OuterStride<>(D));
      CStridedMap<T> Kh(k.values().data() + ko + h * dh, Lk, dh, Eigen::OuterStride<>(D));
      CStridedMap<T> Vh(v.values().data() + ko + h * dh, Lk, dh, Eigen::OuterStride<>(D));
      scores.noalias() = (Q * Kh.transpose()) * inv_sqrt;
      MapR<T> Pm(probs.data() + (static_cast<std::size_t>(b) * heads + h) * Lq * Lk, Lq, Lk);
      for (int i = 0; i < Lq; ++i) {
        const int limit = mask.causal ? std::min(klen, i + 1) : klen;
        T mx = scores(i, 0);
        for (int j = 1; j < limit; ++j) mx = std::max(mx, scores(i, j));
        T s = 0;
        for (int j = 0; j < Lk; ++j) {
          const T e = j < limit ? std::exp(scores(i, j) - mx) : T(0);
          Pm(i, j) = e;
          s += e;
        }
        Pm.row(i) /= s;
      }
      StridedMap<T>(out->value.data() + qo + h * dh, Lq, dh, Eigen::OuterStride<>(D)).noalias() = Pm * Vh;
    }
  }
  if (out->requires_grad) {
    Node<T>*o = out.get(), *pq = q.node(), *pk = k.node(), *pv = v.node();
    out->backward_fn = [o, pq, pk, pv, probs = std::move(probs), B, Lq, Lk, D, dh, heads, inv_sqrt] {
      T* gq = grad_of(pq);
      T* gk = grad_of(pk);
      T* gv = grad_of(pv);
      MatR<T> dP(Lq, Lk), dS(Lq, Lk);
      for (int b = 0; b < B; ++b) {
        const std::size_t qo = static_cast<std::size_t>(b) * Lq * D, ko = static_cast<std::size_t>(b) * Lk * D;
        for (int h = 0; h < heads; ++h) {
          CMapR<T> Pm(probs.data() + (static_cast<std::size_t>(b) * heads + h) * Lq * Lk, Lq, Lk);
          CStridedMap<T> dO(o->grad.data() + qo + h * dh, Lq, dh, Eigen::OuterStride<>(D));
          CStridedMap<T> Q(pq->value.data() + qo + h * dh, Lq, dh, Eigen::OuterStride<>(D));
          CStridedMap<T> Kh(pk->value.data() + ko + h * dh, Lk, dh, Eigen::OuterStride<>(D));
          CStridedMap<T> Vh(pv->value.data() + ko + h * dh, Lk, dh, Eigen::OuterStride<>(D));
          if (gv) StridedMap<T>(gv + ko + h * dh, Lk, dh, Eigen::OuterStride<>(D)).noalias() += Pm.transpose() * dO;
          if (!gq && !gk) continue;
          dP.noalias() = dO * Vh.transpose();
          for (int i = 0; i < Lq; ++i) {
            const T dot = Pm.row(i).dot(dP.row(i));
            dS.row(i) = (Pm.row(i).array() * (dP.row(i).array() - dot)).matrix() * inv_sqrt;
          }
          if (gq) StridedMap<T>(gq + qo + h * dh, Lq, dh, Eigen::OuterStride<>(D)).noalias() += dS * Kh;
          if (gk) StridedMap<T>(gk + ko + h * dh, Lk, dh, Eigen::OuterStride<>(D)).noalias() += dS.transpose() * Q;
        }
      }
    };
  }
  return finish(out, "attention");
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> targets) {
  if (logits.rank() != 2 || static_cast<std::size_t>(logits.dim(0)) != targets.size()) {
    shape_error("cross_entropy", shape_str(logits.shape()) + " vs " + std::to_string(targets.size()) + " targets");
  }
  const int S = logits.dim(0), K = logits.dim(1);
  Buffer<T> probs(logits.numel());
  T total = 0;
  int valid = 0;
  for (int s = 0; s < S; ++s) {
    const T* z = logits.values().data() + static_cast<std::size_t>(s) * K;
    T* p = probs.data() + static_cast<std::size_t>(s) * K;
    const T mx = *std::max_element(z, z + K);
    T sum = 0;
    for (int k = 0; k < K; ++k) sum += (p[k] = std::exp(z[k] - mx));
    for (int k = 0; k < K; ++k) p[k] /= sum;
    const int y = targets[static_cast<std::size_t>(s)];
    if (y < 0) continue;
    if (y >= K) throw Error(ErrorKind::LabelOutOfRange, "target " + std::to_string(y) + " >= " + std::to_string(K));
    total += -(z[y] - mx - std::log(sum));
    ++valid;
  }
  auto out = make_node<T>({1}, {&logits});
  out->value[0] = valid ? total / static_cast<T>(valid) : T(0);
  if (out->requires_grad && valid) {
    Node<T>*o = out.get(), *pl = logits.node();
    out->backward_fn = [o, pl, probs = std::move(probs), tg = std::vector<int>(targets.begin(), targets.end()), S, K, valid] {
      T* g = grad_of(pl);
      const T scale = o->grad[0] / static_cast<T>(valid);
      for (int s = 0; s < S; ++s) {
        const int y = tg[static_cast<std::size_t>(s)];
        if (y < 0) continue;
        for (int k = 0; k < K; ++k) {
          g[static_cast<std::size_t>(s) * K + k] += scale * (probs[static_cast<std::size_t>(s) * K + k] - (k == y ? T(1) : T(0)));
        }
      }
    };
  }
  return finish(out, "cross_entropy");
}

template <typename T>
Var<T> fused_scalar(T value, std::vector<Var<T>> inputs, std::vector<std::vector<T>> local_grads, const char* op) {
  if (inputs.size() != local_grads.size()) shape_error(op, "gradient list size");
  auto out = std::make_shared<Node<T>>();
  out->shape = {1};
  out->value = {value};
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].requires_grad() || g_no_grad) continue;
    if (local_grads[i].size() != inputs[i].numel()) shape_error(op, "local gradient size");
    out->requires_grad = true;
  }
  if (out->requires_grad) {
    std::vector<Node<T>*> raw;
    for (auto& in : inputs) {
      out->parents.push_back(in.ptr());
      raw.push_back(in.node());
    }
    Node<T>* o = out.get();
    out->backward_fn = [o, raw = std::move(raw), lg = std::move(local_grads)] {
      const T up = o->grad[0];
      for (std::size_t i = 0; i < raw.size(); ++i) {
        if (T* g = grad_of(raw[i])) {
          for (std::size_t k = 0; k < lg[i].size(); ++k) g[k] += up * lg[i][k];
        }
      }
    };
  }
  return finish(out, op);
}

// ---------------------------------------------------------------------------

#define RADICALIGN_INSTANTIATE(T)                                                                   \
  template class Var<T>;                                                                            \
  template void backward<T>(const Var<T>&);                                                         \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                             \
  template Var<T> scale<T>(const Var<T>&, T);                                                       \
  template Var<T> relu<T>(const Var<T>&);                                                           \
  template Var<T> reshape<T>(const Var<T>&, Shape);                                                 \
  template Var<T> add_positional<T>(const Var<T>&, const Var<T>&);                                  \
  template Var<T> gather_rows<T>(const Var<T>&, std::span<const int>);                              \
  template Var<T> concat_rows<T>(const Var<T>&, const Var<T>&);                                     \
  template Var<T> to_sequence<T>(const Var<T>&);                                                    \
  template Var<T> dense<T>(const Var<T>&, const Var<T>&, const Var<T>&);                            \
  template Var<T> matmul_nt<T>(const Var<T>&, const Var<T>&);                                       \
  template Var<T> l2_normalize<T>(const Var<T>&);                                                   \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, int);                      \
  template Var<T> max_pool2d<T>(const Var<T>&);                                                     \
  template Var<T> global_avg_pool<T>(const Var<T>&);                                                \
  template Var<T> layer_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&);                       \
  template Var<T> layer_norm2d<T>(const Var<T>&, const Var<T>&, const Var<T>&);                     \
  template Var<T> embedding<T>(const Var<T>&, std::span<const int>, Shape);                         \
  template Var<T> softmax<T>(const Var<T>&);                                                        \
  template Var<T> attention<T>(const Var<T>&, const Var<T>&, const Var<T>&, int, const AttentionMask&); \
  template Var<T> cross_entropy<T>(const Var<T>&, std::span<const int>);                           \
  template Var<T> fused_scalar<T>(T, std::vector<Var<T>>, std::vector<std::vector<T>>, const char*);

RADICALIGN_INSTANTIATE(float)
RADICALIGN_INSTANTIATE(double)

#undef RADICALIGN_INSTANTIATE

}  // namespace radicalign::tensor
