#include "kunpeng/diffcore.hpp"

#include "kunpeng/binary_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

namespace kp::ad {

namespace {

thread_local bool g_grad_enabled = true;

template <typename S>
using NodePtr = std::shared_ptr<Node<S>>;

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

template <typename S>
bool needs(const NodePtr<S>& p) {
  return p && p->requires_grad;
}

template <typename S>
Var<S> make_result(Tensor<S> value, std::initializer_list<Var<S>> inputs,
                   std::function<void(Node<S>&)> fn) {
  bool track = false;
  if (g_grad_enabled) {
    for (const auto& v : inputs) track = track || (v && v.requires_grad());
  }
  auto node = std::make_shared<Node<S>>();
  node->value = std::move(value);
  if (track) {
    node->requires_grad = true;
    for (const auto& v : inputs) node->parents.push_back(v ? v.node() : nullptr);
    node->backward = std::move(fn);
  }
  return Var<S>(std::move(node));
}

template <typename S>
bool any_requires_grad(std::initializer_list<Var<S>> inputs) {
  if (!g_grad_enabled) return false;
  for (const auto& v : inputs) {
    if (v && v.requires_grad()) return true;
  }
  return false;
}

// -- im2col ---------------------------------------------------------------

struct ConvGeom {
  Index h, w, kh, kw, stride, pad, ho, wo;
  PadMode mode;

  Index taps() const { return kh * kw; }
  Index out_positions() const { return ho * wo; }
};

ConvGeom conv_geom(Index h, Index w, Index kh, Index kw, Index stride, Index pad, PadMode mode) {
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  const Index ho_num = h + 2 * pad - kh;
  const Index wo_num = w + 2 * pad - kw;
  if (ho_num < 0 || wo_num < 0) throw ShapeError("conv2d: kernel larger than padded input");
  return ConvGeom{h, w, kh, kw, stride, pad, ho_num / stride + 1, wo_num / stride + 1, mode};
}

inline Index wrap(Index i, Index n) {
  i %= n;
  return i < 0 ? i + n : i;
}

// Source column for output column ow and kernel column j, or -1 for padding.
inline Index source_col(const ConvGeom& g, Index ow, Index j) {
  Index iw = ow * g.stride - g.pad + j;
  if (g.mode == PadMode::cyclic_lon) return wrap(iw, g.w);
  return (iw < 0 || iw >= g.w) ? -1 : iw;
}

// cols(p, c * K + k) = x[c0 + c] sampled at tap k of output position p.
template <typename S>
void im2col(const S* x, const ConvGeom& g, Index c0, Index cn, S* cols) {
  const Index P = g.out_positions();
  const Index plane = g.h * g.w;
  for (Index c = 0; c < cn; ++c) {
    const S* src = x + (c0 + c) * plane;
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        S* col = cols + ((c * g.kh + i) * g.kw + j) * P;
        for (Index oh = 0; oh < g.ho; ++oh) {
          const Index ih = oh * g.stride - g.pad + i;
          S* out = col + oh * g.wo;
          if (ih < 0 || ih >= g.h) {
            std::fill(out, out + g.wo, S(0));
            continue;
          }
          const S* row = src + ih * g.w;
          for (Index ow = 0; ow < g.wo; ++ow) {
            const Index iw = source_col(g, ow, j);
            out[ow] = iw < 0 ? S(0) : row[iw];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add cols back into x.
template <typename S>
void col2im(const S* cols, const ConvGeom& g, Index c0, Index cn, S* x) {
  const Index P = g.out_positions();
  const Index plane = g.h * g.w;
  for (Index c = 0; c < cn; ++c) {
    S* dst = x + (c0 + c) * plane;
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        const S* col = cols + ((c * g.kh + i) * g.kw + j) * P;
        for (Index oh = 0; oh < g.ho; ++oh) {
          const Index ih = oh * g.stride - g.pad + i;
          if (ih < 0 || ih >= g.h) continue;
          S* row = dst + ih * g.w;
          const S* in = col + oh * g.wo;
          for (Index ow = 0; ow < g.wo; ++ow) {
            const Index iw = source_col(g, ow, j);
            if (iw >= 0) row[iw] += in[ow];
          }
        }
      }
    }
  }
}

// -- bilinear taps ------------------------------------------------------------

template <typename S>
struct Tap {
  Index idx[4];
  S w[4];
  S dwy[4];
  S dwx[4];

  S sample(const S* plane) const {
    return w[0] * plane[idx[0]] + w[1] * plane[idx[1]] + w[2] * plane[idx[2]] +
           w[3] * plane[idx[3]];
  }
  S d_row(const S* plane) const {
    return dwy[0] * plane[idx[0]] + dwy[1] * plane[idx[1]] + dwy[2] * plane[idx[2]] +
           dwy[3] * plane[idx[3]];
  }
  S d_col(const S* plane) const {
    return dwx[0] * plane[idx[0]] + dwx[1] * plane[idx[1]] + dwx[2] * plane[idx[2]] +
           dwx[3] * plane[idx[3]];
  }
  void scatter(S* plane, S g) const {
    for (int i = 0; i < 4; ++i) plane[idx[i]] += g * w[i];
  }
};

// A coordinate is an integer base plus a real offset. Floor and fraction come
// from the offset alone, so they do not depend on the base: shifting the
// input by whole columns reproduces the same weights bit for bit.
template <typename S>
Tap<S> make_tap(Index row_base, S row_off, Index col_base, S col_off, Index H, Index W, LatBoundary lat) {
  Tap<S> t{};
  const S col_floor = std::floor(col_off);
  const S fx = col_off - col_floor;
  // fmod is exact, and keeps huge offsets inside Index range.
  Index x0 = (col_base + static_cast<Index>(std::fmod(col_floor, static_cast<S>(W)))) % W;
  if (x0 < 0) x0 += W;
  const Index x1 = (x0 + 1) % W;

  const S row_floor = std::floor(row_off);
  S fy = row_off - row_floor;
  const S row_span = static_cast<S>(2 * H + 2);
  Index y0 = row_base + static_cast<Index>(std::clamp(row_floor, -row_span, row_span)), y1;
  S row_active = S(1);
  bool valid0 = true, valid1 = true;
  if (lat == LatBoundary::clamp) {
    // Clamped rows stop responding to the row coordinate.
    if (y0 < 0 || (y0 == 0 && fy == S(0))) {
      y0 = 0;
      fy = S(0);
      row_active = S(0);
    } else if (y0 >= H - 1) {
      y0 = H - 1;
      fy = S(0);
      row_active = S(0);
    }
    y1 = std::min(y0 + 1, H - 1);
  } else {
    y1 = y0 + 1;
    valid0 = y0 >= 0 && y0 < H;
    valid1 = y1 >= 0 && y1 < H;
  }

  const S v0 = valid0 ? S(1) : S(0);
  const S v1 = valid1 ? S(1) : S(0);
  const Index r0 = valid0 ? y0 * W : 0;
  const Index r1 = valid1 ? y1 * W : 0;
  t.idx[0] = r0 + x0;
  t.idx[1] = r0 + x1;
  t.idx[2] = r1 + x0;
  t.idx[3] = r1 + x1;
  t.w[0] = v0 * (S(1) - fy) * (S(1) - fx);
  t.w[1] = v0 * (S(1) - fy) * fx;
  t.w[2] = v1 * fy * (S(1) - fx);
  t.w[3] = v1 * fy * fx;
  t.dwy[0] = -v0 * (S(1) - fx) * row_active;
  t.dwy[1] = -v0 * fx * row_active;
  t.dwy[2] = v1 * (S(1) - fx) * row_active;
  t.dwy[3] = v1 * fx * row_active;
  t.dwx[0] = -v0 * (S(1) - fy);
  t.dwx[1] = v0 * (S(1) - fy);
  t.dwx[2] = -v1 * fy;
  t.dwx[3] = v1 * fy;
  return t;
}

// GEMMs whose rows are grid cells run on row counts padded to whole Eigen
// row panels (48 covers float and double with AVX-512). Leftover rows
// otherwise go through a kernel with a different summation order, and a
// longitude shift would move cells between the two paths.
constexpr Index kRowPanel = 48;

template <typename S, typename Lhs, typename Rhs, typename Dst>
void cell_rows_product(const Lhs& a, const Rhs& b, Dst&& dst) {
  const Index rows = a.rows();
  const Index padded = (rows + kRowPanel - 1) / kRowPanel * kRowPanel;
  if (padded == rows) {
    dst.noalias() = a * b;
    return;
  }
  Mat<S> ap(padded, a.cols());
  ap.topRows(rows) = a;
  ap.bottomRows(padded - rows).setZero();
  Mat<S> y(padded, b.cols());
  y.noalias() = ap * b;
  dst = y.topRows(rows);
}

template <typename S>
S gelu_value(S x) {
  constexpr S k = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
  constexpr S c = static_cast<S>(0.044715);
  return S(0.5) * x * (S(1) + std::tanh(k * (x + c * x * x * x)));
}

template <typename S>
S gelu_deriv(S x) {
  constexpr S k = static_cast<S>(0.7978845608028654);
  constexpr S c = static_cast<S>(0.044715);
  const S t = std::tanh(k * (x + c * x * x * x));
  return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * k * (S(1) + S(3) * c * x * x);
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

template <typename S>
void backward(const Var<S>& root) {
  if (root.size() != 1) {
    throw ShapeError("backward: root must be scalar, got " + shape_string(root.shape()));
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order without recursion.
  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> seen;
  std::vector<std::pair<Node<S>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<S>* parent = node->parents[next++].get();
      if (parent && parent->requires_grad && seen.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer().array() += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

// -- elementwise --------------------------------------------------------------

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<S> out(a.shape(), typename Tensor<S>::Array(a.value().array() + b.value().array()));
  return make_result<S>(std::move(out), {a, b}, [](Node<S>& self) {
    for (auto& p : self.parents) {
      if (needs(p)) p->grad_buffer().array() += self.grad.array();
    }
  });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<S> out(a.shape(), typename Tensor<S>::Array(a.value().array() - b.value().array()));
  return make_result<S>(std::move(out), {a, b}, [](Node<S>& self) {
    if (needs(self.parents[0])) self.parents[0]->grad_buffer().array() += self.grad.array();
    if (needs(self.parents[1])) self.parents[1]->grad_buffer().array() -= self.grad.array();
  });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<S> out(a.shape(), typename Tensor<S>::Array(a.value().array() * b.value().array()));
  return make_result<S>(std::move(out), {a, b}, [](Node<S>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (needs(pa)) pa->grad_buffer().array() += self.grad.array() * pb->value.array();
    if (needs(pb)) pb->grad_buffer().array() += self.grad.array() * pa->value.array();
  });
}

template <typename S>
Var<S> scale(const Var<S>& a, S s) {
  Tensor<S> out(a.shape(), typename Tensor<S>::Array(a.value().array() * s));
  return make_result<S>(std::move(out), {a}, [s](Node<S>& self) {
    self.parents[0]->grad_buffer().array() += self.grad.array() * s;
  });
}

template <typename S>
Var<S> sum(const Var<S>& a) {
  return make_result<S>(Tensor<S>::scalar(a.value().array().sum()), {a}, [](Node<S>& self) {
    self.parents[0]->grad_buffer().array() += self.grad[0];
  });
}

template <typename S>
Var<S> gelu(const Var<S>& x) {
  Tensor<S> out(x.shape(), typename Tensor<S>::Array(x.value().array().unaryExpr(&gelu_value<S>)));
  return make_result<S>(std::move(out), {x}, [](Node<S>& self) {
    auto& px = self.parents[0];
    px->grad_buffer().array() += self.grad.array() * px->value.array().unaryExpr(&gelu_deriv<S>);
  });
}

template <typename S>
Var<S> concat_channels(std::span<const Var<S>> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  Shape shape = parts[0].shape();
  Index channels = 0;
  Index total = 0;
  for (const auto& p : parts) {
    Shape trailing = p.shape();
    if (trailing.size() != shape.size() ||
        !std::equal(trailing.begin() + 1, trailing.end(), shape.begin() + 1)) {
      throw ShapeError("concat_channels: trailing shape mismatch " + shape_string(p.shape()));
    }
    channels += p.shape()[0];
    total += p.size();
  }
  shape[0] = channels;
  typename Tensor<S>::Array data(total);
  Index at = 0;
  bool track = false;
  for (const auto& p : parts) {
    data.segment(at, p.size()) = p.value().array();
    at += p.size();
    track = track || p.requires_grad();
  }

  auto node = std::make_shared<Node<S>>();
  node->value = Tensor<S>(shape, std::move(data));
  if (track && g_grad_enabled) {
    node->requires_grad = true;
    for (const auto& p : parts) node->parents.push_back(p.node());
    node->backward = [](Node<S>& self) {
      Index off = 0;
      for (auto& p : self.parents) {
        const Index n = p->value.size();
        if (needs(p)) p->grad_buffer().array() += self.grad.array().segment(off, n);
        off += n;
      }
    };
  }
  return Var<S>(std::move(node));
}

// -- channel mixing -----------------------------------------------------------

template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& weight, const Var<S>& bias) {
  const Index cin = x.shape()[0];
  if (weight.value().rank() != 2 || weight.shape()[1] != cin) {
    throw ShapeError("linear: weight " + shape_string(weight.shape()) + " vs input " +
                     shape_string(x.shape()));
  }
  const Index cout = weight.shape()[0];
  if (bias && bias.size() != cout) throw ShapeError("linear: bias size mismatch");
  Shape out_shape = x.shape();
  out_shape[0] = cout;
  Tensor<S> out(out_shape);
  const Index P = x.size() / cin;
  typename Tensor<S>::ConstMatrixMap W(weight.value().data(), cin, cout);  // = weight^T
  auto Y = out.cols();
  cell_rows_product<S>(x.value().cols(), W, Y);
  if (bias) Y.rowwise() += bias.value().array().matrix().transpose();
  (void)P;
  return make_result<S>(std::move(out), {x, weight, bias}, [cin, cout](Node<S>& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    auto& pb = self.parents[2];
    auto dY = self.grad.cols();
    typename Tensor<S>::ConstMatrixMap W(pw->value.data(), cin, cout);
    if (needs(px)) px->grad_buffer().cols().noalias() += dY * W.transpose();
    if (needs(pw)) {
      typename Tensor<S>::MatrixMap dW(pw->grad_buffer().data(), cin, cout);
      dW.noalias() += px->value.cols().transpose() * dY;
    }
    if (needs(pb)) pb->grad_buffer().array() += dY.colwise().sum().transpose().array();
  });
}

template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gain, const Var<S>& bias) {
  const Index C = x.shape()[0];
  if (C < 2) throw ShapeError("layer_norm: need at least 2 channels for a degenerate-free norm");
  if (gain.size() != C || bias.size() != C) throw ShapeError("layer_norm: gain/bias size");
  auto X = x.value().cols();  // (P, C)
  const S eps = static_cast<S>(kLayerNormEps);
  // Per-cell scalar loops: Eigen's packet rsqrt and partial reductions
  // round differently from the scalar tail, which would make the result
  // depend on where a cell sits in memory.
  const Index P = X.rows();
  Mat<S> xhat(P, C);
  Eigen::Array<S, Eigen::Dynamic, 1> inv(P);
  for (Index p = 0; p < P; ++p) {
    S acc = S(0);
    for (Index c = 0; c < C; ++c) acc += X(p, c);
    const S mean = acc / static_cast<S>(C);
    S sq = S(0);
    for (Index c = 0; c < C; ++c) {
      const S d = X(p, c) - mean;
      xhat(p, c) = d;
      sq += d * d;
    }
    inv[p] = S(1) / std::sqrt(sq / static_cast<S>(C) + eps);
    for (Index c = 0; c < C; ++c) xhat(p, c) *= inv[p];
  }

  Tensor<S> out(x.shape());
  auto Y = out.cols();
  Y = (xhat.array().rowwise() * gain.value().array().transpose()).matrix();
  Y.rowwise() += bias.value().array().matrix().transpose();

  if (!any_requires_grad<S>({x, gain, bias})) return Var<S>(std::move(out));
  return make_result<S>(
      std::move(out), {x, gain, bias},
      [xhat = std::move(xhat), inv = std::move(inv)](Node<S>& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        auto dY = self.grad.cols();
        if (needs(pg)) pg->grad_buffer().array() += (dY.array() * xhat.array()).colwise().sum().transpose();
        if (needs(pb)) pb->grad_buffer().array() += dY.array().colwise().sum().transpose();
        if (needs(px)) {
          Mat<S> dxhat = (dY.array().rowwise() * pg->value.array().transpose()).matrix();
          Eigen::Array<S, Eigen::Dynamic, 1> m1 = dxhat.rowwise().mean().array();
          Eigen::Array<S, Eigen::Dynamic, 1> m2 =
              (dxhat.array() * xhat.array()).rowwise().mean();
          Mat<S> dx = dxhat.array().colwise() - m1;
          dx.array() -= xhat.array().colwise() * m2;
          dx.array().colwise() *= inv;
          px->grad_buffer().cols() += dx;
        }
      });
}

// -- convolutions -------------------------------------------------------------

template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias,
              const Conv2dOptions& opts) {
  if (x.value().rank() != 3 || weight.value().rank() != 4) {
    throw ShapeError("conv2d: expected (C,H,W) input and 4-d kernel");
  }
  const Index cin = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  const Index cout = weight.shape()[0];
  const Index groups = opts.groups;
  if (groups < 1 || cin % groups || cout % groups || weight.shape()[1] != cin / groups) {
    throw ShapeError("conv2d: kernel " + shape_string(weight.shape()) + " incompatible with input " +
                     shape_string(x.shape()) + " and groups " + std::to_string(groups));
  }
  if (bias && bias.size() != cout) throw ShapeError("conv2d: bias size mismatch");
  const ConvGeom g = conv_geom(H, W, weight.shape()[2], weight.shape()[3], opts.stride,
                               opts.padding, opts.pad_mode);
  const Index K = g.taps(), P = g.out_positions();
  const Index cig = cin / groups, cog = cout / groups;

  Mat<S> cols(P, cin * K);
  im2col(x.value().data(), g, 0, cin, cols.data());

  Tensor<S> out(Shape{cout, g.ho, g.wo});
  auto Y = out.cols();
  for (Index gi = 0; gi < groups; ++gi) {
    typename Tensor<S>::ConstMatrixMap Wg(weight.value().data() + gi * cog * cig * K, cig * K, cog);
    cell_rows_product<S>(cols.middleCols(gi * cig * K, cig * K), Wg, Y.middleCols(gi * cog, cog));
  }
  if (bias) Y.rowwise() += bias.value().array().matrix().transpose();

  if (!any_requires_grad<S>({x, weight, bias})) return Var<S>(std::move(out));
  return make_result<S>(
      std::move(out), {x, weight, bias},
      [g, cols = std::move(cols), groups, cig, cog, cin](Node<S>& self) {
        auto& px = self.parents[0];
        auto& pw = self.parents[1];
        auto& pb = self.parents[2];
        const Index K = g.taps(), P = g.out_positions();
        auto dY = self.grad.cols();
        if (needs(pb)) pb->grad_buffer().array() += dY.colwise().sum().transpose().array();
        Mat<S> dcols;
        if (needs(px)) dcols.resize(P, cin * K);
        for (Index gi = 0; gi < groups; ++gi) {
          auto dYg = dY.middleCols(gi * cog, cog);
          if (needs(pw)) {
            typename Tensor<S>::MatrixMap dW(pw->grad_buffer().data() + gi * cog * cig * K, cig * K, cog);
            dW.noalias() += cols.middleCols(gi * cig * K, cig * K).transpose() * dYg;
          }
          if (needs(px)) {
            typename Tensor<S>::ConstMatrixMap Wg(pw->value.data() + gi * cog * cig * K, cig * K, cog);
            dcols.middleCols(gi * cig * K, cig * K).noalias() = dYg * Wg.transpose();
          }
        }
        if (needs(px)) col2im(dcols.data(), g, 0, cin, px->grad_buffer().data());
      });
}

template <typename S>
Var<S> conv2d_transpose(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, Index stride) {
  if (x.value().rank() != 3 || weight.value().rank() != 4 || weight.shape()[0] != x.shape()[0]) {
    throw ShapeError("conv2d_transpose: kernel " + shape_string(weight.shape()) +
                     " incompatible with input " + shape_string(x.shape()));
  }
  const Index cin = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  const Index cout = weight.shape()[1], kh = weight.shape()[2], kw = weight.shape()[3];
  if (bias && bias.size() != cout) throw ShapeError("conv2d_transpose: bias size mismatch");
  const Index Ho = (H - 1) * stride + kh, Wo = (W - 1) * stride + kw;
  // Geometry of the forward conv this operator is the adjoint of.
  const ConvGeom g = conv_geom(Ho, Wo, kh, kw, stride, 0, PadMode::zero);
  const Index K = g.taps();

  typename Tensor<S>::ConstMatrixMap Wm(weight.value().data(), cout * K, cin);
  Mat<S> cols(H * W, cout * K);
  cell_rows_product<S>(x.value().cols(), Wm.transpose(), cols);
  Tensor<S> out(Shape{cout, Ho, Wo});
  col2im(cols.data(), g, 0, cout, out.data());
  if (bias) out.cols().rowwise() += bias.value().array().matrix().transpose();

  return make_result<S>(std::move(out), {x, weight, bias}, [g, cin, cout](Node<S>& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    auto& pb = self.parents[2];
    const Index K = g.taps(), P = g.out_positions();
    if (needs(pb)) pb->grad_buffer().array() += self.grad.cols().colwise().sum().transpose().array();
    Mat<S> dcols(P, cout * K);
    im2col(self.grad.data(), g, 0, cout, dcols.data());
    if (needs(px)) {
      typename Tensor<S>::ConstMatrixMap Wm(pw->value.data(), cout * K, cin);
      px->grad_buffer().cols().noalias() += dcols * Wm;
    }
    if (needs(pw)) {
      typename Tensor<S>::MatrixMap dW(pw->grad_buffer().data(), cout * K, cin);
      dW.noalias() += dcols.transpose() * px->value.cols();
    }
  });
}

// -- sampling -----------------------------------------------------------------

template <typename S>
Var<S> bilinear_sample_cyclic(const Var<S>& x, const Var<S>& coords, LatBoundary lat) {
  if (x.value().rank() != 3 || coords.value().rank() != 2 || coords.shape()[1] != 2) {
    throw ShapeError("bilinear_sample_cyclic: expected (C,H,W) and (P,2)");
  }
  const Index C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  const Index P = coords.shape()[0];
  const Index plane = H * W;
  std::vector<Tap<S>> taps(static_cast<std::size_t>(P));
  const S* cd = coords.value().data();
  for (Index p = 0; p < P; ++p) taps[p] = make_tap<S>(0, cd[2 * p], 0, cd[2 * p + 1], H, W, lat);

  Tensor<S> out(Shape{C, P});
  for (Index c = 0; c < C; ++c) {
    const S* src = x.value().data() + c * plane;
    for (Index p = 0; p < P; ++p) out[c * P + p] = taps[p].sample(src);
  }
  return make_result<S>(std::move(out), {x, coords},
                        [taps = std::move(taps), C, P, plane](Node<S>& self) {
                          auto& px = self.parents[0];
                          auto& pc = self.parents[1];
                          const S* g = self.grad.data();
                          if (needs(px)) {
                            S* dx = px->grad_buffer().data();
                            for (Index c = 0; c < C; ++c) {
                              for (Index p = 0; p < P; ++p) taps[p].scatter(dx + c * plane, g[c * P + p]);
                            }
                          }
                          if (needs(pc)) {
                            S* dc = pc->grad_buffer().data();
                            const S* xv = px->value.data();
                            for (Index c = 0; c < C; ++c) {
                              for (Index p = 0; p < P; ++p) {
                                dc[2 * p] += g[c * P + p] * taps[p].d_row(xv + c * plane);
                                dc[2 * p + 1] += g[c * P + p] * taps[p].d_col(xv + c * plane);
                              }
                            }
                          }
                        });
}

template <typename S>
Var<S> deform_conv_cyclic(const Var<S>& x, const Var<S>& offsets, const Var<S>& weight,
                          const Var<S>& bias, const DeformOptions& opts) {
  if (x.value().rank() != 3) throw ShapeError("deform_conv_cyclic: expected (C,H,W) input");
  const Index C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  const Index G = opts.heads, kh = opts.kernel_h, kw = opts.kernel_w, K = kh * kw;
  if (G < 1 || C % G) throw ShapeError("deform_conv_cyclic: channels not divisible by heads");
  const Index Cg = C / G;
  if (weight.shape() != Shape{C, Cg, kh, kw}) {
    throw ShapeError("deform_conv_cyclic: weight " + shape_string(weight.shape()));
  }
  if (offsets.shape() != Shape{G * K * 3, H, W}) {
    throw ShapeError("deform_conv_cyclic: offsets " + shape_string(offsets.shape()));
  }
  if (bias && bias.size() != C) throw ShapeError("deform_conv_cyclic: bias size mismatch");
  const Index P = H * W;

  // Per (head, tap, position): bilinear tap and modulation.
  std::vector<Tap<S>> taps(static_cast<std::size_t>(G * K * P));
  std::vector<S> mod(static_cast<std::size_t>(G * K * P));
  std::vector<S> dmod(opts.modulation == Modulation::sigmoid ? mod.size() : 0);
  const S* off = offsets.value().data();
  for (Index gi = 0; gi < G; ++gi) {
    for (Index k = 0; k < K; ++k) {
      const Index ki = k / kw, kj = k % kw;
      const S* dy = off + ((gi * K + k) * 3 + 0) * P;
      const S* dx = off + ((gi * K + k) * 3 + 1) * P;
      const S* mr = off + ((gi * K + k) * 3 + 2) * P;
      for (Index h = 0; h < H; ++h) {
        for (Index w = 0; w < W; ++w) {
          const Index p = h * W + w;
          const Index t = (gi * K + k) * P + p;
          taps[t] = make_tap<S>(h + ki - kh / 2, dy[p], w + kj - kw / 2, dx[p], H, W, opts.lat);
          if (opts.modulation == Modulation::linear) {
            mod[t] = S(1) + mr[p];
          } else {
            const S s = S(1) / (S(1) + std::exp(-mr[p]));
            mod[t] = S(2) * s;
            dmod[t] = S(2) * s * (S(1) - s);
          }
        }
      }
    }
  }

  Mat<S> cols(P, C * K);
  const S* xv = x.value().data();
  for (Index gi = 0; gi < G; ++gi) {
    for (Index k = 0; k < K; ++k) {
      const Tap<S>* tk = taps.data() + (gi * K + k) * P;
      const S* mk = mod.data() + (gi * K + k) * P;
      for (Index cl = 0; cl < Cg; ++cl) {
        const Index c = gi * Cg + cl;
        const S* src = xv + c * P;
        S* col = cols.data() + (c * K + k) * P;
        for (Index p = 0; p < P; ++p) col[p] = mk[p] * tk[p].sample(src);
      }
    }
  }

  Tensor<S> out(Shape{C, H, W});
  auto Y = out.cols();
  for (Index gi = 0; gi < G; ++gi) {
    typename Tensor<S>::ConstMatrixMap Wg(weight.value().data() + gi * Cg * Cg * K, Cg * K, Cg);
    cell_rows_product<S>(cols.middleCols(gi * Cg * K, Cg * K), Wg, Y.middleCols(gi * Cg, Cg));
  }
  if (bias) Y.rowwise() += bias.value().array().matrix().transpose();

  if (!any_requires_grad<S>({x, offsets, weight, bias})) return Var<S>(std::move(out));
  return make_result<S>(
      std::move(out), {x, offsets, weight, bias},
      [taps = std::move(taps), mod = std::move(mod), dmod = std::move(dmod),
       cols = std::move(cols), G, K, Cg, C, P](Node<S>& self) {
        auto& px = self.parents[0];
        auto& po = self.parents[1];
        auto& pw = self.parents[2];
        auto& pb = self.parents[3];
        auto dY = self.grad.cols();
        if (needs(pb)) pb->grad_buffer().array() += dY.colwise().sum().transpose().array();
        Mat<S> dcols(P, C * K);
        for (Index gi = 0; gi < G; ++gi) {
          auto dYg = dY.middleCols(gi * Cg, Cg);
          typename Tensor<S>::ConstMatrixMap Wg(pw->value.data() + gi * Cg * Cg * K, Cg * K, Cg);
          if (needs(pw)) {
            typename Tensor<S>::MatrixMap dW(pw->grad_buffer().data() + gi * Cg * Cg * K, Cg * K, Cg);
            dW.noalias() += cols.middleCols(gi * Cg * K, Cg * K).transpose() * dYg;
          }
          dcols.middleCols(gi * Cg * K, Cg * K).noalias() = dYg * Wg.transpose();
        }
        if (!needs(px) && !needs(po)) return;
        const S* xv = px->value.data();
        S* dx = needs(px) ? px->grad_buffer().data() : nullptr;
        S* doff = needs(po) ? po->grad_buffer().data() : nullptr;
        std::vector<S> mod_acc(static_cast<std::size_t>(P));
        for (Index gi = 0; gi < G; ++gi) {
          for (Index k = 0; k < K; ++k) {
            const Tap<S>* tk = taps.data() + (gi * K + k) * P;
            const S* mk = mod.data() + (gi * K + k) * P;
            S* d_row = doff ? doff + ((gi * K + k) * 3 + 0) * P : nullptr;
            S* d_col = doff ? doff + ((gi * K + k) * 3 + 1) * P : nullptr;
            std::fill(mod_acc.begin(), mod_acc.end(), S(0));
            for (Index cl = 0; cl < Cg; ++cl) {
              const Index c = gi * Cg + cl;
              const S* src = xv + c * P;
              const S* dcol = dcols.data() + (c * K + k) * P;
              for (Index p = 0; p < P; ++p) {
                const S gs = dcol[p] * mk[p];
                if (dx) tk[p].scatter(dx + c * P, gs);
                if (doff) {
                  d_row[p] += gs * tk[p].d_row(src);
                  d_col[p] += gs * tk[p].d_col(src);
                  mod_acc[p] += dcol[p] * tk[p].sample(src);
                }
              }
            }
            if (doff) {
              S* d_mod = doff + ((gi * K + k) * 3 + 2) * P;
              const S* dm = dmod.empty() ? nullptr : dmod.data() + (gi * K + k) * P;
              for (Index p = 0; p < P; ++p) d_mod[p] += dm ? mod_acc[p] * dm[p] : mod_acc[p];
            }
          }
        }
      });
}

// -- losses -------------------------------------------------------------------

template <typename S>
Var<S> weighted_l1(const Var<S>& pred, const Tensor<S>& truth, const Tensor<S>& cell_weight) {
  require_same_shape(pred.value(), truth, "weighted_l1");
  require_same_shape(pred.value(), cell_weight, "weighted_l1 weights");
  const S n = static_cast<S>(pred.size());
  typename Tensor<S>::Array resid = pred.value().array() - truth.array();
  const S value = (cell_weight.array() * resid.abs()).sum() / n;
  if (!any_requires_grad<S>({pred})) return Var<S>(Tensor<S>::scalar(value));
  typename Tensor<S>::Array slope = cell_weight.array() * resid.sign() / n;
  return make_result<S>(Tensor<S>::scalar(value), {pred},
                        [slope = std::move(slope)](Node<S>& self) {
                          self.parents[0]->grad_buffer().array() += slope * self.grad[0];
                        });
}

// -- parameters ---------------------------------------------------------------

template <typename S>
Var<S> ParamStore<S>::add(const std::string& label, Tensor<S> init) {
  if (params_.count(label)) throw std::invalid_argument("duplicate parameter label " + label);
  Var<S> v(std::move(init), true);
  params_.emplace(label, v);
  return v;
}

template <typename S>
const Var<S>& ParamStore<S>::get(const std::string& label) const {
  auto it = params_.find(label);
  if (it == params_.end()) throw std::out_of_range("unknown parameter " + label);
  return it->second;
}

template <typename S>
std::size_t ParamStore<S>::erase_prefix(const std::string& prefix) {
  std::size_t n = 0;
  for (auto it = params_.begin(); it != params_.end();) {
    if (it->first.rfind(prefix, 0) == 0) {
      it = params_.erase(it);
      ++n;
    } else {
      ++it;
    }
  }
  return n;
}

template <typename S>
void ParamStore<S>::zero_grad() {
  for (auto& [_, v] : params_) const_cast<Var<S>&>(v).zero_grad();
}

template <typename S>
Index ParamStore<S>::scalar_count() const {
  Index n = 0;
  for (const auto& [_, v] : params_) n += v.size();
  return n;
}

template <typename S>
TensorMap snapshot(const ParamStore<S>& store) {
  TensorMap out;
  for (const auto& [label, v] : store) out.emplace(label, v.value().template cast<float>());
  return out;
}

template <typename S>
void assign(ParamStore<S>& store, const TensorMap& values, bool allow_extra) {
  for (const auto& [label, v] : store) {
    auto it = values.find(label);
    if (it == values.end()) throw std::runtime_error("checkpoint lacks parameter " + label);
    if (it->second.shape() != v.shape()) {
      throw ShapeError("checkpoint shape mismatch for " + label + ": " +
                       shape_string(it->second.shape()) + " vs " + shape_string(v.shape()));
    }
  }
  if (!allow_extra) {
    for (const auto& [label, _] : values) {
      if (!store.contains(label)) throw std::runtime_error("checkpoint has unknown parameter " + label);
    }
  }
  for (const auto& [label, v] : store) {
    Var<S>(v).mutable_value() = values.at(label).template cast<S>();  // copies share the node
  }
}

void save_checkpoint(const std::string& path, const TensorMap& params) {
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& [label, t] : params) {
    if (!t.array().allFinite()) throw std::runtime_error("refusing to save non-finite parameter " + label);
    manifest.push_back(label);
  }
  const std::string text = manifest.dump();
  io::Writer w;
  w.bytes("KPCK");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(params.size()));
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text);
  for (const auto& [label, t] : params) {
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (Index d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    w.f32(t.data(), static_cast<std::size_t>(t.size()));
  }
  w.commit(path);
}

TensorMap load_checkpoint(const std::string& path) {
  io::Reader r(path);
  if (r.bytes(4, "magic") != "KPCK") throw io::FormatError("bad checkpoint magic", 0);
  const auto version_at = r.offset();
  if (r.u32("version") != 1) throw io::FormatError("unsupported checkpoint version", version_at);
  const std::uint32_t count = r.u32("count");
  const std::uint32_t len = r.u32("manifest length");
  const auto manifest_at = r.offset();
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(r.bytes(len, "manifest"));
  } catch (const nlohmann::json::exception& e) {
    throw io::FormatError(std::string("bad checkpoint manifest: ") + e.what(), manifest_at);
  }
  if (!manifest.is_array() || manifest.size() != count) {
    throw io::FormatError("manifest does not list " + std::to_string(count) + " labels", manifest_at);
  }
  TensorMap out;
  for (const auto& label : manifest) {
    const std::uint32_t rank = r.u32("rank");
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.u32("dim"));
    Tensor<float> t(shape);
    r.f32(t.data(), static_cast<std::size_t>(t.size()), "parameter data");
    out.emplace(label.get<std::string>(), std::move(t));
  }
  if (r.remaining() != 0) throw io::FormatError("trailing bytes in checkpoint", r.offset());
  return out;
}

template <typename S>
Tensor<S> init_fan_in(Shape shape, Index fan_in, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  return random_uniform<S>(std::move(shape), rng, -bound, bound);
}

#define KP_INSTANTIATE(S)                                                                        \
  template void backward<S>(const Var<S>&);                                                     \
  template Var<S> add<S>(const Var<S>&, const Var<S>&);                                         \
  template Var<S> sub<S>(const Var<S>&, const Var<S>&);                                         \
  template Var<S> mul<S>(const Var<S>&, const Var<S>&);                                         \
  template Var<S> scale<S>(const Var<S>&, S);                                                   \
  template Var<S> sum<S>(const Var<S>&);                                                        \
  template Var<S> gelu<S>(const Var<S>&);                                                       \
  template Var<S> concat_channels<S>(std::span<const Var<S>>);                                  \
  template Var<S> linear<S>(const Var<S>&, const Var<S>&, const Var<S>&);                       \
  template Var<S> layer_norm<S>(const Var<S>&, const Var<S>&, const Var<S>&);                   \
  template Var<S> conv2d<S>(const Var<S>&, const Var<S>&, const Var<S>&, const Conv2dOptions&); \
  template Var<S> conv2d_transpose<S>(const Var<S>&, const Var<S>&, const Var<S>&, Index);      \
  template Var<S> bilinear_sample_cyclic<S>(const Var<S>&, const Var<S>&, LatBoundary);         \
  template Var<S> deform_conv_cyclic<S>(const Var<S>&, const Var<S>&, const Var<S>&,            \
                                        const Var<S>&, const DeformOptions&);                   \
  template Var<S> weighted_l1<S>(const Var<S>&, const Tensor<S>&, const Tensor<S>&);            \
  template class ParamStore<S>;                                                                 \
  template TensorMap snapshot<S>(const ParamStore<S>&);                                         \
  template void assign<S>(ParamStore<S>&, const TensorMap&, bool);                              \
  template Tensor<S> init_fan_in<S>(Shape, Index, Rng&);

KP_INSTANTIATE(float)
KP_INSTANTIATE(double)

}  // namespace kp::ad
