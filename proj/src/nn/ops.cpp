#include "d2g/nn/ops.hpp"

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>
#include <algorithm>
#include <cmath>
#include <numbers>

D2G_NN_BEGIN
namespace nn {

namespace {

using MatR = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

using detail::make_result;
using detail::Node;

Buffer& g_of(const Tensor& t) { return t.node()->ensure_grad(); }
bool wants(const Tensor& t) { return t.defined() && t.requires_grad(); }

int norm_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("axis out of range");
  return axis;
}

// ---------------------------------------------------------------- broadcasting

struct Broadcast {
  Shape out;
  std::vector<std::int64_t> sa, sb;  // element strides into a and b per output dim
};

std::vector<std::int64_t> contiguous_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (int k = static_cast<int>(s.size()) - 2; k >= 0; --k) st[k] = st[k + 1] * s[k + 1];
  return st;
}

Broadcast plan_broadcast(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Broadcast p;
  p.out.assign(r, 1);
  p.sa.assign(r, 0);
  p.sb.assign(r, 0);
  const auto sta = contiguous_strides(a), stb = contiguous_strides(b);
  for (std::size_t k = 0; k < r; ++k) {
    const std::ptrdiff_t ka = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(r - a.size());
    const std::ptrdiff_t kb = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(r - b.size());
    const std::int64_t da = ka >= 0 ? a[ka] : 1, db = kb >= 0 ? b[kb] : 1;
    if (da != db && da != 1 && db != 1)
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    p.out[k] = std::max(da, db);
    p.sa[k] = (ka >= 0 && da != 1) ? sta[ka] : 0;
    p.sb[k] = (kb >= 0 && db != 1) ? stb[kb] : 0;
  }
  return p;
}

template <typename F>
void for_each_broadcast(const Broadcast& p, F&& f) {
  const std::size_t r = p.out.size();
  const std::int64_t total = numel(p.out);
  if (total == 0) return;
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<std::int64_t> idx(r, 0);
  const std::int64_t inner = p.out[r - 1], ia_step = p.sa[r - 1], ib_step = p.sb[r - 1];
  std::int64_t ia = 0, ib = 0, k = 0;
  while (k < total) {
    std::int64_t a = ia, b = ib;
    for (std::int64_t c = 0; c < inner; ++c, ++k, a += ia_step, b += ib_step) f(k, a, b);
    // carry over the outer dimensions
    int d = static_cast<int>(r) - 2;
    for (; d >= 0; --d) {
      ++idx[d];
      ia += p.sa[d];
      ib += p.sb[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.sa[d] * p.out[d];
      ib -= p.sb[d] * p.out[d];
      idx[d] = 0;
    }
    if (d < 0) break;
  }
}

enum class BinOp { Add, Sub, Mul, Div };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op) {
  const auto& av = a.data();
  const auto& bv = b.data();
  if (a.shape() == b.shape()) {
    const std::size_t n = av.size();
    Buffer out(n);
    switch (op) {
      case BinOp::Add:
        for (std::size_t k = 0; k < n; ++k) out[k] = av[k] + bv[k];
        break;
      case BinOp::Sub:
        for (std::size_t k = 0; k < n; ++k) out[k] = av[k] - bv[k];
        break;
      case BinOp::Mul:
        for (std::size_t k = 0; k < n; ++k) out[k] = av[k] * bv[k];
        break;
      case BinOp::Div:
        for (std::size_t k = 0; k < n; ++k) out[k] = av[k] / bv[k];
        break;
    }
    return make_result(a.shape(), std::move(out), {a, b}, [a, b, op](Node* self) {
      return [self, a, b, op] {
        const auto& g = self->grad;
        const std::size_t n = g.size();
        const auto& av = a.data();
        const auto& bv = b.data();
        if (wants(a)) {
          auto& ga = g_of(a);
          switch (op) {
            case BinOp::Add:
            case BinOp::Sub:
              for (std::size_t k = 0; k < n; ++k) ga[k] += g[k];
              break;
            case BinOp::Mul:
              for (std::size_t k = 0; k < n; ++k) ga[k] += g[k] * bv[k];
              break;
            case BinOp::Div:
              for (std::size_t k = 0; k < n; ++k) ga[k] += g[k] / bv[k];
              break;
          }
        }
        if (wants(b)) {
          auto& gb = g_of(b);
          switch (op) {
            case BinOp::Add:
              for (std::size_t k = 0; k < n; ++k) gb[k] += g[k];
              break;
            case BinOp::Sub:
              for (std::size_t k = 0; k < n; ++k) gb[k] -= g[k];
              break;
            case BinOp::Mul:
              for (std::size_t k = 0; k < n; ++k) gb[k] += g[k] * av[k];
              break;
            case BinOp::Div:
              for (std::size_t k = 0; k < n; ++k) gb[k] -= g[k] * av[k] / (bv[k] * bv[k]);
              break;
          }
        }
      };
    });
  }

  const Broadcast p = plan_broadcast(a.shape(), b.shape());
  Buffer out(static_cast<std::size_t>(numel(p.out)));
  for_each_broadcast(p, [&](std::int64_t k, std::int64_t ia, std::int64_t ib) {
    const Scalar x = av[ia], y = bv[ib];
    Scalar r = 0;
    switch (op) {
      case BinOp::Add:
        r = x + y;
        break;
      case BinOp::Sub:
        r = x - y;
        break;
      case BinOp::Mul:
        r = x * y;
        break;
      case BinOp::Div:
        r = x / y;
        break;
    }
    out[k] = r;
  });
  return make_result(p.out, std::move(out), {a, b}, [a, b, op, p](Node* self) {
    return [self, a, b, op, p] {
      const auto& g = self->grad;
      const auto& av = a.data();
      const auto& bv = b.data();
      const bool wa = wants(a), wb = wants(b);
      Scalar* ga = wa ? g_of(a).data() : nullptr;
      Scalar* gb = wb ? g_of(b).data() : nullptr;
      for_each_broadcast(p, [&](std::int64_t k, std::int64_t ia, std::int64_t ib) {
        const Scalar gk = g[k];
        switch (op) {
          case BinOp::Add:
            if (wa) ga[ia] += gk;
            if (wb) gb[ib] += gk;
            break;
          case BinOp::Sub:
            if (wa) ga[ia] += gk;
            if (wb) gb[ib] -= gk;
            break;
          case BinOp::Mul:
            if (wa) ga[ia] += gk * bv[ib];
            if (wb) gb[ib] += gk * av[ia];
            break;
          case BinOp::Div:
            if (wa) ga[ia] += gk / bv[ib];
            if (wb) gb[ib] -= gk * av[ia] / (bv[ib] * bv[ib]);
            break;
        }
      });
    };
  });
}

// Unary map with derivative expressed through input x and output y.
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto& xv = x.data();
  Buffer out(xv.size());
  for (std::size_t k = 0; k < xv.size(); ++k) out[k] = fwd(xv[k]);
  return make_result(x.shape(), std::move(out), {x}, [x, deriv](Node* self) {
    return [self, x, deriv] {
      const auto& g = self->grad;
      const auto& xv = x.data();
      const auto& yv = self->value;
      auto& gx = g_of(x);
      for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k] * deriv(xv[k], yv[k]);
    };
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Mul); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Div); }

Tensor add_scalar(const Tensor& a, Scalar s) {
  return unary(a, [s](Scalar x) { return x + s; }, [](Scalar, Scalar) { return Scalar(1); });
}

Tensor mul_scalar(const Tensor& a, Scalar s) {
  return unary(a, [s](Scalar x) { return x * s; }, [s](Scalar, Scalar) { return s; });
}

Tensor gelu(const Tensor& x) {
  using Arr = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using CMapA = Eigen::Map<const Arr>;
  const std::int64_t n = x.numel();
  constexpr Scalar inv_sqrt2 = Scalar(0.70710678118654752440);
  Buffer out(static_cast<std::size_t>(n));
  const CMapA xv(x.data().data(), n);
  Eigen::Map<Arr>(out.data(), n) = Scalar(0.5) * xv * (Scalar(1) + (xv * inv_sqrt2).erf());
  return make_result(x.shape(), std::move(out), {x}, [x, n](Node* self) {
    return [self, x, n] {
      constexpr Scalar inv_sqrt2pi = Scalar(0.39894228040143267794);
      constexpr Scalar inv_sqrt2 = Scalar(0.70710678118654752440);
      const CMapA xv(x.data().data(), n);
      const CMapA gy(self->grad.data(), n);
      Eigen::Map<Arr> gx(g_of(x).data(), n);
      gx += gy * (Scalar(0.5) * (Scalar(1) + (xv * inv_sqrt2).erf()) +
                  xv * inv_sqrt2pi * (Scalar(-0.5) * xv.square()).exp());
    };
  });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x,
      [](Scalar v) {
        if (v >= 0) return Scalar(1) / (Scalar(1) + std::exp(-v));
        const Scalar e = std::exp(v);
        return e / (Scalar(1) + e);
      },
      [](Scalar, Scalar y) { return y * (Scalar(1) - y); });
}

Tensor softplus(const Tensor& x) {
  return unary(
      x, [](Scalar v) { return v > Scalar(20) ? v : std::log1p(std::exp(v)); },
      [](Scalar v, Scalar) {
        if (v >= 0) return Scalar(1) / (Scalar(1) + std::exp(-v));
        const Scalar e = std::exp(v);
        return e / (Scalar(1) + e);
      });
}

Tensor square(const Tensor& x) {
  return unary(x, [](Scalar v) { return v * v; }, [](Scalar v, Scalar) { return Scalar(2) * v; });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](Scalar v) { return std::exp(v); }, [](Scalar, Scalar y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(x, [](Scalar v) { return std::log(v); }, [](Scalar v, Scalar) { return Scalar(1) / v; });
}

Tensor clamp(const Tensor& x, Scalar lo, Scalar hi) {
  return unary(
      x, [lo, hi](Scalar v) { return std::clamp(v, lo, hi); },
      [lo, hi](Scalar v, Scalar) { return (v > lo && v < hi) ? Scalar(1) : Scalar(0); });
}

Tensor sum(const Tensor& x) {
  Scalar s = 0;
  for (Scalar v : x.data()) s += v;
  return make_result({}, {s}, {x}, [x](Node* self) {
    return [self, x] {
      const Scalar g = self->grad[0];
      for (Scalar& v : g_of(x)) v += g;
    };
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of an empty tensor");
  return mul_scalar(sum(x), Scalar(1) / static_cast<Scalar>(x.numel()));
}

Tensor sum_last(const Tensor& x) {
  if (x.rank() < 1) throw ShapeError("sum_last on a scalar");
  const std::int64_t L = x.dim(-1), M = x.numel() / std::max<std::int64_t>(L, 1);
  Shape s(x.shape().begin(), x.shape().end() - 1);
  Buffer out(static_cast<std::size_t>(M), 0);
  const auto& xv = x.data();
  for (std::int64_t m = 0; m < M; ++m)
    for (std::int64_t l = 0; l < L; ++l) out[m] += xv[m * L + l];
  return make_result(std::move(s), std::move(out), {x}, [x, L, M](Node* self) {
    return [self, x, L, M] {
      auto& gx = g_of(x);
      for (std::int64_t m = 0; m < M; ++m)
        for (std::int64_t l = 0; l < L; ++l) gx[m * L + l] += self->grad[m];
    };
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2) throw ShapeError("linear: weight must be 2-D");
  const std::int64_t N = w.dim(0), K = w.dim(1);
  if (x.rank() < 1 || x.dim(-1) != K)
    throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  if (b.defined() && (b.rank() != 1 || b.dim(0) != N)) throw ShapeError("linear: bad bias shape");
  const std::int64_t M = x.numel() / K;
  Shape s = x.shape();
  s.back() = N;
  Buffer out(static_cast<std::size_t>(M * N));
  {
    CMapR X(x.data().data(), M, K), Wm(w.data().data(), N, K);
    MapR Y(out.data(), M, N);
    Y.noalias() = X * Wm.transpose();
    if (b.defined()) {
      Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> bv(b.data().data(), N);
      Y.rowwise() += bv;
    }
  }
  return make_result(std::move(s), std::move(out), {x, w, b}, [x, w, b, M, N, K](Node* self) {
    return [self, x, w, b, M, N, K] {
      CMapR G(self->grad.data(), M, N);
      if (wants(x)) {
        MapR GX(g_of(x).data(), M, K);
        GX.noalias() += G * CMapR(w.data().data(), N, K);
      }
      if (wants(w)) {
        MapR GW(g_of(w).data(), N, K);
        GW.noalias() += G.transpose() * CMapR(x.data().data(), M, K);
      }
      if (wants(b)) {
        Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> gb(g_of(b).data(), N);
        gb += G.colwise().sum();
      }
    };
  });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) throw ShapeError("bmm: expects [B, M, K] operands");
  const std::int64_t B = a.dim(0), M = a.dim(1), K = a.dim(2);
  const std::int64_t N = transpose_b ? b.dim(1) : b.dim(2);
  if ((transpose_b ? b.dim(2) : b.dim(1)) != K)
    throw ShapeError("bmm: inner dims differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Buffer out(static_cast<std::size_t>(B * M * N));
  for (std::int64_t i = 0; i < B; ++i) {
    CMapR A(a.data().data() + i * M * K, M, K);
    MapR Y(out.data() + i * M * N, M, N);
    if (transpose_b)
      Y.noalias() = A * CMapR(b.data().data() + i * N * K, N, K).transpose();
    else
      Y.noalias() = A * CMapR(b.data().data() + i * K * N, K, N);
  }
  return make_result({B, M, N}, std::move(out), {a, b}, [a, b, B, M, N, K, transpose_b](Node* self) {
    return [self, a, b, B, M, N, K, transpose_b] {
      for (std::int64_t i = 0; i < B; ++i) {
        CMapR G(self->grad.data() + i * M * N, M, N);
        if (wants(a)) {
          MapR GA(g_of(a).data() + i * M * K, M, K);
          if (transpose_b)
            GA.noalias() += G * CMapR(b.data().data() + i * N * K, N, K);
          else
            GA.noalias() += G * CMapR(b.data().data() + i * K * N, K, N).transpose();
        }
        if (wants(b)) {
          CMapR A(a.data().data() + i * M * K, M, K);
          if (transpose_b) {
            MapR GB(g_of(b).data() + i * N * K, N, K);
            GB.noalias() += G.transpose() * A;
          } else {
            MapR GB(g_of(b).data() + i * K * N, K, N);
            GB.noalias() += A.transpose() * G;
          }
        }
      }
    };
  });
}

Tensor softmax_last(const Tensor& x) {
  const std::int64_t L = x.dim(-1), M = x.numel() / L;
  Buffer out(x.data().size());
  const auto& xv = x.data();
  for (std::int64_t m = 0; m < M; ++m) {
    const Scalar* in = xv.data() + m * L;
    Scalar* o = out.data() + m * L;
    const Scalar mx = *std::max_element(in, in + L);
    Scalar s = 0;
    for (std::int64_t l = 0; l < L; ++l) s += o[l] = std::exp(in[l] - mx);
    for (std::int64_t l = 0; l < L; ++l) o[l] /= s;
  }
  return make_result(x.shape(), std::move(out), {x}, [x, L, M](Node* self) {
    return [self, x, L, M] {
      auto& gx = g_of(x);
      const auto& y = self->value;
      const auto& g = self->grad;
      for (std::int64_t m = 0; m < M; ++m) {
        Scalar dot = 0;
        for (std::int64_t l = 0; l < L; ++l) dot += g[m * L + l] * y[m * L + l];
        for (std::int64_t l = 0; l < L; ++l) gx[m * L + l] += y[m * L + l] * (g[m * L + l] - dot);
      }
    };
  });
}

Tensor layer_norm_last(const Tensor& x, const Tensor& gamma, const Tensor& beta, Scalar eps) {
  const std::int64_t C = x.dim(-1), M = x.numel() / C;
  if (gamma.numel() != C || beta.numel() != C) throw ShapeError("layer_norm: affine size mismatch");
  Buffer out(x.data().size()), xhat(x.data().size()), rstd(static_cast<std::size_t>(M));
  const auto& xv = x.data();
  const auto& gv = gamma.data();
  const auto& bv = beta.data();
  for (std::int64_t m = 0; m < M; ++m) {
    const Scalar* in = xv.data() + m * C;
    Scalar mu = 0, var = 0;
    for (std::int64_t c = 0; c < C; ++c) mu += in[c];
    mu /= static_cast<Scalar>(C);
    for (std::int64_t c = 0; c < C; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<Scalar>(C);
    const Scalar r = Scalar(1) / std::sqrt(var + eps);
    rstd[m] = r;
    for (std::int64_t c = 0; c < C; ++c) {
      const Scalar h = (in[c] - mu) * r;
      xhat[m * C + c] = h;
      out[m * C + c] = h * gv[c] + bv[c];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [x, gamma, beta, C, M, xhat = std::move(xhat), rstd = std::move(rstd)](Node* self) mutable {
                       return [self, x, gamma, beta, C, M, xhat = std::move(xhat), rstd = std::move(rstd)] {
                         const auto& g = self->grad;
                         const auto& gv = gamma.data();
                         if (wants(gamma) || wants(beta)) {
                           Scalar* gg = wants(gamma) ? g_of(gamma).data() : nullptr;
                           Scalar* gb = wants(beta) ? g_of(beta).data() : nullptr;
                           for (std::int64_t m = 0; m < M; ++m)
                             for (std::int64_t c = 0; c < C; ++c) {
                               if (gg) gg[c] += g[m * C + c] * xhat[m * C + c];
                               if (gb) gb[c] += g[m * C + c];
                             }
                         }
                         if (!wants(x)) return;
                         auto& gx = g_of(x);
                         for (std::int64_t m = 0; m < M; ++m) {
                           Scalar s1 = 0, s2 = 0;
                           for (std::int64_t c = 0; c < C; ++c) {
                             const Scalar dh = g[m * C + c] * gv[c];
                             s1 += dh;
                             s2 += dh * xhat[m * C + c];
                           }
                           const Scalar invc = Scalar(1) / static_cast<Scalar>(C);
                           for (std::int64_t c = 0; c < C; ++c) {
                             const Scalar dh = g[m * C + c] * gv[c];
                             gx[m * C + c] += rstd[m] * (dh - invc * s1 - xhat[m * C + c] * invc * s2);
                           }
                         }
                       };
                     });
}

// ---------------------------------------------------------------- convolution

namespace {

struct ConvGeom {
  std::int64_t N, C, H, W, O, kh, kw, Ho, Wo;
  int stride, pad;
  Padding mode;
  std::int64_t K() const { return C * kh * kw; }
  std::int64_t P() const { return Ho * Wo; }
};

inline std::int64_t wrap(std::int64_t v, std::int64_t n) {
  v %= n;
  return v < 0 ? v + n : v;
}

// col[K, cols] for images [n0, n1); column index = (n - n0) * P + q.
void im2col(const ConvGeom& g, const Scalar* x, std::int64_t n0, std::int64_t n1, Scalar* col) {
  const std::int64_t P = g.P(), cols = (n1 - n0) * P;
  for (std::int64_t c = 0; c < g.C; ++c)
    for (std::int64_t ki = 0; ki < g.kh; ++ki)
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        Scalar* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::int64_t n = n0; n < n1; ++n) {
          const Scalar* img = x + (n * g.C + c) * g.H * g.W;
          Scalar* dst = row + (n - n0) * P;
          for (std::int64_t oh = 0; oh < g.Ho; ++oh) {
            std::int64_t ih = oh * g.stride - g.pad + ki;
            const bool row_out = ih < 0 || ih >= g.H;
            if (row_out && g.mode == Padding::Zero) {
              std::fill(dst + oh * g.Wo, dst + (oh + 1) * g.Wo, Scalar(0));
              continue;
            }
            if (row_out) ih = wrap(ih, g.H);
            const Scalar* src = img + ih * g.W;
            for (std::int64_t ow = 0; ow < g.Wo; ++ow) {
              std::int64_t iw = ow * g.stride - g.pad + kj;
              if (iw < 0 || iw >= g.W) {
                if (g.mode == Padding::Zero) {
                  dst[oh * g.Wo + ow] = 0;
                  continue;
                }
                iw = wrap(iw, g.W);
              }
              dst[oh * g.Wo + ow] = src[iw];
            }
          }
        }
      }
}

void col2im(const ConvGeom& g, const Scalar* col, std::int64_t n0, std::int64_t n1, Scalar* dx) {
  const std::int64_t P = g.P(), cols = (n1 - n0) * P;
  for (std::int64_t c = 0; c < g.C; ++c)
    for (std::int64_t ki = 0; ki < g.kh; ++ki)
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        const Scalar* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::int64_t n = n0; n < n1; ++n) {
          Scalar* img = dx + (n * g.C + c) * g.H * g.W;
          const Scalar* src = row + (n - n0) * P;
          for (std::int64_t oh = 0; oh < g.Ho; ++oh) {
            std::int64_t ih = oh * g.stride - g.pad + ki;
            if (ih < 0 || ih >= g.H) {
              if (g.mode == Padding::Zero) continue;
              ih = wrap(ih, g.H);
            }
            Scalar* drow = img + ih * g.W;
            for (std::int64_t ow = 0; ow < g.Wo; ++ow) {
              std::int64_t iw = ow * g.stride - g.pad + kj;
              if (iw < 0 || iw >= g.W) {
                if (g.mode == Padding::Zero) continue;
                iw = wrap(iw, g.W);
              }
              drow[iw] += src[oh * g.Wo + ow];
            }
          }
        }
      }
}

constexpr std::int64_t kColBudget = std::int64_t(1) << 23;  // elements per im2col chunk

std::int64_t chunk_images(const ConvGeom& g) {
  return std::clamp<std::int64_t>(kColBudget / std::max<std::int64_t>(1, g.K() * g.P()), 1, g.N);
}

}  // namespace

namespace {

// Stride-1 convolution as a sum of kernel-offset GEMMs over a padded,
// channel-major copy of the input: Xp[C, n * Hp * Wp + i * Wp + j]. Output
// column q = n * Hp * Wp + i * Wp + j reads Xp[:, q + ki * Wp + kj]; columns
// with i >= Ho or j >= Wo are discarded.
struct ShiftGeom {
  ConvGeom g;
  std::int64_t Hp, Wp, img, chunk;
  std::int64_t span(std::int64_t images) const { return images * img - ((g.kh - 1) * Wp + (g.kw - 1)); }
};

ShiftGeom shift_geom(const ConvGeom& g) {
  ShiftGeom s{g, g.H + 2 * g.pad, g.W + 2 * g.pad, 0, 0};
  s.img = s.Hp * s.Wp;
  s.chunk = std::clamp<std::int64_t>(kColBudget / std::max<std::int64_t>(1, std::max(g.C, g.O) * s.img), 1, g.N);
  return s;
}

void pad_images(const ShiftGeom& s, const Scalar* x, std::int64_t n0, std::int64_t n1, Scalar* xp) {
  const ConvGeom& g = s.g;
  const std::int64_t total = (n1 - n0) * s.img;
  for (std::int64_t c = 0; c < g.C; ++c)
    for (std::int64_t n = n0; n < n1; ++n) {
      const Scalar* src = x + (n * g.C + c) * g.H * g.W;
      Scalar* dst = xp + c * total + (n - n0) * s.img;
      for (std::int64_t i = 0; i < s.Hp; ++i) {
        std::int64_t si = i - g.pad;
        Scalar* drow = dst + i * s.Wp;
        if (si < 0 || si >= g.H) {
          if (g.mode == Padding::Zero) {
            std::fill(drow, drow + s.Wp, Scalar(0));
            continue;
          }
          si = wrap(si, g.H);
        }
        const Scalar* srow = src + si * g.W;
        for (std::int64_t j = 0; j < g.pad; ++j) {
          drow[j] = g.mode == Padding::Zero ? Scalar(0) : srow[wrap(j - g.pad, g.W)];
          drow[s.Wp - 1 - j] = g.mode == Padding::Zero ? Scalar(0) : srow[wrap(g.W + g.pad - 1 - j, g.W)];
        }
        std::copy_n(srow, g.W, drow + g.pad);
      }
    }
}

void unpad_add(const ShiftGeom& s, const Scalar* dxp, std::int64_t n0, std::int64_t n1, Scalar* dx) {
  const ConvGeom& g = s.g;
  const std::int64_t total = (n1 - n0) * s.img;
  for (std::int64_t c = 0; c < g.C; ++c)
    for (std::int64_t n = n0; n < n1; ++n) {
      const Scalar* src = dxp + c * total + (n - n0) * s.img;
      Scalar* dst = dx + (n * g.C + c) * g.H * g.W;
      for (std::int64_t i = 0; i < s.Hp; ++i) {
        std::int64_t si = i - g.pad;
        if (si < 0 || si >= g.H) {
          if (g.mode == Padding::Zero) continue;
          si = wrap(si, g.H);
        }
        const Scalar* srow = src + i * s.Wp;
        Scalar* drow = dst + si * g.W;
        for (std::int64_t j = 0; j < s.Wp; ++j) {
          std::int64_t sj = j - g.pad;
          if (sj < 0 || sj >= g.W) {
            if (g.mode == Padding::Zero) continue;
            sj = wrap(sj, g.W);
          }
          drow[sj] += srow[j];
        }
      }
    }
}

// Weights regrouped as [kh * kw][O][C].
Buffer offset_weights(const ConvGeom& g, const Scalar* w) {
  Buffer out(static_cast<std::size_t>(g.kh * g.kw * g.O * g.C));
  for (std::int64_t o = 0; o < g.O; ++o)
    for (std::int64_t c = 0; c < g.C; ++c)
      for (std::int64_t k = 0; k < g.kh * g.kw; ++k) out[(k * g.O + o) * g.C + c] = w[(o * g.C + c) * g.kh * g.kw + k];
  return out;
}

Tensor conv2d_shift(const Tensor& x, const Tensor& w, const Tensor& b, const ConvGeom& g) {
  const ShiftGeom s = shift_geom(g);
  const std::int64_t P = g.P();
  Buffer out(static_cast<std::size_t>(g.N * g.O * P));
  Buffer xp(static_cast<std::size_t>(g.C * s.chunk * s.img)), yp(static_cast<std::size_t>(g.O * s.chunk * s.img));
  const Buffer wk = offset_weights(g, w.data().data());
  for (std::int64_t n0 = 0; n0 < g.N; n0 += s.chunk) {
    const std::int64_t n1 = std::min(g.N, n0 + s.chunk), total = (n1 - n0) * s.img, L = s.span(n1 - n0);
    pad_images(s, x.data().data(), n0, n1, xp.data());
    CMapR X(xp.data(), g.C, total);
    MapR Y(yp.data(), g.O, total);
    for (std::int64_t k = 0; k < g.kh * g.kw; ++k) {
      const std::int64_t off = (k / g.kw) * s.Wp + k % g.kw;
      CMapR Wk(wk.data() + k * g.O * g.C, g.O, g.C);
      if (k == 0) Y.leftCols(L).noalias() = Wk * X.middleCols(off, L);
      else Y.leftCols(L).noalias() += Wk * X.middleCols(off, L);
    }
    for (std::int64_t n = n0; n < n1; ++n)
      for (std::int64_t o = 0; o < g.O; ++o) {
        const Scalar bias = b.defined() ? b.data()[o] : Scalar(0);
        const Scalar* src = yp.data() + o * total + (n - n0) * s.img;
        Scalar* dst = out.data() + (n * g.O + o) * P;
        for (std::int64_t i = 0; i < g.Ho; ++i)
          for (std::int64_t j = 0; j < g.Wo; ++j) dst[i * g.Wo + j] = src[i * s.Wp + j] + bias;
      }
  }
  return make_result({g.N, g.O, g.Ho, g.Wo}, std::move(out), {x, w, b}, [x, w, b, s](Node* self) {
    return [self, x, w, b, s] {
      const ConvGeom& g = s.g;
      const std::int64_t P = g.P();
      const bool wx = wants(x), ww = wants(w), wb = wants(b);
      Buffer xp(ww ? static_cast<std::size_t>(g.C * s.chunk * s.img) : 0);
      Buffer gyp(static_cast<std::size_t>(g.O * s.chunk * s.img));
      Buffer dxp(wx ? static_cast<std::size_t>(g.C * s.chunk * s.img) : 0);
      const Buffer wk = offset_weights(g, w.data().data());
      Buffer dwk(ww ? wk.size() : 0, Scalar(0));
      for (std::int64_t n0 = 0; n0 < g.N; n0 += s.chunk) {
        const std::int64_t n1 = std::min(g.N, n0 + s.chunk), total = (n1 - n0) * s.img, L = s.span(n1 - n0);
        std::fill(gyp.begin(), gyp.end(), Scalar(0));
        for (std::int64_t n = n0; n < n1; ++n)
          for (std::int64_t o = 0; o < g.O; ++o) {
            const Scalar* src = self->grad.data() + (n * g.O + o) * P;
            Scalar* dst = gyp.data() + o * total + (n - n0) * s.img;
            for (std::int64_t i = 0; i < g.Ho; ++i) std::copy_n(src + i * g.Wo, g.Wo, dst + i * s.Wp);
          }
        CMapR GY(gyp.data(), g.O, total);
        if (wb) {
          auto& gb = g_of(b);
          for (std::int64_t o = 0; o < g.O; ++o) gb[o] += GY.row(o).sum();
        }
        if (ww) pad_images(s, x.data().data(), n0, n1, xp.data());
        if (wx) std::fill(dxp.begin(), dxp.end(), Scalar(0));
        for (std::int64_t k = 0; k < g.kh * g.kw; ++k) {
          const std::int64_t off = (k / g.kw) * s.Wp + k % g.kw;
          if (ww) {
            MapR DW(dwk.data() + k * g.O * g.C, g.O, g.C);
            DW.noalias() += GY.leftCols(L) * CMapR(xp.data(), g.C, total).middleCols(off, L).transpose();
          }
          if (wx) {
            MapR DX(dxp.data(), g.C, total);
            DX.middleCols(off, L).noalias() +=
                CMapR(wk.data() + k * g.O * g.C, g.O, g.C).transpose() * GY.leftCols(L);
          }
        }
        if (wx) unpad_add(s, dxp.data(), n0, n1, g_of(x).data());
      }
      if (ww) {
        auto& gw = g_of(w);
        for (std::int64_t o = 0; o < g.O; ++o)
          for (std::int64_t c = 0; c < g.C; ++c)
            for (std::int64_t k = 0; k < g.kh * g.kw; ++k)
              gw[(o * g.C + c) * g.kh * g.kw + k] += dwk[(k * g.O + o) * g.C + c];
      }
    };
  });
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad, Padding mode) {
  if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d: expects NCHW input and OCkk weight");
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), 0, 0, stride, pad, mode};
  if (w.dim(1) != g.C) throw ShapeError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  if (b.defined() && b.numel() != g.O) throw ShapeError("conv2d: bias size mismatch");
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: bad stride/padding");
  if (mode == Padding::Circular && (pad > g.H || pad > g.W)) throw ShapeError("conv2d: circular pad exceeds input");
  g.Ho = (g.H + 2 * pad - g.kh) / stride + 1;
  g.Wo = (g.W + 2 * pad - g.kw) / stride + 1;
  if (g.Ho <= 0 || g.Wo <= 0) throw ShapeError("conv2d: kernel larger than padded input");
  if (stride == 1 && g.kh * g.kw > 1) return conv2d_shift(x, w, b, g);

  const std::int64_t K = g.K(), P = g.P(), chunk = chunk_images(g);
  Buffer out(static_cast<std::size_t>(g.N * g.O * P));
  Buffer col(static_cast<std::size_t>(K * chunk * P)), ymat(static_cast<std::size_t>(g.O * chunk * P));
  CMapR Wm(w.data().data(), g.O, K);
  for (std::int64_t n0 = 0; n0 < g.N; n0 += chunk) {
    const std::int64_t n1 = std::min(g.N, n0 + chunk), cols = (n1 - n0) * P;
    im2col(g, x.data().data(), n0, n1, col.data());
    MapR Y(ymat.data(), g.O, cols);
    Y.noalias() = Wm * CMapR(col.data(), K, cols);
    for (std::int64_t n = n0; n < n1; ++n)
      for (std::int64_t o = 0; o < g.O; ++o) {
        const Scalar bias = b.defined() ? b.data()[o] : Scalar(0);
        const Scalar* src = ymat.data() + o * cols + (n - n0) * P;
        Scalar* dst = out.data() + (n * g.O + o) * P;
        for (std::int64_t q = 0; q < P; ++q) dst[q] = src[q] + bias;
      }
  }
  return make_result({g.N, g.O, g.Ho, g.Wo}, std::move(out), {x, w, b}, [x, w, b, g](Node* self) {
    return [self, x, w, b, g] {
      const std::int64_t K = g.K(), P = g.P(), chunk = chunk_images(g);
      Buffer col(static_cast<std::size_t>(K * chunk * P)), gy(static_cast<std::size_t>(g.O * chunk * P));
      const bool wx = wants(x), ww = wants(w), wb = wants(b);
      Buffer dcol(wx ? col.size() : 0);
      for (std::int64_t n0 = 0; n0 < g.N; n0 += chunk) {
        const std::int64_t n1 = std::min(g.N, n0 + chunk), cols = (n1 - n0) * P;
        for (std::int64_t n = n0; n < n1; ++n)
          for (std::int64_t o = 0; o < g.O; ++o)
            std::copy_n(self->grad.data() + (n * g.O + o) * P, P, gy.data() + o * cols + (n - n0) * P);
        CMapR GY(gy.data(), g.O, cols);
        if (wb) {
          auto& gb = g_of(b);
          for (std::int64_t o = 0; o < g.O; ++o) gb[o] += GY.row(o).sum();
        }
        if (ww) {
          im2col(g, x.data().data(), n0, n1, col.data());
          MapR GW(g_of(w).data(), g.O, K);
          GW.noalias() += GY * CMapR(col.data(), K, cols).transpose();
        }
        if (wx) {
          MapR DC(dcol.data(), K, cols);
          DC.noalias() = CMapR(w.data().data(), g.O, K).transpose() * GY;
          col2im(g, dcol.data(), n0, n1, g_of(x).data());
        }
      }
    };
  });
}

Tensor upsample_nearest2(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("upsample_nearest2: expects NCHW");
  const std::int64_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  Buffer out(static_cast<std::size_t>(NC * 4 * H * W));
  const auto& xv = x.data();
  for (std::int64_t p = 0; p < NC; ++p)
    for (std::int64_t i = 0; i < 2 * H; ++i)
      for (std::int64_t j = 0; j < 2 * W; ++j) out[(p * 2 * H + i) * 2 * W + j] = xv[(p * H + i / 2) * W + j / 2];
  return make_result({x.dim(0), x.dim(1), 2 * H, 2 * W}, std::move(out), {x}, [x, NC, H, W](Node* self) {
    return [self, x, NC, H, W] {
      auto& gx = g_of(x);
      for (std::int64_t p = 0; p < NC; ++p)
        for (std::int64_t i = 0; i < 2 * H; ++i)
          for (std::int64_t j = 0; j < 2 * W; ++j) gx[(p * H + i / 2) * W + j / 2] += self->grad[(p * 2 * H + i) * 2 * W + j];
    };
  });
}

// ---------------------------------------------------------------- layout

Tensor permute(const Tensor& x, const std::vector<int>& dims) {
  const int r = x.rank();
  if (static_cast<int>(dims.size()) != r) throw ShapeError("permute: wrong number of axes");
  std::vector<bool> used(static_cast<std::size_t>(r), false);
  Shape out_shape(static_cast<std::size_t>(r));
  const auto in_strides = contiguous_strides(x.shape());
  std::vector<std::int64_t> src_strides(static_cast<std::size_t>(r));
  for (int k = 0; k < r; ++k) {
    const int d = dims[k];
    if (d < 0 || d >= r || used[d]) throw ShapeError("permute: invalid axis order");
    used[d] = true;
    out_shape[k] = x.shape()[d];
    src_strides[k] = in_strides[d];
  }
  // Reuse the broadcast walker: "a" walks the source, "b" is unused.
  Broadcast p{out_shape, src_strides, std::vector<std::int64_t>(static_cast<std::size_t>(r), 0)};
  Buffer out(x.data().size());
  const auto& xv = x.data();
  for_each_broadcast(p, [&](std::int64_t k, std::int64_t ia, std::int64_t) { out[k] = xv[ia]; });
  return make_result(out_shape, std::move(out), {x}, [x, p](Node* self) {
    return [self, x, p] {
      auto& gx = g_of(x);
      for_each_broadcast(p, [&](std::int64_t k, std::int64_t ia, std::int64_t) { gx[ia] += self->grad[k]; });
    };
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  std::int64_t known = 1;
  int infer = -1;
  for (std::size_t k = 0; k < shape.size(); ++k) {
    if (shape[k] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one inferred axis");
      infer = static_cast<int>(k);
    } else {
      known *= shape[k];
    }
  }
  if (infer >= 0) shape[infer] = known ? x.numel() / known : 0;
  if (numel(shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  Buffer out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x}, [x](Node* self) {
    return [self, x] {
      auto& gx = g_of(x);
      for (std::size_t k = 0; k < gx.size(); ++k) gx[k] += self->grad[k];
    };
  });
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const int r = xs[0].rank();
  axis = norm_axis(axis, r);
  Shape s = xs[0].shape();
  s[axis] = 0;
  for (const Tensor& t : xs) {
    if (t.rank() != r) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < r; ++d)
      if (d != axis && t.shape()[d] != xs[0].shape()[d]) throw ShapeError("concat: shape mismatch");
    s[axis] += t.shape()[axis];
  }
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s[d];
  for (int d = axis + 1; d < r; ++d) inner *= s[d];
  const std::int64_t total_axis = s[axis];
  Buffer out(static_cast<std::size_t>(numel(s)));
  std::int64_t offset = 0;
  for (const Tensor& t : xs) {
    const std::int64_t len = t.shape()[axis] * inner;
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(t.data().data() + o * len, len, out.data() + o * total_axis * inner + offset);
    offset += len;
  }
  return make_result(std::move(s), std::move(out), xs, [xs, axis, outer, inner, total_axis](Node* self) {
    return [self, xs, axis, outer, inner, total_axis] {
      std::int64_t offset = 0;
      for (const Tensor& t : xs) {
        const std::int64_t len = t.shape()[axis] * inner;
        if (wants(t)) {
          auto& gt = g_of(t);
          for (std::int64_t o = 0; o < outer; ++o) {
            const Scalar* src = self->grad.data() + o * total_axis * inner + offset;
            Scalar* dst = gt.data() + o * len;
            for (std::int64_t k = 0; k < len; ++k) dst[k] += src[k];
          }
        }
        offset += len;
      }
    };
  });
}

Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length) {
  const int r = x.rank();
  axis = norm_axis(axis, r);
  const std::int64_t full = x.shape()[axis];
  if (start < 0 || length < 0 || start + length > full) throw ShapeError("slice: range out of bounds");
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= x.shape()[d];
  for (int d = axis + 1; d < r; ++d) inner *= x.shape()[d];
  Shape s = x.shape();
  s[axis] = length;
  Buffer out(static_cast<std::size_t>(outer * length * inner));
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy_n(x.data().data() + (o * full + start) * inner, length * inner, out.data() + o * length * inner);
  return make_result(std::move(s), std::move(out), {x}, [x, outer, inner, full, start, length](Node* self) {
    return [self, x, outer, inner, full, start, length] {
      auto& gx = g_of(x);
      for (std::int64_t o = 0; o < outer; ++o) {
        const Scalar* src = self->grad.data() + o * length * inner;
        Scalar* dst = gx.data() + (o * full + start) * inner;
        for (std::int64_t k = 0; k < length * inner; ++k) dst[k] += src[k];
      }
    };
  });
}

Tensor expand(const Tensor& x, const Shape& shape) {
  Broadcast p = plan_broadcast(x.shape(), shape);
  if (p.out != shape) throw ShapeError("expand: " + shape_str(x.shape()) + " cannot expand to " + shape_str(shape));
  Buffer out(static_cast<std::size_t>(numel(shape)));
  const auto& xv = x.data();
  for_each_broadcast(p, [&](std::int64_t k, std::int64_t ia, std::int64_t) { out[k] = xv[ia]; });
  return make_result(shape, std::move(out), {x}, [x, p](Node* self) {
    return [self, x, p] {
      auto& gx = g_of(x);
      for_each_broadcast(p, [&](std::int64_t k, std::int64_t ia, std::int64_t) { gx[ia] += self->grad[k]; });
    };
  });
}

Tensor dropout(const Tensor& x, Scalar p, Rng& rng) {
  if (p <= 0) return x;
  if (p >= 1) throw Error("dropout: p must be < 1");
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  const Scalar scale = Scalar(1) / (Scalar(1) - p);
  Buffer mask(x.data().size());
  for (Scalar& m : mask) m = keep(rng) ? scale : Scalar(0);
  return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

Tensor take(const Tensor& x, std::span<const std::int64_t> idx) {
  Buffer out(idx.size());
  const auto& xv = x.data();
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= x.numel()) throw ShapeError("take: index out of range");
    out[k] = xv[idx[k]];
  }
  std::vector<std::int64_t> keep(idx.begin(), idx.end());
  return make_result({static_cast<std::int64_t>(idx.size())}, std::move(out), {x}, [x, keep](Node* self) {
    return [self, x, keep] {
      auto& gx = g_of(x);
      for (std::size_t k = 0; k < keep.size(); ++k) gx[keep[k]] += self->grad[k];
    };
  });
}

}  // namespace nn
D2G_NN_END
