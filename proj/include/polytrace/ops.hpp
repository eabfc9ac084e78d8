#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstring>
#include <vector>

#include "polytrace/autograd.hpp"

namespace polytrace::ag {

template <class R>
using MatRM = Eigen::Matrix<R, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class R>
using MatCM = Eigen::Matrix<R, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
template <class R>
using MapRM = Eigen::Map<MatRM<R>>;
template <class R>
using MapCM = Eigen::Map<MatCM<R>>;
template <class R>
using CMapRM = Eigen::Map<const MatRM<R>>;
template <class R>
using CMapCM = Eigen::Map<const MatCM<R>>;

// Graph construction can be switched off for inference-only forwards.
inline bool& grad_enabled() {
  thread_local bool on = true;
  return on;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_enabled()) { grad_enabled() = false; }
  ~NoGradGuard() { grad_enabled() = prev; }
};

template <class R>
Var<R> op_node(Tensor<R> value, std::vector<Var<R>> parents,
               std::function<void(Node<R>&)> backward_fn) {
  if (!grad_enabled()) return leaf<R>(std::move(value), false);
  return make_op<R>(std::move(value), std::move(parents), std::move(backward_fn));
}

// ---------------------------------------------------------------------------
// im2col / col2im. cols is column-major K x N with K = C*kh*kw, N = oh*ow.

inline int conv_out_size(int in, int k, int s, int p) { return (in + 2 * p - k) / s + 1; }

template <class R>
void im2col(const R* src, int C, int H, int W, int kh, int kw, int s, int p, R* cols) {
  const int oh = conv_out_size(H, kh, s, p);
  const int ow = conv_out_size(W, kw, s, p);
  const int K = C * kh * kw;
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      R* col = cols + (static_cast<std::int64_t>(oy) * ow + ox) * K;
      int k = 0;
      for (int c = 0; c < C; ++c) {
        const R* plane = src + static_cast<std::int64_t>(c) * H * W;
        for (int dy = 0; dy < kh; ++dy) {
          const int iy = oy * s - p + dy;
          for (int dx = 0; dx < kw; ++dx, ++k) {
            const int ix = ox * s - p + dx;
            col[k] = (iy >= 0 && iy < H && ix >= 0 && ix < W) ? plane[iy * W + ix] : R(0);
          }
        }
      }
    }
  }
}

template <class R>
void col2im_add(const R* cols, int C, int H, int W, int kh, int kw, int s, int p, R* dst) {
  const int oh = conv_out_size(H, kh, s, p);
  const int ow = conv_out_size(W, kw, s, p);
  const int K = C * kh * kw;
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const R* col = cols + (static_cast<std::int64_t>(oy) * ow + ox) * K;
      int k = 0;
      for (int c = 0; c < C; ++c) {
        R* plane = dst + static_cast<std::int64_t>(c) * H * W;
        for (int dy = 0; dy < kh; ++dy) {
          const int iy = oy * s - p + dy;
          for (int dx = 0; dx < kw; ++dx, ++k) {
            const int ix = ox * s - p + dx;
            if (iy >= 0 && iy < H && ix >= 0 && ix < W) plane[iy * W + ix] += col[k];
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// conv2d: x [B,Cin,H,W], w [Cout,Cin,kh,kw], optional bias [Cout].

template <class R>
Var<R> conv2d(const Var<R>& x, const Var<R>& w, const Var<R>& b, int stride, int pad) {
  const auto& xs = x->value.shape;
  const auto& ws = w->value.shape;
  require(xs.size() == 4 && ws.size() == 4, "conv2d: rank");
  require(xs[1] == ws[1], "conv2d: channel mismatch");
  const int B = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
  const int Cout = ws[0], kh = ws[2], kw = ws[3];
  const int oh = conv_out_size(H, kh, stride, pad);
  const int ow = conv_out_size(W, kw, stride, pad);
  require(oh > 0 && ow > 0, "conv2d: output collapsed");
  const int K = Cin * kh * kw;
  const std::int64_t N = static_cast<std::int64_t>(oh) * ow;

  Tensor<R> out({B, Cout, oh, ow});
  auto cols = std::make_shared<Tensor<R>>(std::vector<int>{B, K, static_cast<int>(N)});

  for (int bi = 0; bi < B; ++bi) {
    R* colp = cols->ptr() + static_cast<std::int64_t>(bi) * K * N;
    im2col(x->value.ptr() + static_cast<std::int64_t>(bi) * Cin * H * W, Cin, H, W, kh, kw,
           stride, pad, colp);
    CMapRM<R> Wm(w->value.ptr(), Cout, K);
    CMapCM<R> Cm(colp, K, N);
    MapRM<R> Om(out.ptr() + static_cast<std::int64_t>(bi) * Cout * N, Cout, N);
    Om.noalias() = Wm * Cm;
    if (b) {
      for (int oc = 0; oc < Cout; ++oc) Om.row(oc).array() += b->value[oc];
    }
  }

  std::vector<Var<R>> parents = b ? std::vector<Var<R>>{x, w, b} : std::vector<Var<R>>{x, w};
  return op_node<R>(
      std::move(out), std::move(parents),
      [x, w, b, cols, B, Cin, H, W, Cout, kh, kw, stride, pad, K, N](Node<R>& n) {
        const bool need_dx = x->requires_grad;
        const bool need_dw = w->requires_grad;
        Tensor<R> dwb;
        if (need_dw) dwb = Tensor<R>::zeros({B, Cout, K});
        if (need_dx) grad_of(x);
        for (int bi = 0; bi < B; ++bi) {
          CMapRM<R> dOm(n.grad.ptr() + static_cast<std::int64_t>(bi) * Cout * N, Cout, N);
          const R* colp = cols->ptr() + static_cast<std::int64_t>(bi) * K * N;
          CMapCM<R> Cm(colp, K, N);
          if (need_dw) {
            MapRM<R> dWb(dwb.ptr() + static_cast<std::int64_t>(bi) * Cout * K, Cout, K);
            dWb.noalias() = dOm * Cm.transpose();
          }
          if (need_dx) {
            MatCM<R> dC(K, N);
            CMapRM<R> Wm(w->value.ptr(), Cout, K);
            dC.noalias() = Wm.transpose() * dOm;
            col2im_add(dC.data(), Cin, H, W, kh, kw, stride, pad,
                       x->grad.ptr() + static_cast<std::int64_t>(bi) * Cin * H * W);
          }
        }
        if (need_dw) {
          MapRM<R> dW(grad_of(w).ptr(), Cout, K);
          for (int bi = 0; bi < B; ++bi)
            dW += CMapRM<R>(dwb.ptr() + static_cast<std::int64_t>(bi) * Cout * K, Cout, K);
        }
        if (b && b->requires_grad) {
          // strictly ordered summation: Eigen's redux splits by runtime
          // pointer alignment, which would break run-to-run bit equality
          Tensor<R>& db = grad_of(b);
          for (int bi = 0; bi < B; ++bi)
            for (int oc = 0; oc < Cout; ++oc) {
              const R* g = n.grad.ptr() + (static_cast<std::int64_t>(bi) * Cout + oc) * N;
              R s = 0;
              for (std::int64_t i = 0; i < N; ++i) s += g[i];
              db[oc] += s;
            }
        }
      });
}

// conv_transpose2d: x [B,Cin,H,W], w [Cin,Cout,kh,kw], bias [Cout].
// With kh=kw=4, stride=2, pad=1 this is an exact x2 upsampler.
template <class R>
Var<R> conv_transpose2d(const Var<R>& x, const Var<R>& w, const Var<R>& b, int stride, int pad) {
  const auto& xs = x->value.shape;
  const auto& ws = w->value.shape;
  require(xs.size() == 4 && ws.size() == 4, "conv_transpose2d: rank");
  require(xs[1] == ws[0], "conv_transpose2d: channel mismatch");
  const int B = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
  const int Cout = ws[1], kh = ws[2], kw = ws[3];
  const int oh = (H - 1) * stride - 2 * pad + kh;
  const int ow = (W - 1) * stride - 2 * pad + kw;
  require(oh > 0 && ow > 0, "conv_transpose2d: output collapsed");
  const int K = Cout * kh * kw;
  const std::int64_t N = static_cast<std::int64_t>(H) * W;

  Tensor<R> out({B, Cout, oh, ow});
  out.fill(R(0));

  for (int bi = 0; bi < B; ++bi) {
    CMapRM<R> Xm(x->value.ptr() + static_cast<std::int64_t>(bi) * Cin * N, Cin, N);
    CMapRM<R> Wm(w->value.ptr(), Cin, K);
    MatCM<R> cols(K, N);
    cols.noalias() = Wm.transpose() * Xm;
    R* outp = out.ptr() + static_cast<std::int64_t>(bi) * Cout * oh * ow;
    col2im_add(cols.data(), Cout, oh, ow, kh, kw, stride, pad, outp);
    if (b) {
      for (int oc = 0; oc < Cout; ++oc) {
        R* plane = outp + static_cast<std::int64_t>(oc) * oh * ow;
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(oh) * ow; ++i)
          plane[i] += b->value[oc];
      }
    }
  }

  std::vector<Var<R>> parents = b ? std::vector<Var<R>>{x, w, b} : std::vector<Var<R>>{x, w};
  return op_node<R>(
      std::move(out), std::move(parents),
      [x, w, b, B, Cin, H, W, Cout, kh, kw, stride, pad, K, N](Node<R>& n) {
        const int oh = n.value.shape[2], ow = n.value.shape[3];
        const bool need_dx = x->requires_grad;
        const bool need_dw = w->requires_grad;
        Tensor<R> dwb;
        if (need_dw) dwb = Tensor<R>::zeros({B, Cin, K});
        if (need_dx) grad_of(x);
        for (int bi = 0; bi < B; ++bi) {
          MatCM<R> dcols(K, N);
          im2col(n.grad.ptr() + static_cast<std::int64_t>(bi) * Cout * oh * ow, Cout, oh, ow,
                 kh, kw, stride, pad, dcols.data());
          if (need_dx) {
            CMapRM<R> Wm(w->value.ptr(), Cin, K);
            MapRM<R> dXm(x->grad.ptr() + static_cast<std::int64_t>(bi) * Cin * N, Cin, N);
            dXm.noalias() += Wm * dcols;
          }
          if (need_dw) {
            CMapRM<R> Xm(x->value.ptr() + static_cast<std::int64_t>(bi) * Cin * N, Cin, N);
            MapRM<R> dWb(dwb.ptr() + static_cast<std::int64_t>(bi) * Cin * K, Cin, K);
            dWb.noalias() = Xm * dcols.transpose();
          }
        }
        if (need_dw) {
          MapRM<R> dW(grad_of(w).ptr(), Cin, K);
          for (int bi = 0; bi < B; ++bi)
            dW += CMapRM<R>(dwb.ptr() + static_cast<std::int64_t>(bi) * Cin * K, Cin, K);
        }
        if (b && b->requires_grad) {
          Tensor<R>& db = grad_of(b);
          for (int bi = 0; bi < B; ++bi)
            for (int oc = 0; oc < Cout; ++oc) {
              const R* plane = n.grad.ptr() +
                               (static_cast<std::int64_t>(bi) * Cout + oc) * oh * ow;
              R s = 0;
              for (std::int64_t i = 0; i < static_cast<std::int64_t>(oh) * ow; ++i)
                s += plane[i];
              db[oc] += s;
            }
        }
      });
}

// linear: x [B,K], w [M,K], bias [M] -> [B,M]
template <class R>
Var<R> linear(const Var<R>& x, const Var<R>& w, const Var<R>& b) {
  const int B = x->value.shape[0];
  const int K = x->value.shape[1];
  const int M = w->value.shape[0];
  require(w->value.shape[1] == K, "linear: weight/input width mismatch");
  Tensor<R> out({B, M});
  CMapRM<R> Xm(x->value.ptr(), B, K);
  CMapRM<R> Wm(w->value.ptr(), M, K);
  MapRM<R> Om(out.ptr(), B, M);
  Om.noalias() = Xm * Wm.transpose();
  if (b)
    for (int i = 0; i < B; ++i) Om.row(i) += CMapRM<R>(b->value.ptr(), 1, M);

  std::vector<Var<R>> parents = b ? std::vector<Var<R>>{x, w, b} : std::vector<Var<R>>{x, w};
  return op_node<R>(std::move(out), std::move(parents), [x, w, b, B, K, M](Node<R>& n) {
    CMapRM<R> dO(n.grad.ptr(), B, M);
    if (x->requires_grad) {
      CMapRM<R> Wm(w->value.ptr(), M, K);
      MapRM<R> dX(grad_of(x).ptr(), B, K);
      dX.noalias() += dO * Wm;
    }
    if (w->requires_grad) {
      CMapRM<R> Xm(x->value.ptr(), B, K);
      MapRM<R> dW(grad_of(w).ptr(), M, K);
      dW.noalias() += dO.transpose() * Xm;
    }
    if (b && b->requires_grad) {
      Tensor<R>& db = grad_of(b);
      for (int i = 0; i < B; ++i)
        for (int j = 0; j < M; ++j) db[j] += dO(i, j);
    }
  });
}

// ---------------------------------------------------------------------------
// batchnorm2d. Running stats live in the owning module and are updated here
// during training-mode forwards. Normalization uses biased variance.
template <class R>
Var<R> batchnorm2d(const Var<R>& x, const Var<R>& gamma, const Var<R>& beta,
                   Tensor<R>* running_mean, Tensor<R>* running_var, bool training,
                   R momentum = R(0.1), R eps = R(1e-5)) {
  const int B = x->value.shape[0], C = x->value.shape[1];
  const int H = x->value.shape[2], W = x->value.shape[3];
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  const std::int64_t nred = static_cast<std::int64_t>(B) * plane;

  Tensor<R> out({B, C, H, W});
  auto mean = std::make_shared<Tensor<R>>(std::vector<int>{C});
  auto rstd = std::make_shared<Tensor<R>>(std::vector<int>{C});

  for (int c = 0; c < C; ++c) {
    R mu, var;
    if (training) {
      R s = 0;
      for (int bi = 0; bi < B; ++bi) {
        const R* p = x->value.ptr() + (static_cast<std::int64_t>(bi) * C + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) s += p[i];
      }
      mu = s / static_cast<R>(nred);
      R v = 0;
      for (int bi = 0; bi < B; ++bi) {
        const R* p = x->value.ptr() + (static_cast<std::int64_t>(bi) * C + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          const R d = p[i] - mu;
          v += d * d;
        }
      }
      var = v / static_cast<R>(nred);
      (*running_mean)[c] = (R(1) - momentum) * (*running_mean)[c] + momentum * mu;
      (*running_var)[c] = (R(1) - momentum) * (*running_var)[c] + momentum * var;
    } else {
      mu = (*running_mean)[c];
      var = (*running_var)[c];
    }
    (*mean)[c] = mu;
    (*rstd)[c] = R(1) / std::sqrt(var + eps);
    const R g = gamma->value[c] * (*rstd)[c];
    const R bb = beta->value[c];
    for (int bi = 0; bi < B; ++bi) {
      const R* p = x->value.ptr() + (static_cast<std::int64_t>(bi) * C + c) * plane;
      R* q = out.ptr() + (static_cast<std::int64_t>(bi) * C + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) q[i] = g * (p[i] - mu) + bb;
    }
  }

  return op_node<R>(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, mean, rstd, training, B, C, plane, nred](Node<R>& n) {
        for (int c = 0; c < C; ++c) {
          const R mu = (*mean)[c], rs = (*rstd)[c], g = gamma->value[c];
          R sum_dy = 0, sum_dy_xhat = 0;
          for (int bi = 0; bi < B; ++bi) {
            const R* dy = n.grad.ptr() + (static_cast<std::int64_t>(bi) * C + c) * plane;
            const R* xv = x->value.ptr() + (static_cast<std::int64_t>(bi) * C + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
              sum_dy += dy[i];
              sum_dy_xhat += dy[i] * (xv[i] - mu) * rs;
            }
          }
          if (gamma->requires_grad) grad_of(gamma)[c] += sum_dy_xhat;
          if (beta->requires_grad) grad_of(beta)[c] += sum_dy;
          if (x->requires_grad) {
            Tensor<R>& dx = grad_of(x);
            const R inv_n = R(1) / static_cast<R>(nred);
            for (int bi = 0; bi < B; ++bi) {
              const R* dy = n.grad.ptr() + (static_cast<std::int64_t>(bi) * C + c) * plane;
              const R* xv = x->value.ptr() + (static_cast<std::int64_t>(bi) * C + c) * plane;
              R* dxp = dx.ptr() + (static_cast<std::int64_t>(bi) * C + c) * plane;
              if (training) {
                for (std::int64_t i = 0; i < plane; ++i) {
                  const R xhat = (xv[i] - mu) * rs;
                  dxp[i] += g * rs * (dy[i] - inv_n * sum_dy - xhat * inv_n * sum_dy_xhat);
                }
              } else {
                for (std::int64_t i = 0; i < plane; ++i) dxp[i] += g * rs * dy[i];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Pooling.

template <class R>
Var<R> maxpool2d(const Var<R>& x, int k, int stride, int pad) {
  const int B = x->value.shape[0], C = x->value.shape[1];
  const int H = x->value.shape[2], W = x->value.shape[3];
  const int oh = conv_out_size(H, k, stride, pad);
  const int ow = conv_out_size(W, k, stride, pad);
  Tensor<R> out({B, C, oh, ow});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(out.numel());
  for (int bi = 0; bi < B; ++bi)
    for (int c = 0; c < C; ++c) {
      const R* plane = x->value.ptr() + (static_cast<std::int64_t>(bi) * C + c) * H * W;
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          R best = -std::numeric_limits<R>::infinity();
          std::int64_t besti = -1;
          for (int dy = 0; dy < k; ++dy) {
            const int iy = oy * stride - pad + dy;
            if (iy < 0 || iy >= H) continue;
            for (int dx = 0; dx < k; ++dx) {
              const int ix = ox * stride - pad + dx;
              if (ix < 0 || ix >= W) continue;
              if (plane[iy * W + ix] > best) {
                best = plane[iy * W + ix];
                besti = iy * W + ix;
              }
            }
          }
          const std::int64_t oidx =
              ((static_cast<std::int64_t>(bi) * C + c) * oh + oy) * ow + ox;
          out[oidx] = best;
          (*argmax)[oidx] = (static_cast<std::int64_t>(bi) * C + c) * H * W + besti;
        }
    }
  return op_node<R>(std::move(out), {x}, [x, argmax](Node<R>& n) {
    if (!x->requires_grad) return;
    Tensor<R>& dx = grad_of(x);
    for (std::int64_t i = 0; i < n.value.numel(); ++i) dx[(*argmax)[i]] += n.grad[i];
  });
}

// 2x2 stride-2 average pooling (used to build coarser discriminator scales).
template <class R>
Var<R> avgpool2x(const Var<R>& x) {
  const int B = x->value.shape[0], C = x->value.shape[1];
  const int H = x->value.shape[2], W = x->value.shape[3];
  require(H % 2 == 0 && W % 2 == 0, "avgpool2x: odd spatial size");
  const int oh = H / 2, ow = W / 2;
  Tensor<R> out({B, C, oh, ow});
  for (int bc = 0; bc < B * C; ++bc) {
    const R* p = x->value.ptr() + static_cast<std::int64_t>(bc) * H * W;
    R* q = out.ptr() + static_cast<std::int64_t>(bc) * oh * ow;
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox)
        q[oy * ow + ox] = (p[(2 * oy) * W + 2 * ox] + p[(2 * oy) * W + 2 * ox + 1] +
                           p[(2 * oy + 1) * W + 2 * ox] + p[(2 * oy + 1) * W + 2 * ox + 1]) /
                          R(4);
  }
  return op_node<R>(std::move(out), {x}, [x, B, C, H, W, oh, ow](Node<R>& n) {
    if (!x->requires_grad) return;
    Tensor<R>& dx = grad_of(x);
    for (int bc = 0; bc < B * C; ++bc) {
      const R* dq = n.grad.ptr() + static_cast<std::int64_t>(bc) * oh * ow;
      R* dp = dx.ptr() + static_cast<std::int64_t>(bc) * H * W;
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          const R g = dq[oy * ow + ox] / R(4);
          dp[(2 * oy) * W + 2 * ox] += g;
          dp[(2 * oy) * W + 2 * ox + 1] += g;
          dp[(2 * oy + 1) * W + 2 * ox] += g;
          dp[(2 * oy + 1) * W + 2 * ox + 1] += g;
        }
    }
  });
}

// [B,C,H,W] -> [B,C]
template <class R>
Var<R> global_avgpool(const Var<R>& x) {
  const int B = x->value.shape[0], C = x->value.shape[1];
  const std::int64_t plane =
      static_cast<std::int64_t>(x->value.shape[2]) * x->value.shape[3];
  Tensor<R> out({B, C});
  for (int bc = 0; bc < B * C; ++bc) {
    const R* p = x->value.ptr() + static_cast<std::int64_t>(bc) * plane;
    R s = 0;
    for (std::int64_t i = 0; i < plane; ++i) s += p[i];
    out[bc] = s / static_cast<R>(plane);
  }
  return op_node<R>(std::move(out), {x}, [x, B, C, plane](Node<R>& n) {
    if (!x->requires_grad) return;
    Tensor<R>& dx = grad_of(x);
    for (int bc = 0; bc < B * C; ++bc) {
      const R g = n.grad[bc] / static_cast<R>(plane);
      R* dp = dx.ptr() + static_cast<std::int64_t>(bc) * plane;
      for (std::int64_t i = 0; i < plane; ++i) dp[i] += g;
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise.

template <class R>
Var<R> add(const Var<R>& a, const Var<R>& b) {
  require(a->value.same_shape(b->value), "add: shape mismatch");
  Tensor<R> out(a->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + b->value[i];
  return op_node<R>(std::move(out), {a, b}, [a, b](Node<R>& n) {
    if (a->requires_grad) {
      Tensor<R>& da = grad_of(a);
      for (std::int64_t i = 0; i < n.grad.numel(); ++i) da[i] += n.grad[i];
    }
    if (b->requires_grad) {
      Tensor<R>& db = grad_of(b);
      for (std::int64_t i = 0; i < n.grad.numel(); ++i) db[i] += n.grad[i];
    }
  });
}

template <class R>
Var<R> sub(const Var<R>& a, const Var<R>& b) {
  require(a->value.same_shape(b->value), "sub: shape mismatch");
  Tensor<R> out(a->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] - b->value[i];
  return op_node<R>(std::move(out), {a, b}, [a, b](Node<R>& n) {
    if (a->requires_grad) {
      Tensor<R>& da = grad_of(a);
      for (std::int64_t i = 0; i < n.grad.numel(); ++i) da[i] += n.grad[i];
    }
    if (b->requires_grad) {
      Tensor<R>& db = grad_of(b);
      for (std::int64_t i = 0; i < n.grad.numel(); ++i) db[i] -= n.grad[i];
    }
  });
}

template <class R>
Var<R> relu(const Var<R>& x) {
  Tensor<R> out(x->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = x->value[i] > R(0) ? x->value[i] : R(0);
  return op_node<R>(std::move(out), {x}, [x](Node<R>& n) {
    if (!x->requires_grad) return;
    Tensor<R>& dx = grad_of(x);
    for (std::int64_t i = 0; i < n.grad.numel(); ++i)
      if (x->value[i] > R(0)) dx[i] += n.grad[i];
  });
}

template <class R>
Var<R> leaky_relu(const Var<R>& x, R slope = R(0.2)) {
  Tensor<R> out(x->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = x->value[i] > R(0) ? x->value[i] : slope * x->value[i];
  return op_node<R>(std::move(out), {x}, [x, slope](Node<R>& n) {
    if (!x->requires_grad) return;
    Tensor<R>& dx = grad_of(x);
    for (std::int64_t i = 0; i < n.grad.numel(); ++i)
      dx[i] += n.grad[i] * (x->value[i] > R(0) ? R(1) : slope);
  });
}

template <class R>
Var<R> sigmoid(const Var<R>& x) {
  Tensor<R> out(x->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = R(1) / (R(1) + std::exp(-x->value[i]));
  return op_node<R>(std::move(out), {x}, [x](Node<R>& n) {
    if (!x->requires_grad) return;
    Tensor<R>& dx = grad_of(x);
    for (std::int64_t i = 0; i < n.grad.numel(); ++i) {
      const R y = n.value[i];
      dx[i] += n.grad[i] * y * (R(1) - y);
    }
  });
}

// s * tanh(x); traces use s = 2.
template <class R>
Var<R> tanh_scaled(const Var<R>& x, R s) {
  Tensor<R> out(x->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = s * std::tanh(x->value[i]);
  return op_node<R>(std::move(out), {x}, [x, s](Node<R>& n) {
    if (!x->requires_grad) return;
    Tensor<R>& dx = grad_of(x);
    for (std::int64_t i = 0; i < n.grad.numel(); ++i) {
      const R t = n.value[i] / s;
      dx[i] += n.grad[i] * s * (R(1) - t * t);
    }
  });
}

template <class R>
Var<R> clamp(const Var<R>& x, R lo, R hi) {
  Tensor<R> out(x->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = std::min(hi, std::max(lo, x->value[i]));
  return op_node<R>(std::move(out), {x}, [x, lo, hi](Node<R>& n) {
    if (!x->requires_grad) return;
    Tensor<R>& dx = grad_of(x);
    for (std::int64_t i = 0; i < n.grad.numel(); ++i)
      if (x->value[i] > lo && x->value[i] < hi) dx[i] += n.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Shape / gather ops.

template <class R>
Var<R> concat_channels(const Var<R>& a, const Var<R>& b) {
  const auto& as = a->value.shape;
  const auto& bs = b->value.shape;
  require(as.size() == 4 && bs.size() == 4 && as[0] == bs[0] && as[2] == bs[2] &&
              as[3] == bs[3],
          "concat_channels: shape mismatch");
  const int B = as[0], Ca = as[1], Cb = bs[1];
  const std::int64_t plane = static_cast<std::int64_t>(as[2]) * as[3];
  Tensor<R> out({B, Ca + Cb, as[2], as[3]});
  for (int bi = 0; bi < B; ++bi) {
    std::memcpy(out.ptr() + static_cast<std::int64_t>(bi) * (Ca + Cb) * plane,
                a->value.ptr() + static_cast<std::int64_t>(bi) * Ca * plane,
                sizeof(R) * Ca * plane);
    std::memcpy(out.ptr() + (static_cast<std::int64_t>(bi) * (Ca + Cb) + Ca) * plane,
                b->value.ptr() + static_cast<std::int64_t>(bi) * Cb * plane,
                sizeof(R) * Cb * plane);
  }
  return op_node<R>(std::move(out), {a, b}, [a, b, B, Ca, Cb, plane](Node<R>& n) {
    for (int bi = 0; bi < B; ++bi) {
      if (a->requires_grad) {
        R* da = grad_of(a).ptr() + static_cast<std::int64_t>(bi) * Ca * plane;
        const R* g = n.grad.ptr() + static_cast<std::int64_t>(bi) * (Ca + Cb) * plane;
        for (std::int64_t i = 0; i < Ca * plane; ++i) da[i] += g[i];
      }
      if (b->requires_grad) {
        R* db = grad_of(b).ptr() + static_cast<std::int64_t>(bi) * Cb * plane;
        const R* g =
            n.grad.ptr() + (static_cast<std::int64_t>(bi) * (Ca + Cb) + Ca) * plane;
        for (std::int64_t i = 0; i < Cb * plane; ++i) db[i] += g[i];
      }
    }
  });
}

// Channel slice [B,C,H,W] -> [B,count,H,W] starting at `from`.
template <class R>
Var<R> slice_channels(const Var<R>& x, int from, int count) {
  const auto& s = x->value.shape;
  require(s.size() == 4 && from >= 0 && from + count <= s[1], "slice_channels: range");
  const int B = s[0], C = s[1];
  const std::int64_t plane = static_cast<std::int64_t>(s[2]) * s[3];
  Tensor<R> out({B, count, s[2], s[3]});
  for (int bi = 0; bi < B; ++bi)
    std::memcpy(out.ptr() + static_cast<std::int64_t>(bi) * count * plane,
                x->value.ptr() + (static_cast<std::int64_t>(bi) * C + from) * plane,
                sizeof(R) * count * plane);
  return op_node<R>(std::move(out), {x}, [x, from, count, B, C, plane](Node<R>& n) {
    if (!x->requires_grad) return;
    Tensor<R>& dx = grad_of(x);
    for (int bi = 0; bi < B; ++bi) {
      const R* g = n.grad.ptr() + static_cast<std::int64_t>(bi) * count * plane;
      R* d = dx.ptr() + (static_cast<std::int64_t>(bi) * C + from) * plane;
      for (std::int64_t i = 0; i < count * plane; ++i) d[i] += g[i];
    }
  });
}

// Concatenate along dim 1 for rank-2 tensors [B,D].
template <class R>
Var<R> concat_cols(const Var<R>& a, const Var<R>& b) {
  const int B = a->value.shape[0], Da = a->value.shape[1], Db = b->value.shape[1];
  require(b->value.shape[0] == B, "concat_cols: batch mismatch");
  Tensor<R> out({B, Da + Db});
  for (int i = 0; i < B; ++i) {
    std::memcpy(out.ptr() + static_cast<std::int64_t>(i) * (Da + Db),
                a->value.ptr() + static_cast<std::int64_t>(i) * Da, sizeof(R) * Da);
    std::memcpy(out.ptr() + static_cast<std::int64_t>(i) * (Da + Db) + Da,
                b->value.ptr() + static_cast<std::int64_t>(i) * Db, sizeof(R) * Db);
  }
  return op_node<R>(std::move(out), {a, b}, [a, b, B, Da, Db](Node<R>& n) {
    for (int i = 0; i < B; ++i) {
      const R* g = n.grad.ptr() + static_cast<std::int64_t>(i) * (Da + Db);
      if (a->requires_grad) {
        R* da = grad_of(a).ptr() + static_cast<std::int64_t>(i) * Da;
        for (int j = 0; j < Da; ++j) da[j] += g[j];
      }
      if (b->requires_grad) {
        R* db = grad_of(b).ptr() + static_cast<std::int64_t>(i) * Db;
        for (int j = 0; j < Db; ++j) db[j] += g[j + Da];
      }
    }
  });
}

// Select batch rows: out[k] = x[idx[k]]. Backward scatter-adds.
template <class R>
Var<R> gather_rows(const Var<R>& x, std::vector<int> idx) {
  const auto& s = x->value.shape;
  std::int64_t row = 1;
  for (std::size_t i = 1; i < s.size(); ++i) row *= s[i];
  std::vector<int> os = s;
  os[0] = static_cast<int>(idx.size());
  Tensor<R> out(os);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    require(idx[k] >= 0 && idx[k] < s[0], "gather_rows: index out of range");
    std::memcpy(out.ptr() + static_cast<std::int64_t>(k) * row,
                x->value.ptr() + static_cast<std::int64_t>(idx[k]) * row, sizeof(R) * row);
  }
  return op_node<R>(std::move(out), {x}, [x, idx = std::move(idx), row](Node<R>& n) {
    if (!x->requires_grad) return;
    Tensor<R>& dx = grad_of(x);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const R* g = n.grad.ptr() + static_cast<std::int64_t>(k) * row;
      R* d = dx.ptr() + static_cast<std::int64_t>(idx[k]) * row;
      for (std::int64_t i = 0; i < row; ++i) d[i] += g[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Attention helpers.

// Softmax across the channel axis of [B,C,H,W] (fusion uses C=2).
template <class R>
Var<R> softmax_channels(const Var<R>& x) {
  const int B = x->value.shape[0], C = x->value.shape[1];
  const std::int64_t plane =
      static_cast<std::int64_t>(x->value.shape[2]) * x->value.shape[3];
  Tensor<R> out(x->value.shape);
  for (int bi = 0; bi < B; ++bi)
    for (std::int64_t i = 0; i < plane; ++i) {
      R mx = -std::numeric_limits<R>::infinity();
      for (int c = 0; c < C; ++c)
        mx = std::max(mx, x->value[(static_cast<std::int64_t>(bi) * C + c) * plane + i]);
      R z = 0;
      for (int c = 0; c < C; ++c) {
        const std::int64_t at = (static_cast<std::int64_t>(bi) * C + c) * plane + i;
        out[at] = std::exp(x->value[at] - mx);
        z += out[at];
      }
      for (int c = 0; c < C; ++c)
        out[(static_cast<std::int64_t>(bi) * C + c) * plane + i] /= z;
    }
  return op_node<R>(std::move(out), {x}, [x, B, C, plane](Node<R>& n) {
    if (!x->requires_grad) return;
    Tensor<R>& dx = grad_of(x);
    for (int bi = 0; bi < B; ++bi)
      for (std::int64_t i = 0; i < plane; ++i) {
        R dot = 0;
        for (int c = 0; c < C; ++c) {
          const std::int64_t at = (static_cast<std::int64_t>(bi) * C + c) * plane + i;
          dot += n.value[at] * n.grad[at];
        }
        for (int c = 0; c < C; ++c) {
          const std::int64_t at = (static_cast<std::int64_t>(bi) * C + c) * plane + i;
          dx[at] += n.value[at] * (n.grad[at] - dot);
        }
      }
  });
}

// x [B,C,H,W] scaled per (sample, channel) by g [B,C].
template <class R>
Var<R> channel_scale(const Var<R>& x, const Var<R>& g) {
  const int B = x->value.shape[0], C = x->value.shape[1];
  const std::int64_t plane =
      static_cast<std::int64_t>(x->value.shape[2]) * x->value.shape[3];
  require(g->value.shape == std::vector<int>({B, C}), "channel_scale: gate shape");
  Tensor<R> out(x->value.shape);
  for (int bc = 0; bc < B * C; ++bc) {
    const R s = g->value[bc];
    const R* p = x->value.ptr() + static_cast<std::int64_t>(bc) * plane;
    R* q = out.ptr() + static_cast<std::int64_t>(bc) * plane;
    for (std::int64_t i = 0; i < plane; ++i) q[i] = s * p[i];
  }
  return op_node<R>(std::move(out), {x, g}, [x, g, B, C, plane](Node<R>& n) {
    for (int bc = 0; bc < B * C; ++bc) {
      const R* gr = n.grad.ptr() + static_cast<std::int64_t>(bc) * plane;
      if (x->requires_grad) {
        R* dx = grad_of(x).ptr() + static_cast<std::int64_t>(bc) * plane;
        const R s = g->value[bc];
        for (std::int64_t i = 0; i < plane; ++i) dx[i] += s * gr[i];
      }
      if (g->requires_grad) {
        const R* p = x->value.ptr() + static_cast<std::int64_t>(bc) * plane;
        R s = 0;
        for (std::int64_t i = 0; i < plane; ++i) s += gr[i] * p[i];
        grad_of(g)[bc] += s;
      }
    }
  });
}

// x [B,C,H,W] scaled per (sample, pixel) by m [B,1,H,W].
template <class R>
Var<R> spatial_scale(const Var<R>& x, const Var<R>& m) {
  const int B = x->value.shape[0], C = x->value.shape[1];
  const int H = x->value.shape[2], W = x->value.shape[3];
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  require(m->value.shape == std::vector<int>({B, 1, H, W}), "spatial_scale: map shape");
  Tensor<R> out(x->value.shape);
  for (int bi = 0; bi < B; ++bi) {
    const R* mp = m->value.ptr() + static_cast<std::int64_t>(bi) * plane;
    for (int c = 0; c < C; ++c) {
      const R* p = x->value.ptr() + (static_cast<std::int64_t>(bi) * C + c) * plane;
      R* q = out.ptr() + (static_cast<std::int64_t>(bi) * C + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) q[i] = p[i] * mp[i];
    }
  }
  return op_node<R>(std::move(out), {x, m}, [x, m, B, C, plane](Node<R>& n) {
    for (int bi = 0; bi < B; ++bi) {
      const R* mp = m->value.ptr() + static_cast<std::int64_t>(bi) * plane;
      for (int c = 0; c < C; ++c) {
        const R* gr = n.grad.ptr() + (static_cast<std::int64_t>(bi) * C + c) * plane;
        if (x->requires_grad) {
          R* dx = grad_of(x).ptr() + (static_cast<std::int64_t>(bi) * C + c) * plane;
          for (std::int64_t i = 0; i < plane; ++i) dx[i] += gr[i] * mp[i];
        }
        if (m->requires_grad) {
          const R* p = x->value.ptr() + (static_cast<std::int64_t>(bi) * C + c) * plane;
          R* dm = grad_of(m).ptr() + static_cast<std::int64_t>(bi) * plane;
          for (std::int64_t i = 0; i < plane; ++i) dm[i] += gr[i] * p[i];
        }
      }
    }
  });
}

// Per-(sample, channel) standardization over the spatial extent:
// y = (x - mean) / sqrt(var + eps). Removes global per-channel offsets and
// gains from each image.
template <class R>
Var<R> standardize_channels(const Var<R>& x, R eps = R(1e-5)) {
  const int B = x->value.shape[0], C = x->value.shape[1];
  const std::int64_t plane =
      static_cast<std::int64_t>(x->value.shape[2]) * x->value.shape[3];
  Tensor<R> out(x->value.shape);
  auto mean = std::make_shared<std::vector<R>>(B * C);
  auto rstd = std::make_shared<std::vector<R>>(B * C);
  for (int bc = 0; bc < B * C; ++bc) {
    const R* p = x->value.ptr() + static_cast<std::int64_t>(bc) * plane;
    R mu = 0;
    for (std::int64_t i = 0; i < plane; ++i) mu += p[i];
    mu /= static_cast<R>(plane);
    R var = 0;
    for (std::int64_t i = 0; i < plane; ++i) {
      const R d = p[i] - mu;
      var += d * d;
    }
    var /= static_cast<R>(plane);
    const R rs = R(1) / std::sqrt(var + eps);
    (*mean)[bc] = mu;
    (*rstd)[bc] = rs;
    R* q = out.ptr() + static_cast<std::int64_t>(bc) * plane;
    for (std::int64_t i = 0; i < plane; ++i) q[i] = (p[i] - mu) * rs;
  }
  return op_node<R>(std::move(out), {x}, [x, mean, rstd, B, C, plane](Node<R>& n) {
    if (!x->requires_grad) return;
    Tensor<R>& dx = grad_of(x);
    for (int bc = 0; bc < B * C; ++bc) {
      const R* dy = n.grad.ptr() + static_cast<std::int64_t>(bc) * plane;
      const R* y = n.value.ptr() + static_cast<std::int64_t>(bc) * plane;
      R* d = dx.ptr() + static_cast<std::int64_t>(bc) * plane;
      R sum_dy = 0, sum_dy_y = 0;
      for (std::int64_t i = 0; i < plane; ++i) {
        sum_dy += dy[i];
        sum_dy_y += dy[i] * y[i];
      }
      const R inv_n = R(1) / static_cast<R>(plane);
      for (std::int64_t i = 0; i < plane; ++i)
        d[i] += (*rstd)[bc] * (dy[i] - inv_n * sum_dy - y[i] * inv_n * sum_dy_y);
    }
  });
}

// Row-wise L2 normalization of [B,D] (identity embedder output).
template <class R>
Var<R> l2_normalize_rows(const Var<R>& x, R eps = R(1e-12)) {
  const int B = x->value.shape[0], D = x->value.shape[1];
  Tensor<R> out({B, D});
  auto norms = std::make_shared<std::vector<R>>(B);
  for (int i = 0; i < B; ++i) {
    R s = 0;
    for (int j = 0; j < D; ++j) {
      const R v = x->value.at(i, j);
      s += v * v;
    }
    const R nrm = std::sqrt(std::max(s, eps));
    (*norms)[i] = nrm;
    for (int j = 0; j < D; ++j) out.at(i, j) = x->value.at(i, j) / nrm;
  }
  return op_node<R>(std::move(out), {x}, [x, norms, B, D](Node<R>& n) {
    if (!x->requires_grad) return;
    Tensor<R>& dx = grad_of(x);
    for (int i = 0; i < B; ++i) {
      R dot = 0;
      for (int j = 0; j < D; ++j) dot += n.value.at(i, j) * n.grad.at(i, j);
      for (int j = 0; j < D; ++j)
        dx.at(i, j) += (n.grad.at(i, j) - n.value.at(i, j) * dot) / (*norms)[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Scalar reductions (loss building blocks). All reduce by MEAN over elements.

template <class R>
Var<R> mean_sq_shift(const Var<R>& x, R target) {
  const std::int64_t n = x->value.numel();
  R s = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const R d = x->value[i] - target;
    s += d * d;
  }
  Tensor<R> out({1});
  out[0] = s / static_cast<R>(n);
  return op_node<R>(std::move(out), {x}, [x, target, n](Node<R>& nd) {
    if (!x->requires_grad) return;
    Tensor<R>& dx = grad_of(x);
    const R g = nd.grad[0] * R(2) / static_cast<R>(n);
    for (std::int64_t i = 0; i < n; ++i) dx[i] += g * (x->value[i] - target);
  });
}

template <class R>
Var<R> mse(const Var<R>& a, const Var<R>& b) {
  require(a->value.same_shape(b->value), "mse: shape mismatch");
  const std::int64_t n = a->value.numel();
  R s = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const R d = a->value[i] - b->value[i];
    s += d * d;
  }
  Tensor<R> out({1});
  out[0] = s / static_cast<R>(n);
  return op_node<R>(std::move(out), {a, b}, [a, b, n](Node<R>& nd) {
    const R g = nd.grad[0] * R(2) / static_cast<R>(n);
    for (std::int64_t i = 0; i < n; ++i) {
      const R d = g * (a->value[i] - b->value[i]);
      if (a->requires_grad) grad_of(a)[i] += d;
      if (b->requires_grad) grad_of(b)[i] -= d;
    }
  });
}

template <class R>
Var<R> mean_abs(const Var<R>& x) {
  const std::int64_t n = x->value.numel();
  R s = 0;
  for (std::int64_t i = 0; i < n; ++i) s += std::abs(x->value[i]);
  Tensor<R> out({1});
  out[0] = s / static_cast<R>(n);
  return op_node<R>(std::move(out), {x}, [x, n](Node<R>& nd) {
    if (!x->requires_grad) return;
    Tensor<R>& dx = grad_of(x);
    const R g = nd.grad[0] / static_cast<R>(n);
    for (std::int64_t i = 0; i < n; ++i) {
      if (x->value[i] > R(0))
        dx[i] += g;
      else if (x->value[i] < R(0))
        dx[i] -= g;
    }
  });
}

// sum_i w_i * s_i over scalar vars.
template <class R>
Var<R> weighted_sum(const std::vector<Var<R>>& parts, const std::vector<double>& weights) {
  require(parts.size() == weights.size() && !parts.empty(), "weighted_sum: arity");
  Tensor<R> out({1});
  R s = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    require(parts[i]->value.numel() == 1, "weighted_sum: non-scalar part");
    s += static_cast<R>(weights[i]) * parts[i]->value[0];
  }
  out[0] = s;
  std::vector<Var<R>> parents = parts;
  return op_node<R>(std::move(out), std::move(parents), [parts, weights](Node<R>& nd) {
    for (std::size_t i = 0; i < parts.size(); ++i)
      if (parts[i]->requires_grad)
        grad_of(parts[i])[0] += nd.grad[0] * static_cast<R>(weights[i]);
  });
}

template <class R>
Var<R> mean_of(const std::vector<Var<R>>& parts) {
  std::vector<double> w(parts.size(), 1.0 / static_cast<double>(parts.size()));
  return weighted_sum(parts, w);
}

}  // namespace polytrace::ag
