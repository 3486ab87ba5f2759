// Differentiable primitives. Convolutions run as im2col + GEMM; every kernel
// computes each output element on exactly one thread in a fixed order, so
// results are bit-reproducible for a given input regardless of thread count.
#pragma once

#include <algorithm>
#include <cmath>

#include "tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cunet {
namespace detail {

// C[M,N] = A[M,K] * B[K,N], row-major. saxpy inner loop vectorizes well and
// keeps per-element accumulation order fixed.
template <typename T>
void gemm(const T* A, const T* B, T* C, int64_t M, int64_t K, int64_t N) {
  std::fill(C, C + M * N, T(0));
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < M; ++i) {
    const T* a = A + i * K;
    T* c = C + i * N;
    for (int64_t k = 0; k < K; ++k) {
      T av = a[k];
      if (av == T(0)) continue;  // masked weights make rows genuinely sparse
      const T* b = B + k * N;
      for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
void gemm_abt_acc(const T* A, const T* B, T* C, int64_t M, int64_t K, int64_t N) {
  for (int64_t i = 0; i < M; ++i) {
    const T* a = A + i * K;
    T* c = C + i * N;
    for (int64_t j = 0; j < N; ++j) {
      const T* b = B + j * K;
      T acc = 0;
      for (int64_t k = 0; k < K; ++k) acc += a[k] * b[k];
      c[j] += acc;
    }
  }
}

// x: [C,H,W] -> cols: [C*kh*kw, OH*OW]
template <typename T>
void im2col(const T* x, int C, int H, int W, int kh, int kw, int stride, int pad, int OH, int OW,
            T* cols) {
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        T* row = cols + ((int64_t(c) * kh + ki) * kw + kj) * OH * OW;
        for (int oy = 0; oy < OH; ++oy) {
          int iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= H) {
            std::fill(row + int64_t(oy) * OW, row + int64_t(oy + 1) * OW, T(0));
            continue;
          }
          const T* src = x + (int64_t(c) * H + iy) * W;
          for (int ox = 0; ox < OW; ++ox) {
            int ix = ox * stride + kj - pad;
            row[int64_t(oy) * OW + ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

// scatter-add of cols back into x (gradient of im2col)
template <typename T>
void col2im_acc(const T* cols, int C, int H, int W, int kh, int kw, int stride, int pad, int OH,
                int OW, T* x) {
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const T* row = cols + ((int64_t(c) * kh + ki) * kw + kj) * OH * OW;
        for (int oy = 0; oy < OH; ++oy) {
          int iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= H) continue;
          T* dst = x + (int64_t(c) * H + iy) * W;
          for (int ox = 0; ox < OW; ++ox) {
            int ix = ox * stride + kj - pad;
            if (ix >= 0 && ix < W) dst[ix] += row[int64_t(oy) * OW + ox];
          }
        }
      }
    }
  }
}

inline int conv_out_dim(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: x [N,Ci,H,W], w [Co,Ci/groups,kh,kw], bias [Co] (optional).
// Cross-correlation, zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride,
                 int padding, int groups) {
  require(x.ndim() == 4, "conv2d: input must be 4-D [N,C,H,W]");
  require(w.ndim() == 4, "conv2d: weight must be 4-D [Co,Ci/groups,kh,kw]");
  require(stride >= 1 && padding >= 0 && groups >= 1, "conv2d: bad stride/padding/groups");
  const int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (Ci % groups != 0 || Co % groups != 0)
    fail("conv2d: groups=", std::to_string(groups), " must divide input channels (",
         std::to_string(Ci), ") and output channels (", std::to_string(Co), ")");
  if (w.dim(1) != Ci / groups)
    fail("conv2d: weight expects ", std::to_string(w.dim(1) * groups), " input channels, got ",
         std::to_string(Ci));
  if (H + 2 * padding < kh || W + 2 * padding < kw)
    fail("conv2d: kernel ", std::to_string(kh), "x", std::to_string(kw),
         " does not fit padded input ", std::to_string(H + 2 * padding), "x",
         std::to_string(W + 2 * padding));
  if (bias.defined()) require(bias.numel() == Co, "conv2d: bias length must equal Co");

  const int OH = detail::conv_out_dim(H, kh, stride, padding);
  const int OW = detail::conv_out_dim(W, kw, stride, padding);
  const int Cig = Ci / groups, Cog = Co / groups;
  const int64_t K = int64_t(Cig) * kh * kw, P = int64_t(OH) * OW;

  Tensor<T> out = Tensor<T>::zeros({N, Co, OH, OW});
  {
    const T* xp = x.data();
    const T* wp = w.data();
    T* op = out.data();
#pragma omp parallel for schedule(static) collapse(2)
    for (int n = 0; n < N; ++n) {
      for (int g = 0; g < groups; ++g) {
        std::vector<T> cols(size_t(K * P));
        detail::im2col(xp + (int64_t(n) * Ci + int64_t(g) * Cig) * H * W, Cig, H, W, kh, kw,
                       stride, padding, OH, OW, cols.data());
        // serial GEMM here; parallelism is over (n, g)
        T* dst = op + (int64_t(n) * Co + int64_t(g) * Cog) * P;
        const T* wg = wp + int64_t(g) * Cog * K;
        for (int64_t i = 0; i < Cog; ++i) {
          T* c = dst + i * P;
          std::fill(c, c + P, T(0));
          const T* a = wg + i * K;
          for (int64_t k = 0; k < K; ++k) {
            T av = a[k];
            if (av == T(0)) continue;
            const T* b = cols.data() + k * P;
            for (int64_t j = 0; j < P; ++j) c[j] += av * b[j];
          }
        }
      }
    }
    if (bias.defined()) {
      const T* bp = bias.data();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < Co; ++c) {
          T* dst = op + (int64_t(n) * Co + c) * P;
          for (int64_t j = 0; j < P; ++j) dst[j] += bp[c];
        }
    }
  }

  std::vector<Tensor<T>> parents = {x, w};
  if (bias.defined()) parents.push_back(bias);
  auto backward = [stride, padding, groups, N, Ci, H, W, Co, kh, kw, OH, OW, Cig, Cog, K,
                   P](typename Tensor<T>::Node& self) {
    Tensor<T>& x = self.parents[0];
    Tensor<T>& w = self.parents[1];
    const T* go = self.grad.data();
    T* dx = Tensor<T>::parent_grad(self, 0);
    T* dw = Tensor<T>::parent_grad(self, 1);
    T* db = self.parents.size() > 2 ? Tensor<T>::parent_grad(self, 2) : nullptr;

    if (db) {
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < Co; ++c) {
          const T* src = go + (int64_t(n) * Co + c) * P;
          T acc = 0;
          for (int64_t j = 0; j < P; ++j) acc += src[j];
          db[c] += acc;
        }
    }
    if (!dx && !dw) return;

    // Per-sample weight-grad partials reduced in sample order keeps the
    // result independent of the thread count.
    std::vector<T> dw_parts;
    if (dw) dw_parts.assign(size_t(N) * size_t(w.numel()), T(0));
    const T* xp = x.data();
    const T* wp = w.data();
#pragma omp parallel for schedule(static) collapse(2)
    for (int n = 0; n < N; ++n) {
      for (int g = 0; g < groups; ++g) {
        std::vector<T> cols(size_t(K * P));
        detail::im2col(xp + (int64_t(n) * Ci + int64_t(g) * Cig) * H * W, Cig, H, W, kh, kw,
                       stride, padding, OH, OW, cols.data());
        const T* gog = go + (int64_t(n) * Co + int64_t(g) * Cog) * P;
        if (dw) {
          T* dwg = dw_parts.data() + int64_t(n) * w.numel() + int64_t(g) * Cog * K;
          detail::gemm_abt_acc(gog, cols.data(), dwg, Cog, P, K);
        }
        if (dx) {
          std::vector<T> dcols(size_t(K * P), T(0));
          // dcols[K,P] = Wg^T[K,Cog] * gog[Cog,P]
          const T* wg = wp + int64_t(g) * Cog * K;
          for (int64_t i = 0; i < Cog; ++i) {
            const T* grow = gog + i * P;
            const T* a = wg + i * K;
            for (int64_t k = 0; k < K; ++k) {
              T av = a[k];
              if (av == T(0)) continue;
              T* drow = dcols.data() + k * P;
              for (int64_t j = 0; j < P; ++j) drow[j] += av * grow[j];
            }
          }
          detail::col2im_acc(dcols.data(), Cig, H, W, kh, kw, stride, padding, OH, OW,
                             dx + (int64_t(n) * Ci + int64_t(g) * Cig) * H * W);
        }
      }
    }
    if (dw) {
      for (int n = 0; n < N; ++n) {
        const T* part = dw_parts.data() + int64_t(n) * w.numel();
        for (int64_t i = 0; i < w.numel(); ++i) dw[i] += part[i];
      }
    }
  };
  Tensor<T>::finish_op(out, std::move(parents), "conv2d", backward);
  return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int padding, int groups) {
  return conv2d(x, w, Tensor<T>(), stride, padding, groups);
}

// ---------------------------------------------------------------------------
// conv_transpose2d: x [N,Ci,H,W], w [Ci,Co,kh,kw], output (in-1)*stride + k.
// Forward is the input-gradient of conv2d with the same weight.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, int stride) {
  require(x.ndim() == 4 && w.ndim() == 4, "conv_transpose2d: x and w must be 4-D");
  require(stride >= 1, "conv_transpose2d: stride must be >= 1");
  const int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(w.dim(0) == Ci, "conv_transpose2d: weight dim 0 must equal input channels");
  const int Co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const int OH = (H - 1) * stride + kh, OW = (W - 1) * stride + kw;
  const int64_t K = int64_t(Co) * kh * kw;  // "column" rows w.r.t. the underlying conv
  const int64_t P = int64_t(H) * W;

  Tensor<T> out = Tensor<T>::zeros({N, Co, OH, OW});
  {
    const T* xp = x.data();
    const T* wp = w.data();
    T* op = out.data();
#pragma omp parallel for schedule(static)
    for (int n = 0; n < N; ++n) {
      // cols[K,P] = W^T[K,Ci] * x_n[Ci,P], then scatter into the output.
      std::vector<T> cols(size_t(K * P), T(0));
      const T* xn = xp + int64_t(n) * Ci * P;
      for (int64_t ci = 0; ci < Ci; ++ci) {
        const T* a = wp + ci * K;
        const T* xrow = xn + ci * P;
        for (int64_t k = 0; k < K; ++k) {
          T av = a[k];
          if (av == T(0)) continue;
          T* crow = cols.data() + k * P;
          for (int64_t j = 0; j < P; ++j) crow[j] += av * xrow[j];
        }
      }
      detail::col2im_acc(cols.data(), Co, OH, OW, kh, kw, stride, 0, H, W,
                         op + int64_t(n) * Co * OH * OW);
    }
  }

  auto backward = [stride, N, Ci, H, W, Co, kh, kw, OH, OW, K, P](typename Tensor<T>::Node& self) {
    Tensor<T>& x = self.parents[0];
    Tensor<T>& w = self.parents[1];
    const T* go = self.grad.data();
    T* dx = Tensor<T>::parent_grad(self, 0);
    T* dw = Tensor<T>::parent_grad(self, 1);
    if (!dx && !dw) return;
    std::vector<T> dw_parts;
    if (dw) dw_parts.assign(size_t(N) * size_t(w.numel()), T(0));
    const T* xp = x.data();
    const T* wp = w.data();
#pragma omp parallel for schedule(static)
    for (int n = 0; n < N; ++n) {
      // gcols = im2col(grad_out); both dx and dw ride on it.
      std::vector<T> gcols(size_t(K * P));
      detail::im2col(go + int64_t(n) * Co * OH * OW, Co, OH, OW, kh, kw, stride, 0, H, W,
                     gcols.data());
      if (dx) {
        // dx_n[Ci,P] = W[Ci,K] * gcols[K,P]
        T* dxn = dx + int64_t(n) * Ci * P;
        for (int64_t ci = 0; ci < Ci; ++ci) {
          const T* a = wp + ci * K;
          T* drow = dxn + ci * P;
          for (int64_t k = 0; k < K; ++k) {
            T av = a[k];
            if (av == T(0)) continue;
            const T* b = gcols.data() + k * P;
            for (int64_t j = 0; j < P; ++j) drow[j] += av * b[j];
          }
        }
      }
      if (dw) {
        // dw[Ci,K] += x_n[Ci,P] * gcols[K,P]^T
        detail::gemm_abt_acc(xp + int64_t(n) * Ci * P, gcols.data(),
                             dw_parts.data() + int64_t(n) * w.numel(), Ci, P, K);
      }
    }
    if (dw) {
      for (int n = 0; n < N; ++n) {
        const T* part = dw_parts.data() + int64_t(n) * w.numel();
        for (int64_t i = 0; i < w.numel(); ++i) dw[i] += part[i];
      }
    }
  };
  Tensor<T>::finish_op(out, {x, w}, "conv_transpose2d", backward);
  return out;
}

// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int k, int stride) {
  require(x.ndim() == 4, "maxpool2d: input must be 4-D");
  require(k >= 1 && stride >= 1, "maxpool2d: k and stride must be >= 1");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(H >= k && W >= k, "maxpool2d: window larger than input");
  const int OH = (H - k) / stride + 1, OW = (W - k) / stride + 1;

  Tensor<T> out = Tensor<T>::zeros({N, C, OH, OW});
  auto argmax = std::make_shared<std::vector<int64_t>>(size_t(out.numel()));
  {
    const T* xp = x.data();
    T* op = out.data();
    int64_t* am = argmax->data();
#pragma omp parallel for schedule(static)
    for (int64_t nc = 0; nc < int64_t(N) * C; ++nc) {
      const T* plane = xp + nc * H * W;
      for (int oy = 0; oy < OH; ++oy) {
        for (int ox = 0; ox < OW; ++ox) {
          T best = plane[int64_t(oy * stride) * W + ox * stride];
          int64_t besti = int64_t(oy * stride) * W + ox * stride;
          for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx) {
              int64_t idx = int64_t(oy * stride + dy) * W + (ox * stride + dx);
              if (plane[idx] > best) {  // first max wins ties
                best = plane[idx];
                besti = idx;
              }
            }
          int64_t o = nc * OH * OW + int64_t(oy) * OW + ox;
          op[o] = best;
          am[o] = besti;
        }
      }
    }
  }
  auto backward = [argmax, N, C, H, W, OH, OW](typename Tensor<T>::Node& self) {
    T* dx = Tensor<T>::parent_grad(self, 0);
    if (!dx) return;
    const T* go = self.grad.data();
    const int64_t* am = argmax->data();
    for (int64_t nc = 0; nc < int64_t(N) * C; ++nc) {
      T* dplane = dx + nc * H * W;
      const T* gplane = go + nc * OH * OW;
      const int64_t* aplane = am + nc * OH * OW;
      for (int64_t i = 0; i < int64_t(OH) * OW; ++i) dplane[aplane[i]] += gplane[i];
    }
  };
  Tensor<T>::finish_op(out, {x}, "maxpool2d", backward);
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xp = x.data();
  T* op = out.data();
  const int64_t n = x.numel();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) op[i] = xp[i] > T(0) ? xp[i] : T(0);
  auto backward = [n](typename Tensor<T>::Node& self) {
    T* dx = Tensor<T>::parent_grad(self, 0);
    if (!dx) return;
    const T* xp = self.parents[0].data();
    const T* go = self.grad.data();
    for (int64_t i = 0; i < n; ++i)
      if (xp[i] > T(0)) dx[i] += go[i];
  };
  Tensor<T>::finish_op(out, {x}, "relu", backward);
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization over [N,H,W] per channel. Training mode normalizes with
// batch statistics (biased variance) and folds them into the running buffers;
// eval mode uses the running buffers and errors if they were never populated.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      std::vector<T>& running_mean, std::vector<T>& running_var, bool& stats_ready,
                      bool training, T momentum = T(0.9), T eps = T(1e-5)) {
  require(x.ndim() == 4, "batchnorm2d: input must be 4-D");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(gamma.numel() == C && beta.numel() == C, "batchnorm2d: gamma/beta must have C entries");
  require(int(running_mean.size()) == C && int(running_var.size()) == C,
          "batchnorm2d: running stats size mismatch");
  const int64_t M = int64_t(N) * H * W;  // elements per channel
  if (training) require(M > 1, "batchnorm2d: training mode needs N*H*W > 1");
  if (!training) require(stats_ready, "batchnorm2d: eval mode before running stats were populated");

  auto mean = std::make_shared<std::vector<T>>(size_t(C));
  auto inv_std = std::make_shared<std::vector<T>>(size_t(C));
  const T* xp = x.data();
  if (training) {
#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      for (int n = 0; n < N; ++n) {
        const T* plane = xp + (int64_t(n) * C + c) * H * W;
        for (int64_t i = 0; i < int64_t(H) * W; ++i) s += double(plane[i]);
      }
      double m = s / double(M);
      double v = 0.0;
      for (int n = 0; n < N; ++n) {
        const T* plane = xp + (int64_t(n) * C + c) * H * W;
        for (int64_t i = 0; i < int64_t(H) * W; ++i) {
          double d = double(plane[i]) - m;
          v += d * d;
        }
      }
      v /= double(M);
      (*mean)[c] = T(m);
      (*inv_std)[c] = T(1.0 / std::sqrt(v + double(eps)));
      running_mean[c] = momentum * running_mean[c] + (T(1) - momentum) * T(m);
      running_var[c] = momentum * running_var[c] + (T(1) - momentum) * T(v);
    }
    stats_ready = true;
  } else {
    for (int c = 0; c < C; ++c) {
      (*mean)[c] = running_mean[c];
      (*inv_std)[c] = T(1.0 / std::sqrt(double(running_var[c]) + double(eps)));
    }
  }

  Tensor<T> out = Tensor<T>::zeros(x.shape());
  {
    T* op = out.data();
    const T* gp = gamma.data();
    const T* bp = beta.data();
#pragma omp parallel for schedule(static)
    for (int64_t nc = 0; nc < int64_t(N) * C; ++nc) {
      int c = int(nc % C);
      const T* src = xp + nc * H * W;
      T* dst = op + nc * H * W;
      const T mu = (*mean)[c], is = (*inv_std)[c], g = gp[c], b = bp[c];
      for (int64_t i = 0; i < int64_t(H) * W; ++i) dst[i] = g * (src[i] - mu) * is + b;
    }
  }

  auto backward = [mean, inv_std, training, N, C, H, W, M](typename Tensor<T>::Node& self) {
    const T* xp = self.parents[0].data();
    const T* gp = self.parents[1].data();
    const T* go = self.grad.data();
    T* dx = Tensor<T>::parent_grad(self, 0);
    T* dgamma = Tensor<T>::parent_grad(self, 1);
    T* dbeta = Tensor<T>::parent_grad(self, 2);
#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c) {
      const T mu = (*mean)[c], is = (*inv_std)[c];
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int n = 0; n < N; ++n) {
        const T* gplane = go + (int64_t(n) * C + c) * H * W;
        const T* xplane = xp + (int64_t(n) * C + c) * H * W;
        for (int64_t i = 0; i < int64_t(H) * W; ++i) {
          sum_dy += double(gplane[i]);
          sum_dy_xhat += double(gplane[i]) * double((xplane[i] - mu) * is);
        }
      }
      if (dbeta) dbeta[c] += T(sum_dy);
      if (dgamma) dgamma[c] += T(sum_dy_xhat);
      if (dx) {
        const T g = gp[c];
        if (training) {
          const T mdy = T(sum_dy / double(M));
          const T mdyx = T(sum_dy_xhat / double(M));
          for (int n = 0; n < N; ++n) {
            const T* gplane = go + (int64_t(n) * C + c) * H * W;
            const T* xplane = xp + (int64_t(n) * C + c) * H * W;
            T* dplane = dx + (int64_t(n) * C + c) * H * W;
            for (int64_t i = 0; i < int64_t(H) * W; ++i) {
              T xhat = (xplane[i] - mu) * is;
              dplane[i] += g * is * (gplane[i] - mdy - xhat * mdyx);
            }
          }
        } else {
          for (int n = 0; n < N; ++n) {
            const T* gplane = go + (int64_t(n) * C + c) * H * W;
            T* dplane = dx + (int64_t(n) * C + c) * H * W;
            for (int64_t i = 0; i < int64_t(H) * W; ++i) dplane[i] += g * is * gplane[i];
          }
        }
      }
    }
  };
  Tensor<T>::finish_op(out, {x, gamma, beta}, "batchnorm2d", backward);
  return out;
}

// ---------------------------------------------------------------------------
// Numerically stable softmax over the channel axis, per pixel.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  require(x.ndim() == 4, "softmax_channels: input must be 4-D");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t HW = int64_t(H) * W;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  {
    const T* xp = x.data();
    T* op = out.data();
#pragma omp parallel for schedule(static)
    for (int64_t np = 0; np < int64_t(N) * HW; ++np) {
      int64_t n = np / HW, p = np % HW;
      const T* src = xp + n * C * HW + p;
      T* dst = op + n * C * HW + p;
      T mx = src[0];
      for (int c = 1; c < C; ++c) mx = std::max(mx, src[c * HW]);
      double denom = 0.0;
      for (int c = 0; c < C; ++c) denom += std::exp(double(src[c * HW] - mx));
      for (int c = 0; c < C; ++c) dst[c * HW] = T(std::exp(double(src[c * HW] - mx)) / denom);
    }
  }
  auto backward = [N, C, HW](typename Tensor<T>::Node& self) {
    T* dx = Tensor<T>::parent_grad(self, 0);
    if (!dx) return;
    const T* y = self.data.data();
    const T* go = self.grad.data();
    for (int64_t np = 0; np < int64_t(N) * HW; ++np) {
      int64_t n = np / HW, p = np % HW;
      const T* yc = y + n * C * HW + p;
      const T* gc = go + n * C * HW + p;
      T* dc = dx + n * C * HW + p;
      double dot = 0.0;
      for (int c = 0; c < C; ++c) dot += double(gc[c * HW]) * double(yc[c * HW]);
      for (int c = 0; c < C; ++c) dc[c * HW] += yc[c * HW] * (gc[c * HW] - T(dot));
    }
  };
  Tensor<T>::finish_op(out, {x}, "softmax_channels", backward);
  return out;
}

// ---------------------------------------------------------------------------
// elementwise / shape ops
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "add: shape mismatch");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  const T* ap = a.data();
  const T* bp = b.data();
  T* op = out.data();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) op[i] = ap[i] + bp[i];
  auto backward = [n](typename Tensor<T>::Node& self) {
    const T* go = self.grad.data();
    for (size_t p = 0; p < 2; ++p) {
      T* d = Tensor<T>::parent_grad(self, p);
      if (d)
        for (int64_t i = 0; i < n; ++i) d[i] += go[i];
    }
  };
  Tensor<T>::finish_op(out, {a, b}, "add", backward);
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.numel() == b.numel(), "mul: element count mismatch");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  const T* ap = a.data();
  const T* bp = b.data();
  T* op = out.data();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) op[i] = ap[i] * bp[i];
  auto backward = [n](typename Tensor<T>::Node& self) {
    const T* go = self.grad.data();
    const T* ap = self.parents[0].data();
    const T* bp = self.parents[1].data();
    T* da = Tensor<T>::parent_grad(self, 0);
    T* db = Tensor<T>::parent_grad(self, 1);
    if (da)
      for (int64_t i = 0; i < n; ++i) da[i] += go[i] * bp[i];
    if (db)
      for (int64_t i = 0; i < n; ++i) db[i] += go[i] * ap[i];
  };
  Tensor<T>::finish_op(out, {a, b}, "mul", backward);
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  const T* ap = a.data();
  T* op = out.data();
  for (int64_t i = 0; i < n; ++i) op[i] = ap[i] * factor;
  auto backward = [n, factor](typename Tensor<T>::Node& self) {
    T* d = Tensor<T>::parent_grad(self, 0);
    if (!d) return;
    const T* go = self.grad.data();
    for (int64_t i = 0; i < n; ++i) d[i] += go[i] * factor;
  };
  Tensor<T>::finish_op(out, {a}, "scale", backward);
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros({1});
  double acc = 0.0;
  const T* ap = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) acc += double(ap[i]);
  out.data()[0] = T(acc);
  auto backward = [n = a.numel()](typename Tensor<T>::Node& self) {
    T* d = Tensor<T>::parent_grad(self, 0);
    if (!d) return;
    const T g = self.grad[0];
    for (int64_t i = 0; i < n; ++i) d[i] += g;
  };
  Tensor<T>::finish_op(out, {a}, "sum_all", backward);
  return out;
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  require(!parts.empty(), "concat_channels: no inputs");
  const int N = parts[0].dim(0), H = parts[0].dim(2), W = parts[0].dim(3);
  int Ctot = 0;
  for (const auto& p : parts) {
    require(p.ndim() == 4 && p.dim(0) == N && p.dim(2) == H && p.dim(3) == W,
            "concat_channels: inputs must agree on N,H,W");
    Ctot += p.dim(1);
  }
  Tensor<T> out = Tensor<T>::zeros({N, Ctot, H, W});
  const int64_t HW = int64_t(H) * W;
  {
    T* op = out.data();
    for (int n = 0; n < N; ++n) {
      int64_t coff = 0;
      for (const auto& p : parts) {
        const int Cp = p.dim(1);
        std::memcpy(op + (int64_t(n) * Ctot + coff) * HW, p.data() + int64_t(n) * Cp * HW,
                    size_t(Cp * HW) * sizeof(T));
        coff += Cp;
      }
    }
  }
  auto backward = [N, Ctot, HW](typename Tensor<T>::Node& self) {
    const T* go = self.grad.data();
    int64_t coff = 0;
    for (size_t pi = 0; pi < self.parents.size(); ++pi) {
      const int Cp = self.parents[pi].dim(1);
      T* d = Tensor<T>::parent_grad(self, pi);
      if (d) {
        for (int n = 0; n < N; ++n) {
          const T* src = go + (int64_t(n) * Ctot + coff) * HW;
          T* dst = d + int64_t(n) * Cp * HW;
          for (int64_t i = 0; i < int64_t(Cp) * HW; ++i) dst[i] += src[i];
        }
      }
      coff += Cp;
    }
  };
  Tensor<T>::finish_op(out, parts, "concat_channels", backward);
  return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int begin, int end) {
  require(x.ndim() == 4, "slice_channels: input must be 4-D");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(0 <= begin && begin < end && end <= C, "slice_channels: bad channel range");
  const int Cs = end - begin;
  const int64_t HW = int64_t(H) * W;
  Tensor<T> out = Tensor<T>::zeros({N, Cs, H, W});
  for (int n = 0; n < N; ++n)
    std::memcpy(out.data() + int64_t(n) * Cs * HW, x.data() + (int64_t(n) * C + begin) * HW,
                size_t(Cs * HW) * sizeof(T));
  auto backward = [N, C, Cs, HW, begin](typename Tensor<T>::Node& self) {
    T* d = Tensor<T>::parent_grad(self, 0);
    if (!d) return;
    const T* go = self.grad.data();
    for (int n = 0; n < N; ++n) {
      T* dst = d + (int64_t(n) * C + begin) * HW;
      const T* src = go + int64_t(n) * Cs * HW;
      for (int64_t i = 0; i < int64_t(Cs) * HW; ++i) dst[i] += src[i];
    }
  };
  Tensor<T>::finish_op(out, {x}, "slice_channels", backward);
  return out;
}

// Gather input channels by index (duplicates allowed); backward scatter-adds.
template <typename T>
Tensor<T> gather_channels(const Tensor<T>& x, const std::vector<int>& indices) {
  require(x.ndim() == 4, "gather_channels: input must be 4-D");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  for (int idx : indices) require(0 <= idx && idx < C, "gather_channels: index out of range");
  const int Cg = int(indices.size());
  const int64_t HW = int64_t(H) * W;
  Tensor<T> out = Tensor<T>::zeros({N, Cg, H, W});
  for (int n = 0; n < N; ++n)
    for (int j = 0; j < Cg; ++j)
      std::memcpy(out.data() + (int64_t(n) * Cg + j) * HW,
                  x.data() + (int64_t(n) * C + indices[j]) * HW, size_t(HW) * sizeof(T));
  auto idx = std::make_shared<std::vector<int>>(indices);
  auto backward = [idx, N, C, Cg, HW](typename Tensor<T>::Node& self) {
    T* d = Tensor<T>::parent_grad(self, 0);
    if (!d) return;
    const T* go = self.grad.data();
    for (int n = 0; n < N; ++n)
      for (int j = 0; j < Cg; ++j) {
        T* dst = d + (int64_t(n) * C + (*idx)[j]) * HW;
        const T* src = go + (int64_t(n) * Cg + j) * HW;
        for (int64_t i = 0; i < HW; ++i) dst[i] += src[i];
      }
  };
  Tensor<T>::finish_op(out, {x}, "gather_channels", backward);
  return out;
}

// Spatial crop (used to trim transposed-conv output to the skip grid).
template <typename T>
Tensor<T> crop_spatial(const Tensor<T>& x, int top, int left, int oh, int ow) {
  require(x.ndim() == 4, "crop_spatial: input must be 4-D");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(top >= 0 && left >= 0 && top + oh <= H && left + ow <= W, "crop_spatial: out of range");
  Tensor<T> out = Tensor<T>::zeros({N, C, oh, ow});
  for (int64_t nc = 0; nc < int64_t(N) * C; ++nc)
    for (int y = 0; y < oh; ++y)
      std::memcpy(out.data() + (nc * oh + y) * ow,
                  x.data() + (nc * H + top + y) * W + left, size_t(ow) * sizeof(T));
  auto backward = [N, C, H, W, top, left, oh, ow](typename Tensor<T>::Node& self) {
    T* d = Tensor<T>::parent_grad(self, 0);
    if (!d) return;
    const T* go = self.grad.data();
    for (int64_t nc = 0; nc < int64_t(N) * C; ++nc)
      for (int y = 0; y < oh; ++y) {
        T* dst = d + (nc * H + top + y) * W + left;
        const T* src = go + (nc * oh + y) * ow;
        for (int x2 = 0; x2 < ow; ++x2) dst[x2] += src[x2];
      }
  };
  Tensor<T>::finish_op(out, {x}, "crop_spatial", backward);
  return out;
}

// ---------------------------------------------------------------------------
// Cross-entropy on already-normalized class probabilities.
// loss = mean over pixels of -log(max(p_true, floor))
template <typename T>
Tensor<T> cross_entropy_probs(const Tensor<T>& probs, const LabelMap& labels,
                              double floor = 1e-12) {
  require(probs.ndim() == 4, "cross_entropy: probs must be [N,C,H,W]");
  const int N = probs.dim(0), C = probs.dim(1), H = probs.dim(2), W = probs.dim(3);
  require(labels.numel() == int64_t(N) * H * W, "cross_entropy: label map size mismatch");
  const int64_t HW = int64_t(H) * W;
  const T* pp = probs.data();
  double acc = 0.0;
  for (int64_t i = 0; i < int64_t(N) * HW; ++i) {
    int64_t n = i / HW, p = i % HW;
    int32_t lab = labels.v[size_t(i)];
    if (lab < 0 || lab >= C)
      fail("cross_entropy: label ", std::to_string(lab), " out of range [0,", std::to_string(C),
           ")");
    acc -= std::log(std::max(double(pp[(n * C + lab) * HW + p]), floor));
  }
  const int64_t count = int64_t(N) * HW;
  Tensor<T> out = Tensor<T>::scalar(T(acc / double(count)));
  auto labs = std::make_shared<std::vector<int32_t>>(labels.v);
  auto backward = [labs, N, C, HW, count, floor](typename Tensor<T>::Node& self) {
    T* d = Tensor<T>::parent_grad(self, 0);
    if (!d) return;
    const T* pp = self.parents[0].data();
    const T g = self.grad[0];
    for (int64_t i = 0; i < int64_t(N) * HW; ++i) {
      int64_t n = i / HW, p = i % HW;
      int64_t idx = (n * C + (*labs)[size_t(i)]) * HW + p;
      if (double(pp[idx]) > floor) d[idx] -= g / (T(count) * pp[idx]);
    }
  };
  Tensor<T>::finish_op(out, {probs}, "cross_entropy", backward);
  return out;
}

// Soft Dice loss over foreground classes: 1 - mean_c (2*sum(p*g)+eps)/(sum(p)+sum(g)+eps).
// Background (class 0) does not enter the average.
template <typename T>
Tensor<T> soft_dice_loss_probs(const Tensor<T>& probs, const LabelMap& labels,
                               double eps = 1e-6) {
  require(probs.ndim() == 4, "soft_dice: probs must be [N,C,H,W]");
  const int N = probs.dim(0), C = probs.dim(1), H = probs.dim(2), W = probs.dim(3);
  require(C >= 2, "soft_dice: need at least one foreground class");
  require(labels.numel() == int64_t(N) * H * W, "soft_dice: label map size mismatch");
  const int64_t HW = int64_t(H) * W;
  const int F = C - 1;  // foreground classes 1..C-1
  const T* pp = probs.data();

  auto num = std::make_shared<std::vector<double>>(size_t(C), 0.0);    // 2*sum(p*g)+eps
  auto den = std::make_shared<std::vector<double>>(size_t(C), 0.0);    // sum(p)+sum(g)+eps
  std::vector<double> sum_p(size_t(C), 0.0), sum_pg(size_t(C), 0.0);
  std::vector<int64_t> sum_g(size_t(C), 0);
  for (int64_t i = 0; i < int64_t(N) * HW; ++i) {
    int64_t n = i / HW, p = i % HW;
    int32_t lab = labels.v[size_t(i)];
    if (lab < 0 || lab >= C)
      fail("soft_dice: label ", std::to_string(lab), " out of range");
    sum_g[size_t(lab)] += 1;
    for (int c = 1; c < C; ++c) {
      double pv = double(pp[(n * C + c) * HW + p]);
      sum_p[size_t(c)] += pv;
      if (lab == c) sum_pg[size_t(c)] += pv;
    }
  }
  double mean_dice = 0.0;
  for (int c = 1; c < C; ++c) {
    (*num)[size_t(c)] = 2.0 * sum_pg[size_t(c)] + eps;
    (*den)[size_t(c)] = sum_p[size_t(c)] + double(sum_g[size_t(c)]) + eps;
    mean_dice += (*num)[size_t(c)] / (*den)[size_t(c)];
  }
  mean_dice /= double(F);

  Tensor<T> out = Tensor<T>::scalar(T(1.0 - mean_dice));
  auto labs = std::make_shared<std::vector<int32_t>>(labels.v);
  auto backward = [labs, num, den, N, C, HW, F](typename Tensor<T>::Node& self) {
    T* d = Tensor<T>::parent_grad(self, 0);
    if (!d) return;
    const T g = self.grad[0];
    for (int64_t i = 0; i < int64_t(N) * HW; ++i) {
      int64_t n = i / HW, p = i % HW;
      int32_t lab = (*labs)[size_t(i)];
      for (int c = 1; c < C; ++c) {
        double nc = (*num)[size_t(c)], dc = (*den)[size_t(c)];
        double gi = (lab == c) ? 1.0 : 0.0;
        // dD_c/dp = (2*g_i*den - num) / den^2; loss adds -1/F of it
        double dd = (2.0 * gi * dc - nc) / (dc * dc);
        d[(n * C + c) * HW + p] -= g * T(dd / double(F));
      }
    }
  };
  Tensor<T>::finish_op(out, {probs}, "soft_dice_loss", backward);
  return out;
}

}  // namespace cunet
