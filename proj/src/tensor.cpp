#include "m3b/tensor.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>

namespace m3b {

std::string Shape4::str() const {
  return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) +
         "x" + std::to_string(w);
}

static std::atomic<int> g_threads{0};

void set_num_threads(int n) {
  if (n > 0) {
    g_threads = n;
    omp_set_num_threads(n);
  }
}

int num_threads() {
  int n = g_threads.load();
  return n > 0 ? n : omp_get_max_threads();
}

namespace {

// ---------------------------------------------------------------------------
// Deterministic kernels. Parallel loops only ever split disjoint output
// regions and every element accumulates in a fixed order, so results are
// bitwise identical for any thread count.
// ---------------------------------------------------------------------------

// Fixed 8-lane reduction; vectorizes without relying on float reassociation.
template <typename T>
T vec_sum(const T* a, int64_t n) {
  T acc[8] = {};
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int u = 0; u < 8; ++u) acc[u] += a[i + u];
  T s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) +
        ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  for (; i < n; ++i) s += a[i];
  return s;
}

template <typename T>
T vec_dot(const T* a, const T* b, int64_t n) {
  T acc[8] = {};
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int u = 0; u < 8; ++u) acc[u] += a[i + u] * b[i + u];
  T s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) +
        ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

// C[M x N] (+)= A[M x K] * B[K x N], row-major.
template <typename T>
void gemm_nn(const T* A, const T* B, T* C, int64_t M, int64_t K, int64_t N,
             bool accumulate) {
  if (!accumulate) std::fill(C, C + M * N, T(0));
  constexpr int64_t JB = 256, KC = 256, MC = 32;
  const int64_t jblocks = (N + JB - 1) / JB;

  auto block = [&](int64_t i_lo, int64_t i_hi, int64_t j0) {
    const int64_t jb = std::min(JB, N - j0);
    for (int64_t k0 = 0; k0 < K; k0 += KC) {
      const int64_t k1 = std::min(k0 + KC, K);
      for (int64_t ii = i_lo; ii < i_hi; ii += MC) {
        const int64_t i1 = std::min(ii + MC, i_hi);
        for (int64_t k = k0; k < k1; ++k) {
          const T* brow = B + k * N + j0;
          for (int64_t i = ii; i < i1; ++i) {
            const T a = A[i * K + k];
            T* crow = C + i * N + j0;
            for (int64_t j = 0; j < jb; ++j) crow[j] += a * brow[j];
          }
        }
      }
    }
  };

  if (jblocks >= 2) {
#pragma omp parallel for schedule(static)
    for (int64_t jb = 0; jb < jblocks; ++jb) block(0, M, jb * JB);
  } else if (M >= 8) {
    const int nt = num_threads();
    const int64_t chunk = (M + nt - 1) / nt;
#pragma omp parallel for schedule(static)
    for (int t = 0; t < nt; ++t) {
      int64_t lo = t * chunk, hi = std::min(lo + chunk, M);
      if (lo < hi) block(lo, hi, 0);
    }
  } else {
    block(0, M, 0);
  }
}

// im2col in K x m layout (K = I*kH*kW rows, m = OH*OW columns) so that
// W[O x K] * col gives channel-major output planes directly.
template <typename T>
void im2col(const T* x, int I, int H, int W, int kH, int kW, int stride,
            int pad, int OH, int OW, T* col) {
  const int64_t m = int64_t(OH) * OW;
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < I; ++ci) {
    for (int kh = 0; kh < kH; ++kh) {
      for (int kw = 0; kw < kW; ++kw) {
        T* row = col + (int64_t(ci) * kH * kW + kh * kW + kw) * m;
        for (int oh = 0; oh < OH; ++oh) {
          T* dst = row + int64_t(oh) * OW;
          const int ih = oh * stride - pad + kh;
          if (ih < 0 || ih >= H) {
            std::fill(dst, dst + OW, T(0));
            continue;
          }
          const T* src = x + (int64_t(ci) * H + ih) * W;
          int lo = 0;
          while (lo < OW && lo * stride - pad + kw < 0) ++lo;
          int hi = OW;
          while (hi > lo && (hi - 1) * stride - pad + kw >= W) --hi;
          std::fill(dst, dst + lo, T(0));
          if (stride == 1) {
            if (hi > lo) std::memcpy(dst + lo, src + lo - pad + kw,
                                     sizeof(T) * size_t(hi - lo));
          } else {
            for (int ow = lo; ow < hi; ++ow)
              dst[ow] = src[ow * stride - pad + kw];
          }
          std::fill(dst + hi, dst + OW, T(0));
        }
      }
    }
  }
}

// dst[C x R] = src[R x C]^T, cache-blocked.
template <typename T>
void transpose(const T* src, T* dst, int64_t R, int64_t C) {
  constexpr int64_t B = 32;
#pragma omp parallel for schedule(static)
  for (int64_t i0 = 0; i0 < R; i0 += B) {
    const int64_t i1 = std::min(i0 + B, R);
    for (int64_t j0 = 0; j0 < C; j0 += B) {
      const int64_t j1 = std::min(j0 + B, C);
      for (int64_t i = i0; i < i1; ++i)
        for (int64_t j = j0; j < j1; ++j) dst[j * R + i] = src[i * C + j];
    }
  }
}

// Scatter-add transpose of im2col; parallel over input channels (disjoint
// destination planes).
template <typename T>
void col2im_add(const T* col, int I, int H, int W, int kH, int kW, int stride,
                int pad, int OH, int OW, T* dx) {
  const int64_t m = int64_t(OH) * OW;
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < I; ++ci) {
    for (int kh = 0; kh < kH; ++kh) {
      for (int kw = 0; kw < kW; ++kw) {
        const T* row = col + (int64_t(ci) * kH * kW + kh * kW + kw) * m;
        for (int oh = 0; oh < OH; ++oh) {
          const int ih = oh * stride - pad + kh;
          if (ih < 0 || ih >= H) continue;
          const T* src = row + int64_t(oh) * OW;
          T* dst = dx + (int64_t(ci) * H + ih) * W;
          int lo = 0;
          while (lo < OW && lo * stride - pad + kw < 0) ++lo;
          int hi = OW;
          while (hi > lo && (hi - 1) * stride - pad + kw >= W) --hi;
          for (int ow = lo; ow < hi; ++ow)
            dst[ow * stride - pad + kw] += src[ow];
        }
      }
    }
  }
}

template <typename T>
void check_same_shape(const TensorT<T>& a, const TensorT<T>& b,
                      const char* op) {
  if (!(a.shape() == b.shape()))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                a.shape().str() + " vs " + b.shape().str());
}

template <typename T>
std::vector<T>& grad_of(const std::shared_ptr<TensorStore<T>>& s) {
  return s->grad;
}

}  // namespace

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> conv2d(TapeT<T>* tape, const TensorT<T>& x, const TensorT<T>& w,
                  const TensorT<T>& bias, int stride, int pad) {
  const Shape4 xs = x.shape(), ws = w.shape();
  if (ws.c != xs.c)
    throw std::invalid_argument("conv2d: channel mismatch (input C=" +
                                std::to_string(xs.c) + ", kernel I=" +
                                std::to_string(ws.c) + ")");
  if (ws.h < 1 || ws.w < 1 || stride < 1 || pad < 0)
    throw std::invalid_argument("conv2d: bad kernel/stride/pad");
  const int OH = (xs.h + 2 * pad - ws.h) / stride + 1;
  const int OW = (xs.w + 2 * pad - ws.w) / stride + 1;
  if (xs.h + 2 * pad - ws.h < 0 || xs.w + 2 * pad - ws.w < 0 || OH < 1 ||
      OW < 1)
    throw std::invalid_argument("conv2d: non-positive output dims");
  if (bias.defined() && bias.numel() != ws.n)
    throw std::invalid_argument("conv2d: bias size != output channels");

  const int O = ws.n, I = xs.c, kH = ws.h, kW = ws.w;
  const int64_t K = int64_t(I) * kH * kW;
  const int64_t m = int64_t(OH) * OW;

  TensorT<T> out({xs.n, O, OH, OW});
  // bias seeds the accumulators so the summation order matches a plain
  // "s = b; s += w*x" loop exactly
  if (bias.defined()) {
    const T* b = bias.data();
    for (int64_t no = 0; no < int64_t(xs.n) * O; ++no)
      std::fill(out.data() + no * m, out.data() + (no + 1) * m, b[no % O]);
  }
  std::vector<T> col(size_t(K * m));
  for (int n = 0; n < xs.n; ++n) {
    im2col(x.data() + int64_t(n) * xs.c * xs.plane(), I, xs.h, xs.w, kH, kW,
           stride, pad, OH, OW, col.data());
    gemm_nn(w.data(), col.data(), out.data() + int64_t(n) * O * m, int64_t(O),
            K, m, bias.defined());
  }

  if (tape) {
    auto xs_p = x.store(), ws_p = w.store(), os_p = out.store();
    auto bs_p = bias.defined() ? bias.store() : nullptr;
    std::vector<typename TapeT<T>::Store> touched = {os_p, xs_p, ws_p};
    if (bs_p) touched.push_back(bs_p);
    tape->record(std::move(touched), [=]() {
      const T* g = os_p->grad.data();
      const int N = xs_p->shape.n, H = xs_p->shape.h, W = xs_p->shape.w;
      std::vector<T> col_b(size_t(K * m));
      std::vector<T> gt(size_t(m) * O);
      std::vector<T> dwt(size_t(K) * O);
      std::vector<T> wt(size_t(K) * O);
      for (int64_t o = 0; o < O; ++o)
        for (int64_t k = 0; k < K; ++k)
          wt[k * O + o] = ws_p->val[o * K + k];
      std::vector<T> colgrad(size_t(K * m));
      for (int n = 0; n < N; ++n) {
        const T* gi = g + int64_t(n) * O * m;
        im2col(xs_p->val.data() + int64_t(n) * I * H * W, I, H, W, kH, kW,
               stride, pad, OH, OW, col_b.data());
        // dW^T = col * G^T keeps both gemm operands in their fast layouts;
        // the batch accumulates in image order
        transpose(gi, gt.data(), int64_t(O), m);
        gemm_nn(col_b.data(), gt.data(), dwt.data(), K, m, int64_t(O), false);
        T* dw = ws_p->grad.data();
        for (int64_t o = 0; o < O; ++o)
          for (int64_t k = 0; k < K; ++k) dw[o * K + k] += dwt[k * O + o];
        gemm_nn(wt.data(), gi, colgrad.data(), K, int64_t(O), m, false);
        col2im_add(colgrad.data(), I, H, W, kH, kW, stride, pad, OH, OW,
                   xs_p->grad.data() + int64_t(n) * I * H * W);
      }
      if (bs_p) {
        for (int o = 0; o < O; ++o) {
          T s = T(0);
          for (int n = 0; n < N; ++n)
            s += vec_sum(g + (int64_t(n) * O + o) * m, m);
          bs_p->grad[size_t(o)] += s;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// depthwise_conv2d
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> depthwise_conv2d(TapeT<T>* tape, const TensorT<T>& x,
                            const TensorT<T>& w, int stride, int pad) {
  const Shape4 xs = x.shape(), ws = w.shape();
  if (ws.n != xs.c || ws.c != 1)
    throw std::invalid_argument(
        "depthwise_conv2d: weight channel count != input C");
  if (stride < 1 || pad < 0)
    throw std::invalid_argument("depthwise_conv2d: bad stride/pad");
  const int kH = ws.h, kW = ws.w;
  const int OH = (xs.h + 2 * pad - kH) / stride + 1;
  const int OW = (xs.w + 2 * pad - kW) / stride + 1;
  if (xs.h + 2 * pad - kH < 0 || OH < 1 || OW < 1)
    throw std::invalid_argument("depthwise_conv2d: non-positive output dims");

  TensorT<T> out({xs.n, xs.c, OH, OW});
  const int H = xs.h, W = xs.w;
#pragma omp parallel for schedule(static)
  for (int64_t nc = 0; nc < int64_t(xs.n) * xs.c; ++nc) {
    const int c = int(nc % xs.c);
    const T* xp = x.data() + nc * xs.plane();
    const T* wp = w.data() + int64_t(c) * kH * kW;
    T* op = out.data() + nc * int64_t(OH) * OW;
    for (int oh = 0; oh < OH; ++oh) {
      for (int ow = 0; ow < OW; ++ow) {
        T s = T(0);
        for (int kh = 0; kh < kH; ++kh) {
          const int ih = oh * stride - pad + kh;
          if (ih < 0 || ih >= H) continue;
          for (int kw = 0; kw < kW; ++kw) {
            const int iw = ow * stride - pad + kw;
            if (iw < 0 || iw >= W) continue;
            s += wp[kh * kW + kw] * xp[int64_t(ih) * W + iw];
          }
        }
        op[int64_t(oh) * OW + ow] = s;
      }
    }
  }

  if (tape) {
    auto xs_p = x.store(), ws_p = w.store(), os_p = out.store();
    tape->record({os_p, xs_p, ws_p}, [=]() {
      const int N = xs_p->shape.n, C = xs_p->shape.c;
      const T* g = os_p->grad.data();
      // dx: gather formulation, each input pixel summed independently
#pragma omp parallel for schedule(static)
      for (int64_t nc = 0; nc < int64_t(N) * C; ++nc) {
        const int c = int(nc % C);
        const T* wp = ws_p->val.data() + int64_t(c) * kH * kW;
        const T* gp = g + nc * int64_t(OH) * OW;
        T* dxp = xs_p->grad.data() + nc * int64_t(H) * W;
        for (int ih = 0; ih < H; ++ih) {
          for (int iw = 0; iw < W; ++iw) {
            T s = T(0);
            for (int kh = 0; kh < kH; ++kh) {
              const int t = ih + pad - kh;
              if (t < 0 || t % stride != 0) continue;
              const int oh = t / stride;
              if (oh >= OH) continue;
              for (int kw = 0; kw < kW; ++kw) {
                const int u = iw + pad - kw;
                if (u < 0 || u % stride != 0) continue;
                const int ow = u / stride;
                if (ow >= OW) continue;
                s += wp[kh * kW + kw] * gp[int64_t(oh) * OW + ow];
              }
            }
            dxp[int64_t(ih) * W + iw] += s;
          }
        }
      }
      // dW: per-channel, batch summed in order
#pragma omp parallel for schedule(static)
      for (int c = 0; c < C; ++c) {
        T* dwp = ws_p->grad.data() + int64_t(c) * kH * kW;
        for (int n = 0; n < N; ++n) {
          const T* xp = xs_p->val.data() + (int64_t(n) * C + c) * H * W;
          const T* gp = g + (int64_t(n) * C + c) * OH * OW;
          for (int kh = 0; kh < kH; ++kh) {
            for (int kw = 0; kw < kW; ++kw) {
              T s = T(0);
              for (int oh = 0; oh < OH; ++oh) {
                const int ih = oh * stride - pad + kh;
                if (ih < 0 || ih >= H) continue;
                for (int ow = 0; ow < OW; ++ow) {
                  const int iw = ow * stride - pad + kw;
                  if (iw < 0 || iw >= W) continue;
                  s += gp[int64_t(oh) * OW + ow] * xp[int64_t(ih) * W + iw];
                }
              }
              dwp[kh * kW + kw] += s;
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// channel pooling / concat
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> channel_mean(TapeT<T>* tape, const TensorT<T>& x) {
  const Shape4 s = x.shape();
  if (s.c < 1) throw std::invalid_argument("channel_mean: C must be >= 1");
  TensorT<T> out({s.n, 1, s.h, s.w});
  const int64_t pl = s.plane();
  const T inv = T(1) / T(s.c);
#pragma omp parallel for schedule(static)
  for (int n = 0; n < s.n; ++n) {
    const T* xp = x.data() + int64_t(n) * s.c * pl;
    T* op = out.data() + int64_t(n) * pl;
    for (int64_t i = 0; i < pl; ++i) {
      T acc = T(0);
      for (int c = 0; c < s.c; ++c) acc += xp[int64_t(c) * pl + i];
      op[i] = acc * inv;
    }
  }
  if (tape) {
    auto xs_p = x.store(), os_p = out.store();
    tape->record({os_p, xs_p}, [=]() {
      const Shape4 xs = xs_p->shape;
      const int64_t pl = xs.plane();
      const T inv = T(1) / T(xs.c);
      const T* g = os_p->grad.data();
      T* dx = xs_p->grad.data();
#pragma omp parallel for schedule(static)
      for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c)
          for (int64_t i = 0; i < pl; ++i)
            dx[(int64_t(n) * xs.c + c) * pl + i] += g[int64_t(n) * pl + i] * inv;
    });
  }
  return out;
}

template <typename T>
TensorT<T> channel_max(TapeT<T>* tape, const TensorT<T>& x) {
  const Shape4 s = x.shape();
  if (s.c < 1) throw std::invalid_argument("channel_max: C must be >= 1");
  TensorT<T> out({s.n, 1, s.h, s.w});
  const int64_t pl = s.plane();
  // argmax kept for the backward route; ties go to the lowest channel
  auto argmax = std::make_shared<std::vector<int32_t>>(size_t(s.n) * pl);
#pragma omp parallel for schedule(static)
  for (int n = 0; n < s.n; ++n) {
    const T* xp = x.data() + int64_t(n) * s.c * pl;
    T* op = out.data() + int64_t(n) * pl;
    int32_t* am = argmax->data() + int64_t(n) * pl;
    for (int64_t i = 0; i < pl; ++i) {
      T best = xp[i];
      int32_t bc = 0;
      for (int c = 1; c < s.c; ++c) {
        const T v = xp[int64_t(c) * pl + i];
        if (v > best) {
          best = v;
          bc = c;
        }
      }
      op[i] = best;
      am[i] = bc;
    }
  }
  if (tape) {
    auto xs_p = x.store(), os_p = out.store();
    tape->record({os_p, xs_p}, [=]() {
      const Shape4 xs = xs_p->shape;
      const int64_t pl = xs.plane();
      const T* g = os_p->grad.data();
      T* dx = xs_p->grad.data();
#pragma omp parallel for schedule(static)
      for (int n = 0; n < xs.n; ++n) {
        const int32_t* am = argmax->data() + int64_t(n) * pl;
        for (int64_t i = 0; i < pl; ++i)
          dx[(int64_t(n) * xs.c + am[i]) * pl + i] += g[int64_t(n) * pl + i];
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> concat_channels(TapeT<T>* tape, const TensorT<T>& a,
                           const TensorT<T>& b) {
  const Shape4 as = a.shape(), bs = b.shape();
  if (as.n != bs.n || as.h != bs.h || as.w != bs.w)
    throw std::invalid_argument("concat_channels: spatial/batch mismatch " +
                                as.str() + " vs " + bs.str());
  TensorT<T> out({as.n, as.c + bs.c, as.h, as.w});
  const int64_t pl = as.plane();
  for (int n = 0; n < as.n; ++n) {
    std::memcpy(out.data() + int64_t(n) * (as.c + bs.c) * pl,
                a.data() + int64_t(n) * as.c * pl,
                sizeof(T) * size_t(as.c * pl));
    std::memcpy(out.data() + (int64_t(n) * (as.c + bs.c) + as.c) * pl,
                b.data() + int64_t(n) * bs.c * pl,
                sizeof(T) * size_t(bs.c * pl));
  }
  if (tape) {
    auto as_p = a.store(), bs_p = b.store(), os_p = out.store();
    tape->record({os_p, as_p, bs_p}, [=]() {
      const int ac = as_p->shape.c, bc = bs_p->shape.c;
      const int64_t pl = as_p->shape.plane();
      const T* g = os_p->grad.data();
      for (int n = 0; n < as_p->shape.n; ++n) {
        T* da = as_p->grad.data() + int64_t(n) * ac * pl;
        T* db = bs_p->grad.data() + int64_t(n) * bc * pl;
        const T* gn = g + int64_t(n) * (ac + bc) * pl;
        for (int64_t i = 0; i < int64_t(ac) * pl; ++i) da[i] += gn[i];
        for (int64_t i = 0; i < int64_t(bc) * pl; ++i)
          db[i] += gn[int64_t(ac) * pl + i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> relu6(TapeT<T>* tape, const TensorT<T>& x) {
  TensorT<T> out(x.shape());
  const int64_t n = x.numel();
  const T* xp = x.data();
  T* op = out.data();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i)
    op[i] = std::min(std::max(xp[i], T(0)), T(6));
  if (tape) {
    auto xs_p = x.store(), os_p = out.store();
    tape->record({os_p, xs_p}, [=]() {
      const int64_t n = int64_t(os_p->val.size());
      const T* y = os_p->val.data();
      const T* g = os_p->grad.data();
      T* dx = xs_p->grad.data();
#pragma omp parallel for schedule(static)
      for (int64_t i = 0; i < n; ++i)
        if (y[i] > T(0) && y[i] < T(6)) dx[i] += g[i];
    });
  }
  return out;
}

template <typename T>
TensorT<T> sigmoid(TapeT<T>* tape, const TensorT<T>& x) {
  TensorT<T> out(x.shape());
  const int64_t n = x.numel();
  const T* xp = x.data();
  T* op = out.data();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) op[i] = T(1) / (T(1) + std::exp(-xp[i]));
  if (tape) {
    auto xs_p = x.store(), os_p = out.store();
    tape->record({os_p, xs_p}, [=]() {
      const int64_t n = int64_t(os_p->val.size());
      const T* y = os_p->val.data();
      const T* g = os_p->grad.data();
      T* dx = xs_p->grad.data();
#pragma omp parallel for schedule(static)
      for (int64_t i = 0; i < n; ++i) dx[i] += g[i] * y[i] * (T(1) - y[i]);
    });
  }
  return out;
}

template <typename T>
TensorT<T> add(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "add");
  TensorT<T> out(a.shape());
  const int64_t n = a.numel();
  const T* ap = a.data();
  const T* bp = b.data();
  T* op = out.data();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) op[i] = ap[i] + bp[i];
  if (tape) {
    auto as_p = a.store(), bs_p = b.store(), os_p = out.store();
    tape->record({os_p, as_p, bs_p}, [=]() {
      const int64_t n = int64_t(os_p->val.size());
      const T* g = os_p->grad.data();
      T* da = as_p->grad.data();
      T* db = bs_p->grad.data();
      for (int64_t i = 0; i < n; ++i) {
        da[i] += g[i];
        db[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> mul(TapeT<T>* tape, const TensorT<T>& a, const TensorT<T>& b) {
  check_same_shape(a, b, "mul");
  TensorT<T> out(a.shape());
  const int64_t n = a.numel();
  const T* ap = a.data();
  const T* bp = b.data();
  T* op = out.data();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) op[i] = ap[i] * bp[i];
  if (tape) {
    auto as_p = a.store(), bs_p = b.store(), os_p = out.store();
    tape->record({os_p, as_p, bs_p}, [=]() {
      const int64_t n = int64_t(os_p->val.size());
      const T* g = os_p->grad.data();
      T* da = as_p->grad.data();
      T* db = bs_p->grad.data();
      const T* av = as_p->val.data();
      const T* bv = bs_p->val.data();
      for (int64_t i = 0; i < n; ++i) {
        da[i] += g[i] * bv[i];
        db[i] += g[i] * av[i];
      }
    });
  }
  return out;
}

template <typename T>
TensorT<T> scale(TapeT<T>* tape, const TensorT<T>& x, T factor) {
  TensorT<T> out(x.shape());
  const int64_t n = x.numel();
  const T* xp = x.data();
  T* op = out.data();
  for (int64_t i = 0; i < n; ++i) op[i] = xp[i] * factor;
  if (tape) {
    auto xs_p = x.store(), os_p = out.store();
    tape->record({os_p, xs_p}, [=]() {
      const int64_t n = int64_t(os_p->val.size());
      const T* g = os_p->grad.data();
      T* dx = xs_p->grad.data();
      for (int64_t i = 0; i < n; ++i) dx[i] += g[i] * factor;
    });
  }
  return out;
}

template <typename T>
TensorT<T> sum(TapeT<T>* tape, const TensorT<T>& x) {
  TensorT<T> out({1, 1, 1, 1});
  out.data()[0] = vec_sum(x.data(), x.numel());
  if (tape) {
    auto xs_p = x.store(), os_p = out.store();
    tape->record({os_p, xs_p}, [=]() {
      const T g = os_p->grad[0];
      T* dx = xs_p->grad.data();
      const int64_t n = int64_t(xs_p->val.size());
      for (int64_t i = 0; i < n; ++i) dx[i] += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// batchnorm
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> batchnorm(TapeT<T>* tape, const TensorT<T>& x,
                     BatchNormParams<T>& p, BnMode mode) {
  const Shape4 s = x.shape();
  if (p.gamma.numel() != s.c)
    throw std::invalid_argument("batchnorm: C mismatch (params " +
                                std::to_string(p.gamma.numel()) + ", input " +
                                std::to_string(s.c) + ")");
  TensorT<T> out(s);
  const int64_t pl = s.plane();
  const int64_t M = int64_t(s.n) * pl;  // elements per channel

  auto mean_v = std::make_shared<std::vector<T>>(size_t(s.c));
  auto invstd_v = std::make_shared<std::vector<T>>(size_t(s.c));

#pragma omp parallel for schedule(static)
  for (int c = 0; c < s.c; ++c) {
    T mu, var;
    if (mode == BnMode::kTrain) {
      T acc = T(0), acc2 = T(0);
      for (int n = 0; n < s.n; ++n) {
        const T* xp = x.data() + (int64_t(n) * s.c + c) * pl;
        acc += vec_sum(xp, pl);
        acc2 += vec_dot(xp, xp, pl);
      }
      mu = acc / T(M);
      var = acc2 / T(M) - mu * mu;
      if (var < T(0)) var = T(0);  // numerical guard
    } else {
      mu = p.running_mean.data()[c];
      var = p.running_var.data()[c];
    }
    const T invstd = T(1) / std::sqrt(var + p.eps);
    (*mean_v)[size_t(c)] = mu;
    (*invstd_v)[size_t(c)] = invstd;
    const T ga = p.gamma.data()[c], be = p.beta.data()[c];
    for (int n = 0; n < s.n; ++n) {
      const T* xp = x.data() + (int64_t(n) * s.c + c) * pl;
      T* op = out.data() + (int64_t(n) * s.c + c) * pl;
      for (int64_t i = 0; i < pl; ++i)
        op[i] = ga * (xp[i] - mu) * invstd + be;
    }
    if (mode == BnMode::kTrain) {
      p.running_mean.data()[c] =
          p.momentum * p.running_mean.data()[c] + (T(1) - p.momentum) * mu;
      p.running_var.data()[c] =
          p.momentum * p.running_var.data()[c] + (T(1) - p.momentum) * var;
    }
  }

  if (tape) {
    auto xs_p = x.store(), os_p = out.store();
    auto ga_p = p.gamma.store(), be_p = p.beta.store();
    const bool train = mode == BnMode::kTrain;
    tape->record({os_p, xs_p, ga_p, be_p}, [=]() {
      const Shape4 xs = xs_p->shape;
      const int64_t pl = xs.plane();
      const int64_t M = int64_t(xs.n) * pl;
      const T* g = os_p->grad.data();
#pragma omp parallel for schedule(static)
      for (int c = 0; c < xs.c; ++c) {
        const T mu = (*mean_v)[size_t(c)];
        const T invstd = (*invstd_v)[size_t(c)];
        const T ga = ga_p->val[size_t(c)];
        T sg = T(0), sgx = T(0);
        for (int n = 0; n < xs.n; ++n) {
          const int64_t off = (int64_t(n) * xs.c + c) * pl;
          const T* gp = g + off;
          const T* xp = xs_p->val.data() + off;
          sg += vec_sum(gp, pl);
          for (int64_t i = 0; i < pl; ++i)
            sgx += gp[i] * (xp[i] - mu) * invstd;
        }
        ga_p->grad[size_t(c)] += sgx;
        be_p->grad[size_t(c)] += sg;
        for (int n = 0; n < xs.n; ++n) {
          const int64_t off = (int64_t(n) * xs.c + c) * pl;
          const T* gp = g + off;
          const T* xp = xs_p->val.data() + off;
          T* dx = xs_p->grad.data() + off;
          if (train) {
            for (int64_t i = 0; i < pl; ++i) {
              const T xhat = (xp[i] - mu) * invstd;
              dx[i] += ga * invstd *
                       (gp[i] - sg / T(M) - xhat * sgx / T(M));
            }
          } else {
            for (int64_t i = 0; i < pl; ++i) dx[i] += ga * invstd * gp[i];
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// upsample_bilinear (factor 2, half-pixel centers, edges clamped)
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> upsample_bilinear2x(TapeT<T>* tape, const TensorT<T>& x) {
  const Shape4 s = x.shape();
  const int OH = s.h * 2, OW = s.w * 2;
  TensorT<T> out({s.n, s.c, OH, OW});

  auto make_axis = [](int out_n, int in_n, std::vector<int>& i0,
                      std::vector<int>& i1, std::vector<T>& f) {
    i0.resize(size_t(out_n));
    i1.resize(size_t(out_n));
    f.resize(size_t(out_n));
    for (int o = 0; o < out_n; ++o) {
      double src = (o + 0.5) / 2.0 - 0.5;
      if (src < 0) src = 0;
      if (src > in_n - 1) src = in_n - 1;
      const int lo = int(src);
      i0[size_t(o)] = lo;
      i1[size_t(o)] = std::min(lo + 1, in_n - 1);
      f[size_t(o)] = T(src - lo);
    }
  };
  auto y0 = std::make_shared<std::vector<int>>();
  auto y1 = std::make_shared<std::vector<int>>();
  auto fy = std::make_shared<std::vector<T>>();
  auto x0 = std::make_shared<std::vector<int>>();
  auto x1 = std::make_shared<std::vector<int>>();
  auto fx = std::make_shared<std::vector<T>>();
  make_axis(OH, s.h, *y0, *y1, *fy);
  make_axis(OW, s.w, *x0, *x1, *fx);

#pragma omp parallel for schedule(static)
  for (int64_t nc = 0; nc < int64_t(s.n) * s.c; ++nc) {
    const T* xp = x.data() + nc * s.plane();
    T* op = out.data() + nc * int64_t(OH) * OW;
    for (int oy = 0; oy < OH; ++oy) {
      const T* r0 = xp + int64_t((*y0)[size_t(oy)]) * s.w;
      const T* r1 = xp + int64_t((*y1)[size_t(oy)]) * s.w;
      const T wy = (*fy)[size_t(oy)];
      for (int ox = 0; ox < OW; ++ox) {
        const int a = (*x0)[size_t(ox)], b = (*x1)[size_t(ox)];
        const T wx = (*fx)[size_t(ox)];
        const T top = r0[a] + wx * (r0[b] - r0[a]);
        const T bot = r1[a] + wx * (r1[b] - r1[a]);
        op[int64_t(oy) * OW + ox] = top + wy * (bot - top);
      }
    }
  }

  if (tape) {
    auto xs_p = x.store(), os_p = out.store();
    tape->record({os_p, xs_p}, [=]() {
      const Shape4 xs = xs_p->shape;
      const T* g = os_p->grad.data();
#pragma omp parallel for schedule(static)
      for (int64_t nc = 0; nc < int64_t(xs.n) * xs.c; ++nc) {
        T* dx = xs_p->grad.data() + nc * xs.plane();
        const T* gp = g + nc * int64_t(OH) * OW;
        for (int oy = 0; oy < OH; ++oy) {
          const int ya = (*y0)[size_t(oy)], yb = (*y1)[size_t(oy)];
          const T wy = (*fy)[size_t(oy)];
          for (int ox = 0; ox < OW; ++ox) {
            const int xa = (*x0)[size_t(ox)], xb = (*x1)[size_t(ox)];
            const T wx = (*fx)[size_t(ox)];
            const T gv = gp[int64_t(oy) * OW + ox];
            dx[int64_t(ya) * xs.w + xa] += (1 - wy) * (1 - wx) * gv;
            dx[int64_t(ya) * xs.w + xb] += (1 - wy) * wx * gv;
            dx[int64_t(yb) * xs.w + xa] += wy * (1 - wx) * gv;
            dx[int64_t(yb) * xs.w + xb] += wy * wx * gv;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> soft_dice_loss(TapeT<T>* tape, const TensorT<T>& pred,
                          const TensorT<T>& target) {
  check_same_shape(pred, target, "soft_dice_loss");
  const T smooth = T(1);
  const int64_t n = pred.numel();
  const T inter = vec_dot(pred.data(), target.data(), n);
  const T sp = vec_sum(pred.data(), n);
  const T st = vec_sum(target.data(), n);
  const T A = T(2) * inter + smooth;
  const T B = sp + st + smooth;
  TensorT<T> out({1, 1, 1, 1});
  out.data()[0] = T(1) - A / B;
  if (tape) {
    auto ps_p = pred.store(), ts_p = target.store(), os_p = out.store();
    tape->record({os_p, ps_p, ts_p}, [=]() {
      const T g = os_p->grad[0];
      const T* tp = ts_p->val.data();
      T* dp = ps_p->grad.data();
      const int64_t n = int64_t(ps_p->val.size());
      const T invB2 = T(1) / (B * B);
      for (int64_t i = 0; i < n; ++i)
        dp[i] += g * (A - T(2) * tp[i] * B) * invB2;
    });
  }
  return out;
}

template <typename T>
TensorT<T> bce_loss(TapeT<T>* tape, const TensorT<T>& pred,
                    const TensorT<T>& target) {
  check_same_shape(pred, target, "bce_loss");
  const T lo = T(1e-7), hi = T(1) - T(1e-7);
  const int64_t n = pred.numel();
  const T* pp = pred.data();
  const T* tp = target.data();
  T acc[8] = {};
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int u = 0; u < 8; ++u) {
      const T p = std::clamp(pp[i + u], lo, hi);
      acc[u] -= tp[i + u] * std::log(p) + (T(1) - tp[i + u]) * std::log(T(1) - p);
    }
  T s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) +
        ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  for (; i < n; ++i) {
    const T p = std::clamp(pp[i], lo, hi);
    s -= tp[i] * std::log(p) + (T(1) - tp[i]) * std::log(T(1) - p);
  }
  TensorT<T> out({1, 1, 1, 1});
  out.data()[0] = s / T(n);
  if (tape) {
    auto ps_p = pred.store(), ts_p = target.store(), os_p = out.store();
    tape->record({os_p, ps_p, ts_p}, [=]() {
      const T g = os_p->grad[0];
      const int64_t n = int64_t(ps_p->val.size());
      const T* pp = ps_p->val.data();
      const T* tp = ts_p->val.data();
      T* dp = ps_p->grad.data();
      const T invn = T(1) / T(n);
      for (int64_t i = 0; i < n; ++i) {
        if (pp[i] <= lo || pp[i] >= hi) continue;  // clamped: zero slope
        dp[i] += g * invn * (pp[i] - tp[i]) / (pp[i] * (T(1) - pp[i]));
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// backward driver / adam
// ---------------------------------------------------------------------------

template <typename T>
void backward(TapeT<T>& tape, const TensorT<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw std::invalid_argument("backward: loss is not a scalar");
  if (!tape.produced(loss))
    throw std::invalid_argument("backward: loss was not produced on this tape");
  std::unordered_set<TensorStore<T>*> seen;
  for (auto& node : tape.nodes())
    for (auto& st : node.touched)
      if (seen.insert(st.get()).second)
        st->grad.assign(st->val.size(), T(0));
  loss.store()->grad[0] = T(1);
  tape.for_each_reverse([](typename TapeT<T>::Node& node) { node.fn(); });
  tape.clear();
}

template <typename T>
void adam_step(TensorT<T>& param, AdamState<T>& state, T lr) {
  if (lr <= T(0)) throw std::invalid_argument("adam_step: lr must be > 0");
  if (!param.has_grad())
    throw std::invalid_argument("adam_step: parameter has no gradient");
  auto& g = param.grad();
  const size_t n = g.size();
  for (size_t i = 0; i < n; ++i)
    if (!std::isfinite(g[i]))
      throw std::runtime_error(
          "adam_step: non-finite gradient at index " + std::to_string(i) +
          ", step aborted");
  if (state.m.empty()) {
    state.m.assign(n, T(0));
    state.v.assign(n, T(0));
  }
  if (state.m.size() != n)
    throw std::invalid_argument("adam_step: state/parameter size mismatch");
  state.t += 1;
  const T b1 = state.beta1, b2 = state.beta2;
  const T c1 = T(1) - std::pow(b1, T(state.t));
  const T c2 = T(1) - std::pow(b2, T(state.t));
  T* p = param.data();
  for (size_t i = 0; i < n; ++i) {
    state.m[i] = b1 * state.m[i] + (T(1) - b1) * g[i];
    state.v[i] = b2 * state.v[i] + (T(1) - b2) * g[i] * g[i];
    const T mhat = state.m[i] / c1;
    const T vhat = state.v[i] / c2;
    p[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
  }
}

// ---------------------------------------------------------------------------
// explicit instantiations (float for training, double for verification)
// ---------------------------------------------------------------------------

#define M3B_INSTANTIATE_OPS(T)                                                 \
  template TensorT<T> conv2d<T>(TapeT<T>*, const TensorT<T>&,                  \
                                const TensorT<T>&, const TensorT<T>&, int,     \
                                int);                                          \
  template TensorT<T> depthwise_conv2d<T>(TapeT<T>*, const TensorT<T>&,        \
                                          const TensorT<T>&, int, int);        \
  template TensorT<T> channel_mean<T>(TapeT<T>*, const TensorT<T>&);           \
  template TensorT<T> channel_max<T>(TapeT<T>*, const TensorT<T>&);            \
  template TensorT<T> concat_channels<T>(TapeT<T>*, const TensorT<T>&,         \
                                         const TensorT<T>&);                   \
  template TensorT<T> relu6<T>(TapeT<T>*, const TensorT<T>&);                  \
  template TensorT<T> sigmoid<T>(TapeT<T>*, const TensorT<T>&);                \
  template TensorT<T> add<T>(TapeT<T>*, const TensorT<T>&,                     \
                             const TensorT<T>&);                               \
  template TensorT<T> mul<T>(TapeT<T>*, const TensorT<T>&,                     \
                             const TensorT<T>&);                               \
  template TensorT<T> scale<T>(TapeT<T>*, const TensorT<T>&, T);               \
  template TensorT<T> sum<T>(TapeT<T>*, const TensorT<T>&);                    \
  template TensorT<T> batchnorm<T>(TapeT<T>*, const TensorT<T>&,               \
                                   BatchNormParams<T>&, BnMode);               \
  template TensorT<T> upsample_bilinear2x<T>(TapeT<T>*, const TensorT<T>&);    \
  template TensorT<T> soft_dice_loss<T>(TapeT<T>*, const TensorT<T>&,          \
                                        const TensorT<T>&);                    \
  template TensorT<T> bce_loss<T>(TapeT<T>*, const TensorT<T>&,                \
                                  const TensorT<T>&);                          \
  template void backward<T>(TapeT<T>&, const TensorT<T>&);                     \
  template void adam_step<T>(TensorT<T>&, AdamState<T>&, T);

M3B_INSTANTIATE_OPS(float)
M3B_INSTANTIATE_OPS(double)

}  // namespace m3b
