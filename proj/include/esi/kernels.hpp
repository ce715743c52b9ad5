#pragma once

// Dense compute kernels used by the autograd ops.
//
// Each kernel has two implementations: `esi::kernels::reference` holds the
// plain serial loops and is kept as the test oracle; `esi::kernels` holds the
// OpenMP-parallel, cache-blocked versions used in training. Both accumulate
// every output element in the same (ascending) reduction order, so a row's
// result never depends on how many other rows are in the batch or on the
// thread count.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace esi::kernels {

namespace reference {

// C[M,N] (+)= A[M,K] * B[K,N]
template <typename T>
void gemm_nn(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C, bool accumulate) {
  for (int64_t i = 0; i < M; ++i) {
    for (int64_t j = 0; j < N; ++j) {
      T acc = accumulate ? C[i * N + j] : T(0);
      for (int64_t k = 0; k < K; ++k) acc += A[i * K + k] * B[k * N + j];
      C[i * N + j] = acc;
    }
  }
}

// C[M,N] (+)= A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C, bool accumulate) {
  for (int64_t i = 0; i < M; ++i) {
    for (int64_t j = 0; j < N; ++j) {
      T acc = accumulate ? C[i * N + j] : T(0);
      for (int64_t k = 0; k < K; ++k) acc += A[i * K + k] * B[j * K + k];
      C[i * N + j] = acc;
    }
  }
}

// C[M,N] (+)= A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C, bool accumulate) {
  for (int64_t i = 0; i < M; ++i) {
    for (int64_t j = 0; j < N; ++j) {
      T acc = accumulate ? C[i * N + j] : T(0);
      for (int64_t k = 0; k < K; ++k) acc += A[k * M + i] * B[k * N + j];
      C[i * N + j] = acc;
    }
  }
}

// Channels-last depthwise conv, "same" padding, stride 1.
// x [B,L,C], w [K,C], bias [C] -> y [B,L,C]
template <typename T>
void depthwise_conv1d(int64_t B, int64_t L, int64_t C, int64_t K, const T* x, const T* w,
                      const T* bias, T* y) {
  const int64_t pad = K / 2;
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t t = 0; t < L; ++t) {
      for (int64_t c = 0; c < C; ++c) {
        T acc = bias[c];
        for (int64_t k = 0; k < K; ++k) {
          const int64_t s = t + k - pad;
          if (s >= 0 && s < L) acc += w[k * C + c] * x[(b * L + s) * C + c];
        }
        y[(b * L + t) * C + c] = acc;
      }
    }
  }
}

// Normalizes each row of x [rows, C]; writes y, and per-row mean / inverse std.
template <typename T>
void layer_norm(int64_t rows, int64_t C, const T* x, const T* gamma, const T* beta, T eps, T* y,
                T* mean, T* rstd) {
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x + r * C;
    double mu = 0.0;
    for (int64_t c = 0; c < C; ++c) mu += xr[c];
    mu /= static_cast<double>(C);
    double var = 0.0;
    for (int64_t c = 0; c < C; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(C);
    const double rs = 1.0 / std::sqrt(var + eps);
    mean[r] = static_cast<T>(mu);
    rstd[r] = static_cast<T>(rs);
    for (int64_t c = 0; c < C; ++c) {
      y[r * C + c] = static_cast<T>((xr[c] - mu) * rs) * gamma[c] + beta[c];
    }
  }
}

}  // namespace reference

namespace detail {
constexpr int64_t kRowTile = 4;
constexpr int64_t kDepthTile = 128;

// Rows [i0, i1) of C (+)= A * B with B given as [K,N].
template <typename T>
void gemm_nn_rows(int64_t i0, int64_t i1, int64_t N, int64_t K, const T* __restrict A,
                  const T* __restrict B, T* __restrict C, bool accumulate) {
  if (!accumulate) std::fill(C + i0 * N, C + i1 * N, T(0));
  for (int64_t k0 = 0; k0 < K; k0 += kDepthTile) {
    const int64_t k1 = std::min(K, k0 + kDepthTile);
    int64_t i = i0;
    for (; i + kRowTile <= i1; i += kRowTile) {
      T* __restrict c0 = C + (i + 0) * N;
      T* __restrict c1 = C + (i + 1) * N;
      T* __restrict c2 = C + (i + 2) * N;
      T* __restrict c3 = C + (i + 3) * N;
      for (int64_t k = k0; k < k1; ++k) {
        const T a0 = A[(i + 0) * K + k];
        const T a1 = A[(i + 1) * K + k];
        const T a2 = A[(i + 2) * K + k];
        const T a3 = A[(i + 3) * K + k];
        const T* __restrict b = B + k * N;
#pragma omp simd
        for (int64_t j = 0; j < N; ++j) {
          c0[j] += a0 * b[j];
          c1[j] += a1 * b[j];
          c2[j] += a2 * b[j];
          c3[j] += a3 * b[j];
        }
      }
    }
    for (; i < i1; ++i) {
      T* __restrict c = C + i * N;
      for (int64_t k = k0; k < k1; ++k) {
        const T a = A[i * K + k];
        const T* __restrict b = B + k * N;
#pragma omp simd
        for (int64_t j = 0; j < N; ++j) c[j] += a * b[j];
      }
    }
  }
}

template <typename T>
std::vector<T> transposed(int64_t rows, int64_t cols, const T* X) {
  std::vector<T> out(static_cast<size_t>(rows * cols));
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) out[c * rows + r] = X[r * cols + c];
  return out;
}

inline int64_t row_chunks(int64_t M, int64_t N, int64_t K) {
  // Keep each task at roughly >= 64k multiply-adds.
  const int64_t work = std::max<int64_t>(1, N * K);
  return std::max<int64_t>(1, std::min<int64_t>(M / detail::kRowTile + 1, (M * work) / 65536 + 1));
}
}  // namespace detail

template <typename T>
void gemm_nn(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C, bool accumulate) {
  const int64_t chunks = detail::row_chunks(M, N, K);
  const int64_t per = ((M + chunks - 1) / chunks + detail::kRowTile - 1) / detail::kRowTile *
                      detail::kRowTile;
#pragma omp parallel for schedule(static) if (chunks > 1)
  for (int64_t ch = 0; ch < chunks; ++ch) {
    const int64_t i0 = ch * per;
    const int64_t i1 = std::min(M, i0 + per);
    if (i0 < i1) detail::gemm_nn_rows(i0, i1, N, K, A, B, C, accumulate);
  }
}

template <typename T>
void gemm_nt(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C, bool accumulate) {
  const std::vector<T> bt = detail::transposed(N, K, B);  // [K,N]
  gemm_nn(M, N, K, A, bt.data(), C, accumulate);
}

template <typename T>
void gemm_tn(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C, bool accumulate) {
  const std::vector<T> at = detail::transposed(K, M, A);  // [M,K]
  gemm_nn(M, N, K, at.data(), B, C, accumulate);
}

template <typename T>
void depthwise_conv1d(int64_t B, int64_t L, int64_t C, int64_t K, const T* x, const T* w,
                      const T* bias, T* y) {
  const int64_t pad = K / 2;
#pragma omp parallel for schedule(static) if (B * L * C * K > 65536)
  for (int64_t bt = 0; bt < B * L; ++bt) {
    const int64_t b = bt / L;
    const int64_t t = bt % L;
    T* __restrict yr = y + bt * C;
    for (int64_t c = 0; c < C; ++c) yr[c] = bias[c];
    for (int64_t k = 0; k < K; ++k) {
      const int64_t s = t + k - pad;
      if (s < 0 || s >= L) continue;
      const T* __restrict xr = x + (b * L + s) * C;
      const T* __restrict wr = w + k * C;
#pragma omp simd
      for (int64_t c = 0; c < C; ++c) yr[c] += wr[c] * xr[c];
    }
  }
}

// dx (accumulated), dw (accumulated), dbias (accumulated) for depthwise_conv1d.
template <typename T>
void depthwise_conv1d_backward(int64_t B, int64_t L, int64_t C, int64_t K, const T* x,
                               const T* w, const T* dy, T* dx, T* dw, T* dbias) {
  const int64_t pad = K / 2;
  if (dx) {
#pragma omp parallel for schedule(static) if (B * L * C * K > 65536)
    for (int64_t bs = 0; bs < B * L; ++bs) {
      const int64_t b = bs / L;
      const int64_t s = bs % L;
      T* __restrict dxr = dx + bs * C;
      for (int64_t k = 0; k < K; ++k) {
        const int64_t t = s - k + pad;
        if (t < 0 || t >= L) continue;
        const T* __restrict dyr = dy + (b * L + t) * C;
        const T* __restrict wr = w + k * C;
#pragma omp simd
        for (int64_t c = 0; c < C; ++c) dxr[c] += wr[c] * dyr[c];
      }
    }
  }
  if (dw) {
#pragma omp parallel for schedule(static) if (B * L * C * K > 65536)
    for (int64_t k = 0; k < K; ++k) {
      T* __restrict dwr = dw + k * C;
      for (int64_t b = 0; b < B; ++b) {
        for (int64_t t = 0; t < L; ++t) {
          const int64_t s = t + k - pad;
          if (s < 0 || s >= L) continue;
          const T* __restrict xr = x + (b * L + s) * C;
          const T* __restrict dyr = dy + (b * L + t) * C;
#pragma omp simd
          for (int64_t c = 0; c < C; ++c) dwr[c] += xr[c] * dyr[c];
        }
      }
    }
  }
  if (dbias) {
    for (int64_t r = 0; r < B * L; ++r) {
      const T* dyr = dy + r * C;
      for (int64_t c = 0; c < C; ++c) dbias[c] += dyr[c];
    }
  }
}

template <typename T>
void layer_norm(int64_t rows, int64_t C, const T* x, const T* gamma, const T* beta, T eps, T* y,
                T* mean, T* rstd) {
#pragma omp parallel for schedule(static) if (rows * C > 65536)
  for (int64_t r = 0; r < rows; ++r) {
    reference::layer_norm<T>(1, C, x + r * C, gamma, beta, eps, y + r * C, mean + r, rstd + r);
  }
}

// Accumulates dx; dgamma/dbeta accumulated serially in row order.
template <typename T>
void layer_norm_backward(int64_t rows, int64_t C, const T* x, const T* gamma, const T* mean,
                         const T* rstd, const T* dy, T* dx, T* dgamma, T* dbeta) {
  if (dx) {
#pragma omp parallel for schedule(static) if (rows * C > 65536)
    for (int64_t r = 0; r < rows; ++r) {
      const T* xr = x + r * C;
      const T* dyr = dy + r * C;
      const double mu = mean[r];
      const double rs = rstd[r];
      double sum_g = 0.0;
      double sum_gx = 0.0;
      for (int64_t c = 0; c < C; ++c) {
        const double g = static_cast<double>(dyr[c]) * gamma[c];
        const double xh = (xr[c] - mu) * rs;
        sum_g += g;
        sum_gx += g * xh;
      }
      const double inv_c = 1.0 / static_cast<double>(C);
      for (int64_t c = 0; c < C; ++c) {
        const double g = static_cast<double>(dyr[c]) * gamma[c];
        const double xh = (xr[c] - mu) * rs;
        dx[r * C + c] += static_cast<T>(rs * (g - inv_c * sum_g - xh * inv_c * sum_gx));
      }
    }
  }
  if (dgamma || dbeta) {
    for (int64_t r = 0; r < rows; ++r) {
      const T* xr = x + r * C;
      const T* dyr = dy + r * C;
      for (int64_t c = 0; c < C; ++c) {
        if (dgamma) dgamma[c] += dyr[c] * static_cast<T>((xr[c] - mean[r]) * rstd[r]);
        if (dbeta) dbeta[c] += dyr[c];
      }
    }
  }
}

}  // namespace esi::kernels
