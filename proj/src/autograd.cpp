#include "esi/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "esi/kernels.hpp"

namespace esi {

namespace {
thread_local bool g_grad_enabled = true;
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool flag) { g_grad_enabled = flag; }

template <typename T>
void backward(const Var<T>& root) {
  require_shape(root.value().numel() == 1, "backward() needs a scalar root, got " +
                                               shape_str(root.shape()));
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->ensure_grad().data[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->grad.numel() == n->value.numel()) n->backward_fn();
  }
}

namespace ops {

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  require_shape(wv.rank() == 2 && xv.cols() == wv.dim(0),
                "linear: input " + shape_str(xv.shape) + " vs weight " + shape_str(wv.shape));
  const int64_t R = xv.rows(), K = wv.dim(0), N = wv.dim(1);
  Shape out_shape = xv.shape;
  out_shape.back() = N;
  Tensor<T> out(out_shape);
  if (bias.defined()) {
    require_shape(bias.value().numel() == N, "linear: bias size mismatch");
    for (int64_t r = 0; r < R; ++r) std::copy_n(bias.value().ptr(), N, out.ptr() + r * N);
  }
  kernels::gemm_nn(R, N, K, xv.ptr(), wv.ptr(), out.ptr(), bias.defined());
  Var<T> res(std::move(out));
  if (needs_grad<T>({&x, &w, &bias})) {
    Node<T>* o = res.node();
    Node<T>* xn = x.node();
    Node<T>* wn = w.node();
    Node<T>* bn = bias.defined() ? bias.node() : nullptr;
    attach<T>(res, {&x, &w, &bias}, [o, xn, wn, bn, R, K, N]() {
      const T* dy = o->grad.ptr();
      if (xn->requires_grad)
        kernels::gemm_nt(R, K, N, dy, wn->value.ptr(), xn->ensure_grad().ptr(), true);
      if (wn->requires_grad)
        kernels::gemm_tn(K, N, R, xn->value.ptr(), dy, wn->ensure_grad().ptr(), true);
      if (bn && bn->requires_grad) {
        T* db = bn->ensure_grad().ptr();
        for (int64_t r = 0; r < R; ++r)
          for (int64_t j = 0; j < N; ++j) db[j] += dy[r * N + j];
      }
    });
  }
  return res;
}

template <typename T>
Var<T> matmul_nt(const Var<T>& x, const Var<T>& w) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  require_shape(wv.rank() == 2 && xv.cols() == wv.dim(1),
                "matmul_nt: input " + shape_str(xv.shape) + " vs weight " + shape_str(wv.shape));
  const int64_t R = xv.rows(), K = wv.dim(1), N = wv.dim(0);
  Shape out_shape = xv.shape;
  out_shape.back() = N;
  Tensor<T> out(out_shape);
  kernels::gemm_nt(R, N, K, xv.ptr(), wv.ptr(), out.ptr(), false);
  Var<T> res(std::move(out));
  if (needs_grad<T>({&x, &w})) {
    Node<T>* o = res.node();
    Node<T>* xn = x.node();
    Node<T>* wn = w.node();
    attach<T>(res, {&x, &w}, [o, xn, wn, R, K, N]() {
      const T* dy = o->grad.ptr();
      if (xn->requires_grad)
        kernels::gemm_nn(R, K, N, dy, wn->value.ptr(), xn->ensure_grad().ptr(), true);
      if (wn->requires_grad)
        kernels::gemm_tn(N, K, R, dy, xn->value.ptr(), wn->ensure_grad().ptr(), true);
    });
  }
  return res;
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_shape(a.value().numel() == b.value().numel(),
                "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  const T* bv = b.value().ptr();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  Var<T> res(std::move(out));
  if (needs_grad<T>({&a, &b})) {
    Node<T>* o = res.node();
    Node<T>* an = a.node();
    Node<T>* bn = b.node();
    attach<T>(res, {&a, &b}, [o, an, bn]() {
      for (Node<T>* n : {an, bn}) {
        if (!n->requires_grad) continue;
        T* g = n->ensure_grad().ptr();
        const T* dy = o->grad.ptr();
        for (int64_t i = 0; i < o->grad.numel(); ++i) g[i] += dy[i];
      }
    });
  }
  return res;
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  return weighted_sum<T>({a}, {factor});
}

template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& factors) {
  require_shape(!terms.empty() && terms.size() == factors.size(), "weighted_sum: arity");
  Tensor<T> out(terms[0].shape());
  for (size_t t = 0; t < terms.size(); ++t) {
    require_shape(terms[t].value().numel() == out.numel(), "weighted_sum: shape mismatch");
    const T* v = terms[t].value().ptr();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += factors[t] * v[i];
  }
  Var<T> res(std::move(out));
  bool any = false;
  for (const auto& t : terms) any = any || needs_grad<T>({&t});
  if (any) {
    Node<T>* o = res.node();
    std::vector<Node<T>*> nodes;
    for (const auto& t : terms) nodes.push_back(t.node());
    Node<T>* r = res.node();
    r->requires_grad = true;
    for (const auto& t : terms) r->parents.push_back(t.node_ptr());
    r->backward_fn = [o, nodes, factors]() {
      for (size_t t = 0; t < nodes.size(); ++t) {
        if (!nodes[t]->requires_grad) continue;
        T* g = nodes[t]->ensure_grad().ptr();
        for (int64_t i = 0; i < o->grad.numel(); ++i) g[i] += factors[t] * o->grad[i];
      }
    };
  }
  return res;
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape);
  const T inv_sqrt2 = T(0.70710678118654752440);
#pragma omp parallel for schedule(static) if (xv.numel() > 65536)
  for (int64_t i = 0; i < xv.numel(); ++i) {
    out[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * inv_sqrt2));
  }
  Var<T> res(std::move(out));
  if (needs_grad<T>({&x})) {
    Node<T>* o = res.node();
    Node<T>* xn = x.node();
    attach<T>(res, {&x}, [o, xn, inv_sqrt2]() {
      const T inv_sqrt_2pi = T(0.39894228040143267794);
      T* g = xn->ensure_grad().ptr();
      const T* xs = xn->value.ptr();
      const T* dy = o->grad.ptr();
      const int64_t n = o->grad.numel();
#pragma omp parallel for schedule(static) if (n > 65536)
      for (int64_t i = 0; i < n; ++i) {
        const T cdf = T(0.5) * (T(1) + std::erf(xs[i] * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * xs[i] * xs[i]);
        g[i] += dy[i] * (cdf + xs[i] * pdf);
      }
    });
  }
  return res;
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const Tensor<T>& xv = x.value();
  const int64_t C = xv.cols(), R = xv.rows();
  require_shape(gamma.value().numel() == C && beta.value().numel() == C,
                "layer_norm: affine size mismatch for " + shape_str(xv.shape));
  Tensor<T> out(xv.shape);
  std::vector<T> mean(R), rstd(R);
  kernels::layer_norm(R, C, xv.ptr(), gamma.value().ptr(), beta.value().ptr(), eps, out.ptr(),
                      mean.data(), rstd.data());
  Var<T> res(std::move(out));
  if (needs_grad<T>({&x, &gamma, &beta})) {
    Node<T>* o = res.node();
    Node<T>* xn = x.node();
    Node<T>* gn = gamma.node();
    Node<T>* bn = beta.node();
    attach<T>(res, {&x, &gamma, &beta},
              [o, xn, gn, bn, R, C, mean = std::move(mean), rstd = std::move(rstd)]() {
                kernels::layer_norm_backward(
                    R, C, xn->value.ptr(), gn->value.ptr(), mean.data(), rstd.data(),
                    o->grad.ptr(), xn->requires_grad ? xn->ensure_grad().ptr() : nullptr,
                    gn->requires_grad ? gn->ensure_grad().ptr() : nullptr,
                    bn->requires_grad ? bn->ensure_grad().ptr() : nullptr);
              });
  }
  return res;
}

template <typename T>
Var<T> grn(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const Tensor<T>& xv = x.value();
  require_shape(xv.rank() == 3, "grn: expects [B, L, C], got " + shape_str(xv.shape));
  const int64_t B = xv.dim(0), L = xv.dim(1), C = xv.dim(2);
  require_shape(gamma.value().numel() == C && beta.value().numel() == C, "grn: affine size");
  std::vector<T> gx(B * C), nx(B * C), denom(B);
  for (int64_t b = 0; b < B; ++b) {
    std::vector<double> sq(C, 0.0);
    for (int64_t t = 0; t < L; ++t) {
      const T* xr = xv.ptr() + (b * L + t) * C;
      for (int64_t c = 0; c < C; ++c) sq[c] += static_cast<double>(xr[c]) * xr[c];
    }
    double mean = 0.0;
    for (int64_t c = 0; c < C; ++c) {
      gx[b * C + c] = static_cast<T>(std::sqrt(sq[c]));
      mean += std::sqrt(sq[c]);
    }
    mean /= static_cast<double>(C);
    denom[b] = static_cast<T>(mean + eps);
    for (int64_t c = 0; c < C; ++c) nx[b * C + c] = gx[b * C + c] / denom[b];
  }
  Tensor<T> out(xv.shape);
  const T* g = gamma.value().ptr();
  const T* be = beta.value().ptr();
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t t = 0; t < L; ++t) {
      const int64_t off = (b * L + t) * C;
      for (int64_t c = 0; c < C; ++c) {
        out[off + c] = g[c] * (xv[off + c] * nx[b * C + c]) + be[c] + xv[off + c];
      }
    }
  }
  Var<T> res(std::move(out));
  if (needs_grad<T>({&x, &gamma, &beta})) {
    Node<T>* o = res.node();
    Node<T>* xn = x.node();
    Node<T>* gn = gamma.node();
    Node<T>* bn = beta.node();
    attach<T>(res, {&x, &gamma, &beta},
              [o, xn, gn, bn, B, L, C, gx = std::move(gx), nx = std::move(nx),
               denom = std::move(denom)]() {
                const T* dy = o->grad.ptr();
                const T* xs = xn->value.ptr();
                const T* gam = gn->value.ptr();
                T* dgam = gn->requires_grad ? gn->ensure_grad().ptr() : nullptr;
                T* dbeta = bn->requires_grad ? bn->ensure_grad().ptr() : nullptr;
                T* dx = xn->requires_grad ? xn->ensure_grad().ptr() : nullptr;
                std::vector<double> dn(C), dg(C);
                for (int64_t b = 0; b < B; ++b) {
                  std::fill(dn.begin(), dn.end(), 0.0);
                  for (int64_t t = 0; t < L; ++t) {
                    const int64_t off = (b * L + t) * C;
                    for (int64_t c = 0; c < C; ++c) {
                      const T d = dy[off + c];
                      if (dgam) dgam[c] += d * xs[off + c] * nx[b * C + c];
                      if (dbeta) dbeta[c] += d;
                      dn[c] += static_cast<double>(d) * gam[c] * xs[off + c];
                    }
                  }
                  if (!dx) continue;
                  const double den = denom[b];
                  double cross = 0.0;
                  for (int64_t c = 0; c < C; ++c) cross += dn[c] * gx[b * C + c];
                  cross /= den * den * static_cast<double>(C);
                  for (int64_t c = 0; c < C; ++c) dg[c] = dn[c] / den - cross;
                  for (int64_t t = 0; t < L; ++t) {
                    const int64_t off = (b * L + t) * C;
                    for (int64_t c = 0; c < C; ++c) {
                      const T gcol = gx[b * C + c];
                      const double via_norm =
                          gcol > T(0) ? dg[c] * xs[off + c] / static_cast<double>(gcol) : 0.0;
                      dx[off + c] += static_cast<T>(dy[off + c] * (T(1) + gam[c] * nx[b * C + c]) +
                                                    via_norm);
                    }
                  }
                }
              });
  }
  return res;
}

template <typename T>
Var<T> depthwise_conv1d(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  const Tensor<T>& xv = x.value();
  require_shape(xv.rank() == 3, "depthwise_conv1d: expects [B, L, C]");
  const int64_t B = xv.dim(0), L = xv.dim(1), C = xv.dim(2), K = w.value().dim(0);
  require_shape(w.value().dim(1) == C && bias.value().numel() == C,
                "depthwise_conv1d: weight " + shape_str(w.shape()) + " vs channels " +
                    std::to_string(C));
  Tensor<T> out(xv.shape);
  kernels::depthwise_conv1d(B, L, C, K, xv.ptr(), w.value().ptr(), bias.value().ptr(), out.ptr());
  Var<T> res(std::move(out));
  if (needs_grad<T>({&x, &w, &bias})) {
    Node<T>* o = res.node();
    Node<T>* xn = x.node();
    Node<T>* wn = w.node();
    Node<T>* bn = bias.node();
    attach<T>(res, {&x, &w, &bias}, [o, xn, wn, bn, B, L, C, K]() {
      kernels::depthwise_conv1d_backward(
          B, L, C, K, xn->value.ptr(), wn->value.ptr(), o->grad.ptr(),
          xn->requires_grad ? xn->ensure_grad().ptr() : nullptr,
          wn->requires_grad ? wn->ensure_grad().ptr() : nullptr,
          bn->requires_grad ? bn->ensure_grad().ptr() : nullptr);
    });
  }
  return res;
}

template <typename T>
Var<T> unfold(const Var<T>& x, int64_t kernel, int64_t stride) {
  const Tensor<T>& xv = x.value();
  require_shape(xv.rank() == 3 && kernel >= 1 && stride >= 1, "unfold: expects [B, L, C]");
  const int64_t B = xv.dim(0), L = xv.dim(1), C = xv.dim(2);
  require_shape(L >= kernel, "unfold: length " + std::to_string(L) + " shorter than kernel " +
                                 std::to_string(kernel));
  const int64_t P = (L - kernel) / stride + 1;
  const int64_t win = kernel * C;
  Tensor<T> out({B, P, win});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t p = 0; p < P; ++p)
      std::copy_n(xv.ptr() + (b * L + p * stride) * C, win, out.ptr() + (b * P + p) * win);
  Var<T> res(std::move(out));
  if (needs_grad<T>({&x})) {
    Node<T>* o = res.node();
    Node<T>* xn = x.node();
    attach<T>(res, {&x}, [o, xn, B, L, C, P, win, stride]() {
      T* dx = xn->ensure_grad().ptr();
      const T* dy = o->grad.ptr();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t p = 0; p < P; ++p) {
          T* dst = dx + (b * L + p * stride) * C;
          const T* src = dy + (b * P + p) * win;
          for (int64_t i = 0; i < win; ++i) dst[i] += src[i];
        }
    });
  }
  return res;
}

template <typename T>
Var<T> embedding(const std::vector<int32_t>& ids, const Shape& ids_shape, const Var<T>& table) {
  const int64_t V = table.value().dim(0), C = table.value().dim(1);
  require_shape(static_cast<int64_t>(ids.size()) == shape_numel(ids_shape),
                "embedding: ids size does not match shape");
  Shape out_shape = ids_shape;
  out_shape.push_back(C);
  Tensor<T> out(out_shape);
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= V) {
      throw std::out_of_range("token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                              std::to_string(V));
    }
    std::copy_n(table.value().ptr() + ids[i] * C, C, out.ptr() + i * C);
  }
  Var<T> res(std::move(out));
  if (needs_grad<T>({&table})) {
    Node<T>* o = res.node();
    Node<T>* tn = table.node();
    attach<T>(res, {&table}, [o, tn, ids, C]() {
      T* g = tn->ensure_grad().ptr();
      for (size_t i = 0; i < ids.size(); ++i)
        for (int64_t c = 0; c < C; ++c) g[ids[i] * C + c] += o->grad[i * C + c];
    });
  }
  return res;
}

template <typename T>
Var<T> add_positional(const Var<T>& x, const Var<T>& pos) {
  const Tensor<T>& xv = x.value();
  require_shape(xv.rank() == 3, "add_positional: expects [B, L, C]");
  const int64_t B = xv.dim(0), L = xv.dim(1), C = xv.dim(2);
  require_shape(pos.value().dim(0) >= L && pos.value().dim(1) == C,
                "add_positional: sequence length " + std::to_string(L) + " exceeds table " +
                    shape_str(pos.shape()));
  Tensor<T> out = xv;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < L * C; ++i) out[b * L * C + i] += pos.value()[i];
  Var<T> res(std::move(out));
  if (needs_grad<T>({&x, &pos})) {
    Node<T>* o = res.node();
    Node<T>* xn = x.node();
    Node<T>* pn = pos.node();
    attach<T>(res, {&x, &pos}, [o, xn, pn, B, L, C]() {
      const T* dy = o->grad.ptr();
      if (xn->requires_grad) {
        T* g = xn->ensure_grad().ptr();
        for (int64_t i = 0; i < B * L * C; ++i) g[i] += dy[i];
      }
      if (pn->requires_grad) {
        T* g = pn->ensure_grad().ptr();
        for (int64_t b = 0; b < B; ++b)
          for (int64_t i = 0; i < L * C; ++i) g[i] += dy[b * L * C + i];
      }
    });
  }
  return res;
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads,
                 const std::vector<uint8_t>* key_valid, bool causal) {
  const Tensor<T>& qv = q.value();
  const Tensor<T>& kv = k.value();
  const Tensor<T>& vv = v.value();
  require_shape(qv.rank() == 3 && kv.rank() == 3 && vv.rank() == 3, "attention: rank-3 inputs");
  const int64_t B = qv.dim(0), Lq = qv.dim(1), W = qv.dim(2), Lk = kv.dim(1);
  require_shape(kv.dim(0) == B && vv.dim(0) == B && kv.dim(2) == W && vv.dim(2) == W &&
                    vv.dim(1) == Lk,
                "attention: q " + shape_str(qv.shape) + " k " + shape_str(kv.shape) + " v " +
                    shape_str(vv.shape));
  require_shape(heads > 0 && W % heads == 0, "attention: width not divisible by heads");
  require_shape(!causal || Lq == Lk, "attention: causal mask needs Lq == Lk");
  require_shape(!key_valid || static_cast<int64_t>(key_valid->size()) == B * Lk,
                "attention: key mask size");
  const int64_t H = heads, dh = W / H;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<uint8_t> mask = key_valid ? *key_valid : std::vector<uint8_t>(B * Lk, 1);

  Tensor<T> out({B, Lq, W});
  std::vector<T> probs(static_cast<size_t>(B * H * Lq * Lk), T(0));
#pragma omp parallel for schedule(static) if (B * H * Lq * Lk * dh > 65536)
  for (int64_t bh = 0; bh < B * H; ++bh) {
    const int64_t b = bh / H, h = bh % H;
    std::vector<double> s(Lk);
    for (int64_t i = 0; i < Lq; ++i) {
      const T* qi = qv.ptr() + (b * Lq + i) * W + h * dh;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t j = 0; j < Lk; ++j) {
        if (!mask[b * Lk + j] || (causal && j > i)) {
          s[j] = -std::numeric_limits<double>::infinity();
          continue;
        }
        const T* kj = kv.ptr() + (b * Lk + j) * W + h * dh;
        T dot = T(0);
        for (int64_t d = 0; d < dh; ++d) dot += qi[d] * kj[d];
        s[j] = static_cast<double>(dot * scale);
        mx = std::max(mx, s[j]);
      }
      T* p = probs.data() + (bh * Lq + i) * Lk;
      T* oi = out.ptr() + (b * Lq + i) * W + h * dh;
      if (mx == -std::numeric_limits<double>::infinity()) continue;
      double z = 0.0;
      for (int64_t j = 0; j < Lk; ++j) {
        s[j] = std::exp(s[j] - mx);
        z += s[j];
      }
      for (int64_t j = 0; j < Lk; ++j) {
        p[j] = static_cast<T>(s[j] / z);
        if (p[j] == T(0)) continue;
        const T* vj = vv.ptr() + (b * Lk + j) * W + h * dh;
        for (int64_t d = 0; d < dh; ++d) oi[d] += p[j] * vj[d];
      }
    }
  }

  Var<T> res(std::move(out));
  if (needs_grad<T>({&q, &k, &v})) {
    Node<T>* o = res.node();
    Node<T>* qn = q.node();
    Node<T>* kn = k.node();
    Node<T>* vn = v.node();
    attach<T>(res, {&q, &k, &v}, [o, qn, kn, vn, B, Lq, Lk, W, H, dh, scale,
                                  probs = std::move(probs)]() {
      T* dq = qn->requires_grad ? qn->ensure_grad().ptr() : nullptr;
      T* dk = kn->requires_grad ? kn->ensure_grad().ptr() : nullptr;
      T* dv = vn->requires_grad ? vn->ensure_grad().ptr() : nullptr;
      const T* dout = o->grad.ptr();
      const T* qs = qn->value.ptr();
      const T* ks = kn->value.ptr();
      const T* vs = vn->value.ptr();
#pragma omp parallel for schedule(static) if (B * H * Lq * Lk * dh > 65536)
      for (int64_t bh = 0; bh < B * H; ++bh) {
        const int64_t b = bh / H, h = bh % H;
        std::vector<T> dp(Lk);
        for (int64_t i = 0; i < Lq; ++i) {
          const T* p = probs.data() + (bh * Lq + i) * Lk;
          const T* doi = dout + (b * Lq + i) * W + h * dh;
          T row_dot = T(0);
          for (int64_t j = 0; j < Lk; ++j) {
            if (p[j] == T(0)) {
              dp[j] = T(0);
              continue;
            }
            const T* vj = vs + (b * Lk + j) * W + h * dh;
            T acc = T(0);
            for (int64_t d = 0; d < dh; ++d) acc += doi[d] * vj[d];
            dp[j] = acc;
            row_dot += p[j] * acc;
            if (dv) {
              T* dvj = dv + (b * Lk + j) * W + h * dh;
              for (int64_t d = 0; d < dh; ++d) dvj[d] += p[j] * doi[d];
            }
          }
          const T* qi = qs + (b * Lq + i) * W + h * dh;
          T* dqi = dq ? dq + (b * Lq + i) * W + h * dh : nullptr;
          for (int64_t j = 0; j < Lk; ++j) {
            if (p[j] == T(0)) continue;
            const T ds = p[j] * (dp[j] - row_dot) * scale;
            const T* kj = ks + (b * Lk + j) * W + h * dh;
            if (dqi)
              for (int64_t d = 0; d < dh; ++d) dqi[d] += ds * kj[d];
            if (dk) {
              T* dkj = dk + (b * Lk + j) * W + h * dh;
              for (int64_t d = 0; d < dh; ++d) dkj[d] += ds * qi[d];
            }
          }
        }
      }
    });
  }
  return res;
}

template <typename T>
Var<T> select_position(const Var<T>& x, int64_t pos) {
  const Tensor<T>& xv = x.value();
  require_shape(xv.rank() == 3 && pos >= 0 && pos < xv.dim(1), "select_position: bad index");
  const int64_t B = xv.dim(0), L = xv.dim(1), C = xv.dim(2);
  Tensor<T> out({B, C});
  for (int64_t b = 0; b < B; ++b) std::copy_n(xv.ptr() + (b * L + pos) * C, C, out.ptr() + b * C);
  Var<T> res(std::move(out));
  if (needs_grad<T>({&x})) {
    Node<T>* o = res.node();
    Node<T>* xn = x.node();
    attach<T>(res, {&x}, [o, xn, B, L, C, pos]() {
      T* g = xn->ensure_grad().ptr();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) g[(b * L + pos) * C + c] += o->grad[b * C + c];
    });
  }
  return res;
}

template <typename T>
Var<T> broadcast_batch(const Var<T>& v, int64_t batch) {
  const int64_t C = v.value().numel();
  Tensor<T> out({batch, 1, C});
  for (int64_t b = 0; b < batch; ++b) std::copy_n(v.value().ptr(), C, out.ptr() + b * C);
  Var<T> res(std::move(out));
  if (needs_grad<T>({&v})) {
    Node<T>* o = res.node();
    Node<T>* vn = v.node();
    attach<T>(res, {&v}, [o, vn, batch, C]() {
      T* g = vn->ensure_grad().ptr();
      for (int64_t b = 0; b < batch; ++b)
        for (int64_t c = 0; c < C; ++c) g[c] += o->grad[b * C + c];
    });
  }
  return res;
}

template <typename T>
Var<T> l2_normalize(const Var<T>& x, T eps) {
  const Tensor<T>& xv = x.value();
  const int64_t R = xv.rows(), C = xv.cols();
  Tensor<T> out(xv.shape);
  std::vector<T> norms(R);
  std::vector<uint8_t> clamped(R, 0);
  for (int64_t r = 0; r < R; ++r) {
    double sq = 0.0;
    for (int64_t c = 0; c < C; ++c) sq += static_cast<double>(xv[r * C + c]) * xv[r * C + c];
    double n = std::sqrt(sq);
    if (n < static_cast<double>(eps)) {
      n = static_cast<double>(eps);
      clamped[r] = 1;
    }
    norms[r] = static_cast<T>(n);
    for (int64_t c = 0; c < C; ++c) out[r * C + c] = static_cast<T>(xv[r * C + c] / n);
  }
  Var<T> res(std::move(out));
  if (needs_grad<T>({&x})) {
    Node<T>* o = res.node();
    Node<T>* xn = x.node();
    attach<T>(res, {&x}, [o, xn, R, C, norms = std::move(norms), clamped = std::move(clamped)]() {
      T* g = xn->ensure_grad().ptr();
      const T* y = o->value.ptr();
      const T* dy = o->grad.ptr();
      for (int64_t r = 0; r < R; ++r) {
        if (clamped[r]) {
          for (int64_t c = 0; c < C; ++c) g[r * C + c] += dy[r * C + c] / norms[r];
          continue;
        }
        T dot = T(0);
        for (int64_t c = 0; c < C; ++c) dot += y[r * C + c] * dy[r * C + c];
        for (int64_t c = 0; c < C; ++c)
          g[r * C + c] += (dy[r * C + c] - y[r * C + c] * dot) / norms[r];
      }
    });
  }
  return res;
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value();
  out.reshape(std::move(shape));
  Var<T> res(std::move(out));
  if (needs_grad<T>({&x})) {
    Node<T>* o = res.node();
    Node<T>* xn = x.node();
    attach<T>(res, {&x}, [o, xn]() {
      T* g = xn->ensure_grad().ptr();
      for (int64_t i = 0; i < o->grad.numel(); ++i) g[i] += o->grad[i];
    });
  }
  return res;
}

#define ESI_INSTANTIATE_OPS(T)                                                                 \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                         \
  template Var<T> matmul_nt(const Var<T>&, const Var<T>&);                                     \
  template Var<T> add(const Var<T>&, const Var<T>&);                                           \
  template Var<T> scale(const Var<T>&, T);                                                     \
  template Var<T> weighted_sum(const std::vector<Var<T>>&, const std::vector<T>&);             \
  template Var<T> gelu(const Var<T>&);                                                         \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                  \
  template Var<T> grn(const Var<T>&, const Var<T>&, const Var<T>&, T);                         \
  template Var<T> depthwise_conv1d(const Var<T>&, const Var<T>&, const Var<T>&);               \
  template Var<T> unfold(const Var<T>&, int64_t, int64_t);                                     \
  template Var<T> embedding(const std::vector<int32_t>&, const Shape&, const Var<T>&);         \
  template Var<T> add_positional(const Var<T>&, const Var<T>&);                                \
  template Var<T> attention(const Var<T>&, const Var<T>&, const Var<T>&, int,                  \
                            const std::vector<uint8_t>*, bool);                                \
  template Var<T> select_position(const Var<T>&, int64_t);                                     \
  template Var<T> broadcast_batch(const Var<T>&, int64_t);                                     \
  template Var<T> l2_normalize(const Var<T>&, T);                                              \
  template Var<T> reshape(const Var<T>&, Shape);

ESI_INSTANTIATE_OPS(float)
ESI_INSTANTIATE_OPS(double)
#undef ESI_INSTANTIATE_OPS

}  // namespace ops

template void backward(const Var<float>&);
template void backward(const Var<double>&);

}  // namespace esi
