#include "esi/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "esi/kernels.hpp"

namespace esi {

void LossWeights::validate() const {
  if (!(lambda_con >= 0.0) || !(lambda_cap >= 0.0))
    throw std::invalid_argument("loss weights must be non-negative");
}

namespace {

template <typename T>
void check_finite(const Tensor<T>& t, const char* what) {
  for (T v : t.data) {
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericError(std::string(what) + ": non-finite input");
  }
}

}  // namespace

template <typename T>
Var<T> contrastive_loss(const Var<T>& S, const Var<T>& Tm, const Var<T>& log_sigma) {
  const Tensor<T>& sv = S.value();
  const Tensor<T>& tv = Tm.value();
  require_shape(sv.rank() == 2 && sv.shape == tv.shape,
                "contrastive_loss: S " + shape_str(sv.shape) + " vs T " + shape_str(tv.shape));
  require_shape(log_sigma.value().numel() == 1, "contrastive_loss: log_sigma must be a scalar");
  check_finite(sv, "contrastive_loss");
  check_finite(tv, "contrastive_loss");
  check_finite(log_sigma.value(), "contrastive_loss");
  const int64_t N = sv.dim(0), d = sv.dim(1);
  require_shape(N >= 1, "contrastive_loss: empty batch");
  for (const Tensor<T>* m : {&sv, &tv}) {
    for (int64_t i = 0; i < N; ++i) {
      double sq = 0.0;
      for (int64_t c = 0; c < d; ++c) sq += static_cast<double>((*m)[i * d + c]) * (*m)[i * d + c];
      if (std::abs(std::sqrt(sq) - 1.0) > 1e-4)
        throw std::invalid_argument("contrastive_loss: rows must be unit-norm (row " +
                                    std::to_string(i) + " has norm " +
                                    std::to_string(std::sqrt(sq)) + ")");
    }
  }

  const double sigma = std::exp(static_cast<double>(log_sigma.item()));
  std::vector<T> sim(N * N);
  kernels::gemm_nt(N, N, d, sv.ptr(), tv.ptr(), sim.data(), false);
  std::vector<double> z(N * N);
  for (int64_t i = 0; i < N * N; ++i) z[i] = static_cast<double>(sim[i]) / sigma;

  // Row softmax (ecg-to-text) and column softmax (text-to-ecg), max-subtracted.
  std::vector<double> p_row(N * N), p_col(N * N);
  double loss = 0.0;
  for (int64_t i = 0; i < N; ++i) {
    double mx = z[i * N];
    for (int64_t j = 1; j < N; ++j) mx = std::max(mx, z[i * N + j]);
    double s = 0.0;
    for (int64_t j = 0; j < N; ++j) s += std::exp(z[i * N + j] - mx);
    const double lse = mx + std::log(s);
    loss -= z[i * N + i] - lse;
    for (int64_t j = 0; j < N; ++j) p_row[i * N + j] = std::exp(z[i * N + j] - lse);
  }
  for (int64_t j = 0; j < N; ++j) {
    double mx = z[j];
    for (int64_t i = 1; i < N; ++i) mx = std::max(mx, z[i * N + j]);
    double s = 0.0;
    for (int64_t i = 0; i < N; ++i) s += std::exp(z[i * N + j] - mx);
    const double lse = mx + std::log(s);
    loss -= z[j * N + j] - lse;
    for (int64_t i = 0; i < N; ++i) p_col[i * N + j] = std::exp(z[i * N + j] - lse);
  }
  loss /= static_cast<double>(N);
  if (!std::isfinite(loss)) throw NumericError("contrastive_loss: non-finite result");

  Var<T> res(Tensor<T>({1}, static_cast<T>(loss)));
  if (needs_grad<T>({&S, &Tm, &log_sigma})) {
    Node<T>* o = res.node();
    Node<T>* sn = S.node();
    Node<T>* tn = Tm.node();
    Node<T>* ln = log_sigma.node();
    attach<T>(res, {&S, &Tm, &log_sigma},
              [o, sn, tn, ln, N, d, sigma, z = std::move(z), p_row = std::move(p_row),
               p_col = std::move(p_col)]() {
                const double g = static_cast<double>(o->grad[0]);
                // dL/dz_ij = (1/N) (P_row_ij + P_col_ij - 2 [i == j])
                std::vector<double> dz(N * N);
                double dlog = 0.0;
                for (int64_t i = 0; i < N; ++i)
                  for (int64_t j = 0; j < N; ++j) {
                    const int64_t k = i * N + j;
                    dz[k] = g * (p_row[k] + p_col[k] - (i == j ? 2.0 : 0.0)) /
                            static_cast<double>(N);
                    dlog -= dz[k] * z[k];
                  }
                std::vector<T> dsim(N * N);
                for (int64_t k = 0; k < N * N; ++k) dsim[k] = static_cast<T>(dz[k] / sigma);
                if (sn->requires_grad)
                  kernels::gemm_nn(N, d, N, dsim.data(), tn->value.ptr(), sn->ensure_grad().ptr(),
                                   true);
                if (tn->requires_grad)
                  kernels::gemm_tn(N, d, N, dsim.data(), sn->value.ptr(), tn->ensure_grad().ptr(),
                                   true);
                if (ln->requires_grad) ln->ensure_grad()[0] += static_cast<T>(dlog);
              });
  }
  return res;
}

template <typename T>
Var<T> captioning_loss(const Var<T>& logits, const TokenizedBatch& targets) {
  const Tensor<T>& lv = logits.value();
  require_shape(lv.rank() == 3 && lv.dim(0) == targets.batch && lv.dim(1) == targets.length,
                "captioning_loss: logits " + shape_str(lv.shape) + " vs targets [" +
                    std::to_string(targets.batch) + ", " + std::to_string(targets.length) + "]");
  const int64_t rows = targets.batch * targets.length, V = lv.dim(2);
  int64_t count = 0;
  for (uint8_t v : targets.valid) count += v ? 1 : 0;
  if (count == 0) throw std::invalid_argument("captioning_loss: every target position is PAD");

  std::vector<double> lse(rows, 0.0);
  double loss = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    if (!targets.valid[r]) continue;
    const T* row = lv.ptr() + r * V;
    const int32_t tgt = targets.ids[r];
    if (tgt < 0 || tgt >= V) throw std::out_of_range("captioning_loss: target id out of range");
    double mx = row[0];
    for (int64_t v = 1; v < V; ++v) mx = std::max(mx, static_cast<double>(row[v]));
    double s = 0.0;
    for (int64_t v = 0; v < V; ++v) s += std::exp(static_cast<double>(row[v]) - mx);
    lse[r] = mx + std::log(s);
    loss += lse[r] - static_cast<double>(row[tgt]);
  }
  loss /= static_cast<double>(count);
  if (!std::isfinite(loss)) throw NumericError("captioning_loss: non-finite result");

  Var<T> res(Tensor<T>({1}, static_cast<T>(loss)));
  if (needs_grad<T>({&logits})) {
    Node<T>* o = res.node();
    Node<T>* ln = logits.node();
    attach<T>(res, {&logits}, [o, ln, rows, V, count, lse = std::move(lse), targets]() {
      const double g = static_cast<double>(o->grad[0]) / static_cast<double>(count);
      T* dl = ln->ensure_grad().ptr();
      const T* lv = ln->value.ptr();
      for (int64_t r = 0; r < rows; ++r) {
        if (!targets.valid[r]) continue;
        for (int64_t v = 0; v < V; ++v)
          dl[r * V + v] += static_cast<T>(g * std::exp(static_cast<double>(lv[r * V + v]) - lse[r]));
        dl[r * V + targets.ids[r]] -= static_cast<T>(g);
      }
    });
  }
  return res;
}

template <typename T>
Var<T> total_loss(const Var<T>& l_con, const Var<T>& l_cap, const LossWeights& weights) {
  weights.validate();
  return ops::weighted_sum<T>({l_con, l_cap}, {static_cast<T>(weights.lambda_con),
                                               static_cast<T>(weights.lambda_cap)});
}

template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  const Tensor<T>& lv = logits.value();
  require_shape(lv.rank() == 2 && lv.dim(0) == static_cast<int64_t>(labels.size()),
                "softmax_cross_entropy: logits/labels mismatch");
  const int64_t N = lv.dim(0), C = lv.dim(1);
  require_shape(N > 0, "softmax_cross_entropy: empty batch");
  std::vector<double> probs(N * C);
  double loss = 0.0;
  for (int64_t i = 0; i < N; ++i) {
    if (labels[i] < 0 || labels[i] >= C)
      throw std::out_of_range("softmax_cross_entropy: label out of range");
    const T* row = lv.ptr() + i * C;
    double mx = row[0];
    for (int64_t c = 1; c < C; ++c) mx = std::max(mx, static_cast<double>(row[c]));
    double s = 0.0;
    for (int64_t c = 0; c < C; ++c) s += std::exp(row[c] - mx);
    const double lse = mx + std::log(s);
    loss += lse - row[labels[i]];
    for (int64_t c = 0; c < C; ++c) probs[i * C + c] = std::exp(row[c] - lse);
  }
  loss /= static_cast<double>(N);
  Var<T> res(Tensor<T>({1}, static_cast<T>(loss)));
  if (needs_grad<T>({&logits})) {
    Node<T>* o = res.node();
    Node<T>* ln = logits.node();
    attach<T>(res, {&logits}, [o, ln, N, C, labels, probs = std::move(probs)]() {
      const double g = static_cast<double>(o->grad[0]) / static_cast<double>(N);
      T* dl = ln->ensure_grad().ptr();
      for (int64_t i = 0; i < N; ++i)
        for (int64_t c = 0; c < C; ++c)
          dl[i * C + c] += static_cast<T>(g * (probs[i * C + c] - (c == labels[i] ? 1.0 : 0.0)));
    });
  }
  return res;
}

template <typename T>
Var<T> binary_cross_entropy(const Var<T>& logits, const std::vector<uint8_t>& targets) {
  const Tensor<T>& lv = logits.value();
  require_shape(lv.numel() == static_cast<int64_t>(targets.size()) && lv.numel() > 0,
                "binary_cross_entropy: logits/targets mismatch");
  const int64_t n = lv.numel();
  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double x = lv[i];
    // log(1 + exp(-|x|)) + max(x, 0) - x * y
    loss += std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0) - x * targets[i];
  }
  loss /= static_cast<double>(n);
  Var<T> res(Tensor<T>({1}, static_cast<T>(loss)));
  if (needs_grad<T>({&logits})) {
    Node<T>* o = res.node();
    Node<T>* ln = logits.node();
    attach<T>(res, {&logits}, [o, ln, n, targets]() {
      const double g = static_cast<double>(o->grad[0]) / static_cast<double>(n);
      T* dl = ln->ensure_grad().ptr();
      for (int64_t i = 0; i < n; ++i) {
        const double x = ln->value[i];
        const double p = 1.0 / (1.0 + std::exp(-x));
        dl[i] += static_cast<T>(g * (p - targets[i]));
      }
    });
  }
  return res;
}

#define ESI_INSTANTIATE_LOSSES(T)                                                          \
  template Var<T> contrastive_loss(const Var<T>&, const Var<T>&, const Var<T>&);           \
  template Var<T> captioning_loss(const Var<T>&, const TokenizedBatch&);                   \
  template Var<T> total_loss(const Var<T>&, const Var<T>&, const LossWeights&);            \
  template Var<T> softmax_cross_entropy(const Var<T>&, const std::vector<int>&);           \
  template Var<T> binary_cross_entropy(const Var<T>&, const std::vector<uint8_t>&);

ESI_INSTANTIATE_LOSSES(float)
ESI_INSTANTIATE_LOSSES(double)
#undef ESI_INSTANTIATE_LOSSES

}  // namespace esi
