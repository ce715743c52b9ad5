#pragma once

#include <cstdint>
#include <vector>

#include "esi/autograd.hpp"
#include "esi/text_encoder.hpp"

namespace esi {

inline constexpr double kMinTemperature = 0.01;
inline constexpr double kMaxTemperature = 100.0;
inline constexpr double kInitTemperature = 0.07;

struct LossWeights {
  double lambda_con = 1.0;
  double lambda_cap = 1.0;
  void validate() const;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Symmetric InfoNCE over unit rows S, T [N, d] with temperature exp(log_sigma):
//   L = -(1/N) [ sum_i log softmax_j(S_i.T_j / s)_i + sum_i log softmax_j(T_i.S_j / s)_i ]
// log_sigma is a [1] tensor; its gradient is produced when it requires grad.
template <typename T>
Var<T> contrastive_loss(const Var<T>& S, const Var<T>& Tm, const Var<T>& log_sigma);

// Mean over valid target positions of -log softmax(logits)[target].
// logits [B, L, V]; targets/valid from shift_targets().
template <typename T>
Var<T> captioning_loss(const Var<T>& logits, const TokenizedBatch& targets);

template <typename T>
Var<T> total_loss(const Var<T>& l_con, const Var<T>& l_cap, const LossWeights& weights);

// Mean softmax cross-entropy, logits [N, C], labels in [0, C).
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& labels);

// Mean over all N*C entries of the logistic loss; targets in {0, 1}.
template <typename T>
Var<T> binary_cross_entropy(const Var<T>& logits, const std::vector<uint8_t>& targets);

}  // namespace esi
