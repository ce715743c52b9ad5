#pragma once

// 1D ConvNeXt-v2 signal tower.
//
// Layout is channels-last throughout ([batch, time, channels]), which turns
// every pointwise and strided convolution into a GEMM. The stem and the
// stage transitions are strided convolutions expressed as unfold + linear.

#include <array>
#include <string>

#include "esi/nn.hpp"

namespace esi {

struct ConvNeXt1DConfig {
  int in_leads = 12;
  int stem_kernel = 4;
  int stem_stride = 4;
  std::array<int, 4> depths{3, 3, 9, 3};
  std::array<int, 4> widths{96, 192, 384, 768};
  int dw_kernel = 7;
  double mlp_ratio = 4.0;
  int embed_dim = 256;
  int pool_heads = 8;
  std::string variant = "tiny";

  static ConvNeXt1DConfig tiny();
  static ConvNeXt1DConfig base();
  // Desk-scale configuration used by the synthetic benchmark.
  static ConvNeXt1DConfig micro();

  int hidden(int stage) const;
  void validate() const;
  // Token count after the stem and the three stride-2 transitions.
  int64_t token_length(int64_t n_samples) const;
  int64_t min_samples() const { return static_cast<int64_t>(stem_stride) * 8; }
};

template <typename T>
struct SignalEncoding {
  Var<T> tokens;  // [B, T', widths[3]]
  Var<T> pooled;  // [B, embed_dim], unit rows
};

// Exact trainable parameter count of the tower for a config.
int64_t count_params(const ConvNeXt1DConfig& config);

template <typename T>
class SignalEncoder {
 public:
  SignalEncoder(ParamStore<T>& params, const ConvNeXt1DConfig& config, Initializer& init,
                const std::string& prefix = "signal");

  // batch: [B, n_leads, n_samples] in lead-major order.
  SignalEncoding<T> encode(const Tensor<T>& batch) const;

  const ConvNeXt1DConfig& config() const { return config_; }

 private:
  struct Block {
    Var<T> dw_weight, dw_bias;
    LayerNorm<T> norm;
    Linear<T> fc1;
    Var<T> grn_gamma, grn_beta;
    Linear<T> fc2;
  };
  struct Stage {
    LayerNorm<T> down_norm;  // unused for stage 0
    Linear<T> down;          // unused for stage 0
    std::vector<Block> blocks;
  };

  Var<T> run_block(const Block& block, const Var<T>& x) const;

  ConvNeXt1DConfig config_;
  Linear<T> stem_;
  LayerNorm<T> stem_norm_;
  std::vector<Stage> stages_;
  LayerNorm<T> final_norm_;
  Var<T> pool_query_;
  MultiHeadAttention<T> pool_attn_;
  Linear<T> proj_;
};

}  // namespace esi
