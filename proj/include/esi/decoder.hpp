#pragma once

#include <string>
#include <vector>

#include "esi/nn.hpp"
#include "esi/text_encoder.hpp"

namespace esi {

struct DecoderConfig {
  int layers = 4;
  int heads = 4;
  int width = 128;
  int vocab_size = 0;
  int max_len = 128;
  int cross_width = 768;  // signal token width
  double mlp_ratio = 4.0;

  static DecoderConfig micro();
  void validate() const;
};

// Autoregressive captioner: causal self-attention over text, cross-attention
// to every signal token in every layer, output layer tied to the token
// embedding.
template <typename T>
class CaptionDecoder {
 public:
  CaptionDecoder(ParamStore<T>& params, const DecoderConfig& config, Initializer& init,
                 const std::string& prefix = "decoder");

  // Teacher-forced logits [B, L, V]; position i scores the token at i + 1.
  Var<T> caption_logits(const Var<T>& ecg_tokens, const TokenizedBatch& text) const;

  // ecg_tokens [1, T', w]; returns ids starting with BOS, ending at EOS or max_len.
  std::vector<int32_t> greedy_decode(const Tensor<T>& ecg_tokens, int max_len) const;

  const DecoderConfig& config() const { return config_; }

 private:
  struct Layer {
    LayerNorm<T> norm1;
    MultiHeadAttention<T> self_attn;
    LayerNorm<T> norm2;
    MultiHeadAttention<T> cross_attn;
    LayerNorm<T> norm3;
    Mlp<T> mlp;
  };

  DecoderConfig config_;
  Var<T> token_embed_;
  Var<T> pos_embed_;
  std::vector<Layer> layers_;
  LayerNorm<T> final_norm_;
};

// Targets for teacher forcing: ids shifted left by one, PAD-filled at the end.
TokenizedBatch shift_targets(const TokenizedBatch& inputs);

}  // namespace esi
