#include "esi/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace esi {

DecoderConfig DecoderConfig::micro() {
  DecoderConfig c;
  c.layers = 1;
  c.heads = 2;
  c.width = 32;
  c.max_len = 48;
  c.cross_width = 64;
  return c;
}

void DecoderConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("DecoderConfig: " + m); };
  if (layers < 1 || heads < 1 || width < 1) fail("layers, heads and width must be positive");
  if (width % heads != 0) fail("width must be divisible by heads");
  if (vocab_size < Vocabulary::kNumSpecial) fail("vocab_size not set");
  if (max_len < 1) fail("max_len must be positive");
  if (cross_width < 1) fail("cross_width must be positive");
}

template <typename T>
CaptionDecoder<T>::CaptionDecoder(ParamStore<T>& ps, const DecoderConfig& config,
                                  Initializer& init, const std::string& prefix)
    : config_(config) {
  config_.validate();
  const auto& c = config_;
  const int64_t hidden = std::lround(c.mlp_ratio * c.width);
  token_embed_ = ps.add(prefix + ".token_embed",
                        init.truncated_normal<T>({c.vocab_size, c.width}, kInitStd), true);
  pos_embed_ = ps.add(prefix + ".pos_embed",
                      init.truncated_normal<T>({c.max_len, c.width}, kInitStd), false);
  for (int l = 0; l < c.layers; ++l) {
    const std::string lp = prefix + ".layer" + std::to_string(l);
    Layer layer;
    layer.norm1 = LayerNorm<T>(ps, lp + ".norm1", c.width);
    layer.self_attn = MultiHeadAttention<T>(ps, lp + ".self", c.width, c.width, c.heads, init);
    layer.norm2 = LayerNorm<T>(ps, lp + ".norm2", c.width);
    layer.cross_attn =
        MultiHeadAttention<T>(ps, lp + ".cross", c.width, c.cross_width, c.heads, init);
    layer.norm3 = LayerNorm<T>(ps, lp + ".norm3", c.width);
    layer.mlp = Mlp<T>(ps, lp + ".mlp", c.width, hidden, init);
    layers_.push_back(std::move(layer));
  }
  final_norm_ = LayerNorm<T>(ps, prefix + ".final_norm", c.width);
}

template <typename T>
Var<T> CaptionDecoder<T>::caption_logits(const Var<T>& ecg_tokens,
                                         const TokenizedBatch& text) const {
  if (text.length > config_.max_len) {
    throw std::length_error("caption_logits: text length " + std::to_string(text.length) +
                            " exceeds decoder max_len " + std::to_string(config_.max_len));
  }
  require_shape(ecg_tokens.value().rank() == 3 && ecg_tokens.dim(0) == text.batch &&
                    ecg_tokens.dim(2) == config_.cross_width,
                "caption_logits: ecg tokens " + shape_str(ecg_tokens.shape()) +
                    " do not match batch " + std::to_string(text.batch) + " / cross width " +
                    std::to_string(config_.cross_width));
  Var<T> x = ops::embedding(text.ids, {text.batch, text.length}, token_embed_);
  x = ops::add_positional(x, pos_embed_);
  for (const Layer& layer : layers_) {
    Var<T> h = layer.norm1(x);
    x = ops::add(x, layer.self_attn(h, h, &text.valid, true));
    x = ops::add(x, layer.cross_attn(layer.norm2(x), ecg_tokens, nullptr, false));
    x = ops::add(x, layer.mlp(layer.norm3(x)));
  }
  return ops::matmul_nt(final_norm_(x), token_embed_);
}

template <typename T>
std::vector<int32_t> CaptionDecoder<T>::greedy_decode(const Tensor<T>& ecg_tokens,
                                                      int max_len) const {
  NoGradGuard no_grad;
  require_shape(ecg_tokens.rank() == 3 && ecg_tokens.dim(0) == 1,
                "greedy_decode: expects a single sample [1, T', w]");
  const int limit = std::min(max_len, config_.max_len);
  std::vector<int32_t> ids{Vocabulary::kBos};
  Var<T> ctx(ecg_tokens);
  while (static_cast<int>(ids.size()) < limit) {
    TokenizedBatch tb;
    tb.batch = 1;
    tb.length = static_cast<int64_t>(ids.size());
    tb.ids = ids;
    tb.valid.assign(ids.size(), 1);
    Var<T> logits = caption_logits(ctx, tb);
    const int64_t V = logits.dim(2);
    const T* last = logits.value().ptr() + (tb.length - 1) * V;
    const int32_t next = static_cast<int32_t>(std::max_element(last, last + V) - last);
    ids.push_back(next);
    if (next == Vocabulary::kEos) break;
  }
  return ids;
}

TokenizedBatch shift_targets(const TokenizedBatch& in) {
  TokenizedBatch out = in;
  for (int64_t b = 0; b < in.batch; ++b) {
    for (int64_t i = 0; i < in.length; ++i) {
      const int64_t src = b * in.length + i + 1;
      const bool inside = i + 1 < in.length;
      out.ids[b * in.length + i] = inside ? in.ids[src] : Vocabulary::kPad;
      out.valid[b * in.length + i] = inside ? in.valid[src] : 0;
    }
  }
  return out;
}

template class CaptionDecoder<float>;
template class CaptionDecoder<double>;

}  // namespace esi
