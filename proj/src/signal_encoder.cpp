#include "esi/signal_encoder.hpp"

#include <cmath>
#include <stdexcept>

namespace esi {

ConvNeXt1DConfig ConvNeXt1DConfig::tiny() { return ConvNeXt1DConfig{}; }

ConvNeXt1DConfig ConvNeXt1DConfig::base() {
  ConvNeXt1DConfig c;
  c.depths = {3, 3, 27, 3};
  c.widths = {128, 256, 512, 1024};
  c.variant = "base";
  return c;
}

ConvNeXt1DConfig ConvNeXt1DConfig::micro() {
  ConvNeXt1DConfig c;
  c.depths = {1, 1, 1, 1};
  c.widths = {16, 32, 48, 64};
  c.embed_dim = 64;
  c.pool_heads = 4;
  c.variant = "micro";
  return c;
}

int ConvNeXt1DConfig::hidden(int stage) const {
  return static_cast<int>(std::lround(mlp_ratio * widths.at(stage)));
}

void ConvNeXt1DConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("ConvNeXt1DConfig: " + m); };
  if (in_leads < 1) fail("in_leads must be >= 1");
  if (stem_kernel < 1 || stem_stride < 1) fail("stem kernel/stride must be positive");
  for (int i = 0; i < 4; ++i) {
    if (depths[i] < 1) fail("depths must be positive");
    if (widths[i] < 1) fail("widths must be positive");
  }
  if (dw_kernel < 1 || dw_kernel % 2 == 0) fail("dw_kernel must be odd");
  if (mlp_ratio <= 0) fail("mlp_ratio must be positive");
  if (embed_dim < 1) fail("embed_dim must be positive");
  if (pool_heads < 1 || widths[3] % pool_heads != 0) fail("pool_heads must divide widths[3]");
}

int64_t ConvNeXt1DConfig::token_length(int64_t n_samples) const {
  int64_t n = (n_samples - stem_kernel) / stem_stride + 1;
  for (int i = 0; i < 3; ++i) n = (n - 2) / 2 + 1;
  return n;
}

int64_t count_params(const ConvNeXt1DConfig& c) {
  c.validate();
  using L = Linear<float>;
  int64_t n = L::param_count(int64_t{c.stem_kernel} * c.in_leads, c.widths[0]) +
              LayerNorm<float>::param_count(c.widths[0]);
  for (int s = 0; s < 4; ++s) {
    const int64_t w = c.widths[s], h = c.hidden(s);
    if (s > 0) {
      n += LayerNorm<float>::param_count(c.widths[s - 1]) + L::param_count(2 * c.widths[s - 1], w);
    }
    const int64_t block = c.dw_kernel * w + w + LayerNorm<float>::param_count(w) +
                          L::param_count(w, h) + 2 * h + L::param_count(h, w);
    n += block * c.depths[s];
  }
  const int64_t w3 = c.widths[3];
  n += LayerNorm<float>::param_count(w3);
  n += w3 + MultiHeadAttention<float>::param_count(w3, w3);
  n += L::param_count(w3, c.embed_dim);
  return n;
}

template <typename T>
SignalEncoder<T>::SignalEncoder(ParamStore<T>& ps, const ConvNeXt1DConfig& config,
                                Initializer& init, const std::string& prefix)
    : config_(config) {
  config_.validate();
  const auto& c = config_;
  stem_ = Linear<T>(ps, prefix + ".stem", int64_t{c.stem_kernel} * c.in_leads, c.widths[0], init);
  stem_norm_ = LayerNorm<T>(ps, prefix + ".stem_norm", c.widths[0]);
  for (int s = 0; s < 4; ++s) {
    Stage stage;
    const std::string sp = prefix + ".stage" + std::to_string(s);
    const int64_t w = c.widths[s], h = c.hidden(s);
    if (s > 0) {
      stage.down_norm = LayerNorm<T>(ps, sp + ".down_norm", c.widths[s - 1]);
      stage.down = Linear<T>(ps, sp + ".down", 2 * c.widths[s - 1], w, init);
    }
    for (int b = 0; b < c.depths[s]; ++b) {
      const std::string bp = sp + ".block" + std::to_string(b);
      Block blk;
      blk.dw_weight = ps.add(bp + ".dw.weight", init.truncated_normal<T>({c.dw_kernel, w}, kInitStd),
                             true);
      blk.dw_bias = ps.add(bp + ".dw.bias", Tensor<T>({w}), false);
      blk.norm = LayerNorm<T>(ps, bp + ".norm", w);
      blk.fc1 = Linear<T>(ps, bp + ".fc1", w, h, init);
      blk.grn_gamma = ps.add(bp + ".grn.gamma", Tensor<T>({h}), false);
      blk.grn_beta = ps.add(bp + ".grn.beta", Tensor<T>({h}), false);
      blk.fc2 = Linear<T>(ps, bp + ".fc2", h, w, init);
      stage.blocks.push_back(std::move(blk));
    }
    stages_.push_back(std::move(stage));
  }
  const int64_t w3 = c.widths[3];
  final_norm_ = LayerNorm<T>(ps, prefix + ".final_norm", w3);
  pool_query_ = ps.add(prefix + ".pool.query", init.truncated_normal<T>({w3}, kInitStd), false);
  pool_attn_ = MultiHeadAttention<T>(ps, prefix + ".pool.attn", w3, w3, c.pool_heads, init);
  proj_ = Linear<T>(ps, prefix + ".proj", w3, c.embed_dim, init);
}

template <typename T>
Var<T> SignalEncoder<T>::run_block(const Block& blk, const Var<T>& x) const {
  Var<T> h = ops::depthwise_conv1d(x, blk.dw_weight, blk.dw_bias);
  h = blk.norm(h);
  h = ops::gelu(blk.fc1(h));
  h = ops::grn(h, blk.grn_gamma, blk.grn_beta, static_cast<T>(kNormEps));
  h = blk.fc2(h);
  return ops::add(x, h);
}

template <typename T>
SignalEncoding<T> SignalEncoder<T>::encode(const Tensor<T>& batch) const {
  const auto& c = config_;
  require_shape(batch.rank() == 3, "encode_signal: expects [B, n_leads, n_samples], got " +
                                       shape_str(batch.shape));
  const int64_t B = batch.dim(0), leads = batch.dim(1), n = batch.dim(2);
  require_shape(leads == c.in_leads, "encode_signal: expected " + std::to_string(c.in_leads) +
                                         " leads, got " + std::to_string(leads));
  require_shape(n >= c.min_samples(), "encode_signal: need at least " +
                                          std::to_string(c.min_samples()) + " samples, got " +
                                          std::to_string(n));
  for (T v : batch.data) {
    if (!std::isfinite(static_cast<double>(v)))
      throw std::domain_error("encode_signal: non-finite input sample");
  }

  Tensor<T> cl({B, n, leads});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t l = 0; l < leads; ++l)
      for (int64_t t = 0; t < n; ++t) cl[(b * n + t) * leads + l] = batch[(b * leads + l) * n + t];

  Var<T> x = ops::unfold(Var<T>(std::move(cl)), c.stem_kernel, c.stem_stride);
  x = stem_norm_(stem_(x));
  for (int s = 0; s < 4; ++s) {
    const Stage& stage = stages_[s];
    if (s > 0) x = stage.down(ops::unfold(stage.down_norm(x), 2, 2));
    for (const Block& blk : stage.blocks) x = run_block(blk, x);
  }
  SignalEncoding<T> enc;
  enc.tokens = final_norm_(x);
  Var<T> q = ops::broadcast_batch(pool_query_, B);
  Var<T> pooled = pool_attn_(q, enc.tokens, nullptr, false);
  pooled = ops::reshape(pooled, {B, c.widths[3]});
  enc.pooled = ops::l2_normalize(proj_(pooled), static_cast<T>(1e-12));
  return enc;
}

template class SignalEncoder<float>;
template class SignalEncoder<double>;

}  // namespace esi
