#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "esi/nn.hpp"

namespace esi {

// Word-level vocabulary. Lowercased words; every punctuation character is
// its own token.
class Vocabulary {
 public:
  static constexpr int32_t kPad = 0;
  static constexpr int32_t kBos = 1;
  static constexpr int32_t kEos = 2;
  static constexpr int32_t kUnk = 3;
  static constexpr int32_t kCls = 4;
  static constexpr int32_t kNumSpecial = 5;

  Vocabulary();

  // Frequency-descending then lexicographic id assignment; words seen fewer
  // than min_freq times are left out and encode to kUnk.
  static Vocabulary build(const std::vector<std::string>& corpus, int min_freq);

  int32_t size() const { return static_cast<int32_t>(tokens_.size()); }
  int32_t id(const std::string& token) const;
  const std::string& token(int32_t id) const { return tokens_.at(id); }

  // `token<TAB>id` per line, in id order.
  void save(std::ostream& os) const;
  static Vocabulary load(std::istream& is);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void append(const std::string& token);

  std::vector<std::string> tokens_;
  std::map<std::string, int32_t> index_;
};

std::vector<std::string> split_words(const std::string& text);
// Words of `text` joined by single spaces; the fixed point of detokenize.
std::string normalize_text(const std::string& text);

struct TokenizedBatch {
  int64_t batch = 0;
  int64_t length = 0;
  std::vector<int32_t> ids;    // [batch * length]
  std::vector<uint8_t> valid;  // 1 for non-PAD positions
};

struct TokenizedText {
  std::vector<int32_t> ids;
  std::vector<uint8_t> valid;
};

// BOS + word ids + EOS, truncated so EOS stays last, right-padded to max_len.
TokenizedText tokenize(const std::string& text, const Vocabulary& vocab, int max_len);
TokenizedBatch tokenize_batch(const std::vector<std::string>& texts, const Vocabulary& vocab,
                              int max_len);
// Inverse of tokenize over in-vocabulary text: drops specials, joins words.
std::string detokenize(const std::vector<int32_t>& ids, const Vocabulary& vocab);

struct TextEncoderConfig {
  int layers = 4;
  int heads = 4;
  int width = 128;
  int max_len = 128;
  int vocab_size = 0;
  int embed_dim = 256;
  double mlp_ratio = 4.0;

  static TextEncoderConfig micro();
  void validate() const;
};

// Bidirectional pre-norm transformer; the state at position 0 (fed the CLS
// token in place of BOS) is projected to the shared embedding space.
template <typename T>
class TextEncoder {
 public:
  TextEncoder(ParamStore<T>& params, const TextEncoderConfig& config, Initializer& init,
              const std::string& prefix = "text");

  // Returns unit rows [B, embed_dim].
  Var<T> encode(const TokenizedBatch& batch) const;

  const TextEncoderConfig& config() const { return config_; }

 private:
  struct Layer {
    LayerNorm<T> norm1;
    MultiHeadAttention<T> attn;
    LayerNorm<T> norm2;
    Mlp<T> mlp;
  };

  TextEncoderConfig config_;
  Var<T> token_embed_;
  Var<T> pos_embed_;
  std::vector<Layer> layers_;
  LayerNorm<T> final_norm_;
  Linear<T> proj_;
};

}  // namespace esi
