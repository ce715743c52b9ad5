#include "esi/text_encoder.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace esi {

Vocabulary::Vocabulary() {
  for (const char* s : {"<pad>", "<bos>", "<eos>", "<unk>", "<cls>"}) append(s);
}

void Vocabulary::append(const std::string& token) {
  index_.emplace(token, static_cast<int32_t>(tokens_.size()));
  tokens_.push_back(token);
}

int32_t Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&]() {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (unsigned char ch : text) {
    if (std::isspace(ch)) {
      flush();
    } else if (std::ispunct(ch)) {
      flush();
      out.emplace_back(1, static_cast<char>(ch));
    } else {
      cur.push_back(static_cast<char>(std::tolower(ch)));
    }
  }
  flush();
  return out;
}

std::string normalize_text(const std::string& text) {
  std::string out;
  for (const auto& w : split_words(text)) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& corpus, int min_freq) {
  if (corpus.empty()) throw std::invalid_argument("build_vocab: empty corpus");
  std::map<std::string, int64_t> freq;
  for (const auto& text : corpus)
    for (auto& w : split_words(text)) ++freq[w];
  std::vector<std::pair<std::string, int64_t>> items(freq.begin(), freq.end());
  std::stable_sort(items.begin(), items.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  for (const auto& [word, count] : items) {
    if (count >= min_freq && !v.index_.count(word)) v.append(word);
  }
  return v;
}

void Vocabulary::save(std::ostream& os) const {
  for (size_t i = 0; i < tokens_.size(); ++i) os << tokens_[i] << '\t' << i << '\n';
}

Vocabulary Vocabulary::load(std::istream& is) {
  Vocabulary v;
  v.tokens_.clear();
  v.index_.clear();
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) throw std::runtime_error("vocabulary: malformed line: " + line);
    const int64_t id = std::stoll(line.substr(tab + 1));
    if (id != static_cast<int64_t>(v.tokens_.size()))
      throw std::runtime_error("vocabulary: ids must be dense and ordered, got " +
                               std::to_string(id));
    v.append(line.substr(0, tab));
  }
  if (v.size() < kNumSpecial || v.tokens_[kPad] != "<pad>" || v.tokens_[kCls] != "<cls>")
    throw std::runtime_error("vocabulary: missing special tokens");
  return v;
}

TokenizedText tokenize(const std::string& text, const Vocabulary& vocab, int max_len) {
  if (max_len < 2) throw std::invalid_argument("tokenize: max_len must be >= 2");
  TokenizedText out;
  out.ids.assign(max_len, Vocabulary::kPad);
  out.valid.assign(max_len, 0);
  const auto words = split_words(text);
  const size_t kept = std::min(words.size(), static_cast<size_t>(max_len - 2));
  out.ids[0] = Vocabulary::kBos;
  for (size_t i = 0; i < kept; ++i) out.ids[i + 1] = vocab.id(words[i]);
  out.ids[kept + 1] = Vocabulary::kEos;
  std::fill_n(out.valid.begin(), kept + 2, uint8_t{1});
  return out;
}

TokenizedBatch tokenize_batch(const std::vector<std::string>& texts, const Vocabulary& vocab,
                              int max_len) {
  TokenizedBatch b;
  b.batch = static_cast<int64_t>(texts.size());
  b.length = max_len;
  b.ids.reserve(texts.size() * max_len);
  b.valid.reserve(texts.size() * max_len);
  for (const auto& t : texts) {
    auto tok = tokenize(t, vocab, max_len);
    b.ids.insert(b.ids.end(), tok.ids.begin(), tok.ids.end());
    b.valid.insert(b.valid.end(), tok.valid.begin(), tok.valid.end());
  }
  return b;
}

std::string detokenize(const std::vector<int32_t>& ids, const Vocabulary& vocab) {
  std::string out;
  for (int32_t id : ids) {
    if (id == Vocabulary::kEos) break;
    if (id < Vocabulary::kNumSpecial && id != Vocabulary::kUnk) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

TextEncoderConfig TextEncoderConfig::micro() {
  TextEncoderConfig c;
  c.layers = 1;
  c.heads = 2;
  c.width = 32;
  c.max_len = 48;
  c.embed_dim = 64;
  return c;
}

void TextEncoderConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("TextEncoderConfig: " + m); };
  if (layers < 1 || heads < 1 || width < 1) fail("layers, heads and width must be positive");
  if (width % heads != 0) fail("width must be divisible by heads");
  if (max_len < 2) fail("max_len must be >= 2");
  if (vocab_size <= Vocabulary::kNumSpecial - 1) fail("vocab_size not set");
  if (embed_dim < 1) fail("embed_dim must be positive");
}

template <typename T>
TextEncoder<T>::TextEncoder(ParamStore<T>& ps, const TextEncoderConfig& config, Initializer& init,
                            const std::string& prefix)
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
    layer.attn = MultiHeadAttention<T>(ps, lp + ".attn", c.width, c.width, c.heads, init);
    layer.norm2 = LayerNorm<T>(ps, lp + ".norm2", c.width);
    layer.mlp = Mlp<T>(ps, lp + ".mlp", c.width, hidden, init);
    layers_.push_back(std::move(layer));
  }
  final_norm_ = LayerNorm<T>(ps, prefix + ".final_norm", c.width);
  proj_ = Linear<T>(ps, prefix + ".proj", c.width, c.embed_dim, init);
}

template <typename T>
Var<T> TextEncoder<T>::encode(const TokenizedBatch& batch) const {
  require_shape(batch.length <= config_.max_len,
                "encode_text: sequence length " + std::to_string(batch.length) +
                    " exceeds max_len " + std::to_string(config_.max_len));
  require_shape(static_cast<int64_t>(batch.ids.size()) == batch.batch * batch.length &&
                    batch.valid.size() == batch.ids.size(),
                "encode_text: ids/mask size mismatch");
  std::vector<int32_t> ids = batch.ids;
  for (int32_t id : ids) {
    if (id < 0 || id >= config_.vocab_size)
      throw std::out_of_range("encode_text: token id " + std::to_string(id) +
                              " outside vocabulary of " + std::to_string(config_.vocab_size));
  }
  std::vector<uint8_t> valid = batch.valid;
  for (int64_t b = 0; b < batch.batch; ++b) {
    ids[b * batch.length] = Vocabulary::kCls;
    valid[b * batch.length] = 1;
  }
  Var<T> x = ops::embedding(ids, {batch.batch, batch.length}, token_embed_);
  x = ops::add_positional(x, pos_embed_);
  for (const Layer& layer : layers_) {
    Var<T> h = layer.norm1(x);
    x = ops::add(x, layer.attn(h, h, &valid, false));
    x = ops::add(x, layer.mlp(layer.norm2(x)));
  }
  x = final_norm_(x);
  return ops::l2_normalize(proj_(ops::select_position(x, 0)), static_cast<T>(1e-12));
}

template class TextEncoder<float>;
template class TextEncoder<double>;

}  // namespace esi
