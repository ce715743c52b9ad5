#include "esi/pretrainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <openssl/evp.h>
#include <yaml-cpp/yaml.h>

namespace esi {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

TrainConfig TrainConfig::preset(const std::string& variant) {
  TrainConfig c;
  if (variant == "esi") {
    c.signal = ConvNeXt1DConfig::base();
  } else if (variant == "esi-tiny") {
    c.signal = ConvNeXt1DConfig::tiny();
  } else if (variant == "micro") {
    c.signal = ConvNeXt1DConfig::micro();
    c.text = TextEncoderConfig::micro();
    c.decoder = DecoderConfig::micro();
    c.epochs = 12;
    c.warmup_epochs = 1;
    c.base_lr = 2e-3;
    c.lr_decay_every = 8;
    c.batch_size = 32;
  } else {
    throw std::invalid_argument("unknown model variant '" + variant +
                                "' (expected esi, esi-tiny or micro)");
  }
  c.variant = variant;
  c.text.embed_dim = c.signal.embed_dim;
  c.decoder.cross_width = c.signal.widths[3];
  return c;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("TrainConfig: " + m); };
  if (epochs < 1) fail("epochs must be positive");
  if (warmup_epochs < 0 || warmup_epochs >= epochs) fail("warmup_epochs must lie in [0, epochs)");
  if (!(base_lr > 0.0)) fail("base_lr must be positive");
  if (!(lr_decay_factor > 0.0)) fail("lr_decay_factor must be positive");
  if (lr_decay_every < 1) fail("lr_decay_every must be positive");
  if (batch_size < 2) fail("batch_size must be at least 2");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (!(grad_clip >= 0.0)) fail("grad_clip must be non-negative");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    fail("adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (vocab_min_freq < 1) fail("vocab_min_freq must be positive");
  loss.validate();
  if (loss.lambda_con == 0.0 && loss.lambda_cap == 0.0) fail("both loss weights are zero");
  signal.validate();
  if (text.embed_dim != signal.embed_dim)
    fail("text.embed_dim (" + std::to_string(text.embed_dim) + ") must equal signal.embed_dim (" +
         std::to_string(signal.embed_dim) + ")");
  if (decoder.cross_width != signal.widths[3])
    fail("decoder.cross_width must equal the last signal width");
  if (text.width % text.heads != 0) fail("text.width must be divisible by text.heads");
  if (decoder.width % decoder.heads != 0) fail("decoder.width must be divisible by decoder.heads");
}

json TrainConfig::to_json() const {
  json j;
  j["variant"] = variant;
  j["epochs"] = epochs;
  j["warmup_epochs"] = warmup_epochs;
  j["base_lr"] = base_lr;
  j["lr_decay_factor"] = lr_decay_factor;
  j["lr_decay_every"] = lr_decay_every;
  j["decay_from_zero"] = decay_from_zero;
  j["batch_size"] = batch_size;
  j["drop_last"] = drop_last;
  j["weight_decay"] = weight_decay;
  j["grad_clip"] = grad_clip;
  j["adam_beta1"] = adam_beta1;
  j["adam_beta2"] = adam_beta2;
  j["adam_eps"] = adam_eps;
  j["seed"] = seed;
  j["freeze_text"] = freeze_text;
  j["vocab_min_freq"] = vocab_min_freq;
  j["loss"] = {{"lambda_con", loss.lambda_con}, {"lambda_cap", loss.lambda_cap}};
  j["signal"] = {{"variant", signal.variant},     {"in_leads", signal.in_leads},
                 {"stem_kernel", signal.stem_kernel}, {"stem_stride", signal.stem_stride},
                 {"depths", signal.depths},       {"widths", signal.widths},
                 {"dw_kernel", signal.dw_kernel}, {"mlp_ratio", signal.mlp_ratio},
                 {"embed_dim", signal.embed_dim}, {"pool_heads", signal.pool_heads}};
  j["text"] = {{"layers", text.layers},   {"heads", text.heads},
               {"width", text.width},     {"max_len", text.max_len},
               {"vocab_size", text.vocab_size}, {"embed_dim", text.embed_dim},
               {"mlp_ratio", text.mlp_ratio}};
  j["decoder"] = {{"layers", decoder.layers},         {"heads", decoder.heads},
                  {"width", decoder.width},           {"max_len", decoder.max_len},
                  {"vocab_size", decoder.vocab_size}, {"cross_width", decoder.cross_width},
                  {"mlp_ratio", decoder.mlp_ratio}};
  return j;
}

namespace {

template <typename V>
void take(const json& j, const char* key, V& out) {
  if (j.contains(key)) {
    try {
      out = j.at(key).get<V>();
    } catch (const json::exception& e) {
      throw std::invalid_argument(std::string("config key '") + key + "': " + e.what());
    }
  }
}

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "variant",      "epochs",     "warmup_epochs", "base_lr",   "lr_decay_factor",
      "lr_decay_every", "decay_from_zero", "batch_size", "drop_last", "weight_decay",
      "grad_clip",    "adam_beta1", "adam_beta2",    "adam_eps",  "seed",
      "freeze_text",  "vocab_min_freq", "loss",      "signal",    "text",
      "decoder"};
  return keys;
}

}  // namespace

TrainConfig TrainConfig::from_json(const json& j, const TrainConfig& base) {
  if (!j.is_object()) throw std::invalid_argument("config must be a mapping");
  for (const auto& [key, _] : j.items())
    if (!known_keys().count(key)) throw std::invalid_argument("unknown config key '" + key + "'");
  TrainConfig c = base;
  take(j, "variant", c.variant);
  take(j, "epochs", c.epochs);
  take(j, "warmup_epochs", c.warmup_epochs);
  take(j, "base_lr", c.base_lr);
  take(j, "lr_decay_factor", c.lr_decay_factor);
  take(j, "lr_decay_every", c.lr_decay_every);
  take(j, "decay_from_zero", c.decay_from_zero);
  take(j, "batch_size", c.batch_size);
  take(j, "drop_last", c.drop_last);
  take(j, "weight_decay", c.weight_decay);
  take(j, "grad_clip", c.grad_clip);
  take(j, "adam_beta1", c.adam_beta1);
  take(j, "adam_beta2", c.adam_beta2);
  take(j, "adam_eps", c.adam_eps);
  take(j, "seed", c.seed);
  take(j, "freeze_text", c.freeze_text);
  take(j, "vocab_min_freq", c.vocab_min_freq);
  if (j.contains("loss")) {
    take(j["loss"], "lambda_con", c.loss.lambda_con);
    take(j["loss"], "lambda_cap", c.loss.lambda_cap);
  }
  if (j.contains("signal")) {
    const json& s = j["signal"];
    take(s, "variant", c.signal.variant);
    take(s, "in_leads", c.signal.in_leads);
    take(s, "stem_kernel", c.signal.stem_kernel);
    take(s, "stem_stride", c.signal.stem_stride);
    take(s, "depths", c.signal.depths);
    take(s, "widths", c.signal.widths);
    take(s, "dw_kernel", c.signal.dw_kernel);
    take(s, "mlp_ratio", c.signal.mlp_ratio);
    take(s, "embed_dim", c.signal.embed_dim);
    take(s, "pool_heads", c.signal.pool_heads);
  }
  if (j.contains("text")) {
    const json& t = j["text"];
    take(t, "layers", c.text.layers);
    take(t, "heads", c.text.heads);
    take(t, "width", c.text.width);
    take(t, "max_len", c.text.max_len);
    take(t, "vocab_size", c.text.vocab_size);
    take(t, "embed_dim", c.text.embed_dim);
    take(t, "mlp_ratio", c.text.mlp_ratio);
  }
  if (j.contains("decoder")) {
    const json& d = j["decoder"];
    take(d, "layers", c.decoder.layers);
    take(d, "heads", c.decoder.heads);
    take(d, "width", c.decoder.width);
    take(d, "max_len", c.decoder.max_len);
    take(d, "vocab_size", c.decoder.vocab_size);
    take(d, "cross_width", c.decoder.cross_width);
    take(d, "mlp_ratio", c.decoder.mlp_ratio);
  }
  // Shared dimensions follow the signal tower unless given explicitly.
  if (!(j.contains("text") && j["text"].contains("embed_dim"))) c.text.embed_dim = c.signal.embed_dim;
  if (!(j.contains("decoder") && j["decoder"].contains("cross_width")))
    c.decoder.cross_width = c.signal.widths[3];
  return c;
}

namespace {

json yaml_to_json(const YAML::Node& node) {
  switch (node.Type()) {
    case YAML::NodeType::Map: {
      json j = json::object();
      for (const auto& kv : node) j[kv.first.as<std::string>()] = yaml_to_json(kv.second);
      return j;
    }
    case YAML::NodeType::Sequence: {
      json j = json::array();
      for (const auto& item : node) j.push_back(yaml_to_json(item));
      return j;
    }
    case YAML::NodeType::Scalar: {
      const std::string s = node.Scalar();
      if (node.Tag() == "!") return s;  // quoted
      if (s == "true" || s == "false") return s == "true";
      try {
        size_t used = 0;
        const long long v = std::stoll(s, &used);
        if (used == s.size()) return v;
      } catch (...) {
      }
      try {
        size_t used = 0;
        const double v = std::stod(s, &used);
        if (used == s.size()) return v;
      } catch (...) {
      }
      return s;
    }
    default:
      return nullptr;
  }
}

}  // namespace

TrainConfig load_train_config(const fs::path& path) {
  YAML::Node root;
  try {
    root = YAML::LoadFile(path.string());
  } catch (const YAML::Exception& e) {
    throw std::invalid_argument("cannot parse config " + path.string() + ": " + e.what());
  }
  json j = root.IsNull() ? json::object() : yaml_to_json(root);
  const std::string variant = j.is_object() && j.contains("variant") && j["variant"].is_string()
                                  ? j["variant"].get<std::string>()
                                  : "esi-tiny";
  TrainConfig c = TrainConfig::from_json(j, TrainConfig::preset(variant));
  c.validate();
  return c;
}

double lr_at(int64_t step, int64_t steps_per_epoch, const TrainConfig& c) {
  if (step < 0) throw std::invalid_argument("lr_at: negative step");
  if (steps_per_epoch < 1) throw std::invalid_argument("lr_at: steps_per_epoch must be positive");
  const int64_t warmup_steps = static_cast<int64_t>(c.warmup_epochs) * steps_per_epoch;
  if (step < warmup_steps)
    return c.base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const int64_t epoch = step / steps_per_epoch;
  const int64_t since = c.decay_from_zero ? epoch : epoch - c.warmup_epochs;
  return c.base_lr * std::pow(c.lr_decay_factor, static_cast<double>(since / c.lr_decay_every));
}

// ---------------------------------------------------------------- model

template <typename T>
EsiModel<T>::EsiModel(const TrainConfig& config, Vocabulary vocab)
    : config_(config), vocab_(std::move(vocab)) {
  config_.text.vocab_size = vocab_.size();
  config_.decoder.vocab_size = vocab_.size();
  config_.validate();
  Initializer init(config_.seed);
  signal_ = std::make_unique<SignalEncoder<T>>(params_, config_.signal, init, "signal");
  text_ = std::make_unique<TextEncoder<T>>(params_, config_.text, init, "text");
  decoder_ = std::make_unique<CaptionDecoder<T>>(params_, config_.decoder, init, "decoder");
  log_sigma_ = params_.add("log_sigma", Tensor<T>({1}, static_cast<T>(std::log(kInitTemperature))),
                           false);
}

template <typename T>
TokenizedBatch EsiModel<T>::tokenize(const std::vector<std::string>& texts) const {
  const int max_len = std::min(config_.text.max_len, config_.decoder.max_len);
  TokenizedBatch full = tokenize_batch(texts, vocab_, max_len);
  int64_t longest = 1;
  for (int64_t b = 0; b < full.batch; ++b)
    for (int64_t i = full.length - 1; i >= 0; --i)
      if (full.valid[b * full.length + i]) {
        longest = std::max(longest, i + 1);
        break;
      }
  if (longest == full.length) return full;
  TokenizedBatch out;
  out.batch = full.batch;
  out.length = longest;
  for (int64_t b = 0; b < full.batch; ++b) {
    const auto first = static_cast<std::ptrdiff_t>(b * full.length);
    out.ids.insert(out.ids.end(), full.ids.begin() + first, full.ids.begin() + first + longest);
    out.valid.insert(out.valid.end(), full.valid.begin() + first,
                     full.valid.begin() + first + longest);
  }
  return out;
}

template <typename T>
Tensor<T> stack_signals(const std::vector<const ECGRecord*>& records) {
  if (records.empty()) throw std::invalid_argument("stack_signals: empty batch");
  const int leads = records.front()->n_leads;
  const int64_t samples = records.front()->n_samples;
  Tensor<T> out({static_cast<int64_t>(records.size()), leads, samples});
  for (size_t b = 0; b < records.size(); ++b) {
    const ECGRecord& r = *records[b];
    if (r.n_leads != leads || r.n_samples != samples)
      throw ShapeError("record " + r.record_id + " has shape " + std::to_string(r.n_leads) + "x" +
                       std::to_string(r.n_samples) + ", batch expects " + std::to_string(leads) +
                       "x" + std::to_string(samples));
    std::copy(r.signal.begin(), r.signal.end(), out.ptr() + b * leads * samples);
  }
  return out;
}

template <typename T>
Tensor<T> EsiModel<T>::embed_signals(const std::vector<const ECGRecord*>& records,
                                     size_t batch_size) const {
  NoGradGuard no_grad;
  const int64_t d = config_.signal.embed_dim;
  Tensor<T> out({static_cast<int64_t>(records.size()), d});
  for (size_t start = 0; start < records.size(); start += batch_size) {
    const size_t end = std::min(records.size(), start + batch_size);
    std::vector<const ECGRecord*> chunk(records.begin() + static_cast<std::ptrdiff_t>(start),
                                        records.begin() + static_cast<std::ptrdiff_t>(end));
    const auto enc = signal_->encode(stack_signals<T>(chunk));
    std::copy(enc.pooled.value().data.begin(), enc.pooled.value().data.end(),
              out.ptr() + start * d);
  }
  return out;
}

template <typename T>
Tensor<T> EsiModel<T>::embed_texts(const std::vector<std::string>& texts,
                                   size_t batch_size) const {
  NoGradGuard no_grad;
  const int64_t d = config_.text.embed_dim;
  Tensor<T> out({static_cast<int64_t>(texts.size()), d});
  for (size_t start = 0; start < texts.size(); start += batch_size) {
    const size_t end = std::min(texts.size(), start + batch_size);
    std::vector<std::string> chunk(texts.begin() + static_cast<std::ptrdiff_t>(start),
                                   texts.begin() + static_cast<std::ptrdiff_t>(end));
    const auto emb = text_->encode(tokenize(chunk));
    std::copy(emb.value().data.begin(), emb.value().data.end(), out.ptr() + start * d);
  }
  return out;
}

template <typename T>
void EsiModel<T>::clamp_temperature() {
  T& v = log_sigma_.mutable_value()[0];
  v = std::clamp(v, static_cast<T>(std::log(kMinTemperature)),
                 static_cast<T>(std::log(kMaxTemperature)));
}

template class EsiModel<float>;
template class EsiModel<double>;
template Tensor<float> stack_signals(const std::vector<const ECGRecord*>&);
template Tensor<double> stack_signals(const std::vector<const ECGRecord*>&);

// ---------------------------------------------------------------- optimizer

template <typename T>
double AdamW<T>::step(ParamStore<T>& params, double lr, double max_norm) {
  double sq = 0.0;
  for (const auto& e : params.entries()) {
    if (!e.var.requires_grad() || !e.var.has_grad()) continue;
    for (T g : e.var.grad().data) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("AdamW: non-finite gradient norm");
  const double clip = (max_norm > 0.0 && norm > max_norm) ? max_norm / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& e : params.entries()) {
    if (!e.var.requires_grad() || !e.var.has_grad()) continue;
    Tensor<T>& p = e.var.mutable_value();
    const Tensor<T>& g = e.var.grad();
    auto& m = m_[e.name];
    auto& v = v_[e.name];
    if (m.numel() != p.numel()) m = Tensor<float>(p.shape);
    if (v.numel() != p.numel()) v = Tensor<float>(p.shape);
    const double wd = e.decay ? weight_decay_ : 0.0;
    for (int64_t i = 0; i < p.numel(); ++i) {
      const double gi = clip * static_cast<double>(g[i]);
      const double mi = beta1_ * m[i] + (1.0 - beta1_) * gi;
      const double vi = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double update = (mi / bc1) / (std::sqrt(vi / bc2) + eps_) + wd * p[i];
      p[i] = static_cast<T>(p[i] - lr * update);
    }
  }
  return norm;
}

template class AdamW<float>;
template class AdamW<double>;

// ---------------------------------------------------------------- checkpoint

namespace {

constexpr char kCkptMagic[8] = {'E', 'S', 'I', 'C', 'K', 'P', 'T', '\0'};

void append_le(std::string& out, uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t read_le(const std::string& in, size_t& pos, int bytes) {
  if (pos + bytes > in.size()) throw LoadError("checkpoint: truncated header");
  uint64_t v = 0;
  for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(in[pos + i]);
  pos += bytes;
  return v;
}

json stats_to_json(const EpochStats& s) {
  return {{"epoch", s.epoch}, {"total", s.total}, {"contrastive", s.contrastive},
          {"captioning", s.captioning}, {"steps", s.steps}, {"lr", s.lr}, {"sigma", s.sigma}};
}

EpochStats stats_from_json(const json& j) {
  EpochStats s;
  s.epoch = j.at("epoch").get<int>();
  s.total = j.at("total").get<double>();
  s.contrastive = j.at("contrastive").get<double>();
  s.captioning = j.at("captioning").get<double>();
  s.steps = j.at("steps").get<int64_t>();
  s.lr = j.at("lr").get<double>();
  s.sigma = j.at("sigma").get<double>();
  return s;
}

}  // namespace

std::string Checkpoint::serialize() const {
  json meta;
  meta["config"] = config.to_json();
  std::ostringstream vs;
  vocab.save(vs);
  meta["vocab"] = vs.str();
  meta["epoch"] = epoch;
  meta["step"] = step;
  meta["rng_state"] = rng_state;
  meta["history"] = json::array();
  for (const auto& h : history) meta["history"].push_back(stats_to_json(h));
  meta["tensors"] = json::array();
  for (const auto& [name, t] : tensors) meta["tensors"].push_back({{"name", name}, {"shape", t.shape}});
  const std::string m = meta.dump();

  std::string out(kCkptMagic, 8);
  append_le(out, kVersion, 4);
  append_le(out, m.size(), 8);
  out += m;
  for (const auto& [name, t] : tensors)
    for (float v : t.data) append_le(out, std::bit_cast<uint32_t>(v), 4);
  return out;
}

Checkpoint Checkpoint::deserialize(const std::string& bytes) {
  if (bytes.size() < 20 || bytes.compare(0, 8, std::string(kCkptMagic, 8)) != 0)
    throw LoadError("not an ESI checkpoint");
  size_t pos = 8;
  const auto version = static_cast<uint32_t>(read_le(bytes, pos, 4));
  if (version != kVersion)
    throw LoadError("unsupported checkpoint version " + std::to_string(version));
  const auto meta_len = static_cast<size_t>(read_le(bytes, pos, 8));
  if (pos + meta_len > bytes.size()) throw LoadError("checkpoint: truncated metadata");
  Checkpoint c;
  try {
    const json meta = json::parse(bytes.substr(pos, meta_len));
    pos += meta_len;
    c.config = TrainConfig::from_json(meta.at("config"), TrainConfig::preset(
                                                             meta.at("config").at("variant")));
    std::istringstream vs(meta.at("vocab").get<std::string>());
    c.vocab = Vocabulary::load(vs);
    c.epoch = meta.at("epoch").get<int>();
    c.step = meta.at("step").get<int64_t>();
    c.rng_state = meta.at("rng_state").get<std::string>();
    for (const auto& h : meta.at("history")) c.history.push_back(stats_from_json(h));
    for (const auto& t : meta.at("tensors")) {
      Tensor<float> tensor(t.at("shape").get<Shape>());
      const size_t need = static_cast<size_t>(tensor.numel()) * 4;
      if (pos + need > bytes.size()) throw LoadError("checkpoint: truncated tensor data");
      for (auto& v : tensor.data) v = std::bit_cast<float>(static_cast<uint32_t>(read_le(bytes, pos, 4)));
      c.tensors.emplace_back(t.at("name").get<std::string>(), std::move(tensor));
    }
  } catch (const json::exception& e) {
    throw LoadError(std::string("checkpoint metadata: ") + e.what());
  }
  if (pos != bytes.size()) throw LoadError("checkpoint: trailing bytes");
  return c;
}

void Checkpoint::save(const fs::path& path) const {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw LoadError("cannot write checkpoint " + tmp.string());
    const std::string bytes = serialize();
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw LoadError("failed writing checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint Checkpoint::load(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return deserialize(ss.str());
}

const Tensor<float>* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

namespace {

void load_params(EsiModel<float>& model, const Checkpoint& ckpt) {
  for (auto& e : model.params().entries()) {
    const Tensor<float>* t = ckpt.find(e.name);
    if (!t) throw LoadError("checkpoint lacks parameter " + e.name);
    if (t->shape != e.var.value().shape)
      throw LoadError("checkpoint parameter " + e.name + " has shape " + shape_str(t->shape) +
                      ", model expects " + shape_str(e.var.value().shape));
    e.var.mutable_value().data = t->data;
  }
}

Checkpoint make_checkpoint(const EsiModel<float>& model, const AdamW<float>& opt, int epoch,
                           int64_t step, const std::string& rng_state,
                           const std::vector<EpochStats>& history) {
  Checkpoint c;
  c.config = model.config();
  c.vocab = model.vocab();
  c.epoch = epoch;
  c.step = step;
  c.rng_state = rng_state;
  c.history = history;
  for (const auto& e : model.params().entries()) c.tensors.emplace_back(e.name, e.var.value());
  for (const char* kind : {"m", "v"}) {
    const auto& moments = kind[0] == 'm' ? opt.first_moments() : opt.second_moments();
    for (const auto& e : model.params().entries()) {
      auto it = moments.find(e.name);
      c.tensors.emplace_back(std::string("adam.") + kind + "." + e.name,
                             it == moments.end() ? Tensor<float>(e.var.value().shape) : it->second);
    }
  }
  return c;
}

}  // namespace

std::unique_ptr<EsiModel<float>> model_from_checkpoint(const Checkpoint& ckpt) {
  auto model = std::make_unique<EsiModel<float>>(ckpt.config, ckpt.vocab);
  load_params(*model, ckpt);
  return model;
}

std::string parameter_hash(const ParamStore<float>& params, const std::string& prefix) {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  for (const auto& e : params.entries()) {
    if (e.name.rfind(prefix, 0) != 0) continue;
    EVP_DigestUpdate(ctx, e.name.data(), e.name.size() + 1);
    for (int64_t d : e.var.value().shape) EVP_DigestUpdate(ctx, &d, sizeof(d));
    const auto& data = e.var.value().data;
    EVP_DigestUpdate(ctx, data.data(), data.size() * sizeof(float));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int{digest[i]};
  return os.str();
}

// ---------------------------------------------------------------- training

PretrainResult pretrain(const std::vector<ECGTextPair>& pairs, const TrainConfig& config_in,
                        const PretrainOptions& options) {
  config_in.validate();
  if (pairs.size() < 2) throw std::invalid_argument("pretrain: need at least 2 pairs");
  for (const auto& p : pairs) {
    if (!p.record) throw std::invalid_argument("pretrain: pair without a record");
    if (p.record->n_leads != config_in.signal.in_leads)
      throw ShapeError("record " + p.record->record_id + " has " +
                       std::to_string(p.record->n_leads) + " leads, model expects " +
                       std::to_string(config_in.signal.in_leads));
    if (p.record->n_samples != pairs.front().record->n_samples)
      throw ShapeError("pretrain: records differ in length (" + p.record->record_id + ")");
    if (p.record->n_samples < config_in.signal.min_samples())
      throw ShapeError("record " + p.record->record_id + " is shorter than the stem needs");
  }
  const size_t N = pairs.size();
  const size_t bs = static_cast<size_t>(config_in.batch_size);
  const int64_t spe = static_cast<int64_t>(config_in.drop_last ? N / bs : (N + bs - 1) / bs);
  if (spe == 0)
    throw std::invalid_argument("pretrain: batch_size " + std::to_string(bs) + " exceeds the " +
                                std::to_string(N) + " available pairs");

  std::vector<std::string> texts;
  texts.reserve(N);
  for (const auto& p : pairs) texts.push_back(p.description);

  Vocabulary vocab = options.resume ? options.resume->vocab
                                    : Vocabulary::build(texts, config_in.vocab_min_freq);
  TrainConfig config = config_in;
  config.text.vocab_size = config.decoder.vocab_size = vocab.size();
  if (options.resume && options.resume->config.to_json() != config.to_json())
    throw std::invalid_argument("pretrain: resume checkpoint was trained with a different config");

  PretrainResult result;
  result.model = std::make_unique<EsiModel<float>>(config, vocab);
  EsiModel<float>& model = *result.model;
  AdamW<float> opt(config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay);
  std::mt19937_64 master(config.seed ^ 0x5eed5eed5eed5eedull);
  int start_epoch = 0;
  int64_t step = 0;
  std::vector<EpochStats> history;
  if (options.resume) {
    const Checkpoint& ck = *options.resume;
    load_params(model, ck);
    for (const auto& e : model.params().entries()) {
      const auto* m = ck.find("adam.m." + e.name);
      const auto* v = ck.find("adam.v." + e.name);
      if (!m || !v) throw LoadError("checkpoint lacks optimizer state for " + e.name);
      opt.first_moments()[e.name] = *m;
      opt.second_moments()[e.name] = *v;
    }
    opt.set_steps(ck.step);
    start_epoch = ck.epoch;
    step = ck.step;
    history = ck.history;
    std::istringstream rs(ck.rng_state);
    rs >> master;
    if (!rs) throw LoadError("checkpoint: bad RNG state");
  }
  if (config.freeze_text) model.params().set_trainable("text.", false);

  std::vector<TokenizedText> tokenized;
  const int max_len = std::min(config.text.max_len, config.decoder.max_len);
  for (const auto& t : texts) {
    tokenized.push_back(tokenize(t, vocab, max_len));
    if (std::count(tokenized.back().valid.begin(), tokenized.back().valid.end(), 1) < 3)
      throw ValidationError("description tokenizes to no words: '" + t + "'");
  }

  const int end_epoch = options.stop_after_epoch > 0
                            ? std::min(options.stop_after_epoch, config.epochs)
                            : config.epochs;
  const auto zero = [] { return Var<float>(Tensor<float>({1}, 0.0f)); };
  for (int epoch = start_epoch; epoch < end_epoch; ++epoch) {
    BatchIterator it(N, bs, true, master(), config.drop_last);
    EpochStats stats;
    stats.epoch = epoch + 1;
    std::vector<size_t> batch;
    int64_t batch_index = 0;
    while (it.next(batch)) {
      const double lr = lr_at(step, spe, config);
      std::vector<const ECGRecord*> recs;
      std::vector<std::string> batch_texts;
      for (size_t i : batch) {
        recs.push_back(pairs[i].record.get());
        batch_texts.push_back(texts[i]);
      }
      const TokenizedBatch tb = model.tokenize(batch_texts);
      Var<float> total, l_con = zero(), l_cap = zero();
      try {
        const auto enc = model.signal().encode(stack_signals<float>(recs));
        if (config.loss.lambda_con > 0.0)
          l_con = contrastive_loss(enc.pooled, model.text().encode(tb), model.log_sigma());
        if (config.loss.lambda_cap > 0.0)
          l_cap = captioning_loss(model.decoder().caption_logits(enc.tokens, tb), shift_targets(tb));
        total = total_loss(l_con, l_cap, config.loss);
        if (!std::isfinite(total.item())) throw NumericError("non-finite total loss");
      } catch (const NumericError& e) {
        std::string ids;
        for (size_t k = 0; k < std::min<size_t>(recs.size(), 8); ++k)
          ids += (k ? "," : "") + recs[k]->record_id;
        throw NumericError("epoch " + std::to_string(epoch + 1) + " batch " +
                           std::to_string(batch_index) + " (records " + ids + ", ...): " +
                           e.what());
      }
      model.params().zero_grad();
      backward(total);
      opt.step(model.params(), lr, config.grad_clip);
      model.clamp_temperature();
      stats.total += total.item();
      stats.contrastive += l_con.item();
      stats.captioning += l_cap.item();
      stats.lr = lr;
      ++stats.steps;
      ++step;
      ++batch_index;
    }
    model.params().zero_grad();
    const double n = static_cast<double>(std::max<int64_t>(stats.steps, 1));
    stats.total /= n;
    stats.contrastive /= n;
    stats.captioning /= n;
    stats.sigma = std::exp(static_cast<double>(model.log_sigma().item()));
    history.push_back(stats);
    if (options.on_epoch) options.on_epoch(stats);
    start_epoch = epoch + 1;
  }
  std::ostringstream rs;
  rs << master;
  result.checkpoint = make_checkpoint(model, opt, start_epoch, step, rs.str(), history);
  return result;
}

}  // namespace esi
