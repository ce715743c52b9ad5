#include "esi/data_model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

namespace esi {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Sex sex) {
  switch (sex) {
    case Sex::male: return "male";
    case Sex::female: return "female";
    default: return "unknown";
  }
}

Sex parse_sex(const std::string& text) {
  if (text == "male" || text == "M" || text == "m") return Sex::male;
  if (text == "female" || text == "F" || text == "f") return Sex::female;
  if (text == "unknown" || text.empty()) return Sex::unknown;
  throw ValidationError("unknown sex value: " + text);
}

std::string to_string(SourceTag tag) {
  switch (tag) {
    case SourceTag::cqa_generated: return "cqa_generated";
    case SourceTag::manual: return "manual";
    default: return "synthetic";
  }
}

void ECGRecord::validate() const {
  auto fail = [&](const std::string& m) { throw ValidationError("record " + record_id + ": " + m); };
  if (record_id.empty()) throw ValidationError("record with empty record_id");
  if (n_leads < 1) fail("n_leads must be >= 1");
  if (n_samples < 1) fail("n_samples must be >= 1");
  if (sampling_rate_hz < 1) fail("sampling_rate_hz must be positive");
  if (static_cast<int64_t>(signal.size()) != int64_t{n_leads} * n_samples) {
    fail("signal holds " + std::to_string(signal.size()) + " samples, expected " +
         std::to_string(n_leads) + " x " + std::to_string(n_samples));
  }
  for (float v : signal) {
    if (!std::isfinite(v)) fail("signal contains non-finite values");
  }
  if (age_years && *age_years < 0) fail("age_years must be non-negative");
}

void write_signal_file(const fs::path& path, const std::vector<float>& samples) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw LoadError("cannot write signal file " + path.string());
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(samples.data()),
             static_cast<std::streamsize>(samples.size() * sizeof(float)));
  } else {
    for (float v : samples) {
      auto bits = std::bit_cast<uint32_t>(v);
      bits = __builtin_bswap32(bits);
      os.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
    }
  }
  if (!os) throw LoadError("failed writing signal file " + path.string());
}

std::vector<float> read_signal_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) throw LoadError("cannot open signal file " + path.string());
  const auto bytes = static_cast<size_t>(is.tellg());
  if (bytes % sizeof(float) != 0) {
    throw LoadError("signal file " + path.string() + " size is not a multiple of 4 bytes");
  }
  std::vector<float> out(bytes / sizeof(float));
  is.seekg(0);
  is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(bytes));
  if (!is) throw LoadError("failed reading signal file " + path.string());
  if constexpr (std::endian::native != std::endian::little) {
    for (auto& v : out) v = std::bit_cast<float>(__builtin_bswap32(std::bit_cast<uint32_t>(v)));
  }
  return out;
}

std::vector<ECGRecord> load_manifest(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw LoadError("cannot open manifest " + path.string());
  const fs::path base = path.parent_path();
  std::vector<ECGRecord> out;
  std::set<std::string> ids;
  std::string line;
  size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw LoadError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    ECGRecord r;
    try {
      r.record_id = j.at("record_id").get<std::string>();
      r.n_leads = j.at("n_leads").get<int>();
      r.n_samples = j.at("n_samples").get<int64_t>();
      r.sampling_rate_hz = j.value("sampling_rate_hz", 500);
      if (j.contains("age_years") && !j["age_years"].is_null())
        r.age_years = j["age_years"].get<int>();
      if (j.contains("sex") && !j["sex"].is_null()) r.sex = parse_sex(j["sex"].get<std::string>());
      if (j.contains("labels")) r.labels = j["labels"].get<std::vector<std::string>>();
      if (j.contains("machine_report") && !j["machine_report"].is_null())
        r.machine_report = j["machine_report"].get<std::string>();
    } catch (const json::exception& e) {
      throw ValidationError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!ids.insert(r.record_id).second)
      throw ValidationError("duplicate record_id in manifest: " + r.record_id);
    const fs::path sig = base / j.at("signal_path").get<std::string>();
    try {
      r.signal = read_signal_file(sig);
    } catch (const LoadError& e) {
      throw LoadError("record " + r.record_id + ": " + e.what());
    }
    r.validate();
    out.push_back(std::move(r));
  }
  return out;
}

void save_manifest(const std::vector<ECGRecord>& records, const fs::path& path,
                   const std::string& signal_subdir) {
  const fs::path base = path.parent_path();
  if (!base.empty()) fs::create_directories(base);
  fs::create_directories(base / signal_subdir);
  std::ofstream os(path);
  if (!os) throw LoadError("cannot write manifest " + path.string());
  std::set<std::string> ids;
  for (const auto& r : records) {
    r.validate();
    if (!ids.insert(r.record_id).second)
      throw ValidationError("duplicate record_id: " + r.record_id);
    const std::string rel = signal_subdir + "/" + r.record_id + ".f32";
    write_signal_file(base / rel, r.signal);
    json j;
    j["record_id"] = r.record_id;
    j["signal_path"] = rel;
    j["n_leads"] = r.n_leads;
    j["n_samples"] = r.n_samples;
    j["sampling_rate_hz"] = r.sampling_rate_hz;
    j["age_years"] = r.age_years ? json(*r.age_years) : json(nullptr);
    j["sex"] = r.sex ? json(to_string(*r.sex)) : json(nullptr);
    j["labels"] = r.labels;
    j["machine_report"] = r.machine_report ? json(*r.machine_report) : json(nullptr);
    os << j.dump() << '\n';
  }
}

void save_descriptions(const std::vector<std::pair<std::string, std::string>>& rows,
                       const fs::path& path) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw LoadError("cannot write descriptions " + path.string());
  for (const auto& [id, text] : rows) {
    std::string clean = text;
    std::replace_if(clean.begin(), clean.end(), [](char c) { return c == '\t' || c == '\n' || c == '\r'; }, ' ');
    os << id << '\t' << clean << '\n';
  }
}

std::vector<std::pair<std::string, std::string>> load_descriptions(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw LoadError("cannot open descriptions " + path.string());
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw LoadError("descriptions: missing tab in line: " + line);
    out.emplace_back(line.substr(0, tab), line.substr(tab + 1));
  }
  return out;
}

std::vector<ECGTextPair> join_pairs(const std::vector<ECGRecord>& records,
                                    const std::vector<std::pair<std::string, std::string>>& rows,
                                    SourceTag tag) {
  std::map<std::string, std::string> by_id(rows.begin(), rows.end());
  std::vector<ECGTextPair> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    auto it = by_id.find(r.record_id);
    if (it == by_id.end()) throw ValidationError("no description for record " + r.record_id);
    if (it->second.find_first_not_of(" \t") == std::string::npos)
      throw ValidationError("empty description for record " + r.record_id);
    out.push_back({std::make_shared<const ECGRecord>(r), it->second, tag});
  }
  return out;
}

std::array<WaveParams, 5> SyntheticSpec::default_waves() {
  return {{
      {0.15, 0.10, 0.025},   // P
      {-0.10, 0.21, 0.010},  // Q
      {1.00, 0.24, 0.012},   // R
      {-0.25, 0.27, 0.012},  // S
      {0.30, 0.48, 0.045},   // T
  }};
}

int SyntheticSpec::beat_count() const {
  return static_cast<int>(std::lround(heart_rate_bpm * duration_s / 60.0));
}

void SyntheticSpec::validate() const {
  auto fail = [](const std::string& m) { throw ValidationError("SyntheticSpec: " + m); };
  if (!(heart_rate_bpm > 0)) fail("heart_rate_bpm must be positive");
  if (!(duration_s > 0)) fail("duration_s must be positive");
  if (sampling_rate_hz < 1) fail("sampling_rate_hz must be positive");
  if (!(noise_std >= 0)) fail("noise_std must be non-negative");
  for (const auto& w : waves)
    if (!(w.width_s > 0)) fail("wave widths must be positive");
  if (duration_s * heart_rate_bpm / 60.0 < 1.0) fail("duration must cover at least one beat");
  if (lead_scale.empty()) fail("lead_scale must have at least one lead");
  if (start_offset_s < 0) fail("start_offset_s must be non-negative");
}

ECGRecord synthesize_ecg(const SyntheticSpec& spec, uint64_t seed, const std::string& record_id) {
  spec.validate();
  const int leads = static_cast<int>(spec.lead_scale.size());
  const int64_t n = std::llround(spec.duration_s * spec.sampling_rate_hz);
  const double rr = 60.0 / spec.heart_rate_bpm;
  const int beats = spec.beat_count();
  const double fs = spec.sampling_rate_hz;

  std::vector<double> beat_wave(n, 0.0);
  for (int k = 0; k < beats; ++k) {
    const double onset = spec.start_offset_s + k * rr;
    for (const auto& w : spec.waves) {
      const double c = onset + w.center_s;
      // +-5 sigma support
      const int64_t lo = std::max<int64_t>(0, static_cast<int64_t>(std::floor((c - 5 * w.width_s) * fs)));
      const int64_t hi = std::min<int64_t>(n - 1, static_cast<int64_t>(std::ceil((c + 5 * w.width_s) * fs)));
      for (int64_t t = lo; t <= hi; ++t) {
        const double z = (t / fs - c) / w.width_s;
        beat_wave[t] += w.amplitude_mv * std::exp(-0.5 * z * z);
      }
    }
  }
  if (spec.baseline_wander_mv != 0.0) {
    for (int64_t t = 0; t < n; ++t)
      beat_wave[t] += spec.baseline_wander_mv *
                      std::sin(2.0 * std::numbers::pi * spec.baseline_wander_hz * t / fs);
  }

  ECGRecord r;
  r.record_id = record_id;
  r.n_leads = leads;
  r.n_samples = n;
  r.sampling_rate_hz = spec.sampling_rate_hz;
  r.signal.resize(static_cast<size_t>(leads * n));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int l = 0; l < leads; ++l) {
    for (int64_t t = 0; t < n; ++t) {
      double v = spec.lead_scale[l] * beat_wave[t];
      if (spec.noise_std > 0) v += spec.noise_std * noise(rng);
      r.signal[l * n + t] = static_cast<float>(v);
    }
  }
  return r;
}

ECGRecord extract_segment(const ECGRecord& record, double seconds, double offset_s) {
  const int64_t start = std::llround(offset_s * record.sampling_rate_hz);
  const int64_t len = std::llround(seconds * record.sampling_rate_hz);
  if (start < 0 || len < 1 || start + len > record.n_samples) {
    throw ValidationError("record " + record.record_id + ": segment [" + std::to_string(offset_s) +
                          " s, +" + std::to_string(seconds) + " s) outside " +
                          std::to_string(record.duration_s()) + " s signal");
  }
  ECGRecord out = record;
  out.n_samples = len;
  out.signal.resize(static_cast<size_t>(record.n_leads * len));
  for (int l = 0; l < record.n_leads; ++l)
    std::copy_n(record.signal.data() + l * record.n_samples + start, len,
                out.signal.data() + l * len);
  return out;
}

ECGRecord decimate(const ECGRecord& record, int factor) {
  if (factor < 1 || record.sampling_rate_hz % factor != 0)
    throw ValidationError("decimation factor must divide the sampling rate");
  ECGRecord out = record;
  out.n_samples = record.n_samples / factor;
  out.sampling_rate_hz = record.sampling_rate_hz / factor;
  out.signal.assign(static_cast<size_t>(record.n_leads * out.n_samples), 0.0f);
  for (int l = 0; l < record.n_leads; ++l)
    for (int64_t t = 0; t < out.n_samples; ++t) {
      double acc = 0.0;
      for (int f = 0; f < factor; ++f) acc += record.signal[l * record.n_samples + t * factor + f];
      out.signal[l * out.n_samples + t] = static_cast<float>(acc / factor);
    }
  return out;
}

MisalignmentResult inject_misalignment(const std::vector<ECGTextPair>& pairs, double ratio,
                                       uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0))
    throw std::invalid_argument("misalignment ratio must lie in [0, 1], got " +
                                std::to_string(ratio));
  MisalignmentResult res;
  res.pairs = pairs;
  const size_t N = pairs.size();
  // The epsilon absorbs representation error in products like 0.7 * 10.
  size_t m = static_cast<size_t>(std::floor(ratio * static_cast<double>(N) + 1e-9));
  if (ratio > 0.0 && N < 2)
    throw std::invalid_argument("misalignment needs at least 2 pairs");
  if (m == 0) return res;
  if (m == 1) {
    m = 2;
    res.warning = "floor(ratio * N) = 1 admits no derangement; shuffling 2 pairs instead";
  }
  std::mt19937_64 rng(seed);
  std::vector<size_t> idx(N);
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates: the first m entries are a uniform m-subset.
  for (size_t i = 0; i < m; ++i) {
    std::uniform_int_distribution<size_t> pick(i, N - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  std::vector<size_t> chosen(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(m));
  std::sort(chosen.begin(), chosen.end());
  // Sattolo's algorithm yields a single m-cycle, hence a derangement.
  std::vector<size_t> perm(m);
  std::iota(perm.begin(), perm.end(), 0);
  for (size_t i = m - 1; i > 0; --i) {
    std::uniform_int_distribution<size_t> pick(0, i - 1);
    std::swap(perm[i], perm[pick(rng)]);
  }
  for (size_t i = 0; i < m; ++i) {
    res.pairs[chosen[i]].description = pairs[chosen[perm[i]]].description;
  }
  res.shuffled = std::move(chosen);
  return res;
}

BatchIterator::BatchIterator(size_t n, size_t batch_size, bool shuffle, uint64_t seed,
                             bool drop_last)
    : order_(n), batch_size_(batch_size), drop_last_(drop_last) {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  std::iota(order_.begin(), order_.end(), 0);
  if (shuffle) {
    std::mt19937_64 rng(seed);
    for (size_t i = n; i > 1; --i) {
      std::uniform_int_distribution<size_t> pick(0, i - 1);
      std::swap(order_[i - 1], order_[pick(rng)]);
    }
  }
}

bool BatchIterator::next(std::vector<size_t>& batch) {
  const size_t remaining = order_.size() - pos_;
  if (remaining == 0 || (drop_last_ && remaining < batch_size_)) return false;
  const size_t take = std::min(batch_size_, remaining);
  batch.assign(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
               order_.begin() + static_cast<std::ptrdiff_t>(pos_ + take));
  pos_ += take;
  return true;
}

size_t BatchIterator::num_batches() const {
  return drop_last_ ? order_.size() / batch_size_
                    : (order_.size() + batch_size_ - 1) / batch_size_;
}

}  // namespace esi
