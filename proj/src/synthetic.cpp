#include "esi/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace esi::synth {

const std::vector<std::string>& class_codes() {
  static const std::vector<std::string> codes = {"NORM", "SBRAD", "STACH", "RBBB"};
  return codes;
}

void BenchmarkSpec::validate() const {
  if (n_classes < 2 || n_classes > static_cast<int>(class_codes().size()))
    throw ValidationError("benchmark: n_classes must lie in [2, " +
                          std::to_string(class_codes().size()) + "]");
  if (n_leads < 1) throw ValidationError("benchmark: n_leads must be positive");
  if (sampling_rate_hz < 50) throw ValidationError("benchmark: sampling rate below 50 Hz");
  if (!(duration_s >= 2.0)) throw ValidationError("benchmark: duration must be at least 2 s");
  if (!(noise_std >= 0.0) || !(shift >= 0.0))
    throw ValidationError("benchmark: noise_std and shift must be non-negative");
}

uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  // splitmix64 finalizer over the combined state
  uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

namespace {

const double kLeadPattern[12] = {0.8, 1.0, 0.4, -0.9, 0.3, 0.7, -0.5, 0.3, 0.8, 1.2, 1.1, 0.9};

}  // namespace

SyntheticSpec class_spec(int cls, const BenchmarkSpec& b, uint64_t seed) {
  b.validate();
  if (cls < 0 || cls >= b.n_classes) throw ValidationError("benchmark: class out of range");
  std::mt19937_64 rng(seed);
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto gauss = [&](double sd) { return std::normal_distribution<double>(0.0, sd)(rng); };

  SyntheticSpec s;
  s.duration_s = b.duration_s;
  s.sampling_rate_hz = b.sampling_rate_hz;
  s.noise_std = b.noise_std * (1.0 + b.shift);
  auto& w = s.waves;
  switch (cls) {
    case 0:  // NORM
      s.heart_rate_bpm = uni(60.0, 95.0);
      break;
    case 1:  // SBRAD
      s.heart_rate_bpm = uni(40.0, 56.0);
      break;
    case 2:  // STACH
      s.heart_rate_bpm = uni(105.0, 140.0);
      w[kP].center_s = 0.12;
      w[kT].center_s = 0.38;
      w[kT].amplitude_mv = 0.18;
      w[kT].width_s = 0.035;
      break;
    case 3:  // RBBB: broad R, deep and slurred S
      s.heart_rate_bpm = uni(60.0, 95.0);
      w[kR].width_s = 0.022;
      w[kS].amplitude_mv = -0.55;
      w[kS].center_s = 0.30;
      w[kS].width_s = 0.03;
      w[kT].amplitude_mv = -0.15;
      w[kT].center_s = 0.52;
      break;
  }
  for (auto& wave : w) {
    wave.amplitude_mv *= uni(0.85, 1.15);
    wave.center_s += gauss(0.004);
    wave.width_s *= uni(0.9, 1.1);
  }
  s.lead_scale.resize(b.n_leads);
  const double gain = 1.0 + 0.3 * b.shift;
  for (int l = 0; l < b.n_leads; ++l) s.lead_scale[l] = gain * kLeadPattern[l % 12] * uni(0.8, 1.2);
  s.baseline_wander_mv = uni(0.0, 0.08) * (1.0 + 2.0 * b.shift);
  s.baseline_wander_hz = uni(0.15, 0.4);

  // Keep every R peak inside the window.
  const double rr = 60.0 / s.heart_rate_bpm;
  const int beats = s.beat_count();
  const double latest = b.duration_s - (beats - 1) * rr - w[kR].center_s - 0.05;
  s.start_offset_s = latest > 0.0 ? uni(0.0, std::min(latest, rr)) : 0.0;
  return s;
}

ECGRecord make_record(int cls, const BenchmarkSpec& spec, uint64_t seed, const std::string& id) {
  const SyntheticSpec s = class_spec(cls, spec, mix_seed(seed, 0));
  ECGRecord r = synthesize_ecg(s, mix_seed(seed, 1), id);
  r.labels = {class_codes()[cls]};
  return r;
}

std::vector<ECGRecord> make_records(int n, const BenchmarkSpec& spec, uint64_t seed,
                                    const std::string& id_prefix) {
  spec.validate();
  if (n < 0) throw ValidationError("benchmark: negative record count");
  std::vector<ECGRecord> out(n);
  const int width = std::max<int>(5, static_cast<int>(std::to_string(n).size()));
#pragma omp parallel for schedule(dynamic, 16)
  for (int i = 0; i < n; ++i) {
    const uint64_t rs = mix_seed(seed, static_cast<uint64_t>(i));
    std::string num = std::to_string(i);
    num.insert(0, static_cast<size_t>(std::max(0, width - static_cast<int>(num.size()))), '0');
    ECGRecord r = make_record(i % spec.n_classes, spec, rs, id_prefix + num);
    std::mt19937_64 rng(mix_seed(rs, 2));
    r.age_years = std::uniform_int_distribution<int>(20, 85)(rng);
    r.sex = std::bernoulli_distribution(0.5)(rng) ? Sex::male : Sex::female;
    out[i] = std::move(r);
  }
  return out;
}

int class_of(const ECGRecord& record) {
  if (record.labels.empty()) return -1;
  const auto& codes = class_codes();
  auto it = std::find(codes.begin(), codes.end(), record.labels.front());
  return it == codes.end() ? -1 : static_cast<int>(it - codes.begin());
}

}  // namespace esi::synth
