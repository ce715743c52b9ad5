#pragma once

// ECG records, ECG-text pairs, the on-disk manifest format, the Gaussian-bump
// synthetic generator, batching and the misalignment injector.

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace esi {

enum class Sex { male, female, unknown };

std::string to_string(Sex sex);
Sex parse_sex(const std::string& text);

class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ECGRecord {
  std::string record_id;
  int n_leads = 0;
  int64_t n_samples = 0;
  std::vector<float> signal;  // lead-major [n_leads * n_samples], millivolts
  int sampling_rate_hz = 500;
  std::optional<int> age_years;
  std::optional<Sex> sex;
  std::vector<std::string> labels;
  std::optional<std::string> machine_report;

  const float* lead(int l) const { return signal.data() + static_cast<int64_t>(l) * n_samples; }
  double duration_s() const { return static_cast<double>(n_samples) / sampling_rate_hz; }
  // Throws ValidationError on shape mismatch or non-finite samples.
  void validate() const;
};

using RecordPtr = std::shared_ptr<const ECGRecord>;

enum class SourceTag { cqa_generated, manual, synthetic };

std::string to_string(SourceTag tag);

struct ECGTextPair {
  RecordPtr record;
  std::string description;
  SourceTag source_tag = SourceTag::cqa_generated;
};

// Manifest: one JSON object per line with record_id, signal_path (relative to
// the manifest's directory), n_leads, n_samples, sampling_rate_hz, age_years,
// sex, labels, machine_report. Signal files hold raw little-endian float32,
// lead-major.
std::vector<ECGRecord> load_manifest(const std::filesystem::path& path);

// Writes signals under `<manifest dir>/<signal_subdir>/<record_id>.f32`.
void save_manifest(const std::vector<ECGRecord>& records, const std::filesystem::path& path,
                   const std::string& signal_subdir = "signals");

void write_signal_file(const std::filesystem::path& path, const std::vector<float>& samples);
std::vector<float> read_signal_file(const std::filesystem::path& path);

// `record_id<TAB>description` per line. Tabs and newlines inside a
// description are replaced by spaces on write.
void save_descriptions(const std::vector<std::pair<std::string, std::string>>& rows,
                       const std::filesystem::path& path);
std::vector<std::pair<std::string, std::string>> load_descriptions(
    const std::filesystem::path& path);

// Joins records with descriptions by record_id, in record order. Records
// without a description are an error.
std::vector<ECGTextPair> join_pairs(const std::vector<ECGRecord>& records,
                                    const std::vector<std::pair<std::string, std::string>>& rows,
                                    SourceTag tag);

struct WaveParams {
  double amplitude_mv = 0.0;
  double center_s = 0.0;  // offset from beat onset
  double width_s = 0.01;  // Gaussian standard deviation
};

enum Wave { kP = 0, kQ = 1, kR = 2, kS = 3, kT = 4 };

struct SyntheticSpec {
  double heart_rate_bpm = 60.0;
  double duration_s = 10.0;
  int sampling_rate_hz = 500;
  double noise_std = 0.0;
  std::array<WaveParams, 5> waves = default_waves();
  std::vector<double> lead_scale = std::vector<double>(12, 1.0);
  double start_offset_s = 0.0;        // onset of the first beat
  double baseline_wander_mv = 0.0;    // amplitude of a slow sinusoidal drift
  double baseline_wander_hz = 0.25;

  static std::array<WaveParams, 5> default_waves();
  int beat_count() const;
  void validate() const;
};

// Beats k = 0..beat_count()-1 start at start_offset_s + k * 60 / heart_rate;
// each beat is a sum of one Gaussian bump per wave. Leads are the beat
// waveform scaled per lead, plus white noise of std noise_std.
ECGRecord synthesize_ecg(const SyntheticSpec& spec, uint64_t seed,
                         const std::string& record_id = "synthetic");

// Leading (or offset) window of `seconds` from a record.
ECGRecord extract_segment(const ECGRecord& record, double seconds, double offset_s = 0.0);

// Integer-factor decimation by block averaging.
ECGRecord decimate(const ECGRecord& record, int factor);

struct MisalignmentResult {
  std::vector<ECGTextPair> pairs;
  std::vector<size_t> shuffled;  // indices whose description was moved
  std::optional<std::string> warning;
};

// Moves the descriptions of floor(ratio * N) uniformly chosen pairs along a
// random derangement of those positions.
MisalignmentResult inject_misalignment(const std::vector<ECGTextPair>& pairs, double ratio,
                                       uint64_t seed);

// Epoch order of indices [0, n) split into batches.
class BatchIterator {
 public:
  BatchIterator(size_t n, size_t batch_size, bool shuffle, uint64_t seed, bool drop_last = false);

  bool next(std::vector<size_t>& batch);
  size_t num_batches() const;
  void reset() { pos_ = 0; }

 private:
  std::vector<size_t> order_;
  size_t batch_size_;
  bool drop_last_;
  size_t pos_ = 0;
};

}  // namespace esi
