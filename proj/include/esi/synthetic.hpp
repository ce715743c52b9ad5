#pragma once

// Desk-scale arrhythmia benchmark built on synthesize_ecg: each class has its
// own heart-rate range and beat morphology, and every record is jittered in
// amplitude, timing, lead gains, noise and baseline wander.

#include <cstdint>
#include <string>
#include <vector>

#include "esi/data_model.hpp"

namespace esi::synth {

// NORM, SBRAD, STACH, RBBB.
const std::vector<std::string>& class_codes();

struct BenchmarkSpec {
  int n_classes = 4;
  int n_leads = 12;
  int sampling_rate_hz = 100;
  double duration_s = 5.0;
  double noise_std = 0.03;
  // 0 reproduces the pretraining distribution; larger values raise the noise
  // floor, the baseline wander and the lead gains (a different "site").
  double shift = 0.0;

  void validate() const;
};

// The generator parameters of one record; exposed for tests.
SyntheticSpec class_spec(int cls, const BenchmarkSpec& spec, uint64_t seed);

ECGRecord make_record(int cls, const BenchmarkSpec& spec, uint64_t seed, const std::string& id);

// Record i has class i mod n_classes, random age and sex, and the single
// label class_codes()[class]. Record i depends only on (seed, i).
std::vector<ECGRecord> make_records(int n, const BenchmarkSpec& spec, uint64_t seed,
                                    const std::string& id_prefix = "syn");

// Index of a record's first label in class_codes(), or -1.
int class_of(const ECGRecord& record);

uint64_t mix_seed(uint64_t seed, uint64_t stream);

}  // namespace esi::synth
