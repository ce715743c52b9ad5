#pragma once

// Downstream evaluation: zero-shot scoring against class prompts, linear
// probing and fine-tuning of the signal tower, metrics, MMD, and the
// ablation runner over the synthetic benchmark.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "esi/cqa.hpp"
#include "esi/pretrainer.hpp"
#include "esi/synthetic.hpp"

namespace esi::downstream {

enum class TaskKind { multilabel, single_label };
enum class Setting { zero_shot, linear_probe, fine_tune };

std::string to_string(TaskKind kind);
std::string to_string(Setting setting);

struct TaskSpec {
  TaskKind kind = TaskKind::single_label;
  std::vector<std::string> class_names;         // matched against record labels
  std::vector<std::string> class_descriptions;  // zero-shot only
  double segment_s = 0.0;                       // identification segment length, 0 = whole record

  // "ECG showing <description>."
  std::string prompt(size_t cls) const;
  void validate(bool zero_shot) const;
};

// Binary targets [n, C] from record labels.
std::vector<uint8_t> targets_from_records(const std::vector<const ECGRecord*>& records,
                                          const TaskSpec& task);

// ---------------------------------------------------------------- metrics

struct AucResult {
  std::vector<double> per_class;  // NaN where the class is degenerate
  double macro = 0.0;
  std::vector<std::string> warnings;
};

// One-vs-rest Mann-Whitney AUC (ties count one half) per column of scores
// [n, C], macro-averaged over classes with at least one positive and one
// negative.
AucResult metric_auc(const std::vector<double>& scores, const std::vector<uint8_t>& labels,
                     size_t n_classes);

// Unweighted mean of per-class F1 over classes with at least one positive.
double macro_f1(const std::vector<uint8_t>& predicted, const std::vector<uint8_t>& labels,
                size_t n_classes);

// Single-label: fraction of argmax hits. Multilabel: exact-match ratio.
double accuracy(const std::vector<uint8_t>& predicted, const std::vector<uint8_t>& labels,
                size_t n_classes);

// Argmax one-hot (single-label, and zero-shot multilabel) or logit > 0
// (trained multilabel heads).
std::vector<uint8_t> predict(const std::vector<double>& scores, size_t n_classes, bool argmax);

struct MmdResult {
  double value = 0.0;
  double bandwidth = 0.0;
  std::optional<std::string> warning;
};

// Biased (V-statistic) squared MMD with a Gaussian kernel
// exp(-|x - y|^2 / (2 h^2)), h = median pairwise distance over X u Y.
// X [n, d], Y [m, d] row-major. Symmetric in X and Y to the last bit.
MmdResult mmd(const std::vector<double>& X, size_t n, const std::vector<double>& Y, size_t m,
              size_t d);

struct EvalReport {
  Setting setting = Setting::zero_shot;
  std::vector<std::string> class_names;
  std::vector<double> per_class_auc;
  double macro_auc = 0.0;
  double macro_f1 = 0.0;
  double accuracy = 0.0;
  int64_t n_eval = 0;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const;
};

EvalReport evaluate(const std::vector<double>& scores, const std::vector<uint8_t>& labels,
                    const TaskSpec& task, Setting setting, bool argmax_predictions);

// ---------------------------------------------------------------- settings

// score(r, c) = cosine(signal embedding of r, text embedding of prompt c).
std::vector<double> zero_shot_classify(const std::vector<const ECGRecord*>& records,
                                       const TaskSpec& task, const EsiModel<float>& model);

// Row-wise cosine similarity of A [n, d] against B [c, d].
std::vector<double> cosine_scores(const std::vector<double>& A, size_t n,
                                  const std::vector<double>& B, size_t c, size_t d);

struct ProbeConfig {
  double l2 = 1e-4;
  double tolerance = 1e-6;  // stop when the loss changes by less than this
  int max_iterations = 20000;
};

// Affine head W [d, C], b [C] on frozen features.
struct LinearHead {
  size_t d = 0, c = 0;
  std::vector<double> weight;
  std::vector<double> bias;
  double final_loss = 0.0;
  int iterations = 0;
  bool converged = false;

  std::vector<double> logits(const std::vector<double>& X, size_t n) const;
};

// Full-batch gradient descent with Armijo backtracking on softmax
// cross-entropy (single-label) or per-class logistic loss (multilabel),
// plus l2/2 |W|^2.
LinearHead train_linear_head(const std::vector<double>& X, size_t n, size_t d,
                             const std::vector<uint8_t>& Y, size_t c, TaskKind kind,
                             const ProbeConfig& config);

std::vector<double> signal_features(const EsiModel<float>& model,
                                    const std::vector<const ECGRecord*>& records);

struct ProbeResult {
  LinearHead head;
  EvalReport report;
  std::string encoder_hash_before;
  std::string encoder_hash_after;
};

ProbeResult linear_probe(const std::vector<const ECGRecord*>& train,
                         const std::vector<const ECGRecord*>& test, const TaskSpec& task,
                         const EsiModel<float>& model, const ProbeConfig& config = {});

struct FineTuneConfig {
  int epochs = 10;
  double lr = 3e-4;
  double head_lr = 3e-3;
  int batch_size = 32;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  uint64_t seed = 0;
  ProbeConfig probe;  // the head starts from the linear-probe solution
};

struct FineTuneResult {
  EvalReport report;
  std::vector<double> epoch_losses;
};

// Trains the signal tower and a linear head jointly, starting from the
// probe head (the model itself is not modified; a copy is trained).
FineTuneResult fine_tune(const std::vector<const ECGRecord*>& train,
                         const std::vector<const ECGRecord*>& test, const TaskSpec& task,
                         const Checkpoint& checkpoint, const FineTuneConfig& config = {});

// One-shot closed-set identification: the head is fitted on one enrollment
// segment per subject and evaluated on the query segments.
EvalReport one_shot_identification(const std::vector<const ECGRecord*>& enrollment,
                                   const std::vector<const ECGRecord*>& queries,
                                   const std::vector<std::string>& subject_of_enrollment,
                                   const std::vector<std::string>& subject_of_query,
                                   const EsiModel<float>& model, const ProbeConfig& config = {});

// ---------------------------------------------------------------- benchmark

struct BenchmarkConfig {
  int n_pretrain = 512;
  int n_train = 256;  // labelled records for probing / fine-tuning
  int n_test = 128;
  uint64_t seed = 7;
  synth::BenchmarkSpec spec;
  double test_shift = 0.0;  // shift of the probe-train and test sets
  size_t retrieval_k = 4;
};

struct Benchmark {
  std::vector<ECGRecord> pretrain_records;
  std::vector<std::pair<std::string, std::string>> descriptions;
  std::vector<ECGRecord> train_records;
  std::vector<ECGRecord> test_records;
  TaskSpec task;

  std::vector<ECGTextPair> pairs(size_t limit = SIZE_MAX) const;
  static std::vector<const ECGRecord*> pointers(const std::vector<ECGRecord>& records);
};

// Records from three disjoint seed streams; pretraining descriptions from
// the seeded knowledge base and the mock generation client; zero-shot class
// descriptions from the same pipeline without demographics.
Benchmark build_benchmark(const BenchmarkConfig& config);

TaskSpec benchmark_task(int n_classes);

// Task over arbitrary condition codes, with class descriptions generated
// from the seeded knowledge base.
TaskSpec task_from_codes(const std::vector<std::string>& codes, TaskKind kind);

// ---------------------------------------------------------------- ablations

enum class AblationKind { misalignment, datasize, component };

std::string to_string(AblationKind kind);
AblationKind parse_ablation_kind(const std::string& text);

struct AblationRow {
  std::string point;  // grid value or component name
  double value = 0.0;  // numeric grid value (ratio or size); index for components
  double probe_auc = 0.0;
  double mmd = -1.0;  // datasize only
  double final_loss = 0.0;
  double seconds = 0.0;
  std::string status = "ok";
};

struct AblationConfig {
  AblationKind kind = AblationKind::misalignment;
  std::vector<double> grid;  // ratios or pretraining sizes; ignored for components
  TrainConfig train;
  BenchmarkConfig bench;
  int mmd_samples = 512;
  // Datasize runs train for min(epochs, ceil(budget / size)) epochs (at
  // least 2), with warmup and decay boundaries scaled to match.
  int64_t sample_budget = 64000;
  bool include_random_baseline = true;
  std::function<void(const AblationRow&)> on_row;
};

struct AblationTable {
  AblationKind kind = AblationKind::misalignment;
  std::vector<AblationRow> rows;
  std::optional<AblationRow> random_baseline;

  // Tab-separated: point, value, probe_auc, mmd, final_loss, seconds, status.
  std::string to_tsv() const;
  static AblationTable from_tsv(const std::string& text);
};

// Per grid point: pretrain on the benchmark (misaligned, subsampled or with
// a loss term removed), linear-probe, record AUC (and MMD between embeddings
// of the pretraining and test records). A failing point is recorded with its
// error and the run continues.
AblationTable run_ablation(const AblationConfig& config);

}  // namespace esi::downstream
