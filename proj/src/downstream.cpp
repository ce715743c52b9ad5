#include "esi/downstream.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace esi::downstream {

using nlohmann::json;

std::string to_string(TaskKind kind) {
  return kind == TaskKind::multilabel ? "multilabel" : "single-label";
}

std::string to_string(Setting setting) {
  switch (setting) {
    case Setting::zero_shot: return "zero-shot";
    case Setting::linear_probe: return "linear-probe";
    default: return "fine-tune";
  }
}

std::string TaskSpec::prompt(size_t cls) const {
  std::string d = class_descriptions.at(cls);
  while (!d.empty() && (d.back() == '.' || d.back() == ' ')) d.pop_back();
  return "ECG showing " + d + ".";
}

void TaskSpec::validate(bool zero_shot) const {
  if (class_names.size() < 2) throw ValidationError("task needs at least 2 classes");
  if (zero_shot) {
    if (class_descriptions.size() != class_names.size())
      throw ValidationError("zero-shot task needs one description per class");
    for (const auto& d : class_descriptions)
      if (split_words(d).empty()) throw ValidationError("zero-shot class description is empty");
  }
}

std::vector<uint8_t> targets_from_records(const std::vector<const ECGRecord*>& records,
                                          const TaskSpec& task) {
  const size_t C = task.class_names.size();
  std::vector<uint8_t> Y(records.size() * C, 0);
  for (size_t i = 0; i < records.size(); ++i) {
    int hits = 0;
    for (size_t c = 0; c < C; ++c) {
      const auto& labels = records[i]->labels;
      if (std::find(labels.begin(), labels.end(), task.class_names[c]) != labels.end()) {
        Y[i * C + c] = 1;
        ++hits;
      }
    }
    if (task.kind == TaskKind::single_label && hits != 1)
      throw ValidationError("record " + records[i]->record_id + " matches " +
                            std::to_string(hits) + " classes of a single-label task");
  }
  return Y;
}

// ---------------------------------------------------------------- metrics

AucResult metric_auc(const std::vector<double>& scores, const std::vector<uint8_t>& labels,
                     size_t C) {
  if (C == 0 || scores.size() != labels.size() || scores.size() % C != 0)
    throw std::invalid_argument("metric_auc: scores and labels must both be [n, C]");
  const size_t n = scores.size() / C;
  AucResult res;
  res.per_class.assign(C, std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  size_t valid = 0;
  std::vector<size_t> order(n);
  for (size_t c = 0; c < C; ++c) {
    size_t pos = 0;
    for (size_t i = 0; i < n; ++i) pos += labels[i * C + c] ? 1 : 0;
    const size_t neg = n - pos;
    if (pos == 0 || neg == 0) {
      res.warnings.push_back("class " + std::to_string(c) + " has no " +
                             (pos == 0 ? "positive" : "negative") +
                             " examples; excluded from the macro AUC");
      continue;
    }
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a * C + c] < scores[b * C + c]; });
    double rank_sum = 0.0;
    for (size_t i = 0; i < n;) {
      size_t j = i;
      while (j + 1 < n && scores[order[j + 1] * C + c] == scores[order[i] * C + c]) ++j;
      const double mid = 0.5 * static_cast<double>(i + j) + 1.0;  // 1-based midrank
      for (size_t k = i; k <= j; ++k)
        if (labels[order[k] * C + c]) rank_sum += mid;
      i = j + 1;
    }
    const double P = static_cast<double>(pos), Q = static_cast<double>(neg);
    res.per_class[c] = (rank_sum - P * (P + 1.0) / 2.0) / (P * Q);
    sum += res.per_class[c];
    ++valid;
  }
  res.macro = valid ? sum / static_cast<double>(valid) : std::numeric_limits<double>::quiet_NaN();
  return res;
}

double macro_f1(const std::vector<uint8_t>& predicted, const std::vector<uint8_t>& labels,
                size_t C) {
  if (predicted.size() != labels.size() || C == 0 || labels.size() % C != 0)
    throw std::invalid_argument("macro_f1: shape mismatch");
  const size_t n = labels.size() / C;
  double sum = 0.0;
  size_t valid = 0;
  for (size_t c = 0; c < C; ++c) {
    size_t tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < n; ++i) {
      const bool p = predicted[i * C + c], y = labels[i * C + c];
      tp += p && y;
      fp += p && !y;
      fn += !p && y;
    }
    if (tp + fn == 0) continue;
    sum += 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
    ++valid;
  }
  return valid ? sum / static_cast<double>(valid) : 0.0;
}

double accuracy(const std::vector<uint8_t>& predicted, const std::vector<uint8_t>& labels,
                size_t C) {
  if (predicted.size() != labels.size() || C == 0 || labels.size() % C != 0)
    throw std::invalid_argument("accuracy: shape mismatch");
  const size_t n = labels.size() / C;
  if (n == 0) return 0.0;
  size_t hits = 0;
  for (size_t i = 0; i < n; ++i)
    hits += std::equal(predicted.begin() + i * C, predicted.begin() + (i + 1) * C,
                       labels.begin() + i * C);
  return static_cast<double>(hits) / static_cast<double>(n);
}

std::vector<uint8_t> predict(const std::vector<double>& scores, size_t C, bool argmax) {
  std::vector<uint8_t> out(scores.size(), 0);
  const size_t n = scores.size() / C;
  for (size_t i = 0; i < n; ++i) {
    const double* row = scores.data() + i * C;
    if (argmax) {
      out[i * C + static_cast<size_t>(std::max_element(row, row + C) - row)] = 1;
    } else {
      for (size_t c = 0; c < C; ++c) out[i * C + c] = row[c] > 0.0;
    }
  }
  return out;
}

namespace {

double sq_dist(const double* a, const double* b, size_t d) {
  double s = 0.0;
  for (size_t k = 0; k < d; ++k) {
    const double t = a[k] - b[k];
    s += t * t;
  }
  return s;
}

// Sum of a multiset that does not depend on the order the terms arrived in.
double ordered_sum(std::vector<double>& terms) {
  std::sort(terms.begin(), terms.end());
  double s = 0.0;
  for (double t : terms) s += t;
  return s;
}

}  // namespace

MmdResult mmd(const std::vector<double>& X, size_t n, const std::vector<double>& Y, size_t m,
              size_t d) {
  if (n == 0 || m == 0) throw std::invalid_argument("mmd: both sample sets must be nonempty");
  if (X.size() != n * d || Y.size() != m * d) throw std::invalid_argument("mmd: shape mismatch");
  MmdResult res;
  // Median heuristic over distinct pairs of the pooled sample.
  std::vector<const double*> pooled;
  for (size_t i = 0; i < n; ++i) pooled.push_back(X.data() + i * d);
  for (size_t j = 0; j < m; ++j) pooled.push_back(Y.data() + j * d);
  std::vector<double> dists;
  dists.reserve(pooled.size() * (pooled.size() - 1) / 2);
  for (size_t i = 0; i < pooled.size(); ++i)
    for (size_t j = i + 1; j < pooled.size(); ++j) dists.push_back(std::sqrt(sq_dist(pooled[i], pooled[j], d)));
  double h = 0.0;
  if (!dists.empty()) {
    std::sort(dists.begin(), dists.end());
    const size_t k = dists.size();
    h = k % 2 ? dists[k / 2] : 0.5 * (dists[k / 2 - 1] + dists[k / 2]);
  }
  if (!(h > 0.0)) {
    h = 1.0;
    res.warning = "median pairwise distance is zero; using bandwidth 1.0";
  }
  res.bandwidth = h;
  const double inv = 1.0 / (2.0 * h * h);
  auto block = [&](const std::vector<double>& A, size_t na, const std::vector<double>& B,
                   size_t nb) {
    std::vector<double> terms;
    terms.reserve(na * nb);
    for (size_t i = 0; i < na; ++i)
      for (size_t j = 0; j < nb; ++j)
        terms.push_back(std::exp(-sq_dist(A.data() + i * d, B.data() + j * d, d) * inv));
    return ordered_sum(terms) / static_cast<double>(na * nb);
  };
  const double kxx = block(X, n, X, n);
  const double kyy = block(Y, m, Y, m);
  const double kxy = block(X, n, Y, m);
  // kxx + kyy is commutative in floating point, so swapping X and Y is exact.
  const double lo = std::min(kxx, kyy), hi = std::max(kxx, kyy);
  res.value = std::max(0.0, (lo + hi) - 2.0 * kxy);
  return res;
}

json EvalReport::to_json() const {
  json j;
  j["setting"] = to_string(setting);
  j["class_names"] = class_names;
  json per = json::array();
  for (double v : per_class_auc) per.push_back(std::isfinite(v) ? json(v) : json(nullptr));
  j["per_class_auc"] = per;
  j["macro_auc"] = std::isfinite(macro_auc) ? json(macro_auc) : json(nullptr);
  j["macro_f1"] = macro_f1;
  j["accuracy"] = accuracy;
  j["n_eval"] = n_eval;
  j["warnings"] = warnings;
  return j;
}

EvalReport evaluate(const std::vector<double>& scores, const std::vector<uint8_t>& labels,
                    const TaskSpec& task, Setting setting, bool argmax_predictions) {
  const size_t C = task.class_names.size();
  EvalReport r;
  r.setting = setting;
  r.class_names = task.class_names;
  const AucResult auc = metric_auc(scores, labels, C);
  r.per_class_auc = auc.per_class;
  r.macro_auc = auc.macro;
  r.warnings = auc.warnings;
  const auto pred = predict(scores, C, argmax_predictions);
  r.macro_f1 = macro_f1(pred, labels, C);
  r.accuracy = accuracy(pred, labels, C);
  r.n_eval = static_cast<int64_t>(labels.size() / C);
  return r;
}

// ---------------------------------------------------------------- settings

std::vector<double> cosine_scores(const std::vector<double>& A, size_t n,
                                  const std::vector<double>& B, size_t c, size_t d) {
  auto norms = [d](const std::vector<double>& M, size_t rows) {
    std::vector<double> out(rows);
    for (size_t i = 0; i < rows; ++i) {
      double s = 0.0;
      for (size_t k = 0; k < d; ++k) s += M[i * d + k] * M[i * d + k];
      out[i] = std::sqrt(s);
    }
    return out;
  };
  const auto na = norms(A, n), nb = norms(B, c);
  std::vector<double> S(n * c, 0.0);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < c; ++j) {
      double dot = 0.0;
      for (size_t k = 0; k < d; ++k) dot += A[i * d + k] * B[j * d + k];
      const double den = na[i] * nb[j];
      S[i * c + j] = den > 0.0 ? dot / den : 0.0;
    }
  return S;
}

std::vector<double> signal_features(const EsiModel<float>& model,
                                    const std::vector<const ECGRecord*>& records) {
  const Tensor<float> e = model.embed_signals(records);
  return std::vector<double>(e.data.begin(), e.data.end());
}

std::vector<double> zero_shot_classify(const std::vector<const ECGRecord*>& records,
                                       const TaskSpec& task, const EsiModel<float>& model) {
  task.validate(true);
  std::vector<std::string> prompts;
  for (size_t c = 0; c < task.class_names.size(); ++c) prompts.push_back(task.prompt(c));
  const Tensor<float> t = model.embed_texts(prompts);
  const std::vector<double> text(t.data.begin(), t.data.end());
  const size_t d = static_cast<size_t>(model.config().signal.embed_dim);
  return cosine_scores(signal_features(model, records), records.size(), text, prompts.size(), d);
}

std::vector<double> LinearHead::logits(const std::vector<double>& X, size_t n) const {
  std::vector<double> Z(n * c);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < c; ++j) {
      double z = bias[j];
      for (size_t k = 0; k < d; ++k) z += X[i * d + k] * weight[k * c + j];
      Z[i * c + j] = z;
    }
  return Z;
}

namespace {

// Loss and gradient of the probe objective at (W, b).
double probe_objective(const std::vector<double>& X, size_t n, const std::vector<uint8_t>& Y,
                       TaskKind kind, double l2, const LinearHead& h, std::vector<double>* gW,
                       std::vector<double>* gb) {
  const size_t d = h.d, C = h.c;
  const auto Z = h.logits(X, n);
  std::vector<double> dZ(n * C, 0.0);
  double loss = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double* z = Z.data() + i * C;
    if (kind == TaskKind::single_label) {
      const double mx = *std::max_element(z, z + C);
      double s = 0.0;
      for (size_t j = 0; j < C; ++j) s += std::exp(z[j] - mx);
      const double lse = mx + std::log(s);
      for (size_t j = 0; j < C; ++j) {
        const double p = std::exp(z[j] - lse);
        if (Y[i * C + j]) loss += lse - z[j];
        dZ[i * C + j] = (p - Y[i * C + j]) / static_cast<double>(n);
      }
    } else {
      for (size_t j = 0; j < C; ++j) {
        const double x = z[j];
        loss += std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0) - x * Y[i * C + j];
        dZ[i * C + j] = (1.0 / (1.0 + std::exp(-x)) - Y[i * C + j]) / static_cast<double>(n);
      }
    }
  }
  loss /= static_cast<double>(n);
  double wsq = 0.0;
  for (double w : h.weight) wsq += w * w;
  loss += 0.5 * l2 * wsq;
  if (gW) {
    gW->assign(d * C, 0.0);
    gb->assign(C, 0.0);
    for (size_t i = 0; i < n; ++i)
      for (size_t j = 0; j < C; ++j) {
        const double g = dZ[i * C + j];
        if (g == 0.0) continue;
        (*gb)[j] += g;
        for (size_t k = 0; k < d; ++k) (*gW)[k * C + j] += X[i * d + k] * g;
      }
    for (size_t k = 0; k < d * C; ++k) (*gW)[k] += l2 * h.weight[k];
  }
  return loss;
}

}  // namespace

LinearHead train_linear_head(const std::vector<double>& X, size_t n, size_t d,
                             const std::vector<uint8_t>& Y, size_t c, TaskKind kind,
                             const ProbeConfig& config) {
  if (n == 0 || X.size() != n * d || Y.size() != n * c)
    throw std::invalid_argument("train_linear_head: shape mismatch");
  LinearHead h;
  h.d = d;
  h.c = c;
  h.weight.assign(d * c, 0.0);
  h.bias.assign(c, 0.0);
  std::vector<double> gW, gb;
  double f = probe_objective(X, n, Y, kind, config.l2, h, &gW, &gb);
  double t = 1.0;
  for (int it = 0; it < config.max_iterations; ++it) {
    double gsq = 0.0;
    for (double g : gW) gsq += g * g;
    for (double g : gb) gsq += g * g;
    if (gsq == 0.0) {
      h.converged = true;
      break;
    }
    LinearHead trial = h;
    double f_new = f;
    for (int back = 0; back < 60; ++back) {
      for (size_t k = 0; k < gW.size(); ++k) trial.weight[k] = h.weight[k] - t * gW[k];
      for (size_t k = 0; k < gb.size(); ++k) trial.bias[k] = h.bias[k] - t * gb[k];
      f_new = probe_objective(X, n, Y, kind, config.l2, trial, nullptr, nullptr);
      if (f_new <= f - 0.5 * t * gsq) break;
      t *= 0.5;
    }
    const double change = f - f_new;
    h = std::move(trial);
    h.iterations = it + 1;
    f = probe_objective(X, n, Y, kind, config.l2, h, &gW, &gb);
    t *= 2.0;
    if (std::abs(change) < config.tolerance) {
      h.converged = true;
      break;
    }
  }
  h.final_loss = f;
  return h;
}

ProbeResult linear_probe(const std::vector<const ECGRecord*>& train,
                         const std::vector<const ECGRecord*>& test, const TaskSpec& task,
                         const EsiModel<float>& model, const ProbeConfig& config) {
  task.validate(false);
  if (train.empty() || test.empty()) throw ValidationError("linear_probe: empty split");
  const size_t C = task.class_names.size();
  const size_t d = static_cast<size_t>(model.config().signal.embed_dim);
  ProbeResult res;
  res.encoder_hash_before = parameter_hash(model.params(), "signal.");
  const auto Ytr = targets_from_records(train, task);
  const auto Yte = targets_from_records(test, task);
  const auto Xtr = signal_features(model, train);
  const auto Xte = signal_features(model, test);
  res.head = train_linear_head(Xtr, train.size(), d, Ytr, C, task.kind, config);
  res.report = evaluate(res.head.logits(Xte, test.size()), Yte, task, Setting::linear_probe,
                        task.kind == TaskKind::single_label);
  // Classes never seen in training are reported but left out of the macro AUC.
  double sum = 0.0;
  size_t valid = 0;
  for (size_t c = 0; c < C; ++c) {
    bool seen = false;
    for (size_t i = 0; i < train.size() && !seen; ++i) seen = Ytr[i * C + c];
    if (!seen) {
      res.report.warnings.push_back("class " + task.class_names[c] +
                                    " absent from training labels; excluded from macro averages");
      res.report.per_class_auc[c] = std::numeric_limits<double>::quiet_NaN();
    }
    if (std::isfinite(res.report.per_class_auc[c])) {
      sum += res.report.per_class_auc[c];
      ++valid;
    }
  }
  res.report.macro_auc = valid ? sum / static_cast<double>(valid)
                               : std::numeric_limits<double>::quiet_NaN();
  if (!res.head.converged)
    res.report.warnings.push_back("probe stopped at the iteration limit before converging");
  res.encoder_hash_after = parameter_hash(model.params(), "signal.");
  return res;
}

FineTuneResult fine_tune(const std::vector<const ECGRecord*>& train,
                         const std::vector<const ECGRecord*>& test, const TaskSpec& task,
                         const Checkpoint& checkpoint, const FineTuneConfig& config) {
  task.validate(false);
  if (train.empty() || test.empty()) throw ValidationError("fine_tune: empty split");
  if (config.epochs < 1 || config.batch_size < 1 || !(config.lr > 0.0))
    throw std::invalid_argument("fine_tune: epochs, batch_size and lr must be positive");
  auto model = model_from_checkpoint(checkpoint);
  const size_t C = task.class_names.size();
  const size_t d = static_cast<size_t>(model->config().signal.embed_dim);
  const auto Ytr = targets_from_records(train, task);
  const auto Yte = targets_from_records(test, task);

  const LinearHead init =
      train_linear_head(signal_features(*model, train), train.size(), d, Ytr, C, task.kind,
                        config.probe);
  ParamStore<float> head;
  Tensor<float> w0({static_cast<int64_t>(d), static_cast<int64_t>(C)});
  Tensor<float> b0({static_cast<int64_t>(C)});
  for (size_t k = 0; k < d * C; ++k) w0[k] = static_cast<float>(init.weight[k]);
  for (size_t k = 0; k < C; ++k) b0[k] = static_cast<float>(init.bias[k]);
  Var<float> W = head.add("head.weight", std::move(w0), true);
  Var<float> b = head.add("head.bias", std::move(b0), false);

  model->params().set_trainable("", false);
  model->params().set_trainable("signal.", true);
  AdamW<float> enc_opt(0.9, 0.999, 1e-8, config.weight_decay);
  AdamW<float> head_opt(0.9, 0.999, 1e-8, config.weight_decay);

  FineTuneResult res;
  std::vector<size_t> batch;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    BatchIterator it(train.size(), static_cast<size_t>(config.batch_size), true,
                     synth::mix_seed(config.seed, static_cast<uint64_t>(epoch)), false);
    double sum = 0.0;
    int steps = 0;
    while (it.next(batch)) {
      std::vector<const ECGRecord*> recs;
      std::vector<int> idx;
      std::vector<uint8_t> bin;
      for (size_t i : batch) {
        recs.push_back(train[i]);
        const uint8_t* row = Ytr.data() + i * C;
        bin.insert(bin.end(), row, row + C);
        idx.push_back(static_cast<int>(std::max_element(row, row + C) - row));
      }
      const auto enc = model->signal().encode(stack_signals<float>(recs));
      const Var<float> logits = ops::linear(enc.pooled, W, b);
      const Var<float> loss = task.kind == TaskKind::single_label
                                  ? softmax_cross_entropy(logits, idx)
                                  : binary_cross_entropy(logits, bin);
      model->params().zero_grad();
      head.zero_grad();
      backward(loss);
      enc_opt.step(model->params(), config.lr, config.grad_clip);
      head_opt.step(head, config.head_lr, config.grad_clip);
      sum += loss.item();
      ++steps;
    }
    res.epoch_losses.push_back(sum / std::max(steps, 1));
  }
  LinearHead final_head;
  final_head.d = d;
  final_head.c = C;
  final_head.weight.assign(W.value().data.begin(), W.value().data.end());
  final_head.bias.assign(b.value().data.begin(), b.value().data.end());
  res.report = evaluate(final_head.logits(signal_features(*model, test), test.size()), Yte, task,
                        Setting::fine_tune, task.kind == TaskKind::single_label);
  return res;
}

EvalReport one_shot_identification(const std::vector<const ECGRecord*>& enrollment,
                                   const std::vector<const ECGRecord*>& queries,
                                   const std::vector<std::string>& subject_of_enrollment,
                                   const std::vector<std::string>& subject_of_query,
                                   const EsiModel<float>& model, const ProbeConfig& config) {
  if (enrollment.size() != subject_of_enrollment.size() ||
      queries.size() != subject_of_query.size())
    throw std::invalid_argument("identification: subject list size mismatch");
  TaskSpec task;
  task.kind = TaskKind::single_label;
  task.class_names = subject_of_enrollment;
  std::sort(task.class_names.begin(), task.class_names.end());
  if (std::adjacent_find(task.class_names.begin(), task.class_names.end()) != task.class_names.end())
    throw ValidationError("identification: more than one enrollment segment for a subject");
  task.validate(false);
  const size_t C = task.class_names.size();
  auto onehot = [&](const std::vector<std::string>& subjects) {
    std::vector<uint8_t> Y(subjects.size() * C, 0);
    for (size_t i = 0; i < subjects.size(); ++i) {
      auto it = std::lower_bound(task.class_names.begin(), task.class_names.end(), subjects[i]);
      if (it == task.class_names.end() || *it != subjects[i])
        throw ValidationError("identification: query subject " + subjects[i] + " not enrolled");
      Y[i * C + static_cast<size_t>(it - task.class_names.begin())] = 1;
    }
    return Y;
  };
  const size_t d = static_cast<size_t>(model.config().signal.embed_dim);
  const auto head = train_linear_head(signal_features(model, enrollment), enrollment.size(), d,
                                      onehot(subject_of_enrollment), C, TaskKind::single_label,
                                      config);
  return evaluate(head.logits(signal_features(model, queries), queries.size()),
                  onehot(subject_of_query), task, Setting::linear_probe, true);
}

// ---------------------------------------------------------------- benchmark

std::vector<ECGTextPair> Benchmark::pairs(size_t limit) const {
  std::vector<ECGRecord> subset(pretrain_records.begin(),
                                pretrain_records.begin() +
                                    static_cast<std::ptrdiff_t>(std::min(limit, pretrain_records.size())));
  std::vector<std::pair<std::string, std::string>> rows(
      descriptions.begin(), descriptions.begin() + static_cast<std::ptrdiff_t>(subset.size()));
  return join_pairs(subset, rows, SourceTag::cqa_generated);
}

std::vector<const ECGRecord*> Benchmark::pointers(const std::vector<ECGRecord>& records) {
  std::vector<const ECGRecord*> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(&r);
  return out;
}

TaskSpec task_from_codes(const std::vector<std::string>& codes, TaskKind kind) {
  cqa::HashNgramEmbedder embedder;
  const auto kb = cqa::KnowledgeBase::build(cqa::seeded_knowledge_documents(), embedder);
  const cqa::MockGenerationClient client;
  TaskSpec task;
  task.kind = kind;
  for (const auto& code : codes) {
    cqa::QueryContext ctx;
    ctx.labels = {code};
    task.class_names.push_back(code);
    task.class_descriptions.push_back(cqa::generate_description(ctx, kb, embedder, client).text);
  }
  return task;
}

TaskSpec benchmark_task(int n_classes) {
  const auto& all = synth::class_codes();
  if (n_classes < 2 || static_cast<size_t>(n_classes) > all.size())
    throw ValidationError("benchmark supports 2.." + std::to_string(all.size()) + " classes");
  return task_from_codes({all.begin(), all.begin() + n_classes}, TaskKind::single_label);
}

Benchmark build_benchmark(const BenchmarkConfig& config) {
  config.spec.validate();
  Benchmark b;
  synth::BenchmarkSpec shifted = config.spec;
  shifted.shift = config.test_shift;
  b.pretrain_records = synth::make_records(config.n_pretrain, config.spec,
                                           synth::mix_seed(config.seed, 1), "pre");
  b.train_records = synth::make_records(config.n_train, shifted, synth::mix_seed(config.seed, 2), "trn");
  b.test_records = synth::make_records(config.n_test, shifted, synth::mix_seed(config.seed, 3), "tst");
  cqa::HashNgramEmbedder embedder;
  const auto kb = cqa::KnowledgeBase::build(cqa::seeded_knowledge_documents(), embedder);
  const cqa::MockGenerationClient client;
  b.descriptions = cqa::describe_records(b.pretrain_records, kb, embedder, client, config.retrieval_k);
  b.task = benchmark_task(config.spec.n_classes);
  return b;
}

// ---------------------------------------------------------------- ablations

std::string to_string(AblationKind kind) {
  switch (kind) {
    case AblationKind::misalignment: return "misalignment";
    case AblationKind::datasize: return "datasize";
    default: return "component";
  }
}

AblationKind parse_ablation_kind(const std::string& text) {
  if (text == "misalignment") return AblationKind::misalignment;
  if (text == "datasize") return AblationKind::datasize;
  if (text == "component") return AblationKind::component;
  throw std::invalid_argument("unknown ablation kind '" + text + "'");
}

std::string AblationTable::to_tsv() const {
  std::ostringstream os;
  os.precision(10);
  os << "# kind\t" << to_string(kind) << "\n";
  os << "point\tvalue\tprobe_auc\tmmd\tfinal_loss\tseconds\tstatus\n";
  auto row = [&](const AblationRow& r) {
    os << r.point << '\t' << r.value << '\t' << r.probe_auc << '\t' << r.mmd << '\t'
       << r.final_loss << '\t' << r.seconds << '\t' << r.status << '\n';
  };
  for (const auto& r : rows) row(r);
  if (random_baseline) row(*random_baseline);
  return os.str();
}

AblationTable AblationTable::from_tsv(const std::string& text) {
  AblationTable t;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line.rfind("# kind\t", 0) == 0) {
      t.kind = parse_ablation_kind(line.substr(7));
      continue;
    }
    if (line.rfind("point\t", 0) == 0) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, '\t')) f.push_back(cell);
    if (f.size() < 7) throw LoadError("ablation table: malformed row: " + line);
    AblationRow r;
    r.point = f[0];
    r.value = std::stod(f[1]);
    r.probe_auc = std::stod(f[2]);
    r.mmd = std::stod(f[3]);
    r.final_loss = std::stod(f[4]);
    r.seconds = std::stod(f[5]);
    r.status = f[6];
    for (size_t k = 7; k < f.size(); ++k) r.status += "\t" + f[k];
    if (r.point == "random-init") t.random_baseline = r;
    else t.rows.push_back(r);
  }
  return t;
}

namespace {

std::string format_value(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace

AblationTable run_ablation(const AblationConfig& config) {
  AblationTable table;
  table.kind = config.kind;
  BenchmarkConfig bench_cfg = config.bench;
  std::vector<double> grid = config.grid;
  if (config.kind == AblationKind::component) grid = {0, 1, 2};
  if (grid.empty()) throw std::invalid_argument("run_ablation: empty grid");
  if (config.kind == AblationKind::datasize) {
    double largest = 0.0;
    for (double g : grid) {
      if (g < 0 || g != std::floor(g)) throw std::invalid_argument("datasize grid must hold counts");
      largest = std::max(largest, g);
    }
    bench_cfg.n_pretrain = std::max(static_cast<int>(largest), 2);
  } else {
    for (double g : grid)
      if (config.kind == AblationKind::misalignment && !(g >= 0.0 && g <= 1.0))
        throw std::invalid_argument("misalignment grid values must lie in [0, 1]");
  }
  const Benchmark bench = build_benchmark(bench_cfg);
  const auto train = Benchmark::pointers(bench.train_records);
  const auto test = Benchmark::pointers(bench.test_records);
  std::vector<std::string> all_texts;
  for (const auto& [id, text] : bench.descriptions) all_texts.push_back(text);
  const Vocabulary vocab = Vocabulary::build(all_texts, config.train.vocab_min_freq);

  // Fixed sample of the pretraining pool for the MMD comparison.
  std::vector<const ECGRecord*> pool_sample;
  for (size_t i = 0; i < bench.pretrain_records.size() && static_cast<int>(i) < config.mmd_samples; ++i)
    pool_sample.push_back(&bench.pretrain_records[i]);
  std::vector<const ECGRecord*> test_sample(
      test.begin(), test.begin() + static_cast<std::ptrdiff_t>(std::min<size_t>(test.size(), config.mmd_samples)));
  auto measure_mmd = [&](const EsiModel<float>& model) {
    const size_t d = static_cast<size_t>(model.config().signal.embed_dim);
    return mmd(signal_features(model, pool_sample), pool_sample.size(),
               signal_features(model, test_sample), test_sample.size(), d)
        .value;
  };

  auto finish = [&](AblationRow& row, const EsiModel<float>& model,
                    std::chrono::steady_clock::time_point t0) {
    row.probe_auc = linear_probe(train, test, bench.task, model).report.macro_auc;
    if (config.kind == AblationKind::datasize) row.mmd = measure_mmd(model);
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  if (config.include_random_baseline) {
    const auto t0 = std::chrono::steady_clock::now();
    AblationRow row;
    row.point = "random-init";
    TrainConfig cfg = config.train;
    EsiModel<float> model(cfg, vocab);
    finish(row, model, t0);
    table.random_baseline = row;
    if (config.on_row) config.on_row(row);
  }

  static const char* kComponents[] = {"full", "w/o L_Cap", "w/o L_Con"};
  for (size_t gi = 0; gi < grid.size(); ++gi) {
    const double g = grid[gi];
    const auto t0 = std::chrono::steady_clock::now();
    AblationRow row;
    row.value = g;
    row.point = config.kind == AblationKind::component ? kComponents[gi] : format_value(g);
    try {
      TrainConfig cfg = config.train;
      std::vector<ECGTextPair> pairs;
      if (config.kind == AblationKind::misalignment) {
        auto mis = inject_misalignment(bench.pairs(), g, synth::mix_seed(cfg.seed, 99));
        pairs = std::move(mis.pairs);
      } else if (config.kind == AblationKind::datasize) {
        pairs = bench.pairs(static_cast<size_t>(g));
        if (!pairs.empty()) {
          const int full = cfg.epochs;
          const double per = static_cast<double>(config.sample_budget) / static_cast<double>(pairs.size());
          cfg.epochs = std::clamp(static_cast<int>(std::ceil(per)), std::min(2, full), full);
          if (cfg.epochs < full) {
            const double scale = static_cast<double>(cfg.epochs) / full;
            cfg.warmup_epochs = std::min(cfg.warmup_epochs, cfg.epochs - 1);
            cfg.lr_decay_every = std::max(1, static_cast<int>(std::floor(cfg.lr_decay_every * scale)));
          }
        }
      } else {
        pairs = bench.pairs();
        if (gi == 1) cfg.loss.lambda_cap = 0.0;
        if (gi == 2) cfg.loss.lambda_con = 0.0;
      }
      if (config.kind == AblationKind::datasize && pairs.empty()) {
        EsiModel<float> model(cfg, vocab);
        finish(row, model, t0);
      } else {
        auto result = pretrain(pairs, cfg);
        row.final_loss = result.checkpoint.history.back().total;
        finish(row, *result.model, t0);
      }
    } catch (const std::exception& e) {
      row.status = std::string("error: ") + e.what();
      std::replace(row.status.begin(), row.status.end(), '\n', ' ');
      std::replace(row.status.begin(), row.status.end(), '\t', ' ');
      row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    table.rows.push_back(row);
    if (config.on_row) config.on_row(row);
  }
  return table;
}

}  // namespace esi::downstream
