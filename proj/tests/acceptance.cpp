// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset, e.g. `acceptance 1 2 7`.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "esi/cqa.hpp"
#include "esi/downstream.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace esi;
using namespace esi::downstream;

namespace {

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    notes.push_back(std::string(ok ? "" : "FAILED ") + what);
  }
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

Var<double> log_sigma_of(double sigma) {
  return Var<double>(Tensor<double>({1}, std::vector<double>{std::log(sigma)}));
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------- 1

Outcome loss_oracles() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<int> nd(1, 16), dd(2, 32);
  std::uniform_real_distribution<double> sd(0.05, 2.0);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int N = nd(rng), d = dd(rng);
    const double sigma = sd(rng);
    const auto S = test::random_unit_rows(N, d, rng), T = test::random_unit_rows(N, d, rng);
    const double got = contrastive_loss(Var<double>(S), Var<double>(T), log_sigma_of(sigma)).item();
    worst = std::max(worst, std::abs(got - oracle::contrastive(S.data, T.data, N, d, sigma)));
  }
  o.require(worst < 1e-6, "contrastive max err " + fmt(worst, 3));

  double cap_worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int B = 1 + trial % 4, L = 2 + trial % 7, V = 3 + trial % 11;
    const auto logits = test::random_tensor<double>({B, L, V}, rng, 3.0);
    TokenizedBatch t;
    t.batch = B;
    t.length = L;
    std::uniform_int_distribution<int> id(0, V - 1), len(1, L);
    for (int b = 0; b < B; ++b) {
      const int n = len(rng);
      for (int i = 0; i < L; ++i) {
        t.ids.push_back(i < n ? id(rng) : Vocabulary::kPad);
        t.valid.push_back(i < n);
      }
    }
    const double got = captioning_loss(Var<double>(logits), t).item();
    cap_worst = std::max(cap_worst, std::abs(got - oracle::captioning(logits.data, B, L, V, t)));
  }
  o.require(cap_worst < 1e-6, "captioning max err " + fmt(cap_worst, 3));

  const auto one = test::random_unit_rows(1, 8, rng);
  const double single = contrastive_loss(Var<double>(one), Var<double>(test::random_unit_rows(1, 8, rng)),
                                         log_sigma_of(0.07)).item();
  o.require(single == 0.0, "N=1 loss " + fmt(single));
  const Tensor<double> I({2, 2}, std::vector<double>{1, 0, 0, 1});
  const double two = contrastive_loss(Var<double>(I), Var<double>(I), log_sigma_of(1.0)).item();
  const double want = 2.0 * std::log1p(std::exp(-1.0));
  o.require(std::abs(two - want) < 1e-9, "N=2 identity err " + fmt(std::abs(two - want), 3));
  const double secs = seconds_since(t0);
  o.require(secs < 10.0, "runtime " + fmt(secs, 3) + " s");
  return o;
}

// ---------------------------------------------------------------- 2

Outcome gradient_checks() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const auto cfg = test::tiny_config();
  const auto corpus = test::tiny_corpus();
  EsiModel<double> model(cfg, Vocabulary::build(corpus, 1));
  for (auto& e : model.params().entries())
    if (e.name.size() > 7 && e.name.compare(e.name.size() - 7, 7, ".weight") == 0)
      for (auto& v : e.var.mutable_value().data) v *= 10.0;
  std::mt19937_64 rng(102);
  const auto signals = test::random_tensor<double>({3, 2, 64}, rng, 0.5);
  const auto tb = model.tokenize({corpus[0], corpus[1], corpus[4]});
  const auto targets = shift_targets(tb);
  auto loss = [&] {
    const auto enc = model.signal().encode(signals);
    const auto l_con = contrastive_loss(enc.pooled, model.text().encode(tb), model.log_sigma());
    const auto l_cap = captioning_loss(model.decoder().caption_logits(enc.tokens, tb), targets);
    return total_loss(l_con, l_cap, LossWeights{1.0, 0.7});
  };
  const auto res = test::check_gradients(test::all_params(model.params()), loss, 6, 11, 1e-3, 1e-6);
  o.require(res.max_rel_error < 1e-4, "max rel err " + fmt(res.max_rel_error, 3) + " over " +
                                          std::to_string(res.checked) + " coords (worst " +
                                          res.worst + ")");
  const double secs = seconds_since(t0);
  o.require(secs < 120.0, "runtime " + fmt(secs, 3) + " s");
  return o;
}

// ---------------------------------------------------------------- 3

Outcome architecture() {
  Outcome o;
  NoGradGuard guard;
  const Vocabulary vocab = Vocabulary::build(test::tiny_corpus(), 1);
  auto dcfg = DecoderConfig::micro();
  dcfg.vocab_size = vocab.size();
  {
    ParamStore<float> ps;
    Initializer init(6);
    CaptionDecoder<float> dec(ps, dcfg, init);
    std::mt19937_64 rng(7);
    Var<float> ctx(test::random_tensor<float>({2, 5, dcfg.cross_width}, rng));
    const auto text = tokenize_batch(
        {"sinus rhythm with normal axis.", "right bundle branch block, wide qrs."}, vocab, 12);
    const auto base = dec.caption_logits(ctx, text).value();
    const int64_t L = text.length, V = base.dim(2);
    double worst = 0.0;
    for (int64_t cut = 1; cut < L; ++cut) {
      auto changed = text;
      for (int64_t b = 0; b < text.batch; ++b)
        for (int64_t i = cut; i < L; ++i)
          changed.ids[b * L + i] = (changed.ids[b * L + i] + 7) % vocab.size();
      const auto out = dec.caption_logits(ctx, changed).value();
      for (int64_t b = 0; b < text.batch; ++b)
        for (int64_t i = 0; i < cut; ++i)
          for (int64_t v = 0; v < V; ++v)
            worst = std::max(worst, double(std::abs(out[(b * L + i) * V + v] - base[(b * L + i) * V + v])));
    }
    o.require(worst < 1e-6, "decoder causality max change " + fmt(worst, 3));
  }
  {
    ParamStore<float> ps;
    Initializer init(3);
    SignalEncoder<float> enc(ps, ConvNeXt1DConfig::micro(), init);
    std::mt19937_64 rng(4);
    const auto x = test::random_tensor<float>({4, 12, 200}, rng, 0.5);
    const auto all = enc.encode(x).pooled.value();
    const int64_t d = all.dim(1), per = x.numel() / 4;
    double batch_diff = 0.0, norm_err = 0.0;
    for (int64_t b = 0; b < 4; ++b) {
      Tensor<float> one({1, 12, 200});
      std::copy(x.data.begin() + b * per, x.data.begin() + (b + 1) * per, one.data.begin());
      const auto single = enc.encode(one).pooled.value();
      double sq = 0.0;
      for (int64_t k = 0; k < d; ++k) {
        batch_diff = std::max(batch_diff, double(std::abs(single[k] - all[b * d + k])));
        sq += double(all[b * d + k]) * all[b * d + k];
      }
      norm_err = std::max(norm_err, std::abs(std::sqrt(sq) - 1.0));
    }
    o.require(batch_diff < 1e-5, "batch independence max diff " + fmt(batch_diff, 3));
    o.require(norm_err < 1e-5, "pooled unit-norm max err " + fmt(norm_err, 3));
  }
  const auto tiny = ConvNeXt1DConfig::tiny();
  const int64_t tokens = tiny.token_length(5000);
  bool chain_ok = tokens == 156;
  for (int64_t n = 32; n <= 6000; n += 37) {
    int64_t t = (n - tiny.stem_kernel) / tiny.stem_stride + 1;
    for (int s = 0; s < 3; ++s) t = (t - 2) / 2 + 1;
    chain_ok = chain_ok && tiny.token_length(n) == t;
  }
  o.require(chain_ok, "token length 12x5000 -> " + std::to_string(tokens));
  return o;
}

// ---------------------------------------------------------------- 4

Outcome end_to_end() {
  Outcome o;
  auto t0 = std::chrono::steady_clock::now();
  BenchmarkConfig bc;
  const auto bench = build_benchmark(bc);
  const auto cfg = TrainConfig::preset("micro");
  const auto trained = pretrain(bench.pairs(), cfg);
  const double pretrain_s = seconds_since(t0);
  const auto train = Benchmark::pointers(bench.train_records);
  const auto test = Benchmark::pointers(bench.test_records);

  const auto zs_scores = zero_shot_classify(test, bench.task, *trained.model);
  const auto zs = evaluate(zs_scores, targets_from_records(test, bench.task), bench.task,
                           Setting::zero_shot, true);
  const auto probe = linear_probe(train, test, bench.task, *trained.model);
  FineTuneConfig fc;
  fc.epochs = 3;
  const auto ft = fine_tune(train, test, bench.task, trained.checkpoint, fc);

  o.require(zs.macro_auc >= 0.85, "zero-shot AUC " + fmt(zs.macro_auc) + " on " +
                                      std::to_string(test.size()) + " records");
  o.require(probe.report.macro_auc >= zs.macro_auc - 0.02,
            "probe AUC " + fmt(probe.report.macro_auc));
  o.require(ft.report.macro_auc >= probe.report.macro_auc - 0.02,
            "fine-tune AUC " + fmt(ft.report.macro_auc));
  o.require(pretrain_s < 600.0, "pretraining " + fmt(pretrain_s, 3) + " s on " +
                                    std::to_string(bench.pretrain_records.size()) + " pairs");
  return o;
}

// ---------------------------------------------------------------- 5

std::string row_summary(const AblationRow& r) {
  std::string s = r.point + ":" + fmt(r.probe_auc, 3);
  if (r.mmd >= 0) s += "/" + fmt(r.mmd, 3);
  return s;
}

Outcome ablations() {
  Outcome o;
  auto base = [] {
    AblationConfig ac;
    ac.train = TrainConfig::preset("micro");
    return ac;
  };
  double slowest = 0.0;
  auto note_times = [&](const AblationTable& t) {
    for (const auto& r : t.rows) slowest = std::max(slowest, r.seconds);
  };
  auto all_ok = [](const AblationTable& t) {
    for (const auto& r : t.rows)
      if (r.status != "ok") return false;
    return true;
  };

  {
    auto ac = base();
    ac.kind = AblationKind::misalignment;
    ac.grid = {0.0, 0.5, 1.0};
    const auto t = run_ablation(ac);
    note_times(t);
    bool ok = all_ok(t) && t.rows.size() == 3 && t.random_baseline;
    for (size_t i = 1; ok && i < t.rows.size(); ++i) ok = t.rows[i].probe_auc < t.rows[i - 1].probe_auc;
    std::string s;
    for (const auto& r : t.rows) s += row_summary(r) + " ";
    o.require(ok, "(a) misalignment strictly decreasing " + s);
    if (t.random_baseline && !t.rows.empty())
      o.require(t.rows.back().probe_auc <= t.random_baseline->probe_auc + 0.05,
                "(a) ratio 1.0 vs random-init " + fmt(t.random_baseline->probe_auc, 3));
  }
  {
    auto ac = base();
    ac.kind = AblationKind::datasize;
    ac.grid = {0, 1000, 4000, 16000};
    ac.bench.test_shift = 0.3;
    ac.include_random_baseline = false;
    const auto t = run_ablation(ac);
    note_times(t);
    bool auc_ok = all_ok(t) && t.rows.size() == 4, mmd_ok = auc_ok;
    for (size_t i = 1; auc_ok && i < t.rows.size(); ++i) {
      auc_ok = t.rows[i].probe_auc >= t.rows[i - 1].probe_auc - 0.02;
      mmd_ok = mmd_ok && t.rows[i].mmd <= t.rows[i - 1].mmd;
    }
    std::string s;
    for (const auto& r : t.rows) s += row_summary(r) + " ";
    o.require(auc_ok, "(b) datasize AUC non-decreasing " + s);
    o.require(mmd_ok, "(b) datasize MMD non-increasing");
  }
  {
    auto ac = base();
    ac.kind = AblationKind::component;
    ac.include_random_baseline = false;
    const auto t = run_ablation(ac);
    note_times(t);
    const AblationRow* full = nullptr;
    const AblationRow* no_cap = nullptr;
    const AblationRow* no_con = nullptr;
    for (const auto& r : t.rows) {
      if (r.point == "full") full = &r;
      else if (r.point.find("Cap") != std::string::npos) no_cap = &r;
      else if (r.point.find("Con") != std::string::npos) no_con = &r;
    }
    const bool ok = all_ok(t) && full && no_cap && no_con && no_con->probe_auc < no_cap->probe_auc;
    std::string s;
    for (const auto& r : t.rows) s += row_summary(r) + " ";
    o.require(ok, "(c) w/o L_Con below w/o L_Cap " + s);
  }
  o.require(slowest < 600.0, "slowest grid point " + fmt(slowest, 3) + " s");
  return o;
}

// ---------------------------------------------------------------- 6

Outcome cqa_pipeline() {
  Outcome o;
  const cqa::HashNgramEmbedder embedder;
  const auto kb = cqa::KnowledgeBase::build(cqa::seeded_knowledge_documents(), embedder);
  cqa::QueryContext ctx;
  ctx.labels = {"RBBB"};
  ctx.age_years = 67;
  ctx.sex = Sex::male;
  const auto desc = cqa::generate_description(ctx, kb, embedder, cqa::MockGenerationClient{});
  o.require(desc.text.find("prolonged QRS duration") != std::string::npos,
            "RBBB description: \"" + desc.text.substr(0, 80) + "...\"");

  std::mt19937_64 rng(106);
  const cqa::HashNgramEmbedder e(128);
  cqa::KnowledgeBase big(128, e.name());
  const std::vector<std::string> words = {"sinus", "rhythm", "qrs", "wave", "block", "bundle",
                                          "branch", "atrial", "interval", "segment", "elevation",
                                          "axis", "broad", "narrow", "flutter", "prolonged"};
  std::uniform_int_distribution<size_t> pick(0, words.size() - 1);
  auto sentence = [&](int n) {
    std::string s;
    for (int i = 0; i < n; ++i) s += words[pick(rng)] + " ";
    return s;
  };
  for (int i = 0; i < 200; ++i) {
    const auto text = sentence(10);
    big.add("doc", text, e.embed(text));
  }
  int mismatches = 0;
  for (int q = 0; q < 50; ++q) {
    const auto query = e.embed(sentence(3));
    std::vector<std::pair<double, int64_t>> ranked;
    double qn = 0.0;
    for (float v : query) qn += double(v) * v;
    for (const auto& c : big.chunks()) {
      double dot = 0.0, cn = 0.0;
      for (size_t j = 0; j < query.size(); ++j) {
        dot += double(c.embedding[j]) * query[j];
        cn += double(c.embedding[j]) * c.embedding[j];
      }
      ranked.emplace_back(dot / std::sqrt(qn * cn), c.chunk_id);
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    const auto got = big.retrieve(query, 10);
    for (size_t i = 0; i < got.size(); ++i)
      if (got[i].chunk->chunk_id != ranked[i].second) ++mismatches;
  }
  o.require(mismatches == 0, "top-10 rank mismatches vs exhaustive cosine on 200 chunks: " +
                                 std::to_string(mismatches));
  return o;
}

// ---------------------------------------------------------------- 7

Outcome mmd_estimator() {
  Outcome o;
  std::mt19937_64 rng(107);
  std::normal_distribution<double> z(0.0, 1.0);
  auto sample = [&](size_t n, size_t d, double shift) {
    std::vector<double> v(n * d);
    for (size_t i = 0; i < v.size(); ++i) v[i] = z(rng) + (i % d == 0 ? shift : 0.0);
    return v;
  };
  auto rows = [](const std::vector<double>& v, size_t n, size_t d) {
    std::vector<std::vector<double>> out(n);
    for (size_t i = 0; i < n; ++i) out[i].assign(v.begin() + i * d, v.begin() + (i + 1) * d);
    return out;
  };
  const size_t n = 20, d = 4;
  double self = 0.0, asym = 0.0, err = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const auto X = sample(n, d, 0.0), Y = sample(n, d, 0.25 * trial);
    self = std::max(self, std::abs(mmd(X, n, X, n, d).value));
    const auto xy = mmd(X, n, Y, n, d), yx = mmd(Y, n, X, n, d);
    asym = std::max(asym, std::abs(xy.value - yx.value));
    const auto xs = rows(X, n, d), ys = rows(Y, n, d);
    const double want = std::max(0.0, oracle::mmd(xs, ys, oracle::median_distance(xs, ys)));
    err = std::max(err, std::abs(xy.value - want));
  }
  o.require(self <= 1e-12, "identical sets " + fmt(self, 3));
  o.require(asym == 0.0, "asymmetry " + fmt(asym, 3));
  o.require(err < 1e-9, "oracle err at n=20 " + fmt(err, 3));
  return o;
}

// ---------------------------------------------------------------- 8

Outcome determinism() {
  Outcome o;
  const auto pairs = test::tiny_pairs(16, 108);
  auto cfg = test::tiny_config();
  cfg.epochs = 4;
  const auto a = pretrain(pairs, cfg);
  const auto b = pretrain(pairs, cfg);
  bool same = a.checkpoint.history.size() == b.checkpoint.history.size();
  for (size_t i = 0; same && i < a.checkpoint.history.size(); ++i)
    same = a.checkpoint.history[i].total == b.checkpoint.history[i].total;
  o.require(same, "fixed-seed loss histories identical");

  test::TempDir dir;
  PretrainOptions stop;
  stop.stop_after_epoch = 2;
  pretrain(pairs, cfg, stop).checkpoint.save(dir / "half.ckpt");
  const auto half = Checkpoint::load(dir / "half.ckpt");
  PretrainOptions resume;
  resume.resume = &half;
  const auto resumed = pretrain(pairs, cfg, resume);
  double loss_diff = 0.0, param_diff = 0.0;
  for (size_t i = 0; i < a.checkpoint.history.size(); ++i)
    loss_diff = std::max(loss_diff, std::abs(resumed.checkpoint.history[i].total -
                                             a.checkpoint.history[i].total));
  const auto& pa = a.model->params().entries();
  const auto& pr = resumed.model->params().entries();
  for (size_t i = 0; i < pa.size(); ++i)
    for (int64_t k = 0; k < pa[i].var.value().numel(); ++k)
      param_diff = std::max(param_diff, double(std::abs(pa[i].var.value()[k] - pr[i].var.value()[k])));
  o.require(loss_diff <= 1e-5 && param_diff <= 1e-5,
            "resume vs uninterrupted: loss " + fmt(loss_diff, 3) + ", params " + fmt(param_diff, 3));

  const std::string bytes = a.checkpoint.serialize();
  a.checkpoint.save(dir / "full.ckpt");
  o.require(Checkpoint::load(dir / "full.ckpt").serialize() == bytes, "checkpoint round trip bit-exact");

  std::mt19937_64 rng(8);
  std::vector<ECGRecord> records;
  for (int i = 0; i < 20; ++i) {
    auto r = test::random_record("m" + std::to_string(i), 3, 50, rng);
    r.labels = {"NORM"};
    if (i % 2) r.age_years = 30 + i;
    if (i % 3) r.sex = i % 2 ? Sex::male : Sex::female;
    if (i % 4 == 0) r.machine_report = "sinus rhythm";
    records.push_back(r);
  }
  save_manifest(records, dir / "m" / "manifest.jsonl");
  const auto back = load_manifest(dir / "m" / "manifest.jsonl");
  bool exact = back.size() == records.size();
  for (size_t i = 0; exact && i < back.size(); ++i) {
    const auto& x = records[i];
    const auto& y = back[i];
    exact = x.record_id == y.record_id && x.n_leads == y.n_leads && x.n_samples == y.n_samples &&
            x.sampling_rate_hz == y.sampling_rate_hz && x.age_years == y.age_years &&
            x.sex == y.sex && x.labels == y.labels && x.machine_report == y.machine_report &&
            std::memcmp(x.signal.data(), y.signal.data(), x.signal.size() * sizeof(float)) == 0;
  }
  o.require(exact, "manifest round trip bit-exact");
  return o;
}

// ---------------------------------------------------------------- 9

Outcome parameter_counts() {
  Outcome o;
  const double tiny = static_cast<double>(count_params(ConvNeXt1DConfig::tiny()));
  const double base = static_cast<double>(count_params(ConvNeXt1DConfig::base()));
  const double dt = tiny / 26.81e6 - 1.0, db = base / 85.56e6 - 1.0;
  o.require(std::abs(dt) <= 0.15, "tiny " + fmt(tiny / 1e6) + " M (" + fmt(100 * dt, 3) + "%)");
  o.require(std::abs(db) <= 0.15, "base " + fmt(base / 1e6) + " M (" + fmt(100 * db, 3) + "%)");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"loss oracles", loss_oracles},
      {"gradient checks", gradient_checks},
      {"architectural invariants", architecture},
      {"end-to-end synthetic benchmark", end_to_end},
      {"ablation trends", ablations},
      {"CQA pipeline", cqa_pipeline},
      {"MMD estimator", mmd_estimator},
      {"determinism and persistence", determinism},
      {"parameter counts", parameter_counts},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) {
    const int k = std::atoi(argv[i]);
    if (k < 1 || k > static_cast<int>(criteria.size())) {
      std::cerr << "usage: acceptance [criterion numbers 1-" << criteria.size() << "]\n";
      return 1;
    }
    selected.insert(k);
  }

  int failed = 0;
  for (size_t i = 0; i < criteria.size(); ++i) {
    const int number = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(number)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = criteria[i].second();
    } catch (const std::exception& e) {
      out.pass = false;
      out.notes.push_back(std::string("exception: ") + e.what());
    }
    if (!out.pass) ++failed;
    std::string notes;
    for (const auto& n : out.notes) notes += (notes.empty() ? "" : "; ") + n;
    std::printf("criterion %d %s: %s  [%.1f s]  %s\n", number, criteria[i].first.c_str(),
                out.pass ? "PASS" : "FAIL", seconds_since(t0), notes.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
