#include "cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <functional>
#include <sstream>

#include "esi/downstream.hpp"
#include "run_manifest.hpp"
#include "svg_plot.hpp"

namespace esi::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using namespace esi::downstream;

namespace {

struct Context {
  std::ostream& out;
  std::ostream& err;
  std::vector<std::string> argv;
};

RunManifest start_manifest(const Context& ctx) {
  RunManifest m;
  m.command = ctx.argv;
  m.source_revision = source_revision();
  m.started_at = utc_timestamp();
  return m;
}

void finish_manifest(RunManifest& m, const fs::path& dir) {
  m.finished_at = utc_timestamp();
  m.write(dir);
}

// Commands whose output is a single file keep their record beside it.
void finish_manifest_for_file(RunManifest& m, const fs::path& file) {
  m.finished_at = utc_timestamp();
  fs::path sidecar = file;
  sidecar += ".run.json";
  write_file_atomic(sidecar, m.to_json().dump(2) + "\n");
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::unique_ptr<cqa::Embedder> embedder_for(const std::string& name, int dim) {
  const std::string hash_prefix = "hash-ngram-";
  if (name.rfind(hash_prefix, 0) == 0) return std::make_unique<cqa::HashNgramEmbedder>(dim);
  if (name.rfind("http:", 0) == 0) {
    auto e = cqa::HttpEmbedder::from_env();
    if (e->dim() != dim || e->name() != name)
      throw ValidationError("knowledge base was built with " + name +
                            " but the environment configures " + e->name());
    return e;
  }
  throw ValidationError("unknown embedder '" + name + "'");
}

// ---------------------------------------------------------------- synth-data

struct SynthArgs {
  int classes = 4;
  int n = 512;
  fs::path out;
  uint64_t seed = 7;
  int rate = 100;
  double duration = 5.0;
  double noise = 0.03;
  double shift = 0.0;
  size_t k = 4;
  std::string prefix = "syn";
};

void synth_data(const Context& ctx, const SynthArgs& a) {
  RunManifest m = start_manifest(ctx);
  synth::BenchmarkSpec spec;
  spec.n_classes = a.classes;
  spec.sampling_rate_hz = a.rate;
  spec.duration_s = a.duration;
  spec.noise_std = a.noise;
  spec.shift = a.shift;
  spec.validate();
  if (a.n < 1) throw ValidationError("--n must be positive");
  const auto records = synth::make_records(a.n, spec, a.seed, a.prefix);
  cqa::HashNgramEmbedder embedder;
  const auto kb = cqa::KnowledgeBase::build(cqa::seeded_knowledge_documents(), embedder);
  const cqa::MockGenerationClient client;
  const auto rows = cqa::describe_records(records, kb, embedder, client, a.k);
  fs::create_directories(a.out);
  save_manifest(records, a.out / "manifest.jsonl");
  save_descriptions(rows, a.out / "descriptions.tsv");
  m.config = {{"classes", a.classes}, {"n", a.n},           {"sampling_rate_hz", a.rate},
              {"duration_s", a.duration}, {"noise_std", a.noise}, {"shift", a.shift},
              {"retrieval_k", a.k},   {"prefix", a.prefix}, {"embedder", embedder.name()},
              {"client", "mock"}};
  m.seeds["data"] = a.seed;
  m.outputs = {(a.out / "manifest.jsonl").string(), (a.out / "signals").string(),
               (a.out / "descriptions.tsv").string()};
  finish_manifest(m, a.out);
  ctx.out << "wrote " << records.size() << " records to " << a.out.string() << "\n";
}

// ---------------------------------------------------------------- cqa

struct BuildKbArgs {
  fs::path docs;
  fs::path out;
  std::string embedder = "hash";
  int dim = 1024;
  size_t chunk_chars = 800;
  size_t overlap = 100;
  uint64_t seed = 0;
};

void cqa_build_kb(const Context& ctx, const BuildKbArgs& a) {
  RunManifest m = start_manifest(ctx);
  const auto docs = a.docs.empty() ? cqa::seeded_knowledge_documents() : cqa::load_documents(a.docs);
  if (docs.empty()) throw ValidationError("no documents found in " + a.docs.string());
  std::unique_ptr<cqa::Embedder> embedder;
  if (a.embedder == "hash") embedder = std::make_unique<cqa::HashNgramEmbedder>(a.dim);
  else embedder = cqa::HttpEmbedder::from_env();
  const auto kb = cqa::KnowledgeBase::build(docs, *embedder, a.chunk_chars, a.overlap);
  if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
  kb.save(a.out);
  m.config = {{"docs", a.docs.empty() ? "seeded" : a.docs.string()},
              {"embedder", embedder->name()},
              {"chunk_chars", a.chunk_chars},
              {"overlap_chars", a.overlap}};
  m.seeds["run"] = a.seed;
  m.outputs = {a.out.string()};
  finish_manifest_for_file(m, a.out);
  ctx.out << "knowledge base: " << kb.size() << " chunks from " << docs.size()
          << " documents -> " << a.out.string() << "\n";
}

struct GenerateArgs {
  fs::path kb;
  fs::path manifest;
  fs::path out;
  std::string client = "mock";
  size_t k = 4;
  uint64_t seed = 0;
};

void cqa_generate(const Context& ctx, const GenerateArgs& a) {
  RunManifest m = start_manifest(ctx);
  const auto kb = cqa::KnowledgeBase::load(a.kb);
  const auto embedder = embedder_for(kb.embedder_name(), kb.dim());
  const auto records = load_manifest(a.manifest);
  std::unique_ptr<cqa::GenerationClient> client;
  if (a.client == "mock") client = std::make_unique<cqa::MockGenerationClient>();
  else client = cqa::HttpGenerationClient::from_env();
  const auto rows = cqa::describe_records(records, kb, *embedder, *client, a.k);
  if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
  save_descriptions(rows, a.out);
  m.config = {{"kb", a.kb.string()},       {"manifest", a.manifest.string()},
              {"client", a.client},        {"retrieval_k", a.k},
              {"embedder", embedder->name()}};
  m.seeds["run"] = a.seed;
  m.outputs = {a.out.string()};
  finish_manifest_for_file(m, a.out);
  ctx.out << "wrote " << rows.size() << " descriptions to " << a.out.string() << "\n";
}

// ---------------------------------------------------------------- training config

struct TrainArgs {
  fs::path config;
  std::string variant;
  std::optional<uint64_t> seed;
  std::optional<int> epochs;
  std::optional<int> batch_size;
  std::optional<double> lr;
};

void add_train_options(CLI::App* app, TrainArgs& t) {
  auto* cfg = app->add_option("--config", t.config, "YAML training config")->check(CLI::ExistingFile);
  app->add_option("--variant", t.variant, "preset: micro, esi-tiny, esi")
      ->check(CLI::IsMember({"micro", "esi-tiny", "esi"}))
      ->excludes(cfg);
  app->add_option("--seed", t.seed, "training seed");
  app->add_option("--epochs", t.epochs, "override epochs");
  app->add_option("--batch-size", t.batch_size, "override batch size");
  app->add_option("--lr", t.lr, "override base learning rate");
}

TrainConfig resolve_train_config(const TrainArgs& t) {
  TrainConfig cfg = t.config.empty() ? TrainConfig::preset(t.variant.empty() ? "micro" : t.variant)
                                     : load_train_config(t.config);
  if (t.seed) cfg.seed = *t.seed;
  if (t.epochs) cfg.epochs = *t.epochs;
  if (t.batch_size) cfg.batch_size = *t.batch_size;
  if (t.lr) cfg.base_lr = *t.lr;
  if (cfg.warmup_epochs >= cfg.epochs) cfg.warmup_epochs = std::max(0, cfg.epochs - 1);
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------- pretrain

struct PretrainArgs {
  TrainArgs train;
  fs::path manifest;
  fs::path descriptions;
  fs::path out;
  fs::path resume;
  double misalign = 0.0;
  int stop_after = 0;
  int n = 512;
  uint64_t data_seed = 7;
};

void write_history(const std::vector<EpochStats>& history, const fs::path& path) {
  std::ostringstream os;
  os.precision(10);
  os << "epoch\ttotal\tcontrastive\tcaptioning\tsteps\tlr\tsigma\n";
  for (const auto& h : history)
    os << h.epoch << '\t' << h.total << '\t' << h.contrastive << '\t' << h.captioning << '\t'
       << h.steps << '\t' << h.lr << '\t' << h.sigma << '\n';
  write_file_atomic(path, os.str());
}

void pretrain_cmd(const Context& ctx, const PretrainArgs& a) {
  RunManifest m = start_manifest(ctx);
  const TrainConfig cfg = resolve_train_config(a.train);
  std::vector<ECGTextPair> pairs;
  json data;
  if (!a.manifest.empty()) {
    if (a.descriptions.empty()) throw ValidationError("--manifest needs --descriptions");
    pairs = join_pairs(load_manifest(a.manifest), load_descriptions(a.descriptions),
                       SourceTag::cqa_generated);
    data = {{"manifest", a.manifest.string()}, {"descriptions", a.descriptions.string()}};
  } else {
    BenchmarkConfig bc;
    bc.n_pretrain = a.n;
    bc.n_train = 0;
    bc.n_test = 0;
    bc.seed = a.data_seed;
    pairs = build_benchmark(bc).pairs();
    data = {{"synthetic_pairs", a.n}};
    m.seeds["data"] = a.data_seed;
  }
  if (a.misalign > 0.0) {
    auto mis = inject_misalignment(pairs, a.misalign, synth::mix_seed(cfg.seed, 99));
    if (mis.warning) ctx.err << "warning: " << *mis.warning << "\n";
    pairs = std::move(mis.pairs);
  }
  data["misalignment"] = a.misalign;

  std::optional<Checkpoint> resume;
  PretrainOptions opts;
  if (!a.resume.empty()) {
    resume = Checkpoint::load(a.resume);
    opts.resume = &*resume;
  }
  opts.stop_after_epoch = a.stop_after;
  opts.on_epoch = [&](const EpochStats& s) {
    ctx.out << "epoch " << s.epoch << "  loss " << s.total << "  con " << s.contrastive
            << "  cap " << s.captioning << "  lr " << s.lr << "  sigma " << s.sigma << std::endl;
  };
  fs::create_directories(a.out);
  auto result = pretrain(pairs, cfg, opts);
  result.checkpoint.save(a.out / "checkpoint.ckpt");
  write_history(result.checkpoint.history, a.out / "history.tsv");
  m.config = {{"train", cfg.to_json()}, {"data", data}};
  if (!a.resume.empty()) m.config["resume"] = a.resume.string();
  m.seeds["train"] = cfg.seed;
  m.outputs = {(a.out / "checkpoint.ckpt").string(), (a.out / "history.tsv").string()};
  finish_manifest(m, a.out);
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  Setting setting = Setting::zero_shot;
  fs::path checkpoint;
  fs::path out;
  fs::path train_manifest;
  fs::path test_manifest;
  std::string classes;
  bool multilabel = false;
  uint64_t seed = 0;
  uint64_t data_seed = 7;
  int n_train = 256;
  int n_test = 128;
  double shift = 0.0;
  int epochs = 10;
  double lr = 3e-4;
  double head_lr = 3e-3;
};

void eval_cmd(const Context& ctx, const EvalArgs& a) {
  RunManifest m = start_manifest(ctx);
  const Checkpoint ckpt = Checkpoint::load(a.checkpoint);
  const auto model = model_from_checkpoint(ckpt);
  const TaskKind kind = a.multilabel ? TaskKind::multilabel : TaskKind::single_label;

  std::vector<ECGRecord> train_records, test_records;
  std::vector<std::string> codes = split_list(a.classes);
  json data;
  if (!a.test_manifest.empty()) {
    if (codes.empty()) throw ValidationError("--classes is required with --test-manifest");
    test_records = load_manifest(a.test_manifest);
    if (a.setting != Setting::zero_shot) {
      if (a.train_manifest.empty()) throw ValidationError("--train-manifest is required");
      train_records = load_manifest(a.train_manifest);
    }
    data = {{"train_manifest", a.train_manifest.string()}, {"test_manifest", a.test_manifest.string()}};
  } else {
    BenchmarkConfig bc;
    bc.n_pretrain = 0;
    bc.n_train = a.n_train;
    bc.n_test = a.n_test;
    bc.seed = a.data_seed;
    bc.test_shift = a.shift;
    if (!codes.empty()) bc.spec.n_classes = static_cast<int>(codes.size());
    auto bench = build_benchmark(bc);
    if (codes.empty()) codes = bench.task.class_names;
    train_records = std::move(bench.train_records);
    test_records = std::move(bench.test_records);
    data = {{"synthetic_train", a.n_train}, {"synthetic_test", a.n_test}, {"shift", a.shift}};
    m.seeds["data"] = a.data_seed;
  }
  const TaskSpec task = task_from_codes(codes, kind);
  const auto train = Benchmark::pointers(train_records);
  const auto test = Benchmark::pointers(test_records);

  json report;
  if (a.setting == Setting::zero_shot) {
    const auto scores = zero_shot_classify(test, task, *model);
    report = evaluate(scores, targets_from_records(test, task), task, Setting::zero_shot, true).to_json();
    report["prompts"] = json::array();
    for (size_t c = 0; c < codes.size(); ++c) report["prompts"].push_back(task.prompt(c));
  } else if (a.setting == Setting::linear_probe) {
    const auto res = linear_probe(train, test, task, *model);
    report = res.report.to_json();
    report["probe_iterations"] = res.head.iterations;
    report["probe_final_loss"] = res.head.final_loss;
    report["encoder_hash_before"] = res.encoder_hash_before;
    report["encoder_hash_after"] = res.encoder_hash_after;
  } else {
    FineTuneConfig fc;
    fc.epochs = a.epochs;
    fc.lr = a.lr;
    fc.head_lr = a.head_lr;
    fc.seed = a.seed;
    const auto res = fine_tune(train, test, task, ckpt, fc);
    report = res.report.to_json();
    report["epoch_losses"] = res.epoch_losses;
    data["fine_tune"] = {{"epochs", fc.epochs}, {"lr", fc.lr}, {"head_lr", fc.head_lr}};
  }
  fs::create_directories(a.out);
  write_file_atomic(a.out / "report.json", report.dump(2) + "\n");
  m.config = {{"setting", to_string(a.setting)}, {"checkpoint", a.checkpoint.string()},
              {"classes", codes}, {"task", to_string(kind)}, {"data", data}};
  m.seeds["eval"] = a.seed;
  m.outputs = {(a.out / "report.json").string()};
  finish_manifest(m, a.out);
  ctx.out << to_string(a.setting) << " macro AUC " << report["macro_auc"] << "  F1 "
          << report["macro_f1"] << "  accuracy " << report["accuracy"] << "\n";
}

// ---------------------------------------------------------------- ablate

struct AblateArgs {
  AblationKind kind = AblationKind::misalignment;
  TrainArgs train;
  std::vector<double> grid;
  fs::path out;
  uint64_t data_seed = 7;
  int n_pretrain = 512;
  int n_train = 256;
  int n_test = 128;
  std::optional<double> shift;
  int mmd_samples = 512;
  int64_t sample_budget = 64000;
  bool no_baseline = false;
};

void ablate_cmd(const Context& ctx, const AblateArgs& a) {
  RunManifest m = start_manifest(ctx);
  AblationConfig ac;
  ac.kind = a.kind;
  ac.grid = a.grid;
  if (ac.grid.empty() && a.kind != AblationKind::component) throw ValidationError("--grid is required");
  ac.train = resolve_train_config(a.train);
  ac.bench.n_pretrain = a.n_pretrain;
  ac.bench.n_train = a.n_train;
  ac.bench.n_test = a.n_test;
  ac.bench.seed = a.data_seed;
  ac.bench.test_shift = a.shift.value_or(a.kind == AblationKind::datasize ? 0.3 : 0.0);
  ac.mmd_samples = a.mmd_samples;
  ac.sample_budget = a.sample_budget;
  ac.include_random_baseline = !a.no_baseline;
  ac.on_row = [&](const AblationRow& r) {
    ctx.out << r.point << "  AUC " << r.probe_auc;
    if (r.mmd >= 0) ctx.out << "  MMD " << r.mmd;
    ctx.out << "  (" << r.seconds << " s) " << r.status << std::endl;
  };
  fs::create_directories(a.out);
  const auto table = run_ablation(ac);
  write_file_atomic(a.out / "ablation.tsv", table.to_tsv());
  m.config = {{"kind", to_string(a.kind)},
              {"grid", ac.grid},
              {"train", ac.train.to_json()},
              {"benchmark",
               {{"n_pretrain", a.n_pretrain}, {"n_train", a.n_train}, {"n_test", a.n_test},
                {"test_shift", ac.bench.test_shift}}},
              {"mmd_samples", a.mmd_samples},
              {"sample_budget", a.sample_budget},
              {"random_baseline", ac.include_random_baseline}};
  m.seeds["train"] = ac.train.seed;
  m.seeds["data"] = a.data_seed;
  m.outputs = {(a.out / "ablation.tsv").string()};
  for (const auto& r : table.rows)
    if (r.status != "ok") m.status = "partial";
  finish_manifest(m, a.out);
}

// ---------------------------------------------------------------- plot

struct PlotArgs {
  fs::path table;
  fs::path out;
  uint64_t seed = 0;
};

void plot_cmd(const Context& ctx, const PlotArgs& a) {
  RunManifest m = start_manifest(ctx);
  std::ifstream in(a.table);
  if (!in) throw LoadError("cannot read " + a.table.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const auto table = AblationTable::from_tsv(ss.str());
  if (table.rows.empty()) throw ValidationError("ablation table has no rows");
  write_file_atomic(a.out, render_svg(ablation_series(table)));
  m.config = {{"table", a.table.string()}, {"kind", to_string(table.kind)}};
  m.seeds["run"] = a.seed;
  m.outputs = {a.out.string()};
  finish_manifest_for_file(m, a.out);
  ctx.out << "wrote " << a.out.string() << "\n";
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Context ctx{out, err, std::vector<std::string>(argv, argv + argc)};
  CLI::App app{"ECG-text pretraining and evaluation toolkit", "esi"};
  app.require_subcommand(1);
  std::function<void()> action;

  SynthArgs synth_args;
  auto* synth_cmd = app.add_subcommand("synth-data", "generate a synthetic labelled ECG corpus");
  synth_cmd->add_option("--classes", synth_args.classes, "number of classes (2-4)");
  synth_cmd->add_option("--n", synth_args.n, "number of records");
  synth_cmd->add_option("--out", synth_args.out, "output directory")->required();
  synth_cmd->add_option("--seed", synth_args.seed, "data seed");
  synth_cmd->add_option("--rate", synth_args.rate, "sampling rate in Hz");
  synth_cmd->add_option("--duration", synth_args.duration, "record length in seconds");
  synth_cmd->add_option("--noise", synth_args.noise, "noise standard deviation in mV");
  synth_cmd->add_option("--shift", synth_args.shift, "distribution shift (gain, noise, wander)");
  synth_cmd->add_option("--k", synth_args.k, "chunks retrieved per query");
  synth_cmd->add_option("--prefix", synth_args.prefix, "record id prefix");
  synth_cmd->callback([&] { action = [&] { synth_data(ctx, synth_args); }; });

  auto* cqa_cmd = app.add_subcommand("cqa", "knowledge base and description generation");
  cqa_cmd->require_subcommand(1);
  BuildKbArgs kb_args;
  auto* kb_cmd = cqa_cmd->add_subcommand("build-kb", "embed and store reference documents");
  kb_cmd->add_option("--docs", kb_args.docs, "directory of .txt/.md files (default: bundled texts)")
      ->check(CLI::ExistingDirectory);
  kb_cmd->add_option("--out", kb_args.out, "knowledge base file")->required();
  kb_cmd->add_option("--embedder", kb_args.embedder, "hash or external")
      ->check(CLI::IsMember({"hash", "external"}));
  kb_cmd->add_option("--dim", kb_args.dim, "hash embedder dimension");
  kb_cmd->add_option("--chunk-chars", kb_args.chunk_chars, "chunk length in characters");
  kb_cmd->add_option("--overlap", kb_args.overlap, "chunk overlap in characters");
  kb_cmd->add_option("--seed", kb_args.seed, "recorded in the run manifest");
  kb_cmd->callback([&] { action = [&] { cqa_build_kb(ctx, kb_args); }; });

  GenerateArgs gen_args;
  auto* gen_cmd = cqa_cmd->add_subcommand("generate", "write one description per record");
  gen_cmd->add_option("--kb", gen_args.kb, "knowledge base file")->required()->check(CLI::ExistingFile);
  gen_cmd->add_option("--manifest", gen_args.manifest, "record manifest")->required()->check(CLI::ExistingFile);
  gen_cmd->add_option("--out", gen_args.out, "descriptions file")->required();
  gen_cmd->add_option("--client", gen_args.client, "mock or external")
      ->check(CLI::IsMember({"mock", "external"}));
  gen_cmd->add_option("--k", gen_args.k, "chunks retrieved per query");
  gen_cmd->add_option("--seed", gen_args.seed, "recorded in the run manifest");
  gen_cmd->callback([&] { action = [&] { cqa_generate(ctx, gen_args); }; });

  PretrainArgs pre_args;
  auto* pre_cmd = app.add_subcommand("pretrain", "contrastive + captioning pretraining");
  add_train_options(pre_cmd, pre_args.train);
  pre_cmd->add_option("--manifest", pre_args.manifest, "record manifest (default: synthetic)")
      ->check(CLI::ExistingFile);
  pre_cmd->add_option("--descriptions", pre_args.descriptions, "descriptions file")
      ->check(CLI::ExistingFile);
  pre_cmd->add_option("--out", pre_args.out, "output directory")->required();
  pre_cmd->add_option("--resume", pre_args.resume, "checkpoint to continue from")
      ->check(CLI::ExistingFile);
  pre_cmd->add_option("--misalign", pre_args.misalign, "fraction of shuffled descriptions")
      ->check(CLI::Range(0.0, 1.0));
  pre_cmd->add_option("--stop-after", pre_args.stop_after, "stop after this many epochs");
  pre_cmd->add_option("--n", pre_args.n, "synthetic pairs when no manifest is given");
  pre_cmd->add_option("--data-seed", pre_args.data_seed, "synthetic data seed");
  pre_cmd->callback([&] { action = [&] { pretrain_cmd(ctx, pre_args); }; });

  auto* eval_cmd_app = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd_app->require_subcommand(1);
  EvalArgs eval_args;
  const std::pair<const char*, Setting> settings[] = {
      {"zeroshot", Setting::zero_shot}, {"probe", Setting::linear_probe}, {"finetune", Setting::fine_tune}};
  for (const auto& [name, setting] : settings) {
    auto* sub = eval_cmd_app->add_subcommand(name, to_string(setting) + " evaluation");
    sub->add_option("--checkpoint", eval_args.checkpoint, "pretrained checkpoint")
        ->required()->check(CLI::ExistingFile);
    sub->add_option("--out", eval_args.out, "output directory")->required();
    sub->add_option("--test-manifest", eval_args.test_manifest, "test records (default: synthetic)")
        ->check(CLI::ExistingFile);
    if (setting != Setting::zero_shot)
      sub->add_option("--train-manifest", eval_args.train_manifest, "training records")
          ->check(CLI::ExistingFile);
    sub->add_option("--classes", eval_args.classes, "comma-separated condition codes");
    sub->add_flag("--multilabel", eval_args.multilabel, "multilabel task");
    sub->add_option("--seed", eval_args.seed, "fine-tuning seed");
    sub->add_option("--data-seed", eval_args.data_seed, "synthetic data seed");
    sub->add_option("--n-train", eval_args.n_train, "synthetic training records");
    sub->add_option("--n-test", eval_args.n_test, "synthetic test records");
    sub->add_option("--shift", eval_args.shift, "distribution shift of the synthetic splits");
    if (setting == Setting::fine_tune) {
      sub->add_option("--epochs", eval_args.epochs, "fine-tuning epochs");
      sub->add_option("--lr", eval_args.lr, "encoder learning rate");
      sub->add_option("--head-lr", eval_args.head_lr, "head learning rate");
    }
    const Setting s = setting;
    sub->callback([&, s] {
      eval_args.setting = s;
      action = [&] { eval_cmd(ctx, eval_args); };
    });
  }

  auto* ablate_app = app.add_subcommand("ablate", "pretrain-and-probe sweeps");
  ablate_app->require_subcommand(1);
  AblateArgs abl_args;
  for (const auto kind : {AblationKind::misalignment, AblationKind::datasize, AblationKind::component}) {
    auto* sub = ablate_app->add_subcommand(to_string(kind), to_string(kind) + " sweep");
    add_train_options(sub, abl_args.train);
    if (kind != AblationKind::component)
      sub->add_option("--grid", abl_args.grid, "comma-separated grid values")
          ->delimiter(',')->required();
    sub->add_option("--out", abl_args.out, "output directory")->required();
    sub->add_option("--data-seed", abl_args.data_seed, "synthetic data seed");
    sub->add_option("--n-pretrain", abl_args.n_pretrain, "pretraining pairs");
    sub->add_option("--n-train", abl_args.n_train, "probe training records");
    sub->add_option("--n-test", abl_args.n_test, "probe test records");
    sub->add_option("--shift", abl_args.shift, "distribution shift of the probe splits");
    sub->add_option("--mmd-samples", abl_args.mmd_samples, "records per side for MMD");
    sub->add_option("--sample-budget", abl_args.sample_budget, "datasize training sample budget");
    sub->add_flag("--no-baseline", abl_args.no_baseline, "skip the random-init baseline");
    sub->callback([&, kind] {
      abl_args.kind = kind;
      action = [&] { ablate_cmd(ctx, abl_args); };
    });
  }

  PlotArgs plot_args;
  auto* plot_app = app.add_subcommand("plot", "render an ablation table as SVG");
  plot_app->add_option("--table", plot_args.table, "ablation.tsv")->required()->check(CLI::ExistingFile);
  plot_app->add_option("--out", plot_args.out, "SVG file")->required();
  plot_app->add_option("--seed", plot_args.seed, "recorded in the run manifest");
  plot_app->callback([&] { action = [&] { plot_cmd(ctx, plot_args); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return 0;
    }
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }
  try {
    action();
    return 0;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace esi::cli
