#include <doctest.h>

#include <cstring>
#include <fstream>
#include <set>

#include "support.hpp"

using namespace esi;
namespace fs = std::filesystem;

namespace {

std::vector<ECGRecord> sample_records() {
  std::mt19937_64 rng(31);
  std::vector<ECGRecord> out;
  for (int i = 0; i < 3; ++i) {
    auto r = test::random_record("rec-" + std::to_string(i), 3, 50 + i, rng);
    if (i != 1) r.age_years = 40 + i;
    if (i == 0) r.sex = Sex::male;
    if (i == 2) r.sex = Sex::female;
    r.labels = i == 1 ? std::vector<std::string>{} : std::vector<std::string>{"RBBB", "1AVB"};
    if (i == 2) r.machine_report = "sinus rhythm, \"quoted\"\ttab";
    out.push_back(r);
  }
  return out;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream(p) << s;
}

std::vector<ECGTextPair> pairs_of(size_t n) {
  std::mt19937_64 rng(32);
  std::vector<ECGTextPair> out;
  for (size_t i = 0; i < n; ++i) {
    ECGTextPair p;
    p.record = std::make_shared<ECGRecord>(test::random_record("p" + std::to_string(i), 1, 8, rng));
    p.description = "description " + std::to_string(i);
    out.push_back(p);
  }
  return out;
}

}  // namespace

TEST_CASE("manifest round trip is bit-exact") {
  test::TempDir dir;
  const auto records = sample_records();
  save_manifest(records, dir / "m.jsonl");
  const auto loaded = load_manifest(dir / "m.jsonl");
  REQUIRE(loaded.size() == records.size());
  for (size_t i = 0; i < records.size(); ++i) {
    const auto& a = records[i];
    const auto& b = loaded[i];
    CHECK(a.record_id == b.record_id);
    CHECK(a.n_leads == b.n_leads);
    CHECK(a.n_samples == b.n_samples);
    CHECK(a.sampling_rate_hz == b.sampling_rate_hz);
    CHECK(a.age_years == b.age_years);
    CHECK(a.sex == b.sex);
    CHECK(a.labels == b.labels);
    CHECK(a.machine_report == b.machine_report);
    REQUIRE(a.signal.size() == b.signal.size());
    CHECK(std::memcmp(a.signal.data(), b.signal.data(), a.signal.size() * sizeof(float)) == 0);
  }
}

TEST_CASE("signal files are little-endian float32") {
  test::TempDir dir;
  write_signal_file(dir / "s.f32", {1.0f, -2.5f});
  std::ifstream in(dir / "s.f32", std::ios::binary);
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  CHECK(b[0] == 0x00);
  CHECK(b[3] == 0x3f);  // 1.0f = 0x3f800000
  CHECK(b[2] == 0x80);
  CHECK(b[7] == 0xc0);  // -2.5f = 0xc0200000
  CHECK(read_signal_file(dir / "s.f32") == std::vector<float>{1.0f, -2.5f});
}

TEST_CASE("manifest errors name the record") {
  test::TempDir dir;
  save_manifest(sample_records(), dir / "m.jsonl");
  SUBCASE("short signal file is a validation error") {
    const auto path = dir / "signals" / "rec-0.f32";
    auto data = read_signal_file(path);
    data.pop_back();
    write_signal_file(path, data);
    try {
      load_manifest(dir / "m.jsonl");
      FAIL("expected a validation error");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("rec-0") != std::string::npos);
    }
  }
  SUBCASE("missing signal file is a load error") {
    fs::remove(dir / "signals" / "rec-1.f32");
    try {
      load_manifest(dir / "m.jsonl");
      FAIL("expected a load error");
    } catch (const LoadError& e) {
      CHECK(std::string(e.what()).find("rec-1") != std::string::npos);
    }
  }
  SUBCASE("duplicate ids are rejected") {
    std::ifstream in(dir / "m.jsonl");
    std::string first;
    std::getline(in, first);
    std::ofstream(dir / "m.jsonl", std::ios::app) << first << "\n";
    CHECK_THROWS_AS(load_manifest(dir / "m.jsonl"), ValidationError);
  }
  SUBCASE("malformed line") {
    write_text(dir / "bad.jsonl", "{\"record_id\": 5}\n");
    CHECK_THROWS_AS(load_manifest(dir / "bad.jsonl"), ValidationError);
  }
}

TEST_CASE("record validation") {
  std::mt19937_64 rng(33);
  auto r = test::random_record("x", 2, 10, rng);
  CHECK_NOTHROW(r.validate());
  r.signal[3] = NAN;
  CHECK_THROWS_AS(r.validate(), ValidationError);
  r = test::random_record("x", 2, 10, rng);
  r.n_samples = 11;
  CHECK_THROWS_AS(r.validate(), ValidationError);
  CHECK(parse_sex("F") == Sex::female);
  CHECK(parse_sex("m") == Sex::male);
  CHECK_THROWS(parse_sex("q"));
}

TEST_CASE("a 17,000-record manifest loads") {
  test::TempDir dir;
  std::vector<ECGRecord> records;
  std::mt19937_64 rng(34);
  for (int i = 0; i < 17000; ++i) records.push_back(test::random_record("r" + std::to_string(i), 1, 4, rng));
  save_manifest(records, dir / "big.jsonl");
  CHECK(load_manifest(dir / "big.jsonl").size() == 17000);
}

TEST_CASE("descriptions file and pairing") {
  test::TempDir dir;
  const auto records = sample_records();
  const std::vector<std::pair<std::string, std::string>> rows{
      {"rec-2", "third\twith tab"}, {"rec-0", "first"}, {"rec-1", "second\nline"}};
  save_descriptions(rows, dir / "d.tsv");
  const auto loaded = load_descriptions(dir / "d.tsv");
  CHECK(loaded.size() == 3);
  CHECK(loaded[0].second == "third with tab");
  CHECK(loaded[2].second == "second line");
  const auto pairs = join_pairs(records, loaded, SourceTag::manual);
  REQUIRE(pairs.size() == 3);
  CHECK(pairs[0].record->record_id == "rec-0");
  CHECK(pairs[0].description == "first");
  CHECK(pairs[1].source_tag == SourceTag::manual);
  CHECK_THROWS(join_pairs(records, {{"rec-0", "a"}, {"rec-1", "b"}}, SourceTag::manual));
  CHECK_THROWS(join_pairs(records, {{"rec-0", "a"}, {"rec-1", " "}, {"rec-2", "c"}}, SourceTag::manual));
}

TEST_CASE("synthetic generator") {
  SyntheticSpec spec;
  spec.heart_rate_bpm = 72;
  spec.duration_s = 10;
  spec.sampling_rate_hz = 250;
  CHECK(spec.beat_count() == 12);
  const auto a = synthesize_ecg(spec, 5), b = synthesize_ecg(spec, 5);
  CHECK(a.signal == b.signal);
  CHECK(a.n_samples == 2500);
  CHECK(a.n_leads == 12);
  // Noise-free R peaks sit one RR interval apart.
  const float* lead = a.lead(0);
  std::vector<int64_t> peaks;
  for (int64_t t = 1; t + 1 < a.n_samples; ++t)
    if (lead[t] > 0.8f && lead[t] >= lead[t - 1] && lead[t] > lead[t + 1]) peaks.push_back(t);
  REQUIRE(peaks.size() >= 10);
  for (size_t i = 1; i < peaks.size(); ++i)
    CHECK(std::abs(double(peaks[i] - peaks[i - 1]) - 250.0 * 60.0 / 72.0) <= 1.0);
  spec.noise_std = 0.1;
  CHECK(synthesize_ecg(spec, 5).signal != synthesize_ecg(spec, 6).signal);
  spec.heart_rate_bpm = -1;
  CHECK_THROWS(spec.validate());
}

TEST_CASE("segment extraction and decimation") {
  std::mt19937_64 rng(35);
  auto r = test::random_record("x", 2, 100, rng);
  r.sampling_rate_hz = 50;
  const auto seg = extract_segment(r, 1.0, 0.5);
  CHECK(seg.n_samples == 50);
  CHECK(seg.lead(1)[0] == r.lead(1)[25]);
  CHECK_THROWS(extract_segment(r, 2.0, 0.5));
  const auto dec = decimate(r, 5);
  CHECK(dec.n_samples == 20);
  CHECK(dec.sampling_rate_hz == 10);
  double block = 0.0;
  for (int k = 5; k < 10; ++k) block += r.lead(0)[k];
  CHECK(dec.lead(0)[1] == doctest::Approx(block / 5.0));
  CHECK_THROWS(decimate(r, 3));
}

TEST_CASE("misalignment injector") {
  const auto pairs = pairs_of(50);
  SUBCASE("ratio 0 is the identity") {
    const auto res = inject_misalignment(pairs, 0.0, 1);
    CHECK(res.shuffled.empty());
    for (size_t i = 0; i < pairs.size(); ++i) CHECK(res.pairs[i].description == pairs[i].description);
  }
  SUBCASE("chosen pairs all move and the description multiset is kept") {
    for (double ratio : {0.1, 0.5, 0.73, 1.0}) {
      const auto res = inject_misalignment(pairs, ratio, 7);
      CHECK(res.shuffled.size() == static_cast<size_t>(std::floor(ratio * 50 + 1e-9)));
      std::set<size_t> moved(res.shuffled.begin(), res.shuffled.end());
      std::multiset<std::string> before, after;
      for (size_t i = 0; i < pairs.size(); ++i) {
        before.insert(pairs[i].description);
        after.insert(res.pairs[i].description);
        CHECK(res.pairs[i].record == pairs[i].record);
        if (moved.count(i)) CHECK(res.pairs[i].description != pairs[i].description);
        else CHECK(res.pairs[i].description == pairs[i].description);
      }
      CHECK(before == after);
    }
  }
  SUBCASE("a single chosen pair is widened to two with a warning") {
    const auto res = inject_misalignment(pairs, 0.03, 3);
    CHECK(res.shuffled.size() == 2);
    CHECK(res.warning.has_value());
  }
  SUBCASE("deterministic per seed") {
    const auto a = inject_misalignment(pairs, 0.5, 9), b = inject_misalignment(pairs, 0.5, 9);
    CHECK(a.shuffled == b.shuffled);
  }
  CHECK_THROWS(inject_misalignment(pairs, 1.5, 1));
  CHECK_THROWS(inject_misalignment(pairs_of(1), 1.0, 1));
}

TEST_CASE("batch iterator") {
  std::vector<size_t> batch;
  SUBCASE("no shuffle keeps order and keeps the remainder") {
    BatchIterator it(10, 4, false, 0);
    std::vector<size_t> seen;
    int count = 0;
    while (it.next(batch)) {
      seen.insert(seen.end(), batch.begin(), batch.end());
      ++count;
    }
    CHECK(count == 3);
    CHECK(it.num_batches() == 3);
    for (size_t i = 0; i < 10; ++i) CHECK(seen[i] == i);
  }
  SUBCASE("shuffle is a permutation, reproducible per seed, drop_last drops the tail") {
    BatchIterator a(103, 10, true, 42, true), b(103, 10, true, 42, true), c(103, 10, true, 43, true);
    std::vector<size_t> sa, sb, sc;
    while (a.next(batch)) sa.insert(sa.end(), batch.begin(), batch.end());
    while (b.next(batch)) sb.insert(sb.end(), batch.begin(), batch.end());
    while (c.next(batch)) sc.insert(sc.end(), batch.begin(), batch.end());
    CHECK(sa.size() == 100);
    CHECK(sa == sb);
    CHECK(sa != sc);
    CHECK(std::set<size_t>(sa.begin(), sa.end()).size() == 100);
  }
}

TEST_CASE("synthetic benchmark records") {
  synth::BenchmarkSpec spec;
  const auto a = synth::make_records(12, spec, 3), b = synth::make_records(20, spec, 3);
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].signal == b[i].signal);
    CHECK(synth::class_of(a[i]) == static_cast<int>(i % 4));
    CHECK(a[i].n_samples == 500);
    CHECK_NOTHROW(a[i].validate());
  }
  CHECK(synth::make_records(4, spec, 4)[0].signal != a[0].signal);
  spec.shift = 1.0;
  CHECK(synth::make_records(4, spec, 3)[0].signal != a[0].signal);
  spec.n_classes = 7;
  CHECK_THROWS(spec.validate());
}
