#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>
#include <doctest.h>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <random>
#include <sstream>
#include <thread>

#include "esi/cqa.hpp"
#include "esi/text_encoder.hpp"
#include "support.hpp"

using namespace esi;
using namespace esi::cqa;

namespace {

double norm_of(const std::vector<float>& v) {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

std::string random_text(std::mt19937_64& rng, int words) {
  static const std::vector<std::string> vocab = {
      "sinus", "rhythm", "qrs", "wave", "block", "bundle", "branch", "atrial", "ventricular",
      "interval", "segment", "elevation", "depression", "lead", "axis", "inverted", "broad",
      "narrow", "fibrillation", "flutter", "hypertrophy", "infarction", "prolonged", "short"};
  std::uniform_int_distribution<size_t> pick(0, vocab.size() - 1);
  std::uniform_int_distribution<int> punct(0, 7);
  std::string s;
  for (int i = 0; i < words; ++i) {
    s += vocab[pick(rng)];
    s += punct(rng) == 0 ? ". " : " ";
  }
  return s;
}

int count_token(const std::string& text, const std::string& token) {
  int n = 0;
  for (const auto& w : split_words(text))
    if (w == token) ++n;
  return n;
}

struct MockServer {
  httplib::Server server;
  int port = 0;
  std::thread thread;

  MockServer() {}
  void start() {
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port); }
  ~MockServer() {
    server.stop();
    if (thread.joinable()) thread.join();
  }
};

class FailingClient : public GenerationClient {
 public:
  std::string generate(const GenerationRequest&) const override {
    throw std::runtime_error("service unavailable");
  }
};

class EchoClient : public GenerationClient {
 public:
  std::string generate(const GenerationRequest& r) const override { return r.prompt; }
};

}  // namespace

TEST_CASE("chunks respect the size limit and merge back to the source") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::string text = random_text(rng, 20 + trial * 13);
    const size_t size = 40 + trial * 3;
    const size_t overlap = trial % 4 == 0 ? 0 : size / 5;
    const auto chunks = chunk_document(text, size, overlap);
    REQUIRE_FALSE(chunks.empty());
    for (const auto& c : chunks) {
      CHECK(c.text.size() <= size);
      CHECK(text.compare(c.begin, c.text.size(), c.text) == 0);
    }
    for (size_t i = 1; i < chunks.size(); ++i) CHECK(chunks[i].begin > chunks[i - 1].begin);
    CHECK(merge_chunks(chunks) == text);
  }
  CHECK_THROWS_AS(chunk_document("abc", 0, 0), std::invalid_argument);
  CHECK_THROWS_AS(chunk_document("abc", 10, 10), std::invalid_argument);
  CHECK(chunk_document("", 10, 2).empty());
}

TEST_CASE("chunk ends prefer sentence boundaries") {
  const std::string text = "First sentence here. Second one follows and keeps going on";
  const auto chunks = chunk_document(text, 24, 0);
  CHECK(chunks.front().text == "First sentence here. ");
}

TEST_CASE("hash embedder is deterministic and unit norm") {
  const HashNgramEmbedder e(256);
  const auto a = e.embed("Right bundle branch block with broad QRS");
  const auto b = e.embed("Right bundle branch block with broad QRS");
  CHECK(a == b);
  CHECK(a.size() == 256u);
  CHECK(norm_of(a) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(e.embed("right BUNDLE branch block with broad qrs") == a);
  CHECK(e.embed("atrial fibrillation") != a);
  CHECK_THROWS_AS(e.embed(""), std::invalid_argument);
  CHECK_THROWS_AS(e.embed("  \t \n"), std::invalid_argument);
}

TEST_CASE("retrieval matches an exhaustive cosine ranking") {
  std::mt19937_64 rng(5);
  const HashNgramEmbedder e(128);
  KnowledgeBase kb(128, e.name());
  for (int i = 0; i < 200; ++i) {
    auto text = random_text(rng, 12);
    kb.add("doc" + std::to_string(i / 10), text, e.embed(text));
  }
  // A few exact duplicates force ties that must be broken by id.
  for (int i = 0; i < 5; ++i) kb.add("dup", kb.chunks()[i].text, kb.chunks()[i].embedding);

  for (int q = 0; q < 30; ++q) {
    const auto query = e.embed(random_text(rng, 4));
    std::vector<std::pair<double, int64_t>> oracle;
    double qn = 0.0;
    for (float v : query) qn += static_cast<double>(v) * v;
    qn = std::sqrt(qn);
    for (const auto& c : kb.chunks()) {
      double dot = 0.0, cn = 0.0;
      for (size_t j = 0; j < query.size(); ++j) {
        dot += static_cast<double>(c.embedding[j]) * query[j];
        cn += static_cast<double>(c.embedding[j]) * c.embedding[j];
      }
      oracle.emplace_back(dot / (qn * std::sqrt(cn)), c.chunk_id);
    }
    std::sort(oracle.begin(), oracle.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    for (size_t k : {size_t{1}, size_t{5}, size_t{20}}) {
      const auto got = kb.retrieve(query, k);
      REQUIRE(got.size() == k);
      for (size_t i = 0; i < k; ++i) {
        CHECK(got[i].chunk->chunk_id == oracle[i].second);
        CHECK(got[i].similarity == doctest::Approx(oracle[i].first).epsilon(1e-6));
      }
    }
  }
  CHECK(kb.retrieve(e.embed("sinus"), 1000).size() == kb.size());
  CHECK_THROWS_AS(kb.retrieve(std::vector<float>(64, 0.1f), 3), std::invalid_argument);
  CHECK_THROWS_AS(kb.retrieve(std::vector<float>(128, 0.0f), 3), std::invalid_argument);
}

TEST_CASE("knowledge base validation, empty retrieval and file round trip") {
  const HashNgramEmbedder e(64);
  KnowledgeBase empty(64, e.name());
  CHECK_THROWS_AS(empty.retrieve(e.embed("qrs"), 3), EmptyKnowledgeBaseError);

  KnowledgeBase kb(64, e.name());
  CHECK_THROWS_AS(kb.add("s", "text", std::vector<float>(64, 1.0f)), std::invalid_argument);
  CHECK_THROWS_AS(kb.add("s", "text", std::vector<float>(32, 0.0f)), std::invalid_argument);
  CHECK_THROWS_AS(kb.add("s", "", e.embed("x")), std::invalid_argument);

  const auto built = KnowledgeBase::build(seeded_knowledge_documents(), e, 200, 40);
  REQUIRE(built.size() > 10);
  test::TempDir dir;
  const auto path = dir.path() / "kb.bin";
  built.save(path);
  const auto loaded = KnowledgeBase::load(path);
  CHECK(loaded.dim() == built.dim());
  CHECK(loaded.embedder_name() == built.embedder_name());
  REQUIRE(loaded.size() == built.size());
  for (size_t i = 0; i < built.size(); ++i) {
    CHECK(loaded.chunks()[i].chunk_id == built.chunks()[i].chunk_id);
    CHECK(loaded.chunks()[i].source == built.chunks()[i].source);
    CHECK(loaded.chunks()[i].text == built.chunks()[i].text);
    CHECK(loaded.chunks()[i].embedding == built.chunks()[i].embedding);
  }
  CHECK_THROWS(KnowledgeBase::load(dir.path() / "missing.bin"));
}

TEST_CASE("label expansion and demographics sentence") {
  CHECK(expand_label("RBBB") == "right bundle branch block");
  CHECK(expand_label("AFIB") == "atrial fibrillation");
  CHECK(expand_label("XYZ") == "XYZ");

  QueryContext c;
  c.labels = {"RBBB"};
  CHECK(demographics_sentence(c).empty());
  c.age_years = 67;
  CHECK(demographics_sentence(c) == "67-year-old patient.");
  c.sex = Sex::male;
  CHECK(demographics_sentence(c) == "67-year-old male patient.");
  c.age_years.reset();
  c.sex = Sex::female;
  CHECK(demographics_sentence(c) == "Female patient.");
  c.sex = Sex::unknown;
  CHECK(demographics_sentence(c).empty());

  CHECK(first_sentence("One. Two.") == "One.");
  CHECK(first_sentence("v1.5 mm elevation. Next") == "v1.5 mm elevation.");
  CHECK(first_sentence("no terminator") == "no terminator");
}

TEST_CASE("generated descriptions use demographics and retrieved knowledge") {
  const HashNgramEmbedder e;
  const auto kb = KnowledgeBase::build(seeded_knowledge_documents(), e);
  const MockGenerationClient client;

  QueryContext c;
  c.labels = {"RBBB"};
  c.age_years = 67;
  c.sex = Sex::male;
  const auto d = generate_description(c, kb, e, client);
  CHECK(d.text.find("67-year-old male") != std::string::npos);
  CHECK(d.text.find("prolonged QRS duration") != std::string::npos);
  CHECK(d.knowledge_used);
  CHECK_FALSE(d.retrieved_chunk_ids.empty());
  CHECK(d.prompt.find("RBBB (right bundle branch block)") != std::string::npos);

  const auto again = generate_description(c, kb, e, client);
  CHECK(again.text == d.text);
  CHECK(again.retrieved_chunk_ids == d.retrieved_chunk_ids);
  CHECK(again.prompt == d.prompt);

  QueryContext multi;
  multi.labels = {"AFIB", "LVH", "RBBB"};
  const auto m = generate_description(multi, kb, e, client);
  for (const auto& l : multi.labels) CHECK(count_token(m.text, split_words(l).front()) == 1);

  QueryContext report_only;
  report_only.machine_report = "sinus rhythm, left axis deviation";
  const auto r = generate_description(report_only, kb, e, client);
  CHECK(r.text.find("Machine report: sinus rhythm, left axis deviation.") != std::string::npos);

  QueryContext bad;
  CHECK_THROWS_AS(generate_description(bad, kb, e, client), ValidationError);
  bad.labels = {""};
  CHECK_THROWS_AS(generate_description(bad, kb, e, client), ValidationError);
  CHECK_THROWS_AS(generate_description(c, kb, e, client, 0), std::invalid_argument);
}

TEST_CASE("empty knowledge base and failing clients") {
  const HashNgramEmbedder e;
  const KnowledgeBase empty(e.dim(), e.name());
  QueryContext c;
  c.labels = {"LBBB"};
  const auto d = generate_description(c, empty, e, MockGenerationClient{});
  CHECK_FALSE(d.knowledge_used);
  CHECK(d.retrieved_chunk_ids.empty());
  CHECK(d.prompt.find("(none retrieved)") != std::string::npos);
  CHECK(d.text.find("LBBB") != std::string::npos);

  const auto kb = KnowledgeBase::build(seeded_knowledge_documents(), e);
  try {
    generate_description(c, kb, e, FailingClient{});
    FAIL("expected GenerationError");
  } catch (const GenerationError& err) {
    CHECK(std::string(err.what()).find("service unavailable") != std::string::npos);
    CHECK(err.prompt().find("LBBB") != std::string::npos);
  }
  CHECK(generate_description(c, kb, e, EchoClient{}).text ==
        generate_description(c, kb, e, EchoClient{}).prompt);
}

TEST_CASE("describe_records does not depend on record order") {
  const HashNgramEmbedder e;
  const auto kb = KnowledgeBase::build(seeded_knowledge_documents(), e);
  std::mt19937_64 rng(2);
  std::vector<ECGRecord> records;
  const std::vector<std::string> codes = {"NORM", "AFIB", "RBBB", "LBBB", "LVH", "IMI"};
  for (int i = 0; i < 12; ++i) {
    auto r = test::random_record("r" + std::to_string(i), 1, 16, rng);
    r.labels = {codes[i % codes.size()]};
    if (i % 3 == 0) r.labels.push_back(codes[(i + 2) % codes.size()]);
    if (i % 2) r.age_years = 40 + i;
    r.sex = i % 4 == 0 ? Sex::female : Sex::male;
    records.push_back(r);
  }
  const MockGenerationClient client;
  const auto forward = describe_records(records, kb, e, client);
  auto shuffled = records;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const auto backward = describe_records(shuffled, kb, e, client);
  REQUIRE(forward.size() == records.size());
  for (size_t i = 0; i < shuffled.size(); ++i) {
    CHECK(backward[i].first == shuffled[i].record_id);
    const auto it = std::find_if(forward.begin(), forward.end(),
                                 [&](const auto& p) { return p.first == backward[i].first; });
    REQUIRE(it != forward.end());
    CHECK(it->second == backward[i].second);
  }

  records[3].labels.clear();
  CHECK_THROWS_WITH_AS(describe_records(records, kb, e, client),
                       doctest::Contains("r3"), ValidationError);
}

TEST_CASE("HTTP clients speak the embeddings and chat completion protocols") {
  MockServer mock;
  std::atomic<int> embed_calls{0};
  std::string last_auth;
  mock.server.Post("/v1/embeddings", [&](const httplib::Request& req, httplib::Response& res) {
    ++embed_calls;
    last_auth = req.get_header_value("Authorization");
    const auto body = nlohmann::json::parse(req.body);
    if (body.at("input").get<std::string>() == "busy") {
      res.status = 429;
      res.set_content("slow down", "text/plain");
      return;
    }
    if (body.at("input").get<std::string>() == "broken") {
      res.status = 400;
      res.set_content("bad request", "text/plain");
      return;
    }
    nlohmann::json out = {{"data", nlohmann::json::array({{{"embedding", {3.0, 0.0, 4.0, 0.0}}}})}};
    res.set_content(out.dump(), "application/json");
  });
  mock.server.Post("/v1/chat/completions",
                   [&](const httplib::Request& req, httplib::Response& res) {
                     const auto body = nlohmann::json::parse(req.body);
                     const auto prompt = body.at("messages").at(0).at("content").get<std::string>();
                     if (prompt.find("LBBB") != std::string::npos) {
                       res.status = 503;
                       return;
                     }
                     nlohmann::json out = {
                         {"choices",
                          nlohmann::json::array(
                              {{{"message", {{"content", "Generated for " + body.at("model").get<std::string>()}}}}})}};
                     res.set_content(out.dump(), "application/json");
                   });
  mock.start();

  const HttpEmbedder embedder(mock.url(), "secret", "test-model", 4);
  const auto v = embedder.embed("qrs");
  REQUIRE(v.size() == 4u);
  CHECK(v[0] == doctest::Approx(0.6));
  CHECK(v[2] == doctest::Approx(0.8));
  CHECK(last_auth == "Bearer secret");
  CHECK(embedder.name() == "http:test-model");
  CHECK_THROWS_AS(embedder.embed("busy"), RetryableError);
  CHECK_THROWS_AS(embedder.embed("broken"), std::runtime_error);
  CHECK(embed_calls.load() == 3);

  const HttpEmbedder wrong_dim(mock.url(), "", "test-model", 8);
  CHECK_THROWS(wrong_dim.embed("qrs"));

  const HttpGenerationClient client(mock.url(), "", "chat-model");
  const HashNgramEmbedder e;
  const auto kb = KnowledgeBase::build(seeded_knowledge_documents(), e);
  QueryContext c;
  c.labels = {"AFIB"};
  CHECK(generate_description(c, kb, e, client).text == "Generated for chat-model");
  c.labels = {"LBBB"};
  CHECK_THROWS_AS(generate_description(c, kb, e, client), GenerationError);

  const HttpEmbedder unreachable("http://127.0.0.1:1", "", "m", 4);
  CHECK_THROWS_AS(unreachable.embed("qrs"), RetryableError);
}
