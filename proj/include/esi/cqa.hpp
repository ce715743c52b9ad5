#pragma once

// Cardio Query Assistant: a cosine-similarity knowledge base over chunked
// domain text and a retrieval-augmented description generator.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "esi/data_model.hpp"

namespace esi::cqa {

struct TextChunk {
  std::string text;
  size_t begin = 0;  // offset of text in the source document
};

// Windows of at most chunk_chars characters; consecutive windows overlap by
// overlap_chars. A window end is pulled back to a sentence end (or failing
// that, whitespace) found in the last 20% of the window.
std::vector<TextChunk> chunk_document(const std::string& text, size_t chunk_chars,
                                      size_t overlap_chars);

// Inverse of chunk_document given the chunk offsets.
std::string merge_chunks(const std::vector<TextChunk>& chunks);

// Transport failures of external services; callers may retry.
class RetryableError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EmptyKnowledgeBaseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual int dim() const = 0;
  virtual std::string name() const = 0;
  // Unit-norm vector of length dim().
  virtual std::vector<float> embed(const std::string& text) const = 0;
};

// Signed feature hashing of lowercased words and character trigrams.
class HashNgramEmbedder : public Embedder {
 public:
  explicit HashNgramEmbedder(int dim = 1024) : dim_(dim) {}
  int dim() const override { return dim_; }
  std::string name() const override { return "hash-ngram-" + std::to_string(dim_); }
  std::vector<float> embed(const std::string& text) const override;

 private:
  int dim_;
};

// OpenAI-compatible /v1/embeddings endpoint.
class HttpEmbedder : public Embedder {
 public:
  HttpEmbedder(std::string base_url, std::string api_key, std::string model, int dim);
  // Reads ESI_EMBED_URL, ESI_API_KEY, ESI_EMBED_MODEL and ESI_EMBED_DIM.
  static std::unique_ptr<HttpEmbedder> from_env();
  int dim() const override { return dim_; }
  std::string name() const override { return "http:" + model_; }
  std::vector<float> embed(const std::string& text) const override;

 private:
  std::string base_url_, api_key_, model_;
  int dim_;
};

struct KnowledgeChunk {
  int64_t chunk_id = 0;
  std::string source;
  std::string text;
  std::vector<float> embedding;
};

struct Document {
  std::string name;
  std::string text;
};

struct ScoredChunk {
  const KnowledgeChunk* chunk;
  double similarity;
};

class KnowledgeBase {
 public:
  KnowledgeBase() = default;
  KnowledgeBase(int dim, std::string embedder_name)
      : dim_(dim), embedder_name_(std::move(embedder_name)) {}

  static KnowledgeBase build(const std::vector<Document>& docs, const Embedder& embedder,
                             size_t chunk_chars = 800, size_t overlap_chars = 100);

  // Appends a chunk with id = current size; the embedding must be unit-norm.
  void add(std::string source, std::string text, std::vector<float> embedding);

  // Top min(k, size) chunks by cosine similarity, descending, ties by id.
  std::vector<ScoredChunk> retrieve(const std::vector<float>& query, size_t k) const;
  std::vector<ScoredChunk> retrieve(const std::string& query, size_t k,
                                    const Embedder& embedder) const;

  const std::vector<KnowledgeChunk>& chunks() const { return chunks_; }
  size_t size() const { return chunks_.size(); }
  int dim() const { return dim_; }
  const std::string& embedder_name() const { return embedder_name_; }

  // "ESIKB001", u32 embedder-name length + bytes, u32 d_kb, u64 count, then
  // per chunk: u32 source length + bytes, u32 text length + bytes, d_kb
  // little-endian float32.
  void save(const std::filesystem::path& path) const;
  static KnowledgeBase load(const std::filesystem::path& path);

 private:
  int dim_ = 0;
  std::string embedder_name_;
  std::vector<KnowledgeChunk> chunks_;
};

// Reference texts bundled with the tool; one paragraph per condition.
std::vector<Document> seeded_knowledge_documents();

// Reads every *.txt / *.md file of a directory (sorted by name).
std::vector<Document> load_documents(const std::filesystem::path& dir);

// Expanded name for a condition code ("RBBB" -> "right bundle branch
// block"); unknown labels are returned unchanged.
std::string expand_label(const std::string& label);

struct QueryContext {
  std::vector<std::string> labels;
  std::optional<int> age_years;
  std::optional<Sex> sex;
  std::optional<std::string> machine_report;

  static QueryContext from_record(const ECGRecord& record);
  void validate() const;
};

// "<age>-year-old <sex> patient." with whatever parts are known; empty when
// neither is.
std::string demographics_sentence(const QueryContext& context);

struct LabelEvidence {
  std::string label;
  std::vector<const KnowledgeChunk*> chunks;  // best first
};

struct GenerationRequest {
  std::string prompt;
  std::string demographics;
  std::vector<LabelEvidence> evidence;  // one entry per label, in order
  std::optional<std::string> machine_report;
  std::vector<const KnowledgeChunk*> report_chunks;
};

class GenerationError : public std::runtime_error {
 public:
  GenerationError(const std::string& message, std::string prompt)
      : std::runtime_error(message), prompt_(std::move(prompt)) {}
  const std::string& prompt() const { return prompt_; }

 private:
  std::string prompt_;
};

class GenerationClient {
 public:
  virtual ~GenerationClient() = default;
  virtual std::string generate(const GenerationRequest& request) const = 0;
};

// Template filler: demographics sentence, then "<label>: <first sentence of
// the best chunk>" per label. Without labels it restates the machine report
// and adds the first sentence of the best chunk for it.
class MockGenerationClient : public GenerationClient {
 public:
  std::string generate(const GenerationRequest& request) const override;
};

// OpenAI-compatible /v1/chat/completions endpoint.
class HttpGenerationClient : public GenerationClient {
 public:
  HttpGenerationClient(std::string base_url, std::string api_key, std::string model);
  // Reads ESI_LLM_URL, ESI_API_KEY and ESI_LLM_MODEL.
  static std::unique_ptr<HttpGenerationClient> from_env();
  std::string generate(const GenerationRequest& request) const override;

 private:
  std::string base_url_, api_key_, model_;
};

struct GeneratedDescription {
  std::string text;
  std::vector<int64_t> retrieved_chunk_ids;
  std::string prompt;
  bool knowledge_used = true;  // false when retrieval returned nothing
};

std::string build_prompt(const QueryContext& context,
                         const std::vector<const KnowledgeChunk*>& chunks);

GeneratedDescription generate_description(const QueryContext& context, const KnowledgeBase& kb,
                                          const Embedder& embedder,
                                          const GenerationClient& client, size_t k = 4);

// (record_id, description) for every record, in record order.
std::vector<std::pair<std::string, std::string>> describe_records(
    const std::vector<ECGRecord>& records, const KnowledgeBase& kb, const Embedder& embedder,
    const GenerationClient& client, size_t k = 4);

// First sentence of a text (up to and including the first '.', '!' or '?'
// that is followed by whitespace or the end).
std::string first_sentence(const std::string& text);

}  // namespace esi::cqa
