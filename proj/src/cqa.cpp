#include "esi/cqa.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "esi/text_encoder.hpp"

namespace esi::cqa {

namespace fs = std::filesystem;

namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }
bool is_terminal(char c) { return c == '.' || c == '!' || c == '?'; }

}  // namespace

std::vector<TextChunk> chunk_document(const std::string& text, size_t chunk_chars,
                                      size_t overlap_chars) {
  if (chunk_chars == 0) throw std::invalid_argument("chunk_document: chunk_chars must be positive");
  if (overlap_chars >= chunk_chars)
    throw std::invalid_argument("chunk_document: overlap_chars must be smaller than chunk_chars");
  std::vector<TextChunk> out;
  const size_t n = text.size();
  size_t start = 0;
  while (start < n) {
    size_t end = std::min(start + chunk_chars, n);
    if (end < n) {
      const size_t lo = std::max(start + 1, end - chunk_chars / 5);
      size_t sentence = 0, space = 0;
      // b is a candidate exclusive end: the window may stop after text[b - 1].
      for (size_t b = end; b >= lo && b > start; --b) {
        if (!is_space(text[b - 1])) continue;
        if (space == 0) space = b;
        if (b >= 2 && is_terminal(text[b - 2])) {
          sentence = b;
          break;
        }
      }
      if (sentence) end = sentence;
      else if (space) end = space;
    }
    out.push_back({text.substr(start, end - start), start});
    if (end >= n) break;
    start = std::max(end - std::min(overlap_chars, end), start + 1);
  }
  return out;
}

std::string merge_chunks(const std::vector<TextChunk>& chunks) {
  std::string out;
  for (const auto& c : chunks) {
    if (c.begin > out.size()) throw std::invalid_argument("merge_chunks: gap between chunks");
    const size_t skip = out.size() - c.begin;
    if (skip < c.text.size()) out += c.text.substr(skip);
  }
  return out;
}

namespace {

uint64_t fnv1a(const std::string& s, uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

std::vector<float> HashNgramEmbedder::embed(const std::string& text) const {
  const auto words = split_words(text);
  if (words.empty()) throw std::invalid_argument("embed_text: text has no tokens");
  std::map<std::string, double> features;
  std::string joined = " ";
  for (const auto& w : words) {
    features["w:" + w] += 1.0;
    joined += w + " ";
  }
  for (size_t i = 0; i + 3 <= joined.size(); ++i) features["c:" + joined.substr(i, 3)] += 0.25;
  std::vector<double> acc(dim_, 0.0);
  for (const auto& [feature, count] : features) {
    const uint64_t h = fnv1a(feature);
    const double sign = (h >> 63) ? -1.0 : 1.0;
    // Sublinear term frequency keeps long chunks from drowning short queries.
    acc[(h >> 1) % static_cast<uint64_t>(dim_)] += sign * std::log1p(count);
  }

  double norm = 0.0;
  for (double v : acc) norm += v * v;
  norm = std::sqrt(norm);
  std::vector<float> out(dim_, 0.0f);
  if (norm == 0.0) {
    // Every feature cancelled out; fall back to a one-hot of the whole text.
    out[fnv1a(joined) % static_cast<uint64_t>(dim_)] = 1.0f;
    return out;
  }
  for (int i = 0; i < dim_; ++i) out[i] = static_cast<float>(acc[i] / norm);
  return out;
}

void KnowledgeBase::add(std::string source, std::string text, std::vector<float> embedding) {
  if (text.empty()) throw std::invalid_argument("KnowledgeBase::add: empty chunk text");
  if (static_cast<int>(embedding.size()) != dim_)
    throw std::invalid_argument("KnowledgeBase::add: embedding dimension " +
                                std::to_string(embedding.size()) + " != " + std::to_string(dim_));
  double sq = 0.0;
  for (float v : embedding) sq += static_cast<double>(v) * v;
  if (std::abs(std::sqrt(sq) - 1.0) > 1e-5)
    throw std::invalid_argument("KnowledgeBase::add: embedding is not unit-norm");
  const auto id = static_cast<int64_t>(chunks_.size());
  chunks_.push_back({id, std::move(source), std::move(text), std::move(embedding)});
}

KnowledgeBase KnowledgeBase::build(const std::vector<Document>& docs, const Embedder& embedder,
                                   size_t chunk_chars, size_t overlap_chars) {
  KnowledgeBase kb(embedder.dim(), embedder.name());
  for (const auto& doc : docs) {
    for (auto& chunk : chunk_document(doc.text, chunk_chars, overlap_chars)) {
      if (split_words(chunk.text).empty()) continue;
      auto e = embedder.embed(chunk.text);
      kb.add(doc.name, std::move(chunk.text), std::move(e));
    }
  }
  return kb;
}

std::vector<ScoredChunk> KnowledgeBase::retrieve(const std::vector<float>& query, size_t k) const {
  if (chunks_.empty()) throw EmptyKnowledgeBaseError("retrieve: knowledge base is empty");
  if (static_cast<int>(query.size()) != dim_)
    throw std::invalid_argument("retrieve: query dimension mismatch");
  double qn = 0.0;
  for (float v : query) qn += static_cast<double>(v) * v;
  qn = std::sqrt(qn);
  if (qn == 0.0) throw std::invalid_argument("retrieve: zero query vector");
  std::vector<ScoredChunk> scored;
  scored.reserve(chunks_.size());
  for (const auto& c : chunks_) {
    double dot = 0.0;
    for (int i = 0; i < dim_; ++i) dot += static_cast<double>(c.embedding[i]) * query[i];
    scored.push_back({&c, dot / qn});
  }
  const size_t take = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take),
                    scored.end(), [](const ScoredChunk& a, const ScoredChunk& b) {
                      if (a.similarity != b.similarity) return a.similarity > b.similarity;
                      return a.chunk->chunk_id < b.chunk->chunk_id;
                    });
  scored.resize(take);
  return scored;
}

std::vector<ScoredChunk> KnowledgeBase::retrieve(const std::string& query, size_t k,
                                                 const Embedder& embedder) const {
  if (embedder.dim() != dim_)
    throw std::invalid_argument("retrieve: embedder dimension differs from the knowledge base");
  return retrieve(embedder.embed(query), k);
}

namespace {

void put_u32(std::ostream& os, uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

void put_u64(std::ostream& os, uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

void put_str(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

uint64_t get_uint(std::istream& is, int bytes) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), bytes)) throw LoadError("knowledge base: truncated file");
  uint64_t v = 0;
  for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

std::string get_str(std::istream& is) {
  const auto len = static_cast<size_t>(get_uint(is, 4));
  std::string s(len, '\0');
  if (!is.read(s.data(), static_cast<std::streamsize>(len)))
    throw LoadError("knowledge base: truncated string");
  return s;
}

constexpr char kKbMagic[8] = {'E', 'S', 'I', 'K', 'B', '0', '0', '1'};

}  // namespace

void KnowledgeBase::save(const fs::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw LoadError("cannot write knowledge base " + path.string());
  os.write(kKbMagic, 8);
  put_str(os, embedder_name_);
  put_u32(os, static_cast<uint32_t>(dim_));
  put_u64(os, chunks_.size());
  for (const auto& c : chunks_) {
    put_str(os, c.source);
    put_str(os, c.text);
    for (float v : c.embedding) put_u32(os, std::bit_cast<uint32_t>(v));
  }
  if (!os) throw LoadError("failed writing knowledge base " + path.string());
}

KnowledgeBase KnowledgeBase::load(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open knowledge base " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kKbMagic))
    throw LoadError(path.string() + " is not a knowledge base file");
  std::string name = get_str(is);
  const int dim = static_cast<int>(get_uint(is, 4));
  const uint64_t count = get_uint(is, 8);
  KnowledgeBase kb(dim, std::move(name));
  for (uint64_t i = 0; i < count; ++i) {
    std::string source = get_str(is);
    std::string text = get_str(is);
    std::vector<float> e(dim);
    for (auto& v : e) v = std::bit_cast<float>(static_cast<uint32_t>(get_uint(is, 4)));
    kb.add(std::move(source), std::move(text), std::move(e));
  }
  return kb;
}

std::vector<Document> load_documents(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw LoadError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto ext = entry.path().extension().string();
    if (entry.is_regular_file() && (ext == ".txt" || ext == ".md")) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Document> docs;
  for (const auto& f : files) {
    std::ifstream is(f);
    std::stringstream ss;
    ss << is.rdbuf();
    docs.push_back({f.filename().string(), ss.str()});
  }
  return docs;
}

std::string expand_label(const std::string& label) {
  static const std::map<std::string, std::string> glossary = {
      {"NORM", "normal sinus rhythm"},
      {"SR", "sinus rhythm"},
      {"SBRAD", "sinus bradycardia"},
      {"STACH", "sinus tachycardia"},
      {"RBBB", "right bundle branch block"},
      {"CRBBB", "complete right bundle branch block"},
      {"LBBB", "left bundle branch block"},
      {"CLBBB", "complete left bundle branch block"},
      {"AFIB", "atrial fibrillation"},
      {"AFLT", "atrial flutter"},
      {"1AVB", "first degree atrioventricular block"},
      {"LVH", "left ventricular hypertrophy"},
      {"IMI", "inferior myocardial infarction"},
      {"AMI", "anterior myocardial infarction"},
      {"PVC", "premature ventricular contraction"},
      {"LAFB", "left anterior fascicular block"},
  };
  auto it = glossary.find(label);
  return it == glossary.end() ? label : it->second;
}

QueryContext QueryContext::from_record(const ECGRecord& record) {
  QueryContext c;
  c.labels = record.labels;
  c.age_years = record.age_years;
  if (record.sex && *record.sex != Sex::unknown) c.sex = record.sex;
  c.machine_report = record.machine_report;
  return c;
}

void QueryContext::validate() const {
  const bool has_label = std::any_of(labels.begin(), labels.end(),
                                     [](const std::string& l) { return !l.empty(); });
  const bool has_report = machine_report && !split_words(*machine_report).empty();
  if (!has_label && !has_report)
    throw ValidationError("query context needs at least one label or a machine report");
  for (const auto& l : labels)
    if (l.empty()) throw ValidationError("query context contains an empty label");
}

std::string demographics_sentence(const QueryContext& context) {
  const bool has_sex = context.sex && *context.sex != Sex::unknown;
  if (!context.age_years && !has_sex) return "";
  std::string s;
  if (context.age_years) s = std::to_string(*context.age_years) + "-year-old ";
  if (has_sex) s += to_string(*context.sex) + " ";
  s += "patient.";
  s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

std::string first_sentence(const std::string& text) {
  for (size_t i = 0; i < text.size(); ++i) {
    if (is_terminal(text[i]) && (i + 1 == text.size() || is_space(text[i + 1])))
      return text.substr(0, i + 1);
  }
  return text;
}

std::string build_prompt(const QueryContext& context,
                         const std::vector<const KnowledgeChunk*>& chunks) {
  std::ostringstream p;
  p << "You are a cardiologist writing the description of a 12-lead ECG recording.\n";
  const auto demo = demographics_sentence(context);
  p << "Patient: " << (demo.empty() ? "demographics not available." : demo) << "\n";
  p << "Diagnostic labels:";
  if (context.labels.empty()) p << " none";
  for (size_t i = 0; i < context.labels.size(); ++i) {
    const auto& l = context.labels[i];
    const auto name = expand_label(l);
    p << (i ? ", " : " ") << l;
    if (name != l) p << " (" << name << ")";
  }
  p << "\nMachine report: " << (context.machine_report ? *context.machine_report : "none") << "\n";
  p << "Reference knowledge:\n";
  if (chunks.empty()) p << "(none retrieved)\n";
  for (size_t i = 0; i < chunks.size(); ++i)
    p << "[" << i + 1 << "] (" << chunks[i]->source << ") " << chunks[i]->text << "\n";
  p << "Start with the patient sentence, then for each label describe the waveform features "
       "expected in each lead (rhythm, intervals, QRS morphology, ST segment and T wave) in "
       "plain clinical prose.";
  return p.str();
}

std::string MockGenerationClient::generate(const GenerationRequest& request) const {
  std::vector<std::string> parts;
  if (!request.demographics.empty()) parts.push_back(request.demographics);
  for (const auto& ev : request.evidence) {
    if (ev.chunks.empty()) parts.push_back(ev.label + ".");
    else parts.push_back(ev.label + ": " + first_sentence(ev.chunks.front()->text));
  }
  if (request.evidence.empty() && request.machine_report) {
    std::string r = *request.machine_report;
    while (!r.empty() && is_space(r.back())) r.pop_back();
    if (!r.empty() && !is_terminal(r.back())) r += ".";
    parts.push_back("Machine report: " + r);
    if (!request.report_chunks.empty())
      parts.push_back(first_sentence(request.report_chunks.front()->text));
  }
  std::string out;
  for (const auto& s : parts) out += (out.empty() ? "" : " ") + s;
  return out;
}

GeneratedDescription generate_description(const QueryContext& context, const KnowledgeBase& kb,
                                          const Embedder& embedder,
                                          const GenerationClient& client, size_t k) {
  context.validate();
  if (k == 0) throw std::invalid_argument("generate_description: k must be positive");
  GenerationRequest req;
  req.demographics = demographics_sentence(context);
  req.machine_report = context.machine_report;

  std::vector<const KnowledgeChunk*> pooled;
  std::set<int64_t> seen;
  auto collect = [&](const std::string& query) {
    std::vector<const KnowledgeChunk*> found;
    if (kb.size() == 0) return found;
    for (const auto& sc : kb.retrieve(query, k, embedder)) {
      found.push_back(sc.chunk);
      if (seen.insert(sc.chunk->chunk_id).second) pooled.push_back(sc.chunk);
    }
    return found;
  };
  for (const auto& label : context.labels) req.evidence.push_back({label, collect(expand_label(label))});
  if (context.machine_report && !split_words(*context.machine_report).empty())
    req.report_chunks = collect(*context.machine_report);

  req.prompt = build_prompt(context, pooled);
  GeneratedDescription out;
  out.prompt = req.prompt;
  for (const auto* c : pooled) out.retrieved_chunk_ids.push_back(c->chunk_id);
  out.knowledge_used = !pooled.empty();
  try {
    out.text = client.generate(req);
  } catch (const GenerationError&) {
    throw;
  } catch (const std::exception& e) {
    throw GenerationError(std::string("generation client failed: ") + e.what(), req.prompt);
  }
  if (split_words(out.text).empty())
    throw GenerationError("generation client returned an empty description", req.prompt);
  return out;
}

std::vector<std::pair<std::string, std::string>> describe_records(
    const std::vector<ECGRecord>& records, const KnowledgeBase& kb, const Embedder& embedder,
    const GenerationClient& client, size_t k) {
  std::vector<std::pair<std::string, std::string>> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    try {
      out.emplace_back(r.record_id,
                       generate_description(QueryContext::from_record(r), kb, embedder, client, k).text);
    } catch (const ValidationError& e) {
      throw ValidationError("record " + r.record_id + ": " + e.what());
    }
  }
  return out;
}

}  // namespace esi::cqa
