#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>
#include <json.hpp>

#include <cmath>
#include <cstdlib>

#include "esi/cqa.hpp"

namespace esi::cqa {

namespace {

using nlohmann::json;

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}

// POSTs a JSON body and returns the parsed response. 429 and 5xx responses
// as well as transport failures are reported as RetryableError.
json post_json(const std::string& base_url, const std::string& path, const std::string& api_key,
               const json& body) {
  httplib::Client client(base_url);
  client.set_connection_timeout(10);
  client.set_read_timeout(120);
  httplib::Headers headers;
  if (!api_key.empty()) headers.emplace("Authorization", "Bearer " + api_key);
  auto res = client.Post(path, headers, body.dump(), "application/json");
  if (!res) throw RetryableError("request to " + base_url + path + " failed: " +
                                 httplib::to_string(res.error()));
  if (res->status == 429 || res->status >= 500)
    throw RetryableError("provider returned HTTP " + std::to_string(res->status) + ": " +
                         res->body);
  if (res->status != 200)
    throw std::runtime_error("provider returned HTTP " + std::to_string(res->status) + ": " +
                             res->body);
  try {
    return json::parse(res->body);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("provider response is not JSON: ") + e.what());
  }
}

}  // namespace

HttpEmbedder::HttpEmbedder(std::string base_url, std::string api_key, std::string model, int dim)
    : base_url_(std::move(base_url)), api_key_(std::move(api_key)), model_(std::move(model)),
      dim_(dim) {
  if (dim_ < 1) throw std::invalid_argument("HttpEmbedder: dim must be positive");
}

std::unique_ptr<HttpEmbedder> HttpEmbedder::from_env() {
  return std::make_unique<HttpEmbedder>(env_or("ESI_EMBED_URL", "https://api.openai.com"),
                                        env_or("ESI_API_KEY", ""),
                                        env_or("ESI_EMBED_MODEL", "text-embedding-ada-002"),
                                        std::stoi(env_or("ESI_EMBED_DIM", "1536")));
}

std::vector<float> HttpEmbedder::embed(const std::string& text) const {
  if (text.empty()) throw std::invalid_argument("embed_text: empty text");
  const json res = post_json(base_url_, "/v1/embeddings", api_key_,
                             {{"model", model_}, {"input", text}});
  std::vector<double> v;
  try {
    v = res.at("data").at(0).at("embedding").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("malformed embedding response: ") + e.what());
  }
  if (static_cast<int>(v.size()) != dim_)
    throw std::runtime_error("embedding has dimension " + std::to_string(v.size()) +
                             ", expected " + std::to_string(dim_));
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (!(norm > 0.0)) throw std::runtime_error("provider returned a zero embedding");
  std::vector<float> out(v.size());
  for (size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] / norm);
  return out;
}

HttpGenerationClient::HttpGenerationClient(std::string base_url, std::string api_key,
                                           std::string model)
    : base_url_(std::move(base_url)), api_key_(std::move(api_key)), model_(std::move(model)) {}

std::unique_ptr<HttpGenerationClient> HttpGenerationClient::from_env() {
  return std::make_unique<HttpGenerationClient>(env_or("ESI_LLM_URL", "https://api.openai.com"),
                                                env_or("ESI_API_KEY", ""),
                                                env_or("ESI_LLM_MODEL", "gpt-3.5-turbo"));
}

std::string HttpGenerationClient::generate(const GenerationRequest& request) const {
  const json body = {{"model", model_},
                     {"temperature", 0},
                     {"messages", json::array({{{"role", "user"}, {"content", request.prompt}}})}};
  try {
    const json res = post_json(base_url_, "/v1/chat/completions", api_key_, body);
    return res.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception& e) {
    throw GenerationError(std::string("malformed completion response: ") + e.what(),
                          request.prompt);
  } catch (const std::exception& e) {
    throw GenerationError(e.what(), request.prompt);
  }
}

}  // namespace esi::cqa
