#include "run_manifest.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <sstream>
#include <stdexcept>

#ifndef ESI_SOURCE_REVISION
#define ESI_SOURCE_REVISION "unknown"
#endif

namespace esi::cli {

using nlohmann::json;

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string source_revision() { return ESI_SOURCE_REVISION; }

void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

json RunManifest::to_json() const {
  return json{{"command", command},           {"config", config},
              {"seeds", seeds},               {"source_revision", source_revision},
              {"started_at", started_at},     {"finished_at", finished_at},
              {"outputs", outputs},           {"status", status}};
}

RunManifest RunManifest::from_json(const json& j) {
  RunManifest m;
  m.command = j.at("command").get<std::vector<std::string>>();
  m.config = j.at("config");
  m.seeds = j.at("seeds").get<std::map<std::string, uint64_t>>();
  m.source_revision = j.at("source_revision").get<std::string>();
  m.started_at = j.at("started_at").get<std::string>();
  m.finished_at = j.at("finished_at").get<std::string>();
  m.outputs = j.at("outputs").get<std::vector<std::string>>();
  m.status = j.at("status").get<std::string>();
  return m;
}

void RunManifest::write(const std::filesystem::path& dir) const {
  write_file_atomic(dir / "run_manifest.json", to_json().dump(2) + "\n");
}

RunManifest RunManifest::read(const std::filesystem::path& dir) {
  std::ifstream in(dir / "run_manifest.json");
  if (!in) throw std::runtime_error("no run_manifest.json in " + dir.string());
  return from_json(json::parse(in));
}

}  // namespace esi::cli
