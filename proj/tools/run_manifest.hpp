#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace esi::cli {

// Record of one CLI invocation, stored as run_manifest.json in the output
// directory of the run.
struct RunManifest {
  std::vector<std::string> command;  // argv as given
  nlohmann::json config;             // resolved configuration
  std::map<std::string, uint64_t> seeds;
  std::string source_revision;
  std::string started_at;  // UTC, ISO 8601
  std::string finished_at;
  std::vector<std::string> outputs;
  std::string status = "ok";

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);

  // Replaces <dir>/run_manifest.json via a temporary file and a rename.
  void write(const std::filesystem::path& dir) const;
  static RunManifest read(const std::filesystem::path& dir);
};

std::string utc_timestamp();
std::string source_revision();

void write_file_atomic(const std::filesystem::path& path, const std::string& content);

}  // namespace esi::cli
