#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace crossmpi {

inline constexpr const char* kToolVersion = "0.1.0";

/// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);
/// Throws Error(kMissingInput) when the file cannot be read.
std::string sha256_file(const std::filesystem::path& path);

struct FileDigest {
  std::string path;
  std::string sha256;
};

/// What a CLI run consumed and produced. Timings vary run to run; everything
/// else is a function of the config and inputs.
struct RunManifest {
  std::string tool_version = kToolVersion;
  std::string command;
  std::string config_hash;
  std::map<std::string, std::uint64_t> seeds;
  std::vector<FileDigest> inputs;
  std::vector<FileDigest> outputs;
  std::vector<std::pair<std::string, double>> timings;  // stage, wall-clock seconds

  void add_input(const std::filesystem::path& path);
  void add_output(const std::filesystem::path& path);
};

nlohmann::json to_json(const RunManifest& manifest);

/// Writes bytes to `path`, creating parent directories; throws Error(kIo).
void write_file(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace crossmpi
