#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace hmarl::cli {

inline constexpr const char* kRunManifestFormat = "hmarl-run-manifest-v1";
inline constexpr const char* kRunManifestName = "run_manifest.json";

/// SHA-1 of "blob <size>\0<content>", as git computes object ids.
std::string git_blob_hash(const std::filesystem::path& file);

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  std::string config_hash;
  std::uint64_t seed = 0;
  bool deterministic = false;
  unsigned threads = 1;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::map<std::string, std::string> formats;
  nlohmann::json flags = nlohmann::json::object();
  double duration_s = 0.0;

  /// Hashes every regular file under `dir` (the manifest itself excluded) and writes
  /// dir/run_manifest.json. Artifact paths are relative to `dir` and sorted.
  void write(const std::filesystem::path& dir) const;
};

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string hex64(std::uint64_t v);

}  // namespace hmarl::cli
