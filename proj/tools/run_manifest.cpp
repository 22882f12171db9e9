#include "run_manifest.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include <openssl/evp.h>

namespace hmarl::cli {

std::string git_blob_hash(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + file.string());
  const std::string body((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string header = "blob " + std::to_string(body.size()) + std::string(1, '\0');

  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  const bool ok = ctx && EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                  EVP_DigestUpdate(ctx, body.data(), body.size()) == 1 && EVP_DigestFinal_ex(ctx, digest, &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw std::runtime_error("SHA-1 failed for " + file.string());
  std::string out;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    out += buf;
  }
  return out;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void RunManifest::write(const std::filesystem::path& dir) const {
  std::vector<std::string> files;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string rel = std::filesystem::relative(entry.path(), dir).generic_string();
    if (rel != kRunManifestName) files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  nlohmann::json artifacts = nlohmann::json::array();
  for (const auto& f : files) artifacts.push_back({{"path", f}, {"git_blob_sha1", git_blob_hash(dir / f)}});

  nlohmann::json j;
  j["format"] = kRunManifestFormat;
  j["command"] = command;
  j["argv"] = argv;
  j["config_hash"] = config_hash;
  j["seed"] = seed;
  j["deterministic"] = deterministic;
  j["threads"] = threads;
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  j["formats"] = formats;
  j["flags"] = flags;
  j["duration_s"] = duration_s;
  j["artifacts"] = artifacts;
  std::ofstream out(dir / kRunManifestName);
  if (!out) throw std::runtime_error("cannot write " + (dir / kRunManifestName).string());
  out << j.dump(2) << "\n";
}

}  // namespace hmarl::cli
