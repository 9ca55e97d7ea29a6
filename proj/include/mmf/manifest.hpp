#pragma once

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "mmf/container.hpp"
#include "mmf/error.hpp"

namespace mmf {

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw IoError("SHA-256 digest failed");
  }
  static const char* kHex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xf]);
  }
  return out;
}

// Hash of the canonical (key-sorted, compact) serialisation.
inline std::string config_hash(const nlohmann::json& snapshot) { return sha256_hex(snapshot.dump()); }

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Append-only NDJSON run log: a start record, any number of events, and a
// closing summary with the config hash. Every line is flushed as written.
// A default-constructed manifest discards events.
class RunManifest {
 public:
  RunManifest() = default;

  RunManifest(const std::string& dir, const std::string& command, const nlohmann::json& config, std::uint64_t seed) {
    std::filesystem::create_directories(dir);
    hash_ = config_hash(config);
    run_id_ = sha256_hex(command + "|" + hash_ + "|" + std::to_string(seed)).substr(0, 16);
    path_ = (std::filesystem::path(dir) / (command + "-" + run_id_ + ".ndjson")).string();
    out_.open(path_, std::ios::app);
    if (!out_) throw IoError("cannot open manifest '" + path_ + "'");
    write({{"event", "start"}, {"run_id", run_id_}, {"command", command}, {"timestamp", utc_timestamp()},
           {"seed", seed}, {"config", config}, {"config_hash", hash_}});
  }

  bool active() const { return out_.is_open(); }
  const std::string& path() const { return path_; }
  const std::string& hash() const { return hash_; }

  void event(nlohmann::json e) {
    if (active()) write(std::move(e));
  }
  void input(const std::string& file) {
    if (!active()) return;
    write({{"event", "input"}, {"path", file}, {"sha256", sha256_hex(read_file(file))}});
  }
  void artifact(const std::string& file) {
    if (active()) write({{"event", "artifact"}, {"path", file}});
  }
  void summary(const nlohmann::json& metrics) {
    if (!active()) return;
    write({{"event", "summary"}, {"run_id", run_id_}, {"config_hash", hash_}, {"metrics", metrics},
           {"timestamp", utc_timestamp()}});
    out_.close();
  }

 private:
  void write(const nlohmann::json& j) {
    out_ << j.dump() << '\n';
    out_.flush();
    if (!out_) throw IoError("failed writing manifest '" + path_ + "'");
  }

  std::ofstream out_;
  std::string path_, run_id_, hash_;
};

}  // namespace mmf
