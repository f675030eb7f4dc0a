#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace mixttt {

// Flat key=value run configuration: one key per line, '#' comments, blank
// lines ignored. Values are strings; typed getters convert on demand and
// raise ConfigError naming the key on failure.
class RunConfig {
 public:
  RunConfig() = default;

  static RunConfig parse_file(const std::string& path);
  static RunConfig parse_string(const std::string& text);

  bool has(const std::string& key) const { return kv_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key) const;
  double get_double_or(const std::string& key, double fallback) const;
  long get_int(const std::string& key) const;
  long get_int_or(const std::string& key, long fallback) const;
  std::uint64_t get_u64_or(const std::string& key, std::uint64_t fallback) const;
  bool get_bool_or(const std::string& key, bool fallback) const;

  void set(const std::string& key, const std::string& value) { kv_[key] = value; }
  void erase(const std::string& key) { kv_.erase(key); }

  // Comma-separated list values.
  std::vector<std::string> get_list(const std::string& key) const;

  // Rejects keys outside the allowed set (ConfigError names the first).
  void require_known_keys(const std::set<std::string>& allowed) const;
  // ConfigError unless the file behind the key exists.
  void require_path_exists(const std::string& key) const;

  // Sorted key=value lines; the provenance hash is FNV-1a over this text.
  std::string canonical() const;
  std::uint64_t hash() const;

  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

std::uint64_t fnv1a64(const std::string& text);

}  // namespace mixttt
