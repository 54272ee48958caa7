#pragma once
#include <string>
#include <vector>
#include <utility>

#include "kinlb/vec.hpp"

namespace kinlb {

// Structured text config: "[table]" headers followed by "key = value" lines,
// '#' comments, values may be scalars or comma lists. Insertion order is kept
// so dumps are stable.
struct Config {
  using Table = std::vector<std::pair<std::string, std::string>>;
  std::vector<std::pair<std::string, Table>> tables;

  bool has(const std::string& table, const std::string& key) const;
  const std::string* find(const std::string& table, const std::string& key) const;
  std::string get_str(const std::string& table, const std::string& key) const;
  std::string get_str(const std::string& table, const std::string& key,
                      const std::string& def) const;
  double get_double(const std::string& table, const std::string& key) const;
  double get_double(const std::string& table, const std::string& key, double def) const;
  long long get_int(const std::string& table, const std::string& key, long long def) const;
  bool get_bool(const std::string& table, const std::string& key, bool def) const;
  std::vector<double> get_list(const std::string& table, const std::string& key) const;
  Vec3 get_vec3(const std::string& table, const std::string& key) const;
  Vec3 get_vec3(const std::string& table, const std::string& key, Vec3 def) const;

  void set(const std::string& table, const std::string& key, const std::string& value);

  // Sorted "table.key=value" lines; input-order independent.
  std::string canonical_text() const;
  // FNV-1a over the canonical text, hex.
  std::string hash() const;
};

Config parse_config_text(const std::string& text);
Config parse_config_file(const std::string& path);

}  // namespace kinlb
