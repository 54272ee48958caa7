#include "kinlb/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "kinlb/error.hpp"

namespace kinlb {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, ',')) out.push_back(trim(cur));
  return out;
}

}  // namespace

bool Config::has(const std::string& table, const std::string& key) const {
  return find(table, key) != nullptr;
}

const std::string* Config::find(const std::string& table, const std::string& key) const {
  for (const auto& t : tables)
    if (t.first == table)
      for (const auto& kv : t.second)
        if (kv.first == key) return &kv.second;
  return nullptr;
}

std::string Config::get_str(const std::string& table, const std::string& key) const {
  const std::string* v = find(table, key);
  if (!v) fail_validation("ConfigMissing", table + "." + key);
  return *v;
}

std::string Config::get_str(const std::string& table, const std::string& key,
                            const std::string& def) const {
  const std::string* v = find(table, key);
  return v ? *v : def;
}

double Config::get_double(const std::string& table, const std::string& key) const {
  std::string s = get_str(table, key);
  try {
    size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    fail_validation("ConfigBadNumber", table + "." + key + " = " + s);
  }
}

double Config::get_double(const std::string& table, const std::string& key,
                          double def) const {
  return has(table, key) ? get_double(table, key) : def;
}

long long Config::get_int(const std::string& table, const std::string& key,
                          long long def) const {
  if (!has(table, key)) return def;
  std::string s = get_str(table, key);
  try {
    return std::stoll(s);
  } catch (const std::exception&) {
    fail_validation("ConfigBadNumber", table + "." + key + " = " + s);
  }
}

bool Config::get_bool(const std::string& table, const std::string& key, bool def) const {
  if (!has(table, key)) return def;
  std::string s = get_str(table, key);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  fail_validation("ConfigBadBool", table + "." + key + " = " + s);
}

std::vector<double> Config::get_list(const std::string& table, const std::string& key) const {
  std::vector<double> out;
  for (const auto& tok : split_commas(get_str(table, key))) {
    if (tok.empty()) continue;
    try {
      out.push_back(std::stod(tok));
    } catch (const std::exception&) {
      fail_validation("ConfigBadNumber", table + "." + key + " item " + tok);
    }
  }
  return out;
}

Vec3 Config::get_vec3(const std::string& table, const std::string& key) const {
  auto v = get_list(table, key);
  if (v.size() != 3) fail_validation("ConfigBadVec3", table + "." + key);
  return {v[0], v[1], v[2]};
}

Vec3 Config::get_vec3(const std::string& table, const std::string& key, Vec3 def) const {
  return has(table, key) ? get_vec3(table, key) : def;
}

void Config::set(const std::string& table, const std::string& key,
                 const std::string& value) {
  for (auto& t : tables)
    if (t.first == table) {
      for (auto& kv : t.second)
        if (kv.first == key) {
          kv.second = value;
          return;
        }
      t.second.emplace_back(key, value);
      return;
    }
  tables.push_back({table, {{key, value}}});
}

std::string Config::canonical_text() const {
  std::vector<std::string> lines;
  for (const auto& t : tables)
    for (const auto& kv : t.second)
      lines.push_back(t.first + "." + kv.first + "=" + kv.second);
  std::sort(lines.begin(), lines.end());
  std::string out;
  for (const auto& l : lines) {
    out += l;
    out += '\n';
  }
  return out;
}

std::string Config::hash() const {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canonical_text()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

Config parse_config_text(const std::string& text) {
  Config cfg;
  std::istringstream is(text);
  std::string line, table;
  int lineno = 0;
  while (std::getline(is, line)) {
    lineno++;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        fail_validation("ConfigSyntax", "line " + std::to_string(lineno));
      table = trim(line.substr(1, line.size() - 2));
      if (table.empty()) fail_validation("ConfigSyntax", "empty table name");
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos || table.empty())
      fail_validation("ConfigSyntax", "line " + std::to_string(lineno) + ": " + line);
    cfg.set(table, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

Config parse_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail_validation("ConfigMissing", "cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

}  // namespace kinlb
