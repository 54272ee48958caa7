#include "kinlb/jsonio.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "kinlb/error.hpp"

namespace kinlb {

void write_json_file(const std::string& path, const ojson& j) {
  std::ofstream f(path);
  if (!f) fail_validation("OutputUnwritable", path);
  f << j.dump(2) << "\n";
}

ojson read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail_validation("ConfigMissing", "cannot open " + path);
  ojson j;
  f >> j;
  return j;
}

namespace {

void compare_rec(const ojson& got, const ojson& want, double rtol, const std::string& at,
                 std::vector<std::string>& out) {
  if (got.is_number() && want.is_number()) {
    double a = got.get<double>(), b = want.get<double>();
    double scale = std::max({std::abs(a), std::abs(b), 1e-300});
    if (std::abs(a - b) > rtol * scale && std::abs(a - b) > 0)
      out.push_back(at + ": " + std::to_string(a) + " vs " + std::to_string(b));
    return;
  }
  if (got.type() != want.type()) {
    out.push_back(at + ": type mismatch");
    return;
  }
  if (got.is_object()) {
    for (auto it = want.begin(); it != want.end(); ++it) {
      if (!got.contains(it.key())) {
        out.push_back(at + ": missing key " + it.key());
        continue;
      }
      compare_rec(got.at(it.key()), it.value(), rtol, at + "/" + it.key(), out);
    }
    for (auto it = got.begin(); it != got.end(); ++it)
      if (!want.contains(it.key())) out.push_back(at + ": extra key " + it.key());
    return;
  }
  if (got.is_array()) {
    if (got.size() != want.size()) {
      out.push_back(at + ": size " + std::to_string(got.size()) + " vs " +
                    std::to_string(want.size()));
      return;
    }
    for (size_t i = 0; i < got.size(); i++)
      compare_rec(got[i], want[i], rtol, at + "[" + std::to_string(i) + "]", out);
    return;
  }
  if (got != want) out.push_back(at + ": value mismatch");
}

}  // namespace

std::vector<std::string> golden_compare(const ojson& got, const ojson& want, double rtol) {
  std::vector<std::string> out;
  compare_rec(got, want, rtol, "", out);
  return out;
}

void write_csv(const std::string& path, const std::string& header,
               const std::vector<std::vector<double>>& rows) {
  std::ofstream f(path);
  if (!f) fail_validation("OutputUnwritable", path);
  f << header << "\n";
  char buf[64];
  for (const auto& r : rows) {
    for (size_t i = 0; i < r.size(); i++) {
      std::snprintf(buf, sizeof buf, "%.17g", r[i]);
      f << (i ? "," : "") << buf;
    }
    f << "\n";
  }
}

}  // namespace kinlb
