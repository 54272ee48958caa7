#pragma once
#include <string>
#include <vector>

#include <json.hpp>

#include "kinlb/vec.hpp"
#include "kinlb/biglog.hpp"

namespace kinlb {

// Ordered JSON keeps manifests byte-stable across runs.
using ojson = nlohmann::ordered_json;

inline ojson jvec(Vec3 v) { return ojson::array({v.x, v.y, v.z}); }

inline ojson jbig(const BigLog& b) {
  ojson o;
  o["m"] = b.m;
  o["e"] = b.e;
  o["sat"] = b.sat;
  return o;
}

inline ojson jamp(const LogAmp& a) {
  ojson o;
  o["zero"] = a.zero;
  o["ln"] = jbig(a.ln);
  o["ln_double"] = big_to_double(a.ln);
  return o;
}

void write_json_file(const std::string& path, const ojson& j);
ojson read_json_file(const std::string& path);

// Recursive compare with relative tolerance on numbers; returns mismatch
// descriptions (empty = equal). Key sets must agree exactly.
std::vector<std::string> golden_compare(const ojson& got, const ojson& want, double rtol);

void write_csv(const std::string& path, const std::string& header,
               const std::vector<std::vector<double>>& rows);

}  // namespace kinlb
