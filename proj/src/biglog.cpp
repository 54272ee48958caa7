#include "kinlb/biglog.hpp"

#include <algorithm>
#include <limits>
#include <cstdio>

namespace kinlb {

namespace {
constexpr int64_t kExpCap = int64_t(1) << 62;
}

BigLog big_norm(double m, int64_t e, bool sat) {
  BigLog r;
  r.sat = sat;
  if (m == 0.0 || !std::isfinite(m)) {
    if (!std::isfinite(m)) {
      r.sat = true;
      r.m = (m > 0 || std::isnan(m)) ? 0.5 : -0.5;
      r.e = kExpCap;
      return r;
    }
    r.m = 0.0;
    r.e = 0;
    return r;
  }
  int ex = 0;
  r.m = std::frexp(m, &ex);
  // frexp exponent is an int; adding to a far-from-cap int64 cannot wrap.
  if (e > kExpCap || e < -kExpCap) {
    r.sat = true;
    r.e = e > 0 ? kExpCap : -kExpCap;
    return r;
  }
  r.e = e + ex;
  return r;
}

BigLog big_from(double v) { return big_norm(v, 0); }

double big_to_double(const BigLog& a) {
  if (a.m == 0.0) return 0.0;
  // Saturation keeps the direction: overflow-side -> inf, underflow-side -> 0.
  if (a.e > 2000) return a.m > 0 ? std::numeric_limits<double>::infinity()
                                 : -std::numeric_limits<double>::infinity();
  if (a.e < -2000) return a.m > 0 ? 0.0 : -0.0;
  return std::ldexp(a.m, static_cast<int>(a.e));
}

BigLog big_add(const BigLog& a, const BigLog& b) {
  bool sat = a.sat || b.sat;
  if (a.m == 0.0) { BigLog r = b; r.sat = r.sat || sat; return r; }
  if (b.m == 0.0) { BigLog r = a; r.sat = r.sat || sat; return r; }
  const BigLog& hi = (a.e >= b.e) ? a : b;
  const BigLog& lo = (a.e >= b.e) ? b : a;
  int64_t d = hi.e - lo.e;
  if (d > 1080) { BigLog r = hi; r.sat = r.sat || sat; return r; }
  double sum = hi.m + std::ldexp(lo.m, -static_cast<int>(d));
  return big_norm(sum, hi.e, sat);
}

BigLog big_neg(const BigLog& a) {
  BigLog r = a;
  r.m = -r.m;
  return r;
}

BigLog big_sub(const BigLog& a, const BigLog& b) { return big_add(a, big_neg(b)); }

BigLog big_scale(const BigLog& a, double c) {
  if (c == 0.0 || a.m == 0.0) return big_norm(0.0, 0, a.sat);
  return big_norm(a.m * c, a.e, a.sat);
}

BigLog big_mul(const BigLog& a, const BigLog& b) {
  if (a.m == 0.0 || b.m == 0.0) return big_norm(0.0, 0, a.sat || b.sat);
  double m = a.m * b.m;
  int64_t e = 0;
  bool sat = a.sat || b.sat;
  if ((a.e > 0 && b.e > kExpCap - a.e) || (a.e < 0 && b.e < -kExpCap - a.e)) {
    sat = true;
    e = (a.e > 0) ? kExpCap : -kExpCap;
  } else {
    e = a.e + b.e;
  }
  return big_norm(m, e, sat);
}

BigLog big_mul_pow2(const BigLog& a, int64_t k) {
  if (a.m == 0.0) return a;
  if ((k > 0 && a.e > kExpCap - k) || (k < 0 && a.e < -kExpCap - k))
    return big_norm(a.m, k > 0 ? kExpCap : -kExpCap, true);
  return big_norm(a.m, a.e + k, a.sat);
}

int big_cmp(const BigLog& a, const BigLog& b) {
  BigLog d = big_sub(a, b);
  if (d.m > 0) return 1;
  if (d.m < 0) return -1;
  return 0;
}

BigLog big_exp(const BigLog& a) {
  if (a.m == 0.0) return big_from(1.0);
  // log2(e^a) = a / ln 2; exponent of the result must fit int64.
  BigLog l2 = big_scale(a, 1.4426950408889634074);
  double l2d = big_to_double(l2);
  if (a.sat || !std::isfinite(l2d) || std::abs(l2d) >= double(kExpCap)) {
    BigLog r;
    r.m = 0.5;
    r.e = l2.m > 0 ? kExpCap : -kExpCap;
    r.sat = true;
    return r;
  }
  double fl = std::floor(l2d);
  double frac = l2d - fl;
  return big_norm(std::exp2(frac), static_cast<int64_t>(fl));
}

BigLog big_log(const BigLog& a) {
  if (a.m <= 0.0) return big_norm(-0.5, kExpCap, true);
  double v = std::log(a.m) + 0.6931471805599453094 * static_cast<double>(a.e);
  return big_norm(v, 0, a.sat);
}

std::string big_str(const BigLog& a) {
  char buf[96];
  if (big_is_zero(a)) return "0";
  double l10 = (std::log10(std::abs(a.m)) + 0.30102999566398119521 * double(a.e));
  std::snprintf(buf, sizeof buf, "%s%.9g(log10|x|=%.6g)%s", a.m < 0 ? "-" : "",
                big_to_double(a), l10, a.sat ? "[sat]" : "");
  return buf;
}

LogAmp amp_from_double(double a) {
  LogAmp r;
  if (a < 0.0 || std::isnan(a)) {
    r.zero = true;
    r.ln = big_norm(-0.5, kExpCap, true);
    return r;
  }
  if (a == 0.0) return amp_zero();
  r.ln = big_from(std::log(a));
  return r;
}

LogAmp amp_one() {
  LogAmp r;
  r.ln = big_from(0.0);
  return r;
}

LogAmp amp_zero() {
  LogAmp r;
  r.zero = true;
  r.ln = BigLog{-0.5, kExpCap, false};
  return r;
}

LogAmp amp_from_ln(const BigLog& ln) {
  LogAmp r;
  r.ln = ln;
  return r;
}

LogAmp amp_from_ln(double ln) { return amp_from_ln(big_from(ln)); }

LogAmp amp_mul(const LogAmp& a, const LogAmp& b) {
  if (a.zero || b.zero) return amp_zero();
  return amp_from_ln(big_add(a.ln, b.ln));
}

LogAmp amp_div(const LogAmp& a, const LogAmp& b) {
  if (a.zero) return amp_zero();
  return amp_from_ln(big_sub(a.ln, b.ln));
}

LogAmp amp_pow(const LogAmp& a, double p) {
  if (a.zero) return p > 0 ? amp_zero() : amp_one();
  if (p == 0.0) return amp_one();
  return amp_from_ln(big_scale(a.ln, p));
}

LogAmp amp_add(const LogAmp& a, const LogAmp& b) {
  if (a.zero) return b;
  if (b.zero) return a;
  const LogAmp& hi = (big_cmp(a.ln, b.ln) >= 0) ? a : b;
  const LogAmp& lo = (big_cmp(a.ln, b.ln) >= 0) ? b : a;
  double d = big_to_double(big_sub(lo.ln, hi.ln));
  double corr = (d < -745.0) ? 0.0 : std::log1p(std::exp(d));
  LogAmp r;
  r.ln = big_add(hi.ln, big_from(corr));
  return r;
}

LogAmp amp_min(const LogAmp& a, const LogAmp& b) {
  if (a.zero || b.zero) return amp_zero();
  return big_cmp(a.ln, b.ln) <= 0 ? a : b;
}

LogAmp amp_max(const LogAmp& a, const LogAmp& b) {
  if (a.zero) return b;
  if (b.zero) return a;
  return big_cmp(a.ln, b.ln) >= 0 ? a : b;
}

double amp_to_double(const LogAmp& a) {
  if (a.zero) return 0.0;
  return big_to_double(big_exp(a.ln));
}

bool amp_lt(const LogAmp& a, const LogAmp& b) {
  if (a.zero) return !b.zero;
  if (b.zero) return false;
  return big_cmp(a.ln, b.ln) < 0;
}

std::string amp_str(const LogAmp& a) {
  if (a.zero) return "0";
  char buf[96];
  double l = big_to_double(a.ln);
  std::snprintf(buf, sizeof buf, "exp(%.9g)%s", l, a.ln.sat ? "[sat]" : "");
  return buf;
}

}  // namespace kinlb
