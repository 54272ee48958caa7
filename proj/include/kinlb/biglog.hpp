#pragma once
#include <cstdint>
#include <cmath>
#include <string>

namespace kinlb {

// Extended-range real: value = m * 2^e with m in +-[0.5,1) or m == 0.
// Used to carry logarithms of amplitudes whose |log| itself overflows double
// (the positivity cascades square amplitudes thousands of times). sat is a
// sticky flag set when even the int64 exponent cannot hold the magnitude;
// saturated values keep their sign and are reported as saturated, never
// silently clamped.
struct BigLog {
  double m = 0.0;
  int64_t e = 0;
  bool sat = false;
};

BigLog big_norm(double m, int64_t e, bool sat = false);
BigLog big_from(double v);
double big_to_double(const BigLog& a);
BigLog big_add(const BigLog& a, const BigLog& b);
BigLog big_neg(const BigLog& a);
BigLog big_sub(const BigLog& a, const BigLog& b);
BigLog big_scale(const BigLog& a, double c);
BigLog big_mul(const BigLog& a, const BigLog& b);
BigLog big_mul_pow2(const BigLog& a, int64_t k);
// -1, 0, +1 by value; saturated values compare by sign then by exponent.
int big_cmp(const BigLog& a, const BigLog& b);
// The number e^a as a BigLog (always positive; saturates when |a| log2 e
// exceeds the exponent range).
BigLog big_exp(const BigLog& a);
// Natural log of a positive BigLog number.
BigLog big_log(const BigLog& a);
std::string big_str(const BigLog& a);

inline bool big_is_zero(const BigLog& a) { return a.m == 0.0 && !a.sat; }
inline bool big_is_neg(const BigLog& a) { return a.m < 0.0; }

// Positive amplitude in log domain. zero marks an exact zero (log = -inf).
struct LogAmp {
  BigLog ln;
  bool zero = false;
};

LogAmp amp_from_double(double a);
LogAmp amp_one();
LogAmp amp_zero();
LogAmp amp_from_ln(const BigLog& ln);
LogAmp amp_from_ln(double ln);
LogAmp amp_mul(const LogAmp& a, const LogAmp& b);
LogAmp amp_div(const LogAmp& a, const LogAmp& b);
LogAmp amp_pow(const LogAmp& a, double p);
// Exact log-sum-exp; far-apart terms collapse to the larger one.
LogAmp amp_add(const LogAmp& a, const LogAmp& b);
LogAmp amp_min(const LogAmp& a, const LogAmp& b);
LogAmp amp_max(const LogAmp& a, const LogAmp& b);
double amp_to_double(const LogAmp& a);
bool amp_lt(const LogAmp& a, const LogAmp& b);
std::string amp_str(const LogAmp& a);

inline bool amp_saturated(const LogAmp& a) { return a.ln.sat; }
inline bool amp_positive(const LogAmp& a) { return !a.zero; }

}  // namespace kinlb
