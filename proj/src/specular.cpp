#include "kinlb/specular.hpp"

#include <cmath>
#include <limits>
#include <utility>

#include "kinlb/billiard.hpp"
#include "kinlb/error.hpp"

namespace kinlb {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
const double kLn2 = std::log(2.0);
const double kSigma = 3.0 * std::sqrt(2.0) / 4.0;  // per-level radius factor
const double kLnSigma = std::log(kSigma);

double ln_or_neginf(double x) { return x > 0.0 ? std::log(x) : -kInf; }

// Radii ladder and the window cap it implies; shared by wall_chain and
// wall_gap_cap so both see identical scales.
struct LadderScales {
  std::vector<double> r;
  double t_graze = 0.0;
  double delta_TB = 0.0;
};

LadderScales ladder_scales(const WallInputs& b, const DomainMetrics& m) {
  LadderScales s;
  s.r.push_back(b.delta_V);
  // climb past R_min + 1; the affine slope keeps the sequence increasing
  while (!(s.r.back() > b.R_min + 1.0)) {
    double next = kSigma * s.r.back() - b.delta_V / 40.0;
    if (!(next > s.r.back()))
      fail_numerical("MonotonicityViolation", "wall radii stopped increasing");
    s.r.push_back(next);
    if (s.r.size() > 100000)
      fail_numerical("DepthOverflow", "wall ladder deeper than 1e5 levels");
  }
  if (!(s.r.back() <= 2.0 * b.R_min))
    fail_numerical("MonotonicityViolation", "wall ladder overshot 2 R_min");
  double v_top = b.R_min + s.r.back();
  s.t_graze = grazing_time_scale(b.delta_V / 40.0, m.c_tilde, v_top);
  s.delta_TB = std::min({s.t_graze, b.delta_T, m.d / (4.0 * v_top)});
  return s;
}

}  // namespace

void validate_wall_inputs(const WallInputs& b, const DomainMetrics& m) {
  if (!(b.delta_V > 0.0 && b.delta_X >= b.delta_V))
    fail_validation("InvalidScale", "need 0 < delta_V <= delta_X");
  if (!(b.delta_X <= m.d / 56.0 * (1.0 + 1e-12)))
    fail_validation("InvalidScale", "cover radius must not exceed d/56");
  if (!(b.delta_T > 0.0))
    fail_validation("InvalidScale", "time window must be positive");
  if (!(b.R_min >= 2.0))
    fail_validation("InvalidScale", "speed truncation must be >= 2");
  if (!amp_positive(b.a0))
    fail_validation("InvalidScale", "cover amplitude must be positive");
}

DepthChain depth_chain(double l, double gap, double R, double N,
                       const WallInputs& b, const PipelineConsts& c) {
  if (!(l > 0.0 && gap > 0.0))
    fail_validation("InvalidScale", "need positive layer depth and window");
  if (!(N >= 0.0 && N == std::floor(N)))
    fail_validation("InvalidScale", "chain depth must be a whole number");
  if (N > 60.0)
    fail_numerical("DepthOverflow", "transport chain deeper than 60 levels");
  int n = static_cast<int>(N);
  double sigma_N = std::exp(N * kLnSigma);
  if (!(R > l / gap && R > b.R_min + sigma_N * b.delta_V))
    fail_validation("InvalidScale", "speed truncation too small for the chain");

  DepthChain out;
  out.r.resize(n + 1);
  out.l.resize(n + 1);
  out.a.resize(n + 1);
  for (int k = 0; k <= n; ++k) {
    out.r[k] = b.delta_V * std::exp(k * kLnSigma);
    out.l[k] = std::ldexp(l, -3 * (n - k));  // exact dyadic scaling
  }
  if (!(out.l[0] > 1e-300))
    fail_numerical("DepthOverflow", "layer depth underflows at the base level");

  double gp = gamma_pos(c.gamma);
  double lnCL = ln_or_neginf(c.C_L);
  double lnE = lnCL == -kInf
                   ? -kInf
                   : lnCL + std::log(gap) + gp * jbracket_ln(std::log(R));
  LogAmp decay = exp_neg_ln(lnE);

  out.a[0] = amp_mul(b.a0, decay);
  double lnR = std::log(R);
  for (int k = 1; k <= n; ++k) {
    double factor_ln = std::log(c.C_Q) + (3.0 + c.gamma) * std::log(out.r[k - 1]) +
                       std::log(out.l[k]) - (k + 3) * kLn2 - lnR;
    LogAmp sq = amp_mul(out.a[k - 1], out.a[k - 1]);
    out.a[k] = amp_mul(amp_mul(amp_from_ln(big_from(factor_ln)), decay), sq);
  }
  return out;
}

GrazingWindow grazing_window(const WallInputs& b, double l, double gapA,
                             double DTI, const PipelineConsts& c) {
  if (!(l > 0.0 && l <= b.delta_X))
    fail_validation("InvalidScale", "layer depth must lie in (0, delta_X]");
  if (!(gapA > 0.0 && gapA <= DTI && DTI <= b.delta_T))
    fail_validation("InvalidScale", "need 0 < gapA <= DTI <= delta_T");

  GrazingWindow out;
  double term1 = std::log(4.0 * b.R_min / b.delta_V) / kLnSigma;
  double term2 = std::log2(3.0 * l / gapA);
  out.N_levels = std::ceil(std::max(term1, term2));
  if (out.N_levels > 60.0)
    fail_numerical("DepthOverflow", "grazing chain deeper than 60 levels");

  double sigma_N = std::exp(out.N_levels * kLnSigma);
  double reach = b.R_min + sigma_N * b.delta_V;
  out.R_window = 1.0 + std::max(l / gapA, reach);
  out.t_wait = l / (std::exp2(out.N_levels) * (std::max(l / DTI, reach) + 1.0));
  if (!(out.t_wait > 0.0 && out.t_wait <= gapA / 3.0 * (1.0 + 1e-12)))
    fail_numerical("MonotonicityViolation", "waiting offset left (0, gapA/3]");

  out.chain = depth_chain(l, DTI, out.R_window, out.N_levels, b, c);
  out.amp = out.chain.a.back();
  out.v_ball = 3.0 * b.R_min;
  return out;
}

double wall_gap_cap(const WallInputs& b, const DomainMetrics& m) {
  validate_wall_inputs(b, m);
  return ladder_scales(b, m).delta_TB;
}

WallChain wall_chain(const WallInputs& b, const DomainMetrics& m,
                     double tauB_gap, const PipelineConsts& c) {
  validate_wall_inputs(b, m);

  WallChain out;
  out.R_min = b.R_min;
  LadderScales s = ladder_scales(b, m);
  out.r = std::move(s.r);
  out.N_B = static_cast<double>(out.r.size() - 1);

  out.theta.resize(out.r.size());
  for (size_t k = 0; k < out.r.size(); ++k)
    out.theta[k] = std::exp(-(static_cast<double>(k) + 1.0) * kLn2 -
                            std::log(out.r[k] + b.R_min));

  out.t_graze = s.t_graze;
  out.delta_TB = s.delta_TB;
  if (!(tauB_gap > 0.0 && tauB_gap <= out.delta_TB))
    fail_validation("InvalidScale", "wall window must lie in (0, delta_TB]");
  out.tauB_gap = tauB_gap;

  out.l_graze = grazing_shell_depth(b.delta_V / 40.0, tauB_gap / 6.0);
  out.window = grazing_window(b, out.l_graze, tauB_gap, out.delta_TB, c);

  double gp = gamma_pos(c.gamma);
  double lnCL = ln_or_neginf(c.C_L);
  double ln_gap = std::log(tauB_gap);
  out.a.resize(out.r.size());
  out.a[0] = b.a0;
  for (size_t n = 1; n < out.r.size(); ++n) {
    double X = b.R_min + out.r[n];
    double lnX = std::log(X);
    double En_ln = lnCL == -kInf
                       ? -kInf
                       : lnCL + ln_gap + gp * jbracket_ln(lnX) -
                             static_cast<double>(n) * kLn2 - lnX;
    double factor_ln = std::log(c.C_Q) +
                       (3.0 + c.gamma) * std::log(out.r[n - 1]) + ln_gap -
                       (static_cast<double>(n) + 2.0) * kLn2 - lnX;
    LogAmp lhs = amp_min(out.a[n - 1], out.window.amp);
    out.a[n] = amp_mul(amp_mul(amp_from_ln(big_from(factor_ln)),
                               exp_neg_ln(En_ln)),
                       amp_mul(lhs, lhs));
  }
  out.base = amp_min(out.a.back(), out.window.amp);
  return out;
}

SpecularFinal specular_final(const WallChain& w, double xi, int n_levels,
                             const PipelineConsts& c) {
  if (!(xi > 0.0 && xi < 0.25))
    fail_validation("InvalidScale", "contraction parameter must lie in (0, 1/4)");
  if (!(n_levels >= 1 && n_levels <= 100000))
    fail_validation("InvalidScale", "need 1 <= n_levels <= 1e5");
  if (!amp_positive(w.base))
    fail_numerical("DegenerateEnvelope", "wall chain produced no amplitude");

  SpecularFinal out;
  out.tail_frac = w.theta.back();
  out.gap_S_ln = std::log(w.tauB_gap) - (w.N_B + 1.0) * kLn2 -
                 std::log(w.r.back() + w.R_min);

  double gp = gamma_pos(c.gamma);
  double lnCL = ln_or_neginf(c.C_L);
  double lnxi = std::log(xi);
  double lnCQ = std::log(c.C_Q);

  // coefficient of the doubling step at level n (log of it, exactly)
  auto step_ln = [&](int n, double r_prev_ln, double r_ln) {
    double factor_ln = lnCQ + (3.0 + c.gamma) * r_prev_ln + 0.5 * n * lnxi +
                       out.gap_S_ln - (n + 1.0) * kLn2 - r_ln;
    if (lnCL == -kInf) return big_from(factor_ln);
    double En_ln =
        lnCL + out.gap_S_ln + gp * jbracket_ln(r_ln) - n * kLn2 - r_ln;
    return big_add(big_from(factor_ln), big_neg(big_exp(big_from(En_ln))));
  };

  out.r_ln.resize(n_levels + 1);
  out.a.resize(n_levels + 1);
  out.r_ln[0] = 0.0;
  out.a[0] = w.base;
  for (int n = 1; n <= n_levels; ++n) {
    out.r_ln[n] = out.r_ln[n - 1] + 0.5 * kLn2 + std::log1p(-std::pow(xi, n));
    BigLog K = step_ln(n, out.r_ln[n - 1], out.r_ln[n]);
    out.a[n] = amp_mul(amp_mul(out.a[n - 1], out.a[n - 1]),
                       amp_from_ln(K));
  }

  // doubling base: ln A = ln a_0 + min over prefixes of sum 2^{-k} ln c_k
  int k_stop = std::min(std::max(n_levels, 400), 4000);
  BigLog S = big_from(0.0);
  BigLog S_min = big_from(0.0);
  double r_prev_ln = 0.0, r_ln = 0.0;
  BigLog last_step{};
  for (int k = 1; k <= k_stop; ++k) {
    r_prev_ln = r_ln;
    r_ln += 0.5 * kLn2 + std::log1p(-std::pow(xi, k));
    last_step = step_ln(k, r_prev_ln, r_ln);
    S = big_add(S, big_mul_pow2(last_step, -k));
    if (big_cmp(S, S_min) < 0) S_min = S;
  }
  // the prefix minimum also bounds every deeper level: steps must stay < 1
  if (!(big_cmp(last_step, big_from(0.0)) < 0))
    fail_numerical("MonotonicityViolation", "doubling steps failed to decay");
  LogAmp A = amp_from_ln(big_add(w.base.ln, S_min));

  double c_r_ln = 0.0;
  for (int i = 1; i <= 4000; ++i) {
    double term = std::log1p(-std::pow(xi, i));
    c_r_ln += term;
    if (std::fabs(term) < 1e-18) break;
  }
  out.extract = envelope_from_bases(A, A, amp_one(), c_r_ln);
  return out;
}

SpecularPipelineOut specular_pipeline(const WallInputs& b,
                                      const DomainMetrics& m, double tauS_gap,
                                      double l, double xi, int n_levels,
                                      const PipelineConsts& c) {
  SpecularPipelineOut out;
  out.wall = wall_chain(b, m, tauS_gap, c);
  out.probe = grazing_window(b, l, tauS_gap, out.wall.delta_TB, c);
  out.fin = specular_final(out.wall, xi, n_levels, c);
  return out;
}

}  // namespace kinlb
