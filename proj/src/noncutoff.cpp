#include "kinlb/noncutoff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "kinlb/error.hpp"

namespace kinlb {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kPi = 3.14159265358979323846;
const double kLn2 = std::log(2.0);
const double kSigma = 3.0 * std::sqrt(2.0) / 4.0;

// Lower bound of int_{max(tau, s_i - w)}^{s_i} e^{-kappa (s_i - s)} a(s)^2 ds
// on the uniform grid s_j = tau + j h: per cell the weight at the far end
// times the smaller endpoint value squared.
LogAmp window_gain(const std::vector<LogAmp>& a, int i, double h, double tau,
                   double kappa, double w) {
  double s_i = tau + i * h;
  double lo = std::max(tau, s_i - w);
  if (!(lo < s_i)) return amp_zero();
  int j0 = std::max(0, static_cast<int>(std::floor((lo - tau) / h)));
  LogAmp acc = amp_zero();
  for (int j = j0; j < i; ++j) {
    double cell_lo = std::max(lo, tau + j * h);
    double cell_hi = tau + (j + 1) * h;
    double width = cell_hi - cell_lo;
    if (!(width > 0.0)) continue;
    LogAmp val = amp_min(a[j], a[j + 1]);
    if (!amp_positive(val)) continue;
    double wt_ln = std::log(width) - kappa * (s_i - cell_lo);
    acc = amp_add(acc, amp_mul(amp_mul(val, val), amp_from_ln(big_from(wt_ln))));
  }
  return acc;
}

struct NcRun {
  std::vector<double> eps, kappa;
  std::vector<LogAmp> finals;  // alpha_n at the end time, n = 0..n_max
  LogAmp final_{};
};

NcRun run_nc_ladder(double tau, double t, double Delta2, const LogAmp& A,
                    double v_abs, int n_max, const KernelParams& kp,
                    const NcKernelConsts& nc, const HydroBounds& h, int M) {
  double span = t - tau;
  double hstep = span / M;
  double gp = gamma_pos(kp.gamma);

  NcRun out;
  std::vector<LogAmp> cur(M + 1, A), nxt(M + 1);
  out.finals.push_back(A);

  for (int n = 0; n < n_max; ++n) {
    double r_n = Delta2 * std::pow(kSigma, static_cast<double>(n));
    double w_n = Delta2 / (std::exp2(n + 1.0) * (2.0 * r_n + v_abs));
    double speed_ln = gp * jbracket_ln(std::log(v_abs + 2.0 * r_n));

    // split angle: largest dyadic pi/8 2^{-j} whose remainder term at the
    // end time is dominated by the gain it leaves behind
    int jsel = -1;
    double eps_n = 0.0, kappa_n = 0.0, gain_scale_ln = 0.0;
    for (int j = 0; j <= 60; ++j) {
      double e = kPi / 8.0 * std::exp2(-static_cast<double>(j));
      DerivedKernelConstants dc = derive_constants(kp, e);
      double kap = (nc.C_L1 * dc.n_b_CO + nc.C_L2 * dc.m_b_NCO) *
                   std::exp(speed_ln);
      double wwin = std::min(w_n, span);
      double J = kap * wwin > 1e-300 ? -std::expm1(-kap * wwin) / kap : wwin;
      double scale_ln = std::log(0.25 * nc.C_Q1) + std::log(dc.l_b) +
                        std::log(kp.c_phi) + (3.0 + kp.gamma) * std::log(r_n);
      LogAmp gain = amp_mul(window_gain(cur, M, hstep, tau, kap, w_n),
                            amp_from_ln(big_from(scale_ln)));
      if (!amp_positive(gain)) continue;
      double rem = nc.C_Q2 * dc.m_b_NCO * kp.c_phi * h.Eprime_f * h.W_f * J;
      bool dominated = rem <= 0.0 ||
                       big_cmp(big_from(std::log(rem)), gain.ln) <= 0;
      if (dominated) {
        jsel = j;
        eps_n = e;
        kappa_n = kap;
        gain_scale_ln = scale_ln;
        break;
      }
    }
    if (jsel < 0)
      fail_numerical("DepthOverflow",
                     "no admissible split angle within 60 halvings");

    LogAmp scale = amp_from_ln(big_from(gain_scale_ln));
    for (int i = 0; i <= M; ++i)
      nxt[i] = amp_mul(scale, window_gain(cur, i, hstep, tau, kappa_n, w_n));
    cur.swap(nxt);
    out.eps.push_back(eps_n);
    out.kappa.push_back(kappa_n);
    out.finals.push_back(cur[M]);
  }
  out.final_ = out.finals.back();
  return out;
}

bool runs_agree(const LogAmp& a, const LogAmp& b) {
  if (a.zero && b.zero) return true;
  if (amp_saturated(a) && amp_saturated(b)) return true;
  if (a.zero || b.zero) return false;
  BigLog diff = big_sub(a.ln, b.ln);
  if (big_is_neg(diff)) diff = big_neg(diff);
  BigLog mag = a.ln;
  if (big_is_neg(mag)) mag = big_neg(mag);
  BigLog scale = big_scale(big_add(big_from(1.0), mag), 1e-6);
  return big_cmp(diff, scale) <= 0;
}

}  // namespace

NcAlphaSeq nc_alpha_recursion(double tau, double t, double Delta2,
                              const LogAmp& A, double v_abs, int n_max,
                              const KernelParams& kp, const NcKernelConsts& nc,
                              const HydroBounds& h) {
  if (!(kp.nu >= 0.0 && kp.nu < 2.0))
    fail_validation("InvalidScale", "singularity order must lie in [0, 2)");
  if (!(t > tau) || !std::isfinite(tau) || !std::isfinite(t))
    fail_validation("InvalidScale", "need a positive time window");
  if (!(Delta2 > 0.0))
    fail_validation("InvalidScale", "seed ball radius must be positive");
  if (!(v_abs >= 0.0))
    fail_validation("InvalidScale", "center speed must be nonnegative");
  if (!amp_positive(A))
    fail_validation("InvalidScale", "plateau amplitude must be positive");
  if (n_max < 0) fail_validation("InvalidScale", "ladder depth must be >= 0");
  if (n_max > 200)
    fail_numerical("DepthOverflow", "ladder deeper than 200 levels");
  if (!(nc.C_Q1 > 0.0 && nc.C_Q2 >= 0.0 && nc.C_L1 >= 0.0 && nc.C_L2 >= 0.0))
    fail_validation("InvalidScale", "split-kernel constants out of range");
  if (!(h.Eprime_f > 0.0 && h.W_f > 0.0))
    fail_validation("InvalidScale", "regularity bounds must be positive");

  NcAlphaSeq out;
  NcRun run = run_nc_ladder(tau, t, Delta2, A, v_abs, n_max, kp, nc, h, 256);
  NcRun fine = run_nc_ladder(tau, t, Delta2, A, v_abs, n_max, kp, nc, h, 512);
  out.converged = runs_agree(run.final_, fine.final_);
  out.eps = std::move(fine.eps);
  out.kappa = std::move(fine.kappa);
  out.alpha = std::move(fine.finals);
  out.alpha_final = fine.final_;
  out.grid_n = 512;
  out.r.resize(n_max + 1);
  for (int n = 0; n <= n_max; ++n)
    out.r[n] = Delta2 * std::pow(kSigma, static_cast<double>(n));
  return out;
}

double nc_K_threshold(double nu) {
  if (!(nu >= 0.0 && nu < 2.0))
    fail_validation("InvalidScale", "singularity order must lie in [0, 2)");
  return 2.0 * std::log2(2.0 + 2.0 * nu / (2.0 - nu));
}

void validate_nc_K(double K, double nu) {
  double thr = nc_K_threshold(nu);
  if (nu == 0.0) {
    if (!(K >= 2.0))
      fail_validation("InvalidK", "envelope exponent must be >= 2");
  } else if (!(K > thr)) {
    fail_validation("InvalidK",
                    "envelope exponent at or below the admissible threshold");
  }
}

NcChain nc_chain(double K, double xi, std::vector<double> Delta,
                 const LogAmp& a0, double r0, int n_levels,
                 const PipelineConsts& c, double nu) {
  if (!(nu >= 0.0 && nu < 2.0))
    fail_validation("InvalidScale", "singularity order must lie in [0, 2)");
  validate_nc_K(K, nu);
  if (!(xi > 0.0 && xi < 0.25))
    fail_validation("InvalidScale", "contraction parameter must lie in (0, 1/4)");
  if (!(n_levels >= 1 && n_levels <= 100000))
    fail_validation("InvalidScale", "need 1 <= n_levels <= 1e5");
  if (!(r0 > 0.0))
    fail_validation("InvalidScale", "seed ball radius must be positive");
  if (!amp_positive(a0))
    fail_validation("InvalidScale", "chain seed amplitude must be positive");
  if (!(c.C_Q > 0.0 && c.C_L > 0.0))
    fail_validation("InvalidScale", "chain constants must be positive");

  NcChain out;
  std::vector<double> tail;  // tail[m-1] = sum_{k >= m} Delta_k
  if (Delta.empty()) {
    Delta.resize(n_levels);
    tail.resize(n_levels);
    for (int i = 1; i <= n_levels; ++i) {
      Delta[i - 1] = std::ldexp(1.0, -i);
      tail[i - 1] = std::ldexp(1.0, -(i - 1));
    }
  } else {
    if (static_cast<int>(Delta.size()) < n_levels)
      fail_validation("InvalidScale", "window fractions shorter than the chain");
    double total = 0.0;
    for (double d : Delta) {
      if (!(d > 0.0))
        fail_validation("InvalidScale", "window fractions must be positive");
      total += d;
    }
    if (!(total <= 1.0 + 1e-12))
      fail_validation("InvalidScale", "window fractions must sum to at most 1");
    tail.assign(Delta.size(), 0.0);
    double s = 0.0;
    for (int i = static_cast<int>(Delta.size()) - 1; i >= 0; --i) {
      s += Delta[i];
      tail[i] = s;
    }
  }
  out.Delta = Delta;

  double gt = std::max(2.0 + c.gamma, 0.0);  // moment weight of the remainder
  double gp = gamma_pos(c.gamma);
  double p = -nu / (2.0 - nu);
  double lnxi = std::log(xi);
  double lnCQ = std::log(c.C_Q);
  double lnCL = std::log(c.C_L);

  out.r_ln.resize(n_levels + 1);
  out.a.resize(n_levels + 1);
  out.r_ln[0] = std::log(r0);
  out.a[0] = a0;
  for (int m = 1; m <= n_levels; ++m) {
    out.r_ln[m] = out.r_ln[m - 1] + 0.5 * kLn2 + std::log1p(-std::pow(xi, m));
    BigLog bracket =
        big_add(big_mul_pow2(out.a[m - 1].ln, 1),
                big_from(lnCL + (3.0 + c.gamma - gt) * out.r_ln[m - 1] +
                         0.5 * m * lnxi));
    BigLog X;  // decay exponent, kept nonnegative
    if (nu > 0.0) {
      X = big_exp(big_add(big_scale(bracket, p),
                          big_from(std::log(tail[m - 1]) + gp * out.r_ln[m])));
    } else {
      BigLog mag = big_is_neg(bracket) ? big_neg(bracket) : bracket;
      X = big_scale(mag, tail[m - 1] * std::exp(gp * out.r_ln[m]));
    }
    double factor_ln = lnCQ + std::log(Delta[m - 1]) +
                       (3.0 + c.gamma) * out.r_ln[m - 1] + 2.5 * m * lnxi;
    out.a[m] = amp_mul(amp_mul(out.a[m - 1], out.a[m - 1]),
                       amp_from_ln(big_add(big_from(factor_ln), big_neg(X))));
  }

  // limiting shell scale: r_n 2^{-n/2} decreases to r0 prod_i (1 - xi^i)
  double cr = std::log(r0);
  for (int i = 1; i <= 4000; ++i) {
    double term = std::log1p(-std::pow(xi, i));
    cr += term;
    if (std::fabs(term) < 1e-18) break;
  }
  out.c_r_ln = cr;

  // prefactor: the seed amplitude, clamped below 1 so its log is negative
  LogAmp rho = out.a[0];
  LogAmp cap = amp_from_double(1.0 - 1e-9);
  if (!amp_lt(rho, cap)) {
    rho = cap;
    out.degenerate = true;
  }

  // theta: shell n is covered by a_n out to radius r_n >= c_r 2^{n/2}, so the
  // envelope evaluated at the conservative inner radius c_r 2^{(n-1)/2} must
  // not exceed a_n; the binding shell sets theta, shaved to absorb rounding.
  double theta_ln = kInf;
  for (int n = 1; n <= n_levels; ++n) {
    BigLog D = big_sub(rho.ln, out.a[n].ln);
    if (!(big_cmp(D, big_from(0.0)) > 0)) continue;  // a_n >= rho: free shell
    double num_ln = K * (cr + 0.5 * (n - 1) * kLn2) - kLn2;
    double t_ln = num_ln - big_to_double(big_log(D));
    theta_ln = std::min(theta_ln, t_ln);
  }
  if (theta_ln == kInf) {
    // nothing constrains: every computed shell already sits above rho
    theta_ln = K * (cr + 0.5 * (n_levels - 1) * kLn2) - kLn2;
  }
  theta_ln -= 1e-9;

  out.env.rho = rho;
  out.env.theta_ln = theta_ln;
  out.env.K = K;

  // audit: count consecutive shells the envelope actually clears
  int ok = 0;
  for (int n = 1; n <= n_levels; ++n) {
    double expo_ln = K * (cr + 0.5 * (n - 1) * kLn2) - kLn2 - theta_ln;
    BigLog lhs = big_sub(rho.ln, big_exp(big_from(expo_ln)));
    if (big_cmp(lhs, out.a[n].ln) <= 0)
      ok = n;
    else
      break;
  }
  out.shells_checked = ok;
  if (ok == 0)
    fail_numerical("DegenerateEnvelope",
                   "fitted envelope cleared no shell of the chain");
  return out;
}

NcPipelineOut noncutoff_pipeline(double tau, double t, double Delta2,
                                 const LogAmp& A, double v_abs, int n_ladder,
                                 double K, double xi,
                                 const std::vector<double>& Delta,
                                 int n_levels, const KernelParams& kp,
                                 const NcKernelConsts& nc,
                                 const HydroBounds& h,
                                 const PipelineConsts& c) {
  validate_nc_K(K, kp.nu);  // reject an inadmissible exponent before the ladder
  NcPipelineOut out;
  out.ladder = nc_alpha_recursion(tau, t, Delta2, A, v_abs, n_ladder, kp, nc, h);
  PipelineConsts cc{kp.gamma, c.C_Q, c.C_L};
  out.chain = nc_chain(K, xi, Delta, out.ladder.alpha_final, out.ladder.r.back(),
                       n_levels, cc, kp.nu);
  return out;
}

}  // namespace kinlb
