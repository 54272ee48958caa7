#pragma once
// Lower-bound machinery for long-range (non-cutoff) angular kernels.  The
// collision operator is split at an angle eps into a cutoff part, whose gain
// spreads velocity balls as usual, and a grazing remainder controlled by the
// solution's velocity regularity.  Per ladder level the split angle is
// re-chosen so the gain dominates the remainder; the ladder then feeds a
// doubling chain whose envelope is stretched-exponential (exponent K, with a
// lower admissibility threshold depending on the singularity order nu)
// rather than Gaussian.

#include <vector>

#include "kinlb/biglog.hpp"
#include "kinlb/kernel.hpp"
#include "kinlb/pipeline.hpp"

namespace kinlb {

// Measured operator constants of the split pieces: gain spreading (Q1),
// remainder size (Q2), loss versus angular mass (L1) and versus the grazing
// second moment (L2).
struct NcKernelConsts {
  double C_Q1 = 1.0;
  double C_Q2 = 1.0;
  double C_L1 = 1.0;
  double C_L2 = 1.0;
};

// Ball-growth ladder with per-level split angles.
struct NcAlphaSeq {
  std::vector<double> eps;    // split angle chosen for the step n -> n+1
  std::vector<double> kappa;  // decay rate of that step's window integral
  std::vector<double> r;      // ball radii r_0..r_{n_max}
  std::vector<LogAmp> alpha;  // level amplitudes at the end time
  LogAmp alpha_final{};
  bool converged = false;  // grid refinement agreed to 1e-6 (log-relative)
  int grid_n = 0;          // dense grid size of the accepted pass
};
// Ladder on [tau, t]: level 0 is the constant plateau A on B(v', Delta2) with
// |v'| = v_abs; level n+1 integrates the squared level-n amplitude against
// the split-kernel gain over a sliding window shrinking 2x per level.  The
// split angle per step is the largest dyadic fraction of pi/8 whose
// remainder term is dominated by the gain (the closed-form window weight on
// the remainder side, a conservative cell quadrature on the gain side);
// DepthOverflow if 60 halvings do not produce one.
NcAlphaSeq nc_alpha_recursion(double tau, double t, double Delta2,
                              const LogAmp& A, double v_abs, int n_max,
                              const KernelParams& kp, const NcKernelConsts& nc,
                              const HydroBounds& h);

// Envelope exponent admissibility: K must strictly exceed the threshold for
// nu > 0; equality at K = 2 is admissible only when nu = 0.
double nc_K_threshold(double nu);
void validate_nc_K(double K, double nu);  // InvalidK when inadmissible

// Doubling chain over window fractions Delta (Delta_i = 2^-i when empty,
// with exact dyadic tails) and the stretched-exponential envelope
// rho * exp(-|v|^K / (2 theta)) fitted on its dyadic shells.  Amplitudes may
// saturate the log scale on deep nu > 0 chains; the fit then collapses theta
// instead of inventing a value.
struct NcChain {
  std::vector<double> Delta;  // window fractions actually used
  std::vector<double> r_ln;   // log ball radii r_0..r_n
  std::vector<LogAmp> a;      // chain amplitudes
  MaxwellianEnvelope env{};
  int shells_checked = 0;  // consecutive shells the fitted envelope clears
  double c_r_ln = 0.0;     // log of the limiting shell scale inf_n r_n 2^{-n/2}
  bool degenerate = false; // prefactor clamp engaged during the fit
};
NcChain nc_chain(double K, double xi, std::vector<double> Delta,
                 const LogAmp& a0, double r0, int n_levels,
                 const PipelineConsts& c, double nu);

// Ladder at the caller's scales, then the chain seeded with the ladder's top
// ball and amplitude, then the envelope.  The chain reuses the kernel's
// exponent gamma with the caller's C_Q, C_L.
struct NcPipelineOut {
  NcAlphaSeq ladder{};
  NcChain chain{};
};
NcPipelineOut noncutoff_pipeline(double tau, double t, double Delta2,
                                 const LogAmp& A, double v_abs, int n_ladder,
                                 double K, double xi,
                                 const std::vector<double>& Delta,
                                 int n_levels, const KernelParams& kp,
                                 const NcKernelConsts& nc,
                                 const HydroBounds& h,
                                 const PipelineConsts& c);

}  // namespace kinlb
