#pragma once
// Lower-bound chains for the pure-mirror wall condition.  Three stages:
// a depth-limited transport chain that pushes a velocity-ball bound through
// near-boundary layers (halving the admissible layer depth 8x per level), a
// wall ladder that grows the velocity ball from the cover scale past unit
// radius, and a final doubling chain feeding the Gaussian envelope fit.
//
// Scales here are plain doubles: every chain is depth-limited, so inputs
// whose scales cannot be represented outside the log domain are rejected
// (DepthOverflow) rather than silently degraded.  Amplitudes stay LogAmp.

#include <vector>

#include "kinlb/biglog.hpp"
#include "kinlb/charts.hpp"
#include "kinlb/pipeline.hpp"

namespace kinlb {

// Uniform velocity-ball bound on every cover ball (the wall chains' input).
struct WallInputs {
  double delta_X = 0.0;  // spatial ball radius
  double delta_V = 0.0;  // velocity ball radius (= delta_X in the cover)
  double delta_T = 0.0;  // time half-window
  double R_min = 2.0;    // speed truncation of the matched velocities (>= 2)
  LogAmp a0{};           // uniform amplitude
};
void validate_wall_inputs(const WallInputs& b, const DomainMetrics& m);

// ---------- depth-limited transport chain ----------

// Level k of the chain certifies a ball of radius r[k] at layer depth l[k];
// the depth shrinks 8x per level (exact dyadic scaling) and the amplitude
// squares.  gap: time window length.  R: speed truncation of the window.
struct DepthChain {
  std::vector<double> r;  // ball radii delta_V * (3 sqrt2/4)^k
  std::vector<double> l;  // layer depths l / 8^{N-k}
  std::vector<LogAmp> a;  // amplitudes
};
// DepthOverflow if N > 60 or the dyadic depth leaves double range.
// Requires R > l / gap and R > R_min + (3 sqrt2/4)^N delta_V.
DepthChain depth_chain(double l, double gap, double R, double N,
                       const WallInputs& b, const PipelineConsts& c);

// ---------- grazing window ----------

// Bound surviving a near-tangential passage: valid on times [tauA, tau2+DTI]
// once the backward trajectory waited t_wait and stayed l-deep inside.
struct GrazingWindow {
  double N_levels = 0.0;  // chain depth
  double t_wait = 0.0;    // backward waiting offset
  double R_window = 0.0;  // speed truncation used by the chain
  LogAmp amp{};           // uniform amplitude on B(0, v_ball)
  double v_ball = 0.0;    // 3 R_min
  DepthChain chain{};
};
// gapA = tauA - tau2 in (0, DTI]; DTI <= delta_T; 0 < l <= delta_X.
GrazingWindow grazing_window(const WallInputs& b, double l, double gapA,
                             double DTI, const PipelineConsts& c);

// ---------- wall ladder ----------

struct WallChain {
  std::vector<double> r;      // radii r_0..r_{N_B}, climbing past R_min + 1
  double R_min = 0.0;
  double N_B = 0.0;
  std::vector<double> theta;  // window fractions theta_0..theta_{N_B}
  double delta_TB = 0.0;      // admissible cap for tauB - tau2
  double t_graze = 0.0;       // grazing time scale entering delta_TB
  double l_graze = 0.0;       // layer depth fed to the grazing window
  GrazingWindow window{};     // the wall-return branch
  std::vector<LogAmp> a;      // ladder amplitudes a_0..a_{N_B}
  LogAmp base{};              // min{a_{N_B}, window.amp}: uniform on B(0,1)
  double tauB_gap = 0.0;
};
// tauB_gap = tauB - tau2 in (0, delta_TB]; the bound holds from offset
// (1 - theta[N_B]) * tauB_gap past tau2.
WallChain wall_chain(const WallInputs& b, const DomainMetrics& m,
                     double tauB_gap, const PipelineConsts& c);

// The admissible cap delta_TB for tauB - tau2 at these inputs (the value
// wall_chain computes internally), exposed so callers can pick a valid
// window before committing to a chain.
double wall_gap_cap(const WallInputs& b, const DomainMetrics& m);

// ---------- final doubling chain + envelope ----------

struct SpecularFinal {
  std::vector<double> r_ln;  // ln r_n, unit-ball start (r_0 = 1)
  std::vector<LogAmp> a;     // chain amplitudes
  double tail_frac = 0.0;    // (tauS - tau~)/(tauS - tau2) = theta[N_B]
  double gap_S_ln = 0.0;     // ln(tauS - tau~)
  ExtractDetail extract{};   // Gaussian envelope fitted to the chain
};
SpecularFinal specular_final(const WallChain& w, double xi, int n_levels,
                             const PipelineConsts& c);

// One-call composition: wall chain at tauS, a grazing window at the caller's
// layer depth l (reported alongside), final chain, envelope.
struct SpecularPipelineOut {
  WallChain wall{};
  GrazingWindow probe{};
  SpecularFinal fin{};
};
SpecularPipelineOut specular_pipeline(const WallInputs& b,
                                      const DomainMetrics& m, double tauS_gap,
                                      double l, double xi, int n_levels,
                                      const PipelineConsts& c);

}  // namespace kinlb
