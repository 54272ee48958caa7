#pragma once
// Lower-bound pipeline: propagates a quantitative positivity seed through a
// chain of space-time windows until it yields a Gaussian (Maxwellian-type)
// envelope under the solution.  All amplitudes are carried as LogAmp (they
// fall below every representable double); all small lengths/times are carried
// as natural logs ("_ln" suffix).  Velocities whose magnitude can exceed
// double range are carried as {unit direction, ln magnitude}.

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "kinlb/biglog.hpp"
#include "kinlb/charts.hpp"
#include "kinlb/covers.hpp"
#include "kinlb/kernel.hpp"
#include "kinlb/vec.hpp"

namespace kinlb {

// ---------- log-scale helpers ----------

// ln(e^a + e^b); handles -inf.
double lse(double a, double b);
// ln(e^a - e^b); requires a > b (validation error otherwise).
double lde(double a, double b);
// ln<x> = ln sqrt(1 + x^2) given ln x.
double jbracket_ln(double x_ln);
inline double gamma_pos(double gamma) { return gamma > 0.0 ? gamma : 0.0; }
// e^{-E} as an amplitude, E = e^{lnE} >= 0.  lnE = -inf gives 1.  No clamp:
// the log domain holds -E exactly; only astronomically large lnE saturates.
LogAmp exp_neg_ln(double lnE);

// Velocity with possibly huge magnitude.
struct VelLn {
  Vec3 dir{0, 0, 0};   // unit vector (zero if magnitude is zero)
  double mag_ln = -std::numeric_limits<double>::infinity();
};
VelLn velln_from(const Vec3& v);
// 2*(a - b)/T with T = e^{T_ln}.
VelLn velln_scaled_diff(const Vec3& a, const Vec3& b, double T_ln);

// ---------- constants ----------

struct PipelineConsts {
  double gamma = 1.0;  // kinetic exponent of the kernel
  double C_Q = 0.0;    // spreading constant (composed: measured * l_b * c_phi)
  double C_L = 0.0;    // collision-frequency envelope constant
};

struct HydroBounds {
  double M = 1.0;         // mass lower bound
  double E_f = 1.0;       // energy + density upper bound
  double p_gamma = 0.0;   // L^p integrability exponent (needed for gamma < 0)
  double L_fp = 0.0;      // L^p norm bound (needed for gamma < 0)
  double Eprime_f = 1.0;  // weighted L^1 bound (grazing-collision pipeline)
  double W_f = 1.0;       // W^{2,inf} velocity regularity bound (same)
  double modulus_c = 1.0;    // continuity modulus omega(r) = c * r^beta
  double modulus_beta = 1.0; // (beta > 0)
  double T_B = 1.0;          // diffuse-wall temperature
  double accommodation = 0.5; // wall accommodation in [0,1]
};
void validate_hydro(const HydroBounds& h, double gamma);

// C_L from the closed-form collision-frequency bound; C_Q composed from a
// measured spreading constant.
PipelineConsts make_consts(const KernelParams& p, const HydroBounds& h,
                           double c_measured);

// ---------- initial seed ----------

struct SeedBound {
  Vec3 x_I{0, 0, 0};
  Vec3 v_I{0, 0, 0};
  double Delta0 = 0.0;       // seed scale (space, velocity and time)
  LogAmp alpha0_prime{};     // seed amplitude
  double R0 = 0.0;           // velocity concentration radius
  double clearance_xI = 0.0; // distance from x_I to the boundary
};

struct F0Probe {
  std::function<double(const Vec3&, const Vec3&)> f0;
  std::vector<Vec3> x_candidates;
  std::vector<double> x_clearances;  // distance to the boundary per candidate
  std::vector<Vec3> v_candidates;
};

// Builds the seed from mass/energy bounds and the continuity modulus.  If a
// probe is given, (x_I, v_I) is moved to the best candidate and the probe
// values must exceed the concentration threshold (NoMassConcentration).
SeedBound initial_seed(const HydroBounds& hydro, const DomainMetrics& metrics,
                       const PipelineConsts& consts, const Vec3& x_I,
                       const Vec3& v_I, double clearance_xI,
                       const std::optional<F0Probe>& probe = std::nullopt);

// ---------- amplitude recursion ----------

// Ladder of amplitudes alpha_n produced by iterating the spreading estimate
// over shrinking time windows.  r_n grows by the factor 3*sqrt(2)/4 per
// level; the window width at level n is Delta2 / (2^{n+1} (2 r_n + |v'|)).
struct AlphaSeq {
  double n_max = 0;                // requested depth (may exceed 2^53)
  int dense_n = 0;                 // ladder values stored densely for 0..dense_n
  std::vector<double> r_ln;        // ln r_n
  std::vector<double> t_off_ln;    // ln(t - t_n): reach of the level-n window
  std::vector<LogAmp> alpha;       // alpha_n at the query time
  LogAmp alpha_final{};            // alpha at n_max
  int refinements = 0;             // grid doublings performed
  bool converged = false;          // successive passes agreed to 1e-6 (log-relative)
  int grid_levels = 0;             // levels resolved on absolute (clamped) grids
};

// elapsed_ln = ln(t - tau).  A is the level-0 amplitude; v_abs_ln = ln|v'|.
AlphaSeq alpha_recursion_ln(double elapsed_ln, double Delta2_ln, const LogAmp& A,
                            double v_abs_ln, double n_max,
                            const PipelineConsts& consts);
// Plain-argument wrapper.
AlphaSeq alpha_recursion(double tau, double t, double Delta2, const LogAmp& A,
                         double v_abs, double n_max, const PipelineConsts& consts);

// ---------- single-segment propagation ----------

// Moves a space-velocity ball bound from x' to y (segment inside the domain)
// with scales Delta1 (time) and Delta2 (ball); plain-double interface for
// scales in (0, 1/2].
struct SegmentPropagation {
  double m_min = 0;                // least admissible ladder depth
  double D = 0.0;                  // validity-window extension past tau + Delta1
  double T = 0.0;                  // arrival time
  double v_cap = 0.0;              // |velocity map| <= 4 d_Omega / Delta1
  double ball_radius = 0.0;        // Delta2 / 2^{m+1}
  // amplitude map A -> arrival amplitude at depth m (>= m_min enforced)
  std::function<LogAmp(const LogAmp&, double /*m*/)> amplify;
  // (y, x') -> arrival velocity
  std::function<Vec3(const Vec3&, const Vec3&)> velocity;
};
SegmentPropagation segment_propagation(double tau, double Delta1, double Delta2,
                                       double v_abs, double clearance,
                                       const DomainMetrics& metrics,
                                       const PipelineConsts& consts);

// ---------- zigzag chain ----------

// Output of pushing the seed along a zigzag (or along a synthetic chain of
// given length).  Index j runs 1..J; entry 0 holds the conventions T_0 = 0.
struct ChainBound {
  // per-segment data
  std::vector<double> n_levels;   // ladder depth used on segment j
  std::vector<double> T;          // arrival times (clamped double view)
  std::vector<double> G_ln;       // ln(tau2 - T_j), j = 0..J
  std::vector<double> gap_ln;     // ln(T_j - T_{j-1}), j = 1..J
  std::vector<double> D_ln;       // ln of window extensions, j = 1..J
  std::vector<double> U_excess_ln;// ln(U_j - tau2): validity slack, j = 1..J
  std::vector<LogAmp> amp;        // arrival amplitudes B_j
  std::vector<VelLn> vel;         // arrival velocities along the zigzag
  // aggregates at j = J
  double speed_bound_ln = 0.0;    // ln max_j 2 d_Omega / (T_j - T_{j-1})
  LogAmp amp_min{};               // min_j B_j
  double dx_ln = 0.0;             // ln of the final spatial radius
  double dt_ln = 0.0;             // ln of the final time half-window
  double ball_ln = 0.0;           // ln min{dx, dt} (common ball radius)
  VelLn vel_end{};                // arrival velocity at the zigzag end
  // context carried downstream
  double tau2_ln = 0.0;
  double Delta0_ln = 0.0;
  double d = 0.0;                 // boundary-chart scale
  double d_omega = 0.0;
  double chain_len = 0;           // J
};

// tau2_frac in (0,1): tau2 = tau2_frac * Delta0 (kept in log form so deep
// configurations do not underflow).  chain_len = 0 uses the zigzag's own
// segment count; pass the certified connectivity bound for domain-wide use.
ChainBound zigzag_chain(const SeedBound& seed, const Zigzag& zigzag,
                        double tau2_frac, const DomainMetrics& metrics,
                        const PipelineConsts& consts, double chain_len = 0);

// Arrival velocities along another zigzag reusing an existing chain's arrival
// times (the time chain does not depend on the waypoints, only on the scales).
// Requires z.n_segments <= chain.gap_ln entries.
std::vector<VelLn> chain_velocities(const ChainBound& chain, const Zigzag& z);

// ---------- uniform cover bounds ----------

struct CoverPointBound {
  Vec3 x{0, 0, 0};          // cover center
  bool near_boundary = false;
  int anchor = -1;          // landmark index the velocity points away from
  VelLn vbar{};             // matched velocity at x
};

struct CoverBound {
  double n_levels = 0;      // ladder depth of the covering step
  double delta_x_ln = 0.0;  // spatial ball radius (= delta_v)
  double delta_v_ln = 0.0;
  double delta_t_ln = 0.0;  // time half-window
  double speed_min_ln = 0.0;// ln R_min (>= ln 2)
  LogAmp a0{};              // uniform amplitude on every covered ball
  std::vector<CoverPointBound> points; // representative centers
  double cover_radius_ln = 0.0;        // ln(delta_x / 2^N)
  double count_bound_ln = 0.0;         // ln upper bound on the full cover size
  double min_landmark_depth = 0.0;
  // context
  double tau2_ln = 0.0, d = 0.0, d_omega = 0.0, ball_ln = 0.0;
  double speed_chain_ln = 0.0;  // ln of the chain speed bound (R)
  LogAmp amp_chain{};           // chain amplitude floor (B)
};

// N: cover refinement level (balls of radius delta_x / 2^N).  centers: sample
// points to instantiate; defaults to the landmark points themselves.  dom, if
// given, supplies boundary clearances for classifying centers.
CoverBound uniform_cover_bounds(const ChainBound& chain, const LandmarkSet& lms,
                                int N, const DomainMetrics& metrics,
                                const PipelineConsts& consts,
                                const std::vector<Vec3>& centers = {},
                                const DomainSpec* dom = nullptr);

// ---------- boundary flux ----------

struct FluxBound {
  double m_levels = 0;        // ladder depth of the boundary step
  LogAmp A_prime{};           // incoming-ball amplitude
  double delta_vi_ln = 0.0;   // velocity ball radius 2^{-(m+2)}
  double delta_ti_ln = 0.0;   // time window
  double vn_floor_ln = 0.0;   // ln of the inward normal-velocity floor
  double speed_min_ln = 0.0;  // ln of the boundary speed scale
  LogAmp b_tau{};             // uniform in-flux lower bound
};

FluxBound boundary_flux_lower(const CoverBound& cover,
                              const DomainMetrics& metrics,
                              const PipelineConsts& consts);

// ---------- mixed wall iteration ----------

struct BallBound {
  LogAmp amplitude{};
  VelLn v_center{};
  double v_radius_ln = 0.0;
  Vec3 x_center{0, 0, 0};
  double x_radius_ln = 0.0;
  double t_lo_off_ln = 0.0;  // window start offset from tau2 (ln)
  double t_hi_off_ln = 0.0;  // window end offset from tau2 (ln)
};

struct IterationBound {
  double xi = 0.0;
  double gap_ln = 0.0;          // ln(tau' - tau2)
  double delta_v_ln = 0.0;
  double speed_min_ln = 0.0;
  double delta_td_ln = 0.0;     // ln min{delta_x, delta_t, delta_ti}
  std::vector<double> r_ln;     // growing velocity radii r''_n
  std::vector<LogAmp> a;        // interior-branch amplitudes
  std::vector<LogAmp> b;        // wall-branch amplitudes
  std::vector<BallBound> balls; // per-level certified balls (at x = origin rep)
  LogAmp b_tau{};
  LogAmp a0{};
  double one_minus_accom = 0.0;
  double T_B = 0.0;
  double tau2_ln = 0.0;
};

// gap_frac in (0,1]: tau' - tau2 = gap_frac * delta_TD.  N: number of levels.
// Requires accommodation < 1 (InvalidAlpha).
IterationBound mixed_iteration(const CoverBound& cover, const FluxBound& flux,
                               const HydroBounds& hydro,
                               const PipelineConsts& consts, double gap_frac,
                               double xi, int N);

// ---------- Gaussian envelope extraction ----------

struct MaxwellianEnvelope {
  LogAmp rho{};        // prefactor
  double theta_ln = 0; // ln of the variance parameter
  double K = 2.0;      // exponent: f >= rho * exp(-|v|^K / (2 theta))
};

struct ExtractDetail {
  MaxwellianEnvelope env{};
  LogAmp A1{}, A2{}, A_script{};  // doubling bases (A = min{A1, A2})
  LogAmp lambda{};                // per-level loss factor (<= 1)
  double c_r_ln = 0.0;            // ln of the velocity-radius floor scale
  bool degenerate = false;        // clamp to 1 - 1e-9 applied
  int shells_checked = 0;         // envelope dominated on shells 0..this
};

ExtractDetail maxwellian_extract(const IterationBound& it,
                                 const PipelineConsts& consts, double xi);

// Shared envelope fit: given the doubling bases A1, A2 (A = min clamped below
// 1) and the shell scale c_r, fits theta so the Gaussian is dominated on the
// dyadic shells |v| ~ c_r 2^{n/2} and audits shells 0..40.
ExtractDetail envelope_from_bases(const LogAmp& A1, const LogAmp& A2,
                                  const LogAmp& lambda, double c_r_ln);

}  // namespace kinlb
