#pragma once
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kinlb/vec.hpp"

namespace kinlb {

// Velocity-space collision machinery: kernel factors Phi (relative speed) and
// b (deflection angle), the gain term, the loss frequency, the small-angle
// remainder pieces, and the measured spreading constant.

enum class PhiVariant {
  PowerLaw,   // Phi(r) = c_phi * r^gamma on all of [0, inf)
  Mollified,  // Phi(r) = c_phi * max(1, r)^gamma: constant near 0, power tail
};

enum class BProfile {
  Constant,      // b = b0; consistent with nu = -2
  HardCutoffNu,  // b(theta) = b0 * theta^{-(1+nu)} / sin(theta)
  Tabulated,     // linear interpolation over user nodes
};

struct KernelParams {
  double gamma = 1.0;  // relative-speed exponent in (-3, 1]
  double nu = -2.0;    // angular exponent < 2; >= 0 means the total angular mass diverges
  double b0 = 1.0;     // limit of b(cos t) sin(t) / t^{-(1+nu)} as t -> 0+
  double c_phi = 1.0;
  double C_phi = 1.0;
  PhiVariant phi_variant = PhiVariant::PowerLaw;
  BProfile b_profile = BProfile::Constant;
  std::vector<double> b_table_theta;  // Tabulated only: increasing nodes in (0, pi]
  std::vector<double> b_table_value;
  double eps_split = 0.1;  // small-angle threshold in (0, pi/4)
};

// Checks ranges, c_phi <= C_phi, the sampled Phi envelope, and that
// b(cos t) sin(t) / t^{-(1+nu)} is within 5% of b0 at t = 1e-3 and 1e-4.
// Throws InvalidKernelParams (validation).
void validate_params(const KernelParams& p);

double phi_eval(const KernelParams& p, double r);
double b_eval(const KernelParams& p, double theta);

struct DerivedKernelConstants {
  double n_b = 0.0;      // integral of b over the sphere (inf when nu >= 0)
  double m_b = 0.0;      // integral of b * (1 - cos)
  double l_b = 0.0;      // inf of b over [pi/4, 3pi/4]
  double eps = 0.0;      // split angle the CO/NCO fields refer to
  double n_b_CO = 0.0;   // angular mass restricted to theta >= eps
  double m_b_NCO = 0.0;  // (1 - cos) mass restricted to theta < eps
};

DerivedKernelConstants derive_constants(const KernelParams& p, double eps);
inline DerivedKernelConstants derive_constants(const KernelParams& p) {
  return derive_constants(p, p.eps_split);
}

// ---- velocity functions -------------------------------------------------

enum class VfKind { IndicatorBall, Gaussian };

struct VfComponent {
  VfKind kind = VfKind::IndicatorBall;
  Vec3 center;               // ball center / Gaussian mean
  double radius = 1.0;       // IndicatorBall only
  double temperature = 1.0;  // Gaussian only
  double amplitude = 1.0;
};

// Nonnegative finite mixture of balls and Gaussians with analytic moments and
// exact spherical averages (the angular reduction used by the quadratures).
struct VelocityFunction {
  std::vector<VfComponent> parts;

  double eval(Vec3 v) const;
  double mass() const;                // integral of g
  double energy() const;              // integral of |v|^2 g
  double lp_norm(double p) const;     // L^p norm (triangle-inequality bound for mixtures)
  double l1_weighted(double q) const; // integral of <v>^q g, by quadrature
  Vec3 hull_center() const;
  // Radius around hull_center capturing all parts; Gaussian tails cut where
  // the omitted mass fraction is below `tail`.
  double hull_radius(double tail = 1e-12) const;
  // Exact average of g over the sphere {c + r w : |w| = 1}.
  double sphere_avg(Vec3 c, double r) const;
  bool empty() const;
};

VelocityFunction vf_ball(Vec3 center, double radius, double amplitude = 1.0);
VelocityFunction vf_gaussian(Vec3 mean, double temperature, double amplitude = 1.0);
VelocityFunction vf_mix(const VelocityFunction& a, const VelocityFunction& b);

// ---- collision kinematics ------------------------------------------------

struct CollisionPair {
  Vec3 v_prime, v_star_prime;
};

// v' = (v+v*)/2 + (|v-v*|/2) sigma, v'* = (v+v*)/2 - (|v-v*|/2) sigma.
// Requires |sigma| = 1 within 1e-12 (PreconditionViolated otherwise).
CollisionPair post_collision(Vec3 v, Vec3 v_star, Vec3 sigma);

// ---- quadrature-based evaluators ------------------------------------------

struct QuadSpec {
  int radial = 64;        // Gauss-Legendre nodes per radial panel
  int sigma_polar = 24;   // deflection-angle nodes (per panel where graded)
  int sigma_azimuth = 8;  // azimuth nodes, taken in (phi, phi+pi) pairs
  int max_refine = 4;
  double rel_tol = 1e-4;
};

struct QuadResult {
  double value = 0.0;
  double abs_err = 0.0;  // estimated from the last refinement step
};

// Loss frequency L[g](v) = (angular mass) * int Phi(|v-u|) g(u) du.
// trunc empty: full mass (requires nu < 0, else PreconditionViolated);
// trunc = eps: restricted to theta >= eps. QuadratureDivergence when the
// radial refinement fails to stabilize to quad.rel_tol.
QuadResult L_eval(const KernelParams& p, const VelocityFunction& g, Vec3 v,
                  const QuadSpec& quad, std::optional<double> trunc = std::nullopt);

// Measured sup over a radial v-grid of |L[g](v)| / <v>^{gamma+}.
double loss_envelope(const KernelParams& p, const VelocityFunction& g,
                     const QuadSpec& quad, double v_max, int n_v,
                     std::optional<double> trunc = std::nullopt);

// Closed-form loss-bound constant from moment bounds of g: |L[g]| <=
// C * <v>^{gamma+}. For gamma < 0 the pair (l_gp, p_exp) with
// p_exp > 3/(3+gamma) controls the near-singular part.
double loss_constant_bound(const KernelParams& p, double rho_g, double e_g,
                           double l_gp = 0.0, double p_exp = 0.0);

enum class QplusMethod { Quadrature, MonteCarlo };

struct QplusResult {
  double value = 0.0;
  double error = 0.0;  // MC standard error / quadrature refinement delta
};

// Gain term Q+[g, h](v): h rides at v', g at v'*. MonteCarlo samples v*
// uniformly from the kinematically reachable ball (from the support hulls of
// g and h) and sigma uniformly; estimates are bit-reproducible for any thread
// count. mc_n >= 1e4 required. trunc = eps restricts to theta >= eps.
QplusResult qplus_eval(const KernelParams& p, const VelocityFunction& g,
                       const VelocityFunction& h, Vec3 v, QplusMethod method,
                       uint64_t seed = 1, int64_t mc_n = 100000,
                       const QuadSpec& quad = {}, int threads = 1,
                       std::optional<double> trunc = std::nullopt);

// ---- spreading measurement -------------------------------------------------

struct SpreadingReport {
  double C_measured = 0.0;   // min over grid of value / (l_b c_phi R^{3+gamma} xi^{1/2})
  double C_Q = 0.0;          // C_measured * l_b * c_phi (the pipeline constant)
  bool support_verified = false;  // every grid value exceeds 3x its standard error
  double target_radius = 0.0;     // sqrt(r^2 + R^2) (1 - xi)
  double floor_scale = 0.0;       // l_b c_phi R^{3+gamma} xi^{1/2}
  int grid_points = 0;
  double min_value = 0.0, max_value = 0.0, max_std_err = 0.0;
  uint64_t seed = 0;
  int64_t mc_n = 0;
};

// Evaluates Q+[1_{B(v0,R)}, 1_{B(v0,r)}] on a deterministic grid inside
// B(v0, sqrt(r^2+R^2)(1-xi)) by Monte Carlo. Requires 0 < r <= R, xi in (0,1),
// and an effectively cutoff angular profile. SupportViolation (numerical) if
// a grid value is negative beyond its error bar.
SpreadingReport spreading_check(const KernelParams& p, Vec3 v0, double r, double R,
                                double xi, int grid_pts, int64_t mc_n, uint64_t seed,
                                int threads = 1);

// ---- small-angle pieces ----------------------------------------------------

// S[h](v) = int Phi b [h(v*) - h(v'*)]; eps limits to theta < eps when given.
// The angular integral pairs azimuth nodes and grades panels toward 0 so the
// first-order part of h(v*) - h(v'*) cancels. nu >= 2 -> QuadratureDivergence.
QuadResult S_eval(const KernelParams& p, const VelocityFunction& g, Vec3 v,
                  const QuadSpec& quad, std::optional<double> eps = std::nullopt);

// Remainder gain piece int Phi b 1_{theta<eps} h1(v'*) (h2(v') - h2(v)).
QuadResult q1_eval(const KernelParams& p, const VelocityFunction& h1,
                   const VelocityFunction& h2, Vec3 v, const QuadSpec& quad,
                   double eps);

// Bound |Q1| <= C_Q2 * m_b_NCO(eps_split) * c_phi * |h2|_{L1_gt} * |h1|_{W2inf}.
double q1_bound(const KernelParams& p, double c_q2, double l1_gamma_tilde_norm,
                double w2inf_norm);

// Measured C_Q2: sup over probe pairs of |Q1_eps| / (m_NCO c_phi |h2| |h1|).
double q1_constant(const KernelParams& p, const QuadSpec& quad);

}  // namespace kinlb
