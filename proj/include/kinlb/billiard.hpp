#pragma once
#include <vector>

#include "kinlb/domain.hpp"
#include "kinlb/vec.hpp"

namespace kinlb {

enum class ContactKind { Rebound, Rolling, Stop, Line };
enum class Terminal { Interior, StopSet, RebornCapExceeded };

struct PhaseState {
  Vec3 x{}, v{};
  double t = 0.0;
};

struct Event {
  double t = 0.0;
  Vec3 x{};
  Vec3 v_in{}, v_out{};
  Vec3 n{};
  double sin_theta = 0.0;  // |v.n|/|v|, angle from the tangent plane
  ContactKind kind = ContactKind::Rebound;
};

struct TrajectoryLog {
  PhaseState start{}, final{};
  std::vector<Event> events;
  Terminal terminal = Terminal::Interior;
  long long n_rebounds = 0;
};

struct BilliardOpts {
  double tol_boundary = 0.0;  // 0 = 1e-9 * bbox diameter
  double tol_grazing = 1e-7;
  long long max_rebounds_per_unit_time = 100000;
};

double default_tol_boundary(const DomainSpec& spec);

// Specular mirror at a boundary point. GrazingContact if the normal component
// is below tol_grazing * |v|.
Vec3 reflect(const DomainSpec& spec, Vec3 x, Vec3 v, const BilliardOpts& opts);

// Backward exit time: largest t with x - s v inside for all s < t, plus the
// exit point (|sdf| <= tol_boundary). Sphere tracing + terminal bisection.
struct BoundaryHit {
  double t = 0.0;
  Vec3 x{};
};
BoundaryHit time_to_boundary(const DomainSpec& spec, Vec3 x, Vec3 v,
                             const BilliardOpts& opts);

TrajectoryLog trace(const DomainSpec& spec, PhaseState start, double horizon,
                    const BilliardOpts& opts);

// State at time tau of the forward specular flow from start (no event log).
PhaseState flow(const DomainSpec& spec, PhaseState start, double tau,
                const BilliardOpts& opts, Terminal* term = nullptr);

// Characteristic X_{s,t}, V_{s,t}: position/velocity at time s of the
// billiard path through (x,v) at time t. Equals forward flow of (x,-v) for
// duration t-s with the final velocity negated.
PhaseState backward_characteristic(const DomainSpec& spec, Vec3 x, Vec3 v, double t,
                                   double s, const BilliardOpts& opts,
                                   Terminal* term = nullptr);

// Stability window of a near-tangential pass: speeds up to v_M keep their
// velocity within eps * |v| for this long (curvature constant c_tilde).
inline double grazing_time_scale(double eps, double c_tilde, double v_M) {
  return eps / (8.0 * c_tilde * v_M * v_M);
}
// Shell depth below the boundary that confines such a pass for time tau2.
inline double grazing_shell_depth(double eps, double tau2) {
  return tau2 * eps / 64.0;
}

struct GrazingVerdict {
  bool pass = false;
  bool vacuous = false;  // confinement hypothesis failed; implication holds trivially
  double t_eps = 0.0, l_eps = 0.0;
  double max_dev = 0.0;    // sup |V_s - v| over the conclusion window
  PhaseState witness{};    // violating state when !pass
};

// Checks the near-boundary velocity-stability implication on a logged trace:
// if the path stays in the shell {dist to boundary < l_eps} inside B(center,d)
// on [0,tau2], then sup_{s<=t_eps} |V_s - v0| < eps |v0|.
GrazingVerdict grazing_certificate(const DomainSpec& spec, Vec3 center, double d,
                                   double c_tilde, double v_M, double eps, double tau2,
                                   const TrajectoryLog& log);

// Near-tangent initial state: depth below the boundary point x0, velocity at
// the given inward tilt angle from the tangent plane.
PhaseState grazing_start(const DomainSpec& spec, Vec3 x0, double tilt, double speed,
                         double depth);

}  // namespace kinlb
