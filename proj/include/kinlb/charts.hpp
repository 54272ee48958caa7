#pragma once
#include <cstdint>
#include <vector>

#include "kinlb/domain.hpp"
#include "kinlb/vec.hpp"

namespace kinlb {

// Boundary graph patch at a cover center: the surface near center is the
// graph u3 = phi(u1,u2) in the frame {e1, e2, -n} (height measured inward),
// with phi(0,0) = 0 and grad phi(0,0) = 0.
struct ChartPatch {
  Vec3 center{};
  Vec3 n{};  // outward unit normal
  Vec3 e1{}, e2{};
  double radius = 0.0;       // patch disk radius (3d)
  double grad_bound = 0.0;   // max sampled |grad phi| over the disk
  double hess_bound = 0.0;   // max sampled Hessian norm
  double phi_abs_max = 0.0;
  bool admissible = false;   // grad_bound < 1/100 and graph checks passed
};

struct DomainMetrics {
  double d = 0.0;        // working chart/landmark scale
  double delta = 0.0;    // largest probed scale with admissible charts
  double d_r = 0.0;      // uniform interior ball radius
  double c_tilde = 0.0;  // curvature bound, > max{4/d, 1/(2 d_r)}
  double d_omega = 0.0;  // domain diameter
  double volume = 0.0;
};

struct ChartBuildOpts {
  double d = 0.0;           // 0 = use the probed admissible scale
  int n_boundary = 20000;
  int n_rings = 4;          // validation rings per patch
  int n_angles = 12;
  uint64_t seed = 1;
  int threads = 1;
  bool require_admissible = false;  // error on inadmissible patches
  int probe_centers = 24;           // centers per scale in the delta probe
  uint64_t volume_samples = 200000;
};

struct ChartSuite {
  std::vector<ChartPatch> charts;
  DomainMetrics metrics;
  std::vector<Vec3> boundary_samples;
  std::vector<int> cover_center_idx;  // indices into boundary_samples
};

// Height of the boundary graph at in-patch coordinates (u,w): safeguarded
// Newton along -n using the analytic SDF gradient. Throws ChartFailure when
// no root exists within the patch slab.
double chart_phi(const DomainSpec& spec, const ChartPatch& ch, double u, double w);

struct PhiDerivs {
  double phi;
  double gu, gw;              // first derivatives
  double huu, hww, huw;       // second derivatives
};
PhiDerivs chart_phi_derivs(const DomainSpec& spec, const ChartPatch& ch, double u, double w,
                           double d_scale);

// Builds the patch frame at a boundary point and samples its validity over
// the 3d disk. Does not throw on an inadmissible patch; admissible reports it.
ChartPatch probe_chart(const DomainSpec& spec, Vec3 x0, double d, int n_rings, int n_angles);

// Largest scale 2^-k descending from min{1, d_r} at which probe charts
// succeed on every probed center.
double probe_delta(const DomainSpec& spec, double d_r, int probe_centers, uint64_t seed);

ChartSuite build_charts(const DomainSpec& spec, const ChartBuildOpts& opts);

// Half-height inequality at an interior point x under chart ch:
// dist(x, patch boundary) >= (x3 - phi(x1,x2)) / 2. The cheap certificate
// -sdf(x) >= rhs is sufficient; on failure the patch distance is minimized
// explicitly before declaring a violation.
struct HalfHeightResult {
  bool holds = false;
  double lhs = 0.0;  // certified patch-distance lower bound used
  double rhs = 0.0;
  bool used_explicit = false;
};
HalfHeightResult half_height_check(const DomainSpec& spec, const ChartPatch& ch, Vec3 x,
                                   double tol);

}  // namespace kinlb
