#pragma once
#include <optional>
#include <string>
#include <vector>

#include "kinlb/vec.hpp"

namespace kinlb {

enum class PrimKind { Ball, Ellipsoid, Capsule };

struct Primitive {
  PrimKind kind = PrimKind::Ball;
  Vec3 c{};      // ball/ellipsoid center, capsule endpoint 0
  Vec3 q{};      // capsule endpoint 1
  Vec3 semi{1, 1, 1};  // ellipsoid semi-axes
  double r = 1.0;      // ball radius / capsule radius
};

// Exact signed distance to the primitive surface (negative inside).
double prim_sdf(const Primitive& p, Vec3 x);
Vec3 prim_grad(const Primitive& p, Vec3 x);

// Implicit domain: smooth-min blend of exact primitive SDFs. The blend is
// 1-Lipschitz and underestimates true distance near seams by at most k/6, so
// -sdf is always a valid clearance lower bound; clearance_lb sharpens it with
// the per-part exact distances.
struct DomainSpec {
  std::string name;
  std::vector<Primitive> parts;
  double blend_k = 0.0;
  Aabb bbox{};
  bool analytic_gradient = true;
  double scale = 1.0;  // characteristic length used by tolerance rules

  double sdf(Vec3 x) const;
  Vec3 grad(Vec3 x) const;
  double clearance_lb(Vec3 x) const;
};

DomainSpec make_ball(double R, Vec3 c = {}, const std::string& name = "ball");
DomainSpec make_ellipsoid(Vec3 semi, const std::string& name = "ellipsoid");
DomainSpec make_capsule(Vec3 p0, Vec3 p1, double r, const std::string& name = "capsule");
DomainSpec make_dumbbell(double lobe_r, double half_sep, double k,
                         const std::string& name = "dumbbell");

struct SdfSample {
  double value = 0.0;
  Vec3 normal{};
  bool has_normal = false;
};

// Normal is the normalized gradient, attached only within tol_boundary of the
// surface. DegenerateGradient if the gradient collapses there.
SdfSample sdf_and_normal(const DomainSpec& spec, Vec3 x, double tol_boundary);

// Newton projection x <- x - f grad f / |grad f|^2 onto the zero set.
std::optional<Vec3> project_to_boundary(const DomainSpec& spec, Vec3 x, double tol_boundary,
                                        int max_iter = 80);

// Boundary points found by marching random interior rays to their exit and
// bisecting; every returned point has |sdf| <= tol_boundary.
std::vector<Vec3> sample_boundary(const DomainSpec& spec, int n, uint64_t seed,
                                  double tol_boundary);

struct InteriorSphereEstimate {
  double radius = 0.0;
  Vec3 witness{};  // boundary point whose interior tangent ball is smallest
};

// Uniform interior ball radius: min over sampled boundary points of the
// largest r with B(x_b - r n, r) inside the domain (bisection per sample).
InteriorSphereEstimate estimate_interior_sphere(const DomainSpec& spec, int n_samples,
                                                uint64_t seed);

double estimate_volume(const DomainSpec& spec, uint64_t n, uint64_t seed, int threads);
double sampled_diameter(const std::vector<Vec3>& pts);

// Number of 6-connected interior components on a grid_n^3 voxelization.
int flood_fill_components(const DomainSpec& spec, int grid_n);

// Greedy r-net: indices of an r-separated subset that covers every input
// point within r. Deterministic in input order.
std::vector<int> greedy_net(const std::vector<Vec3>& pts, double r);

}  // namespace kinlb
