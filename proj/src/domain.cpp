#include "kinlb/domain.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "kinlb/error.hpp"
#include "kinlb/rng.hpp"

namespace kinlb {

namespace {

double ball_sdf(const Primitive& p, Vec3 x) { return dist(x, p.c) - p.r; }

Vec3 ball_grad(const Primitive& p, Vec3 x) {
  Vec3 d = x - p.c;
  double n = norm(d);
  if (n < 1e-300) return {0, 0, 1};
  return d / n;
}

// Nearest boundary point of an axis-aligned ellipsoid at the origin:
// q_i = a_i^2 p_i / (a_i^2 + t) with sum (a_i p_i)^2/(a_i^2+t)^2 = 1.
// g(t) decreases from +inf to -1 on (-min a_i^2, inf), so the root is unique
// and bracketed bisection is exact to machine precision.
Vec3 ellipsoid_closest(Vec3 semi, Vec3 p) {
  double a2[3] = {semi.x * semi.x, semi.y * semi.y, semi.z * semi.z};
  double pc[3] = {p.x, p.y, p.z};
  double m2 = -1.0;
  for (int i = 0; i < 3; i++)
    if (pc[i] != 0.0) m2 = (m2 < 0) ? a2[i] : std::min(m2, a2[i]);
  if (m2 < 0) {
    // Center point: nearest boundary point sits on the shortest axis.
    double s[3] = {semi.x, semi.y, semi.z};
    int k = 0;
    if (s[1] < s[k]) k = 1;
    if (s[2] < s[k]) k = 2;
    Vec3 q{};
    if (k == 0) q.x = s[0];
    else if (k == 1) q.y = s[1];
    else q.z = s[2];
    return q;
  }
  auto g = [&](double t) {
    double s = -1.0;
    for (int i = 0; i < 3; i++) {
      if (pc[i] == 0.0) continue;
      double d = a2[i] + t;
      double term = a2[i] * pc[i] / d;
      s += term * pc[i] / d;
    }
    return s;
  };
  double lo = -m2, hi = std::max(1.0, norm(p)) * std::max({semi.x, semi.y, semi.z});
  while (g(hi) > 0) hi *= 2.0;
  // Move lo off the pole until g(lo) > 0.
  double step = m2 * 0.5;
  while (true) {
    double cand = -m2 + step;
    if (cand >= hi) { step *= 0.5; continue; }
    if (g(cand) > 0) { lo = cand; break; }
    step *= 0.5;
    if (step < 1e-300) { lo = -m2 + 1e-300; break; }
  }
  for (int it = 0; it < 200; it++) {
    double mid = 0.5 * (lo + hi);
    if (mid == lo || mid == hi) break;
    (g(mid) > 0 ? lo : hi) = mid;
  }
  double t = 0.5 * (lo + hi);
  return {a2[0] * pc[0] / (a2[0] + t), a2[1] * pc[1] / (a2[1] + t),
          a2[2] * pc[2] / (a2[2] + t)};
}

double ellipsoid_sdf(const Primitive& pr, Vec3 x) {
  Vec3 p = x - pr.c;
  Vec3 q = ellipsoid_closest(pr.semi, p);
  double d = dist(p, q);
  double s = (p.x * p.x) / (pr.semi.x * pr.semi.x) + (p.y * p.y) / (pr.semi.y * pr.semi.y) +
             (p.z * p.z) / (pr.semi.z * pr.semi.z);
  return s < 1.0 ? -d : d;
}

Vec3 ellipsoid_grad(const Primitive& pr, Vec3 x) {
  Vec3 p = x - pr.c;
  Vec3 q = ellipsoid_closest(pr.semi, p);
  Vec3 d = p - q;
  double n = norm(d);
  double s = (p.x * p.x) / (pr.semi.x * pr.semi.x) + (p.y * p.y) / (pr.semi.y * pr.semi.y) +
             (p.z * p.z) / (pr.semi.z * pr.semi.z);
  if (n < 1e-14) {
    // On the surface the outward normal survives as grad of the level fn.
    Vec3 g{p.x / (pr.semi.x * pr.semi.x), p.y / (pr.semi.y * pr.semi.y),
           p.z / (pr.semi.z * pr.semi.z)};
    double gn = norm(g);
    return gn < 1e-300 ? Vec3{0, 0, 1} : g / gn;
  }
  return (s < 1.0 ? -1.0 : 1.0) * (d / n);
}

double capsule_sdf(const Primitive& p, Vec3 x) {
  Vec3 ab = p.q - p.c;
  double t = clampd(dot(x - p.c, ab) / norm2(ab), 0.0, 1.0);
  return dist(x, p.c + t * ab) - p.r;
}

Vec3 capsule_grad(const Primitive& p, Vec3 x) {
  Vec3 ab = p.q - p.c;
  double t = clampd(dot(x - p.c, ab) / norm2(ab), 0.0, 1.0);
  Vec3 d = x - (p.c + t * ab);
  double n = norm(d);
  if (n < 1e-300) return {0, 0, 1};
  return d / n;
}

Aabb prim_bbox(const Primitive& p) {
  switch (p.kind) {
    case PrimKind::Ball:
      return {p.c - Vec3{p.r, p.r, p.r}, p.c + Vec3{p.r, p.r, p.r}};
    case PrimKind::Ellipsoid:
      return {p.c - p.semi, p.c + p.semi};
    case PrimKind::Capsule: {
      Vec3 lo{std::min(p.c.x, p.q.x) - p.r, std::min(p.c.y, p.q.y) - p.r,
              std::min(p.c.z, p.q.z) - p.r};
      Vec3 hi{std::max(p.c.x, p.q.x) + p.r, std::max(p.c.y, p.q.y) + p.r,
              std::max(p.c.z, p.q.z) + p.r};
      return {lo, hi};
    }
  }
  return {};
}

// Cubic smooth min; blend weight w in [0,1/2] keeps the gradient a convex
// combination of the operand gradients (so 1-Lipschitz is preserved).
double smin(double d1, double d2, double k, double* w_far = nullptr) {
  if (k <= 0.0) {
    if (w_far) *w_far = 0.0;
    return std::min(d1, d2);
  }
  double h = std::max(0.0, 1.0 - std::abs(d1 - d2) / k);
  if (w_far) *w_far = 0.5 * h * h;
  return std::min(d1, d2) - (k / 6.0) * h * h * h;
}

void finalize_bbox(DomainSpec& d) {
  Aabb b = prim_bbox(d.parts[0]);
  for (size_t i = 1; i < d.parts.size(); i++) {
    Aabb pb = prim_bbox(d.parts[i]);
    b.lo = {std::min(b.lo.x, pb.lo.x), std::min(b.lo.y, pb.lo.y), std::min(b.lo.z, pb.lo.z)};
    b.hi = {std::max(b.hi.x, pb.hi.x), std::max(b.hi.y, pb.hi.y), std::max(b.hi.z, pb.hi.z)};
  }
  // Blending can only deepen the interior by k/6.
  double m = d.blend_k / 6.0 + 1e-9;
  b.lo -= Vec3{m, m, m};
  b.hi += Vec3{m, m, m};
  d.bbox = b;
  d.scale = 0.5 * norm(b.hi - b.lo);
}

}  // namespace

double prim_sdf(const Primitive& p, Vec3 x) {
  switch (p.kind) {
    case PrimKind::Ball: return ball_sdf(p, x);
    case PrimKind::Ellipsoid: return ellipsoid_sdf(p, x);
    case PrimKind::Capsule: return capsule_sdf(p, x);
  }
  return 0.0;
}

Vec3 prim_grad(const Primitive& p, Vec3 x) {
  switch (p.kind) {
    case PrimKind::Ball: return ball_grad(p, x);
    case PrimKind::Ellipsoid: return ellipsoid_grad(p, x);
    case PrimKind::Capsule: return capsule_grad(p, x);
  }
  return {0, 0, 1};
}

double DomainSpec::sdf(Vec3 x) const {
  double f = prim_sdf(parts[0], x);
  for (size_t i = 1; i < parts.size(); i++) f = smin(f, prim_sdf(parts[i], x), blend_k);
  return f;
}

Vec3 DomainSpec::grad(Vec3 x) const {
  double f = prim_sdf(parts[0], x);
  Vec3 g = prim_grad(parts[0], x);
  for (size_t i = 1; i < parts.size(); i++) {
    double fi = prim_sdf(parts[i], x);
    Vec3 gi = prim_grad(parts[i], x);
    double w = 0.0;
    double fn = smin(f, fi, blend_k, &w);
    Vec3 gnear = (f <= fi) ? g : gi;
    Vec3 gfar = (f <= fi) ? gi : g;
    g = (1.0 - w) * gnear + w * gfar;
    f = fn;
  }
  return g;
}

double DomainSpec::clearance_lb(Vec3 x) const {
  double best = -sdf(x);
  for (const auto& p : parts) best = std::max(best, -prim_sdf(p, x));
  return best;
}

DomainSpec make_ball(double R, Vec3 c, const std::string& name) {
  DomainSpec d;
  d.name = name;
  Primitive p;
  p.kind = PrimKind::Ball;
  p.c = c;
  p.r = R;
  d.parts.push_back(p);
  finalize_bbox(d);
  return d;
}

DomainSpec make_ellipsoid(Vec3 semi, const std::string& name) {
  DomainSpec d;
  d.name = name;
  Primitive p;
  p.kind = PrimKind::Ellipsoid;
  p.semi = semi;
  d.parts.push_back(p);
  finalize_bbox(d);
  return d;
}

DomainSpec make_capsule(Vec3 p0, Vec3 p1, double r, const std::string& name) {
  DomainSpec d;
  d.name = name;
  Primitive p;
  p.kind = PrimKind::Capsule;
  p.c = p0;
  p.q = p1;
  p.r = r;
  d.parts.push_back(p);
  finalize_bbox(d);
  return d;
}

DomainSpec make_dumbbell(double lobe_r, double half_sep, double k, const std::string& name) {
  DomainSpec d;
  d.name = name;
  d.blend_k = k;
  Primitive a, b;
  a.kind = b.kind = PrimKind::Ball;
  a.r = b.r = lobe_r;
  a.c = {-half_sep, 0, 0};
  b.c = {half_sep, 0, 0};
  d.parts.push_back(a);
  d.parts.push_back(b);
  finalize_bbox(d);
  return d;
}

SdfSample sdf_and_normal(const DomainSpec& spec, Vec3 x, double tol_boundary) {
  SdfSample s;
  s.value = spec.sdf(x);
  if (std::abs(s.value) < tol_boundary) {
    Vec3 g = spec.grad(x);
    double n = norm(g);
    if (n < 1e-8) fail_numerical("DegenerateGradient", "gradient collapsed at boundary");
    s.normal = g / n;
    s.has_normal = true;
  }
  return s;
}

std::optional<Vec3> project_to_boundary(const DomainSpec& spec, Vec3 x, double tol_boundary,
                                        int max_iter) {
  for (int it = 0; it < max_iter; it++) {
    double f = spec.sdf(x);
    if (std::abs(f) <= tol_boundary) return x;
    Vec3 g = spec.grad(x);
    double g2 = norm2(g);
    if (g2 < 1e-16) return std::nullopt;
    x -= (f / g2) * g;
  }
  return std::abs(spec.sdf(x)) <= tol_boundary ? std::optional<Vec3>(x) : std::nullopt;
}

namespace {

// Exit point of the ray x + t dir from an interior start, by conservative
// sphere tracing plus terminal bisection.
std::optional<Vec3> ray_exit(const DomainSpec& spec, Vec3 x, Vec3 dir, double tol_boundary) {
  double t = 0.0;
  double t_in = 0.0;
  double tmax = 4.0 * norm(spec.bbox.hi - spec.bbox.lo) + 1.0;
  double floor_step = 1e-7 * spec.scale;
  for (int it = 0; it < 100000; it++) {
    double f = spec.sdf(x + t * dir);
    if (f >= 0.0) {
      // Bisect [t_in, t].
      double lo = t_in, hi = t;
      for (int b = 0; b < 200; b++) {
        double mid = 0.5 * (lo + hi);
        if (mid == lo || mid == hi) break;
        (spec.sdf(x + mid * dir) < 0 ? lo : hi) = mid;
        if (std::abs(spec.sdf(x + 0.5 * (lo + hi) * dir)) <= tol_boundary) break;
      }
      return x + 0.5 * (lo + hi) * dir;
    }
    t_in = t;
    t += std::max(0.9 * (-f), floor_step);
    if (t > tmax) return std::nullopt;
  }
  return std::nullopt;
}

}  // namespace

std::vector<Vec3> sample_boundary(const DomainSpec& spec, int n, uint64_t seed,
                                  double tol_boundary) {
  std::vector<Vec3> out;
  out.reserve(n);
  Rng rng(seed, 0xb0);
  int guard = 0;
  while ((int)out.size() < n && guard < 400 * n + 10000) {
    guard++;
    Vec3 p = rng.in_box(spec.bbox);
    if (spec.sdf(p) >= -1e-6 * spec.scale) continue;
    Vec3 dir = rng.on_sphere();
    auto hit = ray_exit(spec, p, dir, tol_boundary);
    if (hit) out.push_back(*hit);
  }
  if ((int)out.size() < n)
    fail_numerical("CoverageGap", "boundary sampling starved; SDF may be defective");
  return out;
}

InteriorSphereEstimate estimate_interior_sphere(const DomainSpec& spec, int n_samples,
                                                uint64_t seed) {
  auto pts = sample_boundary(spec, n_samples, seed, 1e-11 * spec.scale);
  double r_max = 0.75 * norm(spec.bbox.hi - spec.bbox.lo);
  double slack = 1e-9 * spec.scale;
  InteriorSphereEstimate best;
  best.radius = r_max;
  for (const auto& xb : pts) {
    Vec3 g = spec.grad(xb);
    double gn = norm(g);
    if (gn < 1e-8) continue;
    Vec3 nrm = g / gn;
    auto fits = [&](double r) { return spec.clearance_lb(xb - r * nrm) >= r - slack; };
    double lo = 0.0, hi = r_max;
    if (fits(hi)) { lo = hi; }
    else {
      for (int it = 0; it < 60; it++) {
        double mid = 0.5 * (lo + hi);
        (fits(mid) ? lo : hi) = mid;
      }
    }
    if (lo < best.radius) {
      best.radius = lo;
      best.witness = xb;
    }
  }
  return best;
}

double estimate_volume(const DomainSpec& spec, uint64_t n, uint64_t seed, int threads) {
  Vec3 ext = spec.bbox.hi - spec.bbox.lo;
  double vbox = ext.x * ext.y * ext.z;
  double hits = deterministic_sum(
      n,
      [&](uint64_t i) {
        Rng r(seed, 0x701);
        r.ctr = i * 3;
        Vec3 p = r.in_box(spec.bbox);
        return spec.sdf(p) < 0 ? 1.0 : 0.0;
      },
      threads);
  return vbox * hits / double(n);
}

double sampled_diameter(const std::vector<Vec3>& pts) {
  size_t n = pts.size();
  size_t stride = n > 2048 ? (n + 2047) / 2048 : 1;
  double best = 0.0;
  for (size_t i = 0; i < n; i += stride)
    for (size_t j = i + stride; j < n; j += stride)
      best = std::max(best, dist(pts[i], pts[j]));
  return best;
}

int flood_fill_components(const DomainSpec& spec, int grid_n) {
  int N = grid_n;
  std::vector<int8_t> inside(size_t(N) * N * N, 0);
  Vec3 ext = spec.bbox.hi - spec.bbox.lo;
  auto at = [&](int i, int j, int k) -> size_t {
    return (size_t(i) * N + j) * N + k;
  };
  for (int i = 0; i < N; i++)
    for (int j = 0; j < N; j++)
      for (int k = 0; k < N; k++) {
        Vec3 p = spec.bbox.lo + Vec3{(i + 0.5) / N * ext.x, (j + 0.5) / N * ext.y,
                                     (k + 0.5) / N * ext.z};
        inside[at(i, j, k)] = spec.sdf(p) < 0 ? 1 : 0;
      }
  std::vector<int> label(inside.size(), -1);
  int comps = 0;
  std::vector<size_t> stack;
  for (int i = 0; i < N; i++)
    for (int j = 0; j < N; j++)
      for (int k = 0; k < N; k++) {
        size_t idx = at(i, j, k);
        if (!inside[idx] || label[idx] >= 0) continue;
        comps++;
        stack.push_back(idx);
        label[idx] = comps;
        while (!stack.empty()) {
          size_t cur = stack.back();
          stack.pop_back();
          int ci = int(cur / (size_t(N) * N)), cj = int((cur / N) % N), ck = int(cur % N);
          const int d[6][3] = {{1,0,0},{-1,0,0},{0,1,0},{0,-1,0},{0,0,1},{0,0,-1}};
          for (auto& dd : d) {
            int ni = ci + dd[0], nj = cj + dd[1], nk = ck + dd[2];
            if (ni < 0 || nj < 0 || nk < 0 || ni >= N || nj >= N || nk >= N) continue;
            size_t nidx = at(ni, nj, nk);
            if (inside[nidx] && label[nidx] < 0) {
              label[nidx] = comps;
              stack.push_back(nidx);
            }
          }
        }
      }
  return comps;
}

std::vector<int> greedy_net(const std::vector<Vec3>& pts, double r) {
  std::vector<int> kept;
  if (pts.empty()) return kept;
  double cell = r;
  auto key = [&](Vec3 p) {
    auto q = [&](double v) { return (int64_t)std::floor(v / cell); };
    return std::tuple<int64_t, int64_t, int64_t>(q(p.x), q(p.y), q(p.z));
  };
  struct H {
    size_t operator()(const std::tuple<int64_t, int64_t, int64_t>& t) const {
      auto [a, b, c] = t;
      return std::hash<int64_t>()(a * 73856093 ^ b * 19349663 ^ c * 83492791);
    }
  };
  std::unordered_map<std::tuple<int64_t, int64_t, int64_t>, std::vector<int>, H> grid;
  for (int i = 0; i < (int)pts.size(); i++) {
    auto [cx, cy, cz] = key(pts[i]);
    bool covered = false;
    for (int64_t dx = -1; dx <= 1 && !covered; dx++)
      for (int64_t dy = -1; dy <= 1 && !covered; dy++)
        for (int64_t dz = -1; dz <= 1 && !covered; dz++) {
          auto it = grid.find({cx + dx, cy + dy, cz + dz});
          if (it == grid.end()) continue;
          for (int j : it->second)
            if (dist(pts[i], pts[j]) <= r) {
              covered = true;
              break;
            }
        }
    if (!covered) {
      kept.push_back(i);
      grid[{cx, cy, cz}].push_back(i);
    }
  }
  return kept;
}

}  // namespace kinlb
