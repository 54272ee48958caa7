#include "kinlb/charts.hpp"

#include <algorithm>
#include <cmath>
#include <thread>
#include <tuple>
#include <unordered_map>

#include "kinlb/error.hpp"
#include "kinlb/rng.hpp"

namespace kinlb {

namespace {

// Root of f(center + u e1 + w e2 - s n) = 0 in s: Newton with a bisection
// safeguard. s grows inward, so f is decreasing across the root.
bool phi_root(const DomainSpec& spec, const ChartPatch& ch, double u, double w,
              double slab, double* out) {
  Vec3 base = ch.center + u * ch.e1 + w * ch.e2;
  auto f = [&](double s) { return spec.sdf(base - s * ch.n); };
  double lo = -slab, hi = slab;
  double flo = f(lo), fhi = f(hi);
  if (!(flo > 0.0) || !(fhi < 0.0)) return false;
  double s = 0.0, fs = f(s);
  double tol = 1e-14 * std::max(1.0, spec.scale);
  for (int it = 0; it < 100; it++) {
    if (std::abs(fs) <= tol) {
      *out = s;
      return true;
    }
    if (fs > 0)
      lo = s;
    else
      hi = s;
    Vec3 g = spec.grad(base - s * ch.n);
    double dfds = -dot(g, ch.n);
    double ns = (std::abs(dfds) > 1e-12) ? s - fs / dfds : 0.5 * (lo + hi);
    if (!(ns > lo && ns < hi)) ns = 0.5 * (lo + hi);
    s = ns;
    fs = f(s);
  }
  *out = s;
  return std::abs(fs) <= 1e4 * tol;
}

}  // namespace

double chart_phi(const DomainSpec& spec, const ChartPatch& ch, double u, double w) {
  double s = 0.0;
  if (!phi_root(spec, ch, u, w, std::max(ch.radius, 1e-12), &s))
    fail_numerical("ChartFailure", "no graph height at (" + std::to_string(u) + "," +
                                       std::to_string(w) + ")");
  return s;
}

PhiDerivs chart_phi_derivs(const DomainSpec& spec, const ChartPatch& ch, double u, double w,
                           double d_scale) {
  PhiDerivs out{};
  double hg = 1e-4 * d_scale;
  double hh = 3e-3 * d_scale;
  out.phi = chart_phi(spec, ch, u, w);
  double pu1 = chart_phi(spec, ch, u + hg, w), pu0 = chart_phi(spec, ch, u - hg, w);
  double pw1 = chart_phi(spec, ch, u, w + hg), pw0 = chart_phi(spec, ch, u, w - hg);
  out.gu = (pu1 - pu0) / (2 * hg);
  out.gw = (pw1 - pw0) / (2 * hg);
  double qu1 = chart_phi(spec, ch, u + hh, w), qu0 = chart_phi(spec, ch, u - hh, w);
  double qw1 = chart_phi(spec, ch, u, w + hh), qw0 = chart_phi(spec, ch, u, w - hh);
  double qpp = chart_phi(spec, ch, u + hh, w + hh), qpm = chart_phi(spec, ch, u + hh, w - hh);
  double qmp = chart_phi(spec, ch, u - hh, w + hh), qmm = chart_phi(spec, ch, u - hh, w - hh);
  out.huu = (qu1 - 2 * out.phi + qu0) / (hh * hh);
  out.hww = (qw1 - 2 * out.phi + qw0) / (hh * hh);
  out.huw = (qpp - qpm - qmp + qmm) / (4 * hh * hh);
  return out;
}

ChartPatch probe_chart(const DomainSpec& spec, Vec3 x0, double d, int n_rings, int n_angles) {
  ChartPatch ch;
  ch.center = x0;
  Vec3 g = spec.grad(x0);
  double gn = norm(g);
  if (gn < 1e-8) {
    ch.admissible = false;
    return ch;
  }
  ch.n = g / gn;
  tangent_frame(ch.n, ch.e1, ch.e2);
  ch.radius = 3.0 * d;
  double tol_chart = 1e-6 * d;

  double s0 = 0.0;
  if (!phi_root(spec, ch, 0, 0, ch.radius, &s0) || std::abs(s0) > tol_chart) {
    ch.admissible = false;
    ch.phi_abs_max = std::abs(s0);
    return ch;
  }
  ch.phi_abs_max = std::abs(s0);

  bool ok = true;
  double hg = 1e-4 * d;
  auto grad_at = [&](double u, double w, double* mag) {
    double a, b, c, e;
    if (!phi_root(spec, ch, u + hg, w, ch.radius, &a) ||
        !phi_root(spec, ch, u - hg, w, ch.radius, &b) ||
        !phi_root(spec, ch, u, w + hg, ch.radius, &c) ||
        !phi_root(spec, ch, u, w - hg, ch.radius, &e))
      return false;
    double gu = (a - b) / (2 * hg), gw = (c - e) / (2 * hg);
    *mag = std::sqrt(gu * gu + gw * gw);
    return true;
  };

  // FD noise on the center gradient scales with the Newton residual over hg.
  double fd_noise = 1e-14 * std::max(1.0, spec.scale) / hg;
  double grad0_tol = std::max(1e-6, 2.0 * fd_noise);
  double g0 = 0.0;
  if (!grad_at(0, 0, &g0) || g0 > grad0_tol) ok = false;

  for (int jr = 1; jr <= n_rings && ok; jr++) {
    double r = ch.radius * double(jr) / n_rings;
    for (int ja = 0; ja < n_angles; ja++) {
      double a = 2 * 3.14159265358979323846 * ja / n_angles;
      double u = r * std::cos(a), w = r * std::sin(a);
      double s = 0.0, mg = 0.0;
      if (!phi_root(spec, ch, u, w, ch.radius, &s) || !grad_at(u, w, &mg)) {
        ok = false;
        break;
      }
      ch.phi_abs_max = std::max(ch.phi_abs_max, std::abs(s));
      ch.grad_bound = std::max(ch.grad_bound, mg);
    }
  }

  if (ok) {
    // Hessian sampled at the center and a mid ring.
    const double hs[5][2] = {{0, 0}, {0.5, 0}, {-0.5, 0}, {0, 0.5}, {0, -0.5}};
    for (auto& p : hs) {
      double u = p[0] * ch.radius, w = p[1] * ch.radius;
      try {
        PhiDerivs pd = chart_phi_derivs(spec, ch, u, w, d);
        double tr = pd.huu + pd.hww;
        double det = std::sqrt(std::max(0.0, (pd.huu - pd.hww) * (pd.huu - pd.hww) +
                                                 4 * pd.huw * pd.huw));
        double eig = 0.5 * (std::abs(tr) + det);
        ch.hess_bound = std::max(ch.hess_bound, eig);
      } catch (const KinError&) {
        ok = false;
        break;
      }
    }
  }

  // Interior tangent ball of the lemma: B(x0 - d/2 n, d/2) inside the domain.
  if (ok) {
    double cl = spec.clearance_lb(x0 - (0.5 * d) * ch.n);
    if (cl < 0.5 * d - 1e-7 * d) ok = false;
  }

  ch.admissible = ok && ch.grad_bound < 0.01;
  return ch;
}

double probe_delta(const DomainSpec& spec, double d_r, int probe_centers, uint64_t seed) {
  auto pts = sample_boundary(spec, probe_centers, seed, 1e-11 * spec.scale);
  double s = std::min(1.0, d_r);
  // Descend the power-of-two ladder from min{1, d_r}.
  s = std::exp2(std::floor(std::log2(s)));
  for (int k = 0; k < 30; k++, s *= 0.5) {
    bool all = true;
    for (const auto& p : pts) {
      ChartPatch ch = probe_chart(spec, p, s, 3, 8);
      if (!ch.admissible) {
        all = false;
        break;
      }
    }
    if (all) return s;
  }
  fail_numerical("ChartFailure", "no admissible chart scale found for " + spec.name);
}

ChartSuite build_charts(const DomainSpec& spec, const ChartBuildOpts& opts) {
  ChartSuite suite;
  InteriorSphereEstimate ise = estimate_interior_sphere(spec, 1500, opts.seed + 7);
  suite.metrics.d_r = ise.radius;
  suite.boundary_samples = sample_boundary(spec, opts.n_boundary, opts.seed, 1e-11 * spec.scale);
  suite.metrics.delta = probe_delta(spec, ise.radius, opts.probe_centers, opts.seed + 13);

  double d = opts.d > 0 ? opts.d : suite.metrics.delta;
  if (d >= ise.radius)
    fail_validation("InvalidScale", "chart scale d must stay below the interior ball radius");
  suite.metrics.d = d;

  suite.cover_center_idx = greedy_net(suite.boundary_samples, d / 8.0);

  size_t nc = suite.cover_center_idx.size();
  suite.charts.resize(nc);
  auto work = [&](size_t i0, size_t i1) {
    for (size_t i = i0; i < i1; i++)
      suite.charts[i] = probe_chart(spec, suite.boundary_samples[suite.cover_center_idx[i]],
                                    d, opts.n_rings, opts.n_angles);
  };
  int nt = std::max(1, opts.threads);
  if (nt == 1 || nc < 64) {
    work(0, nc);
  } else {
    std::vector<std::thread> pool;
    size_t per = (nc + nt - 1) / nt;
    for (int t = 0; t < nt; t++) {
      size_t a = t * per, b = std::min(nc, a + per);
      if (a >= b) break;
      pool.emplace_back(work, a, b);
    }
    for (auto& th : pool) th.join();
  }

  if (opts.require_admissible) {
    size_t bad = 0;
    for (const auto& c : suite.charts)
      if (!c.admissible) bad++;
    if (bad) fail_numerical("ChartFailure", std::to_string(bad) + " inadmissible charts");
  }

  // Cover verification over the defining sample set, hash-gridded at cell r.
  {
    double r = d / 8.0;
    std::vector<Vec3> centers;
    centers.reserve(nc);
    for (int idx : suite.cover_center_idx) centers.push_back(suite.boundary_samples[idx]);
    auto key = [&](Vec3 p) {
      auto q = [&](double v) { return (int64_t)std::floor(v / r); };
      return std::tuple<int64_t, int64_t, int64_t>(q(p.x), q(p.y), q(p.z));
    };
    struct H {
      size_t operator()(const std::tuple<int64_t, int64_t, int64_t>& t) const {
        auto [a, b, c] = t;
        return std::hash<int64_t>()(a * 73856093 ^ b * 19349663 ^ c * 83492791);
      }
    };
    std::unordered_map<std::tuple<int64_t, int64_t, int64_t>, std::vector<int>, H> grid;
    for (int i = 0; i < (int)centers.size(); i++) grid[key(centers[i])].push_back(i);
    for (const auto& p : suite.boundary_samples) {
      auto [cx, cy, cz] = key(p);
      bool covered = false;
      for (int64_t dx = -1; dx <= 1 && !covered; dx++)
        for (int64_t dy = -1; dy <= 1 && !covered; dy++)
          for (int64_t dz = -1; dz <= 1 && !covered; dz++) {
            auto it = grid.find({cx + dx, cy + dy, cz + dz});
            if (it == grid.end()) continue;
            for (int ci : it->second)
              if (dist(p, centers[ci]) <= r + 1e-12) {
                covered = true;
                break;
              }
          }
      if (!covered) fail_numerical("CoverageGap", "boundary sample escaped the d/8 cover");
    }
  }

  double max_hess = 0.0;
  for (const auto& c : suite.charts) max_hess = std::max(max_hess, c.hess_bound);
  suite.metrics.c_tilde = std::max(1.05 * max_hess,
                                   (1.0 + 1e-6) * std::max(4.0 / d, 1.0 / (2.0 * ise.radius)));
  suite.metrics.d_omega = sampled_diameter(suite.boundary_samples);
  suite.metrics.volume = estimate_volume(spec, opts.volume_samples, opts.seed + 29, nt);
  return suite;
}

HalfHeightResult half_height_check(const DomainSpec& spec, const ChartPatch& ch, Vec3 x,
                                   double tol) {
  HalfHeightResult res;
  Vec3 rel = x - ch.center;
  double x1 = dot(rel, ch.e1), x2 = dot(rel, ch.e2), x3 = -dot(rel, ch.n);
  double phi = chart_phi(spec, ch, x1, x2);
  res.rhs = 0.5 * (x3 - phi);
  res.lhs = spec.clearance_lb(x);
  if (res.lhs >= res.rhs - tol) {
    res.holds = true;
    return res;
  }
  // Explicit patch-distance minimization; a closer graph point is a witness
  // of genuine violation.
  res.used_explicit = true;
  double best = 1e300;
  int N = 24;
  double bu = 0, bw = 0;
  for (int i = -N; i <= N; i++)
    for (int j = -N; j <= N; j++) {
      double u = ch.radius * i / N, w = ch.radius * j / N;
      if (u * u + w * w > ch.radius * ch.radius) continue;
      double s;
      if (!phi_root(spec, ch, u, w, ch.radius, &s)) continue;
      double dd = dist(x, ch.center + u * ch.e1 + w * ch.e2 - s * ch.n);
      if (dd < best) {
        best = dd;
        bu = u;
        bw = w;
      }
    }
  double step = ch.radius / N;
  for (int it = 0; it < 40; it++) {
    bool improved = false;
    const double dirs[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
    for (auto& dd2 : dirs) {
      double u = bu + dd2[0] * step, w = bw + dd2[1] * step;
      if (u * u + w * w > ch.radius * ch.radius) continue;
      double s;
      if (!phi_root(spec, ch, u, w, ch.radius, &s)) continue;
      double dd = dist(x, ch.center + u * ch.e1 + w * ch.e2 - s * ch.n);
      if (dd < best) {
        best = dd;
        bu = u;
        bw = w;
        improved = true;
      }
    }
    if (!improved) step *= 0.5;
    if (step < 1e-9 * ch.radius) break;
  }
  res.lhs = best;
  res.holds = best >= res.rhs - tol;
  return res;
}

}  // namespace kinlb
