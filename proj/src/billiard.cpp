#include "kinlb/billiard.hpp"

#include <algorithm>
#include <cmath>

#include "kinlb/error.hpp"

namespace kinlb {

namespace {

double bbox_diam(const DomainSpec& spec) { return norm(spec.bbox.hi - spec.bbox.lo); }

double tol_b(const DomainSpec& spec, const BilliardOpts& o) {
  return o.tol_boundary > 0 ? o.tol_boundary : 1e-9 * bbox_diam(spec);
}

// First boundary crossing of x + t dir, |dir| = 1, from a strictly interior
// start. Conservative sphere tracing cannot skip a crossing except through the
// probe floor, which is far below every feature size used in the suite.
struct RayHit {
  double t = 0.0;
  Vec3 x{};
  bool found = false;
};

RayHit march_crossing(const DomainSpec& spec, Vec3 x, Vec3 dir, double tol) {
  RayHit hit;
  double diam = bbox_diam(spec);
  double floor_step = 1e-7 * diam;
  double tmax = 4.0 * diam;
  double t = 0.0, t_in = 0.0;
  for (long long it = 0; it < 2000000; it++) {
    double f = spec.sdf(x + t * dir);
    if (f >= 0.0) {
      double lo = t_in, hi = t;
      for (int b = 0; b < 200; b++) {
        double mid = 0.5 * (lo + hi);
        if (mid == lo || mid == hi) break;
        double fm = spec.sdf(x + mid * dir);
        if (std::abs(fm) <= tol) {
          hit.t = mid;
          hit.x = x + mid * dir;
          hit.found = true;
          return hit;
        }
        (fm < 0 ? lo : hi) = mid;
      }
      double mid = 0.5 * (lo + hi);
      hit.t = mid;
      hit.x = x + mid * dir;
      hit.found = true;
      return hit;
    }
    t_in = t;
    t += std::max(0.9 * (-f), floor_step);
    if (t > tmax) return hit;
  }
  return hit;
}

// After a reflection the start sits within tol of the boundary; find a step
// along the outgoing ray that re-enters at the expected descent rate so the
// marcher starts strictly inside. Returns false for degenerate tangencies.
bool liftoff(const DomainSpec& spec, Vec3 x, Vec3 v, double* t_kick) {
  double diam = bbox_diam(spec);
  double vn = norm(v);
  Vec3 g = spec.grad(x);
  double c = std::abs(dot(v / vn, normalized(g)));
  double t = 1e-6 * diam / vn;
  double t_min = 1e-18 * diam / vn;
  while (t > t_min) {
    if (spec.sdf(x + t * v) <= -0.3 * c * vn * t) {
      *t_kick = t;
      return true;
    }
    t *= 0.5;
  }
  return false;
}

}  // namespace

double default_tol_boundary(const DomainSpec& spec) { return 1e-9 * bbox_diam(spec); }

Vec3 reflect(const DomainSpec& spec, Vec3 x, Vec3 v, const BilliardOpts& opts) {
  double tol = tol_b(spec, opts);
  if (std::abs(spec.sdf(x)) > tol)
    fail_validation("PreconditionViolated", "reflect needs a boundary point");
  Vec3 g = spec.grad(x);
  double gn = norm(g);
  if (gn < 1e-8) fail_numerical("DegenerateGradient", "no normal at contact");
  Vec3 n = g / gn;
  double vn = dot(v, n);
  if (std::abs(vn) < opts.tol_grazing * norm(v))
    fail_numerical("GrazingContact", "normal component below grazing tolerance");
  return v - 2.0 * vn * n;
}

BoundaryHit time_to_boundary(const DomainSpec& spec, Vec3 x, Vec3 v,
                             const BilliardOpts& opts) {
  if (norm(v) == 0.0) fail_validation("PreconditionViolated", "zero velocity");
  double tol = tol_b(spec, opts);
  Vec3 dir = -v / norm(v);
  double f0 = spec.sdf(x);
  if (f0 > tol) fail_validation("PreconditionViolated", "start outside the closure");
  Vec3 x_start = x;
  double t_pre = 0.0;
  if (f0 > -tol) {
    // On-boundary start: only meaningful when the backward ray enters.
    double kick = 0.0;
    if (!liftoff(spec, x, dir, &kick)) {
      BoundaryHit h;
      h.t = 0.0;
      h.x = x;
      return h;
    }
    x_start = x + kick * dir;
    t_pre = kick;
  }
  RayHit hit = march_crossing(spec, x_start, dir, tol);
  if (!hit.found) fail_numerical("NoExit", "backward ray never left the domain");
  BoundaryHit h;
  h.t = (t_pre + hit.t) / norm(v);
  h.x = hit.x;
  return h;
}

namespace {

ContactKind classify_contact(const DomainSpec& spec, Vec3 x, Vec3 v,
                             const BilliardOpts& opts, Vec3* n_out, double* sin_out) {
  Vec3 g = spec.grad(x);
  double gn = norm(g);
  if (gn < 1e-8) fail_numerical("DegenerateGradient", "no normal at contact");
  Vec3 n = g / gn;
  *n_out = n;
  double vn = dot(v, n);
  double speed = norm(v);
  *sin_out = std::abs(vn) / speed;
  if (vn > opts.tol_grazing * speed) return ContactKind::Rebound;
  if (vn < -opts.tol_grazing * speed) return ContactKind::Line;
  // Grazing: dwell test along the forward ray.
  double diam = bbox_diam(spec);
  double tol = tol_b(spec, opts);
  bool stays = true;
  for (int i = 0; i < 8; i++) {
    double s = std::pow(10.0, -9.0 + 3.0 * i / 7.0) * diam / speed;
    if (spec.sdf(x + s * v) > 10.0 * tol) {
      stays = false;
      break;
    }
  }
  return stays ? ContactKind::Rolling : ContactKind::Stop;
}

}  // namespace

TrajectoryLog trace(const DomainSpec& spec, PhaseState start, double horizon,
                    const BilliardOpts& opts) {
  TrajectoryLog log;
  log.start = start;
  double tol = tol_b(spec, opts);
  double f0 = spec.sdf(start.x);
  if (f0 > tol) fail_validation("PreconditionViolated", "start outside the closure");
  long long cap = opts.max_rebounds_per_unit_time *
                  (long long)std::max(1.0, std::ceil(horizon));
  Vec3 x = start.x, v = start.v;
  double t = start.t;
  double t_end = start.t + horizon;

  while (true) {
    double speed = norm(v);
    if (speed == 0.0) {
      log.final = {x, v, t_end};
      log.terminal = Terminal::Interior;
      return log;
    }
    // Ensure a strictly interior launch point.
    Vec3 x_launch = x;
    double t_launch = t;
    if (spec.sdf(x) > -tol) {
      double kick = 0.0;
      if (!liftoff(spec, x, v, &kick)) {
        log.terminal = Terminal::StopSet;
        log.final = {x, v, t};
        return log;
      }
      double dt = kick;
      if (t + dt >= t_end) {
        log.final = {x + (t_end - t) * v, v, t_end};
        log.terminal = Terminal::Interior;
        return log;
      }
      x_launch = x + kick * v;
      t_launch = t + kick;
    }
    RayHit hit = march_crossing(spec, x_launch, v / speed, tol);
    if (!hit.found) fail_numerical("NoExit", "flight never reached the boundary");
    double t_hit = t_launch + hit.t / speed;
    if (t_hit >= t_end) {
      log.final = {x_launch + (t_end - t_launch) * v, v, t_end};
      log.terminal = Terminal::Interior;
      return log;
    }
    Event ev;
    ev.t = t_hit;
    ev.x = hit.x;
    ev.v_in = v;
    ev.kind = classify_contact(spec, hit.x, v, opts, &ev.n, &ev.sin_theta);
    switch (ev.kind) {
      case ContactKind::Rebound:
        ev.v_out = v - 2.0 * dot(v, ev.n) * ev.n;
        log.n_rebounds++;
        break;
      case ContactKind::Rolling:
      case ContactKind::Line:
        ev.v_out = v;
        break;
      case ContactKind::Stop:
        ev.v_out = v;
        log.events.push_back(ev);
        log.terminal = Terminal::StopSet;
        log.final = {hit.x, v, t_hit};
        return log;
    }
    log.events.push_back(ev);
    if (log.n_rebounds > cap) {
      log.terminal = Terminal::RebornCapExceeded;
      log.final = {hit.x, ev.v_out, t_hit};
      return log;
    }
    x = hit.x;
    v = ev.v_out;
    t = t_hit;
  }
}

PhaseState flow(const DomainSpec& spec, PhaseState start, double tau,
                const BilliardOpts& opts, Terminal* term) {
  TrajectoryLog log = trace(spec, start, tau, opts);
  if (term) *term = log.terminal;
  return log.final;
}

PhaseState backward_characteristic(const DomainSpec& spec, Vec3 x, Vec3 v, double t,
                                   double s, const BilliardOpts& opts, Terminal* term) {
  if (!(0.0 <= s && s <= t))
    fail_validation("PreconditionViolated", "need 0 <= s <= t");
  PhaseState rev{x, -v, 0.0};
  PhaseState end = flow(spec, rev, t - s, opts, term);
  return {end.x, -end.v, s};
}

GrazingVerdict grazing_certificate(const DomainSpec& spec, Vec3 center, double d,
                                   double c_tilde, double v_M, double eps, double tau2,
                                   const TrajectoryLog& log) {
  GrazingVerdict out;
  out.t_eps = grazing_time_scale(eps, c_tilde, v_M);
  out.l_eps = grazing_shell_depth(eps, tau2);
  if (!(tau2 > 0.0 && tau2 <= out.t_eps))
    fail_validation("PreconditionViolated", "need 0 < tau2 <= t_eps");

  // Segment endpoints within [start, tau2]: distance to center is convex
  // along each flight, so endpoint checks bound the whole path.
  std::vector<PhaseState> nodes;
  nodes.push_back(log.start);
  for (const auto& ev : log.events) {
    nodes.push_back({ev.x, ev.v_in, ev.t});
    nodes.push_back({ev.x, ev.v_out, ev.t});
  }
  nodes.push_back(log.final);
  double t0 = log.start.t;
  for (const auto& nd : nodes) {
    if (nd.t - t0 > tau2 + 1e-15) continue;
    if (dist(nd.x, center) > d * (1.0 + 1e-9))
      fail_validation("PreconditionViolated", "trajectory leaves the chart ball");
    if (norm(nd.v) > v_M * (1.0 + 1e-9))
      fail_validation("PreconditionViolated", "speed exceeds v_M");
  }

  // Confinement hypothesis: the path stays inside the near-boundary shell.
  // Needs an upper bound on boundary distance, taken from an actual projected
  // boundary point.
  bool confined = true;
  auto shell_ok = [&](Vec3 p) {
    auto bp = project_to_boundary(spec, p, 1e-10 * spec.scale);
    if (!bp) return false;
    return dist(p, *bp) < out.l_eps;
  };
  for (size_t i = 0; i + 1 < nodes.size() && confined; i++) {
    if (nodes[i].t - t0 > tau2) break;
    Vec3 a = nodes[i].x, b = nodes[i + 1].x;
    for (int k = 0; k <= 16 && confined; k++) {
      Vec3 p = a + (double(k) / 16.0) * (b - a);
      if (!shell_ok(p)) confined = false;
    }
  }
  if (!confined) {
    out.vacuous = true;
    out.pass = true;
    return out;
  }

  Vec3 v0 = log.start.v;
  double lim = eps * norm(v0);
  for (const auto& nd : nodes) {
    if (nd.t - t0 > out.t_eps + 1e-15) continue;
    double dev = dist(nd.v, v0);
    if (dev > out.max_dev) {
      out.max_dev = dev;
      out.witness = nd;
    }
  }
  out.pass = out.max_dev < lim;
  return out;
}

PhaseState grazing_start(const DomainSpec& spec, Vec3 x0, double tilt, double speed,
                         double depth) {
  Vec3 g = spec.grad(x0);
  Vec3 n = normalized(g);
  Vec3 t1, t2;
  tangent_frame(n, t1, t2);
  PhaseState s;
  s.x = x0 - depth * n;
  s.v = speed * (std::cos(tilt) * t1 - std::sin(tilt) * n);
  s.t = 0.0;
  return s;
}

}  // namespace kinlb
