#include "kinlb/kernel.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <thread>

#include "kinlb/error.hpp"
#include "kinlb/rng.hpp"

namespace kinlb {

namespace {

constexpr double kPi = 3.14159265358979323846;

// ---- Gauss-Legendre nodes on [-1,1], cached per order ----------------------

struct GlRule {
  std::vector<double> x, w;
};

const GlRule& gl_rule(int n) {
  static std::map<int, GlRule> cache;
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  GlRule r;
  r.x.resize(n);
  r.w.resize(n);
  for (int i = 0; i < (n + 1) / 2; i++) {
    double x = std::cos(kPi * (i + 0.75) / (n + 0.5));
    double pp = 0.0;
    for (int iter = 0; iter < 100; iter++) {
      double p0 = 1.0, p1 = x;
      for (int k = 2; k <= n; k++) {
        double p2 = ((2 * k - 1) * x * p1 - (k - 1) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      pp = n * (x * p1 - p0) / (x * x - 1.0);
      double dx = p1 / pp;
      x -= dx;
      if (std::abs(dx) < 1e-15) break;
    }
    r.x[i] = -x;
    r.x[n - 1 - i] = x;
    r.w[i] = r.w[n - 1 - i] = 2.0 / ((1.0 - x * x) * pp * pp);
  }
  return cache.emplace(n, std::move(r)).first->second;
}

double gl_integrate(const std::function<double(double)>& f, double a, double b, int n) {
  if (!(b > a)) return 0.0;
  const GlRule& r = gl_rule(n);
  double mid = 0.5 * (a + b), half = 0.5 * (b - a);
  double s = 0.0;
  for (int i = 0; i < n; i++) s += r.w[i] * f(mid + half * r.x[i]);
  return s * half;
}

// Integral over [0, hi] of an integrand with a possible power singularity at
// 0: dyadic panels toward the origin, stopping once contributions vanish.
double graded_integrate(const std::function<double(double)>& f, double hi, int n) {
  double acc = 0.0;
  double b = hi;
  int quiet = 0;
  for (int k = 0; k < 900; k++) {
    double a = 0.5 * b;
    double c = gl_integrate(f, a, b, n);
    acc += c;
    if (std::abs(c) < 1e-17 * std::abs(acc) + 1e-300) {
      if (++quiet >= 3) break;
    } else {
      quiet = 0;
    }
    b = a;
    if (b < 1e-290) break;
  }
  return acc;
}

// b(cos t) * sin(t) in closed form per profile; avoids the 1/sin blow-up of
// the compensated profile at the poles.
double bsin_eval(const KernelParams& p, double theta) {
  switch (p.b_profile) {
    case BProfile::Constant:
      return p.b0 * std::sin(theta);
    case BProfile::HardCutoffNu:
      return p.b0 * std::pow(theta, -(1.0 + p.nu));
    case BProfile::Tabulated:
      return b_eval(p, theta) * std::sin(theta);
  }
  return 0.0;
}

// 2 pi * int_lo^hi b(cos t) sin(t) w(t) dt with w == 1 or (1 - cos t).
double angular_integral(const KernelParams& p, double lo, double hi, bool one_minus_cos) {
  auto f = [&](double t) {
    // 2 sin^2(t/2) = 1 - cos(t) without cancellation at small t
    double s = std::sin(0.5 * t);
    return bsin_eval(p, t) * (one_minus_cos ? 2.0 * s * s : 1.0);
  };
  double v;
  if (lo <= 0.0) {
    v = graded_integrate(f, hi, 24);
  } else {
    v = 0.0;
    // dyadic panels resolve power singularities when lo sits far below the
    // smooth range; a no-op for lo >= 0.05
    double a = lo;
    while (a < 0.05 && 2.0 * a < hi) {
      double b = std::min(2.0 * a, hi);
      v += gl_integrate(f, a, b, 24);
      a = b;
    }
    if (a < hi) {
      int panels = std::max(4, (int)std::ceil((hi - a) / 0.05));
      for (int i = 0; i < panels; i++) {
        double x0 = a + (hi - a) * i / panels;
        double x1 = a + (hi - a) * (i + 1) / panels;
        v += gl_integrate(f, x0, x1, 24);
      }
    }
  }
  return 2.0 * kPi * v;
}

double gamma_plus(double g) { return std::max(g, 0.0); }

// ---- mixture helpers --------------------------------------------------------

double part_reach(const VfComponent& c, double tail) {
  if (c.kind == VfKind::IndicatorBall) return c.radius;
  // Gaussian radius capturing all but `tail` of the mass; generous slack.
  double t = std::max(tail, 1e-300);
  return std::sqrt(c.temperature) * (std::sqrt(2.0 * std::log(1.0 / t)) + 3.0);
}

double sphere_avg_part(const VfComponent& c, Vec3 ctr, double r) {
  double D = dist(ctr, c.center);
  if (c.kind == VfKind::IndicatorBall) {
    if (r < 1e-300) return c.amplitude * (D <= c.radius ? 1.0 : 0.0);
    if (D < 1e-300) return c.amplitude * (r <= c.radius ? 1.0 : 0.0);
    double cos_min = (D * D + r * r - c.radius * c.radius) / (2.0 * D * r);
    return c.amplitude * clampd(0.5 * (1.0 - cos_min), 0.0, 1.0);
  }
  double T = c.temperature;
  double x = r * D / T;
  if (x < 1e-8) {
    // sinh(x)/x -> 1 + x^2/6
    return c.amplitude * std::exp(-(D * D + r * r) / (2.0 * T)) * (1.0 + x * x / 6.0);
  }
  double em = std::exp(-(D - r) * (D - r) / (2.0 * T));
  double ep = std::exp(-(D + r) * (D + r) / (2.0 * T));
  return c.amplitude * (em - ep) / (2.0 * x);
}

// Radial breakpoints of r -> sphere_avg(g, c, r): indicator shells produce
// kinks where the probe sphere starts/stops intersecting.
std::vector<double> radial_breaks(const VelocityFunction& g, Vec3 c, double r_hi,
                                  const std::vector<double>& extra = {}) {
  std::vector<double> bs{0.0, r_hi};
  for (const auto& part : g.parts) {
    double D = dist(c, part.center);
    if (part.kind == VfKind::IndicatorBall) {
      double a = std::abs(D - part.radius), b = D + part.radius;
      if (a > 0 && a < r_hi) bs.push_back(a);
      if (b > 0 && b < r_hi) bs.push_back(b);
    }
  }
  for (double e : extra)
    if (e > 0 && e < r_hi) bs.push_back(e);
  std::sort(bs.begin(), bs.end());
  bs.erase(std::unique(bs.begin(), bs.end(),
                       [](double a, double b) { return std::abs(a - b) < 1e-14; }),
           bs.end());
  return bs;
}

// int_0^{r_hi} w(r) r^2 sphere_avg_g(c, r) dr, split at the kinks; the panel
// touching 0 is graded when w may be singular there.
double radial_weighted(const VelocityFunction& g, Vec3 c, double r_hi,
                       const std::function<double(double)>& w, int n_nodes,
                       bool singular_at_zero, const std::vector<double>& extra = {}) {
  auto f = [&](double r) { return w(r) * r * r * g.sphere_avg(c, r); };
  std::vector<double> bs = radial_breaks(g, c, r_hi, extra);
  double acc = 0.0;
  for (size_t i = 0; i + 1 < bs.size(); i++) {
    double a = bs[i], b = bs[i + 1];
    if (a <= 1e-14 && singular_at_zero)
      acc += graded_integrate(f, b, std::max(8, n_nodes / 4));
    else
      acc += gl_integrate(f, a, b, n_nodes);
  }
  return acc;
}

struct PairSum {
  double s = 0.0, s2 = 0.0;
};

// deterministic_sum twin that accumulates a value and its square in fixed
// blocks so the MC mean/variance are thread-count independent.
PairSum deterministic_pair_sum(uint64_t n, const std::function<double(uint64_t)>& f,
                               int threads) {
  const uint64_t block = 4096;
  const uint64_t nblocks = (n + block - 1) / block;
  std::vector<double> ps(nblocks, 0.0), ps2(nblocks, 0.0);
  auto work = [&](uint64_t b0, uint64_t b1) {
    for (uint64_t b = b0; b < b1; b++) {
      double s = 0.0, s2 = 0.0;
      uint64_t i1 = std::min(n, (b + 1) * block);
      for (uint64_t i = b * block; i < i1; i++) {
        double v = f(i);
        s += v;
        s2 += v * v;
      }
      ps[b] = s;
      ps2[b] = s2;
    }
  };
  if (threads <= 1 || nblocks < 2) {
    work(0, nblocks);
  } else {
    int nt = (int)std::min<uint64_t>((uint64_t)threads, nblocks);
    std::vector<std::thread> pool;
    uint64_t chunk = (nblocks + nt - 1) / nt;
    for (int t = 0; t < nt; t++)
      pool.emplace_back(work, t * chunk, std::min(nblocks, (t + 1) * chunk));
    for (auto& th : pool) th.join();
  }
  PairSum out;
  for (uint64_t b = 0; b < nblocks; b++) {
    out.s += ps[b];
    out.s2 += ps2[b];
  }
  return out;
}

}  // namespace

// ---- params -----------------------------------------------------------------

double phi_eval(const KernelParams& p, double r) {
  switch (p.phi_variant) {
    case PhiVariant::PowerLaw:
      if (r <= 0.0) return p.gamma > 0 ? 0.0 : (p.gamma == 0 ? p.c_phi : std::numeric_limits<double>::infinity());
      return p.c_phi * std::pow(r, p.gamma);
    case PhiVariant::Mollified:
      return p.c_phi * std::pow(std::max(1.0, r), p.gamma);
  }
  return 0.0;
}

double b_eval(const KernelParams& p, double theta) {
  theta = clampd(theta, 0.0, kPi);
  switch (p.b_profile) {
    case BProfile::Constant:
      return p.b0;
    case BProfile::HardCutoffNu: {
      double s = std::sin(theta);
      if (s < 1e-300) s = 1e-300;
      return p.b0 * std::pow(theta, -(1.0 + p.nu)) / s;
    }
    case BProfile::Tabulated: {
      const auto& ts = p.b_table_theta;
      const auto& vs = p.b_table_value;
      if (ts.empty()) return 0.0;
      if (theta <= ts.front()) return vs.front();
      if (theta >= ts.back()) return vs.back();
      auto it = std::upper_bound(ts.begin(), ts.end(), theta);
      size_t j = it - ts.begin();
      double t0 = ts[j - 1], t1 = ts[j];
      double u = (theta - t0) / (t1 - t0);
      return vs[j - 1] * (1.0 - u) + vs[j] * u;
    }
  }
  return 0.0;
}

void validate_params(const KernelParams& p) {
  if (!(p.gamma > -3.0 && p.gamma <= 1.0))
    fail_validation("InvalidKernelParams", "gamma must lie in (-3, 1]");
  if (!(p.nu < 2.0)) fail_validation("InvalidKernelParams", "nu must be < 2");
  if (!(p.b0 > 0.0)) fail_validation("InvalidKernelParams", "b0 must be positive");
  if (!(p.c_phi > 0.0 && p.c_phi <= p.C_phi))
    fail_validation("InvalidKernelParams", "need 0 < c_phi <= C_phi");
  if (!(p.eps_split > 0.0 && p.eps_split < kPi / 4.0))
    fail_validation("InvalidKernelParams", "eps_split must lie in (0, pi/4)");
  if (p.b_profile == BProfile::Tabulated) {
    if (p.b_table_theta.size() < 2 || p.b_table_theta.size() != p.b_table_value.size())
      fail_validation("InvalidKernelParams", "tabulated profile needs matching node arrays");
    for (size_t i = 0; i + 1 < p.b_table_theta.size(); i++)
      if (!(p.b_table_theta[i] < p.b_table_theta[i + 1]))
        fail_validation("InvalidKernelParams", "tabulated nodes must increase");
    for (double v : p.b_table_value)
      if (!(v >= 0.0)) fail_validation("InvalidKernelParams", "tabulated values must be >= 0");
  }
  // Sampled speed-factor envelope on the variant's validity range.
  for (double r : {1e-3, 1e-2, 0.1, 0.5, 1.0, 2.0, 10.0, 100.0}) {
    double ratio;
    if (p.phi_variant == PhiVariant::PowerLaw) {
      ratio = phi_eval(p, r) / std::pow(r, p.gamma);
    } else {
      ratio = r >= 1.0 ? phi_eval(p, r) / std::pow(r, p.gamma) : phi_eval(p, r);
    }
    if (!(ratio >= p.c_phi * (1.0 - 1e-12) && ratio <= p.C_phi * (1.0 + 1e-12)))
      fail_validation("InvalidKernelParams", "speed factor escapes its [c_phi, C_phi] envelope");
  }
  // Small-angle limit of the deflection profile against the declared (b0, nu).
  for (double t : {1e-3, 1e-4}) {
    double ratio = b_eval(p, t) * std::sin(t) / std::pow(t, -(1.0 + p.nu));
    if (!(std::abs(ratio - p.b0) <= 0.05 * p.b0))
      fail_validation("InvalidKernelParams",
                      "deflection profile does not match the declared small-angle limit");
  }
}

DerivedKernelConstants derive_constants(const KernelParams& p, double eps) {
  DerivedKernelConstants d;
  d.eps = eps;
  d.n_b = p.nu >= 0.0 ? std::numeric_limits<double>::infinity()
                      : angular_integral(p, 0.0, kPi, false);
  d.m_b = angular_integral(p, 0.0, kPi, true);
  d.n_b_CO = angular_integral(p, eps, kPi, false);
  d.m_b_NCO = angular_integral(p, 0.0, eps, true);
  // inf over [pi/4, 3pi/4]: dense scan plus golden refinement around the best cell.
  const int N = 2048;
  double lo = kPi / 4.0, hi = 3.0 * kPi / 4.0;
  double best_t = lo, best = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= N; i++) {
    double t = lo + (hi - lo) * i / N;
    double v = b_eval(p, t);
    if (v < best) {
      best = v;
      best_t = t;
    }
  }
  double a = std::max(lo, best_t - (hi - lo) / N), b = std::min(hi, best_t + (hi - lo) / N);
  const double gr = 0.61803398874989484820;
  double x1 = b - gr * (b - a), x2 = a + gr * (b - a);
  double f1 = b_eval(p, x1), f2 = b_eval(p, x2);
  for (int it = 0; it < 120; it++) {
    if (f1 < f2) {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - gr * (b - a);
      f1 = b_eval(p, x1);
    } else {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + gr * (b - a);
      f2 = b_eval(p, x2);
    }
  }
  d.l_b = std::min(best, std::min(f1, f2));
  return d;
}

// ---- velocity functions -------------------------------------------------------

double VelocityFunction::eval(Vec3 v) const {
  double s = 0.0;
  for (const auto& c : parts) {
    if (c.kind == VfKind::IndicatorBall) {
      if (dist(v, c.center) <= c.radius) s += c.amplitude;
    } else {
      s += c.amplitude * std::exp(-norm2(v - c.center) / (2.0 * c.temperature));
    }
  }
  return s;
}

double VelocityFunction::mass() const {
  double s = 0.0;
  for (const auto& c : parts) {
    if (c.kind == VfKind::IndicatorBall)
      s += c.amplitude * 4.0 / 3.0 * kPi * c.radius * c.radius * c.radius;
    else
      s += c.amplitude * std::pow(2.0 * kPi * c.temperature, 1.5);
  }
  return s;
}

double VelocityFunction::energy() const {
  double s = 0.0;
  for (const auto& c : parts) {
    if (c.kind == VfKind::IndicatorBall) {
      double r3 = c.radius * c.radius * c.radius;
      s += c.amplitude * (4.0 / 3.0 * kPi * r3 * norm2(c.center) +
                          4.0 / 5.0 * kPi * r3 * c.radius * c.radius);
    } else {
      s += c.amplitude * std::pow(2.0 * kPi * c.temperature, 1.5) *
           (norm2(c.center) + 3.0 * c.temperature);
    }
  }
  return s;
}

double VelocityFunction::lp_norm(double p) const {
  if (!(p >= 1.0)) fail_validation("PreconditionViolated", "lp_norm needs p >= 1");
  double s = 0.0;
  for (const auto& c : parts) {
    if (c.kind == VfKind::IndicatorBall)
      s += c.amplitude *
           std::pow(4.0 / 3.0 * kPi * c.radius * c.radius * c.radius, 1.0 / p);
    else
      s += c.amplitude * std::pow(std::pow(2.0 * kPi * c.temperature / p, 1.5), 1.0 / p);
  }
  return s;
}

double VelocityFunction::l1_weighted(double q) const {
  double r_hi = norm(hull_center()) + hull_radius(1e-14);
  auto w = [&](double r) { return std::pow(jbracket(r), q); };
  return 4.0 * kPi * radial_weighted(*this, Vec3{0, 0, 0}, r_hi, w, 48, false);
}

Vec3 VelocityFunction::hull_center() const {
  if (parts.empty()) return {0, 0, 0};
  Vec3 c{0, 0, 0};
  for (const auto& part : parts) c += part.center;
  return c / (double)parts.size();
}

double VelocityFunction::hull_radius(double tail) const {
  Vec3 c = hull_center();
  double r = 0.0;
  for (const auto& part : parts)
    r = std::max(r, dist(c, part.center) + part_reach(part, tail));
  return r;
}

double VelocityFunction::sphere_avg(Vec3 c, double r) const {
  double s = 0.0;
  for (const auto& part : parts) s += sphere_avg_part(part, c, r);
  return s;
}

bool VelocityFunction::empty() const {
  for (const auto& part : parts)
    if (part.amplitude != 0.0) return false;
  return true;
}

VelocityFunction vf_ball(Vec3 center, double radius, double amplitude) {
  if (!(radius > 0.0)) fail_validation("PreconditionViolated", "ball radius must be positive");
  if (!(amplitude >= 0.0)) fail_validation("PreconditionViolated", "amplitude must be >= 0");
  VelocityFunction g;
  g.parts.push_back({VfKind::IndicatorBall, center, radius, 1.0, amplitude});
  return g;
}

VelocityFunction vf_gaussian(Vec3 mean, double temperature, double amplitude) {
  if (!(temperature > 0.0))
    fail_validation("PreconditionViolated", "temperature must be positive");
  if (!(amplitude >= 0.0)) fail_validation("PreconditionViolated", "amplitude must be >= 0");
  VelocityFunction g;
  g.parts.push_back({VfKind::Gaussian, mean, 1.0, temperature, amplitude});
  return g;
}

VelocityFunction vf_mix(const VelocityFunction& a, const VelocityFunction& b) {
  VelocityFunction g = a;
  g.parts.insert(g.parts.end(), b.parts.begin(), b.parts.end());
  return g;
}

// ---- kinematics ----------------------------------------------------------------

CollisionPair post_collision(Vec3 v, Vec3 v_star, Vec3 sigma) {
  if (std::abs(norm(sigma) - 1.0) > 1e-12)
    fail_validation("PreconditionViolated", "sigma must be a unit vector");
  Vec3 mid = 0.5 * (v + v_star);
  double half = 0.5 * dist(v, v_star);
  return {mid + half * sigma, mid - half * sigma};
}

// ---- loss frequency --------------------------------------------------------------

namespace {

double loss_radial(const KernelParams& p, const VelocityFunction& g, Vec3 v, int n_nodes) {
  double r_hi = dist(v, g.hull_center()) + g.hull_radius(1e-14);
  auto w = [&](double r) { return phi_eval(p, r); };
  bool singular = p.gamma < 0.0 && p.phi_variant == PhiVariant::PowerLaw;
  std::vector<double> extra;
  if (p.phi_variant == PhiVariant::Mollified) extra.push_back(1.0);  // slope kink
  return 4.0 * kPi * radial_weighted(g, v, r_hi, w, n_nodes, singular, extra);
}

}  // namespace

QuadResult L_eval(const KernelParams& p, const VelocityFunction& g, Vec3 v,
                  const QuadSpec& quad, std::optional<double> trunc) {
  double ang;
  if (trunc.has_value()) {
    if (!(*trunc > 0.0 && *trunc < kPi))
      fail_validation("PreconditionViolated", "angular truncation must lie in (0, pi)");
    ang = angular_integral(p, *trunc, kPi, false);
  } else {
    if (p.nu >= 0.0)
      fail_validation("PreconditionViolated",
                      "total angular mass diverges for nu >= 0; supply a truncation");
    ang = angular_integral(p, 0.0, kPi, false);
  }
  if (g.empty()) return {0.0, 0.0};
  int n = quad.radial;
  double prev = loss_radial(p, g, v, n);
  for (int k = 0; k < quad.max_refine; k++) {
    double cur = loss_radial(p, g, v, 2 * n);
    double err = std::abs(cur - prev);
    if (err <= quad.rel_tol * std::max(std::abs(cur), 1e-300))
      return {ang * cur, ang * err};
    prev = cur;
    n *= 2;
  }
  fail_numerical("QuadratureDivergence", "loss-frequency quadrature failed to stabilize");
}

double loss_envelope(const KernelParams& p, const VelocityFunction& g,
                     const QuadSpec& quad, double v_max, int n_v,
                     std::optional<double> trunc) {
  static const Vec3 dirs[6] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0},
                               {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  double sup = 0.0;
  for (int i = 0; i < n_v; i++) {
    double s = v_max * i / std::max(1, n_v - 1);
    for (const Vec3& d : dirs) {
      Vec3 v = s * d;
      double L = L_eval(p, g, v, quad, trunc).value;
      sup = std::max(sup, std::abs(L) / std::pow(jbracket(s), gamma_plus(p.gamma)));
      if (s == 0.0) break;
    }
  }
  return sup;
}

double loss_constant_bound(const KernelParams& p, double rho_g, double e_g,
                           double l_gp, double p_exp) {
  if (p.nu >= 0.0)
    fail_validation("PreconditionViolated", "loss bound needs a finite angular mass");
  double n_b = angular_integral(p, 0.0, kPi, false);
  if (p.gamma >= 0.0) return n_b * p.C_phi * (3.0 * rho_g + e_g) / 2.0;
  if (!(p_exp > 3.0 / (3.0 + p.gamma)) || !(l_gp > 0.0))
    fail_validation("PreconditionViolated",
                    "gamma < 0 requires an L^p bound with p > 3/(3+gamma)");
  double pc = p_exp / (p_exp - 1.0);
  double near = l_gp * std::pow(4.0 * kPi / (3.0 + p.gamma * pc), 1.0 / pc);
  return n_b * p.C_phi * (rho_g + near);
}

// ---- gain term ---------------------------------------------------------------------

namespace {

struct SigmaGrid {
  std::vector<double> theta, wt;  // nodes and weights carrying b(cos t) sin t
};

// Deflection-angle grid over [lo, hi]; graded toward 0 when lo == 0 since
// b sin may have a power singularity there.
SigmaGrid sigma_grid(const KernelParams& p, double lo, double hi, int n) {
  SigmaGrid g;
  auto add_panel = [&](double a, double b, int m) {
    const GlRule& r = gl_rule(m);
    double mid = 0.5 * (a + b), half = 0.5 * (b - a);
    for (int i = 0; i < m; i++) {
      double t = mid + half * r.x[i];
      g.theta.push_back(t);
      g.wt.push_back(half * r.w[i] * bsin_eval(p, t));
    }
  };
  if (lo <= 1e-14 && p.b_profile != BProfile::Constant) {
    double b = hi;
    for (int k = 0; k < 54 && b > 1e-14; k++) {
      add_panel(0.5 * b, b, std::max(4, n / 4));
      b *= 0.5;
    }
  } else {
    int panels = std::max(2, (int)std::ceil((hi - lo) / 0.5));
    for (int i = 0; i < panels; i++)
      add_panel(lo + (hi - lo) * i / panels, lo + (hi - lo) * (i + 1) / panels,
                std::max(6, n / 2));
  }
  return g;
}

double qplus_quad_once(const KernelParams& p, const VelocityFunction& g,
                       const VelocityFunction& h, Vec3 v, Vec3 c0, double rho0,
                       int nr, int npol, int naz, const SigmaGrid& sg, int naz2,
                       int threads) {
  const GlRule& rad = gl_rule(nr);
  const GlRule& pol = gl_rule(npol);
  uint64_t total = (uint64_t)nr * npol * naz;
  auto term = [&](uint64_t idx) -> double {
    int ir = (int)(idx % nr);
    int ip = (int)((idx / nr) % npol);
    int ia = (int)(idx / ((uint64_t)nr * npol));
    double r = 0.5 * rho0 * (rad.x[ir] + 1.0);
    double wr = 0.5 * rho0 * rad.w[ir] * r * r;
    double mu = pol.x[ip];
    double wmu = pol.w[ip];
    double phi_a = 2.0 * kPi * ia / naz;
    double sq = std::sqrt(std::max(0.0, 1.0 - mu * mu));
    Vec3 vstar = c0 + r * Vec3{sq * std::cos(phi_a), sq * std::sin(phi_a), mu};
    double waz = 2.0 * kPi / naz;
    Vec3 rel = v - vstar;
    double speed = norm(rel);
    double phi_w = phi_eval(p, speed);
    if (!(phi_w > 0.0) || !std::isfinite(phi_w)) return 0.0;
    Vec3 khat = speed > 1e-14 ? rel / speed : Vec3{0, 0, 1};
    Vec3 e1, e2;
    tangent_frame(khat, e1, e2);
    Vec3 mid = 0.5 * (v + vstar);
    double halfs = 0.5 * speed;
    double inner = 0.0;
    for (size_t it = 0; it < sg.theta.size(); it++) {
      double ct = std::cos(sg.theta[it]), st = std::sin(sg.theta[it]);
      double ring = 0.0;
      for (int j = 0; j < naz2; j++) {
        double ph = 2.0 * kPi * j / naz2;
        Vec3 sigma = ct * khat + st * (std::cos(ph) * e1 + std::sin(ph) * e2);
        Vec3 vp = mid + halfs * sigma;
        Vec3 vps = mid - halfs * sigma;
        ring += h.eval(vp) * g.eval(vps);
      }
      inner += sg.wt[it] * (2.0 * kPi / naz2) * ring;
    }
    return wr * wmu * waz * phi_w * inner;
  };
  return deterministic_sum(total, term, threads);
}

}  // namespace

QplusResult qplus_eval(const KernelParams& p, const VelocityFunction& g,
                       const VelocityFunction& h, Vec3 v, QplusMethod method,
                       uint64_t seed, int64_t mc_n, const QuadSpec& quad, int threads,
                       std::optional<double> trunc) {
  if (g.empty() || h.empty()) return {0.0, 0.0};
  double tail = 1e-10;
  Vec3 c0 = g.hull_center() + h.hull_center() - v;
  double rho0 = g.hull_radius(tail) + h.hull_radius(tail);
  double th_lo = trunc.has_value() ? *trunc : 0.0;
  if (trunc.has_value() && !(*trunc > 0.0 && *trunc < kPi))
    fail_validation("PreconditionViolated", "angular truncation must lie in (0, pi)");
  if (method == QplusMethod::MonteCarlo) {
    if (mc_n < 10000)
      fail_validation("PreconditionViolated", "Monte Carlo needs at least 1e4 samples");
    double vol = 4.0 / 3.0 * kPi * rho0 * rho0 * rho0;
    auto sample = [&](uint64_t i) -> double {
      Rng r(seed, 0x51504d43ULL);
      r.ctr = 8 * i;
      Vec3 vstar = r.in_ball(c0, rho0);
      Vec3 sigma = r.on_sphere();
      Vec3 rel = v - vstar;
      double speed = norm(rel);
      double ct = speed > 1e-14 ? clampd(dot(rel, sigma) / speed, -1.0, 1.0) : 0.0;
      double theta = std::acos(ct);
      if (theta < th_lo) return 0.0;
      Vec3 mid = 0.5 * (v + vstar);
      Vec3 vp = mid + 0.5 * speed * sigma;
      Vec3 vps = mid - 0.5 * speed * sigma;
      double hv = h.eval(vp);
      if (hv == 0.0) return 0.0;
      double gv = g.eval(vps);
      if (gv == 0.0) return 0.0;
      return b_eval(p, theta) * phi_eval(p, speed) * hv * gv;
    };
    PairSum ps = deterministic_pair_sum((uint64_t)mc_n, sample, threads);
    double mean = ps.s / mc_n;
    double var = std::max(0.0, ps.s2 / mc_n - mean * mean);
    double scale = vol * 4.0 * kPi;
    return {scale * mean, scale * std::sqrt(var / mc_n)};
  }
  // Quadrature path: spherical grid for v* around the reachable-ball center,
  // deflection grid for sigma; every direction (including the periodic rings)
  // grows under refinement so the doubling estimate sees all error sources.
  int nr = std::max(8, quad.radial / 2);
  int npol = 16, naz = 12;
  int nsig = quad.sigma_polar, naz2 = std::max(8, quad.sigma_azimuth);
  double prev = qplus_quad_once(p, g, h, v, c0, rho0, nr, npol, naz,
                                sigma_grid(p, th_lo, kPi, nsig), naz2, threads);
  for (int k = 0; k < quad.max_refine; k++) {
    nr *= 2;
    nsig *= 2;
    npol = std::min(48, npol + 8);
    naz += 8;
    naz2 += 8;
    double cur = qplus_quad_once(p, g, h, v, c0, rho0, nr, npol, naz,
                                 sigma_grid(p, th_lo, kPi, nsig), naz2, threads);
    double err = std::abs(cur - prev);
    if (err <= quad.rel_tol * std::max(std::abs(cur), 1e-300)) return {cur, err};
    prev = cur;
  }
  fail_numerical("QuadratureDivergence", "gain-term quadrature failed to stabilize");
}

// ---- spreading measurement ------------------------------------------------------------

SpreadingReport spreading_check(const KernelParams& p, Vec3 v0, double r, double R,
                                double xi, int grid_pts, int64_t mc_n, uint64_t seed,
                                int threads) {
  if (!(r > 0.0 && r <= R)) fail_validation("PreconditionViolated", "need 0 < r <= R");
  if (!(xi > 0.0 && xi < 1.0)) fail_validation("PreconditionViolated", "need xi in (0,1)");
  if (p.nu >= 0.0)
    fail_validation("PreconditionViolated",
                    "spreading measurement needs a cutoff angular profile");
  DerivedKernelConstants dc = derive_constants(p);
  SpreadingReport rep;
  rep.seed = seed;
  rep.mc_n = mc_n;
  rep.target_radius = std::sqrt(r * r + R * R) * (1.0 - xi);
  rep.floor_scale = dc.l_b * p.c_phi * std::pow(R, 3.0 + p.gamma) * std::sqrt(xi);

  if (grid_pts <= 0) grid_pts = 25;
  std::vector<Vec3> grid;
  grid.push_back(v0);
  const double fracs[3] = {0.35, 0.65, 0.92};
  int per_shell = std::max(1, (grid_pts - 1) / 3);
  const double ga = kPi * (3.0 - std::sqrt(5.0));  // golden angle
  for (int s = 0; s < 3 && (int)grid.size() < grid_pts; s++) {
    for (int i = 0; i < per_shell && (int)grid.size() < grid_pts; i++) {
      double z = 1.0 - 2.0 * (i + 0.5) / per_shell;
      double rho = std::sqrt(std::max(0.0, 1.0 - z * z));
      double ph = ga * i;
      Vec3 dir{rho * std::cos(ph), rho * std::sin(ph), z};
      grid.push_back(v0 + fracs[s] * rep.target_radius * dir);
    }
  }
  rep.grid_points = (int)grid.size();

  VelocityFunction big = vf_ball(v0, R);
  VelocityFunction small = vf_ball(v0, r);
  rep.min_value = std::numeric_limits<double>::infinity();
  rep.max_value = -std::numeric_limits<double>::infinity();
  rep.max_std_err = 0.0;
  bool verified = true;
  double min_ratio = std::numeric_limits<double>::infinity();
  for (size_t j = 0; j < grid.size(); j++) {
    QplusResult q = qplus_eval(p, big, small, grid[j], QplusMethod::MonteCarlo,
                               seed + 0x9000 + j, mc_n, {}, threads);
    if (q.value < -3.0 * q.error)
      fail_numerical("SupportViolation",
                     "gain term negative beyond its error bar inside the guaranteed ball");
    rep.min_value = std::min(rep.min_value, q.value);
    rep.max_value = std::max(rep.max_value, q.value);
    rep.max_std_err = std::max(rep.max_std_err, q.error);
    if (!(q.value > 3.0 * q.error)) verified = false;
    min_ratio = std::min(min_ratio, q.value / rep.floor_scale);
  }
  rep.support_verified = verified;
  rep.C_measured = min_ratio;
  rep.C_Q = min_ratio * dc.l_b * p.c_phi;
  return rep;
}

// ---- small-angle pieces ------------------------------------------------------------------

namespace {

// Shared frame for the two remainder integrals: v* over a spherical grid with
// the radial panels split at indicator kinks, the deflection angle over a
// graded grid, azimuth as an even ring so antipodal pairs cancel the
// first-order part of the integrand.
double small_angle_once(const KernelParams& p, Vec3 v, Vec3 cs,
                        const std::vector<double>& rn, const std::vector<double>& rw,
                        const SigmaGrid& sg, int npol, int naz, int naz2,
                        const std::function<double(Vec3 vstar, Vec3 vp, Vec3 vps)>& bracket,
                        int threads) {
  const GlRule& pol = gl_rule(npol);
  int nr = (int)rn.size();
  uint64_t total = (uint64_t)nr * npol * naz;
  auto term = [&](uint64_t idx) -> double {
    int ir = (int)(idx % nr);
    int ip = (int)((idx / nr) % npol);
    int ia = (int)(idx / ((uint64_t)nr * npol));
    double r = rn[ir];
    double mu = pol.x[ip];
    double sq = std::sqrt(std::max(0.0, 1.0 - mu * mu));
    double phi_a = 2.0 * kPi * ia / naz;
    Vec3 vstar = cs + r * Vec3{sq * std::cos(phi_a), sq * std::sin(phi_a), mu};
    double w_outer = rw[ir] * pol.w[ip] * (2.0 * kPi / naz);
    Vec3 rel = v - vstar;
    double speed = norm(rel);
    double phi_w = phi_eval(p, speed);
    if (!(phi_w > 0.0) || !std::isfinite(phi_w)) return 0.0;
    Vec3 khat = speed > 1e-14 ? rel / speed : Vec3{0, 0, 1};
    Vec3 e1, e2;
    tangent_frame(khat, e1, e2);
    Vec3 mid = 0.5 * (v + vstar);
    double halfs = 0.5 * speed;
    double inner = 0.0;
    for (size_t it = 0; it < sg.theta.size(); it++) {
      double ct = std::cos(sg.theta[it]), st = std::sin(sg.theta[it]);
      double ring = 0.0;
      for (int j = 0; j < naz2; j++) {
        double ph = 2.0 * kPi * j / naz2;
        Vec3 sigma = ct * khat + st * (std::cos(ph) * e1 + std::sin(ph) * e2);
        ring += bracket(vstar, mid + halfs * sigma, mid - halfs * sigma);
      }
      inner += sg.wt[it] * (2.0 * kPi / naz2) * ring;
    }
    return w_outer * phi_w * inner;
  };
  return deterministic_sum(total, term, threads);
}

// Radial nodes carrying w * r^2, GL per kink segment.
void radial_grid(const std::vector<double>& breaks, int per_seg, std::vector<double>& rn,
                 std::vector<double>& rw) {
  rn.clear();
  rw.clear();
  for (size_t i = 0; i + 1 < breaks.size(); i++) {
    const GlRule& rule = gl_rule(per_seg);
    double mid = 0.5 * (breaks[i] + breaks[i + 1]);
    double half = 0.5 * (breaks[i + 1] - breaks[i]);
    for (int k = 0; k < per_seg; k++) {
      double r = mid + half * rule.x[k];
      rn.push_back(r);
      rw.push_back(half * rule.w[k] * r * r);
    }
  }
}

// Returns the best refinement with its achieved error; small-angle values can
// cancel to near zero, so non-stabilization is reported, not fatal.
QuadResult small_angle_drive(const KernelParams& p, Vec3 v,
                             const VelocityFunction& localizer, double th_hi,
                             const QuadSpec& quad,
                             const std::function<double(Vec3, Vec3, Vec3)>& bracket) {
  Vec3 cs = localizer.hull_center();
  double Rh = localizer.hull_radius(1e-10);
  double dvc = dist(v, cs);
  // |v'_* - v_*| <= |v - v_*| sin(th/2); solve for the v_* radius that can
  // reach the localizer's support.  Wide windows fall back to a fixed pad
  // (the far tail is outside any compact hull's influence budget anyway).
  double swing = std::sin(0.5 * th_hi);
  double rs = swing < 0.9 ? (Rh + swing * dvc) / (1.0 - swing) + 1.0 : 2.0 * Rh + dvc + 1.0;
  std::vector<double> breaks = radial_breaks(localizer, cs, rs);
  int nr = std::max(6, quad.radial / 4);
  int npol = 12, naz = 8;
  int nsig = std::max(8, quad.sigma_polar / 2);
  int naz2 = std::max(4, quad.sigma_azimuth);
  if (naz2 % 2) naz2++;  // antipodal pairing needs an even ring
  std::vector<double> rn, rw;
  radial_grid(breaks, nr, rn, rw);
  double prev = small_angle_once(p, v, cs, rn, rw, sigma_grid(p, 0.0, th_hi, nsig), npol,
                                 naz, naz2, bracket, 1);
  double cur = prev, err = std::abs(prev);
  for (int k = 0; k < quad.max_refine; k++) {
    nr *= 2;
    nsig *= 2;
    npol = std::min(32, npol + 6);
    naz += 4;
    naz2 += 4;
    radial_grid(breaks, nr, rn, rw);
    cur = small_angle_once(p, v, cs, rn, rw, sigma_grid(p, 0.0, th_hi, nsig), npol, naz,
                           naz2, bracket, 1);
    err = std::abs(cur - prev);
    if (err <= quad.rel_tol * std::max(std::abs(cur), 1e-300)) break;
    prev = cur;
  }
  return {cur, err};
}

}  // namespace

QuadResult S_eval(const KernelParams& p, const VelocityFunction& g, Vec3 v,
                  const QuadSpec& quad, std::optional<double> eps) {
  if (p.nu >= 2.0)
    fail_numerical("QuadratureDivergence", "angular singularity not integrable for nu >= 2");
  if (g.empty()) return {0.0, 0.0};
  double th_hi = eps.has_value() ? *eps : kPi;
  if (!(th_hi > 0.0 && th_hi <= kPi))
    fail_validation("PreconditionViolated", "angular window must lie in (0, pi]");
  auto bracket = [&](Vec3 vstar, Vec3, Vec3 vps) { return g.eval(vstar) - g.eval(vps); };
  return small_angle_drive(p, v, g, th_hi, quad, bracket);
}

QuadResult q1_eval(const KernelParams& p, const VelocityFunction& h1,
                   const VelocityFunction& h2, Vec3 v, const QuadSpec& quad, double eps) {
  if (p.nu >= 2.0)
    fail_numerical("QuadratureDivergence", "angular singularity not integrable for nu >= 2");
  if (!(eps > 0.0 && eps <= kPi / 4.0))
    fail_validation("PreconditionViolated", "remainder window must lie in (0, pi/4]");
  if (h1.empty() || h2.empty()) return {0.0, 0.0};
  double h2v = h2.eval(v);
  auto bracket = [&](Vec3, Vec3 vp, Vec3 vps) { return h1.eval(vps) * (h2.eval(vp) - h2v); };
  return small_angle_drive(p, v, h1, eps, quad, bracket);
}

double q1_bound(const KernelParams& p, double c_q2, double l1_gamma_tilde_norm,
                double w2inf_norm) {
  double m_nco = angular_integral(p, 0.0, p.eps_split, true);
  return c_q2 * m_nco * p.c_phi * l1_gamma_tilde_norm * w2inf_norm;
}

double q1_constant(const KernelParams& p, const QuadSpec& quad) {
  double m_nco = angular_integral(p, 0.0, p.eps_split, true);
  if (!(m_nco > 0.0)) return 1.0;
  // Constant sweep only needs percent-level ratios; keep each probe cheap.
  QuadSpec qp = quad;
  qp.max_refine = std::min(quad.max_refine, 1);
  qp.rel_tol = std::max(quad.rel_tol, 1e-2);
  // W^{2,inf} envelope of a Gaussian bump: sup over value, gradient, Hessian.
  auto w2inf_gauss = [](double a, double T) {
    return a * std::max({1.0, std::exp(-0.5) / std::sqrt(T), 2.0 / T});
  };
  struct Probe {
    VelocityFunction h1, h2;
    double w1;
  };
  std::vector<Probe> probes;
  probes.push_back({vf_gaussian({0, 0, 0}, 1.0), vf_gaussian({0.7, 0, 0}, 0.5),
                    w2inf_gauss(1.0, 1.0)});
  probes.push_back({vf_gaussian({0.5, -0.2, 0}, 0.3), vf_ball({0, 0, 0}, 1.2),
                    w2inf_gauss(1.0, 0.3)});
  probes.push_back({vf_gaussian({0, 0, 0}, 2.0), vf_gaussian({0, 0, 0}, 1.0),
                    w2inf_gauss(1.0, 2.0)});
  const Vec3 vs[3] = {{0, 0, 0}, {1.0, 0.3, 0}, {-0.5, 1.0, 0.5}};
  double gt = gamma_plus(2.0 + p.gamma);
  double sup = 0.0;
  for (const auto& pr : probes) {
    double denom = m_nco * p.c_phi * pr.h2.l1_weighted(gt) * pr.w1;
    for (const Vec3& v : vs) {
      double q1 = std::abs(q1_eval(p, pr.h1, pr.h2, v, qp, p.eps_split).value);
      sup = std::max(sup, q1 / denom);
    }
  }
  return std::max(1.0, 1.5 * sup);
}

}  // namespace kinlb
