#include "kinlb/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "kinlb/error.hpp"

namespace kinlb {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
const double kLn2 = std::log(2.0);
// per-level growth factor of the spreading radius
const double kSigma = 3.0 * std::sqrt(2.0) / 4.0;
const double kLnSigma = std::log(kSigma);

double sq(double x) { return x * x; }

// ceil of a real ratio; deterministic, no epsilon fudge
double ceil_ratio(double num, double den) { return std::ceil(num / den); }

BigLog big_max(const BigLog& a, const BigLog& b) {
  return big_cmp(a, b) >= 0 ? a : b;
}

}  // namespace

// ---------- log-scale helpers ----------

double lse(double a, double b) {
  if (a == -kInf) return b;
  if (b == -kInf) return a;
  double hi = std::max(a, b);
  return hi + std::log1p(std::exp(-std::fabs(a - b)));
}

double lde(double a, double b) {
  if (b == -kInf) return a;
  if (!(a > b)) fail_validation("InvalidScale", "log-difference needs a > b");
  return a + std::log(-std::expm1(b - a));
}

double jbracket_ln(double x_ln) {
  if (x_ln == -kInf) return 0.0;
  return 0.5 * lse(0.0, 2.0 * x_ln);
}

LogAmp exp_neg_ln(double lnE) {
  if (lnE == -kInf) return amp_one();
  if (!(std::isfinite(lnE))) fail_numerical("Underflow", "exponent log not finite");
  return amp_from_ln(big_neg(big_exp(big_from(lnE))));
}

VelLn velln_from(const Vec3& v) {
  VelLn r;
  double n = norm(v);
  if (n > 0.0) {
    r.dir = v / n;
    r.mag_ln = std::log(n);
  }
  return r;
}

VelLn velln_scaled_diff(const Vec3& a, const Vec3& b, double T_ln) {
  VelLn r;
  Vec3 w = a - b;
  double n = norm(w);
  if (n > 0.0) {
    r.dir = w / n;
    r.mag_ln = kLn2 + std::log(n) - T_ln;
  }
  return r;
}

// ---------- constants ----------

void validate_hydro(const HydroBounds& h, double gamma) {
  if (!(h.M > 0.0) || !std::isfinite(h.M))
    fail_validation("InvalidScale", "mass bound must be positive and finite");
  if (!(h.E_f > 0.0) || !std::isfinite(h.E_f))
    fail_validation("InvalidScale", "energy bound must be positive and finite");
  if (gamma < 0.0) {
    double p_floor = 3.0 / (3.0 + gamma);
    if (!(h.p_gamma > p_floor))
      fail_validation("InvalidScale", "integrability exponent too small for soft kernel");
    if (!(h.L_fp > 0.0))
      fail_validation("InvalidScale", "soft kernel needs a positive L^p bound");
  }
  if (!(h.modulus_c > 0.0) || !(h.modulus_beta > 0.0))
    fail_validation("InvalidScale", "continuity modulus must be increasing from zero");
  if (!(h.T_B > 0.0)) fail_validation("InvalidScale", "wall temperature must be positive");
  if (!(h.accommodation >= 0.0 && h.accommodation <= 1.0))
    fail_validation("InvalidAlpha", "accommodation must lie in [0,1]");
  if (!(h.Eprime_f > 0.0) || !(h.W_f > 0.0))
    fail_validation("InvalidScale", "regularity bounds must be positive");
}

PipelineConsts make_consts(const KernelParams& p, const HydroBounds& h,
                           double c_measured) {
  validate_params(p);
  validate_hydro(h, p.gamma);
  if (!(c_measured > 0.0))
    fail_validation("InvalidScale", "spreading constant must be positive");
  PipelineConsts c;
  c.gamma = p.gamma;
  c.C_L = loss_constant_bound(p, h.E_f, h.E_f, h.L_fp, h.p_gamma);
  c.C_Q = c_measured * derive_constants(p).l_b * p.c_phi;
  return c;
}

// ---------- initial seed ----------

SeedBound initial_seed(const HydroBounds& hydro, const DomainMetrics& metrics,
                       const PipelineConsts& consts, const Vec3& x_I,
                       const Vec3& v_I, double clearance_xI,
                       const std::optional<F0Probe>& probe) {
  validate_hydro(hydro, consts.gamma);
  if (!(metrics.volume > 0.0) || !(metrics.d_omega > 0.0) || !(metrics.d > 0.0))
    fail_validation("InvalidScale", "domain metrics must be positive");

  double R0 = std::max(
      1.0, std::sqrt(2.0 * (hydro.M * sq(metrics.d_omega) + metrics.volume * hydro.E_f) /
                     hydro.M));
  double vol_ball = 4.0 * M_PI / 3.0 * R0 * R0 * R0;
  double threshold = hydro.M / (6.0 * vol_ball * metrics.volume);

  Vec3 xi = x_I, vi = v_I;
  double cl = clearance_xI;
  if (probe.has_value()) {
    const F0Probe& pr = *probe;
    if (!pr.f0 || pr.x_candidates.empty() || pr.v_candidates.empty() ||
        pr.x_clearances.size() != pr.x_candidates.size())
      fail_validation("InvalidScale", "probe needs f0, candidates, clearances");
    double best = -kInf;
    std::size_t bx = 0, bv = 0;
    bool found = false;
    for (std::size_t i = 0; i < pr.x_candidates.size(); ++i) {
      if (!(pr.x_clearances[i] > 0.0)) continue;
      for (std::size_t j = 0; j < pr.v_candidates.size(); ++j) {
        if (norm(pr.v_candidates[j]) > R0) continue;
        double val = pr.f0(pr.x_candidates[i], pr.v_candidates[j]);
        if (val > best) { best = val; bx = i; bv = j; found = true; }
      }
    }
    if (!found || !(best > threshold))
      fail_validation("NoMassConcentration",
                      "initial data does not exceed the concentration threshold");
    xi = pr.x_candidates[bx];
    vi = pr.v_candidates[bv];
    cl = pr.x_clearances[bx];
  }
  if (!(cl > 0.0)) fail_validation("InvalidScale", "seed point must be interior");
  if (norm(vi) > R0)
    fail_validation("InvalidScale", "seed velocity exceeds the concentration radius");

  double Delta_I = std::pow(threshold / hydro.modulus_c, 1.0 / hydro.modulus_beta);
  double Delta0 =
      std::min(std::min(Delta_I / (4.0 * R0), Delta_I / 2.0),
               std::min(metrics.d / 10.0, cl / 2.0));
  if (!(Delta0 > 0.0)) fail_validation("InvalidScale", "degenerate seed scale");

  double expo = Delta_I * consts.C_L *
                std::pow(jbracket(2.0 * R0), gamma_pos(consts.gamma)) / (4.0 * R0);
  SeedBound s;
  s.x_I = xi;
  s.v_I = vi;
  s.Delta0 = Delta0;
  s.alpha0_prime = amp_mul(amp_from_double(threshold), amp_from_ln(big_from(-expo)));
  s.R0 = R0;
  s.clearance_xI = cl;
  return s;
}

// ---------- amplitude recursion ----------

namespace {

struct AlphaCtx {
  double elapsed_ln = 0, Delta2_ln = 0, v_abs_ln = -kInf;
  double gp = 0, lnCL = -kInf, lnCQ2 = 0, g3 = 4;
};

struct LevelScales {
  double r_ln, x_ln, w_ln, kap_ln, lnc;
};

LevelScales level_scales(const AlphaCtx& c, double n) {
  LevelScales s;
  s.r_ln = c.Delta2_ln + n * kLnSigma;
  s.x_ln = lse(kLn2 + s.r_ln, c.v_abs_ln);          // 2 r_n + |v'|
  s.w_ln = c.Delta2_ln - (n + 1.0) * kLn2 - s.x_ln; // window width
  s.kap_ln = c.lnCL == -kInf ? -kInf : c.lnCL + c.gp * jbracket_ln(s.x_ln);
  s.lnc = c.lnCQ2 + c.g3 * s.r_ln;
  return s;
}

// ln((1 - e^{-|D|})/|D|), the flat-to-exponential cell factor
double ln_cell_factor(double D) {
  double a = std::fabs(D);
  if (a < 1e-12) return -0.5 * a;
  if (a > 745.0 || !std::isfinite(a)) return std::isfinite(a) ? -std::log(a) : -kInf;
  return std::log1p(-std::exp(-a)) - std::log(a);
}

// Absolute-scale grid over u = t - s in [0, U], U = e^{U_ln}; nodes j/M.
struct AGrid {
  double U_ln = -kInf;
  std::vector<LogAmp> vals;  // size M+1
};

// ln alpha at relative position x in [0,1]; zero endpoints only at the top.
bool agrid_ln_at(const AGrid& g, double x, BigLog* out) {
  int M = int(g.vals.size()) - 1;
  double p = x * M;
  int i = std::min(std::max(int(std::floor(p)), 0), M - 1);
  double t = p - i;
  const LogAmp& a = g.vals[i];
  const LogAmp& b = g.vals[i + 1];
  if (a.zero && b.zero) return false;
  if (b.zero) {
    if (t > 0.999999) return false;
    *out = a.ln;  // flat extension toward the vanishing node; refined away
    return true;
  }
  if (a.zero) {
    if (t < 1e-6) return false;
    *out = b.ln;
    return true;
  }
  *out = big_add(a.ln, big_scale(big_sub(b.ln, a.ln), t));
  return true;
}

// Integral of e^{-kappa (u - u_q)} alpha_src(u)^2 over [u_q, u_hi] expressed in
// the source grid's relative coordinate.
LogAmp agrid_window_integral(const AGrid& src, double a_rel, double b_rel,
                             double kap_ln) {
  int M = int(src.vals.size()) - 1;
  double h = 1.0 / M;
  LogAmp sum = amp_zero();
  int i0 = std::max(0, int(std::floor(a_rel * M)));
  int i1 = std::min(M - 1, int(std::floor(b_rel * M - 1e-15)));
  for (int i = i0; i <= i1; ++i) {
    double c0 = std::max(a_rel, i * h);
    double c1 = std::min(b_rel, (i + 1) * h);
    if (!(c1 > c0)) continue;
    BigLog l0, l1;
    bool ok0 = agrid_ln_at(src, c0, &l0);
    bool ok1 = agrid_ln_at(src, c1, &l1);
    auto decay = [&](double xrel) -> BigLog {
      // -kappa * (u - u_q) at u = xrel * U
      if (kap_ln == -kInf || xrel <= a_rel) return big_from(0.0);
      double e_ln = kap_ln + src.U_ln + std::log(xrel - a_rel);
      return big_neg(big_exp(big_from(e_ln)));
    };
    double seg_ln = std::log(c1 - c0) + src.U_ln;
    if (!ok0 && !ok1) continue;
    if (ok0 && ok1) {
      BigLog e0 = big_add(big_mul_pow2(l0, 1), decay(c0));
      BigLog e1 = big_add(big_mul_pow2(l1, 1), decay(c1));
      double D = big_to_double(big_sub(e1, e0));
      LogAmp piece = amp_from_ln(
          big_add(big_max(e0, e1), big_from(seg_ln + ln_cell_factor(D))));
      sum = amp_add(sum, piece);
    } else {
      // one vanishing endpoint: half-rule on the live one
      BigLog live = ok0 ? big_add(big_mul_pow2(l0, 1), decay(c0))
                        : big_add(big_mul_pow2(l1, 1), decay(c1));
      sum = amp_add(sum, amp_from_ln(big_add(live, big_from(seg_ln - kLn2))));
    }
  }
  return sum;
}

// Relative shape of a level: ln of alpha(t - y w_n)/alpha(t) on y in [0,4].
struct BShape {
  std::vector<double> lnphi;  // size M+1, y_j = 4 j / M
};

double bshape_at(const BShape& s, double y) {
  int M = int(s.lnphi.size()) - 1;
  double p = y * M / 4.0;
  int i = std::min(std::max(int(std::floor(p)), 0), M - 1);
  double t = p - i;
  double a = s.lnphi[i], b = s.lnphi[i + 1];
  if (a == -kInf || b == -kInf) return -kInf;
  return a + (b - a) * t;
}

// J(y) = ln integral_0^1 e^{-kw s} phi(y lam + s)^2 ds  (double log-domain)
double bshape_window_integral(const BShape& src, double y, double lam, double kw) {
  int M = int(src.lnphi.size()) - 1;
  double h = 4.0 / M;
  double lo = y * lam, hi = y * lam + 1.0;
  double acc = -kInf;
  int i0 = std::max(0, int(std::floor(lo / h)));
  int i1 = std::min(M - 1, int(std::floor(hi / h - 1e-15)));
  for (int i = i0; i <= i1; ++i) {
    double c0 = std::max(lo, i * h);
    double c1 = std::min(hi, (i + 1) * h);
    if (!(c1 > c0)) continue;
    double p0 = bshape_at(src, c0), p1 = bshape_at(src, c1);
    if (p0 == -kInf && p1 == -kInf) continue;
    double e0 = 2.0 * p0 - kw * (c0 - lo);
    double e1 = 2.0 * p1 - kw * (c1 - lo);
    double seg = std::log(c1 - c0);
    double piece;
    if (p0 == -kInf || p1 == -kInf) {
      piece = std::max(e0, e1) + seg - kLn2;
    } else {
      piece = std::max(e0, e1) + seg + ln_cell_factor(e1 - e0);
    }
    acc = lse(acc, piece);
  }
  return acc;
}

struct LadderRun {
  std::vector<LogAmp> dense;
  LogAmp final_{};
  int grid_levels = 0;
};

LadderRun run_ladder(const AlphaCtx& c, const LogAmp& A, double n_max, int M_A,
                     int M_B, int dense_cap) {
  LadderRun out;
  out.dense.reserve(std::size_t(std::min(n_max, double(dense_cap))) + 1);
  out.dense.push_back(A);
  if (n_max <= 0) { out.final_ = A; return out; }

  // ---- phase A: absolute grids while the window still reaches the start time
  AGrid prev;
  prev.U_ln = c.elapsed_ln;
  prev.vals.assign(M_A + 1, A);  // level 0 is constant A on [tau, t]
  double n = 0;                  // level already materialized in `prev`
  BShape shape;                  // set at the A->B handoff
  const int kAcap = 4000;
  int acount = 0;
  while (n < n_max) {
    LevelScales sw = level_scales(c, n);  // scales of the window feeding level n+1
    if (sw.w_ln + std::log(3.0) <= c.elapsed_ln) break;  // phase B handles it
    if (++acount > kAcap)
      fail_numerical("DepthOverflow", "window ladder failed to detach from start time");
    LevelScales sn = level_scales(c, n + 1);
    AGrid cur;
    cur.U_ln = std::min(c.elapsed_ln, sn.w_ln + 2.0 * kLn2);
    cur.vals.assign(M_A + 1, amp_zero());
    for (int j = 0; j <= M_A; ++j) {
      double xq = double(j) / M_A;                  // u_q = xq * e^{cur.U_ln}
      double a_rel = xq * std::exp(cur.U_ln - prev.U_ln);
      double w_rel = std::exp(sw.w_ln - prev.U_ln);
      double hi_rel = std::min(a_rel + w_rel, std::exp(c.elapsed_ln - prev.U_ln));
      hi_rel = std::min(hi_rel, 1.0);
      if (!(hi_rel > a_rel)) continue;  // empty window: vanishing value
      LogAmp integral = agrid_window_integral(prev, a_rel, hi_rel, sw.kap_ln);
      cur.vals[j] = amp_mul(amp_from_ln(big_from(sw.lnc)), integral);
    }
    prev = std::move(cur);
    n += 1;
    if (n <= dense_cap) out.dense.push_back(prev.vals[0]);
    out.grid_levels++;
  }
  LogAmp top = (n <= dense_cap) ? out.dense.back() : prev.vals[0];
  if (n >= n_max) { out.final_ = top; return out; }

  // ---- handoff: extract the relative shape of level n from the grid
  {
    LevelScales sn = level_scales(c, n);
    shape.lnphi.assign(M_B + 1, -kInf);
    if (top.zero) { out.final_ = amp_zero(); return out; }
    BigLog top_ln = top.ln;
    for (int j = 0; j <= M_B; ++j) {
      double y = 4.0 * j / M_B;
      if (y == 0.0) { shape.lnphi[j] = 0.0; continue; }
      double u_ln = sn.w_ln + std::log(y);
      if (u_ln > prev.U_ln) continue;  // beyond the grid; never queried
      double xrel = std::exp(u_ln - prev.U_ln);
      BigLog l;
      if (!agrid_ln_at(prev, xrel, &l)) continue;
      shape.lnphi[j] = big_to_double(big_sub(l, top_ln));
    }
  }

  // ---- phase B: evolve the shape; scalar amplitude update per level
  BigLog amp_ln = top.ln;
  double grid_goal = std::min(n_max, n + 900.0);
  const int jump_tail = 400;
  double n_star = -1;
  BigLog amp_star{};
  std::vector<double> Ks;
  Ks.reserve(jump_tail + 8);
  bool jumping = n_max > grid_goal;
  if (jumping) n_star = grid_goal - jump_tail;

  while (n < grid_goal) {
    LevelScales sw = level_scales(c, n);
    LevelScales sn = level_scales(c, n + 1);
    double lam = std::exp(sn.w_ln - sw.w_ln);
    double kw = 0.0;
    if (sw.kap_ln != -kInf) {
      double kw_ln = sw.kap_ln + sw.w_ln;
      kw = kw_ln > 700.0 ? kInf : std::exp(kw_ln);
    }
    double J0 = bshape_window_integral(shape, 0.0, lam, kw);
    if (J0 == -kInf) { out.final_ = amp_zero(); return out; }
    // new shape
    BShape next;
    int Ms = int(shape.lnphi.size()) - 1;
    next.lnphi.assign(Ms + 1, -kInf);
    for (int j = 0; j <= Ms; ++j) {
      double y = 4.0 * j / Ms;
      double Jy = bshape_window_integral(shape, y, lam, kw);
      next.lnphi[j] = (Jy == -kInf) ? -kInf : Jy - J0;
    }
    double K = sw.lnc + sw.w_ln + J0;
    if (jumping && n >= n_star && Ks.empty()) amp_star = amp_ln;
    if (jumping && n >= n_star) Ks.push_back(K);
    amp_ln = big_add(big_mul_pow2(amp_ln, 1), big_from(K));
    shape = std::move(next);
    n += 1;
    if (n <= dense_cap) out.dense.push_back(amp_from_ln(amp_ln));
  }

  if (!jumping || n >= n_max) {
    out.final_ = amp_from_ln(amp_ln);
    return out;
  }

  // ---- deep jump: ln a_n = 2^{n-n*} (ln a_{n*} + sum K_k 2^{n*-k-1})
  double S = 0.0;
  for (std::size_t k = 0; k < Ks.size(); ++k)
    S += Ks[k] * std::pow(2.0, -double(k) - 1.0);
  BigLog bracket = big_add(amp_star, big_from(S));
  double steps = n_max - n_star;
  BigLog res;
  if (steps > 4.0e18) {
    res = big_mul_pow2(bracket, int64_t(4.0e18));
    res.sat = true;
  } else {
    res = big_mul_pow2(bracket, int64_t(steps));
  }
  out.final_ = amp_from_ln(res);
  return out;
}

}  // namespace

AlphaSeq alpha_recursion_ln(double elapsed_ln, double Delta2_ln, const LogAmp& A,
                            double v_abs_ln, double n_max,
                            const PipelineConsts& consts) {
  if (!(n_max >= 0)) fail_validation("InvalidScale", "ladder depth must be >= 0");
  if (!std::isfinite(elapsed_ln) || !std::isfinite(Delta2_ln))
    fail_validation("InvalidScale", "elapsed time and scale must be positive");
  if (!amp_positive(A))
    fail_validation("InvalidScale", "base amplitude must be positive");
  if (!(consts.C_Q > 0.0))
    fail_validation("InvalidScale", "spreading constant must be positive");

  AlphaCtx c;
  c.elapsed_ln = elapsed_ln;
  c.Delta2_ln = Delta2_ln;
  c.v_abs_ln = v_abs_ln;
  c.gp = gamma_pos(consts.gamma);
  c.lnCL = consts.C_L > 0.0 ? std::log(consts.C_L) : -kInf;
  c.lnCQ2 = std::log(consts.C_Q / 2.0);
  c.g3 = 3.0 + consts.gamma;

  const int dense_cap = 1200;
  AlphaSeq out;
  out.n_max = n_max;

  LadderRun best;
  LogAmp prev_final;
  bool have_prev = false;
  int passes = 0;
  const int grids[3][2] = {{128, 96}, {256, 192}, {512, 384}};
  for (const auto& g : grids) {
    best = run_ladder(c, A, n_max, g[0], g[1], dense_cap);
    ++passes;
    if (have_prev) {
      if (best.final_.zero && prev_final.zero) { out.converged = true; break; }
      if (amp_saturated(best.final_) && amp_saturated(prev_final)) {
        out.converged = true;
        break;
      }
      if (!best.final_.zero && !prev_final.zero) {
        BigLog diff = big_sub(best.final_.ln, prev_final.ln);
        if (big_is_neg(diff)) diff = big_neg(diff);
        BigLog mag = best.final_.ln;
        if (big_is_neg(mag)) mag = big_neg(mag);
        BigLog scale = big_scale(big_add(big_from(1.0), mag), 1e-6);
        if (big_cmp(diff, scale) <= 0) { out.converged = true; break; }
      }
    }
    prev_final = best.final_;
    have_prev = true;
  }
  out.refinements = passes - 1;
  out.grid_levels = best.grid_levels;
  out.alpha = std::move(best.dense);
  out.alpha_final = best.final_;
  out.dense_n = int(out.alpha.size()) - 1;
  out.r_ln.resize(out.alpha.size());
  out.t_off_ln.resize(out.alpha.size());
  for (int i = 0; i <= out.dense_n; ++i) {
    LevelScales s = level_scales(c, i);
    out.r_ln[i] = s.r_ln;
    out.t_off_ln[i] = std::min(s.w_ln, elapsed_ln);
  }
  return out;
}

AlphaSeq alpha_recursion(double tau, double t, double Delta2, const LogAmp& A,
                         double v_abs, double n_max, const PipelineConsts& consts) {
  if (!(t > tau)) fail_validation("InvalidScale", "need t > tau");
  if (!(Delta2 > 0.0)) fail_validation("InvalidScale", "scale must be positive");
  return alpha_recursion_ln(std::log(t - tau), std::log(Delta2), A,
                            v_abs > 0 ? std::log(v_abs) : -kInf, n_max, consts);
}

// ---------- single-segment propagation ----------

namespace {

// least ladder depth moving a Delta2-ball across the domain in time Delta1
double min_depth(double ln4dom_over_D1, double y1_ln, double Delta2_ln,
                 double y2_ln) {
  double mid = ceil_ratio(lse(lse(ln4dom_over_D1, y1_ln), 0.0) - Delta2_ln, kLnSigma);
  double third = ceil_ratio(lse(Delta2_ln, 0.0) - y2_ln, kLn2);
  return std::max(1.0, std::max(mid, third));
}

}  // namespace

SegmentPropagation segment_propagation(double tau, double Delta1, double Delta2,
                                       double v_abs, double clearance,
                                       const DomainMetrics& metrics,
                                       const PipelineConsts& consts) {
  if (!(Delta1 > 0.0 && Delta1 <= 0.5) || !(Delta2 > 0.0 && Delta2 <= 0.5))
    fail_validation("InvalidScale", "segment scales must lie in (0, 1/2]");
  if (!(clearance > 0.0))
    fail_validation("InvalidScale", "segment clearance must be positive");
  if (!(tau >= 0.0)) fail_validation("InvalidScale", "start time must be >= 0");
  double dom = metrics.d_omega;
  if (!(dom > 0.0)) fail_validation("InvalidScale", "domain diameter must be positive");

  double D1_ln = std::log(Delta1), D2_ln = std::log(Delta2);
  double v_ln = v_abs > 0 ? std::log(v_abs) : -kInf;
  double ln4d = std::log(4.0 * dom);
  double m_min = min_depth(ln4d - D1_ln, v_ln, D2_ln, std::log(clearance));

  SegmentPropagation out;
  out.m_min = m_min;
  out.v_cap = 4.0 * dom / Delta1;
  double gp = gamma_pos(consts.gamma);
  double lnCL = consts.C_L > 0 ? std::log(consts.C_L) : -kInf;
  double decay_ln =
      lnCL == -kInf ? -kInf : lnCL + gp * jbracket_ln(lse(ln4d - D1_ln, 0.0));
  LogAmp decay = exp_neg_ln(decay_ln);

  auto D_of = [=](double m) {
    return Delta1 * Delta2 / (std::pow(2.0, m + 2.0) * (4.0 * dom + Delta1));
  };
  out.D = D_of(m_min);
  out.T = std::max(tau + Delta1 / 2.0, tau + Delta1 - out.D);
  out.ball_radius = Delta2 / std::pow(2.0, m_min + 1.0);

  PipelineConsts cc = consts;
  out.amplify = [=](const LogAmp& A, double m) -> LogAmp {
    double mm = std::max(m, m_min);
    AlphaSeq seq = alpha_recursion_ln(D1_ln - 2.0 * kLn2, D2_ln, A, v_ln, mm, cc);
    return amp_mul(seq.alpha_final, decay);
  };
  out.velocity = [=](const Vec3& y, const Vec3& xp) -> Vec3 {
    double den = std::max(Delta1 / 2.0, Delta1 - D_of(m_min));
    return (y - xp) * (2.0 / den);
  };
  return out;
}

// ---------- zigzag chain ----------

ChainBound zigzag_chain(const SeedBound& seed, const Zigzag& zigzag,
                        double tau2_frac, const DomainMetrics& metrics,
                        const PipelineConsts& consts, double chain_len) {
  if (!(tau2_frac > 0.0 && tau2_frac < 1.0))
    fail_validation("InvalidScale", "tau2 must lie strictly inside (0, Delta0)");
  if (!(seed.Delta0 > 0.0) || !amp_positive(seed.alpha0_prime))
    fail_validation("InvalidScale", "seed must carry a positive scale and amplitude");
  double S = double(zigzag.n_segments);
  double J = chain_len > 0 ? chain_len : S;
  if (!(J >= 1)) fail_validation("InvalidScale", "chain must have at least one segment");
  if (S > 0 && zigzag.waypoints.size() != std::size_t(zigzag.n_segments) + 1)
    fail_validation("InvalidScale", "zigzag waypoints inconsistent with segment count");

  double d = metrics.d, dom = metrics.d_omega;
  if (!(d > 0.0 && dom > 0.0))
    fail_validation("InvalidScale", "domain metrics must be positive");
  double D0_ln = std::log(seed.Delta0);
  double tau2_ln = std::log(tau2_frac) + D0_ln;
  double ln2d = std::log(2.0 * dom), ln4d = std::log(4.0 * dom);
  double gp = gamma_pos(consts.gamma);
  double lnCL = consts.C_L > 0 ? std::log(consts.C_L) : -kInf;
  double v_I_ln = norm(seed.v_I) > 0 ? std::log(norm(seed.v_I)) : -kInf;
  double lnd10 = std::log(d / 10.0);

  ChainBound out;
  out.tau2_ln = tau2_ln;
  out.Delta0_ln = D0_ln;
  out.d = d;
  out.d_omega = dom;
  out.chain_len = J;
  out.n_levels.assign(1, 0.0);
  out.T.assign(1, 0.0);
  out.G_ln.assign(1, tau2_ln);
  out.gap_ln.assign(1, -kInf);
  out.D_ln.assign(1, -kInf);
  out.U_excess_ln.assign(1, -kInf);
  out.amp.assign(1, seed.alpha0_prime);
  out.vel.assign(1, VelLn{});

  double sum_levels = 0.0;        // sum of (n_k + 1)
  double G_prev_ln = tau2_ln;     // deficit tau2 - T_{j-1}
  double D_prev_ln = -kInf;       // previous window extension
  double exc_ln = lde(D0_ln, tau2_ln);  // U_1 - tau2 = Delta0 - tau2
  LogAmp amp_prev = seed.alpha0_prime;
  LogAmp amp_min_fold = amp_prev;
  double speed_ln = -kInf;
  double tau2_d = std::exp(tau2_ln);

  for (double j = 1; j <= J; j += 1) {
    double D2_ln = D0_ln - sum_levels * kLn2;  // current ball scale
    double y1_ln, y2_ln;
    if (j == 1) {
      y1_ln = v_I_ln;
      y2_ln = std::log(std::min(seed.clearance_xI, d / 10.0));
    } else {
      y1_ln = ln2d - out.gap_ln.back();  // 2 d_Omega / previous gap
      y2_ln = lnd10;
    }
    double n_j = min_depth(ln4d - G_prev_ln, y1_ln, D2_ln, y2_ln);

    double D_j_ln = G_prev_ln + D2_ln - (n_j + 2.0) * kLn2 - lse(ln4d, G_prev_ln);
    double G_j_ln = std::min(G_prev_ln - kLn2, D_j_ln);
    double gap_j_ln = lde(G_prev_ln, G_j_ln);

    // time-chain sanity: deficits halve at least, windows shrink
    if (!(G_j_ln < G_prev_ln))
      fail_numerical("MonotonicityViolation", "chain arrival times not increasing");
    if (j >= 2 && !(D_j_ln < D_prev_ln))
      fail_numerical("MonotonicityViolation", "chain windows not shrinking");

    // amplitude across segment j
    double decay_ln =
        lnCL == -kInf ? -kInf : lnCL + gp * jbracket_ln(lse(ln4d - G_prev_ln, 0.0));
    AlphaSeq seq = alpha_recursion_ln(G_prev_ln - 2.0 * kLn2, D2_ln, amp_prev,
                                      y1_ln, n_j, consts);
    LogAmp amp_j = amp_mul(seq.alpha_final, exp_neg_ln(decay_ln));

    if (j >= 2) exc_ln = std::min(exc_ln, D_prev_ln);

    out.n_levels.push_back(n_j);
    out.T.push_back(tau2_d - std::exp(G_j_ln));
    out.G_ln.push_back(G_j_ln);
    out.gap_ln.push_back(gap_j_ln);
    out.D_ln.push_back(D_j_ln);
    out.U_excess_ln.push_back(exc_ln);
    out.amp.push_back(amp_j);
    if (j <= S) {
      std::size_t k = std::size_t(j);
      out.vel.push_back(velln_scaled_diff(zigzag.waypoints[k],
                                          zigzag.waypoints[k - 1], gap_j_ln));
    }
    amp_min_fold = amp_min(amp_min_fold, amp_j);
    speed_ln = std::max(speed_ln, ln2d - gap_j_ln);

    sum_levels += n_j + 1.0;
    G_prev_ln = G_j_ln;
    D_prev_ln = D_j_ln;
    amp_prev = amp_j;
  }

  out.speed_bound_ln = speed_ln;
  out.amp_min = amp_min_fold;
  out.dx_ln = D0_ln - sum_levels * kLn2;
  double half_slack = lde(D0_ln, tau2_ln) - kLn2;  // (Delta0 - tau2)/2
  out.dt_ln = std::min(std::min(half_slack, G_prev_ln),
                       std::min(exc_ln, D_prev_ln));
  out.ball_ln = std::min(out.dx_ln, out.dt_ln);
  if (!(out.dx_ln <= lnd10 + 1e-9))
    fail_numerical("MonotonicityViolation", "final ball exceeds the chart scale");
  if (!out.vel.empty()) out.vel_end = out.vel.back();
  return out;
}

std::vector<VelLn> chain_velocities(const ChainBound& chain, const Zigzag& z) {
  if (z.waypoints.size() != std::size_t(z.n_segments) + 1 ||
      std::size_t(z.n_segments) >= chain.gap_ln.size())
    fail_validation("InvalidScale", "zigzag longer than the certified chain");
  std::vector<VelLn> v;
  v.reserve(std::size_t(z.n_segments));
  for (int j = 1; j <= z.n_segments; ++j)
    v.push_back(velln_scaled_diff(z.waypoints[std::size_t(j)],
                                  z.waypoints[std::size_t(j) - 1],
                                  chain.gap_ln[std::size_t(j)]));
  return v;
}

// ---------- uniform cover bounds ----------

CoverBound uniform_cover_bounds(const ChainBound& chain, const LandmarkSet& lms,
                                int N, const DomainMetrics& metrics,
                                const PipelineConsts& consts,
                                const std::vector<Vec3>& centers,
                                const DomainSpec* dom) {
  (void)metrics;
  if (N < 0) fail_validation("InvalidScale", "cover level must be >= 0");
  if (lms.all.empty()) fail_validation("InvalidScale", "landmark set is empty");
  double d = chain.d, domega = chain.d_omega;
  double b_ln = chain.ball_ln, R_ln = chain.speed_bound_ln;
  double ln4d = std::log(4.0 * domega), ln2d = std::log(2.0 * domega);
  double gp = gamma_pos(consts.gamma);
  double lnCL = consts.C_L > 0 ? std::log(consts.C_L) : -kInf;

  CoverBound out;
  out.tau2_ln = chain.tau2_ln;
  out.d = d;
  out.d_omega = domega;
  out.ball_ln = b_ln;
  out.speed_chain_ln = R_ln;
  out.amp_chain = chain.amp_min;

  double npp = min_depth(ln4d - b_ln, R_ln, b_ln, std::log(d / 16.0));
  out.n_levels = npp;

  double Dpp_ln = 2.0 * b_ln - (npp + 2.0) * kLn2 - lse(ln4d, b_ln);
  double den_ln = std::max(b_ln - kLn2, lde(b_ln, Dpp_ln));
  double R1_ln = ln2d - den_ln;
  out.speed_min_ln = std::max(R1_ln, kLn2);

  double min_depth_lm = kInf;
  for (double c : lms.depth_lb) min_depth_lm = std::min(min_depth_lm, c);
  if (!(min_depth_lm > 0.0))
    fail_validation("InvalidScale", "landmarks must be interior");
  out.min_landmark_depth = min_depth_lm;

  out.delta_x_ln = std::min(
      std::min(std::log(min_depth_lm / 4.0), std::log(d / 56.0)),
      std::min(b_ln - (npp + 2.0) * kLn2, ln2d - b_ln));
  out.delta_v_ln = out.delta_x_ln;
  out.delta_t_ln = std::min(Dpp_ln, out.delta_x_ln);
  out.cover_radius_ln = out.delta_x_ln - double(N) * kLn2;
  out.count_bound_ln = 3.0 * (std::log(3.0 * domega) - out.cover_radius_ln);

  // uniform amplitude: worst of the centered and the shifted window bound
  AlphaSeq s1 = alpha_recursion_ln(b_ln - kLn2, b_ln, chain.amp_min, R_ln, npp, consts);
  LogAmp a_center = amp_mul(
      s1.alpha_final,
      exp_neg_ln(lnCL == -kInf ? -kInf : lnCL + gp * jbracket_ln(lse(R1_ln, 0.0))));
  AlphaSeq s2 = alpha_recursion_ln(b_ln - 2.0 * kLn2, b_ln, chain.amp_min, R_ln,
                                   npp, consts);
  LogAmp a_shift = amp_mul(
      s2.alpha_final,
      exp_neg_ln(lnCL == -kInf ? -kInf
                               : lnCL + gp * jbracket_ln(lse(ln4d - b_ln, 0.0))));
  out.a0 = amp_min(a_center, a_shift);

  // representative centers
  std::vector<Vec3> pts = centers;
  if (pts.empty()) pts = lms.all;
  out.points.reserve(pts.size());
  for (const Vec3& x : pts) {
    CoverPointBound p;
    p.x = x;
    double clearance = dom ? dom->clearance_lb(x) : kInf;
    p.near_boundary = dom && clearance <= d / 7.0;
    int anchor = -1;
    double bestd = kInf;
    if (p.near_boundary) {
      for (std::size_t k = 0; k < lms.chart_x0.size(); ++k) {
        double dd = dist(x, lms.chart_x0[k]);
        if (dd < bestd) { bestd = dd; anchor = int(k); }
      }
      if (anchor < 0 || bestd > 7.0 * d / 24.0 * 1.05) p.near_boundary = false;
    }
    if (!p.near_boundary) {
      bestd = kInf;
      for (std::size_t k = 0; k < lms.all.size(); ++k) {
        double dd = dist(x, lms.all[k]);
        if (dd < bestd) { bestd = dd; anchor = int(k); }
      }
      if (bestd > d / 16.0 * 1.05)
        fail_validation("InvalidScale", "center not covered by any landmark ball");
    }
    const Vec3& y0 = p.near_boundary ? lms.y1[std::size_t(anchor)]
                                     : lms.all[std::size_t(anchor)];
    p.anchor = anchor;
    p.vbar = velln_scaled_diff(x, y0, den_ln);
    out.points.push_back(p);
  }
  return out;
}

// ---------- boundary flux ----------

FluxBound boundary_flux_lower(const CoverBound& cover,
                              const DomainMetrics& metrics,
                              const PipelineConsts& consts) {
  (void)metrics;
  double d = cover.d, domega = cover.d_omega;
  double b_ln = cover.ball_ln, R_ln = cover.speed_chain_ln;
  double ln4d = std::log(4.0 * domega), ln2d = std::log(2.0 * domega);
  double gp = gamma_pos(consts.gamma);
  double lnCL = consts.C_L > 0 ? std::log(consts.C_L) : -kInf;

  FluxBound out;
  double mid = ceil_ratio(lse(lse(ln4d - b_ln, R_ln), 0.0) - b_ln, kLnSigma);
  double m_bd = std::max(1.0, mid);
  out.m_levels = m_bd;

  double Dm_ln = 2.0 * b_ln - (m_bd + 2.0) * kLn2 - lse(ln4d, b_ln);
  double den_ln = std::max(b_ln - kLn2, lde(b_ln, Dm_ln));
  out.speed_min_ln = ln2d - den_ln;

  AlphaSeq s = alpha_recursion_ln(b_ln - kLn2, b_ln, cover.amp_chain, R_ln, m_bd,
                                  consts);
  out.A_prime = amp_mul(
      s.alpha_final,
      exp_neg_ln(lnCL == -kInf
                     ? -kInf
                     : lnCL + gp * jbracket_ln(lse(out.speed_min_ln, 0.0))));
  out.delta_vi_ln = -(m_bd + 2.0) * kLn2;
  out.delta_ti_ln = Dm_ln;
  out.vn_floor_ln = std::log(5.0 * d / 16.0) - b_ln;

  double vball_ln = std::min(out.delta_vi_ln, out.vn_floor_ln);
  out.b_tau = amp_mul(
      amp_mul(out.A_prime, amp_from_ln(big_from(out.vn_floor_ln))),
      amp_from_ln(big_from(std::log(4.0 * M_PI / 3.0) + 3.0 * vball_ln)));
  return out;
}

// ---------- mixed wall iteration ----------

IterationBound mixed_iteration(const CoverBound& cover, const FluxBound& flux,
                               const HydroBounds& hydro,
                               const PipelineConsts& consts, double gap_frac,
                               double xi, int N) {
  if (hydro.accommodation >= 1.0)
    fail_validation("InvalidAlpha", "mixed iteration needs accommodation < 1");
  if (!(xi > 0.0 && xi < 0.25))
    fail_validation("InvalidScale", "contraction parameter must lie in (0, 1/4)");
  if (!(gap_frac > 0.0 && gap_frac <= 1.0))
    fail_validation("InvalidScale", "window fraction must lie in (0, 1]");
  if (N < 1) fail_validation("InvalidScale", "need at least one iteration level");

  IterationBound out;
  out.xi = xi;
  out.delta_v_ln = cover.delta_v_ln;
  out.speed_min_ln = cover.speed_min_ln;
  out.delta_td_ln =
      std::min(std::min(cover.delta_x_ln, cover.delta_t_ln), flux.delta_ti_ln);
  out.gap_ln = std::log(gap_frac) + out.delta_td_ln;
  out.b_tau = flux.b_tau;
  out.a0 = cover.a0;
  out.one_minus_accom = 1.0 - hydro.accommodation;
  out.T_B = hydro.T_B;
  out.tau2_ln = cover.tau2_ln;

  double gp = gamma_pos(consts.gamma);
  double lnCL = consts.C_L > 0 ? std::log(consts.C_L) : -kInf;
  double lnTB = std::log(hydro.T_B);
  double R_ln = cover.speed_min_ln;

  LogAmp wall_pref = amp_mul(
      amp_from_double(out.one_minus_accom / (2.0 * M_PI * hydro.T_B * hydro.T_B)),
      flux.b_tau);

  out.r_ln.resize(std::size_t(N) + 1);
  out.a.resize(std::size_t(N) + 1);
  out.b.resize(std::size_t(N) + 1);
  out.balls.resize(std::size_t(N) + 1);
  out.r_ln[0] = cover.delta_v_ln;
  out.a[0] = cover.a0;
  out.b[0] = amp_min(flux.b_tau, cover.a0);

  auto wall_branch = [&](double rn_ln) -> LogAmp {
    double X_ln = lse(R_ln, rn_ln);
    double e1 = lnCL == -kInf ? -kInf
                              : lnCL + out.gap_ln + gp * jbracket_ln(X_ln);
    double e2 = 2.0 * X_ln - (kLn2 + lnTB);
    return amp_mul(wall_pref, amp_mul(exp_neg_ln(e1), exp_neg_ln(e2)));
  };

  for (int n = 1; n <= N; ++n) {
    double xin = std::pow(xi, n);
    out.r_ln[n] = out.r_ln[n - 1] + 0.5 * kLn2 + std::log1p(-xin);
    double X_ln = lse(R_ln, out.r_ln[n]);
    // interior branch
    LogAmp base = amp_pow(amp_min(out.a[n - 1], out.b[n - 1]), 2.0);
    double lin = std::log(consts.C_Q) + (3.0 + consts.gamma) * out.r_ln[n - 1] +
                 0.5 * n * std::log(xi) + out.gap_ln - (n + 1.0) * kLn2 - X_ln;
    double edec = lnCL == -kInf
                      ? -kInf
                      : lnCL + out.gap_ln + gp * jbracket_ln(X_ln) -
                            n * kLn2 - X_ln;
    out.a[n] = amp_mul(amp_mul(base, amp_from_ln(big_from(lin))), exp_neg_ln(edec));
    // wall branch
    LogAmp bw = wall_branch(out.r_ln[n]);
    out.b[n] = (n == 1) ? amp_min(bw, out.a[1]) : bw;

    BallBound& ball = out.balls[n];
    ball.amplitude = amp_min(out.a[n], out.b[n]);
    ball.v_radius_ln = out.r_ln[n];
    ball.x_radius_ln = cover.delta_x_ln;
    double inv_ln = -(n + 1.0) * kLn2 - X_ln;
    ball.t_lo_off_ln = out.gap_ln + std::log1p(-std::exp(inv_ln));
    ball.t_hi_off_ln = out.gap_ln;
  }
  out.balls[0].amplitude = out.b[0];
  out.balls[0].v_radius_ln = out.r_ln[0];
  out.balls[0].x_radius_ln = cover.delta_x_ln;
  out.balls[0].t_lo_off_ln = -kInf;
  out.balls[0].t_hi_off_ln = out.gap_ln;
  return out;
}

// ---------- Gaussian envelope extraction ----------

ExtractDetail maxwellian_extract(const IterationBound& it,
                                 const PipelineConsts& consts, double xi) {
  if (!(xi > 0.0 && xi < 0.25))
    fail_validation("InvalidScale", "contraction parameter must lie in (0, 1/4)");
  if (it.b.size() < 2)
    fail_validation("InvalidScale", "need at least two iteration levels");

  ExtractDetail out;
  // c_r = delta_V * prod (1 - xi^i)
  double prod_ln = 0.0;
  for (int i = 1; i <= 4000; ++i) {
    double term = std::log1p(-std::pow(xi, i));
    prod_ln += term;
    if (std::fabs(term) < 1e-18) break;
  }
  out.c_r_ln = it.delta_v_ln + prod_ln;

  double R_ln = it.speed_min_ln, dV_ln = it.delta_v_ln;
  double tau2_ln = it.tau2_ln, lnTB = std::log(it.T_B);
  double gpp = gamma_pos(consts.gamma);
  double lnCL = consts.C_L > 0.0 ? std::log(consts.C_L) : -kInf;

  // C1: wall-branch floor constant
  LogAmp pref = amp_mul(amp_from_double(it.one_minus_accom /
                                        (2.0 * M_PI * it.T_B * it.T_B)),
                        it.b_tau);
  double e1 = lnCL == -kInf ? -kInf
                            : lnCL + std::log(8.0) + tau2_ln + gpp * R_ln;
  double e2 = 2.0 * R_ln - lnTB;
  LogAmp C1 = amp_mul(pref, amp_mul(exp_neg_ln(e1), exp_neg_ln(e2)));

  double e3 = lse(lnCL == -kInf ? -kInf : lnCL + kLn2 + tau2_ln + gpp * R_ln,
                  -lnTB) +
              2.0 * dV_ln;
  LogAmp A1 = amp_min(it.b[0],
                      amp_min(amp_pow(it.b[1], 0.5),
                              amp_mul(amp_min(C1, amp_one()), exp_neg_ln(e3))));

  // C2, C3, lambda
  double eC2 = lnCL == -kInf
                   ? -kInf
                   : lnCL + lse(tau2_ln + gpp * lse(0.0, R_ln),
                                tau2_ln + gpp * dV_ln) -
                         R_ln;
  LogAmp C2 = amp_mul(amp_from_ln(big_from(std::log(consts.C_Q) + it.gap_ln)),
                      exp_neg_ln(eC2));
  LogAmp C3 = amp_mul(C2, amp_from_ln(big_from(
                              (3.0 + consts.gamma) * (out.c_r_ln - kLn2) -
                              std::log(4.0) - lse(R_ln, dV_ln))));
  double t_ln = 0.5 * consts.gamma * kLn2 + 0.5 * std::log(xi);
  LogAmp lam = amp_min(amp_one(),
                       amp_min(amp_from_ln(big_from(t_ln)),
                               amp_mul(C3, amp_from_ln(big_from(t_ln)))));
  LogAmp A2 = amp_mul(amp_pow(lam, 2.0), A1);

  return envelope_from_bases(A1, A2, lam, out.c_r_ln);
}

ExtractDetail envelope_from_bases(const LogAmp& A1, const LogAmp& A2,
                                  const LogAmp& lambda, double c_r_ln) {
  ExtractDetail out;
  out.c_r_ln = c_r_ln;
  LogAmp A = amp_min(A1, A2);

  const double cap = 1.0 - 1e-9;
  if (!A.zero && big_cmp(A.ln, big_from(std::log(cap))) > 0) {
    out.degenerate = true;
    A = amp_from_double(cap);
  }
  if (A.zero || amp_saturated(A))
    fail_numerical("DegenerateEnvelope", "extraction produced no usable base");

  out.A1 = A1;
  out.A2 = A2;
  out.A_script = A;
  out.lambda = lambda;
  out.env.rho = A;
  out.env.K = 2.0;
  BigLog negln = big_neg(A.ln);  // ln(1/A) > 0
  // shaved by 1e-9 (relative) so the shell domination below survives the
  // rounding of this value to a double; a smaller theta only weakens the
  // published envelope.
  out.env.theta_ln = 2.0 * c_r_ln - std::log(4.0) -
                     big_to_double(big_log(negln)) - 1e-9;

  // shell-by-shell domination: rho e^{-X^2/(2 theta)} <= A^{2^{n+1}} at
  // X = c_r 2^{n/2}
  int ok = 0;
  for (int n = 0; n <= 40; ++n) {
    double expo_ln = 2.0 * c_r_ln + n * kLn2 - kLn2 - out.env.theta_ln;
    BigLog lhs = big_sub(A.ln, big_exp(big_from(expo_ln)));
    BigLog rhs = big_mul_pow2(A.ln, n + 1);
    if (big_cmp(lhs, rhs) <= 0) ok = n + 1; else break;
  }
  out.shells_checked = ok;
  return out;
}

}  // namespace kinlb
