#include "kinlb/covers.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <thread>

#include "kinlb/error.hpp"
#include "kinlb/rng.hpp"

namespace kinlb {

namespace {

uint64_t cell_key(int64_t ix, int64_t iy, int64_t iz) {
  uint64_t h = mix64((uint64_t)ix * 0x9e3779b97f4a7c15ull);
  h = mix64(h ^ (uint64_t)iy * 0xc2b2ae3d27d4eb4full);
  return mix64(h ^ (uint64_t)iz * 0x165667b19e3779f9ull);
}

int64_t cell_of(double v, double cell) { return (int64_t)std::floor(v / cell); }

struct HashGrid {
  double cell = 1.0;
  std::unordered_map<uint64_t, std::vector<int32_t>> map;

  void insert(Vec3 p, int32_t idx) {
    map[cell_key(cell_of(p.x, cell), cell_of(p.y, cell), cell_of(p.z, cell))]
        .push_back(idx);
  }

  template <class Fn>
  void for_near(Vec3 p, double r, Fn&& fn) const {
    int64_t x0 = cell_of(p.x - r, cell), x1 = cell_of(p.x + r, cell);
    int64_t y0 = cell_of(p.y - r, cell), y1 = cell_of(p.y + r, cell);
    int64_t z0 = cell_of(p.z - r, cell), z1 = cell_of(p.z + r, cell);
    for (int64_t ix = x0; ix <= x1; ix++)
      for (int64_t iy = y0; iy <= y1; iy++)
        for (int64_t iz = z0; iz <= z1; iz++) {
          auto it = map.find(cell_key(ix, iy, iz));
          if (it == map.end()) continue;
          for (int32_t j : it->second) fn(j);
        }
  }

  bool any_within(const std::vector<Vec3>& pts, Vec3 p, double r) const {
    bool found = false;
    double r2 = r * r;
    int64_t x0 = cell_of(p.x - r, cell), x1 = cell_of(p.x + r, cell);
    int64_t y0 = cell_of(p.y - r, cell), y1 = cell_of(p.y + r, cell);
    int64_t z0 = cell_of(p.z - r, cell), z1 = cell_of(p.z + r, cell);
    for (int64_t ix = x0; ix <= x1 && !found; ix++)
      for (int64_t iy = y0; iy <= y1 && !found; iy++)
        for (int64_t iz = z0; iz <= z1 && !found; iz++) {
          auto it = map.find(cell_key(ix, iy, iz));
          if (it == map.end()) continue;
          for (int32_t j : it->second)
            if (norm2(pts[(size_t)j] - p) <= r2) {
              found = true;
              break;
            }
        }
    return found;
  }
};

// Waist clearance of the union of two depth-r balls joined by a segment of
// length s: every segment point owns an inscribed ball of this radius.
double waist_clearance(double r, double s) {
  double w2 = r * r - 0.25 * s * s;
  return w2 > 0 ? std::sqrt(w2) : 0.0;
}

struct Attach {
  int32_t vertex = -1;
  double clearance = 0.0;
};

Attach attach_endpoint(const LandmarkSet& lms, const DomainSpec& spec, Vec3 x) {
  double d = lms.d;
  double tol_clear = 1e-4 * d;
  double cl_x = spec.clearance_lb(x);
  if (cl_x <= 0.0)
    fail_validation("PreconditionViolated", "zigzag endpoint must be interior");
  double threshold = std::min(cl_x, d / 10.0) - tol_clear;

  std::vector<std::pair<double, int32_t>> cand;
  if (cl_x >= d / 8.0) {
    // Deep endpoint: hop to a nearby interior cover center.
    for (double r = lms.r_net; cand.empty() && r <= 4.0 * d; r *= 2.0) {
      for (int32_t j : lms.near(x, r))
        if (j >= (int32_t)lms.y1.size()) cand.push_back({dist(x, lms.all[(size_t)j]), j});
    }
  } else {
    // Near-boundary endpoint: descend to the shifted center of a chart whose
    // d/4 ball contains x. The filter carries d/16 slack for the gap of the
    // sampled chart net; the segment certificate below keeps this sound.
    for (size_t i = 0; i < lms.y1.size(); i++) {
      double s = dist(x, lms.chart_x0[i]);
      if (s <= d / 4.0 + d / 16.0) cand.push_back({s, (int32_t)i});
    }
  }
  std::sort(cand.begin(), cand.end());
  if (cand.size() > 16) cand.resize(16);
  for (auto& [s_to_ref, j] : cand) {
    Vec3 y = lms.all[(size_t)j];
    double s = dist(x, y);
    if (cl_x >= d / 8.0 && s <= lms.edge_len_max) {
      double w = waist_clearance(std::min(cl_x, lms.depth_lb[(size_t)j]), s);
      if (w >= threshold) return {j, w};
    }
    double cert = segment_clearance(spec, x, y, tol_clear);
    if (cert >= threshold) return {j, cert};
  }
  fail_validation("Unreachable", "no certified attachment segment from endpoint");
}

// Breadth-first distances from src over the implicit landmark graph.
// Stops early once dst is settled (dst < 0 scans everything).
std::vector<int32_t> bfs_from(const LandmarkSet& lms, int32_t src, int32_t dst,
                              std::vector<int32_t>* parent_out) {
  std::vector<int32_t> dist(lms.all.size(), -1);
  std::vector<int32_t> parent(lms.all.size(), -1);
  std::deque<int32_t> q;
  dist[(size_t)src] = 0;
  q.push_back(src);
  while (!q.empty()) {
    int32_t u = q.front();
    q.pop_front();
    if (u == dst) break;
    for (int32_t v : lms.neighbors(u)) {
      if (dist[(size_t)v] >= 0) continue;
      dist[(size_t)v] = dist[(size_t)u] + 1;
      parent[(size_t)v] = u;
      q.push_back(v);
    }
  }
  if (parent_out) *parent_out = std::move(parent);
  return dist;
}

}  // namespace

std::vector<int32_t> LandmarkSet::near(Vec3 p, double r) const {
  std::vector<int32_t> out;
  double r2 = r * r;
  int64_t x0 = cell_of(p.x - r, cell), x1 = cell_of(p.x + r, cell);
  int64_t y0 = cell_of(p.y - r, cell), y1 = cell_of(p.y + r, cell);
  int64_t z0 = cell_of(p.z - r, cell), z1 = cell_of(p.z + r, cell);
  for (int64_t ix = x0; ix <= x1; ix++)
    for (int64_t iy = y0; iy <= y1; iy++)
      for (int64_t iz = z0; iz <= z1; iz++) {
        auto it = grid.find(cell_key(ix, iy, iz));
        if (it == grid.end()) continue;
        for (int32_t j : it->second)
          if (norm2(all[(size_t)j] - p) <= r2) out.push_back(j);
      }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int32_t> LandmarkSet::neighbors(int i) const {
  std::vector<int32_t> out = near(all[(size_t)i], edge_len_max);
  out.erase(std::remove(out.begin(), out.end(), (int32_t)i), out.end());
  return out;
}

LandmarkSet build_landmarks(const ChartSuite& charts, const DomainMetrics& metrics,
                            const DomainSpec& spec, const LandmarkBuildOpts& opts) {
  double d = metrics.d;
  if (!(d > 0.0)) fail_validation("InvalidScale", "landmark scale must be positive");
  double tol_clear = 1e-4 * d;

  LandmarkSet lms;
  lms.d = d;
  lms.r_net = opts.net_shrink * d / 16.0;
  lms.edge_len_max = 3.0 * d / 20.0 - 2.0 * tol_clear;
  lms.cell = lms.edge_len_max;

  for (const auto& ch : charts.charts) {
    Vec3 y = ch.center - (3.0 * d / 4.0) * ch.n;
    double depth = spec.clearance_lb(y);
    if (depth < d / 8.0)
      fail_numerical("CoverageGap", "shifted chart center too shallow at scale d");
    lms.y1.push_back(y);
    lms.chart_x0.push_back(ch.center);
  }

  double margin = d / 16.0 - lms.r_net;
  uint64_t target = opts.candidate_target;
  if (target == 0) {
    double vol = std::max(metrics.volume, 1e-12);
    double q = 0.524 * margin * margin * margin / vol;
    target = (uint64_t)std::ceil(20.0 / q);
  }

  int threads = std::max(1, opts.threads);
  uint64_t chunk = 1 << 16;
  for (int attempt = 0;; attempt++) {
    lms.y2.clear();
    HashGrid net;
    net.cell = lms.r_net;
    uint64_t accepted = 0, draw_base = 0;
    uint64_t draw_cap = 256 * target;
    std::vector<Vec3> cpos((size_t)chunk);
    std::vector<uint8_t> keep((size_t)chunk);
    uint64_t stream = 101 + (uint64_t)attempt;
    while (accepted < target && draw_base < draw_cap) {
      uint64_t n = std::min(chunk, draw_cap - draw_base);
      auto worker = [&](int w) {
        for (uint64_t k = w; k < n; k += (uint64_t)threads) {
          Rng rng(opts.seed, stream);
          rng.ctr = 8 * (draw_base + k);
          Vec3 x = rng.in_box(spec.bbox);
          double cl = spec.clearance_lb(x);
          keep[(size_t)k] = 0;
          if (cl >= d / 8.0) {
            cpos[(size_t)k] = x;
            keep[(size_t)k] = 1;
          } else if (cl >= d / 16.0) {
            // Shallow draw: push inward so the thin rim of the deep region
            // gets candidate density comparable to the bulk.
            Vec3 g = spec.grad(x);
            double gn = norm(g);
            if (gn > 1e-12) {
              Vec3 p = x - (d / 8.0 - cl + 0.5 * margin) / gn * g;
              if (spec.clearance_lb(p) >= d / 8.0) {
                cpos[(size_t)k] = p;
                keep[(size_t)k] = 1;
              }
            }
          }
        }
      };
      if (threads == 1) {
        worker(0);
      } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < threads; w++) pool.emplace_back(worker, w);
        for (auto& th : pool) th.join();
      }
      for (uint64_t k = 0; k < n; k++) {
        if (!keep[(size_t)k]) continue;
        accepted++;
        Vec3 p = cpos[(size_t)k];
        if (!net.any_within(lms.y2, p, lms.r_net)) {
          net.insert(p, (int32_t)lms.y2.size());
          lms.y2.push_back(p);
        }
      }
      draw_base += n;
    }
    if (lms.y2.empty())
      fail_numerical("CoverageGap", "no interior points found at depth d/8");

    // Resampled verification of the covering radius.
    bool covered = true;
    Rng vr(opts.seed, 707 + (uint64_t)attempt);
    uint64_t checked = 0, draws = 0;
    while (checked < opts.verify_samples && draws < 512 * opts.verify_samples) {
      draws++;
      Vec3 x = vr.in_box(spec.bbox);
      if (spec.clearance_lb(x) < d / 8.0) continue;
      checked++;
      if (!net.any_within(lms.y2, x, d / 16.0)) {
        covered = false;
        break;
      }
    }
    // Shifted chart centers must connect to the interior net as well.
    for (const auto& y : lms.y1)
      if (covered && !net.any_within(lms.y2, y, d / 16.0)) covered = false;
    if (covered) break;
    if (attempt + 1 >= opts.max_attempts)
      fail_numerical("CoverageGap", "resampled point farther than d/16 from the net");
    target *= 2;
  }

  lms.all = lms.y1;
  lms.all.insert(lms.all.end(), lms.y2.begin(), lms.y2.end());
  lms.depth_lb.resize(lms.all.size());
  for (size_t i = 0; i < lms.all.size(); i++) {
    double cl = spec.clearance_lb(lms.all[i]);
    if (cl < d / 8.0) fail_numerical("CoverageGap", "landmark shallower than d/8");
    lms.depth_lb[i] = cl;
  }
  for (size_t i = 0; i < lms.all.size(); i++) {
    Vec3 p = lms.all[i];
    lms.grid[cell_key(cell_of(p.x, lms.cell), cell_of(p.y, lms.cell),
                      cell_of(p.z, lms.cell))]
        .push_back((int32_t)i);
  }
  return lms;
}

double segment_clearance(const DomainSpec& spec, Vec3 a, Vec3 b, double tol_clear) {
  if (spec.sdf(a) >= 0.0 || spec.sdf(b) >= 0.0)
    fail_validation("SegmentExitsDomain", "segment endpoint not interior");
  double len = dist(a, b);
  if (len == 0.0) return spec.clearance_lb(a);
  // Stack of parameter intervals; leaves contribute g(mid) - halfwidth.
  struct Iv {
    double s0, s1;
  };
  std::vector<Iv> stack{{0.0, 1.0}};
  double upper = std::min(spec.clearance_lb(a), spec.clearance_lb(b));
  double bound = upper;
  long long evals = 0;
  while (!stack.empty()) {
    Iv iv = stack.back();
    stack.pop_back();
    double sm = 0.5 * (iv.s0 + iv.s1);
    Vec3 mid = a + sm * (b - a);
    if (spec.sdf(mid) >= 0.0)
      fail_validation("SegmentExitsDomain", "segment touches the boundary");
    double g = spec.clearance_lb(mid);
    upper = std::min(upper, g);
    double hw = 0.5 * len * (iv.s1 - iv.s0);
    double lo = g - hw;
    if (lo >= upper) {
      bound = std::min(bound, std::max(lo, upper - tol_clear));
      continue;
    }
    if (hw <= 0.5 * tol_clear) {
      bound = std::min(bound, lo);
      continue;
    }
    stack.push_back({iv.s0, sm});
    stack.push_back({sm, iv.s1});
    if (++evals > 4000000)
      fail_numerical("SubdivisionOverflow", "segment clearance refinement stalled");
  }
  return bound;
}

Zigzag good_zigzag(const LandmarkSet& lms, const DomainSpec& spec,
                   const DomainMetrics& metrics, Vec3 x1, Vec3 x2) {
  (void)metrics;
  if (lms.all.empty()) fail_validation("Unreachable", "empty landmark set");
  Attach a1 = attach_endpoint(lms, spec, x1);
  Attach a2 = attach_endpoint(lms, spec, x2);

  std::vector<int32_t> parent;
  std::vector<int32_t> dists = bfs_from(lms, a1.vertex, a2.vertex, &parent);
  if (dists[(size_t)a2.vertex] < 0)
    fail_validation("Unreachable", "landmark graph does not connect the endpoints");
  std::vector<int32_t> path;
  for (int32_t u = a2.vertex; u >= 0; u = parent[(size_t)u]) {
    path.push_back(u);
    if (u == a1.vertex) break;
  }
  std::reverse(path.begin(), path.end());

  Zigzag z;
  z.waypoints.push_back(x1);
  for (int32_t u : path) z.waypoints.push_back(lms.all[(size_t)u]);
  z.waypoints.push_back(x2);
  z.clearances.push_back(a1.clearance);
  for (size_t k = 0; k + 1 < path.size(); k++) {
    double r = std::min(lms.depth_lb[(size_t)path[k]], lms.depth_lb[(size_t)path[k + 1]]);
    double s = dist(lms.all[(size_t)path[k]], lms.all[(size_t)path[k + 1]]);
    z.clearances.push_back(waist_clearance(r, s));
  }
  z.clearances.push_back(a2.clearance);
  z.n_intermediate = (int)path.size();
  z.n_segments = z.n_intermediate + 1;
  return z;
}

int conn_d(const LandmarkSet& lms, const DomainSpec& spec, const DomainMetrics& metrics,
           Vec3 x1, Vec3 x2) {
  (void)metrics;
  if (lms.all.empty()) fail_validation("Unreachable", "empty landmark set");
  Attach a1 = attach_endpoint(lms, spec, x1);
  Attach a2 = attach_endpoint(lms, spec, x2);
  std::vector<int32_t> dists = bfs_from(lms, a1.vertex, a2.vertex, nullptr);
  if (dists[(size_t)a2.vertex] < 0)
    fail_validation("Unreachable", "landmark graph does not connect the endpoints");
  return dists[(size_t)a2.vertex] + 1;
}

ConnDomainReport conn_d_domain(const LandmarkSet& lms, const DomainSpec& spec,
                               const DomainMetrics& metrics, uint64_t sample_budget,
                               uint64_t seed) {
  ConnDomainReport rep;
  int n = lms.size();
  if (n == 0) fail_validation("Unreachable", "empty landmark set");
  int n_roots = std::min(32, n);
  int best_ecc = -1;
  for (int k = 0; k < n_roots; k++) {
    int32_t root = (int32_t)((uint64_t)k * (uint64_t)n / (uint64_t)n_roots);
    std::vector<int32_t> dists = bfs_from(lms, root, -1, nullptr);
    int ecc = 0;
    for (int32_t v : dists) {
      if (v < 0)
        fail_validation("Unreachable", "landmark graph is disconnected");
      ecc = std::max(ecc, (int)v);
    }
    best_ecc = best_ecc < 0 ? ecc : std::min(best_ecc, ecc);
  }
  rep.diameter_edge_bound = 2 * best_ecc;
  rep.certified_bound_n = rep.diameter_edge_bound + 1;
  rep.certified_bound_segments = rep.diameter_edge_bound + 2;

  Rng rng(seed, 909);
  for (uint64_t p = 0; p < sample_budget; p++) {
    Vec3 a, b;
    int guard = 0;
    do {
      a = rng.in_box(spec.bbox);
      if (++guard > 100000) fail_numerical("CoverageGap", "interior sampling starved");
    } while (spec.clearance_lb(a) <= 1e-6 * lms.d);
    do {
      b = rng.in_box(spec.bbox);
      if (++guard > 100000) fail_numerical("CoverageGap", "interior sampling starved");
    } while (spec.clearance_lb(b) <= 1e-6 * lms.d);
    rep.sampled_max_n = std::max(rep.sampled_max_n, conn_d(lms, spec, metrics, a, b));
    rep.pairs_sampled++;
  }
  return rep;
}

ojson zigzag_to_json(const Zigzag& z) {
  ojson j;
  j["waypoints"] = ojson::array();
  for (const auto& w : z.waypoints) j["waypoints"].push_back(jvec(w));
  j["clearances"] = z.clearances;
  j["n_segments"] = z.n_segments;
  j["n_intermediate"] = z.n_intermediate;
  return j;
}

void write_landmark_graph_csv(const std::string& path, const LandmarkSet& lms) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) fail_validation("OutputUnwritable", "cannot open " + path);
  std::fputs("i,j,length,clearance_lb\n", f);
  for (int i = 0; i < lms.size(); i++) {
    for (int32_t j : lms.neighbors(i)) {
      if (j <= i) continue;
      double s = dist(lms.all[(size_t)i], lms.all[(size_t)j]);
      double w = waist_clearance(
          std::min(lms.depth_lb[(size_t)i], lms.depth_lb[(size_t)j]), s);
      std::fprintf(f, "%d,%d,%.9g,%.9g\n", i, (int)j, s, w);
    }
  }
  std::fclose(f);
}

}  // namespace kinlb
