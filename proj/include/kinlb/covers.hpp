#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "kinlb/charts.hpp"
#include "kinlb/domain.hpp"
#include "kinlb/jsonio.hpp"
#include "kinlb/vec.hpp"

namespace kinlb {

// Interior landmark set at scale d. Boundary-derived points sit 3d/4 inward
// of the chart centers; interior cover centers are a greedy net of the deep
// region {clearance >= d/8} whose covering radius is verified by resampling.
// Every member carries a certified clearance lower bound >= d/8, so a segment
// between members closer than 3d/20 stays deeper than d/10 at its waist.
struct LandmarkSet {
  double d = 0.0;
  double r_net = 0.0;        // greedy net radius for y2 (< d/16)
  double edge_len_max = 0.0; // hop length certified deeper than d/10
  std::vector<Vec3> y1;      // shifted chart centers (graph indices 0..)
  std::vector<Vec3> y2;      // interior cover centers (graph indices |y1|..)
  std::vector<Vec3> chart_x0;      // chart center paired with each y1 entry
  std::vector<Vec3> all;           // y1 followed by y2
  std::vector<double> depth_lb;    // certified clearance bound per member
  double cell = 0.0;               // neighbor grid cell size
  std::unordered_map<uint64_t, std::vector<int32_t>> grid;

  int size() const { return (int)all.size(); }
  // Indices within edge_len_max of all[i] (excluding i), ascending.
  std::vector<int32_t> neighbors(int i) const;
  std::vector<int32_t> near(Vec3 p, double r) const;
};

struct LandmarkBuildOpts {
  uint64_t seed = 1;
  int threads = 1;
  double net_shrink = 0.6;       // r_net = net_shrink * d/16
  uint64_t candidate_target = 0; // accepted deep candidates; 0 = auto
  uint64_t verify_samples = 20000;
  int max_attempts = 3;
};

LandmarkSet build_landmarks(const ChartSuite& charts, const DomainMetrics& metrics,
                            const DomainSpec& spec, const LandmarkBuildOpts& opts = {});

// Certified lower bound on the minimum clearance along [a,b], within
// tol_clear of the true minimum of the pointwise certified clearance.
// Branch-and-bound over the 1-Lipschitz clearance bound.
double segment_clearance(const DomainSpec& spec, Vec3 a, Vec3 b, double tol_clear);

// Piecewise-linear interior path x1 -> landmarks -> x2. clearances[k] is a
// certified lower bound for segment k; n_intermediate counts the landmark
// waypoints (n_segments = n_intermediate + 1).
struct Zigzag {
  std::vector<Vec3> waypoints;
  std::vector<double> clearances;
  int n_intermediate = 0;
  int n_segments = 0;
};

Zigzag good_zigzag(const LandmarkSet& lms, const DomainSpec& spec,
                   const DomainMetrics& metrics, Vec3 x1, Vec3 x2);

// Minimal landmark count over zigzags from x1 to x2 on the fixed landmark
// graph (breadth-first distance + 1).
int conn_d(const LandmarkSet& lms, const DomainSpec& spec, const DomainMetrics& metrics,
           Vec3 x1, Vec3 x2);

struct ConnDomainReport {
  int sampled_max_n = 0;          // max conn_d over sampled interior pairs
  int certified_bound_n = 0;      // graph-diameter bound on the landmark count
  int certified_bound_segments = 0;
  int diameter_edge_bound = 0;    // 2 * min sampled eccentricity
  uint64_t pairs_sampled = 0;
};
ConnDomainReport conn_d_domain(const LandmarkSet& lms, const DomainSpec& spec,
                               const DomainMetrics& metrics, uint64_t sample_budget,
                               uint64_t seed);

ojson zigzag_to_json(const Zigzag& z);
void write_landmark_graph_csv(const std::string& path, const LandmarkSet& lms);

}  // namespace kinlb
