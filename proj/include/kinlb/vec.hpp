#pragma once
#include <cmath>
#include <algorithm>

namespace kinlb {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;
};

inline Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
inline Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
inline Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
inline Vec3 operator*(Vec3 a, double s) { return s * a; }
inline Vec3 operator/(Vec3 a, double s) { return {a.x / s, a.y / s, a.z / s}; }
inline Vec3 operator-(Vec3 a) { return {-a.x, -a.y, -a.z}; }
inline Vec3& operator+=(Vec3& a, Vec3 b) { a = a + b; return a; }
inline Vec3& operator-=(Vec3& a, Vec3 b) { a = a - b; return a; }

inline double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(Vec3 a, Vec3 b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm2(Vec3 a) { return dot(a, a); }
inline double norm(Vec3 a) { return std::sqrt(norm2(a)); }
inline Vec3 normalized(Vec3 a) { double n = norm(a); return a / n; }
inline double dist(Vec3 a, Vec3 b) { return norm(a - b); }

// Orthonormal tangent pair for a unit normal; branch avoids cancellation.
inline void tangent_frame(Vec3 n, Vec3& t1, Vec3& t2) {
  if (std::abs(n.x) > 0.9)
    t1 = normalized(cross(n, Vec3{0, 1, 0}));
  else
    t1 = normalized(cross(n, Vec3{1, 0, 0}));
  t2 = cross(n, t1);
}

inline double clampd(double v, double lo, double hi) { return std::max(lo, std::min(hi, v)); }

// Japanese bracket <v> = sqrt(1+|v|^2).
inline double jbracket(double r) { return std::sqrt(1.0 + r * r); }

struct Aabb {
  Vec3 lo, hi;
};

inline bool contains(const Aabb& b, Vec3 p) {
  return p.x >= b.lo.x && p.x <= b.hi.x && p.y >= b.lo.y && p.y <= b.hi.y &&
         p.z >= b.lo.z && p.z <= b.hi.z;
}

}  // namespace kinlb
