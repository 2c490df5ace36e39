#pragma once

// Plain 2-D geometry: SE(2) poses, polylines, the ego-centric perception
// range. No tensors here; the generator and metrics work in doubles.

#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

namespace bevflow::scene {

struct Vec2 {
  double x = 0, y = 0;

  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  double dot(Vec2 o) const { return x * o.x + y * o.y; }
  double cross(Vec2 o) const { return x * o.y - y * o.x; }
  double norm() const { return std::hypot(x, y); }
};

struct SE2 {
  double x = 0, y = 0, yaw = 0;

  Vec2 apply(Vec2 p) const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    return {x + c * p.x - s * p.y, y + s * p.x + c * p.y};
  }
  Vec2 apply_inverse(Vec2 p) const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    const double dx = p.x - x, dy = p.y - y;
    return {c * dx + s * dy, -s * dx + c * dy};
  }
  // this ∘ other: first apply other, then this
  SE2 compose(const SE2& o) const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    return {x + c * o.x - s * o.y, y + s * o.x + c * o.y, yaw + o.yaw};
  }
  SE2 inverse() const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    return {-(c * x + s * y), -(-s * x + c * y), -yaw};
  }
};

// Ego-centric perception window: 30 m across (x), 60 m ahead/behind (y).
struct Range2 {
  double x_min = -15, x_max = 15, y_min = -30, y_max = 30;

  bool contains(Vec2 p) const { return p.x >= x_min && p.x <= x_max && p.y >= y_min && p.y <= y_max; }
  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  Vec2 clamp(Vec2 p) const {
    return {std::min(std::max(p.x, x_min), x_max), std::min(std::max(p.y, y_min), y_max)};
  }
};

using Polyline = std::vector<Vec2>;

inline double polyline_length(const Polyline& poly) {
  double len = 0;
  for (size_t i = 1; i < poly.size(); ++i) len += (poly[i] - poly[i - 1]).norm();
  return len;
}

// n points equally spaced along arclength, endpoints included
inline Polyline resample_polyline(const Polyline& poly, int n) {
  if (poly.size() < 2) throw std::invalid_argument("resample_polyline: need at least 2 vertices");
  if (n < 2) throw std::invalid_argument("resample_polyline: need at least 2 output points");
  const double total = polyline_length(poly);
  Polyline out;
  out.reserve(static_cast<size_t>(n));
  if (total <= 0) {
    for (int i = 0; i < n; ++i) out.push_back(poly.front());
    return out;
  }
  size_t seg = 0;
  double seg_start = 0;
  for (int i = 0; i < n; ++i) {
    const double target = total * i / (n - 1);
    while (seg + 2 < poly.size() && seg_start + (poly[seg + 1] - poly[seg]).norm() < target) {
      seg_start += (poly[seg + 1] - poly[seg]).norm();
      ++seg;
    }
    const double seg_len = (poly[seg + 1] - poly[seg]).norm();
    const double t = seg_len > 0 ? std::min(1.0, std::max(0.0, (target - seg_start) / seg_len)) : 0.0;
    out.push_back(poly[seg] + (poly[seg + 1] - poly[seg]) * t);
  }
  return out;
}

inline double point_segment_distance(Vec2 p, Vec2 a, Vec2 b) {
  const Vec2 ab = b - a;
  const double len2 = ab.dot(ab);
  if (len2 <= 0) return (p - a).norm();
  const double t = std::min(1.0, std::max(0.0, (p - a).dot(ab) / len2));
  return (p - (a + ab * t)).norm();
}

inline double point_polyline_distance(Vec2 p, const Polyline& poly) {
  if (poly.empty()) throw std::invalid_argument("point_polyline_distance: empty polyline");
  if (poly.size() == 1) return (p - poly[0]).norm();
  double best = 1e300;
  for (size_t i = 1; i < poly.size(); ++i) best = std::min(best, point_segment_distance(p, poly[i - 1], poly[i]));
  return best;
}

// Splits an open polyline into the pieces inside the range. Crossing
// segments are cut at the boundary.
inline std::vector<Polyline> clip_polyline(const Polyline& poly, const Range2& range) {
  std::vector<Polyline> pieces;
  Polyline cur;
  auto inside = [&](Vec2 p) { return range.contains(p); };
  auto cut = [&](Vec2 in, Vec2 out) {
    // binary search for the boundary crossing; plenty for rendering-scale
    Vec2 a = in, b = out;
    for (int it = 0; it < 40; ++it) {
      const Vec2 mid = (a + b) * 0.5;
      (inside(mid) ? a : b) = mid;
    }
    return a;
  };
  for (size_t i = 0; i < poly.size(); ++i) {
    const bool in = inside(poly[i]);
    if (in) {
      if (cur.empty() && i > 0 && !inside(poly[i - 1])) cur.push_back(cut(poly[i], poly[i - 1]));
      cur.push_back(poly[i]);
    } else if (!cur.empty()) {
      cur.push_back(cut(poly[i - 1], poly[i]));
      if (cur.size() >= 2) pieces.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (cur.size() >= 2) pieces.push_back(std::move(cur));
  return pieces;
}

// Sutherland-Hodgman clip of a closed polygon (first vertex not repeated).
inline Polyline clip_polygon(const Polyline& poly, const Range2& range) {
  Polyline cur = poly;
  struct Edge {
    int axis;     // 0 = x, 1 = y
    double v;
    bool keep_ge;
  };
  const Edge edges[4] = {{0, range.x_min, true}, {0, range.x_max, false}, {1, range.y_min, true}, {1, range.y_max, false}};
  for (const Edge& e : edges) {
    if (cur.empty()) break;
    auto in = [&](Vec2 p) {
      const double c = e.axis == 0 ? p.x : p.y;
      return e.keep_ge ? c >= e.v : c <= e.v;
    };
    auto intersect = [&](Vec2 a, Vec2 b) {
      const double ca = e.axis == 0 ? a.x : a.y, cb = e.axis == 0 ? b.x : b.y;
      const double t = (e.v - ca) / (cb - ca);
      return a + (b - a) * t;
    };
    Polyline next;
    for (size_t i = 0; i < cur.size(); ++i) {
      const Vec2 a = cur[i], b = cur[(i + 1) % cur.size()];
      if (in(a)) {
        next.push_back(a);
        if (!in(b)) next.push_back(intersect(a, b));
      } else if (in(b)) {
        next.push_back(intersect(a, b));
      }
    }
    cur = std::move(next);
  }
  return cur;
}

}  // namespace bevflow::scene
