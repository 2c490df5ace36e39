#pragma once

// Seeded synthetic driving worlds: an arc-shaped road with lanes, lane
// following agents, a camera ring rendering semantic ground shading, and
// text+blob dataset serialization. Everything is a pure function of
// (seed, config, frame).

#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>

#include "bevflow/core/blob.hpp"
#include "bevflow/core/rng.hpp"
#include "bevflow/scene/camera.hpp"
#include "bevflow/scene/geometry.hpp"

namespace bevflow::scene {

enum class MapClass { boundary = 0, divider = 1, crosswalk = 2, centerline = 3 };

inline const char* map_class_name(MapClass c) {
  switch (c) {
    case MapClass::boundary: return "boundary";
    case MapClass::divider: return "divider";
    case MapClass::crosswalk: return "crosswalk";
    case MapClass::centerline: return "centerline";
  }
  return "?";
}

inline MapClass map_class_from(const std::string& s) {
  if (s == "boundary") return MapClass::boundary;
  if (s == "divider") return MapClass::divider;
  if (s == "crosswalk") return MapClass::crosswalk;
  if (s == "centerline") return MapClass::centerline;
  throw std::runtime_error("unknown map class '" + s + "'");
}

struct MapElement {
  MapClass cls;
  Polyline pts;  // ego frame, metres; crosswalks closed (first == last)
};

struct VectorMap {
  std::vector<MapElement> elements;
};

struct ViewImage {
  int rows = 0, cols = 0;
  std::vector<float> px;  // [0,1], row-major

  float at(int r, int c) const { return px[static_cast<size_t>(r) * cols + c]; }
};

// Semantic ground shades.
namespace shade {
inline constexpr float sky = 0.0f;
inline constexpr float offroad = 0.1f;
inline constexpr float driveable = 0.5f;
inline constexpr float crosswalk = 0.8f;
inline constexpr float agent = 0.9f;
inline constexpr float boundary = 1.0f;
}  // namespace shade

// The road is a constant-curvature arc through the origin, heading +y at
// arclength 0; lane i sits at signed lateral offset (i - ego_lane) * width.
struct RoadModel {
  double curvature = 0;
  int lanes = 3;
  double lane_width = 3.5;
  int ego_lane = 1;
  struct Crosswalk {
    double s_center = 0, half_len = 1.5;  // extent along arclength
  };
  std::vector<Crosswalk> crosswalks;

  static constexpr double kStraight = 1e-9;

  Vec2 ref_pos(double s) const {
    if (std::fabs(curvature) < kStraight) return {0, s};
    return {(std::cos(curvature * s) - 1.0) / curvature, std::sin(curvature * s) / curvature};
  }
  double ref_heading(double s) const { return curvature * s; }  // ccw from +y
  Vec2 heading_dir(double s) const {
    const double phi = ref_heading(s);
    return {-std::sin(phi), std::cos(phi)};
  }
  Vec2 right_normal(double s) const {
    const double phi = ref_heading(s);
    return {std::cos(phi), std::sin(phi)};
  }
  double lane_offset(int lane) const { return (lane - ego_lane) * lane_width; }
  Vec2 lane_point(int lane, double s, double lateral = 0) const {
    return ref_pos(s) + right_normal(s) * (lane_offset(lane) + lateral);
  }
  // closed-form arc coordinates of a point: s along the reference line,
  // d signed lateral (positive to the right of the heading)
  void locate(Vec2 p, double& s, double& d) const {
    if (std::fabs(curvature) < kStraight) {
      s = p.y;
      d = p.x;
      return;
    }
    // the reference line is the circle around (-1/k, 0); k*(p-center)
    // points at angle k*s for points on the line
    const Vec2 center{-1.0 / curvature, 0.0};
    const Vec2 rel = p - center;
    s = std::atan2(curvature * rel.y, curvature * rel.x) / curvature;
    d = (p - ref_pos(s)).dot(right_normal(s));
  }
  double left_edge() const { return lane_offset(0) - lane_width / 2; }
  double right_edge() const { return lane_offset(lanes - 1) + lane_width / 2; }
};

struct Agent {
  int id = 0;
  Vec2 half_extent;                  // (across, along) metres
  std::vector<Vec2> history;         // T_h points, last is the current frame
  std::vector<Vec2> future;          // T_f points
  std::vector<double> heading_hist;  // per history frame, for footprints
};

struct SceneConfig {
  int lanes = 3;
  int agents = 4;
  double hz = 10.0;
  double curvature_max = 0.015;
  double lane_width = 3.5;
  int max_crosswalks = 2;
  int view_rows = 64, view_cols = 96;
  int n_cams = 6;
  int render_frames = 2;  // trailing history frames that get camera views
};

struct Scene {
  uint64_t seed = 0;
  double hz = 10.0;
  SceneConfig cfg;
  int t_hist = 0, t_fut = 0;
  std::vector<SE2> ego_history;                 // length t_hist, last is identity
  std::vector<Agent> agents;
  VectorMap gt_map;                             // clipped to the perception range
  CameraRig rig;
  std::vector<std::vector<ViewImage>> views;    // [trailing frame][camera]
  std::optional<RoadModel> road;                // present on generated scenes

  int prediction_frame() const { return t_hist - 1; }
  int first_rendered_frame() const { return t_hist - static_cast<int>(views.size()); }
  const std::vector<ViewImage>& views_at(int frame) const {
    const int rel = frame - first_rendered_frame();
    if (rel < 0 || rel >= static_cast<int>(views.size()))
      throw std::invalid_argument("scene: no rendered views at frame " + std::to_string(frame));
    return views[static_cast<size_t>(rel)];
  }
};

// SE(2) mapping current-frame ego coords into the previous frame.
inline SE2 ego_motion(const Scene& scene, int prev_frame, int cur_frame) {
  const SE2& prev = scene.ego_history.at(static_cast<size_t>(prev_frame));
  const SE2& cur = scene.ego_history.at(static_cast<size_t>(cur_frame));
  return prev.inverse().compose(cur);
}

namespace detail {

inline float shade_point(Vec2 p, const RoadModel& road, const std::vector<Agent>& agents, int frame) {
  for (const Agent& a : agents) {
    if (frame >= static_cast<int>(a.history.size())) continue;
    const Vec2 c = a.history[static_cast<size_t>(frame)];
    const double h = a.heading_hist[static_cast<size_t>(frame)];
    const double ch = std::cos(-h), sh = std::sin(-h);
    const Vec2 rel = p - c;
    const Vec2 local{ch * rel.x - sh * rel.y, sh * rel.x + ch * rel.y};  // +y along heading
    if (std::fabs(local.x) <= a.half_extent.x && std::fabs(local.y) <= a.half_extent.y) return shade::agent;
  }
  double s, d;
  road.locate(p, s, d);
  constexpr double band = 0.3;
  if (std::fabs(d - road.left_edge()) <= band || std::fabs(d - road.right_edge()) <= band) return shade::boundary;
  const bool in_corridor = d > road.left_edge() && d < road.right_edge();
  if (in_corridor) {
    for (const auto& cw : road.crosswalks)
      if (std::fabs(s - cw.s_center) <= cw.half_len) return shade::crosswalk;
    return shade::driveable;
  }
  return shade::offroad;
}

}  // namespace detail

// Renders the semantic ground shading seen by every camera at one history
// frame. Pure function of the scene.
inline std::vector<ViewImage> render_views(const Scene& scene, int frame) {
  if (frame < 0 || frame >= scene.t_hist)
    throw std::invalid_argument("render_views: frame " + std::to_string(frame) + " outside history");
  if (!scene.road) throw std::invalid_argument("render_views: scene carries no road model (loaded from disk?)");
  const SE2& pose = scene.ego_history[static_cast<size_t>(frame)];
  std::vector<ViewImage> out;
  out.reserve(scene.rig.cameras.size());
  for (const Camera& cam : scene.rig.cameras) {
    ViewImage img;
    img.rows = cam.rows;
    img.cols = cam.cols;
    img.px.assign(static_cast<size_t>(cam.rows) * cam.cols, shade::sky);
    for (int v = 0; v < cam.rows; ++v)
      for (int u = 0; u < cam.cols; ++u) {
        const auto ground = unproject_to_ground({static_cast<double>(u), static_cast<double>(v)}, cam);
        if (!ground) continue;  // at or above the horizon
        const Vec2 world = pose.apply(*ground);
        img.px[static_cast<size_t>(v) * cam.cols + u] =
            detail::shade_point(world, *scene.road, scene.agents, frame);
      }
    out.push_back(std::move(img));
  }
  return out;
}

// ---------------------------------------------------------------------------
// generation

inline Scene generate_scene(uint64_t seed, const SceneConfig& cfg) {
  const Range2 range;
  if (cfg.agents < 1) throw std::invalid_argument("generate_scene: need at least one agent");
  if (cfg.lanes < 1 || cfg.lanes * cfg.lane_width > range.width())
    throw std::invalid_argument("generate_scene: " + std::to_string(cfg.lanes) +
                                " lanes do not fit the perception range");
  Rng rng(seed * 0x9e3779b97f4a7c15ULL + 0x2545f4914f6cdd1dULL);

  Scene scene;
  scene.seed = seed;
  scene.hz = cfg.hz;
  scene.cfg = cfg;
  scene.t_hist = static_cast<int>(std::lround(2.0 * cfg.hz));
  scene.t_fut = static_cast<int>(std::lround(3.0 * cfg.hz));
  scene.rig = make_ring_rig(cfg.n_cams, cfg.view_rows, cfg.view_cols);

  RoadModel road;
  road.curvature = rng.uniform(-cfg.curvature_max, cfg.curvature_max);
  road.lanes = cfg.lanes;
  road.lane_width = cfg.lane_width;
  road.ego_lane = rng.uniform_int(0, cfg.lanes - 1);
  const int n_cw = rng.uniform_int(0, cfg.max_crosswalks);
  for (int i = 0; i < n_cw; ++i) road.crosswalks.push_back({rng.uniform(-22.0, 22.0), 1.5});
  scene.road = road;

  const double dt = 1.0 / cfg.hz;
  const int total = scene.t_hist + scene.t_fut;

  // ego rolls along its lane; arclength 0 at the prediction frame
  {
    std::vector<double> speeds(static_cast<size_t>(scene.t_hist));
    double v = rng.uniform(4.0, 9.0);
    for (auto& sp : speeds) {
      v = std::min(20.0, std::max(0.0, v + std::max(-1.0, std::min(1.0, rng.normal(0.0, 0.3)))));
      sp = v;
    }
    std::vector<double> arcs(static_cast<size_t>(scene.t_hist), 0.0);
    for (int t = scene.t_hist - 2; t >= 0; --t)
      arcs[static_cast<size_t>(t)] = arcs[static_cast<size_t>(t) + 1] - speeds[static_cast<size_t>(t) + 1] * dt;
    for (int t = 0; t < scene.t_hist; ++t) {
      const double s = arcs[static_cast<size_t>(t)];
      const Vec2 p = road.lane_point(road.ego_lane, s);
      scene.ego_history.push_back({p.x, p.y, road.ref_heading(s)});
    }
  }

  // agents follow lane centerlines with speed noise and a fixed small
  // lateral offset; the current frame must land inside the range
  for (int a = 0; a < cfg.agents; ++a) {
    bool ok = false;
    for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
      const int lane = rng.uniform_int(0, cfg.lanes - 1);
      const double s_cur = rng.uniform(-26.0, 26.0);
      const double jitter = rng.uniform(-0.4, 0.4);
      double v = rng.uniform(2.0, 12.0);
      std::vector<double> speeds(static_cast<size_t>(total));
      for (auto& sp : speeds) {
        v = std::min(20.0, std::max(0.0, v + std::max(-2.0, std::min(2.0, rng.normal(0.0, 0.5)))));
        sp = v;
      }
      std::vector<double> arcs(static_cast<size_t>(total));
      const int cur = scene.t_hist - 1;
      arcs[static_cast<size_t>(cur)] = s_cur;
      for (int t = cur - 1; t >= 0; --t)
        arcs[static_cast<size_t>(t)] = arcs[static_cast<size_t>(t) + 1] - speeds[static_cast<size_t>(t) + 1] * dt;
      for (int t = cur + 1; t < total; ++t)
        arcs[static_cast<size_t>(t)] = arcs[static_cast<size_t>(t) - 1] + speeds[static_cast<size_t>(t)] * dt;
      const Vec2 cur_pos = road.lane_point(lane, s_cur, jitter);
      if (!range.contains(cur_pos) || std::fabs(cur_pos.x) > range.x_max - 0.5 ||
          std::fabs(cur_pos.y) > range.y_max - 0.5)
        continue;
      Agent agent;
      agent.id = a;
      agent.half_extent = {rng.uniform(0.8, 1.1), rng.uniform(1.8, 2.6)};
      for (int t = 0; t < total; ++t) {
        const Vec2 p = road.lane_point(lane, arcs[static_cast<size_t>(t)], jitter);
        if (t < scene.t_hist) {
          agent.history.push_back(p);
          agent.heading_hist.push_back(road.ref_heading(arcs[static_cast<size_t>(t)]));
        } else {
          agent.future.push_back(p);
        }
      }
      scene.agents.push_back(std::move(agent));
      ok = true;
    }
    if (!ok) throw std::runtime_error("generate_scene: could not place agent inside the perception range");
  }

  // ground-truth vector map, clipped to the range
  auto sample_lateral_curve = [&](double lateral) {
    Polyline poly;
    for (double s = -45.0; s <= 45.0 + 1e-9; s += 1.0)
      poly.push_back(road.ref_pos(s) + road.right_normal(s) * lateral);
    return poly;
  };
  auto add_open = [&](MapClass cls, double lateral) {
    for (auto& piece : clip_polyline(sample_lateral_curve(lateral), range))
      if (piece.size() >= 2 && polyline_length(piece) > 1.0)
        scene.gt_map.elements.push_back({cls, std::move(piece)});
  };
  add_open(MapClass::boundary, road.left_edge());
  add_open(MapClass::boundary, road.right_edge());
  for (int l = 0; l + 1 < cfg.lanes; ++l) add_open(MapClass::divider, road.lane_offset(l) + cfg.lane_width / 2);
  for (int l = 0; l < cfg.lanes; ++l) add_open(MapClass::centerline, road.lane_offset(l));
  for (const auto& cw : road.crosswalks) {
    Polyline quad{
        road.ref_pos(cw.s_center - cw.half_len) + road.right_normal(cw.s_center - cw.half_len) * road.left_edge(),
        road.ref_pos(cw.s_center - cw.half_len) + road.right_normal(cw.s_center - cw.half_len) * road.right_edge(),
        road.ref_pos(cw.s_center + cw.half_len) + road.right_normal(cw.s_center + cw.half_len) * road.right_edge(),
        road.ref_pos(cw.s_center + cw.half_len) + road.right_normal(cw.s_center + cw.half_len) * road.left_edge()};
    Polyline clipped = clip_polygon(quad, range);
    if (clipped.size() >= 3) {
      clipped.push_back(clipped.front());  // crosswalks stay closed
      scene.gt_map.elements.push_back({MapClass::crosswalk, std::move(clipped)});
    }
  }
  const Range2 slack{range.x_min - 1e-9, range.x_max + 1e-9, range.y_min - 1e-9, range.y_max + 1e-9};
  for (const auto& el : scene.gt_map.elements)
    for (const Vec2& v : el.pts)
      if (!slack.contains(v))
        throw std::runtime_error("generate_scene: map vertex escaped the perception range");

  // camera views for the trailing frames
  const int nrender = std::min(cfg.render_frames, scene.t_hist);
  for (int f = scene.t_hist - nrender; f < scene.t_hist; ++f) scene.views.push_back(render_views(scene, f));
  return scene;
}

// ---------------------------------------------------------------------------
// dataset container: text sections with embedded BEVT image blobs

inline constexpr const char* kDatasetMagic = "BEVFLOW-SCENE v1";

inline void write_dataset(std::ostream& os, const std::vector<Scene>& scenes) {
  os << kDatasetMagic << "\n";
  os << "scenes " << scenes.size() << "\n";
  os << std::setprecision(17);
  for (const Scene& sc : scenes) {
    os << "scene " << sc.seed << " " << sc.hz << " " << sc.t_hist << " " << sc.t_fut << " " << sc.agents.size()
       << " " << sc.gt_map.elements.size() << " " << sc.views.size() << " " << sc.rig.cameras.size() << "\n";
    for (const SE2& p : sc.ego_history) os << "ego " << p.x << " " << p.y << " " << p.yaw << "\n";
    for (const Agent& a : sc.agents) {
      os << "agent " << a.id << " " << a.half_extent.x << " " << a.half_extent.y << "\n";
      for (size_t t = 0; t < a.history.size(); ++t)
        os << "h " << a.history[t].x << " " << a.history[t].y << " " << a.heading_hist[t] << "\n";
      for (const Vec2& p : a.future) os << "f " << p.x << " " << p.y << "\n";
    }
    for (const MapElement& el : sc.gt_map.elements) {
      os << "map " << map_class_name(el.cls) << " " << el.pts.size() << "\n";
      for (const Vec2& p : el.pts) os << "v " << p.x << " " << p.y << "\n";
    }
    for (size_t f = 0; f < sc.views.size(); ++f) {
      os << "viewframe " << sc.t_hist - sc.views.size() + f << "\n";
      for (const ViewImage& img : sc.views[f]) {
        Tensor<float> t = Tensor<float>::from_data({img.rows, img.cols}, img.px);
        write_bevt(os, t);
      }
      os << "\n";
    }
    os << "end scene\n";
  }
  os << "end dataset\n";
}

namespace detail {

inline std::string read_line_at(std::istream& is, const char* what) {
  std::string line;
  if (!std::getline(is, line))
    throw std::runtime_error("dataset parse error at offset " + std::to_string(static_cast<long long>(is.tellg())) +
                             ": truncated while reading " + std::string(what));
  return line;
}

}  // namespace detail

inline std::vector<Scene> read_dataset(std::istream& is) {
  std::string line = detail::read_line_at(is, "magic");
  if (line != kDatasetMagic)
    throw std::runtime_error("dataset parse error at offset 0: bad magic '" + line + "'");
  std::istringstream hdr(detail::read_line_at(is, "scene count"));
  std::string tok;
  size_t n_scenes = 0;
  hdr >> tok >> n_scenes;
  if (tok != "scenes") throw std::runtime_error("dataset parse error: expected scene count, got '" + tok + "'");

  std::vector<Scene> scenes;
  scenes.reserve(n_scenes);
  for (size_t si = 0; si < n_scenes; ++si) {
    Scene sc;
    {
      std::istringstream ss(detail::read_line_at(is, "scene header"));
      size_t n_agents = 0, n_map = 0, n_viewframes = 0, n_cams = 0;
      ss >> tok >> sc.seed >> sc.hz >> sc.t_hist >> sc.t_fut >> n_agents >> n_map >> n_viewframes >> n_cams;
      if (tok != "scene" || !ss)
        throw std::runtime_error("dataset parse error at offset " +
                                 std::to_string(static_cast<long long>(is.tellg())) + ": bad scene header");
      sc.agents.reserve(n_agents);
      sc.gt_map.elements.reserve(n_map);
      sc.cfg.hz = sc.hz;
      sc.cfg.n_cams = static_cast<int>(n_cams);
      for (int t = 0; t < sc.t_hist; ++t) {
        std::istringstream ps(detail::read_line_at(is, "ego pose"));
        SE2 pose;
        ps >> tok >> pose.x >> pose.y >> pose.yaw;
        if (tok != "ego" || !ps) throw std::runtime_error("dataset parse error: bad ego pose line");
        sc.ego_history.push_back(pose);
      }
      for (size_t a = 0; a < n_agents; ++a) {
        std::istringstream as(detail::read_line_at(is, "agent header"));
        Agent agent;
        as >> tok >> agent.id >> agent.half_extent.x >> agent.half_extent.y;
        if (tok != "agent" || !as) throw std::runtime_error("dataset parse error: bad agent header");
        for (int t = 0; t < sc.t_hist; ++t) {
          std::istringstream hs(detail::read_line_at(is, "agent history"));
          Vec2 p;
          double heading;
          hs >> tok >> p.x >> p.y >> heading;
          if (tok != "h" || !hs) throw std::runtime_error("dataset parse error: bad history line");
          agent.history.push_back(p);
          agent.heading_hist.push_back(heading);
        }
        for (int t = 0; t < sc.t_fut; ++t) {
          std::istringstream fs(detail::read_line_at(is, "agent future"));
          Vec2 p;
          fs >> tok >> p.x >> p.y;
          if (tok != "f" || !fs) throw std::runtime_error("dataset parse error: bad future line");
          agent.future.push_back(p);
        }
        sc.agents.push_back(std::move(agent));
      }
      for (size_t m = 0; m < n_map; ++m) {
        std::istringstream ms(detail::read_line_at(is, "map element"));
        std::string cls;
        size_t nv = 0;
        ms >> tok >> cls >> nv;
        if (tok != "map" || !ms) throw std::runtime_error("dataset parse error: bad map element header");
        MapElement el;
        el.cls = map_class_from(cls);
        for (size_t v = 0; v < nv; ++v) {
          std::istringstream vs(detail::read_line_at(is, "map vertex"));
          Vec2 p;
          vs >> tok >> p.x >> p.y;
          if (tok != "v" || !vs) throw std::runtime_error("dataset parse error: bad map vertex");
          el.pts.push_back(p);
        }
        sc.gt_map.elements.push_back(std::move(el));
      }
      sc.rig = make_ring_rig(static_cast<int>(n_cams), 1, 1);  // geometry refilled below if views exist
      for (size_t f = 0; f < n_viewframes; ++f) {
        detail::read_line_at(is, "viewframe header");
        std::vector<ViewImage> frame_views;
        for (size_t c = 0; c < n_cams; ++c) {
          Tensor<float> t;
          try {
            t = read_bevt<float>(is);
          } catch (const std::exception& e) {
            throw std::runtime_error("dataset parse error in view blob: " + std::string(e.what()));
          }
          if (t.rank() != 2) throw std::runtime_error("dataset parse error: view blob is not 2-D");
          ViewImage img;
          img.rows = t.dim(0);
          img.cols = t.dim(1);
          img.px.assign(t.data(), t.data() + t.numel());
          frame_views.push_back(std::move(img));
        }
        detail::read_line_at(is, "viewframe terminator");
        sc.views.push_back(std::move(frame_views));
      }
      if (!sc.views.empty()) {
        sc.cfg.view_rows = sc.views[0][0].rows;
        sc.cfg.view_cols = sc.views[0][0].cols;
        sc.rig = make_ring_rig(static_cast<int>(n_cams), sc.cfg.view_rows, sc.cfg.view_cols);
      }
      line = detail::read_line_at(is, "scene terminator");
      if (line != "end scene") throw std::runtime_error("dataset parse error: missing scene terminator");
    }
    scenes.push_back(std::move(sc));
  }
  line = detail::read_line_at(is, "dataset terminator");
  if (line != "end dataset") throw std::runtime_error("dataset parse error: missing dataset terminator");
  return scenes;
}

inline void write_dataset_file(const std::string& path, const std::vector<Scene>& scenes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("dataset: cannot open " + path + " for writing");
  write_dataset(os, scenes);
}

inline std::vector<Scene> read_dataset_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("dataset: cannot open " + path);
  return read_dataset(is);
}

// FNV-1a over the serialized dataset; used to compare scene content
inline uint64_t dataset_hash(const std::vector<Scene>& scenes) {
  std::ostringstream os;
  write_dataset(os, scenes);
  const std::string bytes = os.str();
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace bevflow::scene
