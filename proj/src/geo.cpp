#include "prtraj/geo.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace prtraj::geo {

namespace {
constexpr double kDegToRad = M_PI / 180.0;
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

Vec2 project(double lat, double lon, double ref_lat) {
  if (std::abs(lat) > 90.0 || std::abs(lon) > 180.0)
    throw util::InputError("coordinate out of range: lat=" + std::to_string(lat) +
                           " lon=" + std::to_string(lon));
  return {kEarthRadiusM * lon * kDegToRad * std::cos(ref_lat * kDegToRad),
          kEarthRadiusM * lat * kDegToRad};
}

Vec2 segment_direction(const RoadNetwork& net, int seg_id) {
  const RoadSegment& s = net.segments.at(static_cast<std::size_t>(seg_id));
  Vec2 a = project(s.start_lat, s.start_lon, net.ref_lat);
  Vec2 b = project(s.end_lat, s.end_lon, net.ref_lat);
  double dx = b.x - a.x, dy = b.y - a.y;
  double n = std::hypot(dx, dy);
  if (n == 0.0) throw util::InputError("degenerate segment " + std::to_string(seg_id));
  return {dx / n, dy / n};
}

double angle_between(const Vec2& u, const Vec2& v) {
  double nu = std::hypot(u.x, u.y), nv = std::hypot(v.x, v.y);
  if (nu == 0.0 || nv == 0.0) throw util::InputError("angle of zero vector");
  double c = (u.x * v.x + u.y * v.y) / (nu * nv);
  c = std::clamp(c, -1.0, 1.0);
  return std::acos(c);
}

double point_to_chord(const Vec2& p, const Vec2& a, const Vec2& b) {
  double abx = b.x - a.x, aby = b.y - a.y;
  double len2 = abx * abx + aby * aby;
  if (len2 == 0.0) return std::hypot(p.x - a.x, p.y - a.y);
  double t = ((p.x - a.x) * abx + (p.y - a.y) * aby) / len2;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(p.x - (a.x + t * abx), p.y - (a.y + t * aby));
}

Vec2 midpoint(const RoadNetwork& net, int seg_id) {
  return net.midpoints.at(static_cast<std::size_t>(seg_id));
}

// ---------------------------------------------------------------------------
// Grid
// ---------------------------------------------------------------------------

GridIndex make_grid(const RoadNetwork& net, double cell_size) {
  if (cell_size <= 0.0) throw util::InputError("grid cell size must be positive");
  GridIndex gi;
  gi.cell_size = cell_size;
  Vec2 lo = project(net.lat_min, net.lon_min, net.ref_lat);
  Vec2 hi = project(net.lat_max, net.lon_max, net.ref_lat);
  gi.x0 = lo.x;
  gi.y0 = lo.y;
  gi.n_x = std::max(1, static_cast<int>(std::ceil((hi.x - lo.x) / cell_size)));
  gi.n_y = std::max(1, static_cast<int>(std::ceil((hi.y - lo.y) / cell_size)));
  return gi;
}

std::pair<int, int> grid_cell(const GridIndex& gi, double x, double y) {
  int ix = static_cast<int>(std::floor((x - gi.x0) / gi.cell_size));
  int iy = static_cast<int>(std::floor((y - gi.y0) / gi.cell_size));
  if (ix < 0 || ix >= gi.n_x || iy < 0 || iy >= gi.n_y) {
    util::log_debug("grid_cell: point outside bbox, clamping");
    ix = std::clamp(ix, 0, gi.n_x - 1);
    iy = std::clamp(iy, 0, gi.n_y - 1);
  }
  return {ix, iy};
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

namespace {
void finalize(RoadNetwork& net, std::vector<std::pair<int, int>> edges) {
  int n = net.size();
  net.out_neighbors.assign(static_cast<std::size_t>(n), {});
  net.in_neighbors.assign(static_cast<std::size_t>(n), {});
  std::set<std::pair<int, int>> seen;
  for (auto [from, to] : edges) {
    if (from < 0 || from >= n || to < 0 || to >= n)
      throw util::InputError("edge references unknown segment " + std::to_string(from) + "->" +
                             std::to_string(to));
    if (!seen.insert({from, to}).second) continue;
    net.out_neighbors[static_cast<std::size_t>(from)].push_back(to);
    net.in_neighbors[static_cast<std::size_t>(to)].push_back(from);
  }
  net.adjacent.assign(static_cast<std::size_t>(n), {});
  for (int i = 0; i < n; ++i) {
    auto& out = net.out_neighbors[static_cast<std::size_t>(i)];
    auto& in = net.in_neighbors[static_cast<std::size_t>(i)];
    std::sort(out.begin(), out.end());
    std::sort(in.begin(), in.end());
    std::set<int> adj(out.begin(), out.end());
    adj.insert(in.begin(), in.end());
    adj.erase(i);
    net.adjacent[static_cast<std::size_t>(i)].assign(adj.begin(), adj.end());
    net.segments[static_cast<std::size_t>(i)].out_degree = static_cast<int>(out.size());
    net.segments[static_cast<std::size_t>(i)].in_degree = static_cast<int>(in.size());
  }

  bool first = true;
  for (const RoadSegment& s : net.segments) {
    for (auto [lat, lon] : {std::pair{s.start_lat, s.start_lon}, {s.end_lat, s.end_lon}}) {
      if (first) {
        net.lat_min = net.lat_max = lat;
        net.lon_min = net.lon_max = lon;
        first = false;
      } else {
        net.lat_min = std::min(net.lat_min, lat);
        net.lat_max = std::max(net.lat_max, lat);
        net.lon_min = std::min(net.lon_min, lon);
        net.lon_max = std::max(net.lon_max, lon);
      }
    }
  }
  net.ref_lat = 0.5 * (net.lat_min + net.lat_max);
  net.midpoints.resize(static_cast<std::size_t>(n));
  for (const RoadSegment& s : net.segments) {
    Vec2 a = project(s.start_lat, s.start_lon, net.ref_lat);
    Vec2 b = project(s.end_lat, s.end_lon, net.ref_lat);
    net.midpoints[static_cast<std::size_t>(s.id)] = {0.5 * (a.x + b.x), 0.5 * (a.y + b.y)};
  }
}
}  // namespace

RoadNetwork load_network(const std::string& network_csv, const std::string& edges_csv) {
  RoadNetwork net;
  auto lines = util::read_lines(network_csv);
  if (lines.empty()) throw util::InputError("empty network file: " + network_csv);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (util::trim(lines[i]).empty()) continue;
    auto f = util::split(lines[i], ',');
    if (f.size() != 8)
      throw util::InputError(network_csv + ":" + std::to_string(i + 1) + ": expected 8 fields");
    std::string at = network_csv + ":" + std::to_string(i + 1);
    RoadSegment s;
    s.id = static_cast<int>(util::parse_int(f[0], at + " id"));
    s.start_lat = util::parse_double(f[1], at + " start_lat");
    s.start_lon = util::parse_double(f[2], at + " start_lon");
    s.end_lat = util::parse_double(f[3], at + " end_lat");
    s.end_lon = util::parse_double(f[4], at + " end_lon");
    s.length = util::parse_double(f[5], at + " length");
    s.road_type = static_cast<int>(util::parse_int(f[6], at + " road_type"));
    s.lanes = f[7].empty() ? -1 : static_cast<int>(util::parse_int(f[7], at + " lanes"));
    if (s.length <= 0.0) throw util::InputError(at + ": length must be positive");
    if (s.lanes != -1 && (s.lanes < 1 || s.lanes > 4))
      throw util::InputError(at + ": lanes must be 1..4 when present");
    if (s.id != static_cast<int>(net.segments.size()))
      throw util::InputError(at + ": segment ids must be dense and ascending from 0");
    net.segments.push_back(s);
  }
  if (net.segments.empty()) throw util::InputError("network has no segments: " + network_csv);

  std::vector<std::pair<int, int>> edges;
  auto elines = util::read_lines(edges_csv);
  for (std::size_t i = 1; i < elines.size(); ++i) {
    if (util::trim(elines[i]).empty()) continue;
    auto f = util::split(elines[i], ',');
    std::string at = edges_csv + ":" + std::to_string(i + 1);
    if (f.size() != 2) throw util::InputError(at + ": expected 2 fields");
    edges.emplace_back(static_cast<int>(util::parse_int(f[0], at + " from_id")),
                       static_cast<int>(util::parse_int(f[1], at + " to_id")));
  }
  finalize(net, std::move(edges));
  return net;
}

void save_network(const RoadNetwork& net, const std::string& network_csv,
                  const std::string& edges_csv) {
  std::ostringstream out;
  out << "id,start_lat,start_lon,end_lat,end_lon,length,road_type,lanes\n";
  out.precision(10);
  for (const RoadSegment& s : net.segments) {
    out << s.id << ',' << s.start_lat << ',' << s.start_lon << ',' << s.end_lat << ','
        << s.end_lon << ',' << s.length << ',' << s.road_type << ',';
    if (s.lanes != -1) out << s.lanes;
    out << '\n';
  }
  util::write_file(network_csv, out.str());

  std::ostringstream eo;
  eo << "from_id,to_id\n";
  for (int i = 0; i < net.size(); ++i)
    for (int j : net.out_neighbors[static_cast<std::size_t>(i)]) eo << i << ',' << j << '\n';
  util::write_file(edges_csv, eo.str());
}

void validate_trajectory(const Trajectory& t, const RoadNetwork& net, std::size_t line_no) {
  std::string at = "trajectory line " + std::to_string(line_no);
  if (t.segs.size() < 2) throw util::InputError(at + ": needs at least 2 points");
  for (std::size_t i = 0; i < t.segs.size(); ++i) {
    if (t.segs[i] < 0 || t.segs[i] >= net.size())
      throw util::InputError(at + ": unknown segment " + std::to_string(t.segs[i]));
    if (i > 0 && t.ts[i] < t.ts[i - 1])
      throw util::InputError(at + ": timestamps decrease at point " + std::to_string(i));
  }
  for (std::size_t i = 0; i + 1 < t.segs.size(); ++i) {
    const auto& nbrs = net.out_neighbors[static_cast<std::size_t>(t.segs[i])];
    if (!std::binary_search(nbrs.begin(), nbrs.end(), t.segs[i + 1]))
      throw util::InputError(at + ": transition " + std::to_string(t.segs[i]) + "->" +
                             std::to_string(t.segs[i + 1]) + " is not a road-network edge");
  }
}

Trajectory parse_trajectory_line(const std::string& line, const RoadNetwork& net,
                                 std::size_t line_no) {
  Trajectory t;
  std::string at = "trajectory line " + std::to_string(line_no);
  for (const std::string& tok : util::split(line, ' ')) {
    if (tok.empty()) continue;
    auto parts = util::split(tok, ':');
    if (parts.size() != 2) throw util::InputError(at + ": malformed point '" + tok + "'");
    t.segs.push_back(static_cast<int>(util::parse_int(parts[0], at + " segment")));
    t.ts.push_back(util::parse_int(parts[1], at + " timestamp"));
  }
  validate_trajectory(t, net, line_no);
  return t;
}

std::vector<Trajectory> load_trajectories(const std::string& path, const RoadNetwork& net,
                                          std::size_t max_len) {
  std::vector<Trajectory> out;
  auto lines = util::read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (util::trim(lines[i]).empty()) continue;
    Trajectory t = parse_trajectory_line(lines[i], net, i + 1);
    if (max_len > 0 && t.segs.size() > max_len) {
      t.segs.resize(max_len);
      t.ts.resize(max_len);
    }
    out.push_back(std::move(t));
  }
  return out;
}

void save_trajectories(const std::vector<Trajectory>& trajs, const std::string& path) {
  std::ostringstream out;
  for (const Trajectory& t : trajs) {
    for (std::size_t i = 0; i < t.segs.size(); ++i) {
      if (i) out << ' ';
      out << t.segs[i] << ':' << t.ts[i];
    }
    out << '\n';
  }
  util::write_file(path, out.str());
}

}  // namespace prtraj::geo
