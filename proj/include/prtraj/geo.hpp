// Road-network graph, planar geometry, and grid indexing.

#pragma once

#include "prtraj/util.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace prtraj::geo {

constexpr double kEarthRadiusM = 6371000.0;

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

struct RoadSegment {
  int id = -1;
  double start_lat = 0, start_lon = 0;
  double end_lat = 0, end_lon = 0;
  double length = 0;  // meters, > 0
  int road_type = 0;
  int lanes = -1;  // optional 1..4; RLP label only, never a model input
  int in_degree = 0;
  int out_degree = 0;
};

struct RoadNetwork {
  std::vector<RoadSegment> segments;
  // Directed reachability, ascending id, duplicate-free.
  std::vector<std::vector<int>> out_neighbors;
  std::vector<std::vector<int>> in_neighbors;
  // Undirected adjacency (out ∪ in, self excluded), ascending id; the
  // attention neighborhood.
  std::vector<std::vector<int>> adjacent;
  double lat_min = 0, lon_min = 0, lat_max = 0, lon_max = 0;
  double ref_lat = 0;  // bbox-center latitude for the planar projection
  // Projected segment midpoints, indexed by id.
  std::vector<Vec2> midpoints;

  int size() const { return static_cast<int>(segments.size()); }
};

struct GridIndex {
  double cell_size = 0;  // L, meters
  double x0 = 0, y0 = 0;
  int n_x = 0, n_y = 0;

  int cell_count() const { return n_x * n_y; }
  int flat(int ix, int iy) const { return iy * n_x + ix; }
};

struct Trajectory {
  std::vector<int> segs;
  std::vector<std::int64_t> ts;  // seconds since epoch, non-decreasing

  std::size_t size() const { return segs.size(); }
};

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

// Equirectangular projection around a reference latitude.
Vec2 project(double lat, double lon, double ref_lat);
// Unit direction of a segment in projected coordinates.
Vec2 segment_direction(const RoadNetwork& net, int seg_id);
// Unsigned angle in [0, pi].
double angle_between(const Vec2& u, const Vec2& v);
// Distance from point p to the chord a-b (all projected).
double point_to_chord(const Vec2& p, const Vec2& a, const Vec2& b);
Vec2 midpoint(const RoadNetwork& net, int seg_id);

// ---------------------------------------------------------------------------
// Grid
// ---------------------------------------------------------------------------

GridIndex make_grid(const RoadNetwork& net, double cell_size);
// Out-of-bbox points clamp to the nearest border cell (logged at debug).
std::pair<int, int> grid_cell(const GridIndex& gi, double x, double y);

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

// network CSV: id,start_lat,start_lon,end_lat,end_lon,length,road_type,lanes
// edge CSV: from_id,to_id
RoadNetwork load_network(const std::string& network_csv, const std::string& edges_csv);
void save_network(const RoadNetwork& net, const std::string& network_csv,
                  const std::string& edges_csv);

// One trajectory per line, `seg:ts` pairs space-separated.  Violations of
// connectivity or timestamp order raise InputError naming the line number.
// max_len > 0 keeps the first max_len points of longer trajectories.
std::vector<Trajectory> load_trajectories(const std::string& path, const RoadNetwork& net,
                                          std::size_t max_len = 0);
void save_trajectories(const std::vector<Trajectory>& trajs, const std::string& path);
Trajectory parse_trajectory_line(const std::string& line, const RoadNetwork& net,
                                 std::size_t line_no);

void validate_trajectory(const Trajectory& t, const RoadNetwork& net, std::size_t line_no);

}  // namespace prtraj::geo
