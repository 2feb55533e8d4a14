#include "prtraj/route.hpp"

#include "prtraj/util.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace prtraj::route {

using Mat = Eigen::MatrixXd;

namespace {

constexpr double kPi = 3.14159265358979323846;

bool is_edge(const geo::RoadNetwork& net, int from, int to) {
  const auto& out = net.out_neighbors[static_cast<std::size_t>(from)];
  return std::binary_search(out.begin(), out.end(), to);
}

}  // namespace

// ---------------------------------------------------------------- statistics

std::int64_t TransitionStats::count(int from, int to) const {
  auto it = counts.find({from, to});
  return it == counts.end() ? 0 : it->second;
}

TransitionStats build_transition_stats(const std::vector<geo::Trajectory>& trajs) {
  TransitionStats stats;
  for (const auto& traj : trajs)
    for (std::size_t i = 0; i + 1 < traj.segs.size(); ++i)
      stats.add(traj.segs[i], traj.segs[i + 1]);
  return stats;
}

void save_transition_stats(const TransitionStats& stats, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw util::InputError("cannot open " + path + " for writing");
  out << "from_id,to_id,count\n";
  for (const auto& [edge, n] : stats.counts)
    out << edge.first << "," << edge.second << "," << n << "\n";
  if (!out) throw util::InputError("failed writing " + path);
}

TransitionStats load_transition_stats(const std::string& path, const geo::RoadNetwork& net) {
  std::ifstream in(path);
  if (!in) throw util::InputError("cannot open " + path);
  TransitionStats stats;
  std::string line;
  std::getline(in, line);
  if (line != "from_id,to_id,count")
    throw util::InputError(path + ": expected header from_id,to_id,count");
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto fields = util::split(line, ',');
    const std::string where = path + " line " + std::to_string(lineno);
    if (fields.size() != 3) throw util::InputError(where + ": expected 3 fields");
    int from = 0, to = 0;
    std::int64_t n = 0;
    try {
      from = std::stoi(fields[0]);
      to = std::stoi(fields[1]);
      n = std::stoll(fields[2]);
    } catch (const std::exception&) {
      throw util::InputError(where + ": cannot parse row");
    }
    if (from < 0 || from >= static_cast<int>(net.segments.size()) || to < 0 ||
        to >= static_cast<int>(net.segments.size()))
      throw util::InputError(where + ": unknown segment id");
    if (!is_edge(net, from, to))
      throw util::InputError(where + ": " + std::to_string(from) + "->" + std::to_string(to) +
                       " is not a road-network edge");
    if (n < 0) throw util::InputError(where + ": negative count");
    if (stats.counts.count({from, to})) throw util::InputError(where + ": duplicate pair");
    stats.counts[{from, to}] = n;
  }
  return stats;
}

// ------------------------------------------------------- scalar features

double journey_progression(const geo::Trajectory& traj, const geo::RoadNetwork& net,
                           std::size_t idx) {
  if (idx >= traj.segs.size()) throw util::InputError("journey_progression: index out of range");
  double total = 0.0, prefix = 0.0;
  for (std::size_t j = 0; j < traj.segs.size(); ++j) {
    const double len = net.segments[static_cast<std::size_t>(traj.segs[j])].length;
    total += len;
    if (j <= idx) prefix += len;
  }
  if (idx + 1 == traj.segs.size()) return 1.0;
  return prefix / total;
}

std::map<int, double> transition_likelihood(const TransitionStats& stats,
                                            const geo::RoadNetwork& net, int seg) {
  if (seg < 0 || seg >= static_cast<int>(net.segments.size()))
    throw util::InputError("transition_likelihood: unknown segment id");
  const auto& out = net.out_neighbors[static_cast<std::size_t>(seg)];
  std::map<int, double> probs;
  if (out.empty()) return probs;
  std::int64_t total = 0;
  for (int to : out) total += stats.count(seg, to);
  if (total == 0) {
    const double uniform = 1.0 / static_cast<double>(out.size());
    for (int to : out) probs[to] = uniform;
  } else {
    for (int to : out)
      probs[to] = static_cast<double>(stats.count(seg, to)) / static_cast<double>(total);
  }
  return probs;
}

double directional_deviation(const geo::RoadNetwork& net, int seg, int candidate,
                             int destination) {
  const int n = static_cast<int>(net.segments.size());
  if (seg < 0 || seg >= n || candidate < 0 || candidate >= n || destination < 0 ||
      destination >= n)
    throw util::InputError("directional_deviation: unknown segment id");
  const geo::Vec2 mi = net.midpoints[static_cast<std::size_t>(seg)];
  const geo::Vec2 mc = net.midpoints[static_cast<std::size_t>(candidate)];
  const geo::Vec2 md = net.midpoints[static_cast<std::size_t>(destination)];
  const geo::Vec2 u{mc.x - mi.x, mc.y - mi.y};
  const geo::Vec2 v{md.x - mi.x, md.y - mi.y};
  if (std::hypot(u.x, u.y) == 0.0 || std::hypot(v.x, v.y) == 0.0) return 0.0;
  return geo::angle_between(u, v);
}

int crossed_bin(double p, double dtheta) {
  if (!(p >= 0.0 && p <= 1.0))
    throw util::InputError("crossed_bin: likelihood outside [0,1]");
  if (!(dtheta >= 0.0 && dtheta <= kPi))
    throw util::InputError("crossed_bin: deviation outside [0,pi]");
  const int p_bin = std::min(static_cast<int>(std::floor(5.0 * p)), 4);
  const int t_bin = std::min(static_cast<int>(std::floor(8.0 * dtheta / kPi)), 7);
  return p_bin * 8 + t_bin;
}

// --------------------------------------------------------------- parameters

void register_route_params(nn::ParamStore& store, int d) {
  store.create("route.wide.W", 40, d);
  store.create("route.deep.W_rho", d, 1);
  store.create("route.deep.W_P", d, 1);
  store.create("route.deep.W_ri", d, d);
  store.create("route.deep.W_rc", d, d);
  store.create("route.deep.W_dtheta", d, 2);
  store.create("route.deep.mlp.W1", 2 * d, 5 * d);
  store.create("route.deep.mlp.b1", 1, 2 * d);
  store.create("route.deep.mlp.W2", d, 2 * d);
  store.create("route.deep.mlp.b2", 1, d);
  store.create("route.agg.mlp.W1", 2 * d, 2 * d);
  store.create("route.agg.mlp.b1", 1, 2 * d);
  store.create("route.agg.mlp.W2", d, 2 * d);
  store.create("route.agg.mlp.b2", 1, d);
}

// ------------------------------------------------------------------ forward

ad::Var transition_contexts(ad::Tape& t, nn::Binder& b, int d, const Eigen::VectorXd& rho,
                            const Eigen::VectorXd& p, const Eigen::VectorXd& dtheta,
                            const std::vector<Eigen::Index>& from_rows,
                            const std::vector<Eigen::Index>& cand_rows, ad::Var env_tokens) {
  const Eigen::Index e = rho.size();
  if (p.size() != e || dtheta.size() != e ||
      static_cast<Eigen::Index>(from_rows.size()) != e ||
      static_cast<Eigen::Index>(cand_rows.size()) != e)
    throw util::InputError("transition_contexts: feature lists disagree in length");
  if (t.value(env_tokens).cols() != d)
    throw util::InputError("transition_contexts: token width mismatch");

  std::vector<Eigen::Index> wide_rows(static_cast<std::size_t>(e));
  Mat trig(e, 2);
  for (Eigen::Index i = 0; i < e; ++i) {
    wide_rows[static_cast<std::size_t>(i)] = crossed_bin(p(i), dtheta(i));
    trig(i, 0) = std::sin(dtheta(i));
    trig(i, 1) = std::cos(dtheta(i));
  }
  ad::Var wide = t.row_gather(b("route.wide.W"), wide_rows);

  ad::Var h = t.concat_cols(
      {t.matmul(t.constant(rho), t.transpose(b("route.deep.W_rho"))),
       t.matmul(t.constant(p), t.transpose(b("route.deep.W_P"))),
       t.matmul(t.row_gather(env_tokens, from_rows), t.transpose(b("route.deep.W_ri"))),
       t.matmul(t.row_gather(env_tokens, cand_rows), t.transpose(b("route.deep.W_rc"))),
       t.matmul(t.constant(trig), t.transpose(b("route.deep.W_dtheta")))});
  ad::Var hidden = t.relu(t.affine(h, b("route.deep.mlp.W1"), b("route.deep.mlp.b1")));
  ad::Var deep = t.affine(hidden, b("route.deep.mlp.W2"), b("route.deep.mlp.b2"));
  return t.add(wide, deep);
}

ad::Var route_forward(ad::Tape& t, nn::Binder& b, int d, const geo::RoadNetwork& net,
                      const TransitionStats& stats, const geo::Trajectory& traj,
                      ad::Var env_tokens) {
  const std::size_t n = traj.segs.size();
  if (n == 0) throw util::InputError("route_forward: empty trajectory");
  if (t.value(env_tokens).rows() != static_cast<Eigen::Index>(net.segments.size()))
    throw util::InputError("route_forward: one token row per segment expected");
  const int last = traj.segs[n - 1];

  std::vector<Eigen::Index> from_rows, cand_rows, pair_pos;
  std::vector<double> rho_v, p_v, th_v, w_v;
  std::vector<Eigen::Index> sel(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int seg = traj.segs[i];
    const double rho_i = journey_progression(traj, net, i);
    const auto probs = transition_likelihood(stats, net, seg);
    const int next = i + 1 < n ? traj.segs[i + 1] : -1;
    const std::size_t first = from_rows.size();
    sel[i] = -1;
    for (int c : net.out_neighbors[static_cast<std::size_t>(seg)]) {
      if (c == next) sel[i] = static_cast<Eigen::Index>(from_rows.size());
      from_rows.push_back(seg);
      cand_rows.push_back(c);
      pair_pos.push_back(static_cast<Eigen::Index>(i));
      rho_v.push_back(rho_i);
      p_v.push_back(probs.at(c));
      th_v.push_back(directional_deviation(net, seg, c, last));
    }
    if (i + 1 < n && sel[i] < 0)
      throw util::InputError("route_forward: position " + std::to_string(i) + " transition " +
                       std::to_string(seg) + "->" + std::to_string(next) +
                       " is not a road-network edge");
    // Mean-pool weight over the unselected candidates of this position; the
    // terminal position pools over all of them.
    std::size_t pool = from_rows.size() - first;
    if (i + 1 < n && sel[i] >= 0) --pool;
    const double w = pool > 0 ? 1.0 / static_cast<double>(pool) : 0.0;
    for (std::size_t e = first; e < from_rows.size(); ++e)
      w_v.push_back(i + 1 < n && static_cast<Eigen::Index>(e) == sel[i] ? 0.0 : w);
  }

  const Eigen::Index e_total = static_cast<Eigen::Index>(from_rows.size());
  ad::Var x;
  if (e_total == 0) {
    x = t.constant(Mat::Zero(static_cast<Eigen::Index>(n), 2 * d));
  } else {
    Eigen::VectorXd rho = Eigen::Map<const Eigen::VectorXd>(rho_v.data(), e_total);
    Eigen::VectorXd p = Eigen::Map<const Eigen::VectorXd>(p_v.data(), e_total);
    Eigen::VectorXd th = Eigen::Map<const Eigen::VectorXd>(th_v.data(), e_total);
    ad::Var contexts =
        transition_contexts(t, b, d, rho, p, th, from_rows, cand_rows, env_tokens);

    // Appended zero row stands in for the terminal position's selected vector.
    ad::Var padded = t.concat_rows({contexts, t.constant(Mat::Zero(1, d))});
    std::vector<Eigen::Index> sel_rows(n);
    for (std::size_t i = 0; i < n; ++i)
      sel_rows[i] = i + 1 < n ? sel[i] : e_total;
    ad::Var selected = t.row_gather(padded, sel_rows);

    Mat w_col = Eigen::Map<const Eigen::VectorXd>(w_v.data(), e_total);
    ad::Var unselected = t.row_scatter(t.colwise_scale(contexts, t.constant(w_col)), pair_pos,
                                       static_cast<Eigen::Index>(n));
    x = t.concat_cols({selected, unselected});
  }
  ad::Var hidden = t.relu(t.affine(x, b("route.agg.mlp.W1"), b("route.agg.mlp.b1")));
  return t.affine(hidden, b("route.agg.mlp.W2"), b("route.agg.mlp.b2"));
}

}  // namespace prtraj::route
