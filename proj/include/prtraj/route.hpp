// Route choice: navigational features over historical transitions, a
// Wide & Deep context per candidate transition, and the selected/unselected
// contrast that yields one choice token per trajectory position.

#pragma once

#include "prtraj/geo.hpp"
#include "prtraj/nn.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace prtraj::route {

// Historical transition frequencies, built from the training split only.
struct TransitionStats {
  std::map<std::pair<int, int>, std::int64_t> counts;

  std::int64_t count(int from, int to) const;
  void add(int from, int to) { ++counts[{from, to}]; }
};

TransitionStats build_transition_stats(const std::vector<geo::Trajectory>& trajs);
// CSV `from_id,to_id,count`, rows sorted by (from, to).
void save_transition_stats(const TransitionStats& stats, const std::string& path);
// Validates that every counted pair is a road-network edge.
TransitionStats load_transition_stats(const std::string& path, const geo::RoadNetwork& net);

// Fraction of the trajectory's total length traversed through position idx
// (0-based, inclusive).  Strictly increasing, exactly 1 at the last index.
double journey_progression(const geo::Trajectory& traj, const geo::RoadNetwork& net,
                           std::size_t idx);

// P(candidate | seg) over seg's out-neighbors; all-zero counts fall back to
// uniform.  Empty map when seg has no out-neighbors.
std::map<int, double> transition_likelihood(const TransitionStats& stats,
                                            const geo::RoadNetwork& net, int seg);

// Unsigned angle between the midpoint rays seg->candidate and
// seg->destination; coincident midpoints give 0.
double directional_deviation(const geo::RoadNetwork& net, int seg, int candidate,
                             int destination);

// Crossed one-hot index over 5 likelihood bins x 8 deviation bins; upper
// boundaries clamp into the top bin.  Out-of-range input is an input error.
int crossed_bin(double p, double dtheta);

// Registers every parameter of this module under the `route.` prefix.
void register_route_params(nn::ParamStore& store, int d);

// Wide & Deep context for a flat transition list (one row per transition).
// from_rows/cand_rows index into env_tokens.
ad::Var transition_contexts(ad::Tape& t, nn::Binder& b, int d, const Eigen::VectorXd& rho,
                            const Eigen::VectorXd& p, const Eigen::VectorXd& dtheta,
                            const std::vector<Eigen::Index>& from_rows,
                            const std::vector<Eigen::Index>& cand_rows, ad::Var env_tokens);

// Choice token for every position of one trajectory (n x d): contexts for
// all candidate transitions, selected vs mean-pooled unselected, final MLP.
// The terminal position contributes a zero selected vector and pools over
// all of its out-neighbors.
ad::Var route_forward(ad::Tape& t, nn::Binder& b, int d, const geo::RoadNetwork& net,
                      const TransitionStats& stats, const geo::Trajectory& traj,
                      ad::Var env_tokens);

}  // namespace prtraj::route
