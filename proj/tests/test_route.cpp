#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "prtraj/route.hpp"
#include "support/gradcheck.hpp"

#include <cmath>
#include <filesystem>
#include <random>

using namespace prtraj;
using Mat = Eigen::MatrixXd;

namespace {

constexpr double kPi = 3.14159265358979323846;

geo::RoadNetwork write_net(const std::string& stem, const std::string& seg_rows,
                           const std::string& edge_rows) {
  auto dir = std::filesystem::temp_directory_path() / "prtraj_route_test";
  std::filesystem::create_directories(dir);
  auto nf = (dir / (stem + "_net.csv")).string();
  auto ef = (dir / (stem + "_edges.csv")).string();
  util::write_file(nf, "id,start_lat,start_lon,end_lat,end_lon,length,road_type,lanes\n" +
                           seg_rows);
  util::write_file(ef, "from_id,to_id\n" + edge_rows);
  return geo::load_network(nf, ef);
}

// Hub 0 feeding 1..4, and an isolated sink 5.
geo::RoadNetwork fork_net() {
  return write_net("fork",
                   "0,39.9000,116.4000,39.9000,116.4010,100,0,2\n"
                   "1,39.9000,116.4010,39.9010,116.4010,100,0,\n"
                   "2,39.9000,116.4010,39.8990,116.4010,100,0,\n"
                   "3,39.9000,116.4010,39.9000,116.4020,100,0,\n"
                   "4,39.9000,116.4010,39.9000,116.4000,100,0,\n"
                   "5,39.9050,116.4050,39.9050,116.4060,100,0,\n",
                   "0,1\n0,2\n0,3\n0,4\n");
}

// Small loop with a fork at 0 and at 3; segment 4 is a dead end.
geo::RoadNetwork city_net() {
  return write_net("city",
                   "0,39.9000,116.4000,39.9000,116.4010,100,0,2\n"
                   "1,39.9000,116.4010,39.9010,116.4010,120,1,\n"
                   "2,39.9000,116.4010,39.8990,116.4010,90,2,1\n"
                   "3,39.9010,116.4010,39.9010,116.4020,140,0,3\n"
                   "4,39.9010,116.4020,39.9020,116.4020,80,1,2\n"
                   "5,39.9010,116.4020,39.9000,116.4020,110,3,4\n",
                   "0,1\n0,2\n1,3\n2,3\n3,4\n3,5\n5,0\n");
}

geo::Trajectory make_traj(std::vector<int> segs) {
  geo::Trajectory t;
  t.segs = std::move(segs);
  t.ts.resize(t.segs.size());
  for (std::size_t i = 0; i < t.ts.size(); ++i)
    t.ts[i] = 1700000000 + static_cast<std::int64_t>(60 * i);
  return t;
}

Mat random_mat(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = u(rng);
  return m;
}

void randomize_all(nn::ParamStore& ps, std::uint64_t seed) {
  nn::init_params(ps, seed);
  std::uint64_t k = 0;
  for (auto& p : ps.all()) p.value = random_mat(p.value.rows(), p.value.cols(), seed + ++k);
}

// Per-candidate evaluation of the Wide & Deep context, no tape.
Eigen::VectorXd ref_context(int d, nn::ParamStore& ps, double rho, double p, double th,
                            const Eigen::VectorXd& tok_from, const Eigen::VectorXd& tok_cand) {
  auto& P = ps;
  Eigen::VectorXd h(5 * d);
  h.segment(0, d) = P.get("route.deep.W_rho").value * rho;
  h.segment(d, d) = P.get("route.deep.W_P").value * p;
  h.segment(2 * d, d) = P.get("route.deep.W_ri").value * tok_from;
  h.segment(3 * d, d) = P.get("route.deep.W_rc").value * tok_cand;
  h.segment(4 * d, d) =
      P.get("route.deep.W_dtheta").value * Eigen::Vector2d(std::sin(th), std::cos(th));
  Eigen::VectorXd hid =
      (P.get("route.deep.mlp.W1").value * h + P.get("route.deep.mlp.b1").value.transpose())
          .cwiseMax(0.0);
  Eigen::VectorXd deep =
      P.get("route.deep.mlp.W2").value * hid + P.get("route.deep.mlp.b2").value.transpose();
  return P.get("route.wide.W").value.row(route::crossed_bin(p, th)).transpose() + deep;
}

// Per-position evaluation of the whole module, no tape.
Mat ref_route(int d, const geo::RoadNetwork& net, const route::TransitionStats& stats,
              const geo::Trajectory& traj, const Mat& tok, nn::ParamStore& ps) {
  const std::size_t n = traj.segs.size();
  const int last = traj.segs[n - 1];
  Mat out(static_cast<Eigen::Index>(n), d);
  for (std::size_t i = 0; i < n; ++i) {
    const int seg = traj.segs[i];
    const double rho = route::journey_progression(traj, net, i);
    const auto probs = route::transition_likelihood(stats, net, seg);
    std::map<int, Eigen::VectorXd> ctx;
    for (int c : net.out_neighbors[static_cast<std::size_t>(seg)])
      ctx[c] = ref_context(d, ps, rho, probs.at(c),
                           route::directional_deviation(net, seg, c, last),
                           tok.row(seg).transpose(), tok.row(c).transpose());
    Eigen::VectorXd sel = Eigen::VectorXd::Zero(d);
    Eigen::VectorXd uns = Eigen::VectorXd::Zero(d);
    int k = 0;
    for (const auto& [c, v] : ctx) {
      if (i + 1 < n && c == traj.segs[i + 1])
        sel = v;
      else {
        uns += v;
        ++k;
      }
    }
    if (k > 0) uns /= k;
    Eigen::VectorXd x(2 * d);
    x << sel, uns;
    Eigen::VectorXd hid =
        (ps.get("route.agg.mlp.W1").value * x + ps.get("route.agg.mlp.b1").value.transpose())
            .cwiseMax(0.0);
    out.row(static_cast<Eigen::Index>(i)) =
        (ps.get("route.agg.mlp.W2").value * hid + ps.get("route.agg.mlp.b2").value.transpose())
            .transpose();
  }
  return out;
}

Mat run_route(int d, const geo::RoadNetwork& net, const route::TransitionStats& stats,
              const geo::Trajectory& traj, const Mat& tok, nn::ParamStore& ps) {
  ad::Tape t;
  nn::Binder b(t, ps);
  return t.value(route::route_forward(t, b, d, net, stats, traj, t.constant(tok)));
}

}  // namespace

TEST_CASE("journey progression follows traversed length") {
  auto net = write_net("chain",
                       "0,39.9000,116.4000,39.9000,116.4010,100,0,\n"
                       "1,39.9000,116.4010,39.9010,116.4010,300,0,\n"
                       "2,39.9010,116.4010,39.9010,116.4020,600,0,\n",
                       "0,1\n1,2\n");
  auto traj = make_traj({0, 1, 2});
  CHECK(route::journey_progression(traj, net, 0) == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(route::journey_progression(traj, net, 1) == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(route::journey_progression(traj, net, 2) == 1.0);
  CHECK_THROWS_AS(route::journey_progression(traj, net, 3), util::InputError);

  // Equal lengths: exact quarters, strictly increasing, final value exactly 1.
  auto eq = write_net("chain_eq",
                      "0,39.9000,116.4000,39.9000,116.4010,50,0,\n"
                      "1,39.9000,116.4010,39.9010,116.4010,50,0,\n"
                      "2,39.9010,116.4010,39.9010,116.4020,50,0,\n"
                      "3,39.9010,116.4020,39.9020,116.4020,50,0,\n",
                      "0,1\n1,2\n2,3\n");
  auto t4 = make_traj({0, 1, 2, 3});
  double prev = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    double r = route::journey_progression(t4, eq, i);
    CHECK(r == doctest::Approx(0.25 * static_cast<double>(i + 1)).epsilon(1e-12));
    CHECK(r > prev);
    prev = r;
  }
  CHECK(route::journey_progression(t4, eq, 3) == 1.0);
}

TEST_CASE("transition likelihood normalizes counts with uniform fallback") {
  auto net = fork_net();
  route::TransitionStats stats;
  stats.counts[{0, 1}] = 3;
  stats.counts[{0, 2}] = 1;

  auto probs = route::transition_likelihood(stats, net, 0);
  REQUIRE(probs.size() == 4);
  CHECK(probs.at(1) == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(probs.at(2) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(probs.at(3) == 0.0);
  CHECK(probs.at(4) == 0.0);

  // No observations at all: uniform over the out-neighbors.
  auto uniform = route::transition_likelihood(route::TransitionStats{}, net, 0);
  REQUIRE(uniform.size() == 4);
  for (const auto& [to, p] : uniform) CHECK(p == doctest::Approx(0.25).epsilon(1e-12));

  // No out-neighbors: empty distribution.
  CHECK(route::transition_likelihood(stats, net, 5).empty());
  CHECK_THROWS_AS(route::transition_likelihood(stats, net, 99), util::InputError);

  // Random counts always sum to one.
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> cnt(0, 50);
  for (int trial = 0; trial < 200; ++trial) {
    route::TransitionStats s;
    for (int to = 1; to <= 4; ++to) {
      int c = cnt(rng);
      if (c > 0) s.counts[{0, to}] = c;
    }
    double sum = 0.0;
    for (const auto& [to, p] : route::transition_likelihood(s, net, 0)) {
      CHECK(p >= 0.0);
      sum += p;
    }
    CHECK(std::abs(sum - 1.0) < 1e-9);
  }
}

TEST_CASE("directional deviation measures the midpoint angle") {
  // Midpoints: 0 at the origin of the arrangement, 1 east, 2 west, 3 north,
  // 4 shares 0's midpoint (same chord reversed).
  auto net = write_net("rays",
                       "0,39.9000,116.3990,39.9000,116.4010,100,0,\n"
                       "1,39.9000,116.4030,39.9000,116.4050,100,0,\n"
                       "2,39.9000,116.3950,39.9000,116.3970,100,0,\n"
                       "3,39.9010,116.3990,39.9010,116.4010,100,0,\n"
                       "4,39.9000,116.4010,39.9000,116.3990,100,0,\n",
                       "");
  CHECK(route::directional_deviation(net, 0, 1, 1) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(route::directional_deviation(net, 0, 1, 2) == doctest::Approx(kPi).epsilon(1e-12));
  CHECK(route::directional_deviation(net, 0, 3, 1) ==
        doctest::Approx(kPi / 2).epsilon(1e-9));
  // Coincident midpoints degenerate to zero deviation.
  CHECK(route::directional_deviation(net, 0, 4, 1) == 0.0);
  CHECK(route::directional_deviation(net, 0, 1, 4) == 0.0);
  CHECK_THROWS_AS(route::directional_deviation(net, 0, 1, 9), util::InputError);

  // Random triples against a direct arccos over the projected midpoints.
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> jitter(-0.02, 0.02);
  std::string rows;
  for (int i = 0; i < 12; ++i) {
    double lat = 39.9 + jitter(rng), lon = 116.4 + jitter(rng);
    rows += std::to_string(i) + "," + std::to_string(lat) + "," + std::to_string(lon) + "," +
            std::to_string(lat + 0.001) + "," + std::to_string(lon + 0.001) + ",100,0,\n";
  }
  auto rnd = write_net("rnd_rays", rows, "");
  std::uniform_int_distribution<int> pick(0, 11);
  for (int trial = 0; trial < 300; ++trial) {
    int i = pick(rng), c = pick(rng), dst = pick(rng);
    geo::Vec2 mi = rnd.midpoints[static_cast<std::size_t>(i)];
    geo::Vec2 mc = rnd.midpoints[static_cast<std::size_t>(c)];
    geo::Vec2 md = rnd.midpoints[static_cast<std::size_t>(dst)];
    double ux = mc.x - mi.x, uy = mc.y - mi.y, vx = md.x - mi.x, vy = md.y - mi.y;
    double nu = std::hypot(ux, uy), nv = std::hypot(vx, vy);
    double got = route::directional_deviation(rnd, i, c, dst);
    if (nu == 0.0 || nv == 0.0) {
      CHECK(got == 0.0);
      continue;
    }
    double cosang = std::clamp((ux * vx + uy * vy) / (nu * nv), -1.0, 1.0);
    CHECK(std::abs(got - std::acos(cosang)) < 1e-9);
    CHECK(got >= 0.0);
    CHECK(got <= kPi);
  }
}

TEST_CASE("crossed bin arithmetic and bounds") {
  CHECK(route::crossed_bin(0.0, 0.0) == 0);
  CHECK(route::crossed_bin(1.0, kPi) == 39);
  CHECK(route::crossed_bin(0.5, kPi / 2) == 20);
  CHECK(route::crossed_bin(0.999, 0.0) == 32);
  CHECK(route::crossed_bin(0.2, 0.0) == 8);
  CHECK(route::crossed_bin(0.0, kPi / 8) == 1);

  // Nondecreasing in each coordinate, always within [0, 40).
  for (int pi = 0; pi <= 20; ++pi) {
    int prev = -1;
    for (int ti = 0; ti <= 20; ++ti) {
      int bin = route::crossed_bin(pi / 20.0, ti == 20 ? kPi : kPi * ti / 20.0);
      CHECK(bin >= 0);
      CHECK(bin < 40);
      CHECK(bin >= prev);
      prev = bin;
    }
  }

  CHECK_THROWS_AS(route::crossed_bin(-0.01, 0.0), util::InputError);
  CHECK_THROWS_AS(route::crossed_bin(1.01, 0.0), util::InputError);
  CHECK_THROWS_AS(route::crossed_bin(0.5, -0.01), util::InputError);
  CHECK_THROWS_AS(route::crossed_bin(0.5, kPi + 0.01), util::InputError);
  CHECK_THROWS_AS(route::crossed_bin(std::nan(""), 0.0), util::InputError);
}

TEST_CASE("transition stats build and round trip") {
  auto net = fork_net();
  std::vector<geo::Trajectory> trajs = {make_traj({0, 1}), make_traj({0, 2}),
                                        make_traj({0, 1})};
  auto stats = route::build_transition_stats(trajs);
  CHECK(stats.count(0, 1) == 2);
  CHECK(stats.count(0, 2) == 1);
  CHECK(stats.count(0, 3) == 0);
  CHECK(stats.counts.size() == 2);

  auto dir = std::filesystem::temp_directory_path() / "prtraj_route_test";
  std::filesystem::create_directories(dir);
  auto path = (dir / "stats.csv").string();
  route::save_transition_stats(stats, path);
  CHECK(util::read_file(path) == "from_id,to_id,count\n0,1,2\n0,2,1\n");

  auto loaded = route::load_transition_stats(path, net);
  CHECK(loaded.counts == stats.counts);

  util::write_file(path, "from_id,to_id,count\n1,0,4\n");
  CHECK_THROWS_AS(route::load_transition_stats(path, net), util::InputError);  // not an edge
  util::write_file(path, "from_id,to_id,count\n0,9,4\n");
  CHECK_THROWS_AS(route::load_transition_stats(path, net), util::InputError);  // unknown id
  util::write_file(path, "from_id,to_id,count\n0,1,-2\n");
  CHECK_THROWS_AS(route::load_transition_stats(path, net), util::InputError);  // negative
  util::write_file(path, "from_id,to_id,count\n0,1,1\n0,1,2\n");
  CHECK_THROWS_AS(route::load_transition_stats(path, net), util::InputError);  // duplicate
  util::write_file(path, "from,to,count\n");
  CHECK_THROWS_AS(route::load_transition_stats(path, net), util::InputError);  // header
}

TEST_CASE("transition context matches a handwritten evaluation") {
  const int d = 2;
  nn::ParamStore ps;
  route::register_route_params(ps, d);
  randomize_all(ps, 404);

  Mat tok = random_mat(4, d, 91);
  Eigen::VectorXd rho(1), p(1), th(1);
  rho << 0.3;
  p << 0.4;
  th << 1.0;

  ad::Tape t;
  nn::Binder b(t, ps);
  ad::Var out = route::transition_contexts(t, b, d, rho, p, th, {1}, {2}, t.constant(tok));
  Eigen::VectorXd want =
      ref_context(d, ps, 0.3, 0.4, 1.0, tok.row(1).transpose(), tok.row(2).transpose());
  REQUIRE(t.value(out).rows() == 1);
  CHECK((t.value(out).row(0).transpose() - want).cwiseAbs().maxCoeff() < 1e-12);

  // With the deep path zeroed the context is exactly a row of the wide table.
  for (auto& prm : ps.all())
    if (prm.name != "route.wide.W") prm.value.setZero();
  ad::Tape t2;
  nn::Binder b2(t2, ps);
  ad::Var wide_only =
      route::transition_contexts(t2, b2, d, rho, p, th, {1}, {2}, t2.constant(tok));
  CHECK((t2.value(wide_only).row(0) -
         ps.get("route.wide.W").value.row(route::crossed_bin(0.4, 1.0)))
            .cwiseAbs()
            .maxCoeff() == 0.0);

  // Zero deviation feeds (sin, cos) = (0, 1): wire the deep MLP to pass the
  // deviation block through and check the cos column comes out.
  nn::ParamStore ps3;
  route::register_route_params(ps3, d);
  ps3.get("route.deep.W_dtheta").value << 10, 3, 20, 5;
  auto& w1 = ps3.get("route.deep.mlp.W1").value;
  w1(0, 4 * d) = 1.0;
  w1(1, 4 * d + 1) = 1.0;
  auto& w2 = ps3.get("route.deep.mlp.W2").value;
  w2(0, 0) = 1.0;
  w2(1, 1) = 1.0;
  ad::Tape t3;
  nn::Binder b3(t3, ps3);
  Eigen::VectorXd zero1(1);
  zero1 << 0.0;
  ad::Var probe =
      route::transition_contexts(t3, b3, d, zero1, zero1, zero1, {0}, {0}, t3.constant(tok));
  CHECK(t3.value(probe)(0, 0) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(t3.value(probe)(0, 1) == doctest::Approx(5.0).epsilon(1e-12));
}

TEST_CASE("choice tokens match a dense per-position reference") {
  const int d = 4;
  auto net = city_net();
  auto stats = route::build_transition_stats(
      {make_traj({0, 1, 3, 5}), make_traj({0, 1, 3, 4}), make_traj({0, 2, 3, 4})});
  nn::ParamStore ps;
  route::register_route_params(ps, d);
  randomize_all(ps, 515);
  Mat tok = random_mat(net.size(), d, 77);

  for (const auto& segs :
       std::vector<std::vector<int>>{{0, 1, 3, 5}, {0, 2, 3, 4}, {0, 1, 3}}) {
    auto traj = make_traj(segs);
    Mat got = run_route(d, net, stats, traj, tok, ps);
    Mat want = ref_route(d, net, stats, traj, tok, ps);
    REQUIRE(got.rows() == static_cast<Eigen::Index>(segs.size()));
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-9);
  }

  // Candidate order never matters: reversing the adjacency lists changes
  // nothing but floating-point noise.
  auto traj = make_traj({0, 1, 3, 5});
  Mat base = run_route(d, net, stats, traj, tok, ps);
  auto shuffled = net;
  for (auto& nbrs : shuffled.out_neighbors) std::reverse(nbrs.begin(), nbrs.end());
  Mat permuted = run_route(d, shuffled, stats, traj, tok, ps);
  CHECK((base - permuted).cwiseAbs().maxCoeff() < 1e-9);

  // A hop that is not an edge is rejected.
  CHECK_THROWS_WITH_AS(run_route(d, net, stats, make_traj({0, 3}), tok, ps),
                       doctest::Contains("not a road-network edge"), util::InputError);

  // Lone position on a dead end: no transitions at all, output is the final
  // MLP applied to a zero vector.
  Mat lone = run_route(d, net, stats, make_traj({4}), tok, ps);
  Eigen::VectorXd hid = (ps.get("route.agg.mlp.b1").value.transpose()).cwiseMax(0.0).eval();
  Eigen::VectorXd want_lone =
      ps.get("route.agg.mlp.W2").value * hid + ps.get("route.agg.mlp.b2").value.transpose();
  REQUIRE(lone.rows() == 1);
  CHECK((lone.row(0).transpose() - want_lone).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("route parameters all pass a gradient check") {
  const int d = 8;
  auto net = city_net();
  auto stats = route::build_transition_stats(
      {make_traj({0, 1, 3, 5}), make_traj({0, 1, 3, 4}), make_traj({0, 2, 3, 4})});
  auto traj = make_traj({0, 1, 3, 5});
  nn::ParamStore ps;
  route::register_route_params(ps, d);
  nn::init_params(ps, 2024);
  Mat tok = random_mat(net.size(), d, 55);

  std::vector<Mat*> inputs;
  std::vector<Mat> analytic;
  {
    ad::Tape t;
    nn::Binder b(t, ps);
    ad::Var tok_v = t.leaf(tok);
    ad::Var loss = t.sum_all(route::route_forward(t, b, d, net, stats, traj, tok_v));
    t.backward(loss);
    for (auto& p : ps.all()) {
      inputs.push_back(&p.value);
      analytic.push_back(t.grad(b(p.name)));
    }
    inputs.push_back(&tok);
    analytic.push_back(t.grad(tok_v));
  }
  auto f = [&]() {
    ad::Tape t;
    nn::Binder b(t, ps);
    return t.value(
        t.sum_all(route::route_forward(t, b, d, net, stats, traj, t.leaf(tok))))(0, 0);
  };
  // Small step: the module is piecewise linear, so the only finite-difference
  // error is a perturbation stepping across a ReLU kink.
  auto res = prtraj::testing::grad_check(f, inputs, analytic, 1e-6, 400, 31337);
  CHECK(res.max_rel_err < 1e-3);
  CHECK(res.checked > 200);
}

TEST_CASE("route parameter inventory") {
  const int d = 6;
  nn::ParamStore ps;
  route::register_route_params(ps, d);
  CHECK(ps.size() == 14);
  CHECK(ps.get("route.wide.W").value.rows() == 40);
  CHECK(ps.get("route.wide.W").value.cols() == d);
  CHECK(ps.get("route.deep.W_rho").value.cols() == 1);
  CHECK(ps.get("route.deep.W_dtheta").value.cols() == 2);
  CHECK(ps.get("route.deep.mlp.W1").value.rows() == 2 * d);
  CHECK(ps.get("route.deep.mlp.W1").value.cols() == 5 * d);
  CHECK(ps.get("route.agg.mlp.W1").value.cols() == 2 * d);
  CHECK(ps.get("route.agg.mlp.W2").value.rows() == d);
}
