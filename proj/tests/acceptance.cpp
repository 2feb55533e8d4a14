// Acceptance gate: eight checks, one pass/fail line each.  Fast oracles run
// first, then a desk-scale training run with its ablations, then the
// invariance sweep.  Exit status is nonzero if any line fails.

#include "prtraj/pipeline.hpp"
#include "support/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace prtraj;
using Mat = Eigen::MatrixXd;

namespace {

// ---------------------------------------------------------------------------
// Harness
// ---------------------------------------------------------------------------

struct CheckFailure {
  std::string what;
};

void require(bool ok, const std::string& what) {
  if (!ok) throw CheckFailure{what};
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(3) << v;
  return os.str();
}

std::filesystem::path work_dir() {
  auto dir = std::filesystem::temp_directory_path() / "prtraj_acceptance";
  std::filesystem::create_directories(dir);
  return dir;
}

// ---------------------------------------------------------------------------
// Small fixtures (mirrors of the unit-suite builders)
// ---------------------------------------------------------------------------

geo::RoadNetwork build_net(const std::string& tag, const std::vector<double>& lengths,
                           const std::vector<std::pair<int, int>>& edge_list) {
  std::ostringstream segs, edges;
  segs << "id,start_lat,start_lon,end_lat,end_lon,length,road_type,lanes\n";
  edges << "from_id,to_id\n";
  segs << std::setprecision(10);
  const double pi = 3.14159265358979323846;
  const int m = static_cast<int>(lengths.size());
  for (int i = 0; i < m; ++i) {
    double a0 = 2.0 * pi * i / m;
    double a1 = a0 + pi / m;
    segs << i << ',' << 39.9 + 0.01 * std::cos(a0) << ',' << 116.4 + 0.01 * std::sin(a0)
         << ',' << 39.9 + 0.01 * std::cos(a1) << ',' << 116.4 + 0.01 * std::sin(a1) << ','
         << lengths[static_cast<std::size_t>(i)] << ',' << i % 3 << ',' << i % 4 + 1
         << '\n';
  }
  for (auto [a, b] : edge_list) edges << a << ',' << b << '\n';
  auto nf = (work_dir() / (tag + "_net.csv")).string();
  auto ef = (work_dir() / (tag + "_edges.csv")).string();
  util::write_file(nf, segs.str());
  util::write_file(ef, edges.str());
  return geo::load_network(nf, ef);
}

geo::RoadNetwork ring_net(int m) {
  std::vector<double> lengths;
  std::vector<std::pair<int, int>> edges;
  for (int i = 0; i < m; ++i) {
    lengths.push_back(100 + 10 * (i % 7));
    edges.emplace_back(i, (i + 1) % m);
    edges.emplace_back(i, (i + 2) % m);
  }
  return build_net("ring" + std::to_string(m), lengths, edges);
}

std::vector<geo::Trajectory> random_walks(const geo::RoadNetwork& net, int n,
                                          std::size_t len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<geo::Trajectory> out;
  for (int k = 0; k < n; ++k) {
    geo::Trajectory tr;
    int cur = static_cast<int>(rng() % static_cast<std::uint64_t>(net.size()));
    std::int64_t ts = 1704067200 + 600 * k;
    for (std::size_t j = 0; j < len; ++j) {
      tr.segs.push_back(cur);
      tr.ts.push_back(ts);
      const auto& nb = net.out_neighbors[static_cast<std::size_t>(cur)];
      cur = nb[rng() % nb.size()];
      ts += 30 + static_cast<std::int64_t>(rng() % 61);
    }
    out.push_back(tr);
  }
  return out;
}

Mat random_mat(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = u(rng);
  return m;
}

struct World {
  geo::RoadNetwork net;
  model::ModelConfig cfg;
  model::ModelInputs in;
  std::vector<geo::Trajectory> trajs;
};

void fill_world(World& w, int m, int d, int layers, double dropout, int n_trajs,
                std::size_t len, std::uint64_t seed) {
  w.net = ring_net(m);
  w.cfg.env.d = d;
  w.cfg.env.heads = 4;
  w.cfg.env.n_road_types = 3;
  w.cfg.env.n_categories = 2;
  w.cfg.enc.d = d;
  w.cfg.enc.layers = layers;
  w.cfg.enc.heads = 4;
  w.cfg.enc.dropout = dropout;
  w.in.net = &w.net;
  w.in.p_fine = random_mat(m, d, seed ^ 0x51u);

  auto gi = geo::make_grid(w.net, 150.0);
  w.in.field.gi = gi;
  auto cells = env::segment_cells(w.net, gi);
  std::mt19937_64 grng(seed ^ 0x52u);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int c = 0; c < w.cfg.env.n_categories; ++c) {
    std::vector<char> valid(static_cast<std::size_t>(gi.cell_count()), 0);
    for (std::size_t s = static_cast<std::size_t>(c); s < cells.size(); s += 3)
      valid[static_cast<std::size_t>(cells[s])] = 1;
    Mat g = Mat::Zero(gi.cell_count(), d);
    for (int cell = 0; cell < gi.cell_count(); ++cell)
      if (valid[static_cast<std::size_t>(cell)])
        for (int j = 0; j < d; ++j) g(cell, j) = u(grng);
    w.in.field.grids.push_back(g);
    w.in.field.valid.push_back(valid);
  }

  w.trajs = random_walks(w.net, n_trajs, len, seed);
  w.in.stats = route::build_transition_stats(w.trajs);
  w.in.avg_times = model::build_avg_times(w.trajs);
}

void all_paths(const geo::RoadNetwork& net, int cur, int dst, std::vector<int>& path,
               std::vector<char>& on, std::vector<std::vector<int>>& out) {
  if (cur == dst) {
    out.push_back(path);
    require(out.size() < 200000, "path enumeration blew up");
    return;
  }
  for (int v : net.out_neighbors[static_cast<std::size_t>(cur)]) {
    if (on[static_cast<std::size_t>(v)]) continue;
    on[static_cast<std::size_t>(v)] = 1;
    path.push_back(v);
    all_paths(net, v, dst, path, on, out);
    path.pop_back();
    on[static_cast<std::size_t>(v)] = 0;
  }
}

std::vector<downstream::Path> enumerate_k(const geo::RoadNetwork& net, int src, int dst,
                                          std::size_t k) {
  std::vector<std::vector<int>> raw;
  std::vector<int> path{src};
  std::vector<char> on(static_cast<std::size_t>(net.size()), 0);
  on[static_cast<std::size_t>(src)] = 1;
  all_paths(net, src, dst, path, on, raw);
  std::vector<downstream::Path> out;
  for (auto& p : raw) out.push_back({p, downstream::path_length(net, p)});
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    if (a.length != b.length) return a.length < b.length;
    return a.segs < b.segs;
  });
  if (out.size() > k) out.resize(k);
  return out;
}

// ---------------------------------------------------------------------------
// Desk-scale state shared by the training run and its ablations
// ---------------------------------------------------------------------------

struct Desk {
  bool ready = false;
  geo::RoadNetwork net;
  poi::CategoryRegistry reg;
  model::ModelConfig cfg;
  model::ModelInputs in;
  std::vector<geo::Trajectory> train, val, test;
  nn::ParamStore pretrained;
  double base_mae = 0.0;  // train-mean travel-time predictor on the test split
};

constexpr int kDeskEpochs = 10;
constexpr int kDeskBatch = 32;
constexpr std::uint64_t kDeskSeed = 9001;

pretrain::PretrainConfig desk_pretrain_config(const std::string& log_path) {
  pretrain::PretrainConfig pcfg;
  pcfg.epochs = kDeskEpochs;
  pcfg.batch_size = kDeskBatch;
  pcfg.warmup_epochs = 2;
  pcfg.lr_peak = 1e-2;  // ten epochs leave no room for a cautious ramp
  pcfg.lr_min = 1e-4;
  pcfg.tau = 0.05;
  pcfg.seed = kDeskSeed;
  pcfg.log_path = log_path;
  return pcfg;
}

downstream::FinetuneConfig desk_finetune_config(const std::string& log_path) {
  downstream::FinetuneConfig fcfg;
  fcfg.epochs = kDeskEpochs;
  fcfg.batch_size = kDeskBatch;
  fcfg.warmup_epochs = 2;
  fcfg.lr_peak = 3e-3;
  fcfg.lr_min = 1e-5;
  fcfg.seed = kDeskSeed;
  fcfg.log_path = log_path;
  return fcfg;
}

// Mean of the masked-objective column over the last epoch of a training log.
double last_epoch_mlm(const std::string& log_path, int steps_per_epoch) {
  auto lines = util::read_lines(log_path);
  require(lines.size() > 1, "training log is empty");
  std::size_t first = lines.size() > static_cast<std::size_t>(steps_per_epoch)
                          ? lines.size() - static_cast<std::size_t>(steps_per_epoch)
                          : 1;
  double sum = 0.0;
  int n = 0;
  for (std::size_t i = first; i < lines.size(); ++i) {
    auto f = util::split(lines[i], ',');
    require(f.size() == 5, "unexpected training log row");
    sum += util::parse_double(f[2], "mlm column");
    ++n;
  }
  require(n > 0, "no rows in the final epoch");
  return sum / n;
}

void build_desk(Desk& desk) {
  pipeline::SyntheticCitySpec spec;
  spec.m = 8;  // 224 directed segments
  spec.n_categories = 4;
  spec.subs_per_category = 2;
  spec.pois_per_category = 80;
  spec.n_trajs = 2000;
  spec.traj_len_min = 4;
  spec.traj_len_max = 24;
  spec.turn_bias = 0.7;

  std::mt19937_64 rng(util::derive_seed(kDeskSeed, "desk-city"));
  auto city = pipeline::generate_synthetic_city(spec, rng);
  const std::string dir = (work_dir() / "desk").string();
  util::ensure_dir(dir);
  util::write_file(dir + "/net.csv", city.network_csv);
  util::write_file(dir + "/edges.csv", city.edges_csv);
  util::write_file(dir + "/reg.csv", city.registry_csv);
  util::write_file(dir + "/pois.csv", city.poi_csv);
  util::write_file(dir + "/traj.txt", city.traj_txt);

  desk.net = geo::load_network(dir + "/net.csv", dir + "/edges.csv");
  desk.reg = poi::load_registry(dir + "/reg.csv");
  auto pois = poi::load_pois(dir + "/pois.csv", desk.reg);
  auto splits =
      pipeline::split_chronological(geo::load_trajectories(dir + "/traj.txt", desk.net, 128));
  desk.train = std::move(splits.train);
  desk.val = std::move(splits.val);
  desk.test = std::move(splits.test);

  desk.cfg.env.d = 32;
  desk.cfg.env.heads = 4;
  desk.cfg.env.n_road_types = 4;
  desk.cfg.env.n_categories = desk.reg.primary_count();
  desk.cfg.enc.d = 32;
  desk.cfg.enc.layers = 2;
  desk.cfg.enc.heads = 4;
  desk.cfg.enc.dropout = 0.1;
  desk.cfg.enc.max_len = 128;

  desk.in.net = &desk.net;
  desk.in.stats = route::build_transition_stats(desk.train);
  desk.in.avg_times = model::build_avg_times(desk.train);

  auto provider = poi::make_mock_provider(32);
  auto contexts = poi::build_fine_contexts(desk.net, pois, 100.0);
  desk.in.p_fine.resize(desk.net.size(), 32);
  for (int s = 0; s < desk.net.size(); ++s)
    desk.in.p_fine.row(s) =
        provider
            ->embed(poi::build_fine_prompt("Desk City", 100.0,
                                           contexts[static_cast<std::size_t>(s)], desk.reg))
            .transpose();
  auto gi = geo::make_grid(desk.net, 400.0);
  desk.in.field.gi = gi;
  for (int c = 0; c < desk.reg.primary_count(); ++c) {
    Mat g = Mat::Zero(gi.cell_count(), 32);
    std::vector<char> valid(static_cast<std::size_t>(gi.cell_count()), 0);
    for (const auto& cluster : poi::select_cluster_cells(pois, desk.net, gi, c)) {
      const int cell = gi.flat(cluster.ix, cluster.iy);
      g.row(cell) =
          provider->embed(poi::build_coarse_prompt("Desk City", 400.0, cluster, desk.reg))
              .transpose();
      valid[static_cast<std::size_t>(cell)] = 1;
    }
    desk.in.field.grids.push_back(std::move(g));
    desk.in.field.valid.push_back(std::move(valid));
  }

  double train_mean = 0.0;
  for (const auto& t : desk.train) train_mean += downstream::tte_label_minutes(t);
  train_mean /= static_cast<double>(desk.train.size());
  double base = 0.0;
  for (const auto& t : desk.test)
    base += std::abs(downstream::tte_label_minutes(t) - train_mean);
  desk.base_mae = base / static_cast<double>(desk.test.size());
}

downstream::StrMetrics desk_str_metrics(const Desk& desk, const model::ModelConfig& cfg,
                                        nn::ParamStore& store) {
  std::mt19937_64 rng(util::derive_seed(kDeskSeed, "desk-str"));
  auto bench =
      downstream::build_str_benchmark(desk.test, desk.net, desk.in.avg_times, 30, 150, rng);
  std::vector<geo::Trajectory> cands = bench.originals;
  cands.insert(cands.end(), bench.distractors.begin(), bench.distractors.end());
  Mat zq = downstream::embed_trajectories(store, cfg, desk.in, bench.queries);
  Mat zc = downstream::embed_trajectories(store, cfg, desk.in, cands);
  return downstream::str_evaluate(zq, zc);
}

double desk_tte_mae(const Desk& desk, const model::ModelConfig& cfg, nn::ParamStore store,
                    const std::string& tag) {
  auto fcfg = desk_finetune_config((work_dir() / ("desk_tte_" + tag + ".csv")).string());
  downstream::finetune_tte(store, cfg, desk.in, desk.train, fcfg);
  auto preds = downstream::predict_tte(store, cfg, desk.in, desk.test);
  std::vector<double> labels;
  for (const auto& t : desk.test) labels.push_back(downstream::tte_label_minutes(t));
  return downstream::metric_regression(preds, labels).mae;
}

// ---------------------------------------------------------------------------
// Criterion bodies
// ---------------------------------------------------------------------------

std::string check_equations() {
  // Row softmax and log-softmax against the direct formulas.
  Mat x = random_mat(3, 4, 11);
  ad::Tape t;
  ad::Var xv = t.leaf(x);
  Mat sm = t.value(t.softmax_rows(xv));
  Mat lsm = t.value(t.log_softmax_rows(xv));
  for (Eigen::Index i = 0; i < 3; ++i) {
    Eigen::VectorXd e = (x.row(i).array() - x.row(i).maxCoeff()).exp();
    Eigen::VectorXd p = e / e.sum();
    for (Eigen::Index j = 0; j < 4; ++j) {
      require(std::abs(sm(i, j) - p(j)) < 1e-12, "row softmax mismatch");
      require(std::abs(lsm(i, j) - std::log(p(j))) < 1e-9, "row log-softmax mismatch");
    }
  }

  // Layer normalization with explicit gain and shift.
  Mat g = random_mat(1, 4, 12).array() + 2.0;
  Mat be = random_mat(1, 4, 13);
  Mat ln = t.value(t.layer_norm_rows(xv, t.leaf(g), t.leaf(be), 1e-5));
  for (Eigen::Index i = 0; i < 3; ++i) {
    double mean = x.row(i).mean();
    double var = (x.row(i).array() - mean).square().mean();
    for (Eigen::Index j = 0; j < 4; ++j) {
      double want = (x(i, j) - mean) / std::sqrt(var + 1e-5) * g(0, j) + be(0, j);
      require(std::abs(ln(i, j) - want) < 1e-9, "layer norm mismatch");
    }
  }

  // Grouped softmax over ragged groups of a score column.
  Mat scores = random_mat(6, 1, 14);
  std::vector<std::vector<Eigen::Index>> groups{{0, 2}, {1, 3, 4}};
  Mat gw = t.value(ad::grouped_softmax(t, t.leaf(scores), groups));
  for (const auto& grp : groups) {
    double mx = -1e300;
    for (auto r : grp) mx = std::max(mx, scores(r, 0));
    double z = 0.0;
    for (auto r : grp) z += std::exp(scores(r, 0) - mx);
    double sum = 0.0;
    for (auto r : grp) {
      double want = std::exp(scores(r, 0) - mx) / z;
      require(std::abs(gw(r, 0) - want) < 1e-12, "grouped softmax mismatch");
      sum += gw(r, 0);
    }
    require(std::abs(sum - 1.0) < 1e-12, "grouped softmax does not normalize");
  }

  // Learning-rate schedule: linear warmup, cosine tail, floor at the end.
  require(std::abs(nn::lr_at(0, 4, 100, 1.0, 0.01) - 0.25) < 1e-12, "warmup start");
  require(std::abs(nn::lr_at(3, 4, 100, 1.0, 0.01) - 1.0) < 1e-12, "warmup end");
  double mid = nn::lr_at(52, 4, 100, 1.0, 0.01);
  double want_mid = 0.01 + 0.5 * 0.99 * (1.0 + std::cos(0.5 * M_PI));
  require(std::abs(mid - want_mid) < 1e-12, "cosine midpoint");
  require(std::abs(nn::lr_at(100, 4, 100, 1.0, 0.01) - 0.01) < 1e-12, "cosine floor");

  // Left-to-right path length and id-set overlap.
  auto net = ring_net(6);
  std::vector<int> p{0, 1, 2};
  double want_len = net.segments[0].length + net.segments[1].length + net.segments[2].length;
  require(downstream::path_length(net, p) == want_len, "path length mismatch");
  require(downstream::iou({0, 1, 2}, {1, 2, 3}) == 0.5, "overlap mismatch");

  // The perception stack is deterministic: two tapes, identical tokens.
  World w;
  fill_world(w, 8, 4, 1, 0.0, 3, 5, 21);
  w.cfg.env.heads = 2;
  w.cfg.enc.heads = 2;
  nn::ParamStore store;
  model::register_model_params(store, w.cfg, w.net.size());
  model::init_model_params(store, 22);
  Mat tok_a, tok_b;
  {
    ad::Tape tt;
    nn::Binder b(tt, store);
    tok_a = tt.value(model::env_tokens(tt, b, w.cfg, w.in));
  }
  {
    ad::Tape tt;
    nn::Binder b(tt, store);
    tok_b = tt.value(model::env_tokens(tt, b, w.cfg, w.in));
  }
  require(tok_a.rows() == w.net.size() && tok_a.cols() == 4, "token shape");
  require((tok_a - tok_b).cwiseAbs().maxCoeff() == 0.0, "tokens not deterministic");
  return "spot formulas at width <= 4";
}

std::string check_gradients() {
  World w;
  fill_world(w, 8, 8, 1, 0.0, 4, 6, 401);
  nn::ParamStore store;
  model::register_model_params(store, w.cfg, w.net.size());
  model::init_model_params(store, 402);
  downstream::register_head_params(store, 8, 1, "head.tte");
  downstream::init_head_params(store, "head.tte", 403);
  // Bias rows start at zero; nudge everything so no path is silent.
  std::mt19937_64 prng(404);
  std::uniform_real_distribution<double> pu(-0.3, 0.3);
  for (auto& p : store.all())
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value(i) += 0.01 * pu(prng);

  const geo::Trajectory& t0 = w.trajs[0];
  const geo::Trajectory& t1 = w.trajs[1];
  std::vector<std::size_t> m0{1, 4}, m1{2}, m2{3}, m3{1};
  std::vector<Eigen::Index> rows{1, 4};
  std::vector<int> targets{t0.segs[1], t0.segs[4]};
  std::vector<double> weights{0.5, 0.5};

  // One scalar touching every family: masked prediction, the contrastive
  // head over four views, and a task head on the pooled state.
  auto forward = [&](ad::Tape& t, nn::Binder& b) {
    ad::Var toks = model::env_tokens(t, b, w.cfg, w.in);
    auto enc0 = model::encode_trajectory(t, b, w.cfg, w.in, toks, t0, &m0, nullptr);
    ad::Var logits =
        t.matmul(t.row_gather(enc0.steps, rows), t.transpose(b("pretrain.vocab_head")));
    ad::Var loss = pretrain::mlm_loss(t, logits, targets, weights);

    auto va = model::encode_trajectory(t, b, w.cfg, w.in, toks, t0, &m1, nullptr);
    auto vb = model::encode_trajectory(t, b, w.cfg, w.in, toks, t1, &m2, nullptr);
    auto vc = model::encode_trajectory(t, b, w.cfg, w.in, toks, t0, &m3, nullptr);
    auto vd = model::encode_trajectory(t, b, w.cfg, w.in, toks, t1, nullptr, nullptr);
    ad::Var z = t.concat_rows({va.traj, vb.traj, vc.traj, vd.traj});
    loss = t.add(loss, pretrain::ntxent_loss(t, z, 0.5));
    return t.add(loss, t.mean_all(downstream::head_forward(t, b, enc0.traj, "head.tte")));
  };

  std::vector<Mat*> inputs;
  std::vector<Mat> analytic;
  {
    ad::Tape t;
    nn::Binder b(t, store);
    for (auto& p : store.all()) b(p.name);  // bind first so every grad exists
    t.backward(forward(t, b));
    for (auto& p : store.all()) {
      inputs.push_back(&p.value);
      analytic.push_back(t.grad(b(p.name)));
    }
  }
  auto f = [&]() {
    ad::Tape t;
    nn::Binder b(t, store);
    return t.value(forward(t, b))(0, 0);
  };
  // h = 1e-6 keeps the central difference off the piecewise-linear kinks.
  auto res = prtraj::testing::grad_check(f, inputs, analytic, 1e-6, 24, 405);
  require(res.checked > 800, "too few probes: " + std::to_string(res.checked));
  require(res.max_rel_err < 1e-3,
          "gradient mismatch: max rel err " + fmt(res.max_rel_err));
  return std::to_string(inputs.size()) + " parameter groups, " +
         std::to_string(res.checked) + " probes, max rel err " + fmt(res.max_rel_err);
}

std::string check_loss_oracles() {
  // Weighted masked cross-entropy against the direct formula.
  Mat logits = random_mat(3, 5, 31);
  std::vector<int> targets{1, 4, 0};
  std::vector<double> weights{0.2, 0.3, 0.5};
  double want = 0.0;
  for (int i = 0; i < 3; ++i) {
    Eigen::VectorXd e = (logits.row(i).array() - logits.row(i).maxCoeff()).exp();
    want += weights[static_cast<std::size_t>(i)] *
            -std::log(e(targets[static_cast<std::size_t>(i)]) / e.sum());
  }
  ad::Tape t;
  double got = t.value(pretrain::mlm_loss(t, t.leaf(logits), targets, weights))(0, 0);
  require(std::abs(got - want) < 1e-12, "masked loss mismatch");

  // Contrastive loss against a literal per-anchor recomputation.
  Mat z = random_mat(6, 4, 32);
  const double tau = 0.3;
  Mat zn = z;
  for (Eigen::Index i = 0; i < zn.rows(); ++i) zn.row(i).normalize();
  Mat sim = zn * zn.transpose() / tau;
  const Eigen::Index big = 3;
  double manual = 0.0;
  for (Eigen::Index i = 0; i < 6; ++i) {
    Eigen::Index pos = (i + big) % 6;
    double denom = 0.0;
    for (Eigen::Index j = 0; j < 6; ++j)
      if (j != i) denom += std::exp(sim(i, j));
    manual += -std::log(std::exp(sim(i, pos)) / denom);
  }
  manual /= 6.0;
  double got_cl = t.value(pretrain::ntxent_loss(t, t.leaf(z), tau))(0, 0);
  require(std::abs(got_cl - manual) < 1e-9, "contrastive loss mismatch");

  // With a zero-initialized vocabulary head every segment scores alike, so
  // the first masked loss sits exactly at ln of the segment count.
  World w;
  fill_world(w, 8, 8, 1, 0.1, 4, 6, 33);
  nn::ParamStore store;
  model::register_model_params(store, w.cfg, w.net.size());
  model::init_model_params(store, 34);
  nn::AdamW opt{nn::AdamWConfig{}};
  pretrain::PretrainConfig pcfg;
  std::vector<const geo::Trajectory*> batch;
  for (const auto& tr : w.trajs) batch.push_back(&tr);
  std::mt19937_64 rng(35);
  auto losses = pretrain::pretrain_step(store, opt, w.cfg, w.in, batch, pcfg, 1e-3, rng);
  require(losses.mlm == std::log(8.0), "first masked loss is not ln of the vocabulary");
  require(losses.total == (losses.mlm + losses.cl) / 2.0, "objective mix is not the mean");
  return "masked CE, contrastive, and first-step values agree";
}

std::string check_statistics() {
  std::mt19937_64 rng(20260822);

  // Masking coverage is exactly 15% (floored) with mean span length near 3.
  geo::Trajectory line;
  for (int i = 0; i < 100; ++i) {
    line.segs.push_back(i % 50);
    line.ts.push_back(1704067200 + 60 * i);
  }
  double frac_sum = 0.0;
  std::size_t spans = 0, span_len = 0;
  for (int rep = 0; rep < 2000; ++rep) {
    auto plan = pretrain::span_mask(line, rng);
    frac_sum += static_cast<double>(plan.masked.size()) / 100.0;
    for (auto [s, l] : plan.spans) {
      (void)s;
      spans++;
      span_len += l;
    }
  }
  double frac = frac_sum / 2000.0;
  double mean_span = static_cast<double>(span_len) / static_cast<double>(spans);
  require(frac > 0.149 && frac < 0.151, "mask rate off band: " + fmt(frac));
  require(mean_span > 2.5 && mean_span < 3.5, "span length off band: " + fmt(mean_span));

  // Cropping drops 5-15% (mean 10%) off a fair-coin end.
  std::size_t dropped = 0, head_drops = 0;
  auto net = ring_net(10);
  auto walks = random_walks(net, 1, 50, 41);
  for (int rep = 0; rep < 4000; ++rep) {
    auto v = pretrain::crop_augment(walks[0], rng);
    dropped += 50 - v.segs.size();
    if (v.segs.front() != walks[0].segs.front()) head_drops++;
  }
  double drop_frac = static_cast<double>(dropped) / (4000.0 * 50.0);
  double head_frac = static_cast<double>(head_drops) / 4000.0;
  require(drop_frac > 0.08 && drop_frac < 0.12, "crop rate off band: " + fmt(drop_frac));
  require(head_frac > 0.45 && head_frac < 0.55, "crop side biased: " + fmt(head_frac));

  // Temporal perturbation rewrites about 15% of the gaps.
  auto avg = model::build_avg_times(random_walks(net, 20, 12, 42));
  auto long_walk = random_walks(net, 1, 40, 43)[0];
  std::size_t changed = 0, total = 0;
  for (int rep = 0; rep < 1500; ++rep) {
    auto v = pretrain::temporal_perturb(long_walk, rng, avg);
    for (std::size_t i = 1; i < v.ts.size(); ++i) {
      std::int64_t g0 = long_walk.ts[i] - long_walk.ts[i - 1];
      std::int64_t g1 = v.ts[i] - v.ts[i - 1];
      changed += g0 != g1;
      ++total;
    }
  }
  double jitter = static_cast<double>(changed) / static_cast<double>(total);
  require(jitter > 0.10 && jitter < 0.20, "gap rewrite rate off band: " + fmt(jitter));

  // Text embeddings: unit rows, near-orthogonal across distinct prompts.
  auto provider = poi::make_mock_provider(64);
  std::vector<Eigen::VectorXd> vecs;
  for (int i = 0; i < 40; ++i)
    vecs.push_back(provider->embed("prompt variant " + std::to_string(i)));
  double cos_sum = 0.0;
  int pairs = 0;
  for (int i = 0; i < 40; ++i) {
    require(std::abs(vecs[static_cast<std::size_t>(i)].norm() - 1.0) < 1e-9,
            "embedding row is not unit length");
    for (int j = i + 1; j < 40; ++j) {
      cos_sum += std::abs(vecs[static_cast<std::size_t>(i)]
                              .dot(vecs[static_cast<std::size_t>(j)]));
      ++pairs;
    }
  }
  double mean_cos = cos_sum / pairs;
  require(mean_cos < 0.2, "embeddings too correlated: " + fmt(mean_cos));
  return "mask " + fmt(frac) + ", crop " + fmt(drop_frac) + ", jitter " + fmt(jitter);
}

std::string check_protocols() {
  // Deviation path search equals exhaustive enumeration.
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    std::mt19937_64 rng(seed);
    const int n = 12;
    std::vector<double> lengths;
    std::vector<std::pair<int, int>> edges;
    for (int i = 0; i < n; ++i) {
      lengths.push_back(50.0 + static_cast<double>(rng() % 200));
      std::set<int> outs;
      std::size_t deg = 2 + rng() % 2;
      while (outs.size() < deg) {
        int cand = static_cast<int>(rng() % n);
        if (cand != i) outs.insert(cand);
      }
      for (int o : outs) edges.emplace_back(i, o);
    }
    auto net = build_net("proto" + std::to_string(seed), lengths, edges);
    for (int trial = 0; trial < 4; ++trial) {
      int src = static_cast<int>(rng() % n);
      int dst = static_cast<int>(rng() % n);
      for (std::size_t k : {1u, 4u, 50u}) {
        auto got = downstream::k_shortest_paths(net, src, dst, k);
        auto want = enumerate_k(net, src, dst, k);
        require(got.size() == want.size(), "path count mismatch");
        for (std::size_t i = 0; i < got.size(); ++i) {
          require(got[i].segs == want[i].segs, "path order mismatch");
          require(got[i].length == want[i].length, "path length mismatch");
        }
      }
    }
  }

  // The novelty filter equals a literal sequential reimplementation.
  auto net = ring_net(12);
  auto walks = random_walks(net, 25, 5, 51);
  auto avg = model::build_avg_times(walks);
  const double delta = 0.8;
  auto insts = downstream::build_pr_instances(walks, net, avg, 6, delta);
  std::size_t cursor = 0;
  for (const auto& tr : walks) {
    if (tr.segs.size() < 2) continue;
    require(cursor < insts.size(), "instance missing");
    const auto& inst = insts[cursor++];
    std::vector<std::vector<int>> kept;
    auto pool = downstream::k_shortest_paths(net, tr.segs.front(), tr.segs.back(), 6);
    for (const auto& p : pool) {
      if (p.segs.size() < 2) continue;
      bool ok = downstream::iou(p.segs, tr.segs) <= delta;
      for (const auto& q : kept) ok = ok && downstream::iou(p.segs, q) <= delta;
      if (ok) kept.push_back(p.segs);
    }
    require(inst.cands.size() == kept.size(), "kept-set size mismatch");
    for (std::size_t i = 0; i < kept.size(); ++i) {
      require(inst.cands[i].segs == kept[i], "kept path mismatch");
      require(inst.scores[i] == downstream::iou(kept[i], tr.segs), "score mismatch");
    }
  }
  require(cursor == insts.size(), "instance count mismatch");

  // Rank correlation equals the inversion count on every 5-permutation.
  std::vector<double> base{1, 2, 3, 4, 5};
  std::vector<int> perm{0, 1, 2, 3, 4};
  do {
    std::vector<double> a;
    for (int i : perm) a.push_back(base[static_cast<std::size_t>(i)]);
    std::size_t inv = 0;
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = i + 1; j < 5; ++j) inv += perm[i] > perm[j];
    double want = 1.0 - 4.0 * static_cast<double>(inv) / (5.0 * 4.0);
    require(std::abs(downstream::kendall_tau(a, base) - want) < 1e-12,
            "rank agreement mismatch");
  } while (std::next_permutation(perm.begin(), perm.end()));
  require(std::abs(downstream::spearman_rho({1, 2, 2, 3}, {1, 2, 3, 4}) - std::sqrt(0.9)) <
              1e-12,
          "tied-rank correlation mismatch");

  // Retrieval benchmark audit: detours are strictly longer same-endpoint
  // trips and the pairing survives a disk round trip.
  auto big = ring_net(20);
  auto pool = random_walks(big, 40, 6, 52);
  auto pavg = model::build_avg_times(pool);
  std::mt19937_64 brng(53);
  auto bench = downstream::build_str_benchmark(pool, big, pavg, 4, 8, brng);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& q = bench.queries[i];
    const auto& o = bench.originals[i];
    require(q.segs.front() == o.segs.front() && q.segs.back() == o.segs.back(),
            "detour endpoints drifted");
    require(downstream::path_length(big, q.segs) > downstream::path_length(big, o.segs),
            "detour is not longer");
    geo::validate_trajectory(q, big, i + 1);
  }
  const std::string dir = (work_dir() / "bench").string();
  util::ensure_dir(dir);
  downstream::save_str_benchmark(bench, dir + "/q.txt", dir + "/o.txt", dir + "/d.txt",
                                 dir + "/map.csv");
  auto back = downstream::load_str_benchmark(dir + "/q.txt", dir + "/o.txt", dir + "/d.txt",
                                             dir + "/map.csv", big);
  require(back.queries.size() == 4 && back.distractors.size() == 8, "round trip lost rows");
  return "path search, novelty filter, rank stats, retrieval audit";
}

std::string check_desk_run(Desk& desk) {
  build_desk(desk);
  const double ln_v = std::log(static_cast<double>(desk.net.size()));
  require(desk.net.size() == 224, "unexpected desk network size");

  nn::ParamStore store;
  model::register_model_params(store, desk.cfg, desk.net.size());
  model::init_model_params(store, kDeskSeed);
  const std::string log_path = (work_dir() / "desk_pretrain.csv").string();
  pretrain::run_pretrain(store, desk.cfg, desk.in, desk.train, desk_pretrain_config(log_path));

  const int spe = static_cast<int>((desk.train.size() + kDeskBatch - 1) / kDeskBatch);
  const double mlm = last_epoch_mlm(log_path, spe);
  require(mlm < 0.4 * ln_v,
          "masked loss " + fmt(mlm) + " not below 40% of ln|V| = " + fmt(0.4 * ln_v));

  auto metrics = desk_str_metrics(desk, desk.cfg, store);
  const double chance = 1.0 / 180.0;
  require(metrics.hr1 >= chance + 0.15,
          "retrieval HR@1 " + fmt(metrics.hr1) + " not 0.15 above chance " + fmt(chance));

  const double mae = desk_tte_mae(desk, desk.cfg, store, "pretrained");
  require(mae <= 0.8 * desk.base_mae,
          "travel-time MAE " + fmt(mae) + " not 20% under the mean predictor " +
              fmt(desk.base_mae));

  desk.pretrained = store;
  desk.ready = true;
  return "mlm " + fmt(mlm) + " vs " + fmt(0.4 * ln_v) + ", HR@1 " + fmt(metrics.hr1) +
         ", MAE " + fmt(mae) + " vs " + fmt(desk.base_mae);
}

std::string check_ablations(Desk& desk) {
  require(desk.ready, "desk run did not complete");

  // Route module off: the same protocol retrained from scratch.
  model::ModelConfig ab_cfg = desk.cfg;
  ab_cfg.use_route_choice = false;
  nn::ParamStore ab_store;
  model::register_model_params(ab_store, ab_cfg, desk.net.size());
  model::init_model_params(ab_store, kDeskSeed);
  const std::string log_path = (work_dir() / "desk_ablation.csv").string();
  pretrain::run_pretrain(ab_store, ab_cfg, desk.in, desk.train,
                         desk_pretrain_config(log_path));
  const int spe = static_cast<int>((desk.train.size() + kDeskBatch - 1) / kDeskBatch);
  const double ab_mlm = last_epoch_mlm(log_path, spe);
  const double ln_v = std::log(static_cast<double>(desk.net.size()));
  require(std::isfinite(ab_mlm) && ab_mlm < 0.9 * ln_v, "ablated run did not train");
  auto ab_str = desk_str_metrics(desk, ab_cfg, ab_store);
  require(ab_str.hr1 >= 0.0 && ab_str.hr1 <= 1.0 && std::isfinite(ab_str.mrr),
          "ablated retrieval metrics invalid");

  // No pretraining: the task head fine-tunes from random initialization.
  nn::ParamStore scratch;
  model::register_model_params(scratch, desk.cfg, desk.net.size());
  model::init_model_params(scratch, kDeskSeed + 1);
  const double scratch_mae = desk_tte_mae(desk, desk.cfg, scratch, "scratch");
  require(std::isfinite(scratch_mae) && scratch_mae > 0.0, "scratch fine-tune failed");

  return "route off: mlm " + fmt(ab_mlm) + ", HR@1 " + fmt(ab_str.hr1) +
         "; no pretraining: MAE " + fmt(scratch_mae);
}

std::string check_invariances() {
  // Padding: a zero-padded buffer with attention masking reproduces the
  // unpadded pass.
  {
    enc::EncoderConfig cfg;
    cfg.d = 8;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.dropout = 0.0;
    cfg.max_len = 12;
    nn::ParamStore store;
    enc::register_encoder_params(store, cfg);
    nn::init_params(store, 61);
    Mat x = random_mat(5, 8, 62);
    ad::Tape t;
    nn::Binder b(t, store);
    auto plain = enc::encode(t, b, cfg, t.leaf(x));
    Mat x_pad = Mat::Zero(9, 8);
    x_pad.topRows(5) = x;
    auto padded = enc::encode_padded(t, b, cfg, t.leaf(x_pad), 5);
    double diff = (t.value(plain.traj) - t.value(padded.traj)).cwiseAbs().maxCoeff();
    diff = std::max(diff,
                    (t.value(plain.steps) - t.value(padded.steps)).cwiseAbs().maxCoeff());
    require(diff <= 1e-5, "padding leaks into the encoding: " + fmt(diff));
  }

  // Transition scaling: likelihoods are ratios, so a uniform count rescale
  // changes neither the probabilities nor the route token.
  {
    World w;
    fill_world(w, 10, 8, 1, 0.0, 12, 6, 63);
    route::TransitionStats scaled;
    for (const auto& [k, v] : w.in.stats.counts) scaled.counts[k] = v * 10;
    for (int s = 0; s < w.net.size(); ++s) {
      auto p1 = route::transition_likelihood(w.in.stats, w.net, s);
      auto p10 = route::transition_likelihood(scaled, w.net, s);
      double sum = 0.0;
      for (const auto& [to, p] : p1) {
        sum += p;
        require(std::abs(p - p10.at(to)) <= 1e-9, "likelihood changed under rescale");
      }
      if (!p1.empty()) require(std::abs(sum - 1.0) <= 1e-9, "likelihood rows off unit");
    }
    nn::ParamStore store;
    model::register_model_params(store, w.cfg, w.net.size());
    model::init_model_params(store, 64);
    Mat toks = random_mat(10, 8, 65);
    Mat out1, out10;
    {
      ad::Tape t;
      nn::Binder b(t, store);
      out1 = t.value(route::route_forward(t, b, 8, w.net, w.in.stats, w.trajs[0],
                                          t.leaf(toks)));
    }
    {
      ad::Tape t;
      nn::Binder b(t, store);
      out10 = t.value(route::route_forward(t, b, 8, w.net, scaled, w.trajs[0],
                                           t.leaf(toks)));
    }
    require((out1 - out10).cwiseAbs().maxCoeff() <= 1e-9,
            "route token changed under count rescale");
  }

  // Attention rows normalize to one.
  {
    ad::Tape t;
    Mat rows = t.value(t.softmax_rows(t.leaf(random_mat(6, 6, 66))));
    for (Eigen::Index i = 0; i < rows.rows(); ++i)
      require(std::abs(rows.row(i).sum() - 1.0) <= 1e-6, "attention row off unit");
  }

  // Travel-time inputs carry the departure only: rewriting later timestamps
  // cannot move a prediction.
  {
    World w;
    fill_world(w, 8, 8, 1, 0.0, 6, 6, 67);
    nn::ParamStore store;
    model::register_model_params(store, w.cfg, w.net.size());
    model::init_model_params(store, 68);
    downstream::register_head_params(store, 8, 1, "head.tte");
    downstream::init_head_params(store, "head.tte", 69);
    auto base = downstream::predict_tte(store, w.cfg, w.in, w.trajs);
    auto shuffled = w.trajs;
    std::mt19937_64 rng(70);
    for (auto& tr : shuffled)
      for (std::size_t i = 1; i < tr.ts.size(); ++i)
        tr.ts[i] = tr.ts[0] + 1 + static_cast<std::int64_t>(rng() % 10000);
    auto moved = downstream::predict_tte(store, w.cfg, w.in, shuffled);
    for (std::size_t i = 0; i < base.size(); ++i)
      require(base[i] == moved[i], "non-departure timestamps leak into travel time");
  }

  // Augmented views stay valid walks with the departure preserved.
  {
    auto net = ring_net(9);
    auto walks = random_walks(net, 10, 12, 71);
    auto avg = model::build_avg_times(walks);
    std::mt19937_64 rng(72);
    for (int rep = 0; rep < 200; ++rep) {
      const auto& tr = walks[static_cast<std::size_t>(rep) % walks.size()];
      auto crop = pretrain::crop_augment(tr, rng);
      geo::validate_trajectory(crop, net, 1);
      auto warp = pretrain::temporal_perturb(tr, rng, avg);
      geo::validate_trajectory(warp, net, 1);
      require(warp.segs == tr.segs, "perturbation rewrote the route");
      require(warp.ts.front() == tr.ts.front(), "perturbation moved the departure");
    }
  }
  return "padding, rescaling, attention, leakage, augmentation";
}

}  // namespace

int main() {
  util::set_log_level(util::LogLevel::Warn);
  Desk desk;

  struct Criterion {
    const char* label;
    std::function<std::string()> run;
  };
  const std::vector<Criterion> criteria{
      {"closed-form spot checks", [] { return check_equations(); }},
      {"numeric gradient probe over every parameter group",
       [] { return check_gradients(); }},
      {"training-loss value oracles", [] { return check_loss_oracles(); }},
      {"seeded statistical bands", [] { return check_statistics(); }},
      {"evaluation-protocol oracles", [] { return check_protocols(); }},
      {"desk-scale training run", [&desk] { return check_desk_run(desk); }},
      {"ablation retrains", [&desk] { return check_ablations(desk); }},
      {"invariance suite", [] { return check_invariances(); }},
  };

  // Wall-clock ceilings, seconds; generous on shared hardware but tight
  // enough to catch a runaway.
  const std::vector<double> budget{10, 120, 30, 30, 30, 900, 900, 60};

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    auto start = std::chrono::steady_clock::now();
    std::string detail;
    bool ok = true;
    try {
      detail = criteria[i].run();
    } catch (const CheckFailure& e) {
      ok = false;
      detail = e.what;
    } catch (const std::exception& e) {
      ok = false;
      detail = std::string("unexpected error: ") + e.what();
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
                      .count();
    if (ok && secs > budget[i]) {
      ok = false;
      detail = "over time budget: " + fmt(secs) + "s > " + fmt(budget[i]) + "s";
    }
    std::printf("%zu/%zu %-52s %s (%s; %.1fs)\n", i + 1, criteria.size(),
                criteria[i].label, ok ? "pass" : "FAIL", detail.c_str(), secs);
    std::fflush(stdout);
    failures += !ok;
  }
  if (failures > 0) {
    std::printf("acceptance: %d of %zu criteria FAILED\n", failures, criteria.size());
    return 1;
  }
  std::printf("acceptance: all %zu criteria passed\n", criteria.size());
  return 0;
}
