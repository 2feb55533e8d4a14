#include "prtraj/downstream.hpp"

#include "prtraj/pretrain.hpp"
#include "prtraj/util.hpp"

#include "json.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <queue>
#include <set>
#include <sstream>

namespace prtraj::downstream {

using Mat = Eigen::MatrixXd;

// ---------------------------------------------------------------------------
// Shortest paths
// ---------------------------------------------------------------------------

double path_length(const geo::RoadNetwork& net, const std::vector<int>& segs) {
  double total = 0.0;
  for (int s : segs) total += net.segments[static_cast<std::size_t>(s)].length;
  return total;
}

namespace {

// Node-weighted Dijkstra (a path pays for every segment it visits,
// including both endpoints).  Ties on distance break by segment id.
Path dijkstra(const geo::RoadNetwork& net, int src, int dst,
              const std::vector<char>& banned_node,
              const std::set<std::pair<int, int>>& banned_edge) {
  const double inf = std::numeric_limits<double>::infinity();
  const int n = net.size();
  if (banned_node[static_cast<std::size_t>(src)]) return {};
  std::vector<double> dist(static_cast<std::size_t>(n), inf);
  std::vector<int> parent(static_cast<std::size_t>(n), -1);
  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<Item>> pq;
  dist[static_cast<std::size_t>(src)] = net.segments[static_cast<std::size_t>(src)].length;
  pq.emplace(dist[static_cast<std::size_t>(src)], src);
  while (!pq.empty()) {
    auto [du, u] = pq.top();
    pq.pop();
    if (du != dist[static_cast<std::size_t>(u)]) continue;
    if (u == dst) break;
    for (int v : net.out_neighbors[static_cast<std::size_t>(u)]) {
      if (banned_node[static_cast<std::size_t>(v)]) continue;
      if (banned_edge.count({u, v})) continue;
      double nd = du + net.segments[static_cast<std::size_t>(v)].length;
      if (nd < dist[static_cast<std::size_t>(v)]) {
        dist[static_cast<std::size_t>(v)] = nd;
        parent[static_cast<std::size_t>(v)] = u;
        pq.emplace(nd, v);
      }
    }
  }
  if (dist[static_cast<std::size_t>(dst)] == inf) return {};
  Path p;
  for (int cur = dst; cur != -1; cur = parent[static_cast<std::size_t>(cur)])
    p.segs.push_back(cur);
  std::reverse(p.segs.begin(), p.segs.end());
  p.length = path_length(net, p.segs);
  return p;
}

}  // namespace

std::vector<Path> k_shortest_paths(const geo::RoadNetwork& net, int origin, int destination,
                                   int k) {
  if (origin < 0 || origin >= net.size() || destination < 0 || destination >= net.size())
    throw util::InputError("k_shortest_paths: segment id out of range");
  if (k < 1) throw util::InputError("k_shortest_paths: k must be positive");

  const std::size_t n = static_cast<std::size_t>(net.size());
  std::vector<char> no_node(n, 0);
  std::set<std::pair<int, int>> no_edge;
  Path first = dijkstra(net, origin, destination, no_node, no_edge);
  if (first.segs.empty()) return {};

  std::vector<Path> found{first};
  std::set<std::vector<int>> in_found{first.segs};
  // Candidate pool ordered by (length, id sequence): the next pop is always
  // the deterministic next-best path.
  std::set<std::pair<double, std::vector<int>>> cands;

  while (found.size() < static_cast<std::size_t>(k)) {
    const Path last = found.back();
    for (std::size_t i = 0; i < last.segs.size(); ++i) {
      const int spur = last.segs[i];
      std::vector<int> root(last.segs.begin(),
                            last.segs.begin() + static_cast<std::ptrdiff_t>(i) + 1);
      std::vector<char> banned_node(n, 0);
      std::set<std::pair<int, int>> banned_edge;
      for (const Path& p : found) {
        if (p.segs.size() > i &&
            std::equal(root.begin(), root.end(), p.segs.begin())) {
          if (p.segs.size() > i + 1) banned_edge.insert({spur, p.segs[i + 1]});
        }
      }
      for (std::size_t j = 0; j < i; ++j) banned_node[static_cast<std::size_t>(root[j])] = 1;

      Path spur_path = dijkstra(net, spur, destination, banned_node, banned_edge);
      if (spur_path.segs.empty()) continue;
      std::vector<int> total(root.begin(), root.end() - 1);
      total.insert(total.end(), spur_path.segs.begin(), spur_path.segs.end());
      if (in_found.count(total)) continue;
      cands.insert({path_length(net, total), std::move(total)});
    }
    if (cands.empty()) break;
    auto it = cands.begin();
    found.push_back({it->second, it->first});
    in_found.insert(it->second);
    cands.erase(it);
  }

  // The head of the list came from Dijkstra, which does not promise the
  // lexicographically smallest path among equal lengths; one sort settles
  // the documented order.
  std::sort(found.begin(), found.end(), [](const Path& a, const Path& b) {
    if (a.length != b.length) return a.length < b.length;
    return a.segs < b.segs;
  });
  return found;
}

// ---------------------------------------------------------------------------
// Similar-trajectory retrieval
// ---------------------------------------------------------------------------

geo::Trajectory synthesize_times(const std::vector<int>& segs, std::int64_t departure,
                                 const model::AvgTimes& avg) {
  geo::Trajectory out;
  out.segs = segs;
  out.ts.resize(segs.size());
  std::int64_t t = departure;
  for (std::size_t i = 0; i < segs.size(); ++i) {
    out.ts[i] = t;
    t += std::max<std::int64_t>(0, std::llround(avg.lookup(segs[i])));
  }
  return out;
}

StrBenchmark build_str_benchmark(const std::vector<geo::Trajectory>& test,
                                 const geo::RoadNetwork& net, const model::AvgTimes& avg,
                                 std::size_t n_q, std::size_t n_neg, std::mt19937_64& rng,
                                 int k_cap) {
  if (n_q == 0) throw util::InputError("retrieval benchmark: need at least one query");
  std::vector<std::size_t> order(test.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  StrBenchmark bench;
  std::vector<char> used(test.size(), 0);
  for (std::size_t idx : order) {
    if (bench.queries.size() == n_q) break;
    const geo::Trajectory& orig = test[idx];
    if (orig.size() < 2) continue;
    const double orig_len = path_length(net, orig.segs);
    auto paths = k_shortest_paths(net, orig.segs.front(), orig.segs.back(), k_cap);
    const Path* detour = nullptr;
    for (const Path& p : paths) {
      if (p.length > orig_len && p.segs.size() >= 2) {
        detour = &p;
        break;
      }
    }
    if (detour == nullptr) continue;  // no strictly longer alternative within the cap
    bench.queries.push_back(synthesize_times(detour->segs, orig.ts.front(), avg));
    bench.originals.push_back(orig);
    used[idx] = 1;
  }
  if (bench.queries.size() < n_q) {
    throw util::InputError("retrieval benchmark: only " +
                           std::to_string(bench.queries.size()) + " of " +
                           std::to_string(n_q) + " queries have a longer alternative");
  }
  for (std::size_t idx : order) {
    if (bench.distractors.size() == n_neg) break;
    if (!used[idx]) bench.distractors.push_back(test[idx]);
  }
  if (bench.distractors.size() < n_neg) {
    throw util::InputError("retrieval benchmark: only " +
                           std::to_string(bench.distractors.size()) + " of " +
                           std::to_string(n_neg) + " distractors available");
  }
  return bench;
}

void save_str_benchmark(const StrBenchmark& bench, const std::string& queries_path,
                        const std::string& originals_path,
                        const std::string& distractors_path, const std::string& mapping_path) {
  geo::save_trajectories(bench.queries, queries_path);
  geo::save_trajectories(bench.originals, originals_path);
  geo::save_trajectories(bench.distractors, distractors_path);
  std::ostringstream map;
  map << "query_id,candidate_id\n";
  for (std::size_t i = 0; i < bench.queries.size(); ++i) map << i << ',' << i << '\n';
  util::write_file(mapping_path, map.str());
}

StrBenchmark load_str_benchmark(const std::string& queries_path,
                                const std::string& originals_path,
                                const std::string& distractors_path,
                                const std::string& mapping_path, const geo::RoadNetwork& net) {
  StrBenchmark bench;
  bench.queries = geo::load_trajectories(queries_path, net, 0);
  bench.originals = geo::load_trajectories(originals_path, net, 0);
  bench.distractors = geo::load_trajectories(distractors_path, net, 0);
  if (bench.queries.size() != bench.originals.size())
    throw util::InputError("retrieval benchmark: query/original counts differ");
  auto lines = util::read_lines(mapping_path);
  if (lines.empty() || lines[0] != "query_id,candidate_id")
    throw util::InputError("retrieval benchmark: bad mapping header");
  std::size_t rows = 0;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    auto parts = util::split(lines[i], ',');
    if (parts.size() != 2 || parts[0] != parts[1] ||
        parts[0] != std::to_string(rows))
      throw util::InputError("retrieval benchmark: mapping must pair query i with candidate i");
    ++rows;
  }
  if (rows != bench.queries.size())
    throw util::InputError("retrieval benchmark: mapping row count differs from queries");
  return bench;
}

StrMetrics str_evaluate(const Eigen::MatrixXd& queries, const Eigen::MatrixXd& candidates) {
  if (queries.cols() != candidates.cols())
    throw util::InputError("retrieval evaluation: embedding widths differ");
  if (queries.rows() == 0 || candidates.rows() < queries.rows())
    throw util::InputError("retrieval evaluation: need one candidate per query");

  Mat cn = candidates;
  for (Eigen::Index i = 0; i < cn.rows(); ++i) {
    double norm = cn.row(i).norm();
    if (norm > 0) cn.row(i) /= norm;
  }
  StrMetrics m;
  for (Eigen::Index i = 0; i < queries.rows(); ++i) {
    Eigen::VectorXd q = queries.row(i).transpose();
    double qn = q.norm();
    if (qn > 0) q /= qn;
    Eigen::VectorXd sims = cn * q;
    const double own = sims(i);
    Eigen::Index rank = 1;
    for (Eigen::Index j = 0; j < sims.size(); ++j) {
      if (j == i) continue;
      if (sims(j) > own || (sims(j) == own && j < i)) ++rank;
    }
    if (rank == 1) m.hr1 += 1.0;
    if (rank <= 5) m.hr5 += 1.0;
    m.mrr += 1.0 / static_cast<double>(rank);
  }
  const double nq = static_cast<double>(queries.rows());
  m.hr1 /= nq;
  m.hr5 /= nq;
  m.mrr /= nq;
  return m;
}

// ---------------------------------------------------------------------------
// Path ranking
// ---------------------------------------------------------------------------

double iou(const std::vector<int>& a, const std::vector<int>& b) {
  std::set<int> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::size_t inter = 0;
  for (int x : sa) inter += sb.count(x);
  const std::size_t uni = sa.size() + sb.size() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<PrInstance> build_pr_instances(const std::vector<geo::Trajectory>& test,
                                           const geo::RoadNetwork& net,
                                           const model::AvgTimes& avg, int k, double delta) {
  std::vector<PrInstance> out;
  for (const geo::Trajectory& real : test) {
    if (real.size() < 2) continue;
    PrInstance inst;
    inst.real = real;
    auto paths = k_shortest_paths(net, real.segs.front(), real.segs.back(), k);
    std::vector<std::vector<int>> kept;
    for (const Path& p : paths) {
      if (p.segs.size() < 2) continue;
      const double with_real = iou(p.segs, real.segs);
      if (with_real > delta) continue;
      bool clashes = false;
      for (const auto& q : kept) {
        if (iou(p.segs, q) > delta) {
          clashes = true;
          break;
        }
      }
      if (clashes) continue;
      kept.push_back(p.segs);
      inst.cands.push_back(synthesize_times(p.segs, real.ts.front(), avg));
      inst.scores.push_back(with_real);
    }
    out.push_back(std::move(inst));
  }
  return out;
}

void save_pr_instances(const std::vector<PrInstance>& instances, const std::string& path) {
  std::ostringstream out;
  for (const PrInstance& inst : instances) {
    nlohmann::json j;
    j["real"] = {{"segs", inst.real.segs}, {"ts", inst.real.ts}};
    j["cands"] = nlohmann::json::array();
    for (std::size_t i = 0; i < inst.cands.size(); ++i) {
      j["cands"].push_back({{"segs", inst.cands[i].segs},
                            {"ts", inst.cands[i].ts},
                            {"score", inst.scores[i]}});
    }
    out << j.dump() << '\n';
  }
  util::write_file(path, out.str());
}

std::vector<PrInstance> load_pr_instances(const std::string& path,
                                          const geo::RoadNetwork& net) {
  std::vector<PrInstance> out;
  auto lines = util::read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const std::string at = "ranking instance line " + std::to_string(i + 1);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(lines[i]);
    } catch (const nlohmann::json::exception& e) {
      throw util::InputError(at + ": " + e.what());
    }
    try {
      PrInstance inst;
      inst.real.segs = j.at("real").at("segs").get<std::vector<int>>();
      inst.real.ts = j.at("real").at("ts").get<std::vector<std::int64_t>>();
      geo::validate_trajectory(inst.real, net, i + 1);
      for (const auto& c : j.at("cands")) {
        geo::Trajectory cand;
        cand.segs = c.at("segs").get<std::vector<int>>();
        cand.ts = c.at("ts").get<std::vector<std::int64_t>>();
        geo::validate_trajectory(cand, net, i + 1);
        const double score = c.at("score").get<double>();
        if (!(score >= 0.0 && score <= 1.0))
          throw util::InputError(at + ": score outside [0, 1]");
        inst.cands.push_back(std::move(cand));
        inst.scores.push_back(score);
      }
      out.push_back(std::move(inst));
    } catch (const nlohmann::json::exception& e) {
      throw util::InputError(at + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Task heads and fine-tuning
// ---------------------------------------------------------------------------

void register_head_params(nn::ParamStore& store, int d, int out, const std::string& prefix) {
  store.create(prefix + ".W1", 2 * d, d);
  store.create(prefix + ".b1", 1, 2 * d);
  store.create(prefix + ".W2", out, 2 * d);
  store.create(prefix + ".b2", 1, out);
}

void init_head_params(nn::ParamStore& store, const std::string& prefix, std::uint64_t seed) {
  for (const char* suffix : {".W1", ".b1", ".W2", ".b2"}) {
    nn::Param& p = store.get(prefix + suffix);
    // Biases by name, not shape: a scalar head's W2 is also a single row
    // but still wants a random start.
    if (suffix[1] == 'b') {
      p.value.setZero();
      continue;
    }
    std::mt19937_64 rng(util::derive_seed(seed, p.name));
    const double bound = 1.0 / std::sqrt(static_cast<double>(p.value.cols()));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index i = 0; i < p.value.rows(); ++i)
      for (Eigen::Index j = 0; j < p.value.cols(); ++j) p.value(i, j) = u(rng);
  }
}

ad::Var head_forward(ad::Tape& t, nn::Binder& b, ad::Var x, const std::string& prefix) {
  ad::Var hidden = t.relu(t.affine(x, b(prefix + ".W1"), b(prefix + ".b1")));
  return t.affine(hidden, b(prefix + ".W2"), b(prefix + ".b2"));
}

namespace {

// Ensures the head exists exactly once; a head surviving from an earlier
// fine-tune run keeps its weights.
void ensure_head(nn::ParamStore& store, int d, int out, const std::string& prefix,
                 std::uint64_t seed) {
  if (!store.has(prefix + ".W1")) {
    register_head_params(store, d, out, prefix);
    init_head_params(store, prefix, seed);
  }
}

using StepFn = std::function<double(const std::vector<std::size_t>&, double, std::mt19937_64&)>;

// Shared mini-batch engine: epoch shuffling, warmup + cosine learning rate,
// CSV logging, divergence check.  `step_fn` owns the forward/backward pass.
double run_finetune_loop(std::size_t n_examples, const FinetuneConfig& cfg,
                         const StepFn& step_fn) {
  if (n_examples == 0) throw util::InputError("fine-tuning needs a nonempty training set");
  if (cfg.epochs < 1 || cfg.batch_size < 1)
    throw util::InputError("fine-tuning: epochs and batch_size must be positive");

  const std::int64_t n = static_cast<std::int64_t>(n_examples);
  const std::int64_t spe = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total_steps = spe * cfg.epochs;
  const std::int64_t warmup_steps = spe * cfg.warmup_epochs;

  std::ofstream log;
  if (!cfg.log_path.empty()) {
    log.open(cfg.log_path);
    if (!log) throw util::InputError("fine-tuning: cannot write log " + cfg.log_path);
    log << "step,loss,lr\n";
  }

  double last = 0.0;
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(n_examples);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(
        util::derive_seed(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    for (std::int64_t i = 0; i < spe; ++i) {
      const std::int64_t step = epoch * spe + i;
      std::vector<std::size_t> batch(
          order.begin() + static_cast<std::ptrdiff_t>(i * cfg.batch_size),
          order.begin() +
              static_cast<std::ptrdiff_t>(std::min(n, (i + 1) * cfg.batch_size)));
      std::mt19937_64 rng(
          util::derive_seed(cfg.seed, "finetune", static_cast<std::uint64_t>(step)));
      const double lr = nn::lr_at(step, warmup_steps, total_steps, cfg.lr_peak, cfg.lr_min);
      last = step_fn(batch, lr, rng);
      if (!std::isfinite(last)) {
        throw util::RuntimeError("fine-tuning diverged: non-finite loss at step " +
                                 std::to_string(step));
      }
      if (log.is_open()) {
        std::ostringstream line;
        line.precision(12);
        line << step << ',' << last << ',' << lr;
        log << line.str() << '\n';
      }
    }
  }
  return last;
}

nn::AdamW make_optimizer(const FinetuneConfig& cfg) {
  nn::AdamWConfig ocfg;
  ocfg.lr = cfg.lr_peak;
  ocfg.weight_decay = cfg.weight_decay;
  return nn::AdamW(ocfg);
}

void apply_step(nn::ParamStore& store, nn::AdamW& opt, ad::Tape& t, nn::Binder& b,
                ad::Var loss, double lr) {
  t.backward(loss);
  std::map<std::size_t, Mat> grads;
  b.collect_grads(grads);
  opt.step(store, grads, lr);
}

}  // namespace

Eigen::MatrixXd embed_trajectories(nn::ParamStore& store, const model::ModelConfig& cfg,
                                   const model::ModelInputs& in,
                                   const std::vector<geo::Trajectory>& trajs) {
  Mat out(static_cast<Eigen::Index>(trajs.size()), cfg.d());
  const std::size_t chunk = 32;
  for (std::size_t base = 0; base < trajs.size(); base += chunk) {
    ad::Tape t;
    nn::Binder b(t, store);
    ad::Var toks = model::env_tokens(t, b, cfg, in);
    for (std::size_t i = base; i < std::min(trajs.size(), base + chunk); ++i) {
      auto enc = model::encode_trajectory(t, b, cfg, in, toks, trajs[i]);
      out.row(static_cast<Eigen::Index>(i)) = t.value(enc.traj).row(0);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Road-lane prediction
// ---------------------------------------------------------------------------

RlpData rlp_dataset(const geo::RoadNetwork& net) {
  RlpData data;
  for (int i = 0; i < net.size(); ++i) {
    const int lanes = net.segments[static_cast<std::size_t>(i)].lanes;
    if (lanes < 1 || lanes > 4) continue;  // unlabeled or out-of-scope segments
    data.segs.push_back(i);
    data.labels.push_back(lanes - 1);
  }
  return data;
}

double finetune_rlp(nn::ParamStore& store, const model::ModelConfig& cfg,
                    const model::ModelInputs& in, const RlpData& train,
                    const FinetuneConfig& fcfg) {
  if (train.segs.size() != train.labels.size())
    throw util::InputError("lane prediction: segment/label counts differ");
  ensure_head(store, cfg.d(), 4, "head.rlp", fcfg.seed);
  nn::AdamW opt = make_optimizer(fcfg);

  auto step = [&](const std::vector<std::size_t>& batch, double lr, std::mt19937_64&) {
    ad::Tape t;
    nn::Binder b(t, store);
    ad::Var toks = model::env_tokens(t, b, cfg, in);
    std::vector<Eigen::Index> rows;
    std::vector<int> targets;
    std::vector<double> weights;
    const double w = 1.0 / static_cast<double>(batch.size());
    for (std::size_t bi : batch) {
      rows.push_back(train.segs[bi]);
      targets.push_back(train.labels[bi]);
      weights.push_back(w);
    }
    ad::Var logits = head_forward(t, b, t.row_gather(toks, rows), "head.rlp");
    ad::Var loss = pretrain::mlm_loss(t, logits, targets, weights);
    const double v = t.value(loss)(0, 0);
    apply_step(store, opt, t, b, loss, lr);
    return v;
  };
  return run_finetune_loop(train.segs.size(), fcfg, step);
}

std::vector<int> predict_rlp(nn::ParamStore& store, const model::ModelConfig& cfg,
                             const model::ModelInputs& in,
                             const std::vector<Eigen::Index>& segs) {
  ad::Tape t;
  nn::Binder b(t, store);
  ad::Var toks = model::env_tokens(t, b, cfg, in);
  ad::Var logits = head_forward(t, b, t.row_gather(toks, segs), "head.rlp");
  const Mat& v = t.value(logits);
  std::vector<int> out(segs.size());
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    int best = 0;
    for (Eigen::Index c = 1; c < v.cols(); ++c)
      if (v(i, c) > v(i, best)) best = static_cast<int>(c);
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Destination prediction
// ---------------------------------------------------------------------------

geo::Trajectory tdp_prefix(const geo::Trajectory& traj) {
  const std::size_t keep = (traj.size() + 1) / 2;  // first half, rounded up
  geo::Trajectory out;
  out.segs.assign(traj.segs.begin(), traj.segs.begin() + static_cast<std::ptrdiff_t>(keep));
  out.ts.assign(traj.ts.begin(), traj.ts.begin() + static_cast<std::ptrdiff_t>(keep));
  return out;
}

double finetune_tdp(nn::ParamStore& store, const model::ModelConfig& cfg,
                    const model::ModelInputs& in, const std::vector<geo::Trajectory>& train,
                    const FinetuneConfig& fcfg) {
  for (const auto& tr : train) {
    if (tr.size() < 2)
      throw util::InputError("destination prediction: trajectories need at least 2 points");
  }
  ensure_head(store, cfg.d(), in.net->size(), "head.tdp", fcfg.seed);
  nn::AdamW opt = make_optimizer(fcfg);

  auto step = [&](const std::vector<std::size_t>& batch, double lr, std::mt19937_64& rng) {
    ad::Tape t;
    nn::Binder b(t, store);
    ad::Var toks = model::env_tokens(t, b, cfg, in);
    std::vector<ad::Var> zs;
    std::vector<int> targets;
    std::vector<double> weights;
    const double w = 1.0 / static_cast<double>(batch.size());
    for (std::size_t bi : batch) {
      auto enc =
          model::encode_trajectory(t, b, cfg, in, toks, tdp_prefix(train[bi]), nullptr, &rng);
      zs.push_back(enc.traj);
      targets.push_back(train[bi].segs.back());
      weights.push_back(w);
    }
    ad::Var logits = head_forward(t, b, t.concat_rows(zs), "head.tdp");
    ad::Var loss = pretrain::mlm_loss(t, logits, targets, weights);
    const double v = t.value(loss)(0, 0);
    apply_step(store, opt, t, b, loss, lr);
    return v;
  };
  return run_finetune_loop(train.size(), fcfg, step);
}

Eigen::MatrixXd predict_tdp(nn::ParamStore& store, const model::ModelConfig& cfg,
                            const model::ModelInputs& in,
                            const std::vector<geo::Trajectory>& trajs) {
  std::vector<geo::Trajectory> prefixes;
  prefixes.reserve(trajs.size());
  for (const auto& tr : trajs) prefixes.push_back(tdp_prefix(tr));
  Mat z = embed_trajectories(store, cfg, in, prefixes);
  ad::Tape t;
  nn::Binder b(t, store);
  return t.value(head_forward(t, b, t.constant(z), "head.tdp"));
}

// ---------------------------------------------------------------------------
// Travel-time estimation
// ---------------------------------------------------------------------------

double tte_label_minutes(const geo::Trajectory& traj) {
  if (traj.size() < 2)
    throw util::InputError("travel-time label: trajectory needs at least 2 points");
  return static_cast<double>(traj.ts.back() - traj.ts.front()) / 60.0;
}

geo::Trajectory departure_only(const geo::Trajectory& traj) {
  geo::Trajectory out = traj;
  if (!out.ts.empty()) std::fill(out.ts.begin(), out.ts.end(), out.ts.front());
  return out;
}

double finetune_tte(nn::ParamStore& store, const model::ModelConfig& cfg,
                    const model::ModelInputs& in, const std::vector<geo::Trajectory>& train,
                    const FinetuneConfig& fcfg) {
  ensure_head(store, cfg.d(), 1, "head.tte", fcfg.seed);
  nn::AdamW opt = make_optimizer(fcfg);

  auto step = [&](const std::vector<std::size_t>& batch, double lr, std::mt19937_64& rng) {
    ad::Tape t;
    nn::Binder b(t, store);
    ad::Var toks = model::env_tokens(t, b, cfg, in);
    std::vector<ad::Var> zs;
    Mat labels(static_cast<Eigen::Index>(batch.size()), 1);
    for (std::size_t j = 0; j < batch.size(); ++j) {
      const geo::Trajectory& tr = train[batch[j]];
      labels(static_cast<Eigen::Index>(j), 0) = tte_label_minutes(tr);
      auto enc =
          model::encode_trajectory(t, b, cfg, in, toks, departure_only(tr), nullptr, &rng);
      zs.push_back(enc.traj);
    }
    ad::Var pred = head_forward(t, b, t.concat_rows(zs), "head.tte");
    ad::Var diff = t.sub(pred, t.constant(labels));
    ad::Var loss = t.mean_all(t.cmul(diff, diff));
    const double v = t.value(loss)(0, 0);
    apply_step(store, opt, t, b, loss, lr);
    return v;
  };
  return run_finetune_loop(train.size(), fcfg, step);
}

std::vector<double> predict_tte(nn::ParamStore& store, const model::ModelConfig& cfg,
                                const model::ModelInputs& in,
                                const std::vector<geo::Trajectory>& trajs) {
  std::vector<geo::Trajectory> stripped;
  stripped.reserve(trajs.size());
  for (const auto& tr : trajs) stripped.push_back(departure_only(tr));
  Mat z = embed_trajectories(store, cfg, in, stripped);
  ad::Tape t;
  nn::Binder b(t, store);
  const Mat& pred = t.value(head_forward(t, b, t.constant(z), "head.tte"));
  std::vector<double> out(trajs.size());
  for (Eigen::Index i = 0; i < pred.rows(); ++i) out[static_cast<std::size_t>(i)] = pred(i, 0);
  return out;
}

// ---------------------------------------------------------------------------
// Path ranking
// ---------------------------------------------------------------------------

double finetune_pr(nn::ParamStore& store, const model::ModelConfig& cfg,
                   const model::ModelInputs& in, const std::vector<PrInstance>& train,
                   const FinetuneConfig& fcfg) {
  std::vector<const geo::Trajectory*> examples;
  std::vector<double> targets;
  for (const PrInstance& inst : train) {
    examples.push_back(&inst.real);
    targets.push_back(1.0);
    for (std::size_t i = 0; i < inst.cands.size(); ++i) {
      examples.push_back(&inst.cands[i]);
      targets.push_back(inst.scores[i]);
    }
  }
  ensure_head(store, cfg.d(), 1, "head.pr", fcfg.seed);
  nn::AdamW opt = make_optimizer(fcfg);

  auto step = [&](const std::vector<std::size_t>& batch, double lr, std::mt19937_64& rng) {
    ad::Tape t;
    nn::Binder b(t, store);
    ad::Var toks = model::env_tokens(t, b, cfg, in);
    std::vector<ad::Var> zs;
    Mat labels(static_cast<Eigen::Index>(batch.size()), 1);
    for (std::size_t j = 0; j < batch.size(); ++j) {
      labels(static_cast<Eigen::Index>(j), 0) = targets[batch[j]];
      auto enc =
          model::encode_trajectory(t, b, cfg, in, toks, *examples[batch[j]], nullptr, &rng);
      zs.push_back(enc.traj);
    }
    ad::Var pred = t.sigmoid(head_forward(t, b, t.concat_rows(zs), "head.pr"));
    ad::Var diff = t.sub(pred, t.constant(labels));
    ad::Var loss = t.mean_all(t.cmul(diff, diff));
    const double v = t.value(loss)(0, 0);
    apply_step(store, opt, t, b, loss, lr);
    return v;
  };
  return run_finetune_loop(examples.size(), fcfg, step);
}

std::vector<double> predict_pr(nn::ParamStore& store, const model::ModelConfig& cfg,
                               const model::ModelInputs& in,
                               const std::vector<geo::Trajectory>& trajs) {
  Mat z = embed_trajectories(store, cfg, in, trajs);
  ad::Tape t;
  nn::Binder b(t, store);
  const Mat& pred = t.value(t.sigmoid(head_forward(t, b, t.constant(z), "head.pr")));
  std::vector<double> out(trajs.size());
  for (Eigen::Index i = 0; i < pred.rows(); ++i) out[static_cast<std::size_t>(i)] = pred(i, 0);
  return out;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

F1Result metric_f1(const std::vector<int>& preds, const std::vector<int>& labels) {
  if (preds.empty() || preds.size() != labels.size())
    throw util::InputError("F1: need aligned, nonempty predictions and labels");
  std::map<int, std::array<std::size_t, 3>> conf;  // class -> {tp, fp, fn}
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] == labels[i]) {
      ++conf[labels[i]][0];
    } else {
      ++conf[preds[i]][1];
      ++conf[labels[i]][2];
    }
  }
  std::set<int> present(labels.begin(), labels.end());
  double macro = 0.0;
  std::size_t tp_total = 0, fp_total = 0, fn_total = 0;
  for (const auto& [cls, c] : conf) {
    tp_total += c[0];
    fp_total += c[1];
    fn_total += c[2];
  }
  for (int cls : present) {
    const auto& c = conf[cls];
    const double p = c[0] + c[1] > 0 ? static_cast<double>(c[0]) / (c[0] + c[1]) : 0.0;
    const double r = c[0] + c[2] > 0 ? static_cast<double>(c[0]) / (c[0] + c[2]) : 0.0;
    macro += p + r > 0 ? 2.0 * p * r / (p + r) : 0.0;
  }
  F1Result res;
  res.macro = macro / static_cast<double>(present.size());
  const double denom = static_cast<double>(2 * tp_total + fp_total + fn_total);
  res.micro = denom > 0 ? 2.0 * static_cast<double>(tp_total) / denom : 0.0;
  return res;
}

double metric_acc_at_k(const Eigen::MatrixXd& scores, const std::vector<int>& labels, int k) {
  if (scores.rows() == 0 || static_cast<std::size_t>(scores.rows()) != labels.size())
    throw util::InputError("Acc@k: need aligned, nonempty scores and labels");
  if (k < 1) throw util::InputError("Acc@k: k must be positive");
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    const int label = labels[static_cast<std::size_t>(i)];
    if (label < 0 || label >= scores.cols())
      throw util::InputError("Acc@k: label outside score columns");
    const double own = scores(i, label);
    Eigen::Index rank = 1;
    for (Eigen::Index c = 0; c < scores.cols(); ++c) {
      if (c == label) continue;
      if (scores(i, c) > own || (scores(i, c) == own && c < label)) ++rank;
    }
    if (rank <= k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(scores.rows());
}

RegressionMetrics metric_regression(const std::vector<double>& preds,
                                    const std::vector<double>& labels) {
  if (preds.empty() || preds.size() != labels.size())
    throw util::InputError("regression metrics: need aligned, nonempty inputs");
  RegressionMetrics m;
  double sq = 0.0, ape = 0.0;
  std::size_t ape_n = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double d = preds[i] - labels[i];
    m.mae += std::abs(d);
    sq += d * d;
    if (labels[i] != 0.0) {
      ape += std::abs(d / labels[i]);
      ++ape_n;
    } else {
      ++m.mape_skipped;
    }
  }
  const double n = static_cast<double>(preds.size());
  m.mae /= n;
  m.rmse = std::sqrt(sq / n);
  m.mape = ape_n > 0 ? ape / static_cast<double>(ape_n) : 0.0;
  return m;
}

double kendall_tau(const std::vector<double>& pred, const std::vector<double>& truth) {
  const std::size_t n = pred.size();
  if (n != truth.size() || n < 2)
    throw util::InputError("rank correlation: need two aligned vectors of length >= 2");
  std::int64_t concordant = 0, discordant = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double a = pred[i] - pred[j];
      const double b = truth[i] - truth[j];
      if (a == 0.0 || b == 0.0) continue;  // ties count as neither
      if ((a > 0) == (b > 0)) {
        ++concordant;
      } else {
        ++discordant;
      }
    }
  }
  const double pairs = 0.5 * static_cast<double>(n) * static_cast<double>(n - 1);
  return static_cast<double>(concordant - discordant) / pairs;
}

namespace {

// 1-based mid-ranks: tied values share the mean of their positions.
std::vector<double> midranks(const std::vector<double>& v, bool* has_ties) {
  const std::size_t n = v.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  *has_ties = false;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && v[idx[j]] == v[idx[i]]) ++j;
    if (j - i > 1) *has_ties = true;
    const double rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t p = i; p < j; ++p) ranks[idx[p]] = rank;
    i = j;
  }
  return ranks;
}

}  // namespace

double spearman_rho(const std::vector<double>& pred, const std::vector<double>& truth) {
  const std::size_t n = pred.size();
  if (n != truth.size() || n < 2)
    throw util::InputError("rank correlation: need two aligned vectors of length >= 2");
  bool ties_p = false, ties_t = false;
  std::vector<double> rp = midranks(pred, &ties_p);
  std::vector<double> rt = midranks(truth, &ties_t);
  const bool const_p = std::equal(pred.begin() + 1, pred.end(), pred.begin());
  const bool const_t = std::equal(truth.begin() + 1, truth.end(), truth.begin());
  if (const_p || const_t)
    throw util::InputError("rank correlation: undefined correlation for a constant vector");

  if (!ties_p && !ties_t) {
    double d2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = rp[i] - rt[i];
      d2 += d * d;
    }
    const double nn = static_cast<double>(n);
    return 1.0 - 6.0 * d2 / (nn * (nn * nn - 1.0));
  }

  double mp = 0.0, mt = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mp += rp[i];
    mt += rt[i];
  }
  mp /= static_cast<double>(n);
  mt /= static_cast<double>(n);
  double cov = 0.0, vp = 0.0, vt = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    cov += (rp[i] - mp) * (rt[i] - mt);
    vp += (rp[i] - mp) * (rp[i] - mp);
    vt += (rt[i] - mt) * (rt[i] - mt);
  }
  return cov / std::sqrt(vp * vt);
}

}  // namespace prtraj::downstream
