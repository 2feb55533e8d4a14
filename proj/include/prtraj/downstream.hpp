// Downstream task protocols and metrics: k-shortest-path search, the
// similar-trajectory-retrieval and path-ranking benchmarks, task heads with
// fine-tuning loops, and the evaluation metrics they report.

#pragma once

#include "prtraj/model.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace prtraj::downstream {

// ---------------------------------------------------------------------------
// Shortest paths
// ---------------------------------------------------------------------------

struct Path {
  std::vector<int> segs;
  double length = 0.0;  // sum of member segment lengths
};

double path_length(const geo::RoadNetwork& net, const std::vector<int>& segs);

// Loopless paths by nondecreasing length (ties by lexicographic id
// sequence), found by deviation search.  Unreachable pairs yield an empty
// list.
std::vector<Path> k_shortest_paths(const geo::RoadNetwork& net, int origin, int destination,
                                   int k);

// ---------------------------------------------------------------------------
// Similar-trajectory retrieval
// ---------------------------------------------------------------------------

struct StrBenchmark {
  std::vector<geo::Trajectory> queries;      // detours; query i's answer is candidate i
  std::vector<geo::Trajectory> originals;    // candidate ids 0..n_q-1
  std::vector<geo::Trajectory> distractors;  // candidate ids n_q..n_q+n_neg-1
};

// Walks `segs` starting at `departure`, spending each segment's mean travel
// time (global fallback) before the next point.
geo::Trajectory synthesize_times(const std::vector<int>& segs, std::int64_t departure,
                                 const model::AvgTimes& avg);

// For each sampled query the detour is the first of its OD pair's shortest
// paths strictly longer than the original (the query is skipped when none
// exists within `k_cap`); distractors are drawn from the unused remainder.
StrBenchmark build_str_benchmark(const std::vector<geo::Trajectory>& test,
                                 const geo::RoadNetwork& net, const model::AvgTimes& avg,
                                 std::size_t n_q, std::size_t n_neg, std::mt19937_64& rng,
                                 int k_cap = 32);

void save_str_benchmark(const StrBenchmark& bench, const std::string& queries_path,
                        const std::string& originals_path,
                        const std::string& distractors_path, const std::string& mapping_path);
StrBenchmark load_str_benchmark(const std::string& queries_path,
                                const std::string& originals_path,
                                const std::string& distractors_path,
                                const std::string& mapping_path, const geo::RoadNetwork& net);

struct StrMetrics {
  double hr1 = 0.0;
  double hr5 = 0.0;
  double mrr = 0.0;
};

// Ranks candidates per query by cosine similarity descending (ties by
// candidate id ascending); the correct candidate for query i is row i.
StrMetrics str_evaluate(const Eigen::MatrixXd& queries, const Eigen::MatrixXd& candidates);

// ---------------------------------------------------------------------------
// Path ranking
// ---------------------------------------------------------------------------

struct PrInstance {
  geo::Trajectory real;                // target score 1.0
  std::vector<geo::Trajectory> cands;  // alternatives with synthesized timestamps
  std::vector<double> scores;          // overlap with the real segment set
};

// Intersection over union of the two id sets.
double iou(const std::vector<int>& a, const std::vector<int>& b);

// Scans each trajectory's top-k shortest paths in order, keeping a path only
// when its overlap with the real trajectory and with every previously kept
// path stays within `delta`.
std::vector<PrInstance> build_pr_instances(const std::vector<geo::Trajectory>& test,
                                           const geo::RoadNetwork& net,
                                           const model::AvgTimes& avg, int k = 10,
                                           double delta = 0.8);

// JSON-lines, one instance per line.
void save_pr_instances(const std::vector<PrInstance>& instances, const std::string& path);
std::vector<PrInstance> load_pr_instances(const std::string& path,
                                          const geo::RoadNetwork& net);

// ---------------------------------------------------------------------------
// Task heads and fine-tuning
// ---------------------------------------------------------------------------

// Two-layer head d -> 2d -> out under `prefix` (e.g. "head.tte").
void register_head_params(nn::ParamStore& store, int d, int out, const std::string& prefix);
void init_head_params(nn::ParamStore& store, const std::string& prefix, std::uint64_t seed);
ad::Var head_forward(ad::Tape& t, nn::Binder& b, ad::Var x, const std::string& prefix);

struct FinetuneConfig {
  int epochs = 50;
  int batch_size = 64;
  int warmup_epochs = 5;
  double lr_peak = 2e-4;
  double lr_min = 1e-6;
  double weight_decay = 0.01;
  std::uint64_t seed = 42;
  std::string log_path;  // optional CSV `step,loss,lr`
};

// Trajectory embeddings in evaluation mode (no dropout), one row per
// trajectory.
Eigen::MatrixXd embed_trajectories(nn::ParamStore& store, const model::ModelConfig& cfg,
                                   const model::ModelInputs& in,
                                   const std::vector<geo::Trajectory>& trajs);

// Road-lane prediction over segments with 1..4 lanes (class = lanes - 1).
struct RlpData {
  std::vector<Eigen::Index> segs;
  std::vector<int> labels;
};
RlpData rlp_dataset(const geo::RoadNetwork& net);
double finetune_rlp(nn::ParamStore& store, const model::ModelConfig& cfg,
                    const model::ModelInputs& in, const RlpData& train,
                    const FinetuneConfig& fcfg);
std::vector<int> predict_rlp(nn::ParamStore& store, const model::ModelConfig& cfg,
                             const model::ModelInputs& in,
                             const std::vector<Eigen::Index>& segs);

// Destination prediction from the first half of each trajectory.
geo::Trajectory tdp_prefix(const geo::Trajectory& traj);
double finetune_tdp(nn::ParamStore& store, const model::ModelConfig& cfg,
                    const model::ModelInputs& in, const std::vector<geo::Trajectory>& train,
                    const FinetuneConfig& fcfg);
// Per-trajectory segment scores (rows align with `trajs`).
Eigen::MatrixXd predict_tdp(nn::ParamStore& store, const model::ModelConfig& cfg,
                            const model::ModelInputs& in,
                            const std::vector<geo::Trajectory>& trajs);

// Travel-time estimation in minutes.  The model only ever sees the
// departure timestamp; per-point arrival times would encode the label.
double tte_label_minutes(const geo::Trajectory& traj);
geo::Trajectory departure_only(const geo::Trajectory& traj);
double finetune_tte(nn::ParamStore& store, const model::ModelConfig& cfg,
                    const model::ModelInputs& in, const std::vector<geo::Trajectory>& train,
                    const FinetuneConfig& fcfg);
std::vector<double> predict_tte(nn::ParamStore& store, const model::ModelConfig& cfg,
                                const model::ModelInputs& in,
                                const std::vector<geo::Trajectory>& trajs);

// Path ranking: regress each candidate's overlap score in [0, 1].
double finetune_pr(nn::ParamStore& store, const model::ModelConfig& cfg,
                   const model::ModelInputs& in, const std::vector<PrInstance>& train,
                   const FinetuneConfig& fcfg);
std::vector<double> predict_pr(nn::ParamStore& store, const model::ModelConfig& cfg,
                               const model::ModelInputs& in,
                               const std::vector<geo::Trajectory>& trajs);

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct F1Result {
  double macro = 0.0;
  double micro = 0.0;
};
// Macro averages per-class F1 over the classes present in `labels`.
F1Result metric_f1(const std::vector<int>& preds, const std::vector<int>& labels);

// Fraction of rows whose label ranks in the top k by score (ties broken by
// class id ascending).
double metric_acc_at_k(const Eigen::MatrixXd& scores, const std::vector<int>& labels, int k);

struct RegressionMetrics {
  double mae = 0.0;
  double rmse = 0.0;
  double mape = 0.0;  // fraction, not per cent
  std::size_t mape_skipped = 0;  // zero labels excluded from MAPE
};
RegressionMetrics metric_regression(const std::vector<double>& preds,
                                    const std::vector<double>& labels);

// Concordant-minus-discordant pairs over all n(n-1)/2 pairs; ties count as
// neither.
double kendall_tau(const std::vector<double>& pred, const std::vector<double>& truth);

// Tie-free inputs use the rank-difference closed form; ties fall back to
// Pearson correlation of mid-ranks.  Constant vectors are an error.
double spearman_rho(const std::vector<double>& pred, const std::vector<double>& truth);

}  // namespace prtraj::downstream
