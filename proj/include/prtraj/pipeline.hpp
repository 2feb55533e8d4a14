// Run configuration, chronological splitting, synthetic city generation,
// and the command implementations behind the command-line tool.

#pragma once

#include "prtraj/downstream.hpp"
#include "prtraj/poi.hpp"
#include "prtraj/pretrain.hpp"

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace prtraj::pipeline {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct SyntheticCitySpec {
  int m = 8;  // m x m intersections
  double seg_len_min = 80.0;
  double seg_len_max = 220.0;
  int n_categories = 5;
  int subs_per_category = 3;
  int pois_per_category = 60;
  int n_trajs = 500;
  int traj_len_min = 4;
  int traj_len_max = 24;
  double turn_bias = 0.7;  // probability of continuing straight
  std::int64_t t0 = 1704067200;
};

// Flat key=value file with `#` comments.  Unknown keys are errors so typos
// fail loudly instead of silently running defaults.
struct RunConfig {
  int d = 128;
  int heads = 4;
  int layers = 6;
  double dropout = 0.1;
  double delta = 100.0;      // POI proximity, meters
  double cell_size = 1000.0; // coarse grid cell, meters
  int n_road_types = 8;
  int len_buckets = 16;
  double len_min = 1.0;
  double len_max = 10000.0;
  int max_len = 128;
  int tz_offset_minutes = 0;
  bool use_route_choice = true;

  int batch = 64;
  double lr = 2e-4;
  double min_lr = 1e-6;
  int warmup_epochs = 5;
  int epochs = 50;
  double tau = 0.05;
  double weight_decay = 0.01;
  std::uint64_t seed = 42;

  // Evaluation protocol sizes.
  int str_queries = 5;
  int str_negatives = 20;
  int ksp_cap = 32;
  int pr_k = 10;
  double pr_delta = 0.8;

  std::string city = "the study area";
  std::string provider = "mock";  // mock | remote
  std::string remote_endpoint;
  std::string remote_model;

  std::string network, edges, registry, pois, trajectories;
  std::string cache_dir, checkpoint_dir;

  SyntheticCitySpec synth;  // `synth_*` keys

  std::string source_path;    // config file this was parsed from
  std::string source_sha256;  // digest of its bytes
};

RunConfig parse_run_config(const std::string& path);

// ---------------------------------------------------------------------------
// Dataset splitting
// ---------------------------------------------------------------------------

struct Splits {
  std::vector<geo::Trajectory> train, val, test;
};

// Sort by departure, then 70/10/20 by floor with the remainder in test.
Splits split_chronological(std::vector<geo::Trajectory> trajs);

// ---------------------------------------------------------------------------
// Synthetic city
// ---------------------------------------------------------------------------

// File contents, byte-deterministic under the rng, so a second run with the
// same seed must reproduce them exactly.
struct SyntheticCity {
  std::string network_csv;
  std::string edges_csv;
  std::string registry_csv;
  std::string poi_csv;
  std::string traj_txt;
};

SyntheticCity generate_synthetic_city(const SyntheticCitySpec& spec, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Artifact I/O
// ---------------------------------------------------------------------------

void save_matrix(const Eigen::MatrixXd& m, const std::string& path);
Eigen::MatrixXd load_matrix(const std::string& path);

// Everything the model needs at run time, assembled from the cache
// directory.  Heap-owned because `in.net` points at `net`.
struct LoadedWorld {
  geo::RoadNetwork net;
  poi::CategoryRegistry registry;
  model::ModelConfig mcfg;
  model::ModelInputs in;
  std::vector<geo::Trajectory> train, val, test;
};

std::unique_ptr<LoadedWorld> load_world(const RunConfig& cfg);

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

// Each command writes `<cache_dir>/manifest_<name>.json` recording the
// config digest, seed, input digests, and component versions.
void cmd_synth(const RunConfig& cfg);
void cmd_ingest(const RunConfig& cfg);
void cmd_describe(const RunConfig& cfg);
void cmd_pretrain(const RunConfig& cfg);
void cmd_finetune(const RunConfig& cfg, const std::string& task);
// Returns the metric report (one key per metric) as serialized JSON; also
// written to `<cache_dir>/metrics_<task>.json`.
std::string cmd_eval(const RunConfig& cfg, const std::string& task);
void cmd_embed(const RunConfig& cfg);

// Full argv-level entry point: parses flags, dispatches, maps errors to
// exit codes (0 ok, 1 input error, 2 runtime failure).
int cli_run(int argc, const char* const* argv);

}  // namespace prtraj::pipeline
