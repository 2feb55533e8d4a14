// Named parameter store, optimizer, initialization, and checkpoint I/O.
//
// Parameters are plain Eigen matrices owned by a ParamStore and registered in
// insertion order.  A Binder caches the tape leaf created for each parameter
// so that a parameter referenced twice in one forward pass shares a node and
// its gradient accumulates.

#pragma once

#include "prtraj/ad.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace prtraj::nn {

using Mat = Eigen::MatrixXd;

struct Param {
  std::string name;
  Mat value;
  // AdamW moments, lazily sized on first step.
  Mat m;
  Mat v;
  bool trainable = true;
};

class ParamStore {
 public:
  // Registers a new parameter; the name must be unique.
  Param& create(const std::string& name, Eigen::Index rows, Eigen::Index cols);
  Param& get(const std::string& name);
  const Param& get(const std::string& name) const;
  bool has(const std::string& name) const;
  std::size_t index_of(const std::string& name) const;
  std::vector<Param>& all() { return params_; }
  const std::vector<Param>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  // Training epoch counter carried through checkpoints.
  std::int64_t epoch = 0;

  void save(const std::string& path, bool with_optimizer_state = true) const;
  // Replaces matching parameters; throws if a stored tensor has a different
  // shape or the file lists a name the store does not know.
  void load(const std::string& path);

 private:
  std::vector<Param> params_;
  std::map<std::string, std::size_t> index_;
};

// Per-tape cache of parameter leaves.  Bind once per forward pass.
class Binder {
 public:
  Binder(ad::Tape& tape, ParamStore& store) : tape_(tape), store_(store) {}
  ad::Var operator()(const std::string& name);
  // Pulls accumulated tape gradients into `grads` keyed by parameter index.
  void collect_grads(std::map<std::size_t, Mat>& grads) const;

 private:
  ad::Tape& tape_;
  ParamStore& store_;
  std::map<std::size_t, ad::Var> bound_;
};

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

// Weight matrices: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in =
// cols.  Row vectors (rows==1: biases, offsets, attention vectors) start at
// zero, except names ending in `.gamma` (normalization gains), which start
// at one; callers zero any further tensors that must start cold (vocab head).
// Each parameter draws from its own seeded generator, so adding or removing
// one parameter never shifts another's values.
void init_params(ParamStore& store, std::uint64_t base_seed);
void init_uniform(Mat& m, double bound, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamWConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}
  // Applies one update from gradients keyed by parameter index.
  void step(ParamStore& store, const std::map<std::size_t, Mat>& grads, double lr);
  std::int64_t steps() const { return t_; }
  void set_steps(std::int64_t t) { t_ = t; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  std::int64_t t_ = 0;
};

// Linear warmup over `warmup_steps`, then cosine decay to `min_lr` at
// `total_steps`.  `step` is 0-based.
double lr_at(std::int64_t step, std::int64_t warmup_steps, std::int64_t total_steps,
             double peak_lr, double min_lr);

}  // namespace prtraj::nn
