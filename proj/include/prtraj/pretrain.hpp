// Self-supervised pretraining: span masking with an MLM objective over
// segment ids, crop / temporal-perturbation augmentations with a contrastive
// objective, and the combined training loop.

#pragma once

#include "prtraj/model.hpp"

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace prtraj::pretrain {

struct MaskPlan {
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // (start, length)
  std::vector<std::size_t> masked;                         // sorted positions
  std::map<std::size_t, int> targets;                      // position -> segment id
};

// Disjoint spans with geometric lengths (mean 3), truncated so exactly
// max(1, floor(0.15 n)) positions are covered.
MaskPlan span_mask(const geo::Trajectory& traj, std::mt19937_64& rng);

// Contiguous slice left after dropping round(u * n) points (at least 1) off
// one end; a result shorter than 2 keeps the whole range.
std::pair<std::size_t, std::size_t> crop_bounds(std::size_t n, double u, bool drop_tail);
// u ~ U[0.05, 0.15], fair coin for the end; trajectories shorter than 4
// points come back unchanged.
geo::Trajectory crop_augment(const geo::Trajectory& traj, std::mt19937_64& rng);

// gap' = gap - r (gap - avg), rounded to whole seconds, clamped at 0.
std::int64_t perturb_gap(std::int64_t gap, double avg, double r);
// Each inter-point gap is rewritten toward its segment's average travel time
// with probability 0.15, r ~ U[0.15, 0.30]; timestamps rebuilt cumulatively.
geo::Trajectory temporal_perturb(const geo::Trajectory& traj, std::mt19937_64& rng,
                                 const model::AvgTimes& avg);

// Weighted cross-entropy over masked-position logits; weights carry the
// 1/(batch * masked-per-trajectory) double normalization.
ad::Var mlm_loss(ad::Tape& t, ad::Var logits, const std::vector<int>& targets,
                 const std::vector<double>& weights);

// Normalized-temperature cross-entropy over 2B stacked embeddings, rows
// 0..B-1 one view and B..2B-1 the other (row i pairs with row i +/- B).
ad::Var ntxent_loss(ad::Tape& t, ad::Var z, double tau);

struct PretrainConfig {
  int epochs = 50;
  int batch_size = 64;
  int warmup_epochs = 5;
  double lr_peak = 2e-4;
  double lr_min = 1e-6;
  double weight_decay = 0.01;
  double tau = 0.05;
  std::uint64_t seed = 42;
  std::string log_path;         // optional CSV `step,loss,mlm,cl,lr`
  std::string checkpoint_path;  // optional, written after every epoch
};

struct StepLosses {
  double total = 0.0;
  double mlm = 0.0;
  double cl = 0.0;
};

// One optimizer step over a batch: masked forward for MLM, two augmented
// views for the contrastive term, total = (mlm + cl) / 2.
StepLosses pretrain_step(nn::ParamStore& store, nn::AdamW& opt, const model::ModelConfig& cfg,
                         const model::ModelInputs& in,
                         const std::vector<const geo::Trajectory*>& batch,
                         const PretrainConfig& pcfg, double lr, std::mt19937_64& rng);

// Full loop; returns the last step's losses.  A non-finite loss aborts with
// diagnostics.
StepLosses run_pretrain(nn::ParamStore& store, const model::ModelConfig& cfg,
                        const model::ModelInputs& in,
                        const std::vector<geo::Trajectory>& trajs,
                        const PretrainConfig& pcfg);

}  // namespace prtraj::pretrain
